//! `roadnoise`: one binary wiring the toolkit into reproducible pipelines.
//! Subcommands cover corpus synthesis, feature extraction, training,
//! quantization, streaming classification, gradient checks and latency
//! benchmarks. Exit codes: 0 success, 1 domain errors, 2 I/O errors.

mod config;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{merged, require, FileConfig};
use roadnoise_core::audio::sample_from_i16;
use roadnoise_core::models::{cnn_from_model_file, ModelFile};
use roadnoise_core::signal::write_feature_csv;
use roadnoise_core::synth::MANIFEST_NAME;
use roadnoise_core::{
    bench, extract_logmel, grad_check, load_examples, quant_to_model_file, quantize_model,
    read_manifest, read_wav, synth_corpus, train, write_report, Arch, AudioClip, Classifier,
    Error, FeatureConfig, Result, RoadStream, StreamConfig, TrainConfig, SAMPLE_RATE,
};

#[derive(Parser)]
#[command(
    name = "roadnoise",
    version,
    about = "Road-type classification from synthetic tyre noise",
    disable_help_subcommand = true
)]
struct Cli {
    /// Config file with key=value defaults for any long flag.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; all randomness derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a labeled corpus of road-noise WAV clips plus a manifest.
    Synth {
        /// Output directory for WAVs and manifest.jsonl.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Clips to render per road class.
        #[arg(long)]
        clips_per_class: Option<usize>,
        /// Clip length in seconds.
        #[arg(long)]
        duration_s: Option<f64>,
        /// Replace an existing manifest instead of refusing.
        #[arg(long)]
        overwrite: bool,
    },
    /// Extract log-mel features for every manifest entry into CSV files.
    Features {
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Train a classifier on a synthesized corpus and save a checkpoint.
    Train {
        /// Architecture: cnn or ast.
        #[arg(long)]
        arch: Option<String>,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint path; the epoch report lands next to it.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Learning rate (default 0.01).
        #[arg(long)]
        lr: Option<f64>,
        /// Momentum coefficient (default 0.9).
        #[arg(long)]
        momentum: Option<f64>,
        /// Minibatch size (default 16).
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Quantize a float CNN checkpoint to int8 using calibration clips.
    Quantize {
        /// Float CNN checkpoint to quantize.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Manifest of calibration clips (32 or more).
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Stream audio through a classifier, writing one JSON event per window.
    Classify {
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// WAV file to classify.
        #[arg(long, value_name = "PATH")]
        wav: Option<PathBuf>,
        /// Read raw 16-bit LE mono 44.1 kHz samples from standard input.
        #[arg(long)]
        stdin_pcm: bool,
        /// Output JSONL event log.
        #[arg(long, value_name = "PATH")]
        events: Option<PathBuf>,
    },
    /// Compare analytic gradients against central differences on tiny models.
    Gradcheck {
        /// Architecture: cnn or ast.
        #[arg(long)]
        arch: Option<String>,
    },
    /// Measure per-window latency over repeated runs of one clip.
    Bench {
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        wav: Option<PathBuf>,
        /// Fresh-stream repetitions (30 or more).
        #[arg(long)]
        repetitions: Option<usize>,
    },
}

/// Settings shared by every subcommand, resolved once up front.
struct Ctx {
    file: FileConfig,
    seed: u64,
    features: FeatureConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Io { .. } => 2,
                _ => 1,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::parse(path)?,
        None => FileConfig::empty(),
    };
    let seed = match cli.seed {
        Some(s) => s,
        None => file.get("seed")?.unwrap_or(0),
    };
    // Validated eagerly so a bad feature key fails whatever the subcommand.
    let features = file.feature_config()?;
    let ctx = Ctx { file, seed, features };

    match cli.cmd {
        Cmd::Synth { out, clips_per_class, duration_s, overwrite } => {
            cmd_synth(&ctx, out, clips_per_class, duration_s, overwrite)
        }
        Cmd::Features { manifest, out_dir } => cmd_features(&ctx, manifest, out_dir),
        Cmd::Train { arch, manifest, epochs, out, lr, momentum, batch_size } => {
            cmd_train(&ctx, arch, manifest, epochs, out, lr, momentum, batch_size)
        }
        Cmd::Quantize { model, manifest, out } => cmd_quantize(&ctx, model, manifest, out),
        Cmd::Classify { model, wav, stdin_pcm, events } => {
            cmd_classify(&ctx, model, wav, stdin_pcm, events)
        }
        Cmd::Gradcheck { arch } => cmd_gradcheck(&ctx, arch),
        Cmd::Bench { model, wav, repetitions } => cmd_bench(&ctx, model, wav, repetitions),
    }
}

fn parse_arch(name: &str) -> Result<Arch> {
    name.parse()
}

/// Directory the manifest's relative clip paths resolve against.
fn manifest_base(manifest_path: &Path) -> PathBuf {
    match manifest_path.parent() {
        Some(p) if p != Path::new("") => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn cmd_synth(
    ctx: &Ctx,
    out: Option<PathBuf>,
    clips_per_class: Option<usize>,
    duration_s: Option<f64>,
    overwrite: bool,
) -> Result<()> {
    let out = require(out, &ctx.file, "out")?;
    let clips_per_class = require(clips_per_class, &ctx.file, "clips_per_class")?;
    let duration_s = match duration_s {
        Some(d) => d,
        None => ctx.file.get("duration_s")?.unwrap_or(1.0),
    };
    let overwrite = overwrite || ctx.file.get_flag("overwrite")?;
    synth_corpus(&out, clips_per_class, duration_s, ctx.seed, overwrite)?;
    println!("{}", out.join(MANIFEST_NAME).display());
    Ok(())
}

fn cmd_features(ctx: &Ctx, manifest: Option<PathBuf>, out_dir: Option<PathBuf>) -> Result<()> {
    let manifest_path: PathBuf = require(manifest, &ctx.file, "manifest")?;
    let out_dir: PathBuf = require(out_dir, &ctx.file, "out_dir")?;
    let manifest = read_manifest(&manifest_path)?;
    let base = manifest_base(&manifest_path);
    manifest.validate(&base)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    for entry in &manifest.entries {
        let clip = read_wav(&base.join(&entry.path))?;
        let fm = extract_logmel(&clip, &ctx.features)?;
        let csv = out_dir.join(Path::new(&entry.path).with_extension("csv"));
        if let Some(parent) = csv.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_feature_csv(&csv, &fm)?;
    }
    println!("{}", out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    ctx: &Ctx,
    arch: Option<String>,
    manifest: Option<PathBuf>,
    epochs: Option<usize>,
    out: Option<PathBuf>,
    lr: Option<f64>,
    momentum: Option<f64>,
    batch_size: Option<usize>,
) -> Result<()> {
    let arch = parse_arch(&require(arch, &ctx.file, "arch")?)?;
    let manifest_path: PathBuf = require(manifest, &ctx.file, "manifest")?;
    let epochs = require(epochs, &ctx.file, "epochs")?;
    let out: PathBuf = require(out, &ctx.file, "out")?;

    let manifest = read_manifest(&manifest_path)?;
    let base = manifest_base(&manifest_path);
    let examples = load_examples(&manifest, &base, &ctx.features)?;

    let mut cfg = TrainConfig::new(arch, epochs, ctx.seed);
    if let Some(v) = merged(lr, &ctx.file, "lr")? {
        cfg.learning_rate = v;
    }
    if let Some(v) = merged(momentum, &ctx.file, "momentum")? {
        cfg.momentum = v;
    }
    if let Some(v) = merged(batch_size, &ctx.file, "batch_size")? {
        cfg.batch_size = v;
    }
    let outcome = train(&cfg, &examples)?;
    outcome.model.to_model_file(&outcome.norm)?.save(&out)?;
    write_report(&out.with_extension("report.jsonl"), &outcome.report)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_quantize(
    ctx: &Ctx,
    model: Option<PathBuf>,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let model_path: PathBuf = require(model, &ctx.file, "model")?;
    let manifest_path: PathBuf = require(manifest, &ctx.file, "manifest")?;
    let out: PathBuf = require(out, &ctx.file, "out")?;

    let (params, norm) = cnn_from_model_file(&ModelFile::load(&model_path)?)?;
    let manifest = read_manifest(&manifest_path)?;
    let base = manifest_base(&manifest_path);
    let mut calib = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let clip = read_wav(&base.join(&entry.path))?;
        calib.push(extract_logmel(&clip, &ctx.features)?);
    }
    let qm = quantize_model(&params, &norm, &calib)?;
    quant_to_model_file(&qm).save(&out)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_classify(
    ctx: &Ctx,
    model: Option<PathBuf>,
    wav: Option<PathBuf>,
    stdin_pcm: bool,
    events: Option<PathBuf>,
) -> Result<()> {
    let model_path: PathBuf = require(model, &ctx.file, "model")?;
    let events_path: PathBuf = require(events, &ctx.file, "events")?;
    let wav = match wav {
        Some(p) => Some(p),
        None => ctx.file.get("wav")?,
    };
    let stdin_pcm = stdin_pcm || ctx.file.get_flag("stdin_pcm")?;
    if wav.is_some() == stdin_pcm {
        return Err(Error::invalid("pass exactly one of --wav and --stdin-pcm"));
    }

    let classifier = Classifier::from_model_file(&ModelFile::load(&model_path)?)?;
    let stream_config = StreamConfig::default();
    let hop = stream_config.window_hop_samples;
    let window = stream_config.window_len_samples;
    let stream = RoadStream::with_features(classifier, stream_config, ctx.features.clone())?;

    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&events_path).map_err(|e| Error::io(&events_path, e))?,
    );

    if let Some(wav_path) = wav {
        let clip = read_wav(&wav_path)?;
        if clip.sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedRate(clip.sample_rate));
        }
        if clip.samples.len() < window {
            return Err(Error::invalid("clip shorter than one window"));
        }
        for chunk in clip.samples.chunks(hop) {
            stream.push_samples(chunk)?;
            drain_events(&stream, &mut out, &events_path)?;
        }
    } else {
        read_stdin_pcm(&stream, &mut out, &events_path)?;
    }
    stream.close();
    drain_events(&stream, &mut out, &events_path)?;
    out.flush().map_err(|e| Error::io(&events_path, e))?;
    println!("{}", events_path.display());
    Ok(())
}

/// Writes every ready event as one JSON line. Wall-clock latency varies run
/// to run and event logs are part of the reproducibility contract, so the
/// latency field is zeroed here; the bench subcommand owns latency reporting.
fn drain_events(
    stream: &RoadStream,
    out: &mut impl Write,
    events_path: &Path,
) -> Result<()> {
    while let Some(mut event) = stream.poll_event()? {
        event.latency_ms = 0.0;
        let line =
            serde_json::to_string(&event).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(events_path, e))?;
    }
    Ok(())
}

/// Streams raw 16-bit LE mono samples from standard input until EOF,
/// classifying as windows fill.
fn read_stdin_pcm(
    stream: &RoadStream,
    out: &mut impl Write,
    events_path: &Path,
) -> Result<()> {
    let stdin_err = |e| Error::io("<stdin>", e);
    let mut stdin = std::io::stdin().lock();
    let mut buf = [0u8; 8192];
    let mut carry: Option<u8> = None;
    loop {
        let n = stdin.read(&mut buf).map_err(stdin_err)?;
        if n == 0 {
            break;
        }
        let mut bytes = Vec::with_capacity(n + 1);
        if let Some(b) = carry.take() {
            bytes.push(b);
        }
        bytes.extend_from_slice(&buf[..n]);
        if bytes.len() % 2 == 1 {
            carry = bytes.pop();
        }
        let samples: Vec<f64> = bytes
            .chunks_exact(2)
            .map(|c| sample_from_i16(i16::from_le_bytes([c[0], c[1]])))
            .collect();
        stream.push_samples(&samples)?;
        drain_events(stream, out, events_path)?;
    }
    if carry.is_some() {
        return Err(Error::invalid(
            "odd byte count on standard input; expected 16-bit samples",
        ));
    }
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx, arch: Option<String>) -> Result<()> {
    let arch = parse_arch(&require(arch, &ctx.file, "arch")?)?;
    let max_rel_err = grad_check(arch, ctx.seed)?;
    println!("max_rel_err={max_rel_err:e}");
    Ok(())
}

fn cmd_bench(
    ctx: &Ctx,
    model: Option<PathBuf>,
    wav: Option<PathBuf>,
    repetitions: Option<usize>,
) -> Result<()> {
    let model_path: PathBuf = require(model, &ctx.file, "model")?;
    let wav_path: PathBuf = require(wav, &ctx.file, "wav")?;
    let repetitions = require(repetitions, &ctx.file, "repetitions")?;
    let classifier = Classifier::from_model_file(&ModelFile::load(&model_path)?)?;
    let clip: AudioClip = read_wav(&wav_path)?;
    let stats = bench(&classifier, &clip, repetitions)?;
    let line = serde_json::to_string(&stats).map_err(|e| Error::invalid(e.to_string()))?;
    println!("{line}");
    Ok(())
}
