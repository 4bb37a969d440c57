//! Streaming classification: ring-buffered ingestion that never blocks the
//! producer, hop-aligned windowed inference, majority-vote smoothing,
//! flip-rate stability, and latency benchmarking.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::models::ast::{ast_forward, AstParams};
use crate::models::cnn::{cnn_forward, CnnParams};
use crate::models::{
    ast_from_model_file, ast_to_model_file, cnn_from_model_file, cnn_to_model_file, softmax,
    ArchId, ModelFile, Standardizer,
};
use crate::quant::{quant_from_model_file, quant_to_model_file, quantized_forward, QuantizedModel};
use crate::signal::{extract_logmel, FeatureConfig, FeatureMatrix};
use crate::synth::RoadClass;

/// Smallest admissible smoothing span in milliseconds.
pub const MIN_SMOOTHING_SPAN_MS: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamConfig {
    pub window_len_samples: usize,
    pub window_hop_samples: usize,
    pub ring_capacity_samples: usize,
    pub smoothing_votes: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            window_len_samples: SAMPLE_RATE as usize,
            window_hop_samples: SAMPLE_RATE as usize / 4,
            ring_capacity_samples: 2 * SAMPLE_RATE as usize,
            smoothing_votes: 5,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len_samples == 0 || self.window_hop_samples == 0 {
            return Err(Error::invalid("window and hop must be positive"));
        }
        if self.window_hop_samples > self.window_len_samples {
            return Err(Error::invalid("hop must not exceed the window length"));
        }
        if self.ring_capacity_samples < 2 * self.window_len_samples {
            return Err(Error::invalid("ring capacity must hold at least two windows"));
        }
        if self.smoothing_votes == 0 || self.smoothing_votes % 2 == 0 {
            return Err(Error::invalid("smoothing vote count must be odd and at least 1"));
        }
        let span_ms =
            (self.smoothing_votes * self.window_hop_samples) as f64 * 1000.0 / SAMPLE_RATE as f64;
        if span_ms < MIN_SMOOTHING_SPAN_MS {
            return Err(Error::invalid(format!(
                "smoothing span {span_ms:.1} ms is under the {MIN_SMOOTHING_SPAN_MS} ms floor"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationEvent {
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub raw_label: RoadClass,
    pub smoothed_label: RoadClass,
    pub probs: [f64; 3],
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub windows_measured: usize,
    pub model_footprint_bytes: usize,
    pub dropped_samples: u64,
}

/// A loaded model of any of the three checkpoint kinds, with its feature
/// normalization. Immutable and shareable.
#[derive(Clone, Debug)]
pub enum Classifier {
    CnnF64 { params: CnnParams, norm: Standardizer },
    AstF64 { params: AstParams, norm: Standardizer },
    CnnInt8 { model: QuantizedModel },
}

impl Classifier {
    pub fn from_model_file(file: &ModelFile) -> Result<Classifier> {
        match file.arch {
            ArchId::CnnF64 => {
                let (params, norm) = cnn_from_model_file(file)?;
                Ok(Classifier::CnnF64 { params, norm })
            }
            ArchId::AstF64 => {
                let (params, norm) = ast_from_model_file(file)?;
                Ok(Classifier::AstF64 { params, norm })
            }
            ArchId::CnnInt8 => Ok(Classifier::CnnInt8 { model: quant_from_model_file(file)? }),
        }
    }

    /// (input_h, input_w) the model expects from the feature front end.
    pub fn input_dims(&self) -> (usize, usize) {
        match self {
            Classifier::CnnF64 { params, .. } => (params.shape.input_h, params.shape.input_w),
            Classifier::AstF64 { params, .. } => (params.shape.input_h, params.shape.input_w),
            Classifier::CnnInt8 { model } => (model.shape.input_h, model.shape.input_w),
        }
    }

    /// Class probabilities for raw (unstandardized) features.
    pub fn classify(&self, fm: &FeatureMatrix) -> Result<[f64; 3]> {
        let logits = match self {
            Classifier::CnnF64 { params, norm } => cnn_forward(params, &norm.apply(fm)?)?,
            Classifier::AstF64 { params, norm } => ast_forward(params, &norm.apply(fm)?)?,
            Classifier::CnnInt8 { model } => quantized_forward(model, fm)?,
        };
        let probs = softmax(&logits);
        Ok([probs[0], probs[1], probs[2]])
    }

    /// Size of the serialized checkpoint in bytes.
    pub fn footprint_bytes(&self) -> Result<usize> {
        let file = match self {
            Classifier::CnnF64 { params, norm } => cnn_to_model_file(params, norm)?,
            Classifier::AstF64 { params, norm } => ast_to_model_file(params, norm)?,
            Classifier::CnnInt8 { model } => quant_to_model_file(model),
        };
        Ok(file.byte_len())
    }
}

struct RingState {
    buf: Vec<f64>,
    /// Absolute index of the next sample to be written == total accepted.
    write_pos: u64,
    /// Absolute index of the next hop-aligned window start.
    cursor: u64,
    dropped: u64,
    closed: bool,
}

/// Streaming classifier over a drop-oldest ring buffer. `push_samples` and
/// `poll_event` may run concurrently from one producer and one consumer;
/// inference happens outside the ring lock so the producer never waits on
/// the model.
pub struct RoadStream {
    classifier: Classifier,
    config: StreamConfig,
    features: FeatureConfig,
    ring: Mutex<RingState>,
    history: Mutex<VecDeque<(RoadClass, [f64; 3])>>,
}

impl RoadStream {
    pub fn new(classifier: Classifier, config: StreamConfig) -> Result<RoadStream> {
        RoadStream::with_features(classifier, config, FeatureConfig::default())
    }

    pub fn with_features(
        classifier: Classifier,
        config: StreamConfig,
        features: FeatureConfig,
    ) -> Result<RoadStream> {
        config.validate()?;
        features.validate()?;
        Ok(RoadStream {
            classifier,
            config,
            features,
            ring: Mutex::new(RingState {
                buf: vec![0.0; config.ring_capacity_samples],
                write_pos: 0,
                cursor: 0,
                dropped: 0,
                closed: false,
            }),
            history: Mutex::new(VecDeque::new()),
        })
    }

    fn lock_ring(&self) -> std::sync::MutexGuard<'_, RingState> {
        self.ring.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Appends samples, discarding the oldest on overflow; never blocks.
    /// Returns the number accepted, which is always the full push.
    pub fn push_samples(&self, samples: &[f64]) -> Result<usize> {
        let cap = self.config.ring_capacity_samples as u64;
        let hop = self.config.window_hop_samples as u64;
        let mut ring = self.lock_ring();
        if ring.closed {
            return Err(Error::StreamClosed);
        }
        if samples.is_empty() {
            return Ok(0);
        }
        let old_begin = ring.write_pos.saturating_sub(cap);
        for &s in samples {
            let cap_usize = ring.buf.len();
            let at = (ring.write_pos % cap_usize as u64) as usize;
            ring.buf[at] = s;
            ring.write_pos += 1;
        }
        let new_begin = ring.write_pos.saturating_sub(cap);
        // Samples overwritten before the cursor reached them are data loss;
        // the cursor then jumps to the next hop-aligned surviving index.
        let lost_from = ring.cursor.max(old_begin);
        if new_begin > lost_from {
            ring.dropped += new_begin - lost_from;
        }
        if new_begin > ring.cursor {
            ring.cursor = new_begin.div_ceil(hop) * hop;
        }
        Ok(samples.len())
    }

    /// Stops accepting input; buffered windows can still be polled.
    pub fn close(&self) {
        self.lock_ring().closed = true;
    }

    /// Total samples ever accepted.
    pub fn total_pushed(&self) -> u64 {
        self.lock_ring().write_pos
    }

    /// Samples the consumer has advanced past (processed or skipped).
    pub fn consumed(&self) -> u64 {
        let ring = self.lock_ring();
        ring.cursor - ring.dropped
    }

    /// Samples buffered ahead of the consumer.
    pub fn buffered(&self) -> u64 {
        let ring = self.lock_ring();
        ring.write_pos - ring.cursor
    }

    /// Samples lost to ring overflow before they could be consumed.
    pub fn dropped_samples(&self) -> u64 {
        self.lock_ring().dropped
    }

    /// Runs one hop-aligned window through the model if enough samples are
    /// buffered; otherwise returns None.
    pub fn poll_event(&self) -> Result<Option<ClassificationEvent>> {
        let window = self.config.window_len_samples;
        let (start, samples) = {
            let mut ring = self.lock_ring();
            if ring.write_pos - ring.cursor < window as u64 {
                return Ok(None);
            }
            let start = ring.cursor;
            let cap = ring.buf.len() as u64;
            let mut samples = Vec::with_capacity(window);
            for i in 0..window as u64 {
                samples.push(ring.buf[((start + i) % cap) as usize]);
            }
            ring.cursor = start + self.config.window_hop_samples as u64;
            (start, samples)
        };

        let began = Instant::now();
        let clip = AudioClip::new(samples, SAMPLE_RATE);
        let fm = extract_logmel(&clip, &self.features)?;
        let expect = self.classifier.input_dims();
        if (fm.n_mels, fm.n_frames) != expect {
            return Err(Error::InvalidModel(format!(
                "features are {}x{}, model expects {}x{}",
                fm.n_mels, fm.n_frames, expect.0, expect.1
            )));
        }
        let probs = self.classifier.classify(&fm)?;
        let latency_ms = began.elapsed().as_secs_f64() * 1000.0;

        let raw_label = RoadClass::from_index(argmax3(&probs)).expect("three classes");
        let smoothed_label = {
            let mut history = self.history.lock().unwrap_or_else(|p| p.into_inner());
            history.push_back((raw_label, probs));
            while history.len() > self.config.smoothing_votes {
                history.pop_front();
            }
            smooth(history.make_contiguous())?
        };

        let rate = SAMPLE_RATE as f64;
        Ok(Some(ClassificationEvent {
            t_start_s: start as f64 / rate,
            t_end_s: (start + window as u64) as f64 / rate,
            raw_label,
            smoothed_label,
            probs,
            latency_ms,
        }))
    }
}

fn argmax3(xs: &[f64; 3]) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

/// Majority vote over the raw labels; ties broken by the highest mean
/// probability among the tied classes, then by class declaration order.
pub fn smooth(history: &[(RoadClass, [f64; 3])]) -> Result<RoadClass> {
    if history.is_empty() {
        return Err(Error::invalid("empty smoothing history"));
    }
    let mut votes = [0usize; 3];
    let mut prob_sum = [0.0f64; 3];
    for (label, probs) in history {
        let i = label.index();
        votes[i] += 1;
        prob_sum[i] += probs[i];
    }
    let top = *votes.iter().max().expect("three classes");
    let mut best: Option<(usize, f64)> = None;
    for i in 0..3 {
        if votes[i] != top {
            continue;
        }
        let mean = prob_sum[i] / votes[i] as f64;
        let better = match best {
            None => true,
            Some((_, best_mean)) => mean > best_mean,
        };
        if better {
            best = Some((i, mean));
        }
    }
    let (index, _) = best.expect("at least one class holds the top vote count");
    Ok(RoadClass::from_index(index).expect("three classes"))
}

/// Smoothed-label transitions per minute of stream time.
pub fn flip_rate(events: &[ClassificationEvent]) -> Result<f64> {
    if events.len() < 2 {
        return Err(Error::invalid("need at least two events for a flip rate"));
    }
    let duration_s = events.last().expect("nonempty").t_end_s - events[0].t_start_s;
    if !(duration_s > 0.0) {
        return Err(Error::invalid("events span no time"));
    }
    let flips = events.windows(2).filter(|p| p[0].smoothed_label != p[1].smoothed_label).count();
    Ok(flips as f64 / (duration_s / 60.0))
}

/// Replays the clip through the stream path `repetitions` times, timing
/// each window. Percentiles are nearest-rank over all measured windows.
pub fn bench(
    classifier: &Classifier,
    clip: &AudioClip,
    repetitions: usize,
) -> Result<LatencyStats> {
    if repetitions < 30 {
        return Err(Error::invalid("need at least 30 repetitions"));
    }
    let config = StreamConfig::default();
    if clip.samples.len() < config.window_len_samples {
        return Err(Error::invalid("clip shorter than one window"));
    }
    let per_clip =
        (clip.samples.len() - config.window_len_samples) / config.window_hop_samples + 1;
    let mut latencies = Vec::with_capacity(repetitions * per_clip);
    let mut dropped = 0u64;
    for _ in 0..repetitions {
        let stream = RoadStream::new(classifier.clone(), config)?;
        let mut produced = 0usize;
        for chunk in clip.samples.chunks(config.window_hop_samples) {
            stream.push_samples(chunk)?;
            while let Some(event) = stream.poll_event()? {
                latencies.push(event.latency_ms);
                produced += 1;
            }
        }
        if produced != per_clip {
            return Err(Error::invalid(format!(
                "stream produced {produced} windows, expected {per_clip}"
            )));
        }
        dropped += stream.dropped_samples();
    }
    latencies.sort_by(f64::total_cmp);
    let nearest = |q: f64| -> f64 {
        let n = latencies.len();
        let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
        latencies[rank - 1]
    };
    Ok(LatencyStats {
        p50_ms: nearest(0.50),
        p95_ms: nearest(0.95),
        max_ms: *latencies.last().expect("at least one window"),
        windows_measured: latencies.len(),
        model_footprint_bytes: classifier.footprint_bytes()?,
        dropped_samples: dropped,
    })
}
