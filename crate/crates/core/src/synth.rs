//! Physically grounded road-noise synthesis.
//!
//! Each surface is a small spectral recipe: a tread-impact band at
//! 50-1000 Hz with a downward tilt, an air-pumping band at 1-4 kHz, a
//! Helmholtz cavity resonance near 225 Hz, and optionally amplitude
//! modulation (paver patterns) or periodic impulses (joints, pipe edges).
//! Broadband gain follows the speed power law: 20 log10(v / v_ref), which
//! is 6.02 dB per doubling. Synthesis shapes white Gaussian noise in the
//! frequency domain over 8192-sample segments, overlap-added at 50% with
//! Hann windows, so every clip is a pure function of its seed.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::fft::{fft_real, ifft};
use crate::rng::{derive_seed, Rng, SplitMix64};
use crate::signal::hann_window;

pub const SPEED_MIN_KMH: f64 = 40.0;
pub const SPEED_MAX_KMH: f64 = 90.0;
pub const REF_SPEED_KMH: f64 = 60.0;

/// Uniform output gain so corpora sit well above 16-bit quantization while
/// leaving headroom under the 0.9 peak ceiling at 90 km/h.
const MASTER_GAIN_DB: f64 = 24.0;

/// Spectral floor outside the modeled bands.
const FLOOR_DB: f64 = -120.0;

const SEGMENT_LEN: usize = 8192;
const SEGMENT_HOP: usize = SEGMENT_LEN / 2;

const AM_DEPTH: f64 = 0.6;
const PEAK_CEILING: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadClass {
    RoughAsphalt,
    SmoothAsphalt,
    Other,
}

impl RoadClass {
    pub const ALL: [RoadClass; 3] =
        [RoadClass::RoughAsphalt, RoadClass::SmoothAsphalt, RoadClass::Other];

    /// Index used for logits, labels and tie-breaking, in declaration order.
    pub fn index(self) -> usize {
        match self {
            RoadClass::RoughAsphalt => 0,
            RoadClass::SmoothAsphalt => 1,
            RoadClass::Other => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<RoadClass> {
        RoadClass::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoadClass::RoughAsphalt => "rough_asphalt",
            RoadClass::SmoothAsphalt => "smooth_asphalt",
            RoadClass::Other => "other",
        }
    }
}

impl std::fmt::Display for RoadClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubProfile {
    ConcretePavement,
    BelgianPavement,
    ViennaPavement,
    Pipes,
}

impl SubProfile {
    pub const ALL: [SubProfile; 4] = [
        SubProfile::ConcretePavement,
        SubProfile::BelgianPavement,
        SubProfile::ViennaPavement,
        SubProfile::Pipes,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubProfile::ConcretePavement => "concrete_pavement",
            SubProfile::BelgianPavement => "belgian_pavement",
            SubProfile::ViennaPavement => "vienna_pavement",
            SubProfile::Pipes => "pipes",
        }
    }
}

impl std::fmt::Display for SubProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A noise band: flat or tilted magnitude between two edges. Levels are dB
/// relative to the common synthesis reference at v_ref.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
    pub level_db_at_ref: f64,
    pub tilt_db_per_octave: f64,
}

/// Narrowband cavity resonance added on top of the band spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub level_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceProfile {
    pub class: RoadClass,
    pub sub_profile: Option<SubProfile>,
    pub tread: Band,
    pub pumping: Band,
    pub helmholtz: Resonance,
    /// Base modulation rate at v_ref; the effective rate scales with speed.
    /// Zero means no modulation.
    pub am_rate_hz: f64,
    /// Impact events per second, independent of speed. Zero means none.
    pub impulse_rate_per_s: f64,
    pub ref_speed_kmh: f64,
}

impl SurfaceProfile {
    pub fn validate(&self) -> Result<()> {
        let ok_band = |b: &Band| b.f_lo_hz >= 0.0 && b.f_lo_hz < b.f_hi_hz;
        if !ok_band(&self.tread) || !ok_band(&self.pumping) {
            return Err(Error::invalid("profile band edges must satisfy 0 <= lo < hi"));
        }
        if self.helmholtz.center_hz <= 0.0 || self.helmholtz.bandwidth_hz <= 0.0 {
            return Err(Error::invalid("helmholtz resonance needs positive center and bandwidth"));
        }
        if self.am_rate_hz < 0.0 || self.impulse_rate_per_s < 0.0 {
            return Err(Error::invalid("modulation and impulse rates cannot be negative"));
        }
        if self.ref_speed_kmh <= 0.0 {
            return Err(Error::invalid("reference speed must be positive"));
        }
        match (self.class, self.sub_profile) {
            (RoadClass::Other, None) => {
                Err(Error::invalid("class 'other' requires a sub profile"))
            }
            (RoadClass::Other, Some(_)) => Ok(()),
            (_, Some(sp)) => Err(Error::invalid(format!(
                "sub profile {sp} only applies to class 'other'"
            ))),
            (_, None) => Ok(()),
        }
    }
}

/// The built-in surface table. Tread and pumping edges are fixed at
/// 50-1000 Hz and 1-4 kHz; rough asphalt runs exactly 3 dB above smooth in
/// both the tread band and the cavity resonance so the measured tread-band
/// offset is the level offset. Pumping levels differ strongly per surface
/// and carry most of the speed-invariant class signature.
pub fn default_profile(class: RoadClass, sub: Option<SubProfile>) -> Result<SurfaceProfile> {
    let tread = |level: f64, tilt: f64| Band {
        f_lo_hz: 50.0,
        f_hi_hz: 1000.0,
        level_db_at_ref: level,
        tilt_db_per_octave: tilt,
    };
    let pumping = |level: f64| Band {
        f_lo_hz: 1000.0,
        f_hi_hz: 4000.0,
        level_db_at_ref: level,
        tilt_db_per_octave: 0.0,
    };
    let helm = |center: f64, bw: f64, level: f64| Resonance {
        center_hz: center,
        bandwidth_hz: bw,
        level_db: level,
    };
    let profile = |tr, pu, he, am, imp| SurfaceProfile {
        class,
        sub_profile: sub,
        tread: tr,
        pumping: pu,
        helmholtz: he,
        am_rate_hz: am,
        impulse_rate_per_s: imp,
        ref_speed_kmh: REF_SPEED_KMH,
    };
    let built = match (class, sub) {
        (RoadClass::SmoothAsphalt, None) => profile(
            tread(-26.0, -6.0),
            pumping(-60.0),
            helm(225.0, 30.0, -29.0),
            0.0,
            0.0,
        ),
        (RoadClass::RoughAsphalt, None) => profile(
            tread(-23.0, -6.0),
            pumping(-48.0),
            helm(225.0, 30.0, -26.0),
            0.0,
            0.0,
        ),
        (RoadClass::Other, Some(SubProfile::ConcretePavement)) => profile(
            tread(-24.0, -6.5),
            pumping(-55.0),
            helm(225.0, 30.0, -27.0),
            0.0,
            8.0,
        ),
        (RoadClass::Other, Some(SubProfile::BelgianPavement)) => profile(
            tread(-24.5, -5.5),
            pumping(-53.0),
            helm(225.0, 30.0, -27.5),
            30.0,
            0.0,
        ),
        (RoadClass::Other, Some(SubProfile::ViennaPavement)) => profile(
            tread(-25.5, -7.0),
            pumping(-56.0),
            helm(210.0, 30.0, -28.0),
            33.0,
            0.0,
        ),
        (RoadClass::Other, Some(SubProfile::Pipes)) => profile(
            tread(-25.0, -6.0),
            pumping(-54.0),
            helm(240.0, 35.0, -27.5),
            0.0,
            3.0,
        ),
        (RoadClass::Other, None) => {
            return Err(Error::invalid("class 'other' requires a sub profile"))
        }
        (_, Some(sp)) => {
            return Err(Error::invalid(format!(
                "sub profile {sp} only applies to class 'other'"
            )))
        }
    };
    Ok(built)
}

/// All six built-in profiles, asphalts first then the Other sub-surfaces.
pub fn all_default_profiles() -> Vec<SurfaceProfile> {
    let mut out = vec![
        default_profile(RoadClass::RoughAsphalt, None).unwrap(),
        default_profile(RoadClass::SmoothAsphalt, None).unwrap(),
    ];
    for sub in SubProfile::ALL {
        out.push(default_profile(RoadClass::Other, Some(sub)).unwrap());
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub profile: SurfaceProfile,
    pub speed_kmh: f64,
    pub duration_s: f64,
    pub seed: u64,
}

fn db_to_amp(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// Target magnitude per frequency for the noise shaper.
fn magnitude_at(profile: &SurfaceProfile, f: f64) -> f64 {
    let band_gain = |b: &Band| {
        if f >= b.f_lo_hz && f <= b.f_hi_hz && f > 0.0 {
            let tilt = b.tilt_db_per_octave * (f / b.f_lo_hz.max(1e-6)).log2();
            db_to_amp(b.level_db_at_ref + tilt + MASTER_GAIN_DB)
        } else {
            0.0
        }
    };
    let mut g = db_to_amp(FLOOR_DB + MASTER_GAIN_DB);
    g = g.max(band_gain(&profile.tread));
    // The pumping band starts where the tread band ends; the shared edge
    // belongs to the tread band.
    if f > profile.pumping.f_lo_hz {
        g = g.max(band_gain(&profile.pumping));
    }
    let h = &profile.helmholtz;
    let sigma = h.bandwidth_hz / 2.354_820_045_030_949_3; // FWHM to sigma
    g += db_to_amp(h.level_db + MASTER_GAIN_DB)
        * (-(f - h.center_hz) * (f - h.center_hz) / (2.0 * sigma * sigma)).exp();
    g
}

/// Per-sub-profile impact transient: (amplitude factor, carrier Hz, decay s).
fn impulse_params(sub: Option<SubProfile>) -> (f64, f64, f64) {
    match sub {
        Some(SubProfile::Pipes) => (0.35, 600.0, 0.008),
        _ => (0.18, 400.0, 0.006),
    }
}

/// Renders one clip. Pure in the spec: same inputs give identical samples.
pub fn synth_clip(spec: &SynthSpec) -> Result<AudioClip> {
    spec.profile.validate()?;
    if !(SPEED_MIN_KMH..=SPEED_MAX_KMH).contains(&spec.speed_kmh) {
        return Err(Error::invalid(format!(
            "speed {} km/h outside supported range [{SPEED_MIN_KMH}, {SPEED_MAX_KMH}]",
            spec.speed_kmh
        )));
    }
    if !(spec.duration_s >= 0.25 && spec.duration_s.is_finite()) {
        return Err(Error::invalid(format!(
            "duration {} s too short, need at least 0.25 s",
            spec.duration_s
        )));
    }
    let fs = SAMPLE_RATE as f64;
    let n = (spec.duration_s * fs).round() as usize;
    let mut rng = Rng::new(spec.seed);
    let window = hann_window(SEGMENT_LEN)?;
    let bin_hz = fs / SEGMENT_LEN as f64;
    let mag: Vec<f64> = (0..=SEGMENT_LEN / 2)
        .map(|k| magnitude_at(&spec.profile, k as f64 * bin_hz))
        .collect();

    // Shaped noise, 50% overlap-add. The first segment starts half a hop
    // early so the window sum is flat from sample zero.
    let mut out = vec![0.0f64; n];
    let mut offset: isize = -(SEGMENT_HOP as isize);
    while offset < n as isize {
        let white: Vec<f64> = (0..SEGMENT_LEN).map(|_| rng.gaussian()).collect();
        let mut spec_buf = fft_real(&white)?;
        for (k, &g) in mag.iter().enumerate() {
            spec_buf[k] *= g;
            if k > 0 && k < SEGMENT_LEN / 2 {
                spec_buf[SEGMENT_LEN - k] *= g;
            }
        }
        let shaped = ifft(&spec_buf)?;
        for (j, (&w, c)) in window.iter().zip(&shaped).enumerate() {
            let idx = offset + j as isize;
            if idx >= 0 && (idx as usize) < n {
                out[idx as usize] += w * c.re;
            }
        }
        offset += SEGMENT_HOP as isize;
    }

    // Paver-pattern modulation; the rate tracks speed, the power does not.
    if spec.profile.am_rate_hz > 0.0 {
        let rate = spec.profile.am_rate_hz * spec.speed_kmh / spec.profile.ref_speed_kmh;
        let norm = 1.0 + AM_DEPTH;
        for (i, s) in out.iter_mut().enumerate() {
            let phase = 2.0 * std::f64::consts::PI * rate * i as f64 / fs;
            *s *= (1.0 + AM_DEPTH * phase.sin()) / norm;
        }
    }

    // Joint and edge impacts: jittered periodic decaying tone bursts.
    if spec.profile.impulse_rate_per_s > 0.0 {
        let (factor, carrier, decay) = impulse_params(spec.profile.sub_profile);
        let amp = factor * db_to_amp(spec.profile.tread.level_db_at_ref + MASTER_GAIN_DB);
        let period = 1.0 / spec.profile.impulse_rate_per_s;
        let count = (spec.duration_s * spec.profile.impulse_rate_per_s).floor() as usize;
        let burst_len = (0.03 * fs) as usize;
        for i in 0..count {
            let jitter = 0.3 * (rng.u01() - 0.5);
            let t0 = (i as f64 + 0.5 + jitter) * period;
            let start = (t0 * fs).round() as usize;
            for j in 0..burst_len {
                let idx = start + j;
                if idx >= n {
                    break;
                }
                let t = j as f64 / fs;
                out[idx] +=
                    amp * (-t / decay).exp() * (2.0 * std::f64::consts::PI * carrier * t).sin();
            }
        }
    }

    // Speed power law: 20 log10(v / v_ref) dB is a plain factor of v/v_ref.
    let gain = spec.speed_kmh / spec.profile.ref_speed_kmh;
    for s in out.iter_mut() {
        *s *= gain;
    }

    // Peak guard. Levels are tuned so this stays inactive in practice; it
    // exists so no parameter choice can clip the 16-bit output.
    let peak = out.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    if peak > PEAK_CEILING {
        let scale = PEAK_CEILING / peak;
        for s in out.iter_mut() {
            *s *= scale;
        }
    }
    Ok(AudioClip::new(out, SAMPLE_RATE))
}

/// Welch power spectral density: 1024-sample Hann frames, 50% overlap,
/// one-sided, in units of power per Hz.
pub fn welch_psd(clip: &AudioClip) -> Result<Vec<f64>> {
    const FRAME: usize = 1024;
    const HOP: usize = FRAME / 2;
    if clip.samples.len() < FRAME {
        return Err(Error::invalid(format!(
            "clip of {} samples is shorter than one 1024-sample frame",
            clip.samples.len()
        )));
    }
    let window = hann_window(FRAME)?;
    let wss: f64 = window.iter().map(|w| w * w).sum();
    let fs = clip.sample_rate as f64;
    let n_frames = 1 + (clip.samples.len() - FRAME) / HOP;
    let mut acc = vec![0.0f64; FRAME / 2 + 1];
    for t in 0..n_frames {
        let frame = &clip.samples[t * HOP..t * HOP + FRAME];
        let windowed: Vec<f64> = frame.iter().zip(&window).map(|(x, w)| x * w).collect();
        let spec = fft_real(&windowed)?;
        for (k, a) in acc.iter_mut().enumerate() {
            *a += spec[k].norm_sqr();
        }
    }
    let base = 1.0 / (fs * wss * n_frames as f64);
    for (k, a) in acc.iter_mut().enumerate() {
        let one_sided = if k == 0 || k == FRAME / 2 { 1.0 } else { 2.0 };
        *a *= base * one_sided;
    }
    Ok(acc)
}

/// Band power in dB: the Welch PSD integrated over [f_lo, f_hi]. Silence
/// floors at -200 dB.
pub fn band_level(clip: &AudioClip, f_lo_hz: f64, f_hi_hz: f64) -> Result<f64> {
    if !(f_lo_hz >= 0.0 && f_lo_hz < f_hi_hz) {
        return Err(Error::invalid(format!(
            "empty band [{f_lo_hz}, {f_hi_hz}]"
        )));
    }
    if f_hi_hz > clip.sample_rate as f64 / 2.0 {
        return Err(Error::invalid(format!(
            "band edge {f_hi_hz} Hz is above Nyquist"
        )));
    }
    let psd = welch_psd(clip)?;
    let bin_hz = clip.sample_rate as f64 / 1024.0;
    let power: f64 = psd
        .iter()
        .enumerate()
        .filter(|(k, _)| {
            let f = *k as f64 * bin_hz;
            f >= f_lo_hz && f <= f_hi_hz
        })
        .map(|(_, p)| p * bin_hz)
        .sum();
    if power <= 0.0 {
        return Ok(-200.0);
    }
    Ok((10.0 * power.log10()).max(-200.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: RoadClass,
    pub sub_profile: Option<SubProfile>,
    pub speed_kmh: f64,
    pub seed: u64,
    pub duration_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

impl CorpusManifest {
    /// Checks paths resolve (relative to `base_dir`), are unique, and
    /// speeds sit in the supported range.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::invalid(format!("duplicate manifest path {}", e.path)));
            }
            let full = base_dir.join(&e.path);
            if !full.is_file() {
                return Err(Error::invalid(format!(
                    "manifest references missing file {}",
                    full.display()
                )));
            }
            if !(SPEED_MIN_KMH..=SPEED_MAX_KMH).contains(&e.speed_kmh) {
                return Err(Error::invalid(format!(
                    "manifest speed {} km/h out of range for {}",
                    e.speed_kmh, e.path
                )));
            }
            if (e.label == RoadClass::Other) != e.sub_profile.is_some() {
                return Err(Error::invalid(format!(
                    "sub profile must be present exactly for label 'other' ({})",
                    e.path
                )));
            }
        }
        Ok(())
    }
}

pub fn write_manifest(path: &Path, manifest: &CorpusManifest) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    for entry in &manifest.entries {
        let line = serde_json::to_string(entry)
            .map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            Error::invalid(format!("{}:{}: bad manifest line: {e}", path.display(), i + 1))
        })?;
        entries.push(entry);
    }
    Ok(CorpusManifest { entries })
}

/// Generates a labeled corpus: `clips_per_class` clips for each of the
/// three classes, the Other class cycling through its sub-surfaces. Speeds
/// are drawn uniformly from the supported range; every entry's seed is
/// `derive_seed(master_seed, global_index)`, so the whole corpus is a
/// function of `master_seed` and any single clip can be re-rendered from
/// its manifest line alone.
pub fn synth_corpus(
    out_dir: &Path,
    clips_per_class: usize,
    duration_s: f64,
    master_seed: u64,
    overwrite: bool,
) -> Result<CorpusManifest> {
    if clips_per_class == 0 {
        return Err(Error::invalid("clips_per_class must be at least 1"));
    }
    let manifest_path = out_dir.join(MANIFEST_NAME);
    if manifest_path.exists() && !overwrite {
        return Err(Error::invalid(format!(
            "{} already exists; pass overwrite to replace it",
            manifest_path.display()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    let mut global_idx = 0u64;
    for class in RoadClass::ALL {
        for i in 0..clips_per_class {
            let sub = match class {
                RoadClass::Other => Some(SubProfile::ALL[i % SubProfile::ALL.len()]),
                _ => None,
            };
            let seed = derive_seed(master_seed, global_idx);
            global_idx += 1;
            let mut sm = SplitMix64::new(seed);
            let u = (sm.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let speed = SPEED_MIN_KMH + (SPEED_MAX_KMH - SPEED_MIN_KMH) * u;
            let profile = default_profile(class, sub)?;
            let clip = synth_clip(&SynthSpec {
                profile,
                speed_kmh: speed,
                duration_s,
                seed,
            })?;
            let name = format!("{class}_{i:04}.wav");
            write_wav(&out_dir.join(&name), &clip)?;
            entries.push(ManifestEntry {
                path: name,
                label: class,
                sub_profile: sub,
                speed_kmh: speed,
                seed,
                duration_s,
            });
        }
    }
    let manifest = CorpusManifest { entries };
    write_manifest(&manifest_path, &manifest)?;
    Ok(manifest)
}

/// Re-renders the clip a manifest entry describes.
pub fn resynth_entry(entry: &ManifestEntry) -> Result<AudioClip> {
    let profile = default_profile(entry.label, entry.sub_profile)?;
    synth_clip(&SynthSpec {
        profile,
        speed_kmh: entry.speed_kmh,
        duration_s: entry.duration_s,
        seed: entry.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_for(class: RoadClass, sub: Option<SubProfile>, speed: f64, seed: u64) -> AudioClip {
        synth_clip(&SynthSpec {
            profile: default_profile(class, sub).unwrap(),
            speed_kmh: speed,
            duration_s: 1.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn profile_table_shape() {
        let smooth = default_profile(RoadClass::SmoothAsphalt, None).unwrap();
        let rough = default_profile(RoadClass::RoughAsphalt, None).unwrap();
        for p in all_default_profiles() {
            p.validate().unwrap();
            assert_eq!(p.tread.f_lo_hz, 50.0);
            assert_eq!(p.tread.f_hi_hz, 1000.0);
            assert_eq!(p.pumping.f_lo_hz, 1000.0);
            assert_eq!(p.pumping.f_hi_hz, 4000.0);
            assert_eq!(p.ref_speed_kmh, 60.0);
        }
        // Smooth asphalt: steady surface, no texture events.
        assert_eq!(smooth.tread.tilt_db_per_octave, -6.0);
        assert_eq!(smooth.am_rate_hz, 0.0);
        assert_eq!(smooth.impulse_rate_per_s, 0.0);
        // Roughness offset sits mid [2, 4] dB, and the cavity term moves in
        // lockstep so the measured band offset equals the field offset.
        let offset = rough.tread.level_db_at_ref - smooth.tread.level_db_at_ref;
        assert_eq!(offset, 3.0);
        assert!((2.0..=4.0).contains(&offset));
        assert_eq!(
            rough.helmholtz.level_db - smooth.helmholtz.level_db,
            offset
        );
        assert_eq!(smooth.helmholtz.center_hz, 225.0);
        assert_eq!(smooth.helmholtz.bandwidth_hz, 30.0);
    }

    #[test]
    fn other_profiles_have_their_textures() {
        let concrete =
            default_profile(RoadClass::Other, Some(SubProfile::ConcretePavement)).unwrap();
        assert!(concrete.impulse_rate_per_s > 0.0);
        assert_eq!(concrete.am_rate_hz, 0.0);
        let pipes = default_profile(RoadClass::Other, Some(SubProfile::Pipes)).unwrap();
        assert!(pipes.impulse_rate_per_s > 0.0);
        for sub in [SubProfile::BelgianPavement, SubProfile::ViennaPavement] {
            let p = default_profile(RoadClass::Other, Some(sub)).unwrap();
            assert!(p.am_rate_hz > 0.0);
            assert_eq!(p.impulse_rate_per_s, 0.0);
            // Effective AM rate stays in 20..50 Hz across the speed range.
            for speed in [SPEED_MIN_KMH, SPEED_MAX_KMH] {
                let eff = p.am_rate_hz * speed / p.ref_speed_kmh;
                assert!((20.0..=50.0).contains(&eff), "{sub} at {speed}: {eff}");
            }
        }
    }

    #[test]
    fn class_sub_profile_pairing_is_enforced() {
        assert!(default_profile(RoadClass::Other, None).is_err());
        assert!(default_profile(RoadClass::RoughAsphalt, Some(SubProfile::Pipes)).is_err());
    }

    #[test]
    fn synthesis_is_deterministic_per_seed() {
        let a = clip_for(RoadClass::RoughAsphalt, None, 70.0, 5);
        let b = clip_for(RoadClass::RoughAsphalt, None, 70.0, 5);
        assert_eq!(a.samples, b.samples);
        let c = clip_for(RoadClass::RoughAsphalt, None, 70.0, 6);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn sample_count_and_bounds() {
        for (class, sub) in [
            (RoadClass::SmoothAsphalt, None),
            (RoadClass::Other, Some(SubProfile::Pipes)),
        ] {
            let clip = synth_clip(&SynthSpec {
                profile: default_profile(class, sub).unwrap(),
                speed_kmh: 90.0,
                duration_s: 1.5,
                seed: 11,
            })
            .unwrap();
            assert_eq!(clip.samples.len(), 66_150);
            for &s in &clip.samples {
                assert!(s.is_finite());
                assert!(s.abs() <= 1.0);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_inputs() {
        let profile = default_profile(RoadClass::SmoothAsphalt, None).unwrap();
        for speed in [30.0, 95.0] {
            assert!(synth_clip(&SynthSpec {
                profile: profile.clone(),
                speed_kmh: speed,
                duration_s: 1.0,
                seed: 0,
            })
            .is_err());
        }
        assert!(synth_clip(&SynthSpec {
            profile,
            speed_kmh: 60.0,
            duration_s: 0.1,
            seed: 0,
        })
        .is_err());
    }

    #[test]
    fn band_level_of_silence_floors() {
        let clip = AudioClip::new(vec![0.0; 44_100], SAMPLE_RATE);
        assert_eq!(band_level(&clip, 50.0, 1000.0).unwrap(), -200.0);
    }

    #[test]
    fn band_level_rejects_degenerate_requests() {
        let clip = AudioClip::new(vec![0.1; 44_100], SAMPLE_RATE);
        assert!(band_level(&clip, 600.0, 500.0).is_err());
        assert!(band_level(&clip, 100.0, 30_000.0).is_err());
        let short = AudioClip::new(vec![0.1; 512], SAMPLE_RATE);
        assert!(band_level(&short, 50.0, 1000.0).is_err());
    }

    #[test]
    fn band_level_localizes_a_tone() {
        let samples: Vec<f64> = (0..44_100)
            .map(|i| (2.0 * std::f64::consts::PI * 500.0 * i as f64 / 44_100.0).sin())
            .collect();
        let clip = AudioClip::new(samples, SAMPLE_RATE);
        let near = band_level(&clip, 400.0, 600.0).unwrap();
        let far = band_level(&clip, 2000.0, 3000.0).unwrap();
        assert!(near - far > 30.0, "near {near} far {far}");
    }

    #[test]
    fn doubling_amplitude_adds_six_db() {
        let clip = clip_for(RoadClass::RoughAsphalt, None, 60.0, 3);
        let doubled = AudioClip::new(
            clip.samples.iter().map(|s| 2.0 * s).collect(),
            SAMPLE_RATE,
        );
        let diff = band_level(&doubled, 50.0, 1000.0).unwrap()
            - band_level(&clip, 50.0, 1000.0).unwrap();
        assert!((diff - 20.0 * 2f64.log10()).abs() < 1e-9, "diff {diff}");
    }

    #[test]
    fn speed_doubling_raises_tread_band_six_db() {
        for seed in 0..3 {
            let slow = clip_for(RoadClass::SmoothAsphalt, None, 40.0, seed);
            let fast = clip_for(RoadClass::SmoothAsphalt, None, 80.0, seed);
            let diff = band_level(&fast, 50.0, 1000.0).unwrap()
                - band_level(&slow, 50.0, 1000.0).unwrap();
            assert!((5.5..=6.5).contains(&diff), "seed {seed} diff {diff}");
        }
    }

    #[test]
    fn rough_minus_smooth_tread_offset_is_three_db() {
        for seed in 0..3 {
            let rough = clip_for(RoadClass::RoughAsphalt, None, 60.0, seed);
            let smooth = clip_for(RoadClass::SmoothAsphalt, None, 60.0, seed);
            let diff = band_level(&rough, 50.0, 1000.0).unwrap()
                - band_level(&smooth, 50.0, 1000.0).unwrap();
            assert!((2.5..=3.5).contains(&diff), "seed {seed} diff {diff}");
        }
    }

    #[test]
    fn cavity_resonance_is_a_local_psd_maximum() {
        for profile in all_default_profiles() {
            let helm = profile.helmholtz;
            let clip = synth_clip(&SynthSpec {
                profile,
                speed_kmh: 60.0,
                duration_s: 1.0,
                seed: 21,
            })
            .unwrap();
            let psd = welch_psd(&clip).unwrap();
            let bin_hz = SAMPLE_RATE as f64 / 1024.0;
            let found = (1..psd.len() - 1).any(|k| {
                psd[k] > psd[k - 1]
                    && psd[k] > psd[k + 1]
                    && (k as f64 * bin_hz - helm.center_hz).abs() <= helm.bandwidth_hz
            });
            assert!(found, "no local max near {} Hz", helm.center_hz);
        }
    }

    #[test]
    fn energy_sits_in_the_modeled_bands() {
        for (profile, seed) in all_default_profiles().into_iter().zip([1u64, 2, 3, 4, 5, 6]) {
            let label = (profile.class, profile.sub_profile);
            let clip = synth_clip(&SynthSpec {
                profile,
                speed_kmh: 65.0,
                duration_s: 1.0,
                seed,
            })
            .unwrap();
            let tread = band_level(&clip, 50.0, 1000.0).unwrap();
            let out_of_band = band_level(&clip, 8000.0, 10_000.0).unwrap();
            assert!(
                tread - out_of_band >= 10.0,
                "{label:?}: tread {tread} vs high {out_of_band}"
            );
        }
    }

    #[test]
    fn peak_guard_engages_on_hot_profiles() {
        let mut profile = default_profile(RoadClass::RoughAsphalt, None).unwrap();
        profile.tread.level_db_at_ref = 10.0;
        profile.helmholtz.level_db = 8.0;
        let clip = synth_clip(&SynthSpec {
            profile,
            speed_kmh: 90.0,
            duration_s: 0.5,
            seed: 1,
        })
        .unwrap();
        let peak = clip.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
        assert!(peak <= 0.9 + 1e-12);
        assert!(peak > 0.9 - 1e-6, "guard should land exactly on the ceiling");
    }

    #[test]
    fn corpus_layout_seeds_and_reproducibility() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_corpus(dir.path(), 4, 0.5, 77, false).unwrap();
        assert_eq!(manifest.entries.len(), 12);
        manifest.validate(dir.path()).unwrap();
        for (i, e) in manifest.entries.iter().enumerate() {
            assert_eq!(e.seed, derive_seed(77, i as u64));
            assert!((SPEED_MIN_KMH..=SPEED_MAX_KMH).contains(&e.speed_kmh));
            assert_eq!(e.duration_s, 0.5);
        }
        // Class blocks in declaration order, Other cycling its surfaces.
        assert!(manifest.entries[..4].iter().all(|e| e.label == RoadClass::RoughAsphalt));
        assert!(manifest.entries[4..8].iter().all(|e| e.label == RoadClass::SmoothAsphalt));
        let subs: Vec<_> = manifest.entries[8..].iter().map(|e| e.sub_profile.unwrap()).collect();
        assert_eq!(subs, SubProfile::ALL.to_vec());
        // A manifest line alone re-renders its clip bit for bit.
        let entry = &manifest.entries[9];
        let re = resynth_entry(entry).unwrap();
        let on_disk = crate::audio::read_wav(&dir.path().join(&entry.path)).unwrap();
        let quantized: Vec<f64> = re
            .samples
            .iter()
            .map(|&s| crate::audio::sample_from_i16(crate::audio::sample_to_i16(s)))
            .collect();
        assert_eq!(quantized, on_disk.samples);
    }

    #[test]
    fn corpus_refuses_to_clobber_without_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        synth_corpus(dir.path(), 1, 0.5, 1, false).unwrap();
        assert!(synth_corpus(dir.path(), 1, 0.5, 1, false).is_err());
        synth_corpus(dir.path(), 1, 0.5, 1, true).unwrap();
    }

    #[test]
    fn corpus_is_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synth_corpus(d1.path(), 2, 0.5, 42, false).unwrap();
        synth_corpus(d2.path(), 2, 0.5, 42, false).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(d1.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert_eq!(names.len(), 7); // 6 wavs + manifest
        for name in names {
            let a = std::fs::read(d1.path().join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?} differs between identical runs");
        }
    }

    #[test]
    fn manifest_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_corpus(dir.path(), 2, 0.5, 9, false).unwrap();
        let read_back = read_manifest(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(manifest, read_back);
        // Labels serialize as snake_case strings.
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert!(text.contains("\"label\":\"rough_asphalt\""));
        assert!(text.contains("\"sub_profile\":\"concrete_pavement\""));
        // A missing file fails validation.
        let mut broken = read_back.clone();
        broken.entries[0].path = "nope.wav".into();
        assert!(broken.validate(dir.path()).is_err());
        // A duplicate path fails validation.
        let mut duped = read_back;
        duped.entries[1].path = duped.entries[0].path.clone();
        assert!(duped.validate(dir.path()).is_err());
    }
}
