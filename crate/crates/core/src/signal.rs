//! Log-mel feature extraction.
//!
//! The front end is fixed and deliberately plain: periodic Hann window,
//! 1024-point power spectrum, triangular HTK-mel filterbank, natural log
//! with a floor. One second of 44.1 kHz audio at the default hop of 512
//! becomes a 64 x 85 matrix, which is the input shape both classifiers
//! are built around.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::fft::fft_real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            frame_len: 1024,
            hop: 512,
            n_mels: 64,
            f_min_hz: 50.0,
            f_max_hz: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || !self.frame_len.is_power_of_two() {
            return Err(Error::invalid(format!(
                "frame_len must be a power of two, got {}",
                self.frame_len
            )));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::invalid(format!(
                "hop must be in 1..=frame_len, got {}",
                self.hop
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::invalid("n_mels must be at least 1"));
        }
        if !(self.f_min_hz >= 0.0 && self.f_min_hz < self.f_max_hz) {
            return Err(Error::invalid(format!(
                "need 0 <= f_min < f_max, got {} and {}",
                self.f_min_hz, self.f_max_hz
            )));
        }
        if self.f_max_hz > SAMPLE_RATE as f64 / 2.0 {
            return Err(Error::invalid(format!(
                "f_max {} Hz is above Nyquist",
                self.f_max_hz
            )));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return Err(Error::invalid("log_floor must be positive and finite"));
        }
        Ok(())
    }
}

/// Log-mel features, row-major with one row per mel band.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f64>,
    pub config: FeatureConfig,
}

impl FeatureMatrix {
    pub fn from_values(
        n_mels: usize,
        n_frames: usize,
        values: Vec<f64>,
        config: FeatureConfig,
    ) -> Self {
        assert_eq!(values.len(), n_mels * n_frames);
        FeatureMatrix { n_mels, n_frames, values, config }
    }

    #[inline]
    pub fn at(&self, band: usize, frame: usize) -> f64 {
        self.values[band * self.n_frames + frame]
    }

    pub fn row(&self, band: usize) -> &[f64] {
        &self.values[band * self.n_frames..(band + 1) * self.n_frames]
    }
}

/// Periodic Hann window: w[k] = 0.5 (1 - cos(2 pi k / n)).
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("window length must be at least 1"));
    }
    Ok((0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()))
        .collect())
}

/// One-sided power spectrum of a windowed frame: |FFT(w . x)[k]|^2 for
/// k = 0..=n/2. Frame and window lengths must match and be a power of two.
pub fn power_spectrum(frame: &[f64], window: &[f64]) -> Result<Vec<f64>> {
    if frame.len() != window.len() {
        return Err(Error::invalid(format!(
            "frame length {} does not match window length {}",
            frame.len(),
            window.len()
        )));
    }
    let windowed: Vec<f64> = frame.iter().zip(window).map(|(x, w)| x * w).collect();
    let spec = fft_real(&windowed)?;
    Ok(spec[..=frame.len() / 2].iter().map(|c| c.norm_sqr()).collect())
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, n_mels rows by frame_len/2 + 1 bins. Peaks are
/// equally spaced on the mel axis between f_min and f_max.
pub fn mel_filterbank(config: &FeatureConfig, sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let n_bins = config.frame_len / 2 + 1;
    let mel_lo = hz_to_mel(config.f_min_hz);
    let mel_hi = hz_to_mel(config.f_max_hz);
    let n_points = config.n_mels + 2;
    let grid: Vec<f64> = (0..n_points)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_points - 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / config.frame_len as f64;
    let mut bank = Vec::with_capacity(config.n_mels);
    for m in 0..config.n_mels {
        let (f0, f1, f2) = (grid[m], grid[m + 1], grid[m + 2]);
        let mut row = vec![0.0; n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            if f > f0 && f < f1 {
                *w = (f - f0) / (f1 - f0);
            } else if f >= f1 && f < f2 {
                *w = (f2 - f) / (f2 - f1);
            }
        }
        bank.push(row);
    }
    Ok(bank)
}

/// Center frequencies (the triangle peaks) of the filterbank rows.
pub fn mel_band_centers(config: &FeatureConfig) -> Vec<f64> {
    let mel_lo = hz_to_mel(config.f_min_hz);
    let mel_hi = hz_to_mel(config.f_max_hz);
    let n_points = config.n_mels + 2;
    (1..=config.n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_points - 1) as f64))
        .collect()
}

/// Number of analysis frames a clip of `len` samples yields.
pub fn frame_count(len: usize, config: &FeatureConfig) -> Option<usize> {
    if len < config.frame_len {
        None
    } else {
        Some(1 + (len - config.frame_len) / config.hop)
    }
}

/// Full front end: frame, window, power spectrum, mel filter, floored log.
pub fn extract_logmel(clip: &AudioClip, config: &FeatureConfig) -> Result<FeatureMatrix> {
    config.validate()?;
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedRate(clip.sample_rate));
    }
    let n_frames = frame_count(clip.samples.len(), config).ok_or_else(|| {
        Error::invalid(format!(
            "clip of {} samples is shorter than one frame ({})",
            clip.samples.len(),
            config.frame_len
        ))
    })?;
    let window = hann_window(config.frame_len)?;
    let bank = mel_filterbank(config, clip.sample_rate)?;
    let mut values = vec![0.0; config.n_mels * n_frames];
    for t in 0..n_frames {
        let start = t * config.hop;
        let frame = &clip.samples[start..start + config.frame_len];
        let power = power_spectrum(frame, &window)?;
        for (m, row) in bank.iter().enumerate() {
            let energy: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
            values[m * n_frames + t] = energy.max(config.log_floor).ln();
        }
    }
    Ok(FeatureMatrix {
        n_mels: config.n_mels,
        n_frames,
        values,
        config: config.clone(),
    })
}

/// Writes the text dump format: a `n_mels,n_frames` header line, then one
/// comma-separated row per mel band, nine significant digits.
pub fn write_feature_csv(path: &Path, fm: &FeatureMatrix) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let io = |e| Error::io(path, e);
    writeln!(out, "{},{}", fm.n_mels, fm.n_frames).map_err(io)?;
    for band in 0..fm.n_mels {
        let row: Vec<String> = fm.row(band).iter().map(|v| format!("{v:.8e}")).collect();
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}
