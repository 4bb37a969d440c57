//! Audio clips and minimal RIFF/WAVE I/O.
//!
//! The toolkit exchanges mono 16-bit PCM at 44.1 kHz and nothing else, so
//! the reader handles exactly that profile (skipping unrelated chunks) and
//! the writer emits the canonical 44-byte header.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Fixed pipeline rate. Everything downstream assumes it.
pub const SAMPLE_RATE: u32 = 44_100;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        AudioClip { samples, sample_rate }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Float sample to PCM: round half away from zero, then clamp to i16 range.
pub fn sample_to_i16(x: f64) -> i16 {
    let v = (x * 32767.0).round();
    v.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn sample_from_i16(v: i16) -> f64 {
    v as f64 / 32767.0
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let data_len = (clip.samples.len() * 2) as u32;
    let mut header = Vec::with_capacity(44);
    header.extend_from_slice(b"RIFF");
    header.extend_from_slice(&(36 + data_len).to_le_bytes());
    header.extend_from_slice(b"WAVE");
    header.extend_from_slice(b"fmt ");
    header.extend_from_slice(&16u32.to_le_bytes());
    header.extend_from_slice(&1u16.to_le_bytes()); // PCM
    header.extend_from_slice(&1u16.to_le_bytes()); // mono
    header.extend_from_slice(&clip.sample_rate.to_le_bytes());
    header.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    header.extend_from_slice(&2u16.to_le_bytes()); // block align
    header.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    header.extend_from_slice(b"data");
    header.extend_from_slice(&data_len.to_le_bytes());
    file.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut pcm = Vec::with_capacity(clip.samples.len() * 2);
    for &s in &clip.samples {
        pcm.extend_from_slice(&sample_to_i16(s).to_le_bytes());
    }
    file.write_all(&pcm).map_err(|e| Error::io(path, e))
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::invalid(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::invalid("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::invalid("truncated fmt chunk"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = pos + 8 + size + (size & 1);
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::invalid("missing fmt chunk"))?;
    let data = data.ok_or_else(|| Error::invalid("missing data chunk"))?;
    if format != 1 {
        return Err(Error::invalid(format!("format tag {format}, only PCM (1) supported")));
    }
    if channels != 1 {
        return Err(Error::invalid(format!("{channels} channels, only mono supported")));
    }
    if bits != 16 {
        return Err(Error::invalid(format!("{bits} bits per sample, only 16 supported")));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| sample_from_i16(i16::from_le_bytes([c[0], c[1]])))
        .collect();
    Ok(AudioClip::new(samples, rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm_conversion_rounds_half_away_from_zero() {
        assert_eq!(sample_to_i16(0.0), 0);
        assert_eq!(sample_to_i16(1.0), 32767);
        assert_eq!(sample_to_i16(-1.0), -32767);
        // 0.5/32767 scaled is exactly on the boundary.
        assert_eq!(sample_to_i16(0.5 / 32767.0), 1);
        assert_eq!(sample_to_i16(-0.5 / 32767.0), -1);
        // Out-of-range input clamps instead of wrapping.
        assert_eq!(sample_to_i16(2.0), 32767);
        assert_eq!(sample_to_i16(-2.0), -32768);
    }

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..4410)
            .map(|i| 0.8 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 44100.0).sin())
            .collect();
        let clip = AudioClip::new(samples.clone(), SAMPLE_RATE);
        write_wav(&path, &clip).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, SAMPLE_RATE);
        assert_eq!(back.samples.len(), samples.len());
        for (a, b) in samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 0.5 / 32767.0 + 1e-12);
        }
    }

    #[test]
    fn header_bytes_are_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.wav");
        write_wav(&path, &AudioClip::new(vec![0.0; 100], SAMPLE_RATE)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 44 + 200);
        assert_eq!(&bytes[0..4], b"RIFF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 36 + 200);
        assert_eq!(&bytes[8..12], b"WAVE");
        assert_eq!(&bytes[12..16], b"fmt ");
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 44_100);
        assert_eq!(&bytes[36..40], b"data");
        assert_eq!(u32::from_le_bytes(bytes[40..44].try_into().unwrap()), 200);
    }

    #[test]
    fn rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        write_wav(&path, &AudioClip::new(vec![0.0; 10], SAMPLE_RATE)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[22] = 2; // channel count
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_wav(&path).is_err());
    }

    #[test]
    fn skips_unknown_chunks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        write_wav(&path, &AudioClip::new(vec![0.25; 8], SAMPLE_RATE)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Splice a LIST chunk between fmt and data.
        let mut patched = bytes[..36].to_vec();
        patched.extend_from_slice(b"LIST");
        patched.extend_from_slice(&4u32.to_le_bytes());
        patched.extend_from_slice(b"INFO");
        patched.extend_from_slice(&bytes[36..]);
        let riff_len = (patched.len() - 8) as u32;
        patched[4..8].copy_from_slice(&riff_len.to_le_bytes());
        std::fs::write(&path, &patched).unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.samples.len(), 8);
    }
}
