//! Line-oriented `key=value` config files supplying defaults for any long
//! flag. Explicit command-line flags take precedence over file values.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use roadnoise_core::{Error, FeatureConfig, Result};

/// Every key a config file may set: the long flag names of all subcommands
/// with dashes replaced by underscores, plus the feature-extraction settings.
const KNOWN_KEYS: &[&str] = &[
    "out",
    "clips_per_class",
    "duration_s",
    "overwrite",
    "seed",
    "manifest",
    "out_dir",
    "arch",
    "epochs",
    "lr",
    "momentum",
    "batch_size",
    "model",
    "wav",
    "stdin_pcm",
    "events",
    "repetitions",
    "frame_len",
    "hop",
    "n_mels",
    "f_min_hz",
    "f_max_hz",
    "log_floor",
];

#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn empty() -> FileConfig {
        FileConfig::default()
    }

    /// Blank lines and `#` comments are skipped; everything else must be
    /// `key=value` with a known key. Later lines win on duplicate keys.
    pub fn parse(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {line_no}: expected key=value, got '{line}'"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::invalid(format!("config line {line_no}: empty key")));
            }
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::invalid(format!(
                    "config line {line_no}: unknown key '{key}'"
                )));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| {
                Error::invalid(format!("config key '{key}': cannot parse '{raw}': {e}"))
            }),
        }
    }

    /// Boolean keys accept true/false/1/0; an absent key reads as false.
    pub fn get_flag(&self, key: &str) -> Result<bool> {
        match self.values.get(key).map(String::as_str) {
            None => Ok(false),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(Error::invalid(format!(
                "config key '{key}': expected true/false/1/0, got '{other}'"
            ))),
        }
    }

    /// Builds the effective feature settings: defaults overridden by any
    /// feature keys in the file, then validated, so a bad value (say a
    /// frame length that is not a power of two) fails before any work runs.
    pub fn feature_config(&self) -> Result<FeatureConfig> {
        let mut fc = FeatureConfig::default();
        if let Some(v) = self.get("frame_len")? {
            fc.frame_len = v;
        }
        if let Some(v) = self.get("hop")? {
            fc.hop = v;
        }
        if let Some(v) = self.get("n_mels")? {
            fc.n_mels = v;
        }
        if let Some(v) = self.get("f_min_hz")? {
            fc.f_min_hz = v;
        }
        if let Some(v) = self.get("f_max_hz")? {
            fc.f_max_hz = v;
        }
        if let Some(v) = self.get("log_floor")? {
            fc.log_floor = v;
        }
        fc.validate()?;
        Ok(fc)
    }
}

/// Effective value of an optional setting: explicit flag, else config file.
pub fn merged<T>(flag: Option<T>, file: &FileConfig, key: &str) -> Result<Option<T>>
where
    T: FromStr,
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get(key),
    }
}

/// Effective value of a required setting: explicit flag, else config file,
/// else an error naming both spellings.
pub fn require<T>(flag: Option<T>, file: &FileConfig, key: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(v),
        None => file.get(key)?.ok_or_else(|| {
            Error::invalid(format!(
                "missing required --{} (flag or config key '{key}')",
                key.replace('_', "-")
            ))
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_keys_skipping_blanks_and_comments() {
        let f = write_config("# corpus settings\n\nclips_per_class=10\nduration_s = 2.5\n");
        let cfg = FileConfig::parse(f.path()).unwrap();
        assert_eq!(cfg.get::<usize>("clips_per_class").unwrap(), Some(10));
        assert_eq!(cfg.get::<f64>("duration_s").unwrap(), Some(2.5));
        assert_eq!(cfg.get::<u64>("seed").unwrap(), None);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let f = write_config("clips_per_class=10\nnot a pair\n");
        let err = FileConfig::parse(f.path()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_key_is_an_error() {
        let f = write_config("clip_count=5\n");
        let err = FileConfig::parse(f.path()).unwrap_err().to_string();
        assert!(err.contains("unknown key 'clip_count'"), "{err}");
    }

    #[test]
    fn flag_value_beats_file_value() {
        let f = write_config("clips_per_class=10\n");
        let cfg = FileConfig::parse(f.path()).unwrap();
        let n = require(Some(20usize), &cfg, "clips_per_class").unwrap();
        assert_eq!(n, 20);
        let n = require(None::<usize>, &cfg, "clips_per_class").unwrap();
        assert_eq!(n, 10);
    }

    #[test]
    fn missing_required_names_flag_and_key() {
        let err = require(None::<usize>, &FileConfig::empty(), "clips_per_class")
            .unwrap_err()
            .to_string();
        assert!(err.contains("--clips-per-class"), "{err}");
        assert!(err.contains("clips_per_class"), "{err}");
    }

    #[test]
    fn empty_file_yields_defaults() {
        let f = write_config("");
        let cfg = FileConfig::parse(f.path()).unwrap();
        assert_eq!(cfg.feature_config().unwrap(), FeatureConfig::default());
        assert!(!cfg.get_flag("overwrite").unwrap());
    }

    #[test]
    fn feature_keys_are_validated() {
        let f = write_config("frame_len=1000\n");
        let cfg = FileConfig::parse(f.path()).unwrap();
        let err = cfg.feature_config().unwrap_err().to_string();
        assert!(err.contains("power of two"), "{err}");
    }

    #[test]
    fn bad_number_names_the_key() {
        let f = write_config("epochs=abc\n");
        let cfg = FileConfig::parse(f.path()).unwrap();
        let err = cfg.get::<usize>("epochs").unwrap_err().to_string();
        assert!(err.contains("'epochs'"), "{err}");
        assert!(err.contains("abc"), "{err}");
    }

    #[test]
    fn flag_keys_accept_booleans() {
        let f = write_config("overwrite=true\nstdin_pcm=0\n");
        let cfg = FileConfig::parse(f.path()).unwrap();
        assert!(cfg.get_flag("overwrite").unwrap());
        assert!(!cfg.get_flag("stdin_pcm").unwrap());
        let f = write_config("overwrite=yes\n");
        let cfg = FileConfig::parse(f.path()).unwrap();
        assert!(cfg.get_flag("overwrite").is_err());
    }
}
