//! Flat key=value configuration: one assignment per line, `#` comments.
//! Unknown keys are rejected so typos never pass silently.

use std::fmt;
use std::path::PathBuf;

use mdnet_core::features::DetectorConfig;
use mdnet_core::geometry::RansacConfig;
use mdnet_core::training::TrainConfig;

#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config line {}: {}", self.line, self.reason)
    }
}

impl std::error::Error for ConfigError {}

/// All tunables with their defaults, plus optional default paths that
/// command-line flags override.
#[derive(Debug, Clone)]
pub struct Config {
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub min_static_prob: Option<f64>,
    pub match_ratio: f64,
    pub ransac: RansacConfig,
    pub manifest: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            train: TrainConfig::default(),
            detector: DetectorConfig::default(),
            min_static_prob: None,
            match_ratio: 0.8,
            ransac: RansacConfig::default(),
            manifest: None,
            teacher: None,
            checkpoint: None,
            log: None,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError {
                line: lineno,
                reason: format!("expected `key=value`, got {line:?}"),
            })?;
            cfg.apply(key.trim(), value.trim(), lineno)?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError {
                line,
                reason: format!("bad value {value:?} for {key}"),
            })
        }
        match key {
            "lambda_m" => self.train.lambda_m = num(value, line, key)?,
            "lambda_d" => self.train.lambda_d = num(value, line, key)?,
            "batch_size" => self.train.batch_size = num(value, line, key)?,
            "l0" => self.train.l0 = num(value, line, key)?,
            "epochs" => self.train.epochs = num(value, line, key)?,
            "b" => self.train.b = num(value, line, key)?,
            "weight_decay" => self.train.weight_decay = num(value, line, key)?,
            "seed" => self.train.seed = num(value, line, key)?,
            "detector_threshold" => self.detector.threshold = num(value, line, key)?,
            "nms_radius" => self.detector.nms_radius = num(value, line, key)?,
            "max_points" => self.detector.max_points = num(value, line, key)?,
            "min_static_prob" => self.min_static_prob = Some(num(value, line, key)?),
            "match_ratio" => self.match_ratio = num(value, line, key)?,
            "ransac_threshold" => self.ransac.threshold_px = num(value, line, key)?,
            "ransac_max_iters" => self.ransac.max_iters = num(value, line, key)?,
            "ransac_confidence" => self.ransac.confidence = num(value, line, key)?,
            "ransac_seed" => self.ransac.seed = num(value, line, key)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "teacher" => self.teacher = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "log" => self.log = Some(PathBuf::from(value)),
            _ => {
                return Err(ConfigError {
                    line,
                    reason: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = Config::default();
        assert_eq!(c.train.lambda_m, 1.0);
        assert_eq!(c.train.lambda_d, 1.0);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.l0, 0.01);
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.train.b, 0.01);
        assert_eq!(c.train.weight_decay, 1e-6);
    }

    #[test]
    fn parses_overrides_and_comments() {
        let c = Config::parse("# comment\nseed=9\nepochs = 3\nmatch_ratio=0.7\nmanifest=data/list.txt\n").unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.match_ratio, 0.7);
        assert_eq!(c.manifest.unwrap(), PathBuf::from("data/list.txt"));
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let err = Config::parse("epochss=3\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
        assert_eq!(err.line, 1);
        let err = Config::parse("\nepochs=three\n").unwrap_err();
        assert_eq!(err.line, 2);
    }
}
