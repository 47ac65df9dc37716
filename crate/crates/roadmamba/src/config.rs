//! Flat `key = value` run configuration files. `#` starts a comment, blank
//! lines are skipped, unknown keys are an error so typos fail loudly.

use crate::backbone::BackboneConfig;
use crate::block::{Assignment, BlockVariant};
use crate::tensor::Precision;
use crate::train::TrainConfig;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Backbone variant name: T, S, B or micro.
    pub variant: String,
    pub image_side: usize,
    pub num_classes: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub total_steps: usize,
    pub lambda_aux: f64,
    pub window_size: usize,
    pub seed: u64,
    pub aggregator_assignment: Assignment,
    /// Which scan branches run: dual, global_only or local_only.
    pub scan_variant: BlockVariant,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: "micro".into(),
            image_side: 64,
            num_classes: 27,
            batch_size: 8,
            base_lr: 1e-3,
            warmup_frac: 0.05,
            total_steps: 1000,
            lambda_aux: 0.3,
            window_size: 4,
            seed: 0,
            aggregator_assignment: Assignment::Gclt,
            scan_variant: BlockVariant::Dual,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {0}: expected key = value")]
    Malformed(usize),
    #[error("line {line}: unknown key {key}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {msg}")]
    BadValue { line: usize, key: String, msg: String },
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Malformed(line_no))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |msg: &str| ConfigError::BadValue {
                line: line_no,
                key: key.to_string(),
                msg: msg.to_string(),
            };
            fn num<T: FromStr>(v: &str) -> Result<T, String>
            where
                T::Err: std::fmt::Display,
            {
                v.parse().map_err(|e: T::Err| e.to_string())
            }
            match key {
                "variant" => {
                    BackboneConfig::by_name(value).map_err(|e| bad(&e))?;
                    cfg.variant = value.to_string();
                }
                "image_side" => cfg.image_side = num(value).map_err(|e| bad(&e))?,
                "num_classes" => cfg.num_classes = num(value).map_err(|e| bad(&e))?,
                "batch_size" => cfg.batch_size = num(value).map_err(|e| bad(&e))?,
                "base_lr" => cfg.base_lr = num(value).map_err(|e| bad(&e))?,
                "warmup_frac" => cfg.warmup_frac = num(value).map_err(|e| bad(&e))?,
                "total_steps" => cfg.total_steps = num(value).map_err(|e| bad(&e))?,
                "lambda_aux" => cfg.lambda_aux = num(value).map_err(|e| bad(&e))?,
                "window_size" => cfg.window_size = num(value).map_err(|e| bad(&e))?,
                "seed" => cfg.seed = num(value).map_err(|e| bad(&e))?,
                "aggregator_assignment" => {
                    cfg.aggregator_assignment = value.parse().map_err(|e: String| bad(&e))?
                }
                "scan_variant" => {
                    cfg.scan_variant = value.parse().map_err(|e: String| bad(&e))?
                }
                "precision" => {
                    cfg.precision = match value {
                        "f32" => Precision::F32,
                        "f64" => Precision::F64,
                        _ => return Err(bad("expected f32 or f64")),
                    }
                }
                _ => {
                    return Err(ConfigError::UnknownKey { line: line_no, key: key.to_string() })
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        RunConfig::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Backbone configuration implied by this run configuration.
    pub fn backbone(&self) -> Result<BackboneConfig, String> {
        let mut b = BackboneConfig::by_name(&self.variant)?;
        b.image_side = self.image_side;
        b.num_classes = self.num_classes;
        b.m = self.window_size;
        b.lambda_aux = self.lambda_aux;
        b.assignment = self.aggregator_assignment;
        b.variant = self.scan_variant;
        Ok(b)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            warmup_frac: self.warmup_frac,
            lambda_aux: self.lambda_aux,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_empty_text() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("\n# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn full_file_parses() {
        let text = "\
variant = micro
image_side = 64
num_classes = 27   # trailing comment
batch_size = 16
base_lr = 0.002
warmup_frac = 0.1
total_steps = 500
lambda_aux = 0.3
window_size = 4
seed = 7
aggregator_assignment = GTLC
scan_variant = global_only
precision = f64
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.base_lr, 0.002);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.aggregator_assignment, Assignment::Gtlc);
        assert_eq!(cfg.scan_variant, BlockVariant::GlobalOnly);
        assert_eq!(cfg.precision, Precision::F64);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("seed = 1\nbogus_key = 2\n").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey { line: 2, key: "bogus_key".into() });
    }

    #[test]
    fn malformed_line_is_rejected() {
        assert_eq!(RunConfig::parse("just words").unwrap_err(), ConfigError::Malformed(1));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(matches!(
            RunConfig::parse("seed = banana").unwrap_err(),
            ConfigError::BadValue { .. }
        ));
        assert!(matches!(
            RunConfig::parse("variant = Z").unwrap_err(),
            ConfigError::BadValue { .. }
        ));
        assert!(matches!(
            RunConfig::parse("precision = f16").unwrap_err(),
            ConfigError::BadValue { .. }
        ));
        assert!(matches!(
            RunConfig::parse("scan_variant = spiral").unwrap_err(),
            ConfigError::BadValue { .. }
        ));
    }

    #[test]
    fn backbone_projection_applies_overrides() {
        let cfg = RunConfig::parse("variant = T\nwindow_size = 7\nscan_variant = local_only\n")
            .unwrap();
        let mut cfg = cfg;
        cfg.image_side = 224;
        let b = cfg.backbone().unwrap();
        assert_eq!(b.widths, [96, 192, 384, 768]);
        assert_eq!(b.m, 7);
        assert_eq!(b.variant, BlockVariant::LocalOnly);
    }
}
