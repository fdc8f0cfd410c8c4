//! Flat `key = value` experiment configuration.
//!
//! Every key has a default; a file may set any subset, command-line flags
//! override the file, and the fully resolved configuration is rendered back
//! in canonical key order so runs can be replayed exactly.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::analysis::ProbeConfig;
use crate::ssl::{RampupSchedule, SslConfig, SslMode};
use crate::vae::VaeTrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("{key}: cannot parse {value:?} as {expected}")]
    Type {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("{key} must be {constraint}")]
    Range { key: &'static str, constraint: &'static str },
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("cannot read config file: {0}")]
    Io(String),
}

/// All keys with one-line descriptions, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master random seed"),
    ("image_size", "image width W in pixels (images are W×W)"),
    ("n_samples", "number of synthetic samples"),
    ("data_path", "optional CSV manifest of external images (empty: synthetic)"),
    ("k_per_label", "labeled positives per label"),
    ("n_val", "validation samples"),
    ("n_test", "test samples"),
    ("latent_dim", "VAE latent dimensionality d"),
    ("vae_hidden", "comma-separated VAE encoder hidden widths"),
    ("vae_epochs", "VAE training epochs"),
    ("beta", "weight of the KL term"),
    ("lr", "Adam learning rate for the VAE (and SSL unless ssl_lr is set)"),
    ("ssl_lr", "Adam learning rate for SSL training (empty: same as lr)"),
    ("batch_size", "minibatch size"),
    ("mode", "latent_ensemble | image_noise_ensemble | image_affine_ensemble | embedding_only"),
    ("head_hidden", "two comma-separated classifier hidden widths"),
    ("dropout", "dropout probability p"),
    ("ssl_epochs", "SSL training epochs"),
    ("alpha", "EMA momentum of the ensemble targets"),
    ("bias_correct", "divide ensemble targets by 1 - alpha^t"),
    ("zeta_max", "final consistency weight"),
    ("rampup_epochs", "epochs until the consistency weight reaches zeta_max"),
    ("noise_std", "Gaussian noise std for image_noise_ensemble"),
    ("max_shift", "max translation in pixels (empty: round(12·W/128))"),
    ("max_rotation", "max rotation in degrees"),
    ("au_threshold", "active-unit variance threshold"),
    ("traverse_dim", "latent dimension to traverse"),
    ("traverse_lo", "traversal lower end"),
    ("traverse_hi", "traversal upper end"),
    ("traverse_steps", "traversal steps"),
    ("traverse_image", "test-split position of the traversal seed image"),
    ("transfer_dims", "comma-separated latent dimensions to swap"),
    ("transfer_a", "test-split position of the first transfer image"),
    ("transfer_b", "test-split position of the second transfer image"),
    ("probe_label", "target label of the single-dimension probe"),
    ("probe_train", "probe training samples"),
    ("probe_val", "probe validation samples"),
    ("probe_test", "probe test samples"),
    ("probe_epochs", "probe training epochs"),
    ("probe_lr", "probe learning rate"),
    ("sensitivity_pairs", "posterior draw pairs per sample"),
    ("sensitivity_samples", "test samples used by the sensitivity estimate"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub image_size: usize,
    pub n_samples: usize,
    pub data_path: String,
    pub k_per_label: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub latent_dim: usize,
    pub vae_hidden: Vec<usize>,
    pub vae_epochs: usize,
    pub beta: f64,
    pub lr: f64,
    pub ssl_lr: Option<f64>,
    pub batch_size: usize,
    pub mode: SslMode,
    pub head_hidden: [usize; 2],
    pub dropout: f64,
    pub ssl_epochs: usize,
    pub alpha: f64,
    pub bias_correct: bool,
    pub zeta_max: f64,
    pub rampup_epochs: usize,
    pub noise_std: f64,
    pub max_shift: Option<f64>,
    pub max_rotation: f64,
    pub au_threshold: f64,
    pub traverse_dim: usize,
    pub traverse_lo: f64,
    pub traverse_hi: f64,
    pub traverse_steps: usize,
    pub traverse_image: usize,
    pub transfer_dims: Vec<usize>,
    pub transfer_a: usize,
    pub transfer_b: usize,
    pub probe_label: usize,
    pub probe_train: usize,
    pub probe_val: usize,
    pub probe_test: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub sensitivity_pairs: usize,
    pub sensitivity_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            image_size: 16,
            n_samples: 8000,
            data_path: String::new(),
            k_per_label: 50,
            n_val: 1000,
            n_test: 2000,
            latent_dim: 10,
            vae_hidden: vec![256, 128],
            vae_epochs: 200,
            beta: 1.0,
            lr: 1e-5,
            ssl_lr: None,
            batch_size: 64,
            mode: SslMode::LatentEnsemble,
            head_hidden: [64, 32],
            dropout: 0.5,
            ssl_epochs: 100,
            alpha: 0.6,
            bias_correct: true,
            zeta_max: 10.0,
            rampup_epochs: 30,
            noise_std: 0.15,
            max_shift: None,
            max_rotation: 10.0,
            au_threshold: 1e-2,
            traverse_dim: 0,
            traverse_lo: -3.0,
            traverse_hi: 3.0,
            traverse_steps: 7,
            traverse_image: 0,
            transfer_dims: vec![0],
            transfer_a: 0,
            transfer_b: 1,
            probe_label: 0,
            probe_train: 200,
            probe_val: 200,
            probe_test: 400,
            probe_epochs: 200,
            probe_lr: 0.05,
            sensitivity_pairs: 8,
            sensitivity_samples: 500,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Type {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| parse(key, s.trim(), "comma-separated non-negative integers"))
        .collect()
}

fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>, ConfigError> {
    if value.is_empty() {
        Ok(None)
    } else {
        parse(key, value, "number").map(Some)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl ExperimentConfig {
    /// Sets one key from its textual value (type-checked, not range-checked).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        macro_rules! num {
            ($field:ident, $what:expr) => {
                self.$field = parse(key, v, $what)?
            };
        }
        match key {
            "seed" => num!(seed, "unsigned integer"),
            "image_size" => num!(image_size, "unsigned integer"),
            "n_samples" => num!(n_samples, "unsigned integer"),
            "data_path" => self.data_path = v.to_string(),
            "k_per_label" => num!(k_per_label, "unsigned integer"),
            "n_val" => num!(n_val, "unsigned integer"),
            "n_test" => num!(n_test, "unsigned integer"),
            "latent_dim" => num!(latent_dim, "unsigned integer"),
            "vae_hidden" => self.vae_hidden = parse_list(key, v)?,
            "vae_epochs" => num!(vae_epochs, "unsigned integer"),
            "beta" => num!(beta, "number"),
            "lr" => num!(lr, "number"),
            "ssl_lr" => self.ssl_lr = parse_opt_f64(key, v)?,
            "batch_size" => num!(batch_size, "unsigned integer"),
            "mode" => {
                self.mode = v.parse().map_err(|_| ConfigError::Type {
                    key: key.to_string(),
                    value: v.to_string(),
                    expected: "training mode",
                })?
            }
            "head_hidden" => {
                let l = parse_list(key, v)?;
                self.head_hidden = <[usize; 2]>::try_from(l.as_slice()).map_err(|_| ConfigError::Type {
                    key: key.to_string(),
                    value: v.to_string(),
                    expected: "two comma-separated widths",
                })?;
            }
            "dropout" => num!(dropout, "number"),
            "ssl_epochs" => num!(ssl_epochs, "unsigned integer"),
            "alpha" => num!(alpha, "number"),
            "bias_correct" => num!(bias_correct, "true or false"),
            "zeta_max" => num!(zeta_max, "number"),
            "rampup_epochs" => num!(rampup_epochs, "unsigned integer"),
            "noise_std" => num!(noise_std, "number"),
            "max_shift" => self.max_shift = parse_opt_f64(key, v)?,
            "max_rotation" => num!(max_rotation, "number"),
            "au_threshold" => num!(au_threshold, "number"),
            "traverse_dim" => num!(traverse_dim, "unsigned integer"),
            "traverse_lo" => num!(traverse_lo, "number"),
            "traverse_hi" => num!(traverse_hi, "number"),
            "traverse_steps" => num!(traverse_steps, "unsigned integer"),
            "traverse_image" => num!(traverse_image, "unsigned integer"),
            "transfer_dims" => self.transfer_dims = parse_list(key, v)?,
            "transfer_a" => num!(transfer_a, "unsigned integer"),
            "transfer_b" => num!(transfer_b, "unsigned integer"),
            "probe_label" => num!(probe_label, "unsigned integer"),
            "probe_train" => num!(probe_train, "unsigned integer"),
            "probe_val" => num!(probe_val, "unsigned integer"),
            "probe_test" => num!(probe_test, "unsigned integer"),
            "probe_epochs" => num!(probe_epochs, "unsigned integer"),
            "probe_lr" => num!(probe_lr, "number"),
            "sensitivity_pairs" => num!(sensitivity_pairs, "unsigned integer"),
            "sensitivity_samples" => num!(sensitivity_samples, "unsigned integer"),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Textual value of a key as rendered in [`Self::render`].
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "n_samples" => self.n_samples.to_string(),
            "data_path" => self.data_path.clone(),
            "k_per_label" => self.k_per_label.to_string(),
            "n_val" => self.n_val.to_string(),
            "n_test" => self.n_test.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "vae_hidden" => join(&self.vae_hidden),
            "vae_epochs" => self.vae_epochs.to_string(),
            "beta" => self.beta.to_string(),
            "lr" => self.lr.to_string(),
            "ssl_lr" => opt(self.ssl_lr),
            "batch_size" => self.batch_size.to_string(),
            "mode" => self.mode.to_string(),
            "head_hidden" => join(&self.head_hidden),
            "dropout" => self.dropout.to_string(),
            "ssl_epochs" => self.ssl_epochs.to_string(),
            "alpha" => self.alpha.to_string(),
            "bias_correct" => self.bias_correct.to_string(),
            "zeta_max" => self.zeta_max.to_string(),
            "rampup_epochs" => self.rampup_epochs.to_string(),
            "noise_std" => self.noise_std.to_string(),
            "max_shift" => opt(self.max_shift),
            "max_rotation" => self.max_rotation.to_string(),
            "au_threshold" => self.au_threshold.to_string(),
            "traverse_dim" => self.traverse_dim.to_string(),
            "traverse_lo" => self.traverse_lo.to_string(),
            "traverse_hi" => self.traverse_hi.to_string(),
            "traverse_steps" => self.traverse_steps.to_string(),
            "traverse_image" => self.traverse_image.to_string(),
            "transfer_dims" => join(&self.transfer_dims),
            "transfer_a" => self.transfer_a.to_string(),
            "transfer_b" => self.transfer_b.to_string(),
            "probe_label" => self.probe_label.to_string(),
            "probe_train" => self.probe_train.to_string(),
            "probe_val" => self.probe_val.to_string(),
            "probe_test" => self.probe_test.to_string(),
            "probe_epochs" => self.probe_epochs.to_string(),
            "probe_lr" => self.probe_lr.to_string(),
            "sensitivity_pairs" => self.sensitivity_pairs.to_string(),
            "sensitivity_samples" => self.sensitivity_samples.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key, constraint| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Range { key, constraint })
            }
        };
        check((0.0..1.0).contains(&self.alpha), "alpha", "in [0,1)")?;
        check((0.0..1.0).contains(&self.dropout), "dropout", "in [0,1)")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "> 0")?;
        check(self.ssl_lr.is_none_or(|v| v > 0.0 && v.is_finite()), "ssl_lr", "> 0")?;
        check(self.probe_lr > 0.0, "probe_lr", "> 0")?;
        check(self.image_size >= 8, "image_size", "at least 8")?;
        check(self.latent_dim >= 1, "latent_dim", "at least 1")?;
        check(self.batch_size >= 1, "batch_size", "at least 1")?;
        check(self.beta >= 0.0, "beta", ">= 0")?;
        check(self.zeta_max >= 0.0, "zeta_max", ">= 0")?;
        check(self.rampup_epochs >= 1, "rampup_epochs", "at least 1")?;
        check(self.noise_std >= 0.0, "noise_std", ">= 0")?;
        check(self.max_shift.is_none_or(|v| v >= 0.0), "max_shift", ">= 0")?;
        check(self.max_rotation >= 0.0, "max_rotation", ">= 0")?;
        check(self.au_threshold >= 0.0, "au_threshold", ">= 0")?;
        check(self.head_hidden.iter().all(|w| *w > 0), "head_hidden", "positive widths")?;
        check(self.vae_hidden.iter().all(|w| *w > 0), "vae_hidden", "positive widths")?;
        check(self.traverse_steps >= 1, "traverse_steps", "at least 1")?;
        check(self.traverse_dim < self.latent_dim, "traverse_dim", "below latent_dim")?;
        check(
            !self.transfer_dims.is_empty() && self.transfer_dims.iter().all(|d| *d < self.latent_dim),
            "transfer_dims",
            "a nonempty list of dimensions below latent_dim",
        )?;
        check(self.sensitivity_pairs >= 1, "sensitivity_pairs", "at least 1")?;
        check(self.sensitivity_samples >= 1, "sensitivity_samples", "at least 1")?;
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = ExperimentConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// File values first, then `overrides` in order, then validation.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut c = ExperimentConfig::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Io(format!("{}: {e}", p.display())))?;
            c.apply_text(&text)?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Canonical rendering: every key, one per line, in [`KEYS`] order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn ssl_lr(&self) -> f64 {
        self.ssl_lr.unwrap_or(self.lr)
    }

    /// Paper values are stated at 128×128; the shift scales with width.
    pub fn effective_max_shift(&self) -> f64 {
        self.max_shift
            .unwrap_or_else(|| (12.0 * self.image_size as f64 / 128.0).round())
    }

    pub fn vae_train(&self) -> VaeTrainConfig {
        VaeTrainConfig {
            hidden: self.vae_hidden.clone(),
            latent_dim: self.latent_dim,
            epochs: self.vae_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta: self.beta,
            seed: self.seed,
        }
    }

    pub fn ssl(&self) -> SslConfig {
        SslConfig {
            mode: self.mode,
            head_hidden: self.head_hidden,
            dropout: self.dropout,
            lr: self.ssl_lr(),
            epochs: self.ssl_epochs,
            batch_size: self.batch_size,
            alpha: self.alpha,
            bias_correct: self.bias_correct,
            rampup: RampupSchedule {
                zeta_max: self.zeta_max,
                rampup_epochs: self.rampup_epochs,
            },
            noise_std: self.noise_std,
            max_shift: self.effective_max_shift(),
            max_rotation_deg: self.max_rotation,
            encoder_hidden: self.vae_hidden.clone(),
            encoder_out: self.latent_dim,
            kept_dims: None,
            seed: self.seed,
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            n_train: self.probe_train,
            n_val: self.probe_val,
            n_test: self.probe_test,
            epochs: self.probe_epochs,
            lr: self.probe_lr,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_text("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!((c.seed, c.image_size, c.latent_dim), (42, 16, 10));
        assert_eq!((c.dropout, c.lr, c.alpha), (0.5, 1e-5, 0.6));
        assert_eq!(c.effective_max_shift(), 2.0);
    }

    #[test]
    fn alpha_out_of_range_named() {
        let err = ExperimentConfig::resolve(None, &[("alpha".into(), "1.5".into())]).unwrap_err();
        assert_eq!(err.to_string(), "alpha must be in [0,1)");
    }

    #[test]
    fn flag_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "# comment\nlr = 1e-4\nmode=embedding_only\n").unwrap();
        let c = ExperimentConfig::resolve(Some(&p), &[("lr".into(), "1e-5".into())]).unwrap();
        assert_eq!(c.lr, 1e-5);
        assert_eq!(c.mode, SslMode::EmbeddingOnly);
    }

    #[test]
    fn rejections_name_the_key() {
        assert_eq!(
            ExperimentConfig::from_text("bogus = 1").unwrap_err(),
            ConfigError::UnknownKey("bogus".into())
        );
        let e = ExperimentConfig::from_text("latent_dim = ten").unwrap_err();
        assert!(e.to_string().starts_with("latent_dim:"));
        assert!(ExperimentConfig::from_text("lr = 0").unwrap_err().to_string().contains("lr must be > 0"));
        assert!(ExperimentConfig::from_text("dropout = 1").is_err());
        assert!(matches!(ExperimentConfig::from_text("just words"), Err(ConfigError::Syntax { line: 1 })));
        assert!(ExperimentConfig::from_text("head_hidden = 1,2,3").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut c = ExperimentConfig::default();
        c.set("ssl_lr", "0.001").unwrap();
        c.set("transfer_dims", "1,3").unwrap();
        c.set("data_path", "x/m.csv").unwrap();
        let text = c.render();
        assert_eq!(ExperimentConfig::from_text(&text).unwrap(), c);
        assert_eq!(text.lines().count(), KEYS.len());
        for (k, _) in KEYS {
            assert!(c.get(k).is_some(), "{k}");
        }
    }
}
