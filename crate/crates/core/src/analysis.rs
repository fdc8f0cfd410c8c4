//! Latent-space analyses: traversal grids, feature swaps, single-coordinate
//! probes and the posterior sensitivity of a trained classifier.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{auroc, MetricError};
use crate::optim::{AdamConfig, AdamState};
use crate::ssl::{self, SslError, SslModel};
use crate::tensor::{Tensor, TensorError};
use crate::vae::{self, VaeError, VaeModel};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("latent dimension {dim} out of range for d = {latent_dim}")]
    DimOutOfRange { dim: usize, latent_dim: usize },
    #[error("dimension set is empty")]
    EmptyDims,
    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },
    #[error("degenerate probe subset: {0}")]
    DegenerateSubset(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

fn check_dim(vae: &VaeModel, dim: usize) -> Result<()> {
    if dim >= vae.latent_dim() {
        return Err(AnalysisError::DimOutOfRange {
            dim,
            latent_dim: vae.latent_dim(),
        });
    }
    Ok(())
}

fn posterior_mean(vae: &VaeModel, x: &[f64]) -> Result<Vec<f64>> {
    let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(vae::encode(vae, &t)?.mu.into_data())
}

/// `steps` equally spaced points from `lo` to `hi` inclusive; a single step
/// yields `lo`.
pub fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..steps)
            .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Traversal {
    pub values: Vec<f64>,
    /// `[steps × P]` decoded means.
    pub images: Tensor,
}

/// Decodes the seed image's posterior mean with coordinate `dim` swept over
/// `range`.
pub fn latent_traverse(
    vae: &VaeModel,
    seed_image: &[f64],
    dim: usize,
    range: (f64, f64),
    steps: usize,
) -> Result<Traversal> {
    check_dim(vae, dim)?;
    if steps == 0 {
        return Err(AnalysisError::Invalid("traversal needs at least one step".into()));
    }
    let mu = posterior_mean(vae, seed_image)?;
    let values = linspace(range.0, range.1, steps);
    let d = vae.latent_dim();
    let mut z = Vec::with_capacity(steps * d);
    for v in &values {
        let mut row = mu.clone();
        row[dim] = *v;
        z.extend(row);
    }
    let images = vae::decode(vae, &Tensor::new(vec![steps, d], z)?)?;
    Ok(Traversal { values, images })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub recon_a: Vec<f64>,
    pub recon_b: Vec<f64>,
    pub a_with_b: Vec<f64>,
    pub b_with_a: Vec<f64>,
}

/// Swaps the listed posterior-mean coordinates between two images.
pub fn feature_transfer(vae: &VaeModel, img_a: &[f64], img_b: &[f64], dims: &[usize]) -> Result<Transfer> {
    if dims.is_empty() {
        return Err(AnalysisError::EmptyDims);
    }
    for &d in dims {
        check_dim(vae, d)?;
    }
    let mu_a = posterior_mean(vae, img_a)?;
    let mu_b = posterior_mean(vae, img_b)?;
    let (mut ab, mut ba) = (mu_a.clone(), mu_b.clone());
    for &d in dims {
        ab[d] = mu_b[d];
        ba[d] = mu_a[d];
    }
    let d = vae.latent_dim();
    let z = Tensor::new(vec![4, d], [mu_a, mu_b, ab, ba].concat())?;
    let out = vae::decode(vae, &z)?;
    Ok(Transfer {
        recon_a: out.row(0).to_vec(),
        recon_b: out.row(1).to_vec(),
        a_with_b: out.row(2).to_vec(),
        b_with_a: out.row(3).to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_train: 200,
            n_val: 200,
            n_test: 400,
            epochs: 200,
            lr: 0.05,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub dim: usize,
    pub target_label: usize,
    pub weight: f64,
    pub bias: f64,
    pub val_auroc: f64,
    pub test_auroc: f64,
    /// Pearson correlation of the coordinate with the target over the
    /// training rows.
    pub train_correlation: f64,
}

/// Rows positive for `target` or negative for every label, shuffled and cut
/// into train/val/test.
pub fn probe_subset(
    labels: &Tensor,
    target: usize,
    cfg: &ProbeConfig,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let l = labels.cols();
    if target >= l {
        return Err(AnalysisError::LabelOutOfRange {
            label: target,
            num_labels: l,
        });
    }
    let mut rows: Vec<usize> = (0..labels.rows())
        .filter(|&i| {
            let r = labels.row(i);
            r[target] > 0.5 || r.iter().all(|v| *v < 0.5)
        })
        .collect();
    let need = cfg.n_train + cfg.n_val + cfg.n_test;
    if rows.len() < need {
        return Err(AnalysisError::DegenerateSubset(format!(
            "{} eligible samples, {need} needed",
            rows.len()
        )));
    }
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let test = rows[cfg.n_train + cfg.n_val..need].to_vec();
    let val = rows[cfg.n_train..cfg.n_train + cfg.n_val].to_vec();
    rows.truncate(cfg.n_train);
    Ok((rows, val, test))
}

/// Zero when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    if x.is_empty() || constant(x) || constant(y) {
        return 0.0;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Logistic regression `σ(w·x + b)` fitted by full-batch Adam on
/// standardized inputs; returns `(w, b)` on the original scale.
pub fn fit_logistic_1d(x: &[f64], y: &[bool], epochs: usize, lr: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if sd > 0.0 { 1.0 / sd } else { 0.0 };
    let mut theta = [Tensor::scalar(0.0), Tensor::scalar(0.0)];
    let mut adam = AdamState::new(AdamConfig::with_lr(lr), &[&theta[0], &theta[1]]);
    for _ in 0..epochs {
        let (w, b) = (theta[0].item(), theta[1].item());
        let (mut gw, mut gb) = (0.0, 0.0);
        for (xi, yi) in x.iter().zip(y) {
            let u = (xi - mean) * scale;
            let r = crate::tensor::sigmoid(w * u + b) - f64::from(u8::from(*yi));
            gw += r * u / n;
            gb += r / n;
        }
        let [t0, t1] = &mut theta;
        adam.step(&mut [t0, t1], &[Tensor::scalar(gw), Tensor::scalar(gb)])
            .expect("scalar shapes");
    }
    let (w, b) = (theta[0].item(), theta[1].item());
    (w * scale, b - w * scale * mean)
}

/// AUROC of a logistic classifier that sees only coordinate `dim` of the
/// posterior mean, on a target-vs-no-finding subset.
pub fn single_dim_probe(
    vae: &VaeModel,
    images: &Tensor,
    labels: &Tensor,
    dim: usize,
    target: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    check_dim(vae, dim)?;
    let (train, val, test) = probe_subset(labels, target, cfg)?;
    let all: Vec<usize> = train.iter().chain(&val).chain(&test).copied().collect();
    let mu = vae::encode(vae, &images.select_rows(&all))?.mu;
    let coords: Vec<f64> = (0..all.len()).map(|i| mu.row(i)[dim]).collect();
    probe_from_coords(&coords, labels, &all, train.len(), val.len(), dim, target, cfg)
}

/// Probe reports for every latent dimension, sharing one encoding pass.
pub fn probe_all_dims(
    vae: &VaeModel,
    images: &Tensor,
    labels: &Tensor,
    target: usize,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeReport>> {
    let (train, val, test) = probe_subset(labels, target, cfg)?;
    let all: Vec<usize> = train.iter().chain(&val).chain(&test).copied().collect();
    let mu = vae::encode(vae, &images.select_rows(&all))?.mu;
    (0..vae.latent_dim())
        .map(|dim| {
            let coords: Vec<f64> = (0..all.len()).map(|i| mu.row(i)[dim]).collect();
            probe_from_coords(&coords, labels, &all, train.len(), val.len(), dim, target, cfg)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn probe_from_coords(
    coords: &[f64],
    labels: &Tensor,
    rows: &[usize],
    n_train: usize,
    n_val: usize,
    dim: usize,
    target: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let y: Vec<bool> = rows.iter().map(|&i| labels.row(i)[target] > 0.5).collect();
    let degenerate = |s: &[bool], what: &str| {
        if s.iter().all(|v| *v) || s.iter().all(|v| !*v) {
            Err(AnalysisError::DegenerateSubset(format!("{what} split has a single class")))
        } else {
            Ok(())
        }
    };
    let (tr, rest) = (0..n_train, n_train..n_train + n_val);
    degenerate(&y[tr.clone()], "train")?;
    degenerate(&y[rest.clone()], "validation")?;
    degenerate(&y[n_train + n_val..], "test")?;

    let (w, b) = fit_logistic_1d(&coords[tr.clone()], &y[tr.clone()], cfg.epochs, cfg.lr);
    let score = |r: std::ops::Range<usize>| -> Vec<f64> {
        coords[r].iter().map(|x| crate::tensor::sigmoid(w * x + b)).collect()
    };
    let ytr: Vec<f64> = y[tr.clone()].iter().map(|v| f64::from(u8::from(*v))).collect();
    Ok(ProbeReport {
        dim,
        target_label: target,
        weight: w,
        bias: b,
        val_auroc: auroc(&score(rest.clone()), &y[rest])?,
        test_auroc: auroc(&score(n_train + n_val..coords.len()), &y[n_train + n_val..])?,
        train_correlation: pearson(&coords[tr], &ytr),
    })
}

/// Monte-Carlo estimate of `E ‖f(z₁) − f(z₂)‖²` with `z₁, z₂` independent
/// posterior draws per input, dropout off.
pub fn latent_sensitivity<R: Rng + ?Sized>(
    vae: &VaeModel,
    model: &SslModel,
    x: &Tensor,
    n_pairs: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(AnalysisError::Invalid("n_pairs must be at least 1".into()));
    }
    let post = vae::encode(vae, x)?;
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let e1 = Tensor::randn(post.mu.shape(), 1.0, rng);
        let e2 = Tensor::randn(post.mu.shape(), 1.0, rng);
        let z1 = vae::reparameterize(&post, &e1)?.select_cols(&model.kept_dims);
        let z2 = vae::reparameterize(&post, &e2)?.select_cols(&model.kept_dims);
        let f1 = ssl::predict_latent(model, &z1)?;
        let f2 = ssl::predict_latent(model, &z2)?;
        total += f1
            .data()
            .iter()
            .zip(f2.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(total / (n_pairs * x.rows().max(1)) as f64)
}

/// Tiles `[n × W²]` images row-major into `cols` columns and writes an 8-bit
/// binary PGM.
pub fn write_pgm_grid(path: impl AsRef<Path>, images: &Tensor, width: usize, cols: usize) -> Result<()> {
    let n = images.rows();
    if images.cols() != width * width || cols == 0 || n == 0 {
        return Err(AnalysisError::Invalid("grid needs square images and ≥ 1 column".into()));
    }
    let grid_rows = n.div_ceil(cols);
    let (gw, gh) = (cols * width, grid_rows * width);
    let mut pixels = vec![0u8; gw * gh];
    for k in 0..n {
        let (oy, ox) = ((k / cols) * width, (k % cols) * width);
        for (p, v) in images.row(k).iter().enumerate() {
            let (y, x) = (p / width, p % width);
            pixels[(oy + y) * gw + ox + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{gw} {gh}\n255\n")?;
    f.write_all(&pixels)?;
    f.flush()?;
    Ok(())
}
