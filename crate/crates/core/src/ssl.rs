//! Self-ensembling semi-supervised classifier.
//!
//! Each training sample's prediction is pulled towards an ensemble target
//! built from three randomisation sources: the input perturbation (a fresh
//! posterior draw from the frozen VAE, or an image-space augmentation for the
//! baselines), dropout in the classifier head, and a per-sample exponential
//! moving average of past epoch predictions.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::lten::{self, Entry, EntryList, LtenError};
use crate::data::{DataError, DatasetBundle, Split};
use crate::metrics::{mean_auroc, AurocReport, MetricError};
use crate::nn::{DropoutCtx, Linear, Mlp};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::vae::{self, load_mlp, mlp_entries, parse_meta, VaeError, VaeModel};

#[derive(Debug, Error)]
pub enum SslError {
    #[error("unknown training mode {0:?}")]
    UnknownMode(String),
    #[error("mode {0} needs a trained VAE")]
    MissingVae(SslMode),
    #[error("no supervised signal: the labeled training split is empty")]
    NoSupervisedSignal,
    #[error("epoch must be non-negative, got {0}")]
    NegativeEpoch(i64),
    #[error("alpha must be in [0,1), got {0}")]
    InvalidAlpha(f64),
    #[error("row index {index} out of range for {rows} ensemble rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("invalid augmentation: {0}")]
    InvalidAugmentation(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Lten(#[from] LtenError),
}

pub type Result<T> = std::result::Result<T, SslError>;

/// Three FC layers `d → h1 → h2 → L`, ReLU + dropout after the first two,
/// sigmoid on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub mlp: Mlp,
    pub dropout: f64,
}

impl ClassifierHead {
    pub fn new(input: usize, hidden: [usize; 2], labels: usize, dropout: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ClassifierHead {
            mlp: Mlp::init(&[input, hidden[0], hidden[1], labels], &mut rng),
            dropout,
        }
    }

    pub fn zeros(input: usize, hidden: [usize; 2], labels: usize, dropout: f64) -> Self {
        let w = [input, hidden[0], hidden[1], labels];
        ClassifierHead {
            mlp: Mlp {
                layers: w.windows(2).map(|p| Linear::zeros(p[0], p[1])).collect(),
            },
            dropout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn num_labels(&self) -> usize {
        self.mlp.output_dim()
    }
}

/// Logit and probability nodes of a head forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub logits: Var,
    pub probs: Var,
}

pub fn head_forward_graph<R: Rng + ?Sized>(
    head: &ClassifierHead,
    g: &mut Graph,
    bound: &[Var],
    z: Var,
    training: bool,
    rng: &mut R,
) -> Result<HeadOutput> {
    let mut ctx = DropoutCtx {
        p: head.dropout,
        training,
        rng,
    };
    let logits = head.mlp.forward(g, bound, z, Some(&mut ctx))?;
    let probs = g.sigmoid(logits);
    Ok(HeadOutput { logits, probs })
}

/// Per-label probabilities; dropout is active only when `training`.
pub fn classifier_forward<R: Rng + ?Sized>(
    head: &ClassifierHead,
    z: &Tensor,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if z.rank() != 2 || z.cols() != head.input_dim() {
        return Err(SslError::Vae(VaeError::WidthMismatch {
            expected: head.input_dim(),
            got: z.cols(),
        }));
    }
    let mut g = Graph::new();
    let bound = head.mlp.bind(&mut g, false);
    let zv = g.constant(z.clone());
    let out = head_forward_graph(head, &mut g, &bound, zv, training, rng)?;
    Ok(g.value(out.probs).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMode {
    /// Fresh draw `z ~ q(z|x)`.
    Sample,
    /// Posterior mean.
    Mean,
}

/// Latent input for the head from a frozen VAE.
pub fn embed_sample<R: Rng + ?Sized>(
    vae: &VaeModel,
    x: &Tensor,
    mode: EmbedMode,
    rng: &mut R,
) -> Result<Tensor> {
    let post = vae::encode(vae, x)?;
    Ok(match mode {
        EmbedMode::Mean => post.mu,
        EmbedMode::Sample => {
            let eps = Tensor::randn(post.mu.shape(), 1.0, rng);
            vae::reparameterize(&post, &eps)?
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampupSchedule {
    pub zeta_max: f64,
    pub rampup_epochs: usize,
}

impl Default for RampupSchedule {
    fn default() -> Self {
        RampupSchedule {
            zeta_max: 10.0,
            rampup_epochs: 30,
        }
    }
}

/// `ζ(t) = ζ_max · exp(−5·(1 − min(t,T)/T)²)` for `t ≥ 1`, and exactly zero at
/// `t = 0`.
pub fn rampup_weight(epoch: i64, sched: &RampupSchedule) -> Result<f64> {
    if epoch < 0 {
        return Err(SslError::NegativeEpoch(epoch));
    }
    if epoch == 0 {
        return Ok(0.0);
    }
    let t_r = sched.rampup_epochs.max(1) as f64;
    let frac = (epoch as f64).min(t_r) / t_r;
    Ok(sched.zeta_max * (-5.0 * (1.0 - frac).powi(2)).exp())
}

/// Accumulated ensemble targets, one row per training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    y_tilde: Tensor,
    alpha: f64,
    epoch: usize,
    bias_correct: bool,
    // number of updates each row has received, for bias correction
    updates: Vec<u32>,
}

impl EnsembleState {
    pub fn new(rows: usize, labels: usize, alpha: f64, bias_correct: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(SslError::InvalidAlpha(alpha));
        }
        Ok(EnsembleState {
            y_tilde: Tensor::zeros(&[rows, labels]),
            alpha,
            epoch: 0,
            bias_correct,
            updates: vec![0; rows],
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Raw accumulated `ỹ`.
    pub fn raw(&self) -> &Tensor {
        &self.y_tilde
    }

    fn corrected_row(&self, i: usize) -> Vec<f64> {
        let raw = self.y_tilde.row(i);
        let t = self.updates[i];
        if !self.bias_correct || t == 0 {
            return raw.to_vec();
        }
        let c = 1.0 - self.alpha.powi(t as i32);
        raw.iter().map(|v| v / c).collect()
    }

    /// Targets for the listed rows (bias-corrected when enabled).
    pub fn targets(&self, rows: &[usize]) -> Tensor {
        let l = self.y_tilde.cols();
        let mut data = Vec::with_capacity(rows.len() * l);
        for &i in rows {
            data.extend(self.corrected_row(i));
        }
        Tensor::new(vec![rows.len(), l], data).expect("rows × labels")
    }

    /// `ỹ ← α ỹ + (1 − α) y` for each listed row; returns the targets of
    /// those rows after the update.
    pub fn update(&mut self, y_p: &Tensor, rows: &[usize]) -> Result<Tensor> {
        let l = self.y_tilde.cols();
        if y_p.rows() != rows.len() || y_p.cols() != l {
            return Err(TensorError::ShapeMismatch {
                op: "ema_update",
                left: y_p.shape().to_vec(),
                right: vec![rows.len(), l],
            }
            .into());
        }
        let n = self.y_tilde.rows();
        if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
            return Err(SslError::IndexOutOfRange { index: bad, rows: n });
        }
        let a = self.alpha;
        for (k, &i) in rows.iter().enumerate() {
            let src = y_p.row(k);
            for (t, y) in self.y_tilde.row_mut(i).iter_mut().zip(src) {
                *t = a * *t + (1.0 - a) * y;
            }
            self.updates[i] += 1;
        }
        self.epoch += 1;
        Ok(self.targets(rows))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleLossParts {
    pub loss: f64,
    pub supervised: f64,
    /// Unweighted mean squared distance to the targets; the total adds it
    /// scaled by ζ.
    pub consistency: f64,
}

/// Nodes of the ensemble objective.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub loss: Var,
    pub supervised: Var,
    pub consistency: Var,
}

/// `(1/|B|) Σ_labeled Σ_l BCE + ζ · (1/|B|) Σ_all ‖y_p − ỹ‖²`.
///
/// `y_true` rows of unlabeled samples are ignored (masked); targets enter as
/// constants.
pub fn ensemble_loss_graph(
    g: &mut Graph,
    out: HeadOutput,
    y_true: &Tensor,
    labeled: &[bool],
    targets: &Tensor,
    zeta: f64,
) -> Result<LossNodes> {
    let shape = g.value(out.logits).shape().to_vec();
    let (b, l) = (shape[0], shape[1]);
    if y_true.shape() != shape.as_slice() || targets.shape() != shape.as_slice() || labeled.len() != b {
        return Err(TensorError::ShapeMismatch {
            op: "ensemble_loss",
            left: shape,
            right: targets.shape().to_vec(),
        }
        .into());
    }
    let inv_b = 1.0 / b.max(1) as f64;

    // BCE(y, σ(l)) = softplus(l) − y·l, masked to labeled rows
    let mut mask = Vec::with_capacity(b * l);
    let mut masked_y = Vec::with_capacity(b * l);
    for i in 0..b {
        let m = if labeled[i] { 1.0 } else { 0.0 };
        mask.extend(std::iter::repeat_n(m, l));
        masked_y.extend(y_true.row(i).iter().map(|y| y * m));
    }
    let mask = g.constant(Tensor::new(shape.clone(), mask)?);
    let yv = g.constant(Tensor::new(shape.clone(), masked_y)?);
    let sp = g.softplus(out.logits);
    let sp = g.mul(sp, mask)?;
    let yl = g.mul(yv, out.logits)?;
    let bce = g.sub(sp, yl)?;
    let sup_sum = g.sum_all(bce);
    let supervised = g.scale(sup_sum, inv_b);

    let tv = g.constant(targets.clone());
    let diff = g.sub(out.probs, tv)?;
    let sq = g.mul(diff, diff)?;
    let cons_sum = g.sum_all(sq);
    let consistency = g.scale(cons_sum, inv_b);

    let weighted = g.scale(consistency, zeta);
    let loss = g.add(supervised, weighted)?;
    Ok(LossNodes {
        loss,
        supervised,
        consistency,
    })
}

/// Evaluates the ensemble objective for given probabilities. Probabilities
/// of exactly 0 or 1 are clipped before conversion to logits.
pub fn ensemble_loss(
    y_p: &Tensor,
    y_true: &Tensor,
    labeled: &[bool],
    targets: &Tensor,
    zeta: f64,
) -> Result<EnsembleLossParts> {
    let logits: Vec<f64> = y_p
        .data()
        .iter()
        .map(|p| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            p.ln() - (-p).ln_1p()
        })
        .collect();
    let mut g = Graph::new();
    let out = HeadOutput {
        logits: g.constant(Tensor::new(y_p.shape().to_vec(), logits)?),
        probs: g.constant(y_p.clone()),
    };
    let nodes = ensemble_loss_graph(&mut g, out, y_true, labeled, targets, zeta)?;
    Ok(EnsembleLossParts {
        loss: g.value(nodes.loss).item(),
        supervised: g.value(nodes.supervised).item(),
        consistency: g.value(nodes.consistency).item(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augmentation {
    /// Additive Gaussian noise, then clamped to `[0,1]`.
    Noise { std: f64 },
    /// Uniform shift in `[−s, s]²` pixels and rotation in `[−r, r]` degrees,
    /// nearest-neighbour resampled with zero fill.
    Affine { max_shift: f64, max_rotation_deg: f64 },
}

pub fn augment_image<R: Rng + ?Sized>(
    x: &[f64],
    width: usize,
    aug: Augmentation,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if x.len() != width * width {
        return Err(SslError::InvalidAugmentation(format!(
            "image of {} pixels is not {width}x{width}",
            x.len()
        )));
    }
    match aug {
        Augmentation::Noise { std } => {
            if !(std >= 0.0) {
                return Err(SslError::InvalidAugmentation(format!("noise std {std} < 0")));
            }
            if std == 0.0 {
                return Ok(x.to_vec());
            }
            Ok(x.iter()
                .map(|v| {
                    let n: f64 = rng.sample(rand_distr::StandardNormal);
                    (v + std * n).clamp(0.0, 1.0)
                })
                .collect())
        }
        Augmentation::Affine {
            max_shift,
            max_rotation_deg,
        } => {
            if !(max_shift >= 0.0) || !(max_rotation_deg >= 0.0) {
                return Err(SslError::InvalidAugmentation(
                    "shift and rotation bounds must be non-negative".into(),
                ));
            }
            let mut draw = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
            let dx = draw(max_shift);
            let dy = draw(max_shift);
            let theta = draw(max_rotation_deg).to_radians();
            Ok(affine_nearest(x, width, dx, dy, theta))
        }
    }
}

/// Output pixel `p` samples the source at `R(−θ)·(p − c − shift) + c`.
fn affine_nearest(x: &[f64], width: usize, dx: f64, dy: f64, theta: f64) -> Vec<f64> {
    if dx == 0.0 && dy == 0.0 && theta == 0.0 {
        return x.to_vec();
    }
    let c = (width as f64 - 1.0) / 2.0;
    let (s, co) = theta.sin_cos();
    let mut out = vec![0.0; width * width];
    for oy in 0..width {
        for ox in 0..width {
            let px = ox as f64 - c - dx;
            let py = oy as f64 - c - dy;
            let sx = (co * px + s * py + c).round();
            let sy = (-s * px + co * py + c).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < width && (sy as usize) < width {
                out[oy * width + ox] = x[sy as usize * width + sx as usize];
            }
        }
    }
    out
}

pub fn augment_batch<R: Rng + ?Sized>(
    x: &Tensor,
    width: usize,
    aug: Augmentation,
    rng: &mut R,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(x.numel());
    for i in 0..x.rows() {
        data.extend(augment_image(x.row(i), width, aug, rng)?);
    }
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SslMode {
    LatentEnsemble,
    ImageNoiseEnsemble,
    ImageAffineEnsemble,
    EmbeddingOnly,
}

impl SslMode {
    pub const ALL: [SslMode; 4] = [
        SslMode::LatentEnsemble,
        SslMode::ImageNoiseEnsemble,
        SslMode::ImageAffineEnsemble,
        SslMode::EmbeddingOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SslMode::LatentEnsemble => "latent_ensemble",
            SslMode::ImageNoiseEnsemble => "image_noise_ensemble",
            SslMode::ImageAffineEnsemble => "image_affine_ensemble",
            SslMode::EmbeddingOnly => "embedding_only",
        }
    }

    pub fn uses_vae(self) -> bool {
        matches!(self, SslMode::LatentEnsemble | SslMode::EmbeddingOnly)
    }
}

impl fmt::Display for SslMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SslMode {
    type Err = SslError;
    fn from_str(s: &str) -> Result<Self> {
        SslMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SslError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslConfig {
    pub mode: SslMode,
    pub head_hidden: [usize; 2],
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub bias_correct: bool,
    pub rampup: RampupSchedule,
    pub noise_std: f64,
    pub max_shift: f64,
    pub max_rotation_deg: f64,
    /// Hidden widths of the pixel encoder used by the image-space modes.
    pub encoder_hidden: Vec<usize>,
    /// Output width of the pixel encoder (matches the VAE latent size).
    pub encoder_out: usize,
    /// Latent coordinates fed to the head; `None` keeps all of them.
    pub kept_dims: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            mode: SslMode::LatentEnsemble,
            head_hidden: [64, 32],
            dropout: 0.5,
            lr: 1e-5,
            epochs: 100,
            batch_size: 64,
            alpha: 0.6,
            bias_correct: true,
            rampup: RampupSchedule::default(),
            noise_std: 0.15,
            max_shift: 2.0,
            max_rotation_deg: 10.0,
            encoder_hidden: vec![256, 128],
            encoder_out: 10,
            kept_dims: None,
            seed: 42,
        }
    }
}

/// Trained classifier: a head over latent codes, or a pixel encoder plus a
/// head for the image-space modes.
#[derive(Debug, Clone, PartialEq)]
pub struct SslModel {
    pub mode: SslMode,
    pub pixel_encoder: Option<Mlp>,
    pub head: ClassifierHead,
    /// Latent coordinates fed to the head (latent modes only).
    pub kept_dims: Vec<usize>,
}

impl SslModel {
    /// Deterministic initialisation from `cfg.seed`.
    pub fn init(cfg: &SslConfig, input_dim: usize, latent_dim: usize, num_labels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4ead_0000_0000_0002);
        let (pixel_encoder, head_in, kept_dims) = if cfg.mode.uses_vae() {
            let kept = cfg
                .kept_dims
                .clone()
                .unwrap_or_else(|| (0..latent_dim).collect());
            (None, kept.len(), kept)
        } else {
            let mut w = vec![input_dim];
            w.extend_from_slice(&cfg.encoder_hidden);
            w.push(cfg.encoder_out);
            (Some(Mlp::init(&w, &mut rng)), cfg.encoder_out, Vec::new())
        };
        let head_seed = rng.gen();
        SslModel {
            mode: cfg.mode,
            pixel_encoder,
            head: ClassifierHead::new(head_in, cfg.head_hidden, num_labels, cfg.dropout, head_seed),
            kept_dims,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.pixel_encoder.as_ref().map_or_else(Vec::new, Mlp::params);
        p.extend(self.head.mlp.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = match self.pixel_encoder.as_mut() {
            Some(e) => e.params_mut(),
            None => Vec::new(),
        };
        p.extend(self.head.mlp.params_mut());
        p
    }

    /// Head input for a batch of images: posterior draw or mean restricted
    /// to the kept dimensions, or the raw pixels for image modes.
    fn inputs<R: Rng + ?Sized>(
        &self,
        vae: Option<&VaeModel>,
        x: &Tensor,
        mode: EmbedMode,
        rng: &mut R,
    ) -> Result<Tensor> {
        if self.mode.uses_vae() {
            let vae = vae.ok_or(SslError::MissingVae(self.mode))?;
            Ok(embed_sample(vae, x, mode, rng)?.select_cols(&self.kept_dims))
        } else {
            Ok(x.clone())
        }
    }

    fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        bound: &[Var],
        input: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<HeadOutput> {
        let (z, head_bound) = match &self.pixel_encoder {
            Some(enc) => {
                let n = enc.layers.len() * 2;
                let z = enc.forward::<R>(g, &bound[..n], input, None)?;
                (z, &bound[n..])
            }
            None => (input, bound),
        };
        head_forward_graph(&self.head, g, head_bound, z, training, rng)
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let mut entries = mlp_entries("head", &self.head.mlp);
        if let Some(enc) = &self.pixel_encoder {
            entries.extend(mlp_entries("encoder", enc));
        }
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let enc_widths = self.pixel_encoder.as_ref().map_or_else(Vec::new, Mlp::widths);
        entries.push(Entry::text(
            "meta",
            &format!(
                "kind=ssl\nmode={}\nhead_widths={}\ndropout={}\nencoder_widths={}\nkept_dims={}\n",
                self.mode,
                join(&self.head.mlp.widths()),
                self.head.dropout,
                join(&enc_widths),
                join(&self.kept_dims),
            ),
        ));
        entries
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let meta = parse_meta(&entries.text_entry("meta")?);
        let get = |k: &str| {
            meta.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| SslError::Checkpoint(format!("meta lacks {k}")))
        };
        if get("kind")? != "ssl" {
            return Err(SslError::Checkpoint("not a classifier checkpoint".into()));
        }
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| SslError::Checkpoint(format!("bad {k}"))))
                .collect()
        };
        let mode: SslMode = get("mode")?.parse()?;
        let hw = list("head_widths")?;
        if hw.len() != 4 {
            return Err(SslError::Checkpoint("head must have three layers".into()));
        }
        let dropout: f64 = get("dropout")?
            .parse()
            .map_err(|_| SslError::Checkpoint("bad dropout".into()))?;
        let mut head = ClassifierHead::zeros(hw[0], [hw[1], hw[2]], hw[3], dropout);
        load_mlp(entries, "head", &mut head.mlp)?;
        let ew = list("encoder_widths")?;
        let pixel_encoder = if ew.is_empty() {
            None
        } else {
            let mut enc = Mlp {
                layers: ew.windows(2).map(|p| Linear::zeros(p[0], p[1])).collect(),
            };
            load_mlp(entries, "encoder", &mut enc)?;
            Some(enc)
        };
        Ok(SslModel {
            mode,
            pixel_encoder,
            head,
            kept_dims: list("kept_dims")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(lten::save_tensor_file(path, &self.to_entries())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_entries(&lten::load_tensor_file(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SslEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub supervised: f64,
    pub consistency: f64,
    pub zeta: f64,
    pub val_mean_auroc: Option<f64>,
}

/// Evaluation-mode probabilities (posterior means, no dropout).
pub fn predict(model: &SslModel, vae: Option<&VaeModel>, images: &Tensor) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = model.inputs(vae, images, EmbedMode::Mean, &mut rng)?;
    predict_inputs(model, &input)
}

/// Evaluation-mode probabilities for latent codes already restricted to
/// the kept dimensions.
pub fn predict_latent(model: &SslModel, z: &Tensor) -> Result<Tensor> {
    if !model.mode.uses_vae() {
        return Err(SslError::Checkpoint("model does not consume latent codes".into()));
    }
    predict_inputs(model, z)
}

fn predict_inputs(model: &SslModel, input: &Tensor) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let bound = bind_all(model, &mut g, false);
    let iv = g.constant(input.clone());
    let out = model.forward(&mut g, &bound, iv, false, &mut rng)?;
    Ok(g.value(out.probs).clone())
}

fn bind_all(model: &SslModel, g: &mut Graph, trainable: bool) -> Vec<Var> {
    let mut b = model
        .pixel_encoder
        .as_ref()
        .map_or_else(Vec::new, |e| e.bind(g, trainable));
    b.extend(model.head.mlp.bind(g, trainable));
    b
}

/// Mean AUROC of `model` on one split of `bundle`.
pub fn evaluate(
    model: &SslModel,
    vae: Option<&VaeModel>,
    bundle: &DatasetBundle,
    split: Split,
) -> Result<AurocReport> {
    let idx = bundle.indices(split);
    let scores = predict(model, vae, &bundle.images().select_rows(&idx))?;
    Ok(mean_auroc(&scores, &bundle.label_matrix(&idx)?)?)
}

/// Batches over positions `0..n_labeled+n_unlabeled`, where the first
/// `n_labeled` positions are the labeled samples. Labeled samples are spread
/// round-robin (cycled when there are fewer than batches) so that every batch
/// holds at least one whenever any exist.
fn make_batches<R: Rng + ?Sized>(
    n_labeled: usize,
    n_unlabeled: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let total = n_labeled + n_unlabeled;
    let nb = total.div_ceil(batch_size.max(1)).max(1);
    let mut labeled: Vec<usize> = (0..n_labeled).collect();
    let mut unlabeled: Vec<usize> = (n_labeled..total).collect();
    labeled.shuffle(rng);
    unlabeled.shuffle(rng);
    let mut batches = vec![Vec::new(); nb];
    if n_labeled > 0 {
        for k in 0..n_labeled.max(nb) {
            batches[k % nb].push(labeled[k % n_labeled]);
        }
    }
    for (k, u) in unlabeled.into_iter().enumerate() {
        batches[(n_labeled + k) % nb].push(u);
    }
    batches.retain(|b| !b.is_empty());
    batches
}

/// Trains a fresh model initialised from `cfg.seed`.
pub fn train_ssl(
    vae: Option<&VaeModel>,
    bundle: &DatasetBundle,
    cfg: &SslConfig,
    on_epoch: impl FnMut(&SslEpochLog),
) -> Result<(SslModel, Vec<SslEpochLog>)> {
    let latent = vae.map_or(cfg.encoder_out, VaeModel::latent_dim);
    let init = SslModel::init(cfg, bundle.num_pixels(), latent, bundle.num_labels());
    train_ssl_from(init, vae, bundle, cfg, on_epoch)
}

/// Per epoch: stochastic forward passes with ζ = rampup_weight(epoch), an
/// Adam step per batch, then one EMA update of every sample's target from
/// that epoch's predictions. The VAE is only ever evaluated.
pub fn train_ssl_from(
    mut model: SslModel,
    vae: Option<&VaeModel>,
    bundle: &DatasetBundle,
    cfg: &SslConfig,
    mut on_epoch: impl FnMut(&SslEpochLog),
) -> Result<(SslModel, Vec<SslEpochLog>)> {
    if cfg.mode.uses_vae() && vae.is_none() {
        return Err(SslError::MissingVae(cfg.mode));
    }
    let labeled_idx = bundle.indices(Split::LabeledTrain);
    let unlabeled_idx = if cfg.mode == SslMode::EmbeddingOnly {
        Vec::new()
    } else {
        bundle.indices(Split::UnlabeledTrain)
    };
    if cfg.mode == SslMode::EmbeddingOnly && labeled_idx.is_empty() {
        return Err(SslError::NoSupervisedSignal);
    }
    let nl = bundle.num_labels();
    let n_lab = labeled_idx.len();
    let train_idx: Vec<usize> = labeled_idx.iter().chain(&unlabeled_idx).copied().collect();
    let n_train = train_idx.len();
    if n_train == 0 {
        return Err(SslError::Data(DataError::InsufficientSamples {
            what: "training",
            needed: 1,
            available: 0,
        }));
    }

    // only labeled_train labels are ever requested
    let mut y_train = Tensor::zeros(&[n_train, nl]);
    for (pos, &i) in labeled_idx.iter().enumerate() {
        let row = bundle
            .label_row(i)
            .ok_or_else(|| SslError::Checkpoint(format!("labeled sample {i} has no label")))?;
        for (dst, v) in y_train.row_mut(pos).iter_mut().zip(row) {
            *dst = *v as f64;
        }
    }
    let train_images = bundle.images().select_rows(&train_idx);

    let val_idx = bundle.indices(Split::Validation);
    let (val_inputs, val_labels) = if val_idx.is_empty() {
        (None, None)
    } else {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let x = bundle.images().select_rows(&val_idx);
        (
            Some(model.inputs(vae, &x, EmbedMode::Mean, &mut r)?),
            Some(bundle.label_matrix(&val_idx)?),
        )
    };

    let input_mode = match cfg.mode {
        SslMode::EmbeddingOnly => EmbedMode::Mean,
        _ => EmbedMode::Sample,
    };
    let augmentation = match cfg.mode {
        SslMode::ImageNoiseEnsemble => Some(Augmentation::Noise { std: cfg.noise_std }),
        SslMode::ImageAffineEnsemble => Some(Augmentation::Affine {
            max_shift: cfg.max_shift,
            max_rotation_deg: cfg.max_rotation_deg,
        }),
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a1b_0000_0000_0003);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &model.params());
    let mut state = EnsembleState::new(n_train, nl, cfg.alpha, cfg.bias_correct)?;
    let all_rows: Vec<usize> = (0..n_train).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let zeta = match cfg.mode {
            SslMode::EmbeddingOnly => 0.0,
            _ => rampup_weight(epoch as i64, &cfg.rampup)?,
        };
        let mut epoch_preds = Tensor::zeros(&[n_train, nl]);
        let (mut sum_loss, mut sum_sup, mut sum_cons, mut seen) = (0.0, 0.0, 0.0, 0usize);

        for batch in make_batches(n_lab, n_train - n_lab, cfg.batch_size, &mut rng) {
            let x = train_images.select_rows(&batch);
            let x = match augmentation {
                Some(aug) => augment_batch(&x, bundle.image_size(), aug, &mut rng)?,
                None => x,
            };
            let input = model.inputs(vae, &x, input_mode, &mut rng)?;
            let labeled: Vec<bool> = batch.iter().map(|&p| p < n_lab).collect();
            let y_true = y_train.select_rows(&batch);
            let targets = state.targets(&batch);

            let mut g = Graph::new();
            let bound = bind_all(&model, &mut g, true);
            let iv = g.constant(input);
            let out = model.forward(&mut g, &bound, iv, true, &mut rng)?;
            let nodes = ensemble_loss_graph(&mut g, out, &y_true, &labeled, &targets, zeta)?;
            let grads = g.backward(nodes.loss)?;
            let grads: Vec<Tensor> = bound
                .iter()
                .zip(model.params())
                .map(|(v, p)| grads.get_or_zeros(*v, p))
                .collect();
            adam.step(&mut model.params_mut(), &grads)?;

            let probs = g.value(out.probs);
            for (k, &p) in batch.iter().enumerate() {
                epoch_preds.row_mut(p).copy_from_slice(probs.row(k));
            }
            let w = batch.len() as f64;
            sum_loss += g.value(nodes.loss).item() * w;
            sum_sup += g.value(nodes.supervised).item() * w;
            sum_cons += g.value(nodes.consistency).item() * w;
            seen += batch.len();
        }
        state.update(&epoch_preds, &all_rows)?;

        let val_mean_auroc = match (&val_inputs, &val_labels) {
            (Some(x), Some(y)) => Some(mean_auroc(&predict_inputs(&model, x)?, y)?.mean),
            _ => None,
        };
        let entry = SslEpochLog {
            epoch,
            loss: sum_loss / seen as f64,
            supervised: sum_sup / seen as f64,
            consistency: sum_cons / seen as f64,
            zeta,
            val_mean_auroc,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((model, log))
}
