//! Fully-connected VAE with a diagonal-Gaussian posterior, a Bernoulli
//! decoder and an isotropic standard-normal prior.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::lten::{self, Entry, EntryList, LtenError};
use crate::data::DatasetBundle;
use crate::nn::{Linear, Mlp};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("input width {got} does not match model width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("active-unit variance needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lten(#[from] LtenError),
}

pub type Result<T> = std::result::Result<T, VaeError>;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    latent_dim: usize,
}

/// Posterior `q(z|x) = N(mu, exp(logvar))` for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorBatch {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl VaeModel {
    /// Encoder `[P, hidden…, 2d]`, decoder `[d, reversed hidden…, P]`.
    pub fn new(input_dim: usize, hidden: &[usize], latent_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (enc, dec) = Self::widths(input_dim, hidden, latent_dim);
        VaeModel {
            encoder: Mlp::init(&enc, &mut rng),
            decoder: Mlp::init(&dec, &mut rng),
            latent_dim,
        }
    }

    /// Every weight and bias zero.
    pub fn zeros(input_dim: usize, hidden: &[usize], latent_dim: usize) -> Self {
        let (enc, dec) = Self::widths(input_dim, hidden, latent_dim);
        let zeros = |w: &[usize]| Mlp {
            layers: w.windows(2).map(|p| Linear::zeros(p[0], p[1])).collect(),
        };
        VaeModel {
            encoder: zeros(&enc),
            decoder: zeros(&dec),
            latent_dim,
        }
    }

    fn widths(input_dim: usize, hidden: &[usize], latent_dim: usize) -> (Vec<usize>, Vec<usize>) {
        let mut enc = vec![input_dim];
        enc.extend_from_slice(hidden);
        enc.push(2 * latent_dim);
        let mut dec = vec![latent_dim];
        dec.extend(hidden.iter().rev());
        dec.push(input_dim);
        (enc, dec)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        let w = self.encoder.widths();
        w[1..w.len() - 1].to_vec()
    }

    /// Encoder parameters followed by decoder parameters.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    fn check_width(&self, x: &Tensor, expected: usize) -> Result<()> {
        if x.rank() != 2 || x.cols() != expected {
            return Err(VaeError::WidthMismatch {
                expected,
                got: x.cols(),
            });
        }
        Ok(())
    }

    pub fn to_entries(&self, seed: u64) -> Vec<Entry> {
        let mut entries = Vec::new();
        for (prefix, mlp) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            entries.extend(mlp_entries(prefix, mlp));
        }
        let hidden: Vec<String> = self.hidden_widths().iter().map(|w| w.to_string()).collect();
        entries.push(Entry::text(
            "meta",
            &format!(
                "kind=vae\ninput_dim={}\nlatent_dim={}\nhidden={}\nseed={seed}\n",
                self.input_dim(),
                self.latent_dim,
                hidden.join(",")
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
                .ok_or_else(|| VaeError::Checkpoint(format!("meta lacks {k}")))
        };
        if get("kind")? != "vae" {
            return Err(VaeError::Checkpoint("not a VAE checkpoint".into()));
        }
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| VaeError::Checkpoint(format!("meta {k} is not an integer")))
        };
        let input_dim = num("input_dim")?;
        let latent_dim = num("latent_dim")?;
        let hidden: Vec<usize> = get("hidden")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| VaeError::Checkpoint("bad hidden widths".into())))
            .collect::<Result<_>>()?;
        let mut model = VaeModel::zeros(input_dim, &hidden, latent_dim);
        load_mlp(entries, "encoder", &mut model.encoder)?;
        load_mlp(entries, "decoder", &mut model.decoder)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, seed: u64) -> Result<()> {
        Ok(lten::save_tensor_file(path, &self.to_entries(seed))?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_entries(&lten::load_tensor_file(path)?)
    }
}

pub(crate) fn mlp_entries(prefix: &str, mlp: &Mlp) -> Vec<Entry> {
    let mut out = Vec::new();
    for (i, l) in mlp.layers.iter().enumerate() {
        out.push(Entry::f64(
            format!("{prefix}.{i}.weight"),
            l.weight.shape().to_vec(),
            l.weight.data().to_vec(),
        ));
        out.push(Entry::f64(
            format!("{prefix}.{i}.bias"),
            l.bias.shape().to_vec(),
            l.bias.data().to_vec(),
        ));
    }
    out
}

/// Fills an already-shaped MLP from `{prefix}.{i}.weight|bias` entries.
pub(crate) fn load_mlp(entries: &[Entry], prefix: &str, mlp: &mut Mlp) -> Result<()> {
    for (i, l) in mlp.layers.iter_mut().enumerate() {
        for (suffix, t) in [("weight", &mut l.weight), ("bias", &mut l.bias)] {
            let name = format!("{prefix}.{i}.{suffix}");
            let (shape, data) = entries.f64_entry(&name)?;
            if shape != t.shape() {
                return Err(VaeError::Checkpoint(format!(
                    "{name} has shape {shape:?}, expected {:?}",
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(data);
        }
    }
    Ok(())
}

pub(crate) fn parse_meta(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Graph-side encoder: returns `(mu, logvar)` nodes.
pub fn encode_graph(model: &VaeModel, g: &mut Graph, bound: &[Var], x: Var) -> Result<(Var, Var)> {
    let h = model
        .encoder
        .forward::<ChaCha8Rng>(g, bound, x, None)?;
    let d = model.latent_dim;
    Ok((g.slice_cols(h, 0, d)?, g.slice_cols(h, d, d)?))
}

/// `z = mu + exp(0.5·logvar) ⊙ eps`, with `eps` a constant.
pub fn reparameterize_graph(g: &mut Graph, mu: Var, logvar: Var, eps: &Tensor) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let sigma = g.exp(half);
    let e = g.constant(eps.clone());
    let noise = g.mul(sigma, e)?;
    Ok(g.add(mu, noise)?)
}

/// Batch mean of `0.5·Σ(mu² + exp(logvar) − 1 − logvar)`.
pub fn kl_graph(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let (b, d) = (g.value(mu).rows(), g.value(mu).cols());
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(logvar);
    let s = g.add(mu2, var)?;
    let s = g.sub(s, logvar)?;
    let total = g.sum_all(s);
    let offset = g.constant(Tensor::scalar((b * d) as f64));
    let centered = g.sub(total, offset)?;
    Ok(g.scale(centered, 0.5 / b as f64))
}

/// Batch mean of the Bernoulli log-likelihood `Σ x·l − softplus(l)` from
/// decoder logits `l`.
pub fn bernoulli_loglik_graph(g: &mut Graph, x: Var, logits: Var) -> Result<Var> {
    let b = g.value(x).rows();
    let xl = g.mul(x, logits)?;
    let sp = g.softplus(logits);
    let d = g.sub(xl, sp)?;
    let total = g.sum_all(d);
    Ok(g.scale(total, 1.0 / b as f64))
}

pub fn encode(model: &VaeModel, x: &Tensor) -> Result<PosteriorBatch> {
    model.check_width(x, model.input_dim())?;
    let mut g = Graph::new();
    let bound = model.encoder.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let (mu, logvar) = encode_graph(model, &mut g, &bound, xv)?;
    Ok(PosteriorBatch {
        mu: g.value(mu).clone(),
        logvar: g.value(logvar).clone(),
    })
}

pub fn reparameterize(post: &PosteriorBatch, eps: &Tensor) -> Result<Tensor> {
    if eps.shape() != post.mu.shape() || post.logvar.shape() != post.mu.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "reparameterize",
            left: post.mu.shape().to_vec(),
            right: eps.shape().to_vec(),
        }
        .into());
    }
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.logvar.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(Tensor::new(post.mu.shape().to_vec(), data)?)
}

/// Pre-sigmoid decoder output.
pub fn decode_logits(model: &VaeModel, z: &Tensor) -> Result<Tensor> {
    model.check_width(z, model.latent_dim)?;
    Ok(model.decoder.eval(z)?)
}

/// Bernoulli means in `(0,1)`.
pub fn decode(model: &VaeModel, z: &Tensor) -> Result<Tensor> {
    let mut t = decode_logits(model, z)?;
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = crate::tensor::sigmoid(*v));
    Ok(t)
}

/// Analytic KL from the diagonal posterior to N(0, I), averaged over the batch.
pub fn kl_term(post: &PosteriorBatch) -> f64 {
    let b = post.mu.rows().max(1) as f64;
    let s: f64 = post
        .mu
        .data()
        .iter()
        .zip(post.logvar.data())
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum();
    0.5 * s / b
}

/// Batch mean of `Σ_p x log x̂ + (1−x) log(1−x̂)`. Probabilities are mapped to
/// logits with clamping so that saturated means give a finite value.
pub fn recon_loglik(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "recon_loglik",
            left: x.shape().to_vec(),
            right: x_hat.shape().to_vec(),
        }
        .into());
    }
    let logits: Vec<f64> = x_hat
        .data()
        .iter()
        .map(|p| {
            let p = p.clamp(1e-300, 1.0 - f64::EPSILON / 2.0);
            p.ln() - (-p).ln_1p()
        })
        .collect();
    recon_loglik_logits(x, &Tensor::new(x_hat.shape().to_vec(), logits)?)
}

pub fn recon_loglik_logits(x: &Tensor, logits: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let lv = g.constant(logits.clone());
    let r = bernoulli_loglik_graph(&mut g, xv, lv)?;
    Ok(g.value(r).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Negative ELBO (β-weighted).
    pub loss: f64,
    /// Negative reconstruction log-likelihood.
    pub recon: f64,
    pub kl: f64,
}

struct LossGraph {
    g: Graph,
    loss: Var,
    recon: Var,
    kl: Var,
    params: Vec<Var>,
}

fn build_loss(model: &VaeModel, x: &Tensor, eps: &Tensor, beta: f64) -> Result<LossGraph> {
    model.check_width(x, model.input_dim())?;
    let mut g = Graph::new();
    let enc = model.encoder.bind(&mut g, true);
    let dec = model.decoder.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let (mu, logvar) = encode_graph(model, &mut g, &enc, xv)?;
    let z = reparameterize_graph(&mut g, mu, logvar, eps)?;
    let logits = model.decoder.forward::<ChaCha8Rng>(&mut g, &dec, z, None)?;
    let ll = bernoulli_loglik_graph(&mut g, xv, logits)?;
    let kl = kl_graph(&mut g, mu, logvar)?;
    let weighted = g.scale(kl, beta);
    let loss = g.sub(weighted, ll)?;
    let mut params = enc;
    params.extend(dec);
    Ok(LossGraph {
        g,
        loss,
        recon: ll,
        kl,
        params,
    })
}

fn parts_of(lg: &LossGraph) -> LossParts {
    LossParts {
        loss: lg.g.value(lg.loss).item(),
        recon: -lg.g.value(lg.recon).item(),
        kl: lg.g.value(lg.kl).item(),
    }
}

/// `−E_q[log p(x|z)] + β·KL(q(z|x) ‖ p(z))` with the given `eps` draw.
pub fn vae_loss(model: &VaeModel, x: &Tensor, eps: &Tensor, beta: f64) -> Result<LossParts> {
    Ok(parts_of(&build_loss(model, x, eps, beta)?))
}

/// Loss parts plus gradients in [`VaeModel::params`] order.
pub fn vae_loss_and_grad(
    model: &VaeModel,
    x: &Tensor,
    eps: &Tensor,
    beta: f64,
) -> Result<(LossParts, Vec<Tensor>)> {
    let lg = build_loss(model, x, eps, beta)?;
    let grads = lg.g.backward(lg.loss)?;
    let out = lg
        .params
        .iter()
        .zip(model.params())
        .map(|(v, p)| grads.get_or_zeros(*v, p))
        .collect();
    Ok((parts_of(&lg), out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeTrainConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            hidden: vec![256, 128],
            latent_dim: 10,
            epochs: 200,
            batch_size: 64,
            lr: 1e-5,
            beta: 1.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Trains on every row of `images`, one posterior sample per example per step.
pub fn fit_vae(
    mut model: VaeModel,
    images: &Tensor,
    cfg: &VaeTrainConfig,
    mut on_epoch: impl FnMut(&VaeEpochLog),
) -> Result<(VaeModel, Vec<VaeEpochLog>)> {
    let n = images.rows();
    if n == 0 {
        return Err(VaeError::EmptyDataset);
    }
    model.check_width(images, model.input_dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000_0000_0001);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &model.params());
    let mut order: Vec<usize> = (0..n).collect();
    let bs = cfg.batch_size.max(1);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        for chunk in order.chunks(bs) {
            let x = images.select_rows(chunk);
            let eps = Tensor::randn(&[chunk.len(), model.latent_dim], 1.0, &mut rng);
            let (parts, grads) = vae_loss_and_grad(&model, &x, &eps, cfg.beta)?;
            adam.step(&mut model.params_mut(), &grads)?;
            let w = chunk.len() as f64;
            sums.0 += parts.loss * w;
            sums.1 += parts.recon * w;
            sums.2 += parts.kl * w;
        }
        let entry = VaeEpochLog {
            epoch,
            loss: sums.0 / n as f64,
            recon: sums.1 / n as f64,
            kl: sums.2 / n as f64,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((model, log))
}

/// Trains a fresh model on the bundle's labeled and unlabeled training
/// images; labels are never touched.
pub fn train_vae(bundle: &DatasetBundle, cfg: &VaeTrainConfig) -> Result<(VaeModel, Vec<VaeEpochLog>)> {
    train_vae_with(bundle, cfg, |_| {})
}

/// [`train_vae`] with a per-epoch callback.
pub fn train_vae_with(
    bundle: &DatasetBundle,
    cfg: &VaeTrainConfig,
    on_epoch: impl FnMut(&VaeEpochLog),
) -> Result<(VaeModel, Vec<VaeEpochLog>)> {
    let idx = bundle.train_indices();
    if idx.is_empty() {
        return Err(VaeError::EmptyDataset);
    }
    let images = bundle.images().select_rows(&idx);
    let model = VaeModel::new(bundle.num_pixels(), &cfg.hidden, cfg.latent_dim, cfg.seed);
    fit_vae(model, &images, cfg, on_epoch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveUnits {
    /// `A_u`: variance over the data of the posterior mean of dimension `u`.
    pub variance: Vec<f64>,
    pub active: Vec<bool>,
    pub threshold: f64,
}

impl ActiveUnits {
    pub fn active_dims(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&u| self.active[u]).collect()
    }

    pub fn inactive_dims(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&u| !self.active[u]).collect()
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
}

/// Unbiased variance of each column. Values are summed in sorted order, so
/// the result does not depend on row order.
pub fn column_variance(x: &Tensor) -> Result<Vec<f64>> {
    let n = x.rows();
    if n < 2 {
        return Err(VaeError::TooFewSamples(n));
    }
    let mut out = Vec::with_capacity(x.cols());
    let mut col = vec![0.0; n];
    for u in 0..x.cols() {
        for (i, c) in col.iter_mut().enumerate() {
            *c = x.row(i)[u];
        }
        col.sort_by(f64::total_cmp);
        // shift by the minimum so constant columns give exactly zero
        let lo = col[0];
        col.iter_mut().for_each(|v| *v -= lo);
        let mean = col.iter().sum::<f64>() / n as f64;
        let mut dev: Vec<f64> = col.iter().map(|v| (v - mean) * (v - mean)).collect();
        dev.sort_by(f64::total_cmp);
        out.push(dev.iter().sum::<f64>() / (n - 1) as f64);
    }
    Ok(out)
}

pub fn active_units(model: &VaeModel, images: &Tensor, threshold: f64) -> Result<ActiveUnits> {
    if images.rows() < 2 {
        return Err(VaeError::TooFewSamples(images.rows()));
    }
    let post = encode(model, images)?;
    let variance = column_variance(&post.mu)?;
    let active = variance.iter().map(|a| *a >= threshold).collect();
    Ok(ActiveUnits {
        variance,
        active,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::Rng;

    fn rand_images(n: usize, p: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, p], (0..n * p).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let m = VaeModel::new(256, &[32, 16], 10, 1);
        let row = rand_images(1, 256, 2);
        let x = row.select_rows(&[0; 8]);
        let post = encode(&m, &x).unwrap();
        assert_eq!(post.mu.shape(), &[8, 10]);
        assert_eq!(post.logvar.shape(), &[8, 10]);
        assert_eq!(post.mu.row(0), post.mu.row(7));
        assert_eq!(post.logvar.row(3), post.logvar.row(5));
        assert!(matches!(
            encode(&m, &rand_images(2, 100, 0)),
            Err(VaeError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn zero_network_gives_standard_posterior() {
        let m = VaeModel::zeros(16, &[8], 3);
        let post = encode(&m, &rand_images(4, 16, 3)).unwrap();
        assert!(post.mu.data().iter().all(|v| *v == 0.0));
        assert!(post.logvar.data().iter().all(|v| *v == 0.0));
        let xh = decode(&m, &Tensor::full(&[2, 3], 0.7)).unwrap();
        assert!(xh.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn reparameterize_examples() {
        let post = |mu: f64, lv: f64| PosteriorBatch {
            mu: Tensor::full(&[1, 1], mu),
            logvar: Tensor::full(&[1, 1], lv),
        };
        let one = Tensor::full(&[1, 1], 1.0);
        assert_eq!(reparameterize(&post(0.5, 0.0), &one).unwrap().item(), 1.5);
        assert_eq!(
            reparameterize(&post(0.5, 0.3), &Tensor::zeros(&[1, 1])).unwrap().item(),
            0.5
        );
        let z = reparameterize(&post(0.0, 2.0 * 3f64.ln()), &Tensor::full(&[1, 1], 2.0)).unwrap();
        assert!((z.item() - 6.0).abs() < 1e-12);
        assert!(reparameterize(&post(0.0, 0.0), &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn reparameterize_gradients() {
        let eps = Tensor::from_rows(&[vec![0.7, -1.2]]).unwrap();
        let mu = Tensor::from_rows(&[vec![0.3, -0.4]]).unwrap();
        let lv = Tensor::from_rows(&[vec![0.2, -0.6]]).unwrap();
        let mut g = Graph::new();
        let (m, l) = (g.param(mu.clone()), g.param(lv.clone()));
        let z = reparameterize_graph(&mut g, m, l, &eps).unwrap();
        let s = g.sum_all(z);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(m).unwrap().data(), &[1.0, 1.0]);
        for j in 0..2 {
            let expected = 0.5 * (0.5 * lv.data()[j]).exp() * eps.data()[j];
            assert!((gr.get(l).unwrap().data()[j] - expected).abs() < 1e-15);
        }
        let err = grad_check(&[mu, lv], 1e-6, |p| {
            let mut g = Graph::new();
            let (m, l) = (g.param(p[0].clone()), g.param(p[1].clone()));
            let z = reparameterize_graph(&mut g, m, l, &eps)?;
            let s = g.sum_all(z);
            let gr = g.backward(s)?;
            Ok::<_, VaeError>((
                g.value(s).item(),
                vec![gr.get(m).unwrap().clone(), gr.get(l).unwrap().clone()],
            ))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn decode_shape_and_range() {
        let m = VaeModel::new(20, &[12], 10, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::randn(&[8, 10], 3.0, &mut rng);
        let a = decode(&m, &z).unwrap();
        assert_eq!(a.shape(), &[8, 20]);
        assert!(a.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(a, decode(&m, &z).unwrap());
        assert!(decode(&m, &Tensor::zeros(&[1, 9])).is_err());
    }

    #[test]
    fn kl_closed_form_examples() {
        let p = |mu: Vec<f64>, lv: Vec<f64>| PosteriorBatch {
            mu: Tensor::from_rows(&[mu]).unwrap(),
            logvar: Tensor::from_rows(&[lv]).unwrap(),
        };
        assert_eq!(kl_term(&p(vec![0.0, 0.0], vec![0.0, 0.0])), 0.0);
        assert_eq!(kl_term(&p(vec![1.0, 0.0], vec![0.0, 0.0])), 0.5);
        let k = kl_term(&p(vec![0.0], vec![4f64.ln()]));
        assert!((k - 0.5 * (4.0 - 1.0 - 4f64.ln())).abs() < 1e-15);
        assert!((k - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn kl_graph_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let post = PosteriorBatch {
            mu: Tensor::randn(&[5, 3], 1.0, &mut rng),
            logvar: Tensor::randn(&[5, 3], 0.5, &mut rng),
        };
        let mut g = Graph::new();
        let (m, l) = (g.constant(post.mu.clone()), g.constant(post.logvar.clone()));
        let k = kl_graph(&mut g, m, l).unwrap();
        assert!((g.value(k).item() - kl_term(&post)).abs() < 1e-12);
        assert!(kl_term(&post) >= 0.0);
    }

    #[test]
    fn recon_examples_and_stability() {
        let one = |v: f64| Tensor::full(&[1, 1], v);
        let r = recon_loglik(&one(1.0), &one(0.5)).unwrap();
        assert!((r - 0.5f64.ln()).abs() < 1e-12);
        let half = Tensor::full(&[1, 4], 0.5);
        let r = recon_loglik(&half, &half).unwrap();
        assert!((r + 4.0 * 2f64.ln()).abs() < 1e-12);

        let r = recon_loglik_logits(&one(0.0), &one(30.0)).unwrap();
        assert!(r.is_finite() && r < -29.0);
        let r = recon_loglik_logits(&one(1.0), &one(-30.0)).unwrap();
        assert!(r.is_finite() && r < -29.0);
        let r = recon_loglik(&one(0.0), &one(1.0)).unwrap();
        assert!(r.is_finite() && r < -30.0);
        let r = recon_loglik(&one(1.0), &one(0.0)).unwrap();
        assert!(r.is_finite());
    }

    #[test]
    fn zero_model_loss_is_p_ln2() {
        let m = VaeModel::zeros(9, &[4], 2);
        let x = Tensor::full(&[3, 9], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let parts = vae_loss(&m, &x, &eps, 1.0).unwrap();
        assert!((parts.loss - 9.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(parts.kl, 0.0);
    }

    #[test]
    fn vae_loss_gradient_check() {
        let m = VaeModel::new(16, &[6], 2, 3);
        let x = rand_images(3, 16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let params: Vec<Tensor> = m.params().into_iter().cloned().collect();
        let err = grad_check(&params, 1e-5, |p| {
            let mut mm = m.clone();
            for (dst, src) in mm.params_mut().into_iter().zip(p) {
                *dst = src.clone();
            }
            let (parts, g) = vae_loss_and_grad(&mm, &x, &eps, 1.0)?;
            Ok::<_, VaeError>((parts.loss, g))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn training_is_deterministic_and_lr_zero_is_frozen() {
        let x = rand_images(64, 16, 9);
        let cfg = VaeTrainConfig {
            hidden: vec![8],
            latent_dim: 2,
            epochs: 2,
            batch_size: 16,
            lr: 1e-3,
            ..Default::default()
        };
        let init = VaeModel::new(16, &[8], 2, 1);
        let (a, la) = fit_vae(init.clone(), &x, &cfg, |_| {}).unwrap();
        let (b, lb) = fit_vae(init.clone(), &x, &cfg, |_| {}).unwrap();
        assert_eq!(la.last().unwrap().loss.to_bits(), lb.last().unwrap().loss.to_bits());
        assert_eq!(a, b);

        let frozen = VaeTrainConfig { lr: 0.0, epochs: 3, ..cfg };
        let (c, _) = fit_vae(init.clone(), &x, &frozen, |_| {}).unwrap();
        assert_eq!(c, init);
        assert!(matches!(
            fit_vae(init, &Tensor::zeros(&[0, 16]), &frozen, |_| {}),
            Err(VaeError::EmptyDataset)
        ));
    }

    #[test]
    fn active_units_constant_and_pixel_mean_dims() {
        // dim 0 reads the pixel mean, dim 1 ignores the input
        let p = 4;
        let mut m = VaeModel::zeros(p, &[1], 2);
        m.encoder.layers[0].weight = Tensor::full(&[p, 1], 1.0 / p as f64);
        m.encoder.layers[0].bias = Tensor::full(&[1], 10.0);
        m.encoder.layers[1].weight = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        m.encoder.layers[1].bias = Tensor::from_vec(vec![-10.0, 0.3, 0.0, 0.0]);

        // pixel means alternate 0.3 / 0.7: unbiased variance of n=100 → 0.04·100/99
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|i| vec![if i % 2 == 0 { 0.3 } else { 0.7 }; p])
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let au = active_units(&m, &x, 1e-2).unwrap();
        let direct = {
            let means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / p as f64).collect();
            let mu = means.iter().sum::<f64>() / 100.0;
            means.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 99.0
        };
        assert!((au.variance[0] - direct).abs() < 1e-12);
        assert!((au.variance[0] - 0.04 * 100.0 / 99.0).abs() < 1e-12);
        assert_eq!(au.variance[1], 0.0);
        assert_eq!(au.active, vec![true, false]);
        assert!(matches!(
            active_units(&m, &x.select_rows(&[0]), 1e-2),
            Err(VaeError::TooFewSamples(1))
        ));
    }

    #[test]
    fn active_units_invariant_to_order() {
        let m = VaeModel::new(16, &[8], 3, 2);
        let x = rand_images(50, 16, 1);
        let mut idx: Vec<usize> = (0..50).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        let a = active_units(&m, &x, 1e-2).unwrap();
        let b = active_units(&m, &x.select_rows(&idx), 1e-2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = VaeModel::new(16, &[8, 4], 3, 7);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vae.lten");
        m.save(&p, 7).unwrap();
        assert_eq!(VaeModel::load(&p).unwrap(), m);
    }
}
