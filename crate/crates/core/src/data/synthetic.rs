//! Synthetic benchmark: a single soft-edged blob over a horizontal
//! background gradient, with labels given by thresholds on the generative
//! factors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, DatasetBundle, Split};
use crate::tensor::Tensor;

/// Sub-pixel grid used for anti-aliased coverage.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    /// Blob centre, fraction of image width.
    CenterX,
    /// Blob centre, fraction of image height.
    CenterY,
    /// Blob radius, fraction of image width.
    Radius,
    /// Blob brightness.
    Intensity,
    /// Peak brightness of the left-to-right background ramp.
    BackgroundSlope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub lo: f64,
    pub hi: f64,
}

/// `label = factors[factor] > threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRule {
    pub factor: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSpec {
    pub factors: Vec<Factor>,
    pub rules: Vec<LabelRule>,
}

impl Default for FactorSpec {
    /// Five factors, four labels, every rule splitting its factor range in half.
    fn default() -> Self {
        let f = |kind, lo, hi| Factor { kind, lo, hi };
        FactorSpec {
            factors: vec![
                f(FactorKind::CenterX, 0.3, 0.7),
                f(FactorKind::CenterY, 0.3, 0.7),
                f(FactorKind::Radius, 0.12, 0.3),
                f(FactorKind::Intensity, 0.6, 1.0),
                f(FactorKind::BackgroundSlope, 0.0, 0.2),
            ],
            rules: vec![
                LabelRule { factor: 2, threshold: 0.21 },
                LabelRule { factor: 0, threshold: 0.5 },
                LabelRule { factor: 3, threshold: 0.8 },
                LabelRule { factor: 1, threshold: 0.5 },
            ],
        }
    }
}

impl FactorSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.factors.len() < 2 {
            return Err(DataError::DegenerateSpec("need at least two factors".into()));
        }
        if self.rules.len() < 2 {
            return Err(DataError::DegenerateSpec("need at least two label rules".into()));
        }
        for (i, f) in self.factors.iter().enumerate() {
            if !(f.lo < f.hi) || !f.lo.is_finite() || !f.hi.is_finite() {
                return Err(DataError::DegenerateSpec(format!("factor {i} has empty range")));
            }
        }
        for (i, r) in self.rules.iter().enumerate() {
            let f = self.factors.get(r.factor).ok_or_else(|| {
                DataError::DegenerateSpec(format!("rule {i} references undeclared factor {}", r.factor))
            })?;
            let positive_rate = (f.hi - r.threshold) / (f.hi - f.lo);
            if !(0.2..=0.8).contains(&positive_rate) {
                return Err(DataError::DegenerateSpec(format!(
                    "rule {i} has positive rate {positive_rate:.3} outside [0.2, 0.8]"
                )));
            }
        }
        Ok(())
    }

    fn value_of(&self, kind: FactorKind, row: &[f64]) -> Option<f64> {
        self.factors.iter().position(|f| f.kind == kind).map(|i| row[i])
    }
}

/// Renders one image from a factor row. Missing factors fall back to a
/// centred, mid-sized, full-intensity blob on a black background.
pub fn render(spec: &FactorSpec, factors: &[f64], width: usize) -> Vec<f64> {
    let w = width as f64;
    let cx = spec.value_of(FactorKind::CenterX, factors).unwrap_or(0.5) * w;
    let cy = spec.value_of(FactorKind::CenterY, factors).unwrap_or(0.5) * w;
    let r = spec.value_of(FactorKind::Radius, factors).unwrap_or(0.2) * w;
    let intensity = spec.value_of(FactorKind::Intensity, factors).unwrap_or(1.0);
    let slope = spec.value_of(FactorKind::BackgroundSlope, factors).unwrap_or(0.0);
    let r2 = r * r;
    let denom = (width.max(2) - 1) as f64;
    let step = 1.0 / SUPERSAMPLE as f64;

    let mut img = Vec::with_capacity(width * width);
    for py in 0..width {
        for px in 0..width {
            let mut inside = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    if (x - cx).powi(2) + (y - cy).powi(2) <= r2 {
                        inside += 1;
                    }
                }
            }
            let coverage = inside as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let bg = slope * px as f64 / denom;
            img.push((bg * (1.0 - coverage) + intensity * coverage).clamp(0.0, 1.0));
        }
    }
    img
}

/// Samples `n` factor rows uniformly, renders them, and applies the label
/// rules. All samples start in the unlabeled split with known labels.
pub fn generate_synthetic(
    spec: &FactorSpec,
    n: usize,
    width: usize,
    seed: u64,
) -> Result<DatasetBundle, DataError> {
    spec.validate()?;
    if width < 8 {
        return Err(DataError::DegenerateSpec(format!("image width {width} < 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nf = spec.factors.len();
    let nl = spec.rules.len();
    let mut factors = Vec::with_capacity(n * nf);
    let mut images = Vec::with_capacity(n * width * width);
    let mut labels = Vec::with_capacity(n * nl);
    for _ in 0..n {
        let row: Vec<f64> = spec
            .factors
            .iter()
            .map(|f| rng.gen_range(f.lo..f.hi))
            .collect();
        images.extend(render(spec, &row, width));
        labels.extend(
            spec.rules
                .iter()
                .map(|r| u8::from(row[r.factor] > r.threshold)),
        );
        factors.extend(row);
    }
    DatasetBundle::new(
        width,
        Tensor::new(vec![n, width * width], images)?,
        nl,
        labels,
        vec![true; n],
        vec![Split::UnlabeledTrain; n],
        Some(Tensor::new(vec![n, nf], factors)?),
    )
}
