//! Datasets: the labeled/unlabeled/validation/test bundle, balanced split
//! construction, the synthetic benchmark and file I/O.

pub mod lten;
pub mod manifest;
pub mod synthetic;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};
use lten::{Entry, EntryList, LtenError};

pub use synthetic::{generate_synthetic, Factor, FactorKind, FactorSpec, LabelRule};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("degenerate factor spec: {0}")]
    DegenerateSpec(String),
    #[error("insufficient positives for label {label}: need {needed}, found {available}")]
    InsufficientPositives {
        label: usize,
        needed: usize,
        available: usize,
    },
    #[error("not enough samples: need {needed} for {what}, have {available}")]
    InsufficientSamples {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("label column {label} has a single class in the {split} split")]
    DegenerateSplit { label: usize, split: &'static str },
    #[error("malformed bundle: {0}")]
    Malformed(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lten(#[from] LtenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Split {
    LabeledTrain = 0,
    UnlabeledTrain = 1,
    Validation = 2,
    Test = 3,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::LabeledTrain => "labeled_train",
            Split::UnlabeledTrain => "unlabeled_train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    fn from_code(c: u8) -> Option<Split> {
        match c {
            0 => Some(Split::LabeledTrain),
            1 => Some(Split::UnlabeledTrain),
            2 => Some(Split::Validation),
            3 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Images in `[0,1]`, binary multi-label targets and split assignment.
///
/// Labels of `unlabeled_train` samples are hidden: [`DatasetBundle::label_row`]
/// returns `None` for them and counts the attempt, so tests can assert that
/// no training path ever asked.
#[derive(Debug)]
pub struct DatasetBundle {
    image_size: usize,
    images: Tensor,
    num_labels: usize,
    labels: Vec<u8>,
    label_known: Vec<bool>,
    split: Vec<Split>,
    factors: Option<Tensor>,
    hidden_reads: AtomicUsize,
}

impl Clone for DatasetBundle {
    fn clone(&self) -> Self {
        DatasetBundle {
            image_size: self.image_size,
            images: self.images.clone(),
            num_labels: self.num_labels,
            labels: self.labels.clone(),
            label_known: self.label_known.clone(),
            split: self.split.clone(),
            factors: self.factors.clone(),
            hidden_reads: AtomicUsize::new(self.hidden_reads.load(Ordering::Relaxed)),
        }
    }
}

impl DatasetBundle {
    pub fn new(
        image_size: usize,
        images: Tensor,
        num_labels: usize,
        labels: Vec<u8>,
        label_known: Vec<bool>,
        split: Vec<Split>,
        factors: Option<Tensor>,
    ) -> Result<Self, DataError> {
        let n = images.rows();
        let malformed = |m: String| Err(DataError::Malformed(m));
        if images.rank() != 2 || images.cols() != image_size * image_size {
            return malformed(format!(
                "images shape {:?} does not hold {image_size}x{image_size} pixels",
                images.shape()
            ));
        }
        if labels.len() != n * num_labels || label_known.len() != n || split.len() != n {
            return malformed("label/split arrays do not match sample count".into());
        }
        if labels.iter().any(|l| *l > 1) {
            return malformed("labels must be 0 or 1".into());
        }
        if let Some(f) = &factors {
            if f.rows() != n {
                return malformed("factor rows do not match sample count".into());
            }
        }
        for i in 0..n {
            if split[i] != Split::UnlabeledTrain && !label_known[i] {
                return malformed(format!("sample {i} in {} has no label", split[i].name()));
            }
        }
        Ok(DatasetBundle {
            image_size,
            images,
            num_labels,
            labels,
            label_known,
            split,
            factors,
            hidden_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn num_pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn factors(&self) -> Option<&Tensor> {
        self.factors.as_ref()
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.split[i]
    }

    pub fn label_known(&self, i: usize) -> bool {
        self.label_known[i]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Labeled plus unlabeled training samples, in index order.
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| matches!(self.split[i], Split::LabeledTrain | Split::UnlabeledTrain))
            .collect()
    }

    /// Label vector of sample `i`, or `None` when it is hidden
    /// (`unlabeled_train`) or unknown. Asking for a hidden label is recorded.
    pub fn label_row(&self, i: usize) -> Option<&[u8]> {
        if self.split[i] == Split::UnlabeledTrain {
            self.hidden_reads.fetch_add(1, Ordering::Relaxed);
            return None;
        }
        self.label_known[i].then(|| self.raw_label(i))
    }

    /// Number of attempts to read a hidden label through [`Self::label_row`].
    pub fn hidden_label_reads(&self) -> usize {
        self.hidden_reads.load(Ordering::Relaxed)
    }

    /// Ground-truth labels regardless of split, for split construction and
    /// offline analysis. Training code must use [`Self::label_row`].
    pub fn label_row_unguarded(&self, i: usize) -> &[u8] {
        self.raw_label(i)
    }

    fn raw_label(&self, i: usize) -> &[u8] {
        &self.labels[i * self.num_labels..(i + 1) * self.num_labels]
    }

    /// `[len × L]` label matrix for evaluation splits.
    pub fn label_matrix(&self, idx: &[usize]) -> Result<Tensor, DataError> {
        let mut data = Vec::with_capacity(idx.len() * self.num_labels);
        for &i in idx {
            let row = self.label_row(i).ok_or_else(|| {
                DataError::Malformed(format!("label of sample {i} is not available"))
            })?;
            data.extend(row.iter().map(|v| *v as f64));
        }
        Ok(Tensor::new(vec![idx.len(), self.num_labels], data)?)
    }

    /// Serializes as LTEN entries `images`, `labels`, `label_known`,
    /// `split` and optionally `factors`.
    pub fn to_entries(&self) -> Vec<Entry> {
        let n = self.len();
        let mut entries = vec![
            Entry::f64("images", self.images.shape().to_vec(), self.images.data().to_vec()),
            Entry::u8("labels", vec![n, self.num_labels], self.labels.clone()),
            Entry::u8(
                "label_known",
                vec![n],
                self.label_known.iter().map(|k| u8::from(*k)).collect(),
            ),
            Entry::u8("split", vec![n], self.split.iter().map(|s| *s as u8).collect()),
        ];
        if let Some(f) = &self.factors {
            entries.push(Entry::f64("factors", f.shape().to_vec(), f.data().to_vec()));
        }
        entries
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self, DataError> {
        let (ishape, images) = entries.f64_entry("images")?;
        let (lshape, labels) = entries.u8_entry("labels")?;
        let (_, known) = entries.u8_entry("label_known")?;
        let (_, split) = entries.u8_entry("split")?;
        if ishape.len() != 2 || lshape.len() != 2 {
            return Err(DataError::Malformed("images and labels must be matrices".into()));
        }
        let side = (ishape[1] as f64).sqrt().round() as usize;
        let split = split
            .iter()
            .map(|c| {
                Split::from_code(*c).ok_or_else(|| DataError::Malformed(format!("split code {c}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let factors = match entries.f64_entry("factors") {
            Ok((s, d)) => Some(Tensor::new(s.to_vec(), d.to_vec())?),
            Err(LtenError::MissingEntry(_)) => None,
            Err(e) => return Err(e.into()),
        };
        DatasetBundle::new(
            side,
            Tensor::new(ishape.to_vec(), images.to_vec())?,
            lshape[1],
            labels.to_vec(),
            known.iter().map(|k| *k != 0).collect(),
            split,
            factors,
        )
    }

    pub fn encode(&self) -> Result<Vec<u8>, DataError> {
        Ok(lten::encode(&self.to_entries())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        Ok(lten::save_tensor_file(path, &self.to_entries())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let entries = lten::load_tensor_file(path)?;
        Self::from_entries(&entries)
    }
}

/// Assigns splits: a labeled training set holding at least `k_per_label`
/// positives for every label (filled greedily, scarcest label first), then
/// `n_val` validation and `n_test` test samples, and everything else as
/// unlabeled training data.
pub fn make_splits(
    bundle: &DatasetBundle,
    k_per_label: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<DatasetBundle, DataError> {
    let n = bundle.len();
    let nl = bundle.num_labels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<usize> = (0..n).filter(|&i| bundle.label_known[i]).collect();
    candidates.shuffle(&mut rng);

    let mut totals = vec![0usize; nl];
    for &i in &candidates {
        for (l, t) in totals.iter_mut().enumerate() {
            *t += bundle.raw_label(i)[l] as usize;
        }
    }
    let mut order: Vec<usize> = (0..nl).collect();
    order.sort_by_key(|&l| (totals[l], l));

    let mut split = vec![Split::UnlabeledTrain; n];
    let mut taken = vec![false; n];
    let mut counts = vec![0usize; nl];
    if k_per_label > 0 {
        for &l in &order {
            for &i in &candidates {
                if counts[l] >= k_per_label {
                    break;
                }
                if !taken[i] && bundle.raw_label(i)[l] == 1 {
                    taken[i] = true;
                    split[i] = Split::LabeledTrain;
                    for (c, v) in counts.iter_mut().zip(bundle.raw_label(i)) {
                        *c += *v as usize;
                    }
                }
            }
            if counts[l] < k_per_label {
                return Err(DataError::InsufficientPositives {
                    label: l,
                    needed: k_per_label,
                    available: counts[l],
                });
            }
        }
    }

    let mut rest = candidates.iter().copied().filter(|&i| !taken[i]);
    for (count, s) in [(n_val, Split::Validation), (n_test, Split::Test)] {
        for got in 0..count {
            let i = rest.next().ok_or(DataError::InsufficientSamples {
                what: s.name(),
                needed: count,
                available: got,
            })?;
            split[i] = s;
        }
    }

    for s in [Split::Validation, Split::Test] {
        let members: Vec<usize> = (0..n).filter(|&i| split[i] == s).collect();
        if members.is_empty() {
            continue;
        }
        for l in 0..nl {
            let pos = members.iter().filter(|&&i| bundle.raw_label(i)[l] == 1).count();
            if pos == 0 || pos == members.len() {
                return Err(DataError::DegenerateSplit {
                    label: l,
                    split: s.name(),
                });
            }
        }
    }

    let mut out = bundle.clone();
    out.split = split;
    out.hidden_reads = AtomicUsize::new(0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn bundle(n: usize, seed: u64) -> DatasetBundle {
        generate_synthetic(&FactorSpec::default(), n, 8, seed).unwrap()
    }

    #[test]
    fn zero_labeled_is_well_formed() {
        let b = make_splits(&bundle(500, 1), 0, 100, 100, 2).unwrap();
        assert!(b.indices(Split::LabeledTrain).is_empty());
        assert_eq!(b.indices(Split::Validation).len(), 100);
        assert_eq!(b.indices(Split::Test).len(), 100);
        assert_eq!(b.indices(Split::UnlabeledTrain).len(), 300);
    }

    #[test]
    fn splits_partition_samples() {
        let b = make_splits(&bundle(800, 3), 10, 100, 200, 4).unwrap();
        let mut all = HashSet::new();
        let mut total = 0;
        for s in [Split::LabeledTrain, Split::UnlabeledTrain, Split::Validation, Split::Test] {
            let idx = b.indices(s);
            total += idx.len();
            all.extend(idx);
        }
        assert_eq!(total, 800);
        assert_eq!(all.len(), 800);
    }

    #[test]
    fn balanced_labeled_selection() {
        let b = make_splits(&bundle(10_000, 5), 50, 1000, 2000, 6).unwrap();
        let lab = b.indices(Split::LabeledTrain);
        for l in 0..b.num_labels() {
            let pos = lab.iter().filter(|&&i| b.label_row(i).unwrap()[l] == 1).count();
            assert!(pos >= 50, "label {l}: {pos}");
        }
        assert!(lab.len() <= 4 * 50);
    }

    #[test]
    fn insufficient_positives_names_label() {
        let err = make_splits(&bundle(40, 7), 30, 0, 0, 1).unwrap_err();
        assert!(matches!(err, DataError::InsufficientPositives { .. }), "{err}");
        assert!(err.to_string().contains("label"));
    }

    #[test]
    fn hidden_labels_are_guarded() {
        let b = make_splits(&bundle(200, 8), 5, 40, 40, 9).unwrap();
        let u = b.indices(Split::UnlabeledTrain)[0];
        assert_eq!(b.hidden_label_reads(), 0);
        assert!(b.label_row(u).is_none());
        assert_eq!(b.hidden_label_reads(), 1);
        let v = b.indices(Split::Validation)[0];
        assert!(b.label_row(v).is_some());
    }

    #[test]
    fn bundle_file_round_trip() {
        let b = make_splits(&bundle(60, 1), 2, 20, 20, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.lten");
        b.save(&p).unwrap();
        let back = DatasetBundle::load(&p).unwrap();
        assert_eq!(back.encode().unwrap(), b.encode().unwrap());
        assert_eq!(back.image_size(), 8);
    }

    #[test]
    fn splits_are_deterministic() {
        let src = bundle(300, 2);
        let a = make_splits(&src, 5, 50, 50, 11).unwrap();
        let b = make_splits(&src, 5, 50, 50, 11).unwrap();
        assert_eq!(a.encode().unwrap(), b.encode().unwrap());
    }
}
