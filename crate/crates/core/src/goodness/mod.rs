//! Goodness of concepts: the entropy of softmaxed top-K activations,
//! averaged per image (task-agnostic) or computed on class-mean activations
//! (task-specific). Lower is better.
//!
//! Entropies are in nats, so a uniform distribution over the `K_cut`
//! selected concepts scores exactly `ln K_cut`.

mod refine;

use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::ActivationMatrix;
use crate::error::{invalid, shape, Error, Result};

pub use refine::{
    refine_entropy_guided, refine_entropy_guided_with, refine_random_baseline, RefineOptions,
    RefinementStep, RefinementTrace, Strategy,
};

pub const DEFAULT_CUTOFF: usize = 100;

/// A probability vector: non-negative entries summing to one within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(invalid("empty probability vector"));
        }
        if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(invalid("probabilities must be finite and non-negative"));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("probabilities sum to {total}")));
        }
        Ok(ProbVector(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Max-shifted softmax.
pub fn softmax(x: &[f64]) -> Result<ProbVector> {
    if x.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(ProbVector(softmax_unchecked(x)))
}

pub(crate) fn softmax_unchecked(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= z);
    e
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    entropy_of(&p.0)
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>()
}

/// Indices of the `k_cut` largest entries, largest first. Equal values keep
/// the lower index first.
pub fn topk_select(row: &[f64], k_cut: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k_cut > row.len() {
        return Err(invalid(format!("cutoff {k_cut} exceeds {} concepts", row.len())));
    }
    let idx = top_indices(row, k_cut);
    let vals = idx.iter().map(|&i| row[i]).collect();
    Ok((idx, vals))
}

fn descending(row: &[f64]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    |&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b))
}

pub(crate) fn top_indices(row: &[f64], k_cut: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = descending(row);
    if k_cut < idx.len() && k_cut > 0 {
        idx.select_nth_unstable_by(k_cut - 1, &cmp);
        idx.truncate(k_cut);
    } else {
        idx.truncate(k_cut);
    }
    idx.sort_unstable_by(&cmp);
    idx
}

/// Where the softmax is taken relative to the top-K cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CutoffMode {
    /// Select the top `K_cut` activations, then softmax over them. Bounded by
    /// `ln K_cut`.
    #[default]
    SubsetSoftmax,
    /// Softmax over all `K` activations, then sum `-p ln p` over the top
    /// `K_cut` probabilities without renormalizing. (Renormalizing would make
    /// this identical to `SubsetSoftmax`.)
    FullSoftmaxTruncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoodnessMode {
    TaskAgnostic,
    TaskSpecific,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodnessReport {
    pub mode: GoodnessMode,
    pub cutoff: usize,
    pub cutoff_mode: CutoffMode,
    /// Per image (task-agnostic) or per class (task-specific), in nats.
    pub per_unit: Vec<f64>,
    pub mean_entropy: f64,
    /// Short digest of the ordered concept names.
    pub concept_set: String,
}

impl GoodnessReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["unit", "entropy"])?;
        for (i, h) in self.per_unit.iter().enumerate() {
            w.write_record([i.to_string(), h.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn concept_set_id(names: &[String]) -> String {
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        h.update([0u8]);
    }
    hex::encode(&h.finalize()[..8])
}

/// Entropy of one activation row under the cutoff rule.
pub fn row_entropy(row: ArrayView1<f64>, k_cut: usize, mode: CutoffMode) -> Result<f64> {
    let owned;
    let row = match row.as_slice() {
        Some(s) => s,
        None => {
            owned = row.to_vec();
            &owned
        }
    };
    if k_cut == 0 {
        return Err(invalid("cutoff must be >= 1"));
    }
    let (idx, vals) = topk_select(row, k_cut)?;
    match mode {
        CutoffMode::SubsetSoftmax => Ok(entropy(&softmax(&vals)?)),
        CutoffMode::FullSoftmaxTruncated => {
            let p = softmax(row)?;
            Ok(entropy_of(&idx.iter().map(|&i| p.0[i]).collect::<Vec<_>>()))
        }
    }
}

fn rows_entropy(values: ArrayView2<f64>, k_cut: usize, mode: CutoffMode) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("activations".into()));
    }
    (0..values.nrows())
        .into_par_iter()
        .map(|i| row_entropy(values.row(i), k_cut, mode))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn task_agnostic_goodness(acts: &ActivationMatrix, k_cut: usize) -> Result<GoodnessReport> {
    task_agnostic_goodness_with(acts, k_cut, CutoffMode::default())
}

pub fn task_agnostic_goodness_with(acts: &ActivationMatrix, k_cut: usize, mode: CutoffMode) -> Result<GoodnessReport> {
    if acts.num_rows() == 0 {
        return Err(invalid("no rows to score"));
    }
    let per_unit = rows_entropy(acts.values.view(), k_cut, mode)?;
    Ok(GoodnessReport {
        mode: GoodnessMode::TaskAgnostic,
        cutoff: k_cut,
        cutoff_mode: mode,
        mean_entropy: mean(&per_unit),
        per_unit,
        concept_set: concept_set_id(&acts.concept_names),
    })
}

/// Mean activation vector of each class `0..=max(labels)`.
pub fn class_mean_activations(values: ArrayView2<f64>, labels: &[u32]) -> Result<Array2<f64>> {
    if labels.len() != values.nrows() {
        return Err(shape(format!("{} labels for {} rows", labels.len(), values.nrows())));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    if classes == 0 {
        return Err(invalid("no labels"));
    }
    let mut sums = Array2::<f64>::zeros((classes, values.ncols()));
    let mut counts = vec![0usize; classes];
    for (row, &l) in values.rows().into_iter().zip(labels) {
        sums.row_mut(l as usize).scaled_add(1.0, &row);
        counts[l as usize] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyClass(c));
        }
        sums.row_mut(c).mapv_inplace(|v| v / n as f64);
    }
    Ok(sums)
}

pub fn task_specific_goodness(acts: &ActivationMatrix, labels: &[u32], k_cut: usize) -> Result<GoodnessReport> {
    task_specific_goodness_with(acts, labels, k_cut, CutoffMode::default())
}

pub fn task_specific_goodness_with(
    acts: &ActivationMatrix,
    labels: &[u32],
    k_cut: usize,
    mode: CutoffMode,
) -> Result<GoodnessReport> {
    let means = class_mean_activations(acts.values.view(), labels)?;
    let per_unit = rows_entropy(means.view(), k_cut, mode)?;
    Ok(GoodnessReport {
        mode: GoodnessMode::TaskSpecific,
        cutoff: k_cut,
        cutoff_mode: mode,
        mean_entropy: mean(&per_unit),
        per_unit,
        concept_set: concept_set_id(&acts.concept_names),
    })
}

pub fn goodness(
    acts: &ActivationMatrix,
    labels: Option<&[u32]>,
    k_cut: usize,
    mode: CutoffMode,
) -> Result<GoodnessReport> {
    match labels {
        None => task_agnostic_goodness_with(acts, k_cut, mode),
        Some(l) => task_specific_goodness_with(acts, l, k_cut, mode),
    }
}
