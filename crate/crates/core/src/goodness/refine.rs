//! Concept-set refinement by greedy entropy-guided removal, with a random
//! removal baseline for comparison.

use std::io::Write;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{class_mean_activations, entropy_of, softmax_unchecked, GoodnessMode};
use crate::activation::ActivationMatrix;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    EntropyGuided,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementStep {
    pub step: usize,
    pub removed_index: usize,
    pub removed_name: String,
    /// Goodness after this removal (trial mean for the random baseline).
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub strategy: Strategy,
    pub objective: GoodnessMode,
    pub cutoff: usize,
    pub initial_entropy: f64,
    /// For the random baseline these are the removals of the first trial.
    pub steps: Vec<RefinementStep>,
    pub trials: usize,
    pub seed: u64,
    /// Removal order of every trial (a single entry for entropy-guided).
    pub trial_removals: Vec<Vec<usize>>,
}

impl RefinementTrace {
    pub fn removed(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.removed_index).collect()
    }

    /// Mean over trials of the fraction of the first `upto` removals that
    /// satisfy `pred`.
    pub fn removed_fraction(&self, upto: usize, pred: impl Fn(usize) -> bool) -> f64 {
        let per_trial: Vec<f64> = self
            .trial_removals
            .iter()
            .map(|r| {
                let n = upto.min(r.len());
                if n == 0 {
                    0.0
                } else {
                    r[..n].iter().filter(|&&j| pred(j)).count() as f64 / n as f64
                }
            })
            .collect();
        per_trial.iter().sum::<f64>() / per_trial.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "removed_index", "removed_name", "entropy"])?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.removed_index.to_string(),
                s.removed_name.clone(),
                s.entropy.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    /// Evaluate only this many randomly drawn candidates per step.
    /// `None` evaluates every remaining concept.
    pub candidate_subsample: Option<usize>,
    /// Seed for candidate subsampling.
    pub seed: u64,
}

/// Per-unit concept orderings (descending activation, ties by index),
/// reused across removal steps.
struct Ranked {
    values: Array2<f64>,
    order: Vec<Vec<u32>>,
    k_cut: usize,
}

impl Ranked {
    fn new(values: Array2<f64>, k_cut: usize) -> Self {
        let order = values
            .rows()
            .into_iter()
            .map(|row| {
                let row = row.to_vec();
                let mut idx: Vec<u32> = (0..row.len() as u32).collect();
                idx.sort_unstable_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Ranked { values, order, k_cut }
    }

    /// The first `take` remaining concepts of unit `u`.
    fn head(&self, u: usize, removed: &[bool], take: usize) -> Vec<u32> {
        self.order[u]
            .iter()
            .copied()
            .filter(|&j| !removed[j as usize])
            .take(take)
            .collect()
    }

    fn unit_entropy(&self, u: usize, removed: &[bool]) -> f64 {
        let vals: Vec<f64> = self
            .head(u, removed, self.k_cut)
            .iter()
            .map(|&j| self.values[[u, j as usize]])
            .collect();
        entropy_of(&softmax_unchecked(&vals))
    }

    fn mean_entropy(&self, removed: &[bool]) -> f64 {
        let per: Vec<f64> = (0..self.order.len())
            .into_par_iter()
            .map(|u| self.unit_entropy(u, removed))
            .collect();
        per.iter().sum::<f64>() / per.len() as f64
    }

    /// Sum over units of the entropy change caused by removing each concept.
    /// Concepts outside a unit's top `k_cut` leave it unchanged.
    fn removal_deltas(&self, removed: &[bool]) -> Vec<f64> {
        let k = self.values.ncols();
        let k_cut = self.k_cut;
        let per_unit: Vec<Vec<(u32, f64)>> = (0..self.order.len())
            .into_par_iter()
            .map(|u| {
                let head = self.head(u, removed, k_cut + 1);
                let v: Vec<f64> = head.iter().map(|&j| self.values[[u, j as usize]]).collect();
                let base = entropy_of(&softmax_unchecked(&v[..k_cut]));
                // H(set) = ln A - B/A with A = Σ e^(v-v0), B = Σ e^(v-v0)(v-v0).
                let top = v[0];
                let e: Vec<f64> = v.iter().map(|&x| (x - top).exp()).collect();
                let w: Vec<f64> = v.iter().zip(&e).map(|(&x, &ei)| ei * (x - top)).collect();
                let n = v.len();
                let mut suffix_e = vec![0.0; n + 1];
                let mut suffix_w = vec![0.0; n + 1];
                for i in (0..n).rev() {
                    suffix_e[i] = suffix_e[i + 1] + e[i];
                    suffix_w[i] = suffix_w[i + 1] + w[i];
                }
                let mut out = Vec::with_capacity(k_cut);
                out.push((head[0], entropy_of(&softmax_unchecked(&v[1..])) - base));
                let (mut pre_e, mut pre_w) = (e[0], w[0]);
                for p in 1..k_cut {
                    let a = pre_e + suffix_e[p + 1];
                    let b = pre_w + suffix_w[p + 1];
                    out.push((head[p], (a.ln() - b / a) - base));
                    pre_e += e[p];
                    pre_w += w[p];
                }
                out
            })
            .collect();
        let mut deltas = vec![0.0; k];
        for unit in per_unit {
            for (j, d) in unit {
                deltas[j as usize] += d;
            }
        }
        deltas
    }
}

fn objective_values(acts: &ActivationMatrix, labels: Option<&[u32]>) -> Result<(Array2<f64>, GoodnessMode)> {
    if acts.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("activations".into()));
    }
    match labels {
        None => Ok((acts.values.clone(), GoodnessMode::TaskAgnostic)),
        Some(l) => Ok((class_mean_activations(acts.values.view(), l)?, GoodnessMode::TaskSpecific)),
    }
}

fn check_steps(acts: &ActivationMatrix, k_cut: usize, steps: usize) -> Result<()> {
    let k = acts.num_concepts();
    if k_cut == 0 {
        return Err(invalid("cutoff must be >= 1"));
    }
    if steps >= k {
        return Err(invalid(format!("steps ({steps}) must be fewer than the {k} concepts")));
    }
    if k - steps < k_cut {
        return Err(invalid(format!(
            "{steps} removals would leave {} concepts, fewer than the cutoff {k_cut}",
            k - steps
        )));
    }
    if acts.num_rows() == 0 {
        return Err(invalid("no rows to score"));
    }
    Ok(())
}

pub fn refine_entropy_guided(
    acts: &ActivationMatrix,
    labels: Option<&[u32]>,
    k_cut: usize,
    steps: usize,
) -> Result<RefinementTrace> {
    refine_entropy_guided_with(acts, labels, k_cut, steps, &RefineOptions::default())
}

/// Greedy removal: each step permanently drops the concept whose removal
/// gives the lowest goodness, ties going to the lowest index.
pub fn refine_entropy_guided_with(
    acts: &ActivationMatrix,
    labels: Option<&[u32]>,
    k_cut: usize,
    steps: usize,
    opts: &RefineOptions,
) -> Result<RefinementTrace> {
    check_steps(acts, k_cut, steps)?;
    let (values, objective) = objective_values(acts, labels)?;
    let units = values.nrows() as f64;
    let k = values.ncols();
    let ranked = Ranked::new(values, k_cut);
    let mut removed = vec![false; k];
    let initial = ranked.mean_entropy(&removed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trace = Vec::with_capacity(steps);
    let mut current = initial;

    for step in 0..steps {
        let deltas = ranked.removal_deltas(&removed);
        let remaining: Vec<usize> = (0..k).filter(|&j| !removed[j]).collect();
        let mut candidates = match opts.candidate_subsample {
            Some(m) if m < remaining.len() => remaining.choose_multiple(&mut rng, m.max(1)).copied().collect(),
            _ => remaining,
        };
        candidates.sort_unstable();
        let best = candidates
            .iter()
            .copied()
            .min_by(|&a, &b| (current + deltas[a] / units).total_cmp(&(current + deltas[b] / units)).then(a.cmp(&b)))
            .expect("at least one candidate remains");
        removed[best] = true;
        current = ranked.mean_entropy(&removed);
        trace.push(RefinementStep {
            step: step + 1,
            removed_index: best,
            removed_name: acts.concept_names[best].clone(),
            entropy: current,
        });
    }
    let order = trace.iter().map(|s| s.removed_index).collect();
    Ok(RefinementTrace {
        strategy: Strategy::EntropyGuided,
        objective,
        cutoff: k_cut,
        initial_entropy: initial,
        steps: trace,
        trials: 1,
        seed: opts.seed,
        trial_removals: vec![order],
    })
}

/// Removes uniformly random concepts; the entropy at each step is averaged
/// over `trials` independent removal orders.
pub fn refine_random_baseline(
    acts: &ActivationMatrix,
    labels: Option<&[u32]>,
    k_cut: usize,
    steps: usize,
    trials: usize,
    seed: u64,
) -> Result<RefinementTrace> {
    check_steps(acts, k_cut, steps)?;
    if trials == 0 {
        return Err(invalid("trials must be >= 1"));
    }
    let (values, objective) = objective_values(acts, labels)?;
    let k = values.ncols();
    let ranked = Ranked::new(values, k_cut);
    let initial = ranked.mean_entropy(&vec![false; k]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let orders: Vec<Vec<usize>> = (0..trials)
        .map(|_| {
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            perm.truncate(steps);
            perm
        })
        .collect();
    let mut sums = vec![0.0; steps];
    for order in &orders {
        let mut removed = vec![false; k];
        for (s, &j) in order.iter().enumerate() {
            removed[j] = true;
            sums[s] += ranked.mean_entropy(&removed);
        }
    }
    let steps_out = (0..steps)
        .map(|s| RefinementStep {
            step: s + 1,
            removed_index: orders[0][s],
            removed_name: acts.concept_names[orders[0][s]].clone(),
            entropy: sums[s] / trials as f64,
        })
        .collect();
    Ok(RefinementTrace {
        strategy: Strategy::Random,
        objective,
        cutoff: k_cut,
        initial_entropy: initial,
        steps: steps_out,
        trials,
        seed,
        trial_removals: orders,
    })
}
