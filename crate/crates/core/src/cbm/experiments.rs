//! Repeated-seed experiment protocols over the full pipeline.

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::train::{features_f64, fit_classifier};
use super::{train_classifier, train_concept_encoder, train_teacher, Nonlinearity, TrainConfig};
use crate::activation::{concept_activations, ActivationMatrix};
use crate::error::{invalid, Error, Result};
use crate::nn::accuracy;
use crate::store::{EmbeddingBundle, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub name: String,
    /// Test accuracy per run, in seed order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single run).
    pub std: f64,
}

impl ConditionSummary {
    pub fn new(name: impl Into<String>, accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = if accuracies.len() > 1 {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        ConditionSummary {
            name: name.into(),
            accuracies,
            mean,
            std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub runs: usize,
    pub oracle: ConditionSummary,
    pub nonlinear_relevant: ConditionSummary,
    pub nonlinear_irrelevant: ConditionSummary,
    pub linear_relevant: ConditionSummary,
    pub linear_irrelevant: ConditionSummary,
    /// Mean relevant minus mean irrelevant accuracy, per architecture.
    pub nonlinear_drop: f64,
    pub linear_drop: f64,
}

fn test_rows(bundle: &EmbeddingBundle) -> Result<Vec<usize>> {
    let test = bundle.rows(Split::Test);
    if !test.is_empty() {
        return Ok(test);
    }
    let val = bundle.rows(Split::Val);
    if val.is_empty() {
        return Err(invalid("bundle has neither test nor validation rows to evaluate on"));
    }
    log::warn!("bundle has no test rows; evaluating on the validation split");
    Ok(val)
}

fn same_rows(a: &EmbeddingBundle, b: &EmbeddingBundle) -> Result<()> {
    if a.features != b.features || a.labels != b.labels || a.splits != b.splits || a.class_names != b.class_names {
        return Err(Error::InvalidBundle(
            "sensitivity bundles must share features, labels, splits and classes".into(),
        ));
    }
    Ok(())
}

struct Evaluator<'a> {
    bundle: &'a EmbeddingBundle,
    rows: Vec<usize>,
    labels: Vec<u32>,
}

impl<'a> Evaluator<'a> {
    fn new(bundle: &'a EmbeddingBundle) -> Result<Self> {
        let rows = test_rows(bundle)?;
        let labels = rows.iter().map(|&i| bundle.labels[i]).collect();
        Ok(Evaluator { bundle, rows, labels })
    }

    fn accuracy(&self, logits: ndarray::Array2<f64>) -> f64 {
        accuracy(logits.select(Axis(0), &self.rows).view(), &self.labels)
    }

    /// Encoder and classifier for one concept set; returns test accuracy.
    fn cbm(&self, bundle: &EmbeddingBundle, acts: &ActivationMatrix, teacher_logits: Option<&ndarray::Array2<f64>>, cfg: &TrainConfig) -> Result<f64> {
        let (enc, _) = train_concept_encoder(bundle, acts, cfg)?;
        let (clf, _) = fit_classifier(&enc, teacher_logits, bundle, cfg)?;
        let x = features_f64(self.bundle);
        Ok(self.accuracy(clf.logits(enc.forward(x.view())?.view())?))
    }
}

/// Trains the full pipeline on both concept sets with a non-linear and a
/// linear encoder, for seeds `0..runs`. Runs execute in parallel.
pub fn concept_sensitivity_test(
    relevant: &EmbeddingBundle,
    irrelevant: &EmbeddingBundle,
    cfg: &TrainConfig,
    runs: usize,
) -> Result<SensitivityReport> {
    cfg.validate()?;
    if runs == 0 {
        return Err(invalid("runs must be >= 1"));
    }
    same_rows(relevant, irrelevant)?;
    let eval = Evaluator::new(relevant)?;
    let acts_rel = concept_activations(relevant, cfg.norm_mode, cfg.epsilon)?;
    let acts_irr = concept_activations(irrelevant, cfg.norm_mode, cfg.epsilon)?;
    let x = features_f64(relevant);

    let per_run: Vec<[f64; 5]> = (0..runs as u64)
        .into_par_iter()
        .map(|seed| -> Result<[f64; 5]> {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let (teacher, _) = train_teacher(relevant, &cfg)?;
            let t_logits = teacher.logits(x.view())?;
            let oracle = eval.accuracy(t_logits.clone());
            let mut out = [oracle, 0.0, 0.0, 0.0, 0.0];
            let mut slot = 1;
            for nl in [Nonlinearity::Relu, Nonlinearity::None] {
                let cfg = TrainConfig { nonlinearity: nl, ..cfg.clone() };
                for (bundle, acts) in [(relevant, &acts_rel), (irrelevant, &acts_irr)] {
                    out[slot] = eval.cbm(bundle, acts, Some(&t_logits), &cfg)?;
                    slot += 1;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let column = |i: usize| per_run.iter().map(|r| r[i]).collect::<Vec<_>>();
    let nonlinear_relevant = ConditionSummary::new("nonlinear/relevant", column(1));
    let nonlinear_irrelevant = ConditionSummary::new("nonlinear/irrelevant", column(2));
    let linear_relevant = ConditionSummary::new("linear/relevant", column(3));
    let linear_irrelevant = ConditionSummary::new("linear/irrelevant", column(4));
    Ok(SensitivityReport {
        runs,
        oracle: ConditionSummary::new("oracle", column(0)),
        nonlinear_drop: nonlinear_relevant.mean - nonlinear_irrelevant.mean,
        linear_drop: linear_relevant.mean - linear_irrelevant.mean,
        nonlinear_relevant,
        nonlinear_irrelevant,
        linear_relevant,
        linear_irrelevant,
    })
}

/// One-sided paired t-test of `mean(a − b) > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub std_diff: f64,
    pub t: f64,
    pub df: usize,
    /// Upper 95% quantile of Student's t with `df` degrees of freedom.
    pub critical: f64,
    pub significant: bool,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(invalid("paired samples differ in length"));
    }
    if a.len() < 2 {
        return Err(invalid("a paired test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let summary = ConditionSummary::new("diff", d);
    let n = a.len() as f64;
    let t = if summary.std > 0.0 {
        summary.mean / (summary.std / n.sqrt())
    } else if summary.mean > 0.0 {
        f64::INFINITY
    } else if summary.mean < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    };
    let df = a.len() - 1;
    let critical = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| invalid(e.to_string()))?
        .inverse_cdf(0.95);
    Ok(PairedTest {
        mean_diff: summary.mean,
        std_diff: summary.std,
        t,
        df,
        critical,
        significant: t > critical,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationReport {
    pub runs: usize,
    pub oracle: ConditionSummary,
    pub distilled: ConditionSummary,
    pub vanilla: ConditionSummary,
    /// Distilled against vanilla, paired by seed.
    pub test: PairedTest,
}

/// Oracle probe, distilled classifier (the configured β) and vanilla
/// classifier (β = 0) on the same encoder, for seeds `0..runs`.
pub fn distillation_comparison(bundle: &EmbeddingBundle, cfg: &TrainConfig, runs: usize) -> Result<DistillationReport> {
    cfg.validate()?;
    if cfg.beta <= 0.0 {
        return Err(invalid("distillation comparison needs beta > 0"));
    }
    if runs < 2 {
        return Err(invalid("distillation comparison needs at least two runs"));
    }
    let eval = Evaluator::new(bundle)?;
    let acts = concept_activations(bundle, cfg.norm_mode, cfg.epsilon)?;
    let x = features_f64(bundle);
    let per_run: Vec<[f64; 3]> = (0..runs as u64)
        .into_par_iter()
        .map(|seed| -> Result<[f64; 3]> {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let (teacher, _) = train_teacher(bundle, &cfg)?;
            let oracle = eval.accuracy(teacher.logits(x.view())?);
            let (enc, _) = train_concept_encoder(bundle, &acts, &cfg)?;
            let c_hat = enc.forward(x.view())?;
            let (distilled, _) = train_classifier(&enc, &teacher, bundle, &cfg)?;
            let (vanilla, _) = train_classifier(&enc, &teacher, bundle, &TrainConfig { beta: 0.0, ..cfg.clone() })?;
            Ok([
                oracle,
                eval.accuracy(distilled.logits(c_hat.view())?),
                eval.accuracy(vanilla.logits(c_hat.view())?),
            ])
        })
        .collect::<Result<_>>()?;
    let column = |i: usize| per_run.iter().map(|r| r[i]).collect::<Vec<_>>();
    let distilled = ConditionSummary::new("distilled", column(1));
    let vanilla = ConditionSummary::new("vanilla", column(2));
    let test = paired_t_test(&distilled.accuracies, &vanilla.accuracies)?;
    Ok(DistillationReport {
        runs,
        oracle: ConditionSummary::new("oracle", column(0)),
        distilled,
        vanilla,
        test,
    })
}
