//! Concept activations: cosine similarity between image and concept
//! embeddings, standardized with statistics from the training rows.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::store::{EmbeddingBundle, Split};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Whether the mean and standard deviation are taken per concept column or
/// over the whole score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    #[default]
    PerConcept,
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: Vec<f64>,
    /// Population standard deviations, floored at `epsilon`.
    pub sigma: Vec<f64>,
    pub epsilon: f64,
    /// Concepts whose raw deviation fell below `epsilon`.
    pub degenerate: Vec<usize>,
}

impl NormStats {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// N×K standardized activations together with the statistics that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub values: Array2<f64>,
    pub stats: NormStats,
    pub concept_names: Vec<String>,
}

impl ActivationMatrix {
    pub fn num_concepts(&self) -> usize {
        self.values.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.values.ncols() {
            return Err(shape(format!("{} names for {} concepts", names.len(), self.values.ncols())));
        }
        self.concept_names = names;
        Ok(self)
    }

    /// Keeps the listed concept columns, in the given order.
    pub fn select_concepts(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&j| j >= self.num_concepts()) {
            return Err(invalid(format!("concept index {bad} out of range")));
        }
        Ok(ActivationMatrix {
            values: self.values.select(Axis(1), indices),
            stats: NormStats {
                mu: indices.iter().map(|&j| self.stats.mu[j]).collect(),
                sigma: indices.iter().map(|&j| self.stats.sigma[j]).collect(),
                epsilon: self.stats.epsilon,
                degenerate: self
                    .stats
                    .degenerate
                    .iter()
                    .filter_map(|d| indices.iter().position(|j| j == d))
                    .collect(),
            },
            concept_names: indices.iter().map(|&j| self.concept_names[j].clone()).collect(),
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        ActivationMatrix {
            values: self.values.select(Axis(0), rows),
            stats: self.stats.clone(),
            concept_names: self.concept_names.clone(),
        }
    }
}

fn unit_rows(m: ArrayView2<f32>, matrix: &'static str) -> Result<Array2<f64>> {
    let mut out = m.mapv(f64::from);
    for (row, mut r) in out.rows_mut().into_iter().enumerate() {
        let norm = r.dot(&r).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::ZeroNorm { matrix, row });
        }
        r /= norm;
    }
    Ok(out)
}

/// Cosine similarity of every image row against every concept row (N×K).
pub fn raw_scores(concept_embeddings: ArrayView2<f32>, image_embeddings: ArrayView2<f32>) -> Result<Array2<f64>> {
    if concept_embeddings.ncols() != image_embeddings.ncols() {
        return Err(shape(format!(
            "concept width {} vs image width {}",
            concept_embeddings.ncols(),
            image_embeddings.ncols()
        )));
    }
    let concepts = unit_rows(concept_embeddings, "concept_embeddings")?;
    let images = unit_rows(image_embeddings, "image_embeddings")?;
    Ok(images.dot(&concepts.t()))
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (sum, count) = values.clone().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    let mean = sum / count as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    (mean, var.sqrt())
}

pub fn fit_norm_stats(train_scores: ArrayView2<f64>, epsilon: f64) -> Result<NormStats> {
    fit_norm_stats_with(train_scores, epsilon, NormMode::PerConcept)
}

pub fn fit_norm_stats_with(train_scores: ArrayView2<f64>, epsilon: f64, mode: NormMode) -> Result<NormStats> {
    if train_scores.nrows() < 2 {
        return Err(invalid(format!(
            "need at least 2 training rows to fit normalization, got {}",
            train_scores.nrows()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon must be > 0"));
    }
    let k = train_scores.ncols();
    let (mu, raw_sigma): (Vec<f64>, Vec<f64>) = match mode {
        NormMode::PerConcept => train_scores
            .axis_iter(Axis(1))
            .map(|col| mean_std(col.into_iter().copied()))
            .unzip(),
        NormMode::Scalar => {
            let (m, s) = mean_std(train_scores.iter().copied());
            (vec![m; k], vec![s; k])
        }
    };
    let degenerate = raw_sigma
        .iter()
        .enumerate()
        .filter(|(_, &s)| s < epsilon)
        .map(|(j, _)| j)
        .collect();
    let sigma = raw_sigma.into_iter().map(|s| s.max(epsilon)).collect();
    Ok(NormStats {
        mu,
        sigma,
        epsilon,
        degenerate,
    })
}

pub fn normalize(scores: ArrayView2<f64>, stats: &NormStats) -> Result<ActivationMatrix> {
    if scores.ncols() != stats.len() {
        return Err(shape(format!(
            "scores have {} columns, stats cover {} concepts",
            scores.ncols(),
            stats.len()
        )));
    }
    let mu = Array1::from(stats.mu.clone());
    let sigma = Array1::from(stats.sigma.clone());
    let values = (&scores - &mu) / &sigma;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("normalized activations".into()));
    }
    Ok(ActivationMatrix {
        values,
        stats: stats.clone(),
        concept_names: (0..scores.ncols()).map(|j| format!("concept{j}")).collect(),
    })
}

/// Scores every row of the bundle and standardizes with statistics fitted on
/// its training rows (all rows when the bundle has no training split).
pub fn concept_activations(bundle: &EmbeddingBundle, mode: NormMode, epsilon: f64) -> Result<ActivationMatrix> {
    let scores = raw_scores(bundle.concept_embeddings.view(), bundle.image_embeddings.view())?;
    let train = bundle.rows(Split::Train);
    let stats = if train.len() >= 2 {
        fit_norm_stats_with(scores.select(Axis(0), &train).view(), epsilon, mode)?
    } else {
        log::warn!("bundle has fewer than two training rows; fitting normalization on all rows");
        fit_norm_stats_with(scores.view(), epsilon, mode)?
    };
    normalize(scores.view(), &stats)?.with_names(bundle.concept_names.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    /// `counts.len() + 1` uniformly spaced edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    /// Values below the range, counted in the first bin.
    pub clamped_low: u64,
    /// Values above the range, counted in the last bin.
    pub clamped_high: u64,
}

impl HistogramReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["edge_lo", "edge_hi", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([self.edges[i].to_string(), self.edges[i + 1].to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Counts values into half-open bins `[edge, edge + width)` covering
/// `[lo, hi]`. Values outside the range land in the end bins and are tallied
/// separately.
pub fn histogram(values: impl IntoIterator<Item = f64>, bin_width: f64, range: (f64, f64)) -> Result<HistogramReport> {
    let (lo, hi) = range;
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(invalid("bin width must be positive"));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(invalid(format!("invalid histogram range [{lo}, {hi}]")));
    }
    let span = (hi - lo) / bin_width;
    let bins = if (span - span.round()).abs() < 1e-9 * span.max(1.0) {
        span.round() as usize
    } else {
        span.ceil() as usize
    }
    .max(1);
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * bin_width).collect();
    let mut report = HistogramReport {
        edges,
        counts: vec![0; bins],
        total: 0,
        clamped_low: 0,
        clamped_high: 0,
    };
    for v in values {
        report.total += 1;
        let idx = if v < lo {
            report.clamped_low += 1;
            0
        } else if v > hi {
            report.clamped_high += 1;
            bins - 1
        } else {
            let mut i = (((v - lo) / bin_width).floor() as usize).min(bins - 1);
            if i + 1 < bins && v >= report.edges[i + 1] {
                i += 1;
            } else if i > 0 && v < report.edges[i] {
                i -= 1;
            }
            i
        };
        report.counts[idx] += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    /// Compensated-summation cosine, independent of the ndarray path.
    fn cosine_oracle(a: &[f32], b: &[f32]) -> f64 {
        fn neumaier(xs: impl Iterator<Item = f64>) -> f64 {
            let (mut sum, mut c) = (0.0f64, 0.0f64);
            for x in xs {
                let t = sum + x;
                if sum.abs() >= x.abs() {
                    c += (sum - t) + x;
                } else {
                    c += (x - t) + sum;
                }
                sum = t;
            }
            sum + c
        }
        let dot = neumaier(a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64));
        let na = neumaier(a.iter().map(|&x| x as f64 * x as f64)).sqrt();
        let nb = neumaier(b.iter().map(|&x| x as f64 * x as f64)).sqrt();
        dot / (na * nb)
    }

    #[test]
    fn identical_and_orthogonal() {
        let c = array![[1.0f32, 2.0, 3.0], [0.0, 0.0, 5.0]];
        let i = array![[1.0f32, 2.0, 3.0], [1.0, 1.0, 0.0]];
        let s = raw_scores(c.view(), i.view()).unwrap();
        assert!((s[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(s[[1, 1]].abs() < 1e-12);
    }

    #[test]
    fn random_scores_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = Array2::from_shape_simple_fn((2, 4), || StandardNormal.sample(&mut rng));
        let i = Array2::from_shape_simple_fn((3, 4), || StandardNormal.sample(&mut rng));
        let s = raw_scores(c.view(), i.view()).unwrap();
        for r in 0..3 {
            for k in 0..2 {
                let want = cosine_oracle(i.row(r).as_slice().unwrap(), c.row(k).as_slice().unwrap());
                assert!((s[[r, k]] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_norm_row_is_named() {
        let c = array![[1.0f32, 0.0], [0.0, 0.0]];
        let i = array![[1.0f32, 1.0]];
        let err = raw_scores(c.view(), i.view()).unwrap_err();
        assert!(matches!(err, Error::ZeroNorm { row: 1, matrix: "concept_embeddings" }), "{err}");
    }

    #[test]
    fn constant_column_uses_epsilon() {
        let x = array![[0.3], [0.3], [0.3]];
        let st = fit_norm_stats(x.view(), 1e-6).unwrap();
        assert!((st.mu[0] - 0.3).abs() < 1e-15);
        assert_eq!(st.sigma[0], 1e-6);
        assert_eq!(st.degenerate, vec![0]);
    }

    #[test]
    fn population_convention() {
        let x = array![[-1.0], [1.0]];
        let st = fit_norm_stats(x.view(), 1e-6).unwrap();
        assert_eq!(st.mu[0], 0.0);
        assert_eq!(st.sigma[0], 1.0);
    }

    #[test]
    fn needs_two_rows() {
        assert!(fit_norm_stats(array![[1.0, 2.0]].view(), 1e-6).is_err());
    }

    #[test]
    fn gaussian_column_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_simple_fn((10_000, 1), || StandardNormal.sample(&mut rng));
        let st = fit_norm_stats(x.view(), 1e-6).unwrap();
        assert!(st.mu[0].abs() < 0.05);
        assert!((st.sigma[0] - 1.0).abs() < 0.05);
    }

    #[test]
    fn scalar_mode_shares_stats() {
        let x = array![[0.0, 2.0], [2.0, 4.0]];
        let st = fit_norm_stats_with(x.view(), 1e-6, NormMode::Scalar).unwrap();
        assert_eq!(st.mu, vec![2.0, 2.0]);
        assert!((st.sigma[0] - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn normalize_cases() {
        let stats = NormStats { mu: vec![0.5, -1.0], sigma: vec![2.0, 0.5], epsilon: 1e-6, degenerate: vec![] };
        let at_mean = array![[0.5, -1.0], [0.5, -1.0]];
        assert!(normalize(at_mean.view(), &stats).unwrap().values.iter().all(|&v| v == 0.0));

        let identity = NormStats { mu: vec![0.0; 3], sigma: vec![1.0; 3], epsilon: 1e-6, degenerate: vec![] };
        let x = array![[0.1, -0.2, 0.7]];
        assert_eq!(normalize(x.view(), &identity).unwrap().values, x);

        assert!(matches!(normalize(x.view(), &stats), Err(Error::Shape(_))));
    }

    #[test]
    fn normalize_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let x = Array2::from_shape_simple_fn((5, 3), || u.sample(&mut rng));
        let stats = NormStats { mu: vec![0.1, -0.3, 0.2], sigma: vec![0.7, 0.05, 1.3], epsilon: 1e-6, degenerate: vec![] };
        let got = normalize(x.view(), &stats).unwrap();
        for ((i, k), v) in got.values.indexed_iter() {
            let want = (x[[i, k]] - stats.mu[k]) / stats.sigma[k];
            assert!((v - want).abs() < 1e-7);
        }
    }

    #[test]
    fn histogram_small() {
        let h = histogram([0.01, 0.02, 0.07], 0.05, (0.0, 0.1)).unwrap();
        assert_eq!(h.counts, vec![2, 1]);
        assert_eq!(h.total, 3);
        let empty = histogram(std::iter::empty(), 0.05, (0.0, 0.1)).unwrap();
        assert_eq!(empty.counts, vec![0, 0]);
    }

    #[test]
    fn histogram_clamps_and_reports() {
        let h = histogram([-5.0, 0.5, 9.0, 1.0], 0.25, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts, vec![1, 0, 1, 2]);
        assert_eq!((h.clamped_low, h.clamped_high), (1, 1));
        assert_eq!(h.counts.iter().sum::<u64>(), h.total);
        assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn histogram_errors() {
        assert!(histogram([1.0], 0.0, (0.0, 1.0)).is_err());
        assert!(histogram([1.0], 0.1, (1.0, 1.0)).is_err());
    }

    #[test]
    fn histogram_uniform_within_binomial_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u = Uniform::new(0.0, 1.0).unwrap();
        let h = histogram((0..10_000).map(|_| u.sample(&mut rng)), 0.1, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts.len(), 10);
        // binomial(10000, 0.1): sd = 30
        let sd = (10_000.0f64 * 0.1 * 0.9).sqrt();
        for &c in &h.counts {
            assert!((c as f64 - 1000.0).abs() < 4.0 * sd, "{c}");
        }
    }

    #[test]
    fn histogram_csv() {
        let h = histogram([0.01, 0.07], 0.05, (0.0, 0.1)).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "edge_lo,edge_hi,count");
        assert_eq!(text.lines().count(), 3);
    }
}
