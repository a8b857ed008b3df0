//! Deterministic synthetic bundles.
//!
//! Images are Gaussian clusters around `S` unit-norm class centers in the
//! VLM space. The first `round(fraction·K)` concepts sit near class centers
//! so their activations concentrate on those classes. Every twelfth relevant
//! concept of a class describes that class alone; the others sit at the sum
//! of two class centers, like attributes shared by related classes. The
//! remaining concepts stand in for random words: random directions around a
//! common axis (weight `random_axis`), with the span of the class centers
//! projected out, so they score every class alike. Backbone features are a fixed random linear map
//! of the image embeddings plus Gaussian noise.
//!
//! Rows, labels, image embeddings and features come from one random stream
//! and the concept table from another, so two specs that differ only in
//! `relevant_fraction` describe the same images with different concept sets.

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bundle::{EmbeddingBundle, Split};
use crate::error::{invalid, Result};

/// Spread of a relevant concept around its class center, relative to the
/// unit center norm.
const RELEVANT_SPREAD: f64 = 0.5;
const EXCLUSIVE_EVERY: usize = 12;
const SHARED_CLASSES: usize = 2;
const DEFAULT_RANDOM_AXIS: f64 = 2.0;
const CONCEPT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Rows.
    pub n: usize,
    /// Concepts.
    pub k: usize,
    /// Classes.
    pub s: usize,
    /// Backbone feature width.
    pub d_b: usize,
    /// VLM embedding width.
    pub d_v: usize,
    /// Distance of each class center from the origin, in units of the
    /// within-class spread.
    pub separation: f64,
    pub relevant_fraction: f64,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    /// Weight of the axis shared by all random concepts, relative to their
    /// unit-scale individual parts. Zero gives independent directions; the
    /// default makes random concepts as alike as random words tend to be,
    /// which flattens their top activations.
    #[serde(default = "default_random_axis")]
    pub random_axis: f64,
    pub seed: u64,
}

fn default_random_axis() -> f64 {
    DEFAULT_RANDOM_AXIS
}

impl SyntheticSpec {
    /// The fixture used for goodness comparisons: 300 class-aligned and 300
    /// random concepts, so every cutoff up to 300 applies to either half.
    pub fn standard(seed: u64) -> Self {
        SyntheticSpec {
            n: 600,
            k: 600,
            s: 6,
            d_b: 32,
            d_v: 64,
            separation: 4.0,
            relevant_fraction: 0.5,
            noise: 0.5,
            random_axis: DEFAULT_RANDOM_AXIS,
            seed,
        }
    }

    /// 75% class-aligned, 25% random concepts.
    pub fn mixed(seed: u64) -> Self {
        SyntheticSpec {
            n: 300,
            k: 200,
            relevant_fraction: 0.75,
            ..Self::standard(seed)
        }
    }

    pub fn num_relevant(&self) -> usize {
        (self.relevant_fraction * self.k as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("n", self.n), ("k", self.k), ("s", self.s), ("d_b", self.d_b), ("d_v", self.d_v)] {
            if v == 0 {
                return Err(invalid(format!("synthetic spec `{name}` must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.relevant_fraction) {
            return Err(invalid("relevant_fraction must lie in [0, 1]"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(invalid("separation must be finite and >= 0"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid("noise must be finite and >= 0"));
        }
        if !(self.random_axis >= 0.0 && self.random_axis.is_finite()) {
            return Err(invalid("random_axis must be finite and >= 0"));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

/// Gram-Schmidt over the class centers, dropping dependent vectors.
fn orthonormal_basis(vectors: &[Array1<f64>]) -> Vec<Array1<f64>> {
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for v in vectors {
        let mut r = v.clone();
        for q in &basis {
            let along = r.dot(q);
            r.scaled_add(-along, q);
        }
        let n = r.dot(&r).sqrt();
        if n > 1e-9 {
            basis.push(r / n);
        }
    }
    basis
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(5..15);
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

pub fn make_synthetic_bundle(spec: &SyntheticSpec) -> Result<EmbeddingBundle> {
    spec.validate()?;
    let SyntheticSpec { n, k, s, d_b, d_v, .. } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let centers: Vec<Array1<f64>> = (0..s)
        .map(|_| unit(gaussian(&mut rng, 1, d_v, 1.0).row(0).to_owned()))
        .collect();

    let mut labels: Vec<u32> = (0..n).map(|i| (i % s) as u32).collect();
    labels.shuffle(&mut rng);

    let within = 1.0 / (d_v as f64).sqrt();
    let mut images = gaussian(&mut rng, n, d_v, within);
    for (mut row, &y) in images.rows_mut().into_iter().zip(&labels) {
        row.scaled_add(spec.separation, &centers[y as usize]);
    }

    let projection = gaussian(&mut rng, d_b, d_v, within);
    let features = images.dot(&projection.t()) + gaussian(&mut rng, n, d_b, spec.noise);

    let splits = (0..n)
        .map(|i| match i % 5 {
            0..=2 => Split::Train,
            3 => Split::Val,
            _ => Split::Test,
        })
        .collect();

    let basis = orthonormal_basis(&centers);
    let off_centers = |v: &mut Array1<f64>| {
        for q in &basis {
            let along = v.dot(q);
            v.scaled_add(-along, q);
        }
    };
    let mut crng = ChaCha8Rng::seed_from_u64(spec.seed ^ CONCEPT_STREAM);
    let n_rel = spec.num_relevant();
    let mut concepts = gaussian(&mut crng, k, d_v, within);
    let mut axis = gaussian(&mut crng, 1, d_v, 1.0).row(0).to_owned();
    off_centers(&mut axis);
    let axis = unit(axis);
    let mut concept_names = Vec::with_capacity(k);
    for (j, mut row) in concepts.rows_mut().into_iter().enumerate() {
        if j < n_rel {
            let class = j % s;
            row *= RELEVANT_SPREAD;
            row += &centers[class];
            if (j / s) % EXCLUSIVE_EVERY != 0 {
                let others = sample(&mut crng, s - 1, SHARED_CLASSES.min(s) - 1);
                for o in others {
                    row += &centers[if o < class { o } else { o + 1 }];
                }
            }
            concept_names.push(format!("class{class}_attr{j}"));
        } else {
            row.scaled_add(spec.random_axis, &axis);
            let mut v = row.to_owned();
            off_centers(&mut v);
            row.assign(&v);
            concept_names.push(random_word(&mut crng));
        }
    }

    let bundle = EmbeddingBundle {
        features: features.mapv(|x| x as f32),
        image_embeddings: images.mapv(|x| x as f32),
        concept_embeddings: concepts.mapv(|x| x as f32),
        labels,
        concept_names,
        class_names: (0..s).map(|c| format!("class{c}")).collect(),
        splits,
    };
    bundle.validate()?;
    Ok(bundle)
}
