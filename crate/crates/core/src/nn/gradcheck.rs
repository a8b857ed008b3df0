//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub probes: usize,
    pub eps: f64,
    pub seed: u64,
    /// Skip coordinates with `|θ| < 10·eps`, where an ℓ1 kink would sit
    /// inside the difference stencil.
    pub avoid_kinks: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            probes: 50,
            eps: 1e-5,
            seed: 0,
            avoid_kinks: false,
        }
    }
}

pub(crate) fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + eps;
    let up = f(&probe);
    probe[i] = x[i] - eps;
    let down = f(&probe);
    (up - down) / (2.0 * eps)
}

/// Largest relative error `|a − n| / max(|a|, |n|, 1e-8)` between the
/// analytic gradient and central differences over randomly chosen
/// coordinates.
pub fn grad_check(loss: impl Fn(&[f64]) -> f64, analytic: &[f64], params: &[f64], cfg: &GradCheck) -> Result<f64> {
    if analytic.len() != params.len() {
        return Err(invalid("gradient and parameter lengths differ"));
    }
    if !(cfg.eps > 0.0) {
        return Err(invalid("eps must be > 0"));
    }
    if !loss(params).is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let eligible: Vec<usize> = (0..params.len())
        .filter(|&i| !cfg.avoid_kinks || params[i].abs() >= 10.0 * cfg.eps)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let chosen: Vec<usize> = if cfg.probes >= eligible.len() {
        eligible
    } else {
        sample(&mut rng, eligible.len(), cfg.probes)
            .into_iter()
            .map(|i| eligible[i])
            .collect()
    };
    let mut worst: f64 = 0.0;
    for i in chosen {
        let n = central_difference(&loss, params, i, cfg.eps);
        if !n.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let a = analytic[i];
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
    }
    Ok(worst)
}
