use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{ConceptEncoder, FinalClassifier, Nonlinearity};
use crate::error::{invalid, shape, Result};
use crate::nn::argmax_rows;

fn check_chain(encoder: &ConceptEncoder, classifier: &FinalClassifier) -> Result<()> {
    if classifier.layer.in_dim() != encoder.num_concepts() {
        return Err(shape(format!(
            "classifier expects {} concepts, encoder produces {}",
            classifier.layer.in_dim(),
            encoder.num_concepts()
        )));
    }
    Ok(())
}

/// Logits and argmax labels (lowest class index on ties).
pub fn predict(
    encoder: &ConceptEncoder,
    classifier: &FinalClassifier,
    features: ArrayView2<f64>,
) -> Result<(Array2<f64>, Vec<usize>)> {
    check_chain(encoder, classifier)?;
    let logits = classifier.logits(encoder.forward(features)?.view())?;
    let labels = argmax_rows(logits.view());
    Ok((logits, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub index: usize,
    pub name: String,
    /// `W_f[s, j] · ĉ_j` for the predicted class `s`.
    pub contribution: f64,
    pub activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub predicted_class: usize,
    pub class_name: String,
    pub logit: f64,
    pub concepts: Vec<Contribution>,
}

/// The `k` concepts contributing most to the predicted class's logit, ties
/// broken by concept index.
pub fn explain(
    encoder: &ConceptEncoder,
    classifier: &FinalClassifier,
    features: ArrayView1<f64>,
    k: usize,
) -> Result<Explanation> {
    check_chain(encoder, classifier)?;
    if k > encoder.num_concepts() {
        return Err(invalid(format!(
            "asked for {k} concepts but the encoder has {}",
            encoder.num_concepts()
        )));
    }
    let row = features.insert_axis(Axis(0));
    let c_hat = encoder.forward(row)?.row(0).to_owned();
    let logits = classifier.logits(c_hat.view().insert_axis(Axis(0)))?;
    let s = argmax_rows(logits.view())[0];
    let weights = classifier.layer.weight.row(s);
    let mut ranked: Vec<(usize, f64)> = (0..c_hat.len()).map(|j| (j, weights[j] * c_hat[j])).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let concepts = ranked
        .into_iter()
        .take(k)
        .map(|(j, contribution)| Contribution {
            index: j,
            name: encoder.concept_names[j].clone(),
            contribution,
            activation: c_hat[j],
        })
        .collect();
    Ok(Explanation {
        predicted_class: s,
        class_name: classifier.class_names[s].clone(),
        logit: logits[[0, s]],
        concepts,
    })
}

/// Comparison of the layered model against the single affine map obtained
/// by composing its layers while ignoring any nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub nonlinearity: Nonlinearity,
    pub probes: usize,
    /// `W_f · W₂ · W₁`, classes × features.
    pub composed_weight: Vec<Vec<f64>>,
    /// `W_f · (W₂ · b₁ + b₂) + b_f`.
    pub composed_bias: Vec<f64>,
    pub max_deviation: f64,
    /// Fraction of probes where both maps predict the same class.
    pub agreement: f64,
}

pub fn composed_map(encoder: &ConceptEncoder, classifier: &FinalClassifier) -> Result<(Array2<f64>, Array1<f64>)> {
    check_chain(encoder, classifier)?;
    let wf = &classifier.layer.weight;
    let w = wf.dot(&encoder.layer2.weight).dot(&encoder.layer1.weight);
    let b = wf.dot(&(encoder.layer2.weight.dot(&encoder.layer1.bias) + &encoder.layer2.bias)) + &classifier.layer.bias;
    Ok((w, b))
}

pub fn linearity_audit(
    encoder: &ConceptEncoder,
    classifier: &FinalClassifier,
    probes: ArrayView2<f64>,
) -> Result<AuditReport> {
    if probes.nrows() == 0 {
        return Err(invalid("linearity audit needs at least one probe"));
    }
    let (w, b) = composed_map(encoder, classifier)?;
    let (layered, layered_pred) = predict(encoder, classifier, probes)?;
    let composed = probes.dot(&w.t()) + &b;
    let composed_pred = argmax_rows(composed.view());
    let max_deviation = layered
        .iter()
        .zip(composed.iter())
        .map(|(a, c)| (a - c).abs())
        .fold(0.0, f64::max);
    let agree = layered_pred.iter().zip(&composed_pred).filter(|(a, c)| a == c).count();
    Ok(AuditReport {
        nonlinearity: encoder.nonlinearity,
        probes: probes.nrows(),
        composed_weight: w.rows().into_iter().map(|r| r.to_vec()).collect(),
        composed_bias: b.to_vec(),
        max_deviation,
        agreement: agree as f64 / probes.nrows() as f64,
    })
}
