//! Three-stage concept bottleneck pipeline: a concept encoder regressing the
//! normalized concept activations from backbone features, a linear teacher
//! probe on the features, and a final classifier over predicted concepts
//! trained against the labels and the teacher's softened logits.

mod checkpoint;
mod experiments;
mod infer;
mod train;

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::activation::NormMode;
use crate::error::{invalid, shape, Result};
use crate::nn::{relu, AdamState, DenseParams, LrSchedule, ScheduleKind};

pub use checkpoint::{
    classifier_from_container, classifier_to_container, encoder_from_container, encoder_to_container, load_classifier,
    load_encoder, load_teacher, save_classifier, save_encoder, save_teacher, teacher_from_container, teacher_to_container,
    CLASSIFIER_KIND, ENCODER_KIND, TEACHER_KIND,
};
pub use experiments::{
    concept_sensitivity_test, distillation_comparison, paired_t_test, ConditionSummary, DistillationReport, PairedTest,
    SensitivityReport,
};
pub use infer::{composed_map, explain, linearity_audit, predict, AuditReport, Contribution, Explanation};
pub use train::{classifier_objective, train_classifier, train_concept_encoder, train_teacher, ClassifierLoss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Relu,
    /// No activation between the encoder layers; the whole model is then a
    /// single affine map of the features.
    None,
}

impl Nonlinearity {
    pub fn as_str(self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::None => "none",
        }
    }
}

/// Per-tensor Adam moments keyed by parameter name.
pub type OptimizerState = BTreeMap<String, AdamState>;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEncoder {
    pub layer1: DenseParams,
    pub layer2: DenseParams,
    pub nonlinearity: Nonlinearity,
    pub concept_names: Vec<String>,
    pub optimizer: OptimizerState,
}

impl ConceptEncoder {
    pub fn new(layer1: DenseParams, layer2: DenseParams, nonlinearity: Nonlinearity, concept_names: Vec<String>) -> Result<Self> {
        if layer1.out_dim() != layer2.in_dim() {
            return Err(shape(format!(
                "encoder layers do not chain: {} hidden units feed a layer expecting {}",
                layer1.out_dim(),
                layer2.in_dim()
            )));
        }
        if concept_names.len() != layer2.out_dim() {
            return Err(shape(format!(
                "{} concept names for {} encoder outputs",
                concept_names.len(),
                layer2.out_dim()
            )));
        }
        Ok(ConceptEncoder {
            layer1,
            layer2,
            nonlinearity,
            concept_names,
            optimizer: OptimizerState::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer1.in_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer1.out_dim()
    }

    pub fn num_concepts(&self) -> usize {
        self.layer2.out_dim()
    }

    pub(crate) fn hidden(&self, pre: ArrayView2<f64>) -> Array2<f64> {
        match self.nonlinearity {
            Nonlinearity::Relu => relu(pre),
            Nonlinearity::None => pre.to_owned(),
        }
    }

    /// Predicted concept activations `ĉ` for a batch of features.
    pub fn forward(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        let pre = self.layer1.forward(features)?;
        self.layer2.forward(self.hidden(pre.view()).view())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherProbe {
    pub layer: DenseParams,
    pub optimizer: OptimizerState,
}

impl TeacherProbe {
    pub fn new(layer: DenseParams) -> Self {
        TeacherProbe {
            layer,
            optimizer: OptimizerState::new(),
        }
    }

    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.layer.forward(features)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalClassifier {
    pub layer: DenseParams,
    pub class_names: Vec<String>,
    pub optimizer: OptimizerState,
}

impl FinalClassifier {
    pub fn new(layer: DenseParams, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() != layer.out_dim() {
            return Err(shape(format!(
                "{} class names for {} classifier outputs",
                class_names.len(),
                layer.out_dim()
            )));
        }
        Ok(FinalClassifier {
            layer,
            class_names,
            optimizer: OptimizerState::new(),
        })
    }

    pub fn logits(&self, concepts: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.layer.forward(concepts)
    }
}

/// Hyperparameters for all three stages. The defaults follow the published
/// ImageNet-100 setting: α = β = 1, T = 2, encoder η = 1e-3 under a cosine
/// schedule, classifier η = 1e-4 without one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    /// Elastic-net mix: weight of ℓ1 against the squared ℓ2 term.
    pub lambda: f64,
    /// Multiplier on the elastic penalty. Losses are batch means, so the
    /// default `1 / N_train` keeps the penalty's weight relative to the
    /// summed cross-entropy.
    pub elastic_scale: Option<f64>,
    pub encoder_lr: f64,
    pub encoder_schedule: ScheduleKind,
    pub classifier_lr: f64,
    pub classifier_schedule: ScheduleKind,
    pub teacher_lr: f64,
    pub teacher_schedule: ScheduleKind,
    pub min_lr: f64,
    pub cycle_epochs: usize,
    pub encoder_epochs: usize,
    pub teacher_epochs: usize,
    pub classifier_epochs: usize,
    pub batch_size: usize,
    /// Encoder hidden width; the feature width when absent.
    pub hidden: Option<usize>,
    pub nonlinearity: Nonlinearity,
    pub norm_mode: NormMode,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 1.0,
            temperature: 2.0,
            lambda: 0.5,
            elastic_scale: None,
            encoder_lr: 1e-3,
            encoder_schedule: ScheduleKind::Cosine,
            classifier_lr: 1e-4,
            classifier_schedule: ScheduleKind::Constant,
            teacher_lr: 1e-3,
            teacher_schedule: ScheduleKind::Constant,
            min_lr: 1e-4,
            cycle_epochs: 20,
            encoder_epochs: 50,
            teacher_epochs: 50,
            classifier_epochs: 50,
            batch_size: 256,
            hidden: None,
            nonlinearity: Nonlinearity::Relu,
            norm_mode: NormMode::PerConcept,
            epsilon: crate::activation::DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid("alpha and beta must be finite and >= 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if let Some(s) = self.elastic_scale {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(invalid("elastic_scale must be finite and >= 0"));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if self.hidden == Some(0) {
            return Err(invalid("hidden width must be >= 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon must be > 0"));
        }
        self.encoder_lr_schedule().validate()?;
        self.teacher_lr_schedule().validate()?;
        self.classifier_lr_schedule().validate()?;
        Ok(())
    }

    fn schedule(&self, kind: ScheduleKind, lr: f64) -> LrSchedule {
        match kind {
            ScheduleKind::Constant => LrSchedule::constant(lr),
            ScheduleKind::Cosine => LrSchedule::cosine(lr, self.min_lr, self.cycle_epochs),
        }
    }

    pub fn encoder_lr_schedule(&self) -> LrSchedule {
        self.schedule(self.encoder_schedule, self.encoder_lr)
    }

    pub fn teacher_lr_schedule(&self) -> LrSchedule {
        self.schedule(self.teacher_schedule, self.teacher_lr)
    }

    pub fn classifier_lr_schedule(&self) -> LrSchedule {
        self.schedule(self.classifier_schedule, self.classifier_lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoder,
    Teacher,
    Classifier,
}

/// One epoch of training. Loss components are means over the epoch's
/// mini-batches, weighted by batch size, measured before each update. For
/// the encoder stage `total` holds the concept MSE and the other components
/// are zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub elastic: f64,
    pub kd: f64,
    pub total: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn new(stage: Stage) -> Self {
        TrainingHistory { stage, epochs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "ce", "elastic", "kd", "total", "val_acc", "lr"])?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.ce.to_string(),
                r.elastic.to_string(),
                r.kd.to_string(),
                r.total.to_string(),
                r.val_acc.map(|v| v.to_string()).unwrap_or_default(),
                r.lr.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
