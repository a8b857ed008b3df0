use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ConceptEncoder, EpochRecord, FinalClassifier, Nonlinearity, OptimizerState, Stage, TeacherProbe, TrainConfig, TrainingHistory};
use crate::activation::ActivationMatrix;
use crate::error::{invalid, shape, Error, Result};
use crate::nn::{accuracy, ce_loss, elastic_penalty, kd_loss, mse_loss, relu_backward, AdamState, DenseGrads, DenseParams};
use crate::store::{EmbeddingBundle, Split};

// Distinct streams per stage so changing one stage's epochs leaves the
// others' initialization alone.
const ENCODER_STREAM: u64 = 0x656e_636f_6465_7231;
const TEACHER_STREAM: u64 = 0x7465_6163_6865_7231;
const CLASSIFIER_STREAM: u64 = 0x636c_6173_7369_6631;

pub(crate) fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn features_f64(bundle: &EmbeddingBundle) -> Array2<f64> {
    bundle.features.mapv(f64::from)
}

fn train_rows(bundle: &EmbeddingBundle) -> Result<Vec<usize>> {
    let rows = bundle.rows(Split::Train);
    if rows.is_empty() {
        return Err(invalid("bundle has no training rows"));
    }
    Ok(rows)
}

/// Validation rows: the val split, else the test split.
pub(crate) fn validation_rows(bundle: &EmbeddingBundle) -> Vec<usize> {
    let val = bundle.rows(Split::Val);
    if !val.is_empty() {
        return val;
    }
    let test = bundle.rows(Split::Test);
    if !test.is_empty() {
        log::warn!("bundle has no validation rows; reporting validation accuracy on the test split");
    }
    test
}

fn labels_at(bundle: &EmbeddingBundle, rows: &[usize]) -> Vec<u32> {
    rows.iter().map(|&i| bundle.labels[i]).collect()
}

fn adam_update(opt: &mut OptimizerState, name: &str, params: &mut DenseParams, grads: &DenseGrads, lr: f64) -> Result<()> {
    let w_key = format!("{name}.weight");
    let b_key = format!("{name}.bias");
    let w_len = params.weight.len();
    let b_len = params.bias.len();
    let gw = grads.weight.as_standard_layout();
    let w = params.weight.as_slice_mut().ok_or_else(|| shape("weight matrix is not contiguous"))?;
    opt.entry(w_key)
        .or_insert_with(|| AdamState::new(w_len))
        .step(w, gw.as_slice().expect("standard layout"), lr)?;
    let b = params.bias.as_slice_mut().ok_or_else(|| shape("bias is not contiguous"))?;
    opt.entry(b_key)
        .or_insert_with(|| AdamState::new(b_len))
        .step(b, grads.bias.as_slice().expect("owned bias"), lr)?;
    Ok(())
}

fn batches(rows: &[usize], rng: &mut ChaCha8Rng, size: usize) -> Vec<Vec<usize>> {
    let mut order = rows.to_vec();
    order.shuffle(rng);
    order.chunks(size).map(|c| c.to_vec()).collect()
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss)
    }
}

/// Fits the concept encoder to the normalized activations by mean squared
/// error over shuffled mini-batches of the training split.
pub fn train_concept_encoder(
    bundle: &EmbeddingBundle,
    acts: &ActivationMatrix,
    cfg: &TrainConfig,
) -> Result<(ConceptEncoder, TrainingHistory)> {
    cfg.validate()?;
    if acts.num_rows() != bundle.num_rows() {
        return Err(shape(format!(
            "{} activation rows for a bundle of {} rows",
            acts.num_rows(),
            bundle.num_rows()
        )));
    }
    let rows = train_rows(bundle)?;
    let x = features_f64(bundle);
    let d_b = x.ncols();
    let k = acts.num_concepts();
    let hidden = cfg.hidden.unwrap_or(d_b);
    let mut rng = stage_rng(cfg.seed, ENCODER_STREAM);
    let layer1 = DenseParams::init_uniform(hidden, d_b, &mut rng);
    let layer2 = DenseParams::init_uniform(k, hidden, &mut rng);
    let mut enc = ConceptEncoder::new(layer1, layer2, cfg.nonlinearity, acts.concept_names.clone())?;
    let schedule = cfg.encoder_lr_schedule();
    let mut history = TrainingHistory::new(Stage::Encoder);

    for epoch in 0..cfg.encoder_epochs {
        let lr = schedule.lr_at(epoch);
        let mut total = 0.0;
        for batch in batches(&rows, &mut rng, cfg.batch_size) {
            let xb = x.select(Axis(0), &batch);
            let target = acts.values.select(Axis(0), &batch);
            let pre = enc.layer1.forward(xb.view())?;
            let h = enc.hidden(pre.view());
            let out = enc.layer2.forward(h.view())?;
            let (loss, g_out) = mse_loss(out.view(), target.view())?;
            total += check_finite(loss)? * batch.len() as f64;
            let g2 = enc.layer2.backward(h.view(), g_out.view());
            let g_pre = match enc.nonlinearity {
                Nonlinearity::Relu => relu_backward(pre.view(), g2.input.view()),
                Nonlinearity::None => g2.input.clone(),
            };
            let g1 = enc.layer1.backward(xb.view(), g_pre.view());
            adam_update(&mut enc.optimizer, "layer1", &mut enc.layer1, &g1, lr)?;
            adam_update(&mut enc.optimizer, "layer2", &mut enc.layer2, &g2, lr)?;
        }
        let mse = total / rows.len() as f64;
        history.epochs.push(EpochRecord {
            epoch,
            ce: 0.0,
            elastic: 0.0,
            kd: 0.0,
            total: mse,
            val_acc: None,
            lr,
        });
    }
    Ok((enc, history))
}

/// Linear probe from backbone features to classes, trained by
/// cross-entropy. This is the oracle baseline and the distillation teacher.
pub fn train_teacher(bundle: &EmbeddingBundle, cfg: &TrainConfig) -> Result<(TeacherProbe, TrainingHistory)> {
    cfg.validate()?;
    let rows = train_rows(bundle)?;
    let x = features_f64(bundle);
    let classes = bundle.num_classes();
    let mut rng = stage_rng(cfg.seed, TEACHER_STREAM);
    let mut teacher = TeacherProbe::new(DenseParams::init_uniform(classes, x.ncols(), &mut rng));
    let schedule = cfg.teacher_lr_schedule();
    let val = validation_rows(bundle);
    let (xv, yv) = (x.select(Axis(0), &val), labels_at(bundle, &val));
    let mut history = TrainingHistory::new(Stage::Teacher);

    for epoch in 0..cfg.teacher_epochs {
        let lr = schedule.lr_at(epoch);
        let mut total = 0.0;
        for batch in batches(&rows, &mut rng, cfg.batch_size) {
            let xb = x.select(Axis(0), &batch);
            let logits = teacher.layer.forward(xb.view())?;
            let (loss, g) = ce_loss(logits.view(), &labels_at(bundle, &batch))?;
            total += check_finite(loss)? * batch.len() as f64;
            let grads = teacher.layer.backward(xb.view(), g.view());
            adam_update(&mut teacher.optimizer, "layer", &mut teacher.layer, &grads, lr)?;
        }
        let ce = total / rows.len() as f64;
        let val_acc = (!val.is_empty()).then(|| accuracy(teacher.logits(xv.view()).unwrap().view(), &yv));
        history.epochs.push(EpochRecord {
            epoch,
            ce,
            elastic: 0.0,
            kd: 0.0,
            total: ce,
            val_acc,
            lr,
        });
    }
    Ok((teacher, history))
}

/// Value and gradient of the classifier objective
/// `α·[CE + s·(λ‖W‖₁ + (1−λ)‖W‖²)] + β·KD` on one batch. The bias is not
/// penalized. `teacher_logits` may be omitted only when β = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierLoss {
    pub ce: f64,
    /// Scaled elastic penalty `s·(λ‖W‖₁ + (1−λ)‖W‖²)`.
    pub elastic: f64,
    pub kd: f64,
    pub total: f64,
    pub grad_weight: Array2<f64>,
    pub grad_bias: ndarray::Array1<f64>,
}

pub fn classifier_objective(
    layer: &DenseParams,
    concepts: ArrayView2<f64>,
    labels: &[u32],
    teacher_logits: Option<ArrayView2<f64>>,
    cfg: &TrainConfig,
    elastic_scale: f64,
) -> Result<ClassifierLoss> {
    let logits = layer.forward(concepts)?;
    let (ce, g_ce) = ce_loss(logits.view(), labels)?;
    let (pen, g_pen) = elastic_penalty(layer.weight.view(), cfg.lambda)?;
    let (kd, g_kd) = match teacher_logits {
        Some(t) => {
            let (l, g) = kd_loss(logits.view(), t, cfg.temperature)?;
            (l, Some(g))
        }
        None if cfg.beta == 0.0 => (0.0, None),
        None => return Err(invalid("distillation weight is nonzero but no teacher logits were given")),
    };
    let elastic = elastic_scale * pen;
    let total = cfg.alpha * (ce + elastic) + cfg.beta * kd;

    let mut g_logits = Array2::zeros(logits.dim());
    if cfg.alpha != 0.0 {
        g_logits.scaled_add(cfg.alpha, &g_ce);
    }
    if cfg.beta != 0.0 {
        if let Some(g) = &g_kd {
            g_logits.scaled_add(cfg.beta, g);
        }
    }
    let mut grads = layer.backward(concepts, g_logits.view());
    if cfg.alpha != 0.0 && elastic_scale != 0.0 {
        grads.weight.scaled_add(cfg.alpha * elastic_scale, &g_pen);
    }
    Ok(ClassifierLoss {
        ce,
        elastic,
        kd,
        total,
        grad_weight: grads.weight,
        grad_bias: grads.bias,
    })
}

/// Trains the final classifier on the frozen encoder's concept predictions.
/// With β = 0 this is the vanilla model; the KD term is still measured for
/// the history but never enters the gradient.
pub fn train_classifier(
    encoder: &ConceptEncoder,
    teacher: &TeacherProbe,
    bundle: &EmbeddingBundle,
    cfg: &TrainConfig,
) -> Result<(FinalClassifier, TrainingHistory)> {
    let x = features_f64(bundle);
    let teacher_logits = teacher.logits(x.view())?;
    if teacher_logits.ncols() != bundle.num_classes() {
        return Err(shape(format!(
            "teacher predicts {} classes, bundle has {}",
            teacher_logits.ncols(),
            bundle.num_classes()
        )));
    }
    fit_classifier(encoder, Some(&teacher_logits), bundle, cfg)
}

pub(crate) fn fit_classifier(
    encoder: &ConceptEncoder,
    teacher_logits: Option<&Array2<f64>>,
    bundle: &EmbeddingBundle,
    cfg: &TrainConfig,
) -> Result<(FinalClassifier, TrainingHistory)> {
    cfg.validate()?;
    let rows = train_rows(bundle)?;
    let x = features_f64(bundle);
    if x.ncols() != encoder.input_dim() {
        return Err(shape(format!(
            "encoder expects {} features, bundle has {}",
            encoder.input_dim(),
            x.ncols()
        )));
    }
    let concepts = encoder.forward(x.view())?;
    let classes = bundle.num_classes();
    let scale = cfg.elastic_scale.unwrap_or(1.0 / rows.len() as f64);
    let mut rng = stage_rng(cfg.seed, CLASSIFIER_STREAM);
    let layer = DenseParams::init_uniform(classes, encoder.num_concepts(), &mut rng);
    let mut clf = FinalClassifier::new(layer, bundle.class_names.clone())?;
    let schedule = cfg.classifier_lr_schedule();
    let val = validation_rows(bundle);
    let (cv, yv) = (concepts.select(Axis(0), &val), labels_at(bundle, &val));
    let mut history = TrainingHistory::new(Stage::Classifier);

    for epoch in 0..cfg.classifier_epochs {
        let lr = schedule.lr_at(epoch);
        let (mut ce, mut elastic, mut kd, mut total) = (0.0, 0.0, 0.0, 0.0);
        for batch in batches(&rows, &mut rng, cfg.batch_size) {
            let cb = concepts.select(Axis(0), &batch);
            let tb = teacher_logits.map(|t| t.select(Axis(0), &batch));
            let loss = classifier_objective(&clf.layer, cb.view(), &labels_at(bundle, &batch), tb.as_ref().map(|t| t.view()), cfg, scale)?;
            let w = batch.len() as f64;
            check_finite(loss.total)?;
            ce += loss.ce * w;
            elastic += loss.elastic * w;
            kd += loss.kd * w;
            total += loss.total * w;
            let grads = DenseGrads {
                weight: loss.grad_weight,
                bias: loss.grad_bias,
                input: Array2::zeros((0, 0)),
            };
            adam_update(&mut clf.optimizer, "layer", &mut clf.layer, &grads, lr)?;
        }
        let n = rows.len() as f64;
        let val_acc = (!val.is_empty()).then(|| accuracy(clf.logits(cv.view()).unwrap().view(), &yv));
        history.epochs.push(EpochRecord {
            epoch,
            ce: ce / n,
            elastic: elastic / n,
            kd: kd / n,
            total: total / n,
            val_acc,
            lr,
        });
    }
    Ok((clf, history))
}
