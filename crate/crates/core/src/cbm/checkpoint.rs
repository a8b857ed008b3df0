//! Model checkpoints as containers: weights and Adam moments are `f64`
//! arrays, Adam step counters and hyperparameters plus the training history
//! live in the header attributes.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ConceptEncoder, FinalClassifier, Nonlinearity, OptimizerState, TeacherProbe, TrainingHistory};
use crate::error::{Error, Result};
use crate::nn::{AdamState, DenseParams};
use crate::store::{ArrayData, Container, NamedArray};

pub const ENCODER_KIND: &str = "concept_encoder";
pub const TEACHER_KIND: &str = "teacher_probe";
pub const CLASSIFIER_KIND: &str = "final_classifier";

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidBundle(msg.into())
}

fn push_dense(c: &mut Container, prefix: &str, p: &DenseParams) -> Result<()> {
    c.push(NamedArray::new(
        format!("{prefix}.weight"),
        vec![p.out_dim(), p.in_dim()],
        ArrayData::F64(p.weight.iter().copied().collect()),
    )?);
    c.push(NamedArray::new(format!("{prefix}.bias"), vec![p.out_dim()], ArrayData::F64(p.bias.to_vec()))?);
    Ok(())
}

fn read_dense(c: &Container, prefix: &str) -> Result<DenseParams> {
    let w = c.require(&format!("{prefix}.weight"))?;
    let b = c.require(&format!("{prefix}.bias"))?;
    let weight = match (&w.data, w.shape.as_slice()) {
        (ArrayData::F64(v), &[r, k]) => Array2::from_shape_vec((r, k), v.clone()).expect("length checked on read"),
        _ => return Err(bad(format!("`{prefix}.weight` must be a 2-d f64 array"))),
    };
    let bias = match (&b.data, b.shape.as_slice()) {
        (ArrayData::F64(v), &[_]) => Array1::from(v.clone()),
        _ => return Err(bad(format!("`{prefix}.bias` must be a 1-d f64 array"))),
    };
    DenseParams::new(weight, bias)
}

fn push_optimizer(c: &mut Container, opt: &OptimizerState) -> Result<()> {
    let mut meta = serde_json::Map::new();
    for (name, st) in opt {
        c.push(NamedArray::new(format!("adam.{name}.m"), vec![st.len()], ArrayData::F64(st.m.clone()))?);
        c.push(NamedArray::new(format!("adam.{name}.v"), vec![st.len()], ArrayData::F64(st.v.clone()))?);
        let m = AdamMeta {
            step: st.step,
            beta1: st.beta1,
            beta2: st.beta2,
            eps: st.eps,
        };
        meta.insert(name.clone(), serde_json::to_value(m)?);
    }
    c.attrs.insert("adam".into(), Value::Object(meta));
    Ok(())
}

fn read_optimizer(c: &Container) -> Result<OptimizerState> {
    let mut opt = OptimizerState::new();
    let Some(meta) = c.attrs.get("adam") else {
        return Ok(opt);
    };
    let meta: std::collections::BTreeMap<String, AdamMeta> = serde_json::from_value(meta.clone())?;
    for (name, m) in meta {
        let vec = |suffix: &str| -> Result<Vec<f64>> {
            match &c.require(&format!("adam.{name}.{suffix}"))?.data {
                ArrayData::F64(v) => Ok(v.clone()),
                _ => Err(bad(format!("`adam.{name}.{suffix}` must be f64"))),
            }
        };
        let (mv, vv) = (vec("m")?, vec("v")?);
        if mv.len() != vv.len() {
            return Err(bad(format!("adam moments for `{name}` differ in length")));
        }
        opt.insert(
            name,
            AdamState {
                m: mv,
                v: vv,
                step: m.step,
                beta1: m.beta1,
                beta2: m.beta2,
                eps: m.eps,
            },
        );
    }
    Ok(opt)
}

fn push_history(c: &mut Container, history: Option<&TrainingHistory>) -> Result<()> {
    if let Some(h) = history {
        c.attrs.insert("history".into(), serde_json::to_value(h)?);
    }
    Ok(())
}

fn read_history(c: &Container) -> Result<Option<TrainingHistory>> {
    c.attrs
        .get("history")
        .map(|v| serde_json::from_value(v.clone()).map_err(Error::from))
        .transpose()
}

fn expect_kind(c: &Container, kind: &str) -> Result<()> {
    if c.kind != kind {
        return Err(bad(format!("container kind is `{}`, expected `{kind}`", c.kind)));
    }
    Ok(())
}

pub fn encoder_to_container(enc: &ConceptEncoder, history: Option<&TrainingHistory>) -> Result<Container> {
    let mut c = Container::new(ENCODER_KIND);
    push_dense(&mut c, "layer1", &enc.layer1)?;
    push_dense(&mut c, "layer2", &enc.layer2)?;
    push_optimizer(&mut c, &enc.optimizer)?;
    c.names.insert("concept_names".into(), enc.concept_names.clone());
    c.attrs.insert("nonlinearity".into(), Value::from(enc.nonlinearity.as_str()));
    push_history(&mut c, history)?;
    Ok(c)
}

pub fn encoder_from_container(c: &Container) -> Result<(ConceptEncoder, Option<TrainingHistory>)> {
    expect_kind(c, ENCODER_KIND)?;
    let nonlinearity: Nonlinearity = serde_json::from_value(
        c.attrs.get("nonlinearity").cloned().ok_or_else(|| bad("missing `nonlinearity` attribute"))?,
    )?;
    let names = c.names.get("concept_names").cloned().ok_or_else(|| bad("missing name table `concept_names`"))?;
    let mut enc = ConceptEncoder::new(read_dense(c, "layer1")?, read_dense(c, "layer2")?, nonlinearity, names)?;
    enc.optimizer = read_optimizer(c)?;
    Ok((enc, read_history(c)?))
}

pub fn teacher_to_container(t: &TeacherProbe, history: Option<&TrainingHistory>) -> Result<Container> {
    let mut c = Container::new(TEACHER_KIND);
    push_dense(&mut c, "layer", &t.layer)?;
    push_optimizer(&mut c, &t.optimizer)?;
    push_history(&mut c, history)?;
    Ok(c)
}

pub fn teacher_from_container(c: &Container) -> Result<(TeacherProbe, Option<TrainingHistory>)> {
    expect_kind(c, TEACHER_KIND)?;
    let mut t = TeacherProbe::new(read_dense(c, "layer")?);
    t.optimizer = read_optimizer(c)?;
    Ok((t, read_history(c)?))
}

pub fn classifier_to_container(clf: &FinalClassifier, history: Option<&TrainingHistory>) -> Result<Container> {
    let mut c = Container::new(CLASSIFIER_KIND);
    push_dense(&mut c, "layer", &clf.layer)?;
    push_optimizer(&mut c, &clf.optimizer)?;
    c.names.insert("class_names".into(), clf.class_names.clone());
    push_history(&mut c, history)?;
    Ok(c)
}

pub fn classifier_from_container(c: &Container) -> Result<(FinalClassifier, Option<TrainingHistory>)> {
    expect_kind(c, CLASSIFIER_KIND)?;
    let names = c.names.get("class_names").cloned().ok_or_else(|| bad("missing name table `class_names`"))?;
    let mut clf = FinalClassifier::new(read_dense(c, "layer")?, names)?;
    clf.optimizer = read_optimizer(c)?;
    Ok((clf, read_history(c)?))
}

pub fn save_encoder(enc: &ConceptEncoder, history: Option<&TrainingHistory>, path: impl AsRef<Path>) -> Result<()> {
    encoder_to_container(enc, history)?.write(path)
}

pub fn load_encoder(path: impl AsRef<Path>) -> Result<(ConceptEncoder, Option<TrainingHistory>)> {
    encoder_from_container(&Container::read(path)?)
}

pub fn save_teacher(t: &TeacherProbe, history: Option<&TrainingHistory>, path: impl AsRef<Path>) -> Result<()> {
    teacher_to_container(t, history)?.write(path)
}

pub fn load_teacher(path: impl AsRef<Path>) -> Result<(TeacherProbe, Option<TrainingHistory>)> {
    teacher_from_container(&Container::read(path)?)
}

pub fn save_classifier(clf: &FinalClassifier, history: Option<&TrainingHistory>, path: impl AsRef<Path>) -> Result<()> {
    classifier_to_container(clf, history)?.write(path)
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<(FinalClassifier, Option<TrainingHistory>)> {
    classifier_from_container(&Container::read(path)?)
}
