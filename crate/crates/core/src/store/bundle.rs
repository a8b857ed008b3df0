use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::container::{ArrayData, Container, NamedArray};
use crate::error::{Error, Result};

pub const BUNDLE_KIND: &str = "embedding_bundle";

/// Which partition a row belongs to. Stored on disk as one `u8` per row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    fn from_u8(v: u8) -> Option<Split> {
        match v {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Backbone features, VLM image and concept embeddings, labels and name
/// tables for one dataset/VLM pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    /// N×d_b backbone features.
    pub features: Array2<f32>,
    /// N×d_v image embeddings from the VLM.
    pub image_embeddings: Array2<f32>,
    /// K×d_v text embeddings, one row per concept.
    pub concept_embeddings: Array2<f32>,
    pub labels: Vec<u32>,
    pub concept_names: Vec<String>,
    pub class_names: Vec<String>,
    pub splits: Vec<Split>,
}

impl EmbeddingBundle {
    pub fn num_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.concept_names.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Row indices belonging to `split`, in file order.
    pub fn rows(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        let bad = |msg: String| Err(Error::InvalidBundle(msg));
        if self.features.nrows() != n || self.image_embeddings.nrows() != n {
            return bad(format!(
                "row counts disagree: features {}, image_embeddings {}, labels {n}",
                self.features.nrows(),
                self.image_embeddings.nrows()
            ));
        }
        if self.splits.len() != n {
            return bad(format!("{} split tags for {n} rows", self.splits.len()));
        }
        if self.concept_embeddings.nrows() != self.concept_names.len() {
            return bad(format!(
                "{} concept embeddings but {} concept names",
                self.concept_embeddings.nrows(),
                self.concept_names.len()
            ));
        }
        if self.concept_embeddings.ncols() != self.image_embeddings.ncols() {
            return bad(format!(
                "concept embedding width {} differs from image embedding width {}",
                self.concept_embeddings.ncols(),
                self.image_embeddings.ncols()
            ));
        }
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= self.class_names.len())
        {
            return bad(format!(
                "label out of range: row {i} has label {l} but there are {} class names",
                self.class_names.len()
            ));
        }
        for (name, m) in [
            ("features", &self.features),
            ("image_embeddings", &self.image_embeddings),
            ("concept_embeddings", &self.concept_embeddings),
        ] {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let mut c = Container::new(BUNDLE_KIND);
        for (name, m) in [
            ("features", &self.features),
            ("image_embeddings", &self.image_embeddings),
            ("concept_embeddings", &self.concept_embeddings),
        ] {
            c.push(NamedArray::new(
                name,
                vec![m.nrows(), m.ncols()],
                ArrayData::F32(m.iter().copied().collect()),
            )?);
        }
        c.push(NamedArray::new("labels", vec![self.labels.len()], ArrayData::U32(self.labels.clone()))?);
        c.push(NamedArray::new(
            "splits",
            vec![self.splits.len()],
            ArrayData::U8(self.splits.iter().map(|&s| s as u8).collect()),
        )?);
        c.names.insert("concept_names".into(), self.concept_names.clone());
        c.names.insert("class_names".into(), self.class_names.clone());
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != BUNDLE_KIND {
            return Err(Error::InvalidBundle(format!(
                "container kind is `{}`, expected `{BUNDLE_KIND}`",
                c.kind
            )));
        }
        let matrix = |name: &str| -> Result<Array2<f32>> {
            let a = c.require(name)?;
            match (&a.data, a.shape.as_slice()) {
                (ArrayData::F32(v), &[r, k]) => Ok(Array2::from_shape_vec((r, k), v.clone())
                    .expect("shape checked against length on read")),
                _ => Err(Error::InvalidBundle(format!("`{name}` must be a 2-d f32 array"))),
            }
        };
        let features = matrix("features")?;
        let image_embeddings = matrix("image_embeddings")?;
        let concept_embeddings = matrix("concept_embeddings")?;
        let labels = match &c.require("labels")?.data {
            ArrayData::U32(v) => v.clone(),
            _ => return Err(Error::InvalidBundle("`labels` must be u32".into())),
        };
        let splits = match c.get("splits").map(|a| &a.data) {
            None => vec![Split::Train; labels.len()],
            Some(ArrayData::U8(v)) => v
                .iter()
                .map(|&b| {
                    Split::from_u8(b)
                        .ok_or_else(|| Error::InvalidBundle(format!("unknown split tag {b}")))
                })
                .collect::<Result<_>>()?,
            Some(_) => return Err(Error::InvalidBundle("`splits` must be u8".into())),
        };
        let names = |key: &str| {
            c.names
                .get(key)
                .cloned()
                .ok_or_else(|| Error::InvalidBundle(format!("missing name table `{key}`")))
        };
        let bundle = EmbeddingBundle {
            features,
            image_embeddings,
            concept_embeddings,
            labels,
            concept_names: names("concept_names")?,
            class_names: names("class_names")?,
            splits,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Same rows, different concept set.
    pub fn with_concepts(&self, concept_embeddings: Array2<f32>, concept_names: Vec<String>) -> Result<Self> {
        let b = EmbeddingBundle {
            concept_embeddings,
            concept_names,
            ..self.clone()
        };
        b.validate()?;
        Ok(b)
    }

    /// Keeps only the listed concepts, in the given order.
    pub fn select_concepts(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&j| j >= self.num_concepts()) {
            return Err(Error::InvalidArgument(format!("concept index {bad} out of range")));
        }
        let emb = self.concept_embeddings.select(ndarray::Axis(0), indices);
        let names = indices.iter().map(|&j| self.concept_names[j].clone()).collect();
        self.with_concepts(emb, names)
    }
}

pub fn write_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<()> {
    bundle.to_container()?.write(path)
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    EmbeddingBundle::from_container(&Container::read(path)?)
}
