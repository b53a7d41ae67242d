use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{Image, Mask};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, mask: Mask) -> Result<Self> {
        let id = id.into();
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(Error::data(format!(
                "sample {id}: image is {}x{} but mask is {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(Sample { id, image, mask })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.image.height(), self.image.width())
    }
}

/// Where a derived sample came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub id: String,
    pub parent: String,
    pub transform: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub angle_deg: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetMeta {
    pub source: String,
    pub preprocessing: Vec<String>,
    pub provenance: Vec<Provenance>,
}

/// Samples ordered lexicographically by id, ids unique.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(mut samples: Vec<Sample>, meta: DatasetMeta) -> Result<Self> {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = samples.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::data(format!("duplicate sample id {}", w[0].id)));
        }
        Ok(Dataset { samples, meta })
    }

    pub fn empty() -> Self {
        Dataset {
            samples: Vec::new(),
            meta: DatasetMeta::default(),
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.samples[i])
    }

    /// Samples whose ids are in `ids`, keeping this dataset's metadata source.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Dataset> {
        let wanted: BTreeSet<&str> = ids.into_iter().collect();
        let samples: Vec<Sample> = self
            .samples
            .iter()
            .filter(|s| wanted.contains(s.id.as_str()))
            .cloned()
            .collect();
        if samples.len() != wanted.len() {
            return Err(Error::data("subset names ids missing from the dataset"));
        }
        Dataset::new(
            samples,
            DatasetMeta {
                source: self.meta.source.clone(),
                preprocessing: self.meta.preprocessing.clone(),
                provenance: Vec::new(),
            },
        )
    }

    /// Common `(height, width)` of all samples, or an error if they differ.
    pub fn uniform_dims(&self) -> Result<(usize, usize)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::data("dataset is empty"))?
            .dims();
        if let Some(s) = self.samples.iter().find(|s| s.dims() != first) {
            return Err(Error::data(format!(
                "sample {} is {:?}, expected {:?}",
                s.id,
                s.dims(),
                first
            )));
        }
        Ok(first)
    }
}
