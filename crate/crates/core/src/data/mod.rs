//! Concept datasets, the synthetic generator, and stratified splits.

mod generate;
mod split;

pub use generate::{generate, ClassRule, GenSpec, LabelRule, SpuriousSpec, SubgroupSpec};
pub use split::{split, split_sizes};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, invalid, Result};
use crate::numcore::Matrix;

/// Embeddings, labels and concept annotations for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub concept_names: Vec<String>,
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
    /// Observed concept values in `[0, 1]`.
    pub concepts: Matrix,
    /// Ground-truth binary concepts, when known.
    pub true_concepts: Option<Matrix>,
    pub subgroups: Option<Vec<usize>>,
    pub metadata: Option<Matrix>,
}

pub fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i}")).collect()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.cols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.len();
        ensure_dim("embedding rows", m, self.embeddings.rows())?;
        ensure_dim("concept rows", m, self.concepts.rows())?;
        ensure_dim(
            "concept names",
            self.concepts.cols(),
            self.concept_names.len(),
        )?;
        ensure_dim("class names", self.num_classes, self.class_names.len())?;
        if let Some(t) = &self.true_concepts {
            ensure_dim("true concept rows", m, t.rows())?;
            ensure_dim("true concept columns", self.concepts.cols(), t.cols())?;
            if t.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(invalid("true concepts must be 0 or 1"));
            }
        }
        if let Some(s) = &self.subgroups {
            ensure_dim("subgroup tags", m, s.len())?;
        }
        if let Some(md) = &self.metadata {
            ensure_dim("metadata rows", m, md.rows())?;
            if !md.is_finite() {
                return Err(invalid("metadata contains non-finite values"));
            }
        }
        if let Some((i, &y)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &y)| y >= self.num_classes)
        {
            return Err(invalid(format!(
                "row {i}: label {y} out of range for {} classes",
                self.num_classes
            )));
        }
        if !self.embeddings.is_finite() {
            return Err(invalid("embeddings contain non-finite values"));
        }
        if let Some(i) = self
            .concepts
            .as_slice()
            .iter()
            .position(|v| !(0.0..=1.0).contains(v))
        {
            return Err(invalid(format!(
                "row {}: concept value outside [0, 1]",
                i / self.concepts.cols().max(1)
            )));
        }
        let mut names: Vec<&String> = self.concept_names.iter().collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("concept names must be unique"));
        }
        Ok(())
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            name: name.into(),
            seed: self.seed,
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            concept_names: self.concept_names.clone(),
            embeddings: self.embeddings.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            concepts: self.concepts.select_rows(idx),
            true_concepts: self.true_concepts.as_ref().map(|t| t.select_rows(idx)),
            subgroups: self
                .subgroups
                .as_ref()
                .map(|s| idx.iter().map(|&i| s[i]).collect()),
            metadata: self.metadata.as_ref().map(|m| m.select_rows(idx)),
        }
    }

    /// Same rows with embeddings replaced.
    pub fn with_embeddings(&self, embeddings: Matrix) -> Result<Dataset> {
        ensure_dim("replacement embedding rows", self.len(), embeddings.rows())?;
        Ok(Dataset {
            embeddings,
            ..self.clone()
        })
    }

    /// Majority-class rate.
    pub fn majority_rate(&self) -> f64 {
        let mut counts = alloc::vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts.into_iter().max().unwrap_or(0) as f64 / self.len().max(1) as f64
    }
}
