//! Run configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use moie_core::analysis::CompletenessConfig;
use moie_core::data::GenSpec;
use moie_core::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::SCHEMA_VERSION;

/// Named generator settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Default,
    Noiseless,
    Shortcut,
}

impl Preset {
    pub fn spec(self) -> GenSpec {
        match self {
            Preset::Default => GenSpec::default(),
            Preset::Noiseless => GenSpec::noiseless(),
            Preset::Shortcut => GenSpec::shortcut(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Preset {
        name: Preset,
    },
    Generate {
        spec: Box<GenSpec>,
    },
    /// One CSV file, split by label-stratified shuffling.
    Csv {
        path: PathBuf,
        split: [f64; 3],
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Preset {
            name: Preset::Default,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    pub completeness: CompletenessConfig,
    /// Share of concepts, by peak attention, in the reduced completeness set.
    pub top_fraction: f64,
    /// Concepts zeroed per step; defaults to a ladder up to every concept.
    pub ablation_sizes: Option<Vec<usize>>,
    pub intervention_sizes: Option<Vec<usize>>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            completeness: CompletenessConfig::default(),
            top_fraction: 0.25,
            ablation_sizes: None,
            intervention_sizes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShortcutOptions {
    /// Concept ids that duplicate the metadata; taken from the generator's
    /// spurious concept when unset.
    pub metadata_concepts: Option<Vec<usize>>,
    pub flag_threshold: f64,
}

impl Default for ShortcutOptions {
    fn default() -> Self {
        Self {
            metadata_concepts: None,
            flag_threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub pipeline: PipelineConfig,
    pub analysis: AnalysisOptions,
    pub shortcut: ShortcutOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataSource::default(),
            pipeline: PipelineConfig::default(),
            analysis: AnalysisOptions::default(),
            shortcut: ShortcutOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    /// Generator spec behind the data source, if any.
    pub fn spec(&self) -> Option<GenSpec> {
        match &self.data {
            DataSource::Preset { name } => Some(name.spec()),
            DataSource::Generate { spec } => Some((**spec).clone()),
            DataSource::Csv { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "schema_version: {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let field = |name: &str, e: moie_core::Error| invalid(format!("{name}: {e}"));
        match &self.data {
            DataSource::Generate { spec } => spec.validate().map_err(|e| field("data.spec", e))?,
            DataSource::Csv { path, split } => {
                if !path.is_file() {
                    return Err(invalid(format!(
                        "data.path: {} does not exist",
                        path.display()
                    )));
                }
                moie_core::data::split_sizes(100, split).map_err(|e| field("data.split", e))?;
            }
            DataSource::Preset { .. } => {}
        }
        self.pipeline.validate().map_err(|e| field("pipeline", e))?;
        let a = &self.analysis;
        if !(a.top_fraction > 0.0 && a.top_fraction <= 1.0) {
            return Err(invalid("analysis.top_fraction must lie in (0, 1]"));
        }
        a.completeness
            .train
            .validate("completeness.train")
            .map_err(|e| field("analysis", e))?;
        if a.completeness.hidden == 0 || a.completeness.restarts == 0 {
            return Err(invalid(
                "analysis.completeness.hidden and restarts must be positive",
            ));
        }
        if let Some(b) = a.completeness.baseline {
            if !(b > 0.0 && b < 1.0) {
                return Err(invalid("analysis.completeness.baseline must lie in (0, 1)"));
            }
        }
        for (name, sizes) in [
            ("ablation_sizes", &a.ablation_sizes),
            ("intervention_sizes", &a.intervention_sizes),
        ] {
            if sizes.as_ref().is_some_and(Vec::is_empty) {
                return Err(invalid(format!("analysis.{name} must not be empty")));
            }
        }
        if !(0.0..=1.0).contains(&self.shortcut.flag_threshold) {
            return Err(invalid("shortcut.flag_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "data": {"kind": "preset", "name": "shortcut"}}"#)
                .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.spec(), Some(GenSpec::shortcut()));
        assert_eq!(cfg.pipeline, PipelineConfig::default());
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = RunConfig::default();
        cfg.pipeline.carve.expert.t_lens = 0.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("t_lens"));
        let cfg = RunConfig {
            schema_version: 9,
            ..RunConfig::default()
        };
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("schema_version"));
        let cfg = RunConfig {
            data: DataSource::Csv {
                path: "/nonexistent/x.csv".into(),
                split: [0.6, 0.2, 0.2],
            },
            ..RunConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.csv"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).is_err());
    }
}
