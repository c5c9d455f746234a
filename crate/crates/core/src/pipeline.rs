//! End-to-end run: blackbox, concept bank, filtered views and carving.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::carver::{
    carve, train_blackbox, Blackbox, BlackboxConfig, CarveConfig, CarveSchedule, ConceptView, MoIE,
};
use crate::concepts::{
    filter_concepts, train_cav_bank, train_probes, CavConfig, ConceptBank, ConceptMode, ProbeConfig,
};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::math;
use crate::numcore::Matrix;

/// Where experts read concept values from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptSource {
    /// Predicted by the concept bank from embeddings.
    #[default]
    Probes,
    /// The dataset's observed annotations.
    Annotations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub blackbox: BlackboxConfig,
    pub concept_mode: ConceptMode,
    pub probes: ProbeConfig,
    pub cav: CavConfig,
    pub concept_threshold: f64,
    pub concept_source: ConceptSource,
    pub schedule: CarveSchedule,
    pub carve: CarveConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            blackbox: BlackboxConfig::default(),
            concept_mode: ConceptMode::Probe,
            probes: ProbeConfig::default(),
            cav: CavConfig::default(),
            concept_threshold: 0.7,
            concept_source: ConceptSource::Probes,
            schedule: CarveSchedule::default(),
            carve: CarveConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.blackbox.train.validate("blackbox.train")?;
        if !(0.0..1.0).contains(&self.concept_threshold) {
            return Err(invalid("concept_threshold must lie in [0, 1)"));
        }
        self.schedule.validate()?;
        self.carve.expert.validate()?;
        self.carve.residual.validate()
    }
}

/// Stream tags for per-stage seeds.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    math::mix_seed(seed, math::fnv1a(stage.as_bytes()))
}

pub fn fit_blackbox(train: &Dataset, cfg: &PipelineConfig, seed: u64) -> Result<Blackbox> {
    train_blackbox(
        &train.embeddings,
        &train.labels,
        train.num_classes,
        &cfg.blackbox,
        stage_seed(seed, "blackbox"),
    )
}

pub fn fit_bank(
    train: &Dataset,
    val: &Dataset,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<ConceptBank> {
    match cfg.concept_mode {
        ConceptMode::Probe => train_probes(
            train,
            val,
            &ProbeConfig {
                seed: stage_seed(seed, "probes"),
                ..cfg.probes
            },
        ),
        ConceptMode::Cav => train_cav_bank(
            train,
            val,
            &CavConfig {
                seed: stage_seed(seed, "cav"),
                ..cfg.cav
            },
        ),
    }
}

/// All concept values for `data` per `source`.
pub fn concept_values(data: &Dataset, bank: &ConceptBank, source: ConceptSource) -> Result<Matrix> {
    match source {
        ConceptSource::Probes => bank.predict(&data.embeddings),
        ConceptSource::Annotations => Ok(data.concepts.clone()),
    }
}

pub fn make_view(
    data: &Dataset,
    bank: &ConceptBank,
    index: &[usize],
    source: ConceptSource,
) -> Result<ConceptView> {
    let all = concept_values(data, bank, source)?;
    ConceptView::new(
        all.select_cols(index),
        data.embeddings.clone(),
        data.labels.clone(),
    )
}

#[derive(Debug, Clone)]
pub struct Run {
    pub f0: Blackbox,
    pub bank: ConceptBank,
    pub concept_index: Vec<usize>,
    pub moie: MoIE,
    pub train: ConceptView,
    pub val: ConceptView,
    pub test: ConceptView,
}

/// Trains every stage from scratch on the three splits.
pub fn run(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Run> {
    cfg.validate()?;
    let f0 = fit_blackbox(train, cfg, seed)?;
    let bank = fit_bank(train, val, cfg, seed)?;
    run_with(train, val, test, f0, bank, cfg, seed)
}

/// Carving stage given a trained blackbox and concept bank.
pub fn run_with(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    f0: Blackbox,
    bank: ConceptBank,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Run> {
    let concept_index = filter_concepts(&bank, cfg.concept_threshold)?;
    let views = [train, val, test].map(|d| make_view(d, &bank, &concept_index, cfg.concept_source));
    let [tv, vv, sv] = views;
    let (tv, vv, sv) = (tv?, vv?, sv?);
    let carve_cfg = CarveConfig {
        seed: stage_seed(seed, "carve"),
        ..cfg.carve.clone()
    };
    let moie = carve(
        &f0,
        &tv,
        &vv,
        &concept_index,
        &train.class_names,
        &cfg.schedule,
        &carve_cfg,
    )?;
    Ok(Run {
        f0,
        bank,
        concept_index,
        moie,
        train: tv,
        val: vv,
        test: sv,
    })
}
