//! Shortcut detection from extracted formulas and removal by regressing
//! metadata out of the embeddings.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::carver::{coverage_report, ConceptView};
use crate::data::Dataset;
use crate::error::{ensure_dim, invalid, Result};
use crate::fol::{aggregate_all, explain_routed, DnfFormula};
use crate::numcore::{solve, Matrix};
use crate::pipeline::{fit_bank, fit_blackbox, run_with, PipelineConfig, Run};

const PIVOT_TOL: f64 = 1e-10;
const RIDGE: f64 = 1e-6;

/// Metadata concepts and the evaluation split's subgroup of every row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataSpec {
    pub concepts: Vec<usize>,
    pub subgroups: Vec<usize>,
}

/// 0 where the binary metadata value equals the label's lowest bit, 1
/// where it conflicts.
pub fn agreement_groups(labels: &[usize], metadata: &[f64]) -> Result<Vec<usize>> {
    ensure_dim("metadata rows", labels.len(), metadata.len())?;
    Ok(labels
        .iter()
        .zip(metadata)
        .map(|(&y, &m)| ((m >= 0.5) != (y & 1 == 1)) as usize)
        .collect())
}

/// Least-squares effect of metadata on each feature column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdnFit {
    /// `d × l` slopes.
    pub coef: Matrix,
    pub metadata_mean: Vec<f64>,
}

impl MdnFit {
    /// Fits `f ≈ β₀ + Mβ` per column; falls back to a tiny ridge when the
    /// metadata is rank-deficient.
    pub fn fit(features: &Matrix, metadata: &Matrix) -> Result<Self> {
        let (m, d) = (metadata.rows(), metadata.cols());
        ensure_dim("metadata rows", features.rows(), m)?;
        if m <= d + 1 {
            return Err(invalid(format!(
                "{m} rows cannot fit {d} metadata columns plus an intercept"
            )));
        }
        let p = d + 1;
        let mut gram = Matrix::zeros(p, p);
        let mut xty = Matrix::zeros(p, features.cols());
        let mut x = vec![1.0; p];
        for r in 0..m {
            x[1..].copy_from_slice(metadata.row(r));
            for a in 0..p {
                for b in 0..p {
                    gram.set(a, b, gram.get(a, b) + x[a] * x[b]);
                }
                for (c, &f) in features.row(r).iter().enumerate() {
                    xty.set(a, c, xty.get(a, c) + x[a] * f);
                }
            }
        }
        let mut ridged = false;
        let mut coef = Matrix::zeros(d, features.cols());
        for c in 0..features.cols() {
            let rhs = xty.column(c);
            let beta = match solve(&gram, &rhs, PIVOT_TOL) {
                Some(b) => b,
                None => {
                    ridged = true;
                    let mut g = gram.clone();
                    for i in 0..p {
                        g.set(i, i, g.get(i, i) + RIDGE);
                    }
                    solve(&g, &rhs, 0.0).ok_or_else(|| invalid("metadata system is singular"))?
                }
            };
            for i in 0..d {
                coef.set(i, c, beta[i + 1]);
            }
        }
        if ridged {
            log::warn!("metadata is rank-deficient; used a ridge of {RIDGE:e}");
        }
        let metadata_mean = (0..d)
            .map(|i| metadata.column(i).iter().sum::<f64>() / m as f64)
            .collect();
        Ok(Self {
            coef,
            metadata_mean,
        })
    }

    /// `f − (M − mean(M))β`: removes the metadata effect, keeps the mean.
    pub fn apply(&self, features: &Matrix, metadata: &Matrix) -> Result<Matrix> {
        ensure_dim("metadata rows", features.rows(), metadata.rows())?;
        ensure_dim("metadata cols", self.coef.rows(), metadata.cols())?;
        ensure_dim("feature cols", self.coef.cols(), features.cols())?;
        let mut out = features.clone();
        for r in 0..out.rows() {
            let md = metadata.row(r);
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                for (i, (&mv, &mean)) in md.iter().zip(&self.metadata_mean).enumerate() {
                    *v -= (mv - mean) * self.coef.get(i, c);
                }
            }
        }
        Ok(out)
    }
}

/// Fit and apply on the same rows.
pub fn mdn_residualize(features: &Matrix, metadata: &Matrix) -> Result<Matrix> {
    MdnFit::fit(features, metadata)?.apply(features, metadata)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousEntry {
    pub expert: usize,
    pub class: usize,
    pub conjunctions: usize,
    pub with_metadata: usize,
    pub fraction: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousReport {
    pub threshold: f64,
    pub entries: Vec<SpuriousEntry>,
}

impl SpuriousReport {
    /// (expert, class) pairs at or above the threshold.
    pub fn flagged(&self) -> Vec<(usize, usize)> {
        self.entries
            .iter()
            .filter(|e| e.flagged)
            .map(|e| (e.expert, e.class))
            .collect()
    }
}

/// Share of each formula's conjunctions that mention a metadata concept.
pub fn detect_spurious(
    formulas: &[DnfFormula],
    metadata: &[usize],
    threshold: f64,
) -> SpuriousReport {
    let entries = formulas
        .iter()
        .map(|f| {
            let with = f
                .conjunctions
                .iter()
                .filter(|c| c.literals().iter().any(|l| metadata.contains(&l.index)))
                .count();
            let n = f.conjunctions.len();
            let fraction = if n == 0 { 0.0 } else { with as f64 / n as f64 };
            SpuriousEntry {
                expert: f.expert,
                class: f.class,
                conjunctions: n,
                with_metadata: with,
                fraction,
                flagged: n > 0 && fraction >= threshold,
            }
        })
        .collect();
    SpuriousReport { threshold, entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShortcutConfig {
    pub flag_threshold: f64,
}

impl Default for ShortcutConfig {
    fn default() -> Self {
        Self {
            flag_threshold: 0.3,
        }
    }
}

/// Subgroup accuracies and concept status of one side of the fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortcutSide {
    pub cascade_accuracy: f64,
    pub f0_accuracy: f64,
    /// Cascade accuracy per evaluation subgroup.
    pub group_accuracy: Vec<f64>,
    /// Spread between the best and worst subgroup.
    pub gap: f64,
    /// (concept, probe validation score, kept by the filter)
    pub metadata_probes: Vec<(usize, f64, bool)>,
    pub spurious: SpuriousReport,
}

#[derive(Debug, Clone)]
pub struct ShortcutFix {
    pub before: ShortcutSide,
    pub after: ShortcutSide,
    pub biased: Run,
    pub robust: Run,
}

fn group_accuracy(run: &Run, view: &ConceptView, groups: &[usize]) -> Result<Vec<f64>> {
    ensure_dim("subgroup labels", view.len(), groups.len())?;
    let preds = run.moie.predict(&view.concepts, &view.embeddings)?;
    let k = groups.iter().max().map_or(0, |g| g + 1);
    let mut hits = vec![(0usize, 0usize); k];
    for ((p, &g), &y) in preds.iter().zip(groups).zip(&view.labels) {
        hits[g].0 += (p.label == y) as usize;
        hits[g].1 += 1;
    }
    Ok(hits
        .into_iter()
        .filter(|&(_, n)| n > 0)
        .map(|(h, n)| h as f64 / n as f64)
        .collect())
}

fn side(run: &Run, spec: &MetadataSpec, threshold: f64) -> Result<ShortcutSide> {
    let report = coverage_report(&run.moie, &run.f0, &run.test)?;
    let group_accuracy = group_accuracy(run, &run.test, &spec.subgroups)?;
    let hi = group_accuracy
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let lo = group_accuracy.iter().cloned().fold(f64::INFINITY, f64::min);
    let formulas = aggregate_all(&explain_routed(&run.moie, &run.train.concepts)?);
    let metadata_probes = spec
        .concepts
        .iter()
        .map(|&i| {
            (
                i,
                run.bank.scores.get(i).copied().unwrap_or(0.0),
                run.concept_index.contains(&i),
            )
        })
        .collect();
    Ok(ShortcutSide {
        cascade_accuracy: report.cascade_accuracy,
        f0_accuracy: report.f0_accuracy,
        gap: hi - lo,
        group_accuracy,
        metadata_probes,
        spurious: detect_spurious(&formulas, &spec.concepts, threshold),
    })
}

/// Carves the biased blackbox, regresses the metadata out of every split's
/// embeddings with the train fit, retrains the blackbox head and concept
/// bank on the cleaned embeddings, and carves again.
pub fn fix_shortcut(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    spec: &MetadataSpec,
    cfg: &PipelineConfig,
    fix: &ShortcutConfig,
    seed: u64,
) -> Result<ShortcutFix> {
    cfg.validate()?;
    let meta = |d: &Dataset| {
        d.metadata
            .clone()
            .ok_or_else(|| invalid(format!("split {} carries no metadata", d.name)))
    };
    let (mt, mv, ms) = (meta(train)?, meta(val)?, meta(test)?);

    let f0 = fit_blackbox(train, cfg, seed)?;
    let bank = fit_bank(train, val, cfg, seed)?;
    let biased = run_with(train, val, test, f0, bank, cfg, seed)?;
    let before = side(&biased, spec, fix.flag_threshold)?;

    let mdn = MdnFit::fit(&train.embeddings, &mt)?;
    let clean = |d: &Dataset, m: &Matrix| -> Result<Dataset> {
        d.with_embeddings(mdn.apply(&d.embeddings, m)?)
    };
    let (tr, va, te) = (clean(train, &mt)?, clean(val, &mv)?, clean(test, &ms)?);
    let f0 = fit_blackbox(&tr, cfg, seed)?;
    let bank = fit_bank(&tr, &va, cfg, seed)?;
    let robust = run_with(&tr, &va, &te, f0, bank, cfg, seed)?;
    let after = side(&robust, spec, fix.flag_threshold)?;
    Ok(ShortcutFix {
        before,
        after,
        biased,
        robust,
    })
}
