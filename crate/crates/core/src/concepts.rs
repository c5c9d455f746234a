//! Concept map from embeddings: supervised probes and activation directions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::fol::{binarize, BINARIZE_THRESHOLD};
use crate::math;
use crate::numcore::{dot, norm_sq, Matrix, OptState, Optimizer};

/// Threshold below which a concept is too rare (or too common) for accuracy
/// to be meaningful, so AUROC is reported instead.
pub const AUROC_PREVALENCE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptMode {
    /// `sigmoid(⟨x, q⟩ + b)`, values in `[0, 1]`.
    Probe,
    /// `⟨x, q⟩ / ‖q‖²`, unbounded.
    Cav,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBank {
    pub names: Vec<String>,
    pub directions: Matrix,
    pub biases: Vec<f64>,
    pub scores: Vec<f64>,
    /// Constant in training; scored 0.5.
    pub degenerate: Vec<bool>,
    pub mode: ConceptMode,
}

impl ConceptBank {
    pub fn validate(&self) -> Result<()> {
        let n = self.names.len();
        ensure_dim("bank directions", n, self.directions.rows())?;
        ensure_dim("bank biases", n, self.biases.len())?;
        ensure_dim("bank scores", n, self.scores.len())?;
        ensure_dim("bank degenerate flags", n, self.degenerate.len())?;
        if let Some(i) = (0..n).find(|&i| norm_sq(self.directions.row(i)) == 0.0) {
            return Err(Error::Invariant(format!(
                "concept {} has a zero direction",
                self.names[i]
            )));
        }
        if self.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(invalid("validation scores must lie in [0, 1]"));
        }
        let mut names: Vec<&String> = self.names.iter().collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("concept names must be unique"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.directions.cols()
    }

    /// Concept values for a batch of embeddings, per the bank's mode.
    pub fn predict(&self, embeddings: &Matrix) -> Result<Matrix> {
        ensure_dim(
            "bank embedding dim",
            self.embedding_dim(),
            embeddings.cols(),
        )?;
        let mut out = embeddings.matmul_transposed(&self.directions)?;
        for r in 0..out.rows() {
            for (i, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = match self.mode {
                    ConceptMode::Probe => math::sigmoid(*v + self.biases[i]),
                    ConceptMode::Cav => *v / norm_sq(self.directions.row(i)),
                };
            }
        }
        Ok(out)
    }
}

/// `c_i = ⟨x, qⁱ⟩ / ‖qⁱ‖²` for every concept.
pub fn cav_score(embedding: &[f64], bank: &ConceptBank) -> Result<Vec<f64>> {
    ensure_dim("cav embedding", bank.embedding_dim(), embedding.len())?;
    (0..bank.len())
        .map(|i| {
            let q = bank.directions.row(i);
            let n = norm_sq(q);
            if n == 0.0 {
                Err(Error::Invariant(format!(
                    "concept {} has a zero direction",
                    bank.names[i]
                )))
            } else {
                Ok(dot(embedding, q) / n)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.05,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// One logistic probe per concept on binarized annotations, scored on `val`.
pub fn train_probes(train: &Dataset, val: &Dataset, cfg: &ProbeConfig) -> Result<ConceptBank> {
    check_pair(train, val)?;
    let n = train.num_concepts();
    let l = train.embedding_dim();
    let mut directions = Matrix::zeros(n, l);
    let mut biases = vec![0.0; n];
    let mut scores = vec![0.0; n];
    let mut degenerate = vec![false; n];
    for i in 0..n {
        let name = &train.concept_names[i];
        let targets = binarize(&train.concepts.column(i), BINARIZE_THRESHOLD);
        let seed = math::mix_seed(cfg.seed, math::fnv1a(name.as_bytes()));
        let (w, b) = fit_logistic(&train.embeddings, &targets, cfg, seed)?;
        directions.row_mut(i).copy_from_slice(&w);
        biases[i] = b;
        if targets.iter().all(|&t| t == targets[0]) {
            log::warn!("concept {name} is constant in training data");
            degenerate[i] = true;
            scores[i] = 0.5;
            continue;
        }
        let val_scores: Vec<f64> = val
            .embeddings
            .iter_rows()
            .map(|x| math::sigmoid(dot(x, &w) + b))
            .collect();
        let truth = binarize(&val.concepts.column(i), BINARIZE_THRESHOLD);
        scores[i] = validation_score(&val_scores, &truth, 0.5);
    }
    let bank = ConceptBank {
        names: train.concept_names.clone(),
        directions,
        biases,
        scores,
        degenerate,
        mode: ConceptMode::Probe,
    };
    bank.validate()?;
    Ok(bank)
}

fn check_pair(train: &Dataset, val: &Dataset) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(invalid("probe training needs non-empty train and val sets"));
    }
    ensure_dim(
        "val embedding dim",
        train.embedding_dim(),
        val.embedding_dim(),
    )?;
    ensure_dim(
        "val concept count",
        train.num_concepts(),
        val.num_concepts(),
    )?;
    if train.concept_names != val.concept_names {
        return Err(invalid("train and val concept names differ"));
    }
    Ok(())
}

fn fit_logistic(
    x: &Matrix,
    targets: &[bool],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let l = x.cols();
    let m = x.rows() as f64;
    let mut rng = math::rng_from(seed);
    let mut params: Vec<f64> = (0..l).map(|_| 0.01 * math::normal(&mut rng)).collect();
    params.push(0.0);
    let mut opt = OptState::new(Optimizer::adam(), cfg.learning_rate, l + 1, seed);
    let mut grad = vec![0.0; l + 1];
    for _ in 0..cfg.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (row, &t) in x.iter_rows().zip(targets) {
            let z = dot(row, &params[..l]) + params[l];
            let d = (math::sigmoid(z) - f64::from(u8::from(t))) / m;
            for (g, &v) in grad[..l].iter_mut().zip(row) {
                *g += d * v;
            }
            grad[l] += d;
        }
        for (g, &p) in grad[..l].iter_mut().zip(&params[..l]) {
            *g += 2.0 * cfg.l2 * p;
        }
        opt.step(&mut params, &grad)?;
    }
    let b = params.pop().expect("bias slot");
    Ok((params, b))
}

/// Accuracy of `scores > threshold` when both outcomes have prevalence of at
/// least 0.2, AUROC otherwise. A single-outcome validation set scores 0.5.
pub fn validation_score(scores: &[f64], truth: &[bool], threshold: f64) -> f64 {
    let pos = truth.iter().filter(|&&t| t).count();
    if pos == 0 || pos == truth.len() {
        return 0.5;
    }
    let prevalence = pos as f64 / truth.len() as f64;
    if prevalence.min(1.0 - prevalence) < AUROC_PREVALENCE {
        auroc(scores, truth).unwrap_or(0.5)
    } else {
        let hits = scores
            .iter()
            .zip(truth)
            .filter(|(&s, &t)| (s > threshold) == t)
            .count();
        hits as f64 / truth.len() as f64
    }
}

/// Area under the ROC curve with ties counted half (Mann-Whitney).
pub fn auroc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    ensure_dim("auroc inputs", scores.len(), truth.len())?;
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedScore("auroc needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if truth[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CavConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for CavConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.05,
            l2: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CavDirection {
    pub direction: Vec<f64>,
    pub bias: f64,
    /// Mean hinge loss on the training points at the end of training.
    pub hinge_loss: f64,
}

/// Linear max-margin separator: mean hinge loss plus `l2 · ‖w‖²`.
pub fn cav_train(pos: &Matrix, neg: &Matrix, cfg: &CavConfig) -> Result<CavDirection> {
    if pos.rows() == 0 || neg.rows() == 0 {
        return Err(invalid(
            "activation directions need positive and negative examples",
        ));
    }
    ensure_dim("cav example dims", pos.cols(), neg.cols())?;
    let l = pos.cols();
    let m = (pos.rows() + neg.rows()) as f64;
    let mut rng = math::rng_from(cfg.seed);
    let mut params: Vec<f64> = (0..l).map(|_| 0.01 * math::normal(&mut rng)).collect();
    params.push(0.0);
    let mut opt = OptState::new(Optimizer::adam(), cfg.learning_rate, l + 1, cfg.seed);
    let mut grad = vec![0.0; l + 1];
    let hinge = |p: &[f64]| -> f64 {
        let side = |x: &Matrix, y: f64| -> f64 {
            x.iter_rows()
                .map(|r| (1.0 - y * (dot(r, &p[..l]) + p[l])).max(0.0))
                .sum()
        };
        (side(pos, 1.0) + side(neg, -1.0)) / m
    };
    for _ in 0..cfg.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, y) in [(pos, 1.0), (neg, -1.0)] {
            for r in x.iter_rows() {
                if y * (dot(r, &params[..l]) + params[l]) < 1.0 {
                    for (g, &v) in grad[..l].iter_mut().zip(r) {
                        *g -= y * v / m;
                    }
                    grad[l] -= y / m;
                }
            }
        }
        for (g, &p) in grad[..l].iter_mut().zip(&params[..l]) {
            *g += 2.0 * cfg.l2 * p;
        }
        opt.step(&mut params, &grad)?;
    }
    let hinge_loss = hinge(&params);
    let bias = params.pop().expect("bias slot");
    Ok(CavDirection {
        direction: params,
        bias,
        hinge_loss,
    })
}

/// Activation-direction bank: one separator per concept on binarized
/// annotations, scored by `⟨x, q⟩ + b > 0` on `val`.
pub fn train_cav_bank(train: &Dataset, val: &Dataset, cfg: &CavConfig) -> Result<ConceptBank> {
    check_pair(train, val)?;
    let n = train.num_concepts();
    let l = train.embedding_dim();
    let mut directions = Matrix::zeros(n, l);
    let mut biases = vec![0.0; n];
    let mut scores = vec![0.5; n];
    let mut degenerate = vec![false; n];
    for i in 0..n {
        let name = &train.concept_names[i];
        let targets = binarize(&train.concepts.column(i), BINARIZE_THRESHOLD);
        let pos: Vec<usize> = (0..train.len()).filter(|&j| targets[j]).collect();
        let neg: Vec<usize> = (0..train.len()).filter(|&j| !targets[j]).collect();
        if pos.is_empty() || neg.is_empty() {
            log::warn!("concept {name} is constant in training data");
            degenerate[i] = true;
            directions.set(i, 0, 1.0);
            continue;
        }
        let c = CavConfig {
            seed: math::mix_seed(cfg.seed, math::fnv1a(name.as_bytes())),
            ..*cfg
        };
        let dir = cav_train(
            &train.embeddings.select_rows(&pos),
            &train.embeddings.select_rows(&neg),
            &c,
        )?;
        let val_scores: Vec<f64> = val
            .embeddings
            .iter_rows()
            .map(|x| dot(x, &dir.direction) + dir.bias)
            .collect();
        let truth = binarize(&val.concepts.column(i), BINARIZE_THRESHOLD);
        scores[i] = validation_score(&val_scores, &truth, 0.0);
        directions.row_mut(i).copy_from_slice(&dir.direction);
        biases[i] = dir.bias;
    }
    let bank = ConceptBank {
        names: train.concept_names.clone(),
        directions,
        biases,
        scores,
        degenerate,
        mode: ConceptMode::Cav,
    };
    bank.validate()?;
    Ok(bank)
}

/// Concepts whose validation score strictly exceeds `threshold`.
pub fn filter_concepts(bank: &ConceptBank, threshold: f64) -> Result<Vec<usize>> {
    let keep: Vec<usize> = (0..bank.len())
        .filter(|&i| !bank.degenerate[i] && bank.scores[i] > threshold)
        .collect();
    if keep.is_empty() {
        Err(Error::NoUsableConcepts)
    } else {
        Ok(keep)
    }
}
