//! Route, interpret, repeat: carve interpretable experts out of a blackbox.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::elen::{DistillConfig, ElenExpert};
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::math;
use crate::numcore::loss::{cross_entropy, kl_to_target};
use crate::numcore::{Activation, DenseNet, Matrix, OptState, Optimizer, Tape};
use crate::selector::{
    self, joint_loss_grad, prior_weights, JointBatch, SelectiveLossCfg, Selector,
};

/// Optimizer knobs shared by every training loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "adam")]
    pub optimizer: Optimizer,
}

fn adam() -> Optimizer {
    Optimizer::adam()
}

impl TrainConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid(format!("{what}.epochs must be positive")));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid(format!("{what}.learning_rate must be positive")));
        }
        if self.batch_size == Some(0) {
            return Err(invalid(format!("{what}.batch_size must be positive")));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid(format!("{what}.weight_decay must be non-negative")));
        }
        Ok(())
    }

    fn state(&self, n: usize, seed: u64) -> OptState {
        OptState::new(self.optimizer, self.learning_rate, n, seed)
            .with_weight_decay(self.weight_decay)
    }
}

/// `f = h ∘ Φ` with Φ the identity over supplied embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blackbox {
    pub head: DenseNet,
    pub iteration: usize,
}

impl Blackbox {
    pub fn num_classes(&self) -> usize {
        self.head.output_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.input_dim()
    }

    pub fn logits(&self, embeddings: &Matrix) -> Result<Matrix> {
        self.head.forward(embeddings)
    }

    pub fn predict(&self, embeddings: &Matrix) -> Result<Vec<usize>> {
        Ok(self
            .logits(embeddings)?
            .iter_rows()
            .map(math::argmax)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlackboxConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for BlackboxConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            train: TrainConfig {
                epochs: 100,
                learning_rate: 0.01,
                batch_size: Some(64),
                // keeps teacher logits in a range the coverage penalty can hold
                weight_decay: 1.5e-3,
                optimizer: Optimizer::adam(),
            },
        }
    }
}

/// Cross-entropy training of `f⁰` on labels.
pub fn train_blackbox(
    embeddings: &Matrix,
    labels: &[usize],
    num_classes: usize,
    cfg: &BlackboxConfig,
    seed: u64,
) -> Result<Blackbox> {
    cfg.train.validate("blackbox.train")?;
    ensure_dim("blackbox labels", embeddings.rows(), labels.len())?;
    if embeddings.rows() == 0 {
        return Err(invalid("cannot train a blackbox on zero rows"));
    }
    if labels.iter().any(|&y| y >= num_classes) {
        return Err(invalid("label out of range"));
    }
    let mut dims = vec![embeddings.cols()];
    dims.extend(&cfg.hidden);
    dims.push(num_classes);
    let mut acts = vec![Activation::Relu; cfg.hidden.len()];
    acts.push(Activation::Identity);
    let mut rng = math::rng_from(seed);
    let mut head = DenseNet::init(&dims, &acts, &mut rng);
    let mut opt = cfg.train.state(head.num_params(), seed);
    let mut params = head.params();
    for epoch in 0..cfg.train.epochs {
        for batch in opt.batches(labels.len(), cfg.train.batch_size, epoch as u64) {
            let x = embeddings.select_rows(&batch);
            let mut tape = Tape::default();
            let logits = head.forward_taped(&x, &mut tape)?;
            let mut d = Matrix::zeros(batch.len(), num_classes);
            let scale = 1.0 / batch.len() as f64;
            for (r, &j) in batch.iter().enumerate() {
                let (_, g) = cross_entropy(logits.row(r), labels[j]);
                for (dv, gv) in d.row_mut(r).iter_mut().zip(g) {
                    *dv = gv * scale;
                }
            }
            let grads = head.backward(&tape, &d)?.flatten();
            opt.step(&mut params, &grads)?;
            head.set_params(&params)?;
        }
    }
    Ok(Blackbox { head, iteration: 0 })
}

/// Rows of one split as seen by the carver: filtered concept values,
/// embeddings and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptView {
    pub concepts: Matrix,
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
}

impl ConceptView {
    pub fn new(concepts: Matrix, embeddings: Matrix, labels: Vec<usize>) -> Result<Self> {
        ensure_dim("view embeddings", concepts.rows(), embeddings.rows())?;
        ensure_dim("view labels", concepts.rows(), labels.len())?;
        if !concepts.is_finite() || !embeddings.is_finite() {
            return Err(Error::NonFinite("concept view"));
        }
        Ok(Self {
            concepts,
            embeddings,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            concepts: self.concepts.select_rows(idx),
            embeddings: self.embeddings.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Logit difference `f^{k−1} − g^k`.
pub fn residual_target(f_prev: &[f64], expert: &[f64]) -> Result<Vec<f64>> {
    ensure_dim("residual target", f_prev.len(), expert.len())?;
    Ok(f_prev.iter().zip(expert).map(|(f, g)| f - g).collect())
}

/// What the next blackbox head is fit to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualTargetMode {
    /// `f^{k−1} − g^k`.
    Difference,
    /// `f^{k−1} − π^k · g^k`: only the expert's selected share is removed.
    Gated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub hidden: usize,
    pub t_lens: f64,
    pub lambda_lens: f64,
    pub selector_hidden: usize,
    pub lambda_s: f64,
    pub loss: SelectiveLossCfg,
    pub train: TrainConfig,
    /// Reseeded attempts after a selector collapse.
    pub max_restarts: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            hidden: 10,
            t_lens: 0.7,
            lambda_lens: 1e-4,
            selector_hidden: 16,
            lambda_s: 32.0,
            loss: SelectiveLossCfg::default(),
            train: TrainConfig {
                epochs: 200,
                learning_rate: 0.01,
                batch_size: Some(64),
                weight_decay: 2e-3,
                optimizer: Optimizer::adam(),
            },
            max_restarts: 3,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.selector_hidden == 0 {
            return Err(invalid(
                "expert.hidden and expert.selector_hidden must be positive",
            ));
        }
        if !(self.t_lens > 0.0) {
            return Err(invalid("expert.t_lens must be positive"));
        }
        if !(self.lambda_lens >= 0.0) {
            return Err(invalid("expert.lambda_lens must be non-negative"));
        }
        if !(self.lambda_s >= 0.0) {
            return Err(invalid("expert.lambda_s must be non-negative"));
        }
        self.loss.validate()?;
        self.train.validate("expert.train")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualConfig {
    pub target: ResidualTargetMode,
    /// Temperature of the matching loss.
    pub t_kd: f64,
    pub train: TrainConfig,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            target: ResidualTargetMode::Gated,
            t_kd: DistillConfig::default().t_kd,
            train: TrainConfig {
                epochs: 40,
                learning_rate: 0.005,
                batch_size: Some(64),
                weight_decay: 0.0,
                optimizer: Optimizer::adam(),
            },
        }
    }
}

impl ResidualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_kd > 0.0) {
            return Err(invalid("residual.t_kd must be positive"));
        }
        self.train.validate("residual.train")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarveSchedule {
    pub taus: Vec<f64>,
    pub coverage_stop: f64,
    pub residual_accuracy_stop: f64,
    pub min_covered: usize,
    /// Defaults to the number of coverage targets.
    pub max_iterations: Option<usize>,
}

impl Default for CarveSchedule {
    fn default() -> Self {
        Self {
            taus: vec![0.2; 6],
            coverage_stop: 0.9,
            residual_accuracy_stop: 0.7,
            min_covered: 20,
            max_iterations: None,
        }
    }
}

impl CarveSchedule {
    pub fn max_iterations(&self) -> usize {
        self.max_iterations
            .unwrap_or(self.taus.len())
            .min(self.taus.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.taus.is_empty() {
            return Err(invalid("schedule.taus must not be empty"));
        }
        if self.taus.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(invalid("schedule.taus must lie in (0, 1]"));
        }
        if self.max_iterations == Some(0) {
            return Err(invalid("schedule.max_iterations must be positive"));
        }
        for (name, v) in [
            ("schedule.coverage_stop", self.coverage_stop),
            (
                "schedule.residual_accuracy_stop",
                self.residual_accuracy_stop,
            ),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CarveConfig {
    pub expert: ExpertConfig,
    pub residual: ResidualConfig,
    pub seed: u64,
}

/// Trained pair of iteration `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub selector: Selector,
    pub expert: ElenExpert,
}

impl Stage {
    /// FNV-1a over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in self
            .selector
            .params()
            .into_iter()
            .chain(self.expert.params())
        {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        math::fnv1a(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    CoverageReached,
    ResidualAccuracy,
    TooFewCovered,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub tau: f64,
    /// Mean routed mass `π^k·Π(1 − π^i)` on the training set.
    pub coverage: f64,
    /// Training rows the cascade hands to this expert.
    pub newly_covered: usize,
    pub cumulative_coverage: f64,
    pub residual_val_accuracy: Option<f64>,
    pub residual_skipped: bool,
    pub attempts: usize,
    pub checksum: u64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoIE {
    pub stages: Vec<Stage>,
    pub residual: Blackbox,
    /// Global ids of the concepts every expert consumes.
    pub concept_index: Vec<usize>,
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
}

/// Which model produced a prediction; experts are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Expert(usize),
    Residual,
}

impl core::fmt::Display for Bucket {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Bucket::Expert(k) => write!(f, "expert_{k}"),
            Bucket::Residual => f.write_str("residual"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub bucket: Bucket,
}

impl MoIE {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Invariant("a MoIE needs at least one expert".into()));
        }
        for s in &self.stages {
            if s.expert.concept_index() != self.concept_index.as_slice() {
                return Err(Error::Invariant(
                    "experts must share the concept index set".into(),
                ));
            }
            ensure_dim(
                "selector concepts",
                self.concept_index.len(),
                s.selector.num_concepts(),
            )?;
        }
        Ok(())
    }

    /// Cascade routing: the first expert whose selector gives `π ≥ 0.5`.
    pub fn route(&self, concepts: &Matrix) -> Result<Vec<Bucket>> {
        let mut out = vec![Bucket::Residual; concepts.rows()];
        let mut open: Vec<usize> = (0..concepts.rows()).collect();
        for (k, s) in self.stages.iter().enumerate() {
            if open.is_empty() {
                break;
            }
            let pi = s.selector.pi(&concepts.select_rows(&open))?;
            let mut still = Vec::with_capacity(open.len());
            for (&j, &p) in open.iter().zip(&pi) {
                if selector::route(p) == selector::Route::Expert {
                    out[j] = Bucket::Expert(k + 1);
                } else {
                    still.push(j);
                }
            }
            open = still;
        }
        Ok(out)
    }

    pub fn predict(&self, concepts: &Matrix, embeddings: &Matrix) -> Result<Vec<Prediction>> {
        ensure_dim("prediction embeddings", concepts.rows(), embeddings.rows())?;
        let buckets = self.route(concepts)?;
        let mut labels = vec![0; concepts.rows()];
        for (k, s) in self.stages.iter().enumerate() {
            let idx: Vec<usize> = (0..buckets.len())
                .filter(|&j| buckets[j] == Bucket::Expert(k + 1))
                .collect();
            if !idx.is_empty() {
                let logits = s.expert.logits(&concepts.select_rows(&idx))?;
                for (&j, row) in idx.iter().zip(logits.iter_rows()) {
                    labels[j] = math::argmax(row);
                }
            }
        }
        let idx: Vec<usize> = (0..buckets.len())
            .filter(|&j| buckets[j] == Bucket::Residual)
            .collect();
        if !idx.is_empty() {
            for (&j, y) in idx
                .iter()
                .zip(self.residual.predict(&embeddings.select_rows(&idx))?)
            {
                labels[j] = y;
            }
        }
        Ok(labels
            .into_iter()
            .zip(buckets)
            .map(|(label, bucket)| Prediction { label, bucket })
            .collect())
    }
}

/// Single-sample cascade prediction.
pub fn moie_predict(moie: &MoIE, concepts: &[f64], embedding: &[f64]) -> Result<Prediction> {
    let c = Matrix::from_vec(1, concepts.len(), concepts.to_vec())?;
    let e = Matrix::from_vec(1, embedding.len(), embedding.to_vec())?;
    Ok(moie.predict(&c, &e)?[0])
}

/// Result of one expert fit.
#[derive(Debug, Clone)]
pub struct ExpertFit {
    pub selector: Selector,
    pub expert: ElenExpert,
    pub coverage: f64,
    pub attempts: usize,
}

/// Jointly trains selector `k` and its expert against `f_prev`, with the
/// earlier selectors frozen. A collapsed selector is retried with a new seed.
#[allow(clippy::too_many_arguments)]
pub fn fit_expert_iteration(
    f_prev: &Blackbox,
    train: &ConceptView,
    frozen: &[Selector],
    tau: f64,
    concept_index: &[usize],
    class_names: &[String],
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<ExpertFit> {
    cfg.validate()?;
    ensure_dim("concept index", train.concepts.cols(), concept_index.len())?;
    let teacher = f_prev.logits(&train.embeddings)?;
    let prior = prior_weights(frozen, &train.concepts)?;
    let mut last = Error::CoverageCollapse { coverage: 0.0 };
    for attempt in 0..=cfg.max_restarts {
        let s = math::mix_seed(seed, attempt as u64);
        match fit_once(
            train,
            &teacher,
            &prior,
            tau,
            concept_index,
            class_names,
            cfg,
            s,
        ) {
            Ok((selector, expert, coverage)) => {
                return Ok(ExpertFit {
                    selector,
                    expert,
                    coverage,
                    attempts: attempt + 1,
                })
            }
            Err(e @ Error::CoverageCollapse { .. }) => {
                log::warn!("selector collapsed on attempt {}; reseeding", attempt + 1);
                last = e;
            }
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

#[allow(clippy::too_many_arguments)]
fn fit_once(
    train: &ConceptView,
    teacher: &Matrix,
    prior: &[f64],
    tau: f64,
    concept_index: &[usize],
    class_names: &[String],
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<(Selector, ElenExpert, f64)> {
    let mut rng = math::rng_from(seed);
    let mut expert = ElenExpert::new(
        concept_index.to_vec(),
        class_names.to_vec(),
        cfg.hidden,
        cfg.t_lens,
        cfg.lambda_lens,
        &mut rng,
    )?;
    let mut sel = Selector::new(
        concept_index.len(),
        cfg.selector_hidden,
        tau,
        cfg.lambda_s,
        &mut rng,
    )?;
    let ne = expert.num_params();
    let mut params = expert.params();
    params.extend(sel.params());
    let mut opt = cfg.train.state(params.len(), seed);
    for epoch in 0..cfg.train.epochs {
        let mut last = None;
        for batch in opt.batches(train.len(), cfg.train.batch_size, epoch as u64) {
            let concepts = train.concepts.select_rows(&batch);
            let teach = teacher.select_rows(&batch);
            let labels: Vec<usize> = batch.iter().map(|&j| train.labels[j]).collect();
            let pw: Vec<f64> = batch.iter().map(|&j| prior[j]).collect();
            let jb = JointBatch {
                concepts: &concepts,
                labels: &labels,
                teacher: &teach,
                prior: &pw,
            };
            // a batch routed nowhere carries no selective signal; skip it and
            // judge collapse on the full set afterwards
            let (loss, mut ge, gs) = match joint_loss_grad(&expert, &sel, &jb, &cfg.loss) {
                Ok(out) => out,
                Err(Error::CoverageCollapse { .. }) => continue,
                Err(e) => return Err(e),
            };
            last = Some(loss);
            ge.extend(gs);
            opt.step(&mut params, &ge)?;
            expert.set_params(&params[..ne])?;
            sel.set_params(&params[ne..])?;
        }
        if let Some(l) = last {
            log::debug!(
                "epoch {epoch}: loss {:.4} risk {:.4} penalty {:.4} aux {:.4} coverage {:.3}",
                l.total,
                l.selective_risk,
                l.penalty,
                l.aux,
                l.coverage
            );
        }
    }
    let routed: Vec<f64> = sel
        .pi(&train.concepts)?
        .iter()
        .zip(prior)
        .map(|(p, w)| p * w)
        .collect();
    let coverage = selector::coverage(&routed)?;
    if coverage < selector::MIN_COVERAGE {
        return Err(Error::CoverageCollapse { coverage });
    }
    Ok((sel, expert, coverage))
}

/// Outcome of a residual fit.
#[derive(Debug, Clone)]
pub struct ResidualFit {
    pub blackbox: Blackbox,
    pub skipped: bool,
}

/// Residual matching targets and the mass `Π_{i≤k}(1 − π^i)` per row.
pub fn residual_targets(
    f_prev: &Blackbox,
    expert: &ElenExpert,
    selectors: &[Selector],
    train: &ConceptView,
    mode: ResidualTargetMode,
) -> Result<(Matrix, Vec<f64>)> {
    let current = selectors
        .last()
        .ok_or_else(|| invalid("residual fit needs the current selector"))?;
    let f = f_prev.logits(&train.embeddings)?;
    let g = expert.logits(&train.concepts)?;
    let pi = current.pi(&train.concepts)?;
    let mut target = Matrix::zeros(train.len(), f.cols());
    for j in 0..train.len() {
        let scale = match mode {
            ResidualTargetMode::Difference => 1.0,
            ResidualTargetMode::Gated => pi[j],
        };
        let gj: Vec<f64> = g.row(j).iter().map(|v| scale * v).collect();
        target
            .row_mut(j)
            .copy_from_slice(&residual_target(f.row(j), &gj)?);
    }
    let weights = prior_weights(selectors, &train.concepts)?;
    Ok((target, weights))
}

/// Mean weighted `T²·KL(softmax(r/T) ‖ softmax(h(x)/T))` and its gradient
/// with respect to the head's logits.
pub fn residual_loss_grad(
    logits: &Matrix,
    targets: &Matrix,
    weights: &[f64],
    t: f64,
) -> Result<(f64, Matrix)> {
    ensure_dim("residual logits rows", targets.rows(), logits.rows())?;
    ensure_dim("residual logits cols", targets.cols(), logits.cols())?;
    ensure_dim("residual weights", targets.rows(), weights.len())?;
    let m = logits.rows().max(1) as f64;
    let mut loss = 0.0;
    let mut d = Matrix::zeros(logits.rows(), logits.cols());
    for j in 0..logits.rows() {
        let (kl, g) = kl_to_target(targets.row(j), logits.row(j), t);
        loss += weights[j] * t * t * kl / m;
        for (dv, gv) in d.row_mut(j).iter_mut().zip(g) {
            *dv = weights[j] * t * t * gv / m;
        }
    }
    Ok((loss, d))
}

/// Fine-tunes a copy of `f_prev`'s head on the residual of iteration `k`.
pub fn fit_residual(
    f_prev: &Blackbox,
    expert: &ElenExpert,
    selectors: &[Selector],
    train: &ConceptView,
    cfg: &ResidualConfig,
    seed: u64,
) -> Result<ResidualFit> {
    cfg.validate()?;
    let (targets, weights) = residual_targets(f_prev, expert, selectors, train, cfg.target)?;
    let iteration = selectors.len();
    if math::mean(&weights) < selector::MIN_COVERAGE {
        log::warn!("iteration {iteration}: no residual mass left, keeping the previous blackbox");
        return Ok(ResidualFit {
            blackbox: Blackbox {
                head: f_prev.head.clone(),
                iteration,
            },
            skipped: true,
        });
    }
    let mut head = f_prev.head.clone();
    let mut params = head.params();
    let mut opt = cfg.train.state(params.len(), seed);
    for epoch in 0..cfg.train.epochs {
        for batch in opt.batches(train.len(), cfg.train.batch_size, epoch as u64) {
            let x = train.embeddings.select_rows(&batch);
            let r = targets.select_rows(&batch);
            let w: Vec<f64> = batch.iter().map(|&j| weights[j]).collect();
            let mut tape = Tape::default();
            let logits = head.forward_taped(&x, &mut tape)?;
            let (_, d) = residual_loss_grad(&logits, &r, &w, cfg.t_kd)?;
            let grads = head.backward(&tape, &d)?.flatten();
            opt.step(&mut params, &grads)?;
            head.set_params(&params)?;
        }
    }
    Ok(ResidualFit {
        blackbox: Blackbox { head, iteration },
        skipped: false,
    })
}

fn accuracy_on(pred: &[usize], labels: &[usize]) -> Option<f64> {
    if pred.is_empty() {
        return None;
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Some(hits as f64 / pred.len() as f64)
}

/// Runs the full carving loop.
pub fn carve(
    f0: &Blackbox,
    train: &ConceptView,
    val: &ConceptView,
    concept_index: &[usize],
    class_names: &[String],
    schedule: &CarveSchedule,
    cfg: &CarveConfig,
) -> Result<MoIE> {
    schedule.validate()?;
    cfg.expert.validate()?;
    cfg.residual.validate()?;
    if concept_index.is_empty() {
        return Err(Error::NoUsableConcepts);
    }
    if train.is_empty() {
        return Err(invalid("cannot carve on an empty training set"));
    }
    ensure_dim("class names", f0.num_classes(), class_names.len())?;

    let mut stages: Vec<Stage> = Vec::new();
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut current = Blackbox {
        head: f0.head.clone(),
        iteration: 0,
    };
    let mut covered = vec![false; train.len()];
    let mut stop = StopReason::MaxIterations;
    let max_iter = schedule.max_iterations();

    for k in 1..=max_iter {
        let tau = schedule.taus[k - 1];
        let frozen: Vec<Selector> = stages.iter().map(|s| s.selector.clone()).collect();
        let fit = fit_expert_iteration(
            &current,
            train,
            &frozen,
            tau,
            concept_index,
            class_names,
            &cfg.expert,
            math::mix_seed(cfg.seed, 2 * k as u64),
        )?;
        let pi = fit.selector.pi(&train.concepts)?;
        let newly: Vec<usize> = (0..train.len())
            .filter(|&j| !covered[j] && selector::route(pi[j]) == selector::Route::Expert)
            .collect();
        let stage = Stage {
            selector: fit.selector,
            expert: fit.expert,
        };
        let checksum = stage.checksum();
        log::info!(
            "iteration {k}: coverage {:.3}, newly covered {} of {}",
            fit.coverage,
            newly.len(),
            train.len()
        );
        let mut record = IterationRecord {
            iteration: k,
            tau,
            coverage: fit.coverage,
            newly_covered: newly.len(),
            cumulative_coverage: 0.0,
            residual_val_accuracy: None,
            residual_skipped: false,
            attempts: fit.attempts,
            checksum,
            kept: true,
        };
        if newly.len() < schedule.min_covered && k > 1 {
            log::info!("iteration {k}: expert covers too few new samples, dropping it");
            record.kept = false;
            record.cumulative_coverage =
                covered.iter().filter(|&&c| c).count() as f64 / train.len() as f64;
            records.push(record);
            stop = StopReason::TooFewCovered;
            break;
        }
        for &j in &newly {
            covered[j] = true;
        }
        stages.push(stage);
        let selectors: Vec<Selector> = stages.iter().map(|s| s.selector.clone()).collect();
        let expert = &stages.last().expect("just pushed").expert;
        let res = fit_residual(
            &current,
            expert,
            &selectors,
            train,
            &cfg.residual,
            math::mix_seed(cfg.seed, 2 * k as u64 + 1),
        )?;
        current = res.blackbox;
        record.residual_skipped = res.skipped;
        record.cumulative_coverage =
            covered.iter().filter(|&&c| c).count() as f64 / train.len() as f64;

        let partial = MoIE {
            stages: stages.clone(),
            residual: current.clone(),
            concept_index: concept_index.to_vec(),
            records: Vec::new(),
            stop,
        };
        if !val.is_empty() {
            let routes = partial.route(&val.concepts)?;
            let idx: Vec<usize> = (0..val.len())
                .filter(|&j| routes[j] == Bucket::Residual)
                .collect();
            let pred = current.predict(&val.embeddings.select_rows(&idx))?;
            let labels: Vec<usize> = idx.iter().map(|&j| val.labels[j]).collect();
            record.residual_val_accuracy = accuracy_on(&pred, &labels);
        }
        let reached = record.cumulative_coverage >= schedule.coverage_stop;
        let weak = record
            .residual_val_accuracy
            .is_some_and(|a| a < schedule.residual_accuracy_stop);
        let few = newly.len() < schedule.min_covered;
        records.push(record);
        if reached {
            stop = StopReason::CoverageReached;
            break;
        }
        if weak {
            stop = StopReason::ResidualAccuracy;
            break;
        }
        if few {
            stop = StopReason::TooFewCovered;
            break;
        }
    }

    let moie = MoIE {
        stages,
        residual: current,
        concept_index: concept_index.to_vec(),
        records,
        stop,
    };
    moie.validate()?;
    Ok(moie)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: Bucket,
    pub count: usize,
    pub coverage: f64,
    pub accuracy: Option<f64>,
    pub proportional_accuracy: f64,
    /// Accuracy of the original blackbox on this bucket's samples.
    pub f0_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub samples: usize,
    pub cascade_accuracy: f64,
    pub f0_accuracy: f64,
    pub buckets: Vec<BucketReport>,
}

/// Per-route statistics; bucket proportional accuracies sum to the cascade
/// accuracy.
pub fn coverage_report(moie: &MoIE, f0: &Blackbox, view: &ConceptView) -> Result<CoverageReport> {
    if view.is_empty() {
        return Err(invalid("coverage report over an empty set"));
    }
    let preds = moie.predict(&view.concepts, &view.embeddings)?;
    let f0_pred = f0.predict(&view.embeddings)?;
    let n = view.len() as f64;
    let mut buckets: Vec<Bucket> = (1..=moie.len()).map(Bucket::Expert).collect();
    buckets.push(Bucket::Residual);
    let reports = buckets
        .into_iter()
        .map(|b| {
            let idx: Vec<usize> = (0..view.len()).filter(|&j| preds[j].bucket == b).collect();
            let labels: Vec<usize> = idx.iter().map(|&j| view.labels[j]).collect();
            let mine: Vec<usize> = idx.iter().map(|&j| preds[j].label).collect();
            let theirs: Vec<usize> = idx.iter().map(|&j| f0_pred[j]).collect();
            let accuracy = accuracy_on(&mine, &labels);
            let coverage = idx.len() as f64 / n;
            BucketReport {
                bucket: b,
                count: idx.len(),
                coverage,
                accuracy,
                proportional_accuracy: coverage * accuracy.unwrap_or(0.0),
                f0_accuracy: accuracy_on(&theirs, &labels),
            }
        })
        .collect();
    let cascade: Vec<usize> = preds.iter().map(|p| p.label).collect();
    Ok(CoverageReport {
        samples: view.len(),
        cascade_accuracy: accuracy_on(&cascade, &view.labels).unwrap_or(0.0),
        f0_accuracy: accuracy_on(&f0_pred, &view.labels).unwrap_or(0.0),
        buckets: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, Dense};
    use rand::Rng;

    fn const_selector(n: usize, p: f64) -> Selector {
        let z = math::ln(p / (1.0 - p));
        let gate = DenseNet::new(vec![
            Dense {
                weight: Matrix::zeros(1, n),
                bias: vec![0.0],
                activation: Activation::Relu,
            },
            Dense {
                weight: Matrix::zeros(1, 1),
                bias: vec![z],
                activation: Activation::Sigmoid,
            },
        ])
        .unwrap();
        Selector::from_parts(gate, 0.2, 32.0).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class_{i}")).collect()
    }

    fn toy_moie(pis: &[f64]) -> MoIE {
        let mut rng = math::rng_from(0);
        let stages = pis
            .iter()
            .map(|&p| Stage {
                selector: const_selector(2, p),
                expert: ElenExpert::new(vec![0, 1], names(2), 3, 0.7, 0.0, &mut rng).unwrap(),
            })
            .collect();
        MoIE {
            stages,
            residual: Blackbox {
                head: DenseNet::init(&[2, 2], &[Activation::Identity], &mut rng),
                iteration: pis.len(),
            },
            concept_index: vec![0, 1],
            records: Vec::new(),
            stop: StopReason::MaxIterations,
        }
    }

    #[test]
    fn residual_target_examples() {
        assert_eq!(
            residual_target(&[2.0, 0.0], &[0.5, 0.0]).unwrap(),
            vec![1.5, 0.0]
        );
        assert_eq!(
            residual_target(&[1.0, -1.0], &[1.0, -1.0]).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            residual_target(&[3.0, 1.0], &[0.0, 0.0]).unwrap(),
            vec![3.0, 1.0]
        );
    }

    #[test]
    fn cascade_routing_examples() {
        let x = Matrix::from_rows(&[[0.3, 0.7]]).unwrap();
        let e = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert_eq!(
            toy_moie(&[0.9, 0.9]).predict(&x, &e).unwrap()[0].bucket,
            Bucket::Expert(1)
        );
        assert_eq!(
            toy_moie(&[0.2, 0.3]).predict(&x, &e).unwrap()[0].bucket,
            Bucket::Residual
        );
        assert_eq!(
            toy_moie(&[0.2, 0.5]).route(&x).unwrap()[0],
            Bucket::Expert(2)
        );
        let p = moie_predict(&toy_moie(&[0.2, 0.3]), &[0.3, 0.7], &[1.0, 0.0]).unwrap();
        assert_eq!(p.bucket, Bucket::Residual);
    }

    #[test]
    fn report_partitions_and_sums() {
        let moie = toy_moie(&[0.6]);
        let mut rng = math::rng_from(1);
        let view = ConceptView::new(
            Matrix::from_vec(20, 2, (0..40).map(|_| rng.gen()).collect()).unwrap(),
            Matrix::from_vec(20, 2, (0..40).map(|_| rng.gen()).collect()).unwrap(),
            (0..20).map(|_| rng.gen_range(0..2)).collect(),
        )
        .unwrap();
        let r = coverage_report(&moie, &moie.residual, &view).unwrap();
        let total: usize = r.buckets.iter().map(|b| b.count).sum();
        assert_eq!(total, 20);
        let sum: f64 = r.buckets.iter().map(|b| b.proportional_accuracy).sum();
        assert!((sum - r.cascade_accuracy).abs() < 1e-12);
        let empty = r
            .buckets
            .iter()
            .find(|b| b.bucket == Bucket::Residual)
            .unwrap();
        assert_eq!((empty.count, empty.accuracy), (0, None));
    }

    #[test]
    fn residual_gradient_matches_finite_differences() {
        let mut rng = math::rng_from(8);
        let head = DenseNet::init(
            &[4, 6, 3],
            &[Activation::Relu, Activation::Identity],
            &mut rng,
        );
        let x = Matrix::from_vec(5, 4, (0..20).map(|_| math::normal(&mut rng)).collect()).unwrap();
        let r = Matrix::from_vec(5, 3, (0..15).map(|_| math::normal(&mut rng)).collect()).unwrap();
        let w: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
        let objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut h = head.clone();
            h.set_params(p)?;
            let mut tape = Tape::default();
            let logits = h.forward_taped(&x, &mut tape)?;
            let (l, d) = residual_loss_grad(&logits, &r, &w, 2.0)?;
            Ok((l, h.backward(&tape, &d)?.flatten()))
        };
        let res = grad_check(objective, &head.params(), 1e-3, 1e-4).unwrap();
        assert!(res.passed, "{}", res.max_relative_error);
    }

    #[test]
    fn schedule_validation() {
        assert!(CarveSchedule::default().validate().is_ok());
        let bad = CarveSchedule {
            taus: vec![0.2, 1.5],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(CarveSchedule::default().max_iterations(), 6);
    }
}
