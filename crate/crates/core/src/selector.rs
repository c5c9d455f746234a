//! Gating network and the coverage-constrained training objective.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::elen::{distill_loss_grad, DistillConfig, ElenExpert, ExpertTape};
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::math;
use crate::numcore::{Activation, DenseNet, Matrix, Tape};

/// Below this coverage the selective risk is undefined.
pub const MIN_COVERAGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SelectorRepr", into = "SelectorRepr")]
pub struct Selector {
    gate: DenseNet,
    tau: f64,
    lambda_s: f64,
}

#[derive(Serialize, Deserialize)]
struct SelectorRepr {
    gate: DenseNet,
    tau: f64,
    lambda_s: f64,
}

impl TryFrom<SelectorRepr> for Selector {
    type Error = Error;
    fn try_from(r: SelectorRepr) -> Result<Self> {
        Selector::from_parts(r.gate, r.tau, r.lambda_s)
    }
}

impl From<Selector> for SelectorRepr {
    fn from(s: Selector) -> Self {
        SelectorRepr {
            gate: s.gate,
            tau: s.tau,
            lambda_s: s.lambda_s,
        }
    }
}

impl Selector {
    pub fn new<R: Rng + ?Sized>(
        num_concepts: usize,
        hidden: usize,
        tau: f64,
        lambda_s: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let gate = DenseNet::init(
            &[num_concepts, hidden, 1],
            &[Activation::Relu, Activation::Sigmoid],
            rng,
        );
        Self::from_parts(gate, tau, lambda_s)
    }

    pub fn from_parts(gate: DenseNet, tau: f64, lambda_s: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(invalid("target coverage must lie in (0, 1]"));
        }
        if !(lambda_s >= 0.0) || !lambda_s.is_finite() {
            return Err(invalid("lambda_s must be finite and non-negative"));
        }
        ensure_dim("selector output", 1, gate.output_dim())?;
        if gate.layers().last().map(|l| l.activation) != Some(Activation::Sigmoid) {
            return Err(invalid("selector gate must end in a sigmoid"));
        }
        Ok(Self {
            gate,
            tau,
            lambda_s,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn lambda_s(&self) -> f64 {
        self.lambda_s
    }

    pub fn gate(&self) -> &DenseNet {
        &self.gate
    }

    pub fn num_concepts(&self) -> usize {
        self.gate.input_dim()
    }

    /// Selection probabilities for a batch of concept vectors.
    pub fn pi(&self, concepts: &Matrix) -> Result<Vec<f64>> {
        Ok(self.gate.forward(concepts)?.into_vec())
    }

    pub fn pi_row(&self, concepts: &[f64]) -> Result<f64> {
        Ok(self.gate.forward_row(concepts)?[0])
    }

    pub fn num_params(&self) -> usize {
        self.gate.num_params()
    }

    pub fn params(&self) -> Vec<f64> {
        self.gate.params()
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<usize> {
        self.gate.set_params(src)
    }
}

/// Mean selection probability.
pub fn coverage(pi: &[f64]) -> Result<f64> {
    if pi.is_empty() {
        return Err(invalid("coverage of an empty batch"));
    }
    Ok(math::mean(pi))
}

/// `λ_s · max(0, τ − ζ)²`.
pub fn coverage_penalty(tau: f64, zeta: f64, lambda_s: f64) -> f64 {
    let gap = (tau - zeta).max(0.0);
    lambda_s * gap * gap
}

/// Probability mass that reaches expert `k` and is taken by it.
pub fn routing_weight(pi_history: &[f64], pi_k: f64) -> f64 {
    pi_k * residual_weight(pi_history)
}

/// Probability mass that passes every selector in `pi_history`.
pub fn residual_weight(pi_history: &[f64]) -> f64 {
    pi_history.iter().map(|p| 1.0 - p).product()
}

/// `mean(weighted_losses) / coverage(pi)`.
pub fn selective_risk(weighted_losses: &[f64], pi: &[f64]) -> Result<f64> {
    ensure_dim("selective risk inputs", weighted_losses.len(), pi.len())?;
    let zeta = coverage(pi)?;
    if zeta < MIN_COVERAGE {
        return Err(Error::CoverageCollapse { coverage: zeta });
    }
    Ok(math::mean(weighted_losses) / zeta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Expert,
    Residual,
}

/// Hard routing: the expert takes the sample iff `π ≥ 0.5`.
pub fn route(pi: f64) -> Route {
    if pi >= 0.5 {
        Route::Expert
    } else {
        Route::Residual
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectiveLossCfg {
    /// Weight of the selective term; the auxiliary term gets `1 − alpha_mix`.
    #[serde(default = "default_alpha_mix")]
    pub alpha_mix: f64,
    #[serde(default)]
    pub distill: DistillConfig,
}

fn default_alpha_mix() -> f64 {
    0.5
}

impl Default for SelectiveLossCfg {
    fn default() -> Self {
        Self {
            alpha_mix: default_alpha_mix(),
            distill: DistillConfig::default(),
        }
    }
}

impl SelectiveLossCfg {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_mix) {
            return Err(invalid("alpha_mix must lie in [0, 1]"));
        }
        self.distill.validate()
    }
}

/// Training batch for one carving iteration. `prior` holds the mass
/// `Π(1 − π^i)` left by the frozen earlier selectors.
#[derive(Debug, Clone, Copy)]
pub struct JointBatch<'a> {
    pub concepts: &'a Matrix,
    pub labels: &'a [usize],
    pub teacher: &'a Matrix,
    pub prior: &'a [f64],
}

impl JointBatch<'_> {
    fn check(&self, expert: &ElenExpert) -> Result<()> {
        let m = self.concepts.rows();
        if m == 0 {
            return Err(invalid("empty training batch"));
        }
        ensure_dim("batch labels", m, self.labels.len())?;
        ensure_dim("batch teacher rows", m, self.teacher.rows())?;
        ensure_dim(
            "batch teacher classes",
            expert.num_classes(),
            self.teacher.cols(),
        )?;
        ensure_dim("batch prior weights", m, self.prior.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub total: f64,
    pub selective_risk: f64,
    pub penalty: f64,
    pub aux: f64,
    pub coverage: f64,
}

/// `α·(R + λ_s Ψ(τ − ζ)) + (1 − α)·L_aux` where the per-sample loss is the
/// expert's distillation loss plus `λ_lens · entropy_reg`. Both `R` and `ζ`
/// use the routed mass `π·prior`, so an expert cannot meet its target by
/// re-covering rows an earlier expert already took.
pub fn joint_loss(
    expert: &ElenExpert,
    selector: &Selector,
    batch: &JointBatch<'_>,
    cfg: &SelectiveLossCfg,
) -> Result<JointLoss> {
    joint_loss_grad(expert, selector, batch, cfg).map(|(l, _, _)| l)
}

/// [`joint_loss`] with flat gradients for the expert and the selector.
pub fn joint_loss_grad(
    expert: &ElenExpert,
    selector: &Selector,
    batch: &JointBatch<'_>,
    cfg: &SelectiveLossCfg,
) -> Result<(JointLoss, Vec<f64>, Vec<f64>)> {
    batch.check(expert)?;
    let m = batch.concepts.rows();
    let mf = m as f64;
    let alpha = cfg.alpha_mix;

    let mut gate_tape = Tape::default();
    let pi = selector
        .gate
        .forward_taped(batch.concepts, &mut gate_tape)?
        .into_vec();
    let mut expert_tape = ExpertTape::default();
    let logits = expert.forward_taped(batch.concepts, &mut expert_tape)?;

    let reg = expert.lambda_lens() * expert.entropy_reg();
    let mut distill = Vec::with_capacity(m);
    let mut distill_grads = Vec::with_capacity(m);
    for r in 0..m {
        let (l, g) = distill_loss_grad(
            logits.row(r),
            batch.teacher.row(r),
            batch.labels[r],
            &cfg.distill,
        )?;
        distill.push(l);
        distill_grads.push(g);
    }

    // coverage of iteration k counts only the mass that reaches it
    let routed: Vec<f64> = pi.iter().zip(batch.prior).map(|(p, w)| p * w).collect();
    let zeta = coverage(&routed)?;
    if zeta < MIN_COVERAGE {
        return Err(Error::CoverageCollapse { coverage: zeta });
    }
    let weighted: Vec<f64> = (0..m)
        .map(|j| (distill[j] + reg) * pi[j] * batch.prior[j])
        .collect();
    let numerator = math::mean(&weighted);
    let risk = numerator / zeta;
    let penalty = coverage_penalty(selector.tau, zeta, selector.lambda_s);
    let aux = math::mean(&distill) + reg;
    let total = alpha * (risk + penalty) + (1.0 - alpha) * aux;
    if !total.is_finite() {
        return Err(Error::NonFinite("joint loss"));
    }

    let gap = (selector.tau - zeta).max(0.0);
    let mut d_pi = Matrix::zeros(m, 1);
    let mut d_logits = Matrix::zeros(m, expert.num_classes());
    let mut d_entropy_mass = 0.0;
    for j in 0..m {
        let ell = distill[j] + reg;
        let d_risk = ell / (mf * zeta) - numerator / (mf * zeta * zeta);
        let d_pen = -2.0 * selector.lambda_s * gap / mf;
        d_pi.set(j, 0, alpha * batch.prior[j] * (d_risk + d_pen));
        let share = pi[j] * batch.prior[j] / (mf * zeta);
        d_entropy_mass += share;
        let scale = alpha * share + (1.0 - alpha) / mf;
        for (d, g) in d_logits.row_mut(j).iter_mut().zip(&distill_grads[j]) {
            *d = scale * g;
        }
    }
    let d_entropy = expert.lambda_lens() * (alpha * d_entropy_mass + (1.0 - alpha));
    let expert_grad = expert.backward(&expert_tape, &d_logits, d_entropy)?;
    let gate_grad = selector.gate.backward(&gate_tape, &d_pi)?.flatten();

    Ok((
        JointLoss {
            total,
            selective_risk: risk,
            penalty,
            aux,
            coverage: zeta,
        },
        expert_grad,
        gate_grad,
    ))
}

/// Weighted selection mass for the `k`-th selector given the frozen history.
pub fn prior_weights(frozen: &[Selector], concepts: &Matrix) -> Result<Vec<f64>> {
    let mut w = vec![1.0; concepts.rows()];
    for s in frozen {
        for (wj, p) in w.iter_mut().zip(s.pi(concepts)?) {
            *wj *= 1.0 - p;
        }
    }
    Ok(w)
}
