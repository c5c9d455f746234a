//! Entropy-layer interpretable expert.
//!
//! Each class `i` owns a small head whose first layer `W⁽ⁱ⁾` (hidden × N_c) is
//! the entropy layer. The relevance of concept `j` for class `i` is the L1
//! norm of column `j` of `W⁽ⁱ⁾`; attention is `α⁽ⁱ⁾ = softmax(γ⁽ⁱ⁾ / T_lens)`
//! and the head sees `c ⊙ α̃⁽ⁱ⁾` with `α̃ = α / max α`. The head's single
//! output is the class-`i` logit.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, invalid, Error, Result};
use crate::math;
use crate::numcore::loss::{cross_entropy, entropy, kl_to_target};
use crate::numcore::{Activation, DenseNet, Matrix, Tape};

/// Temperature-scaled distillation weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha_kd: f64,
    pub t_kd: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha_kd: 0.9,
            t_kd: 10.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_kd) {
            return Err(invalid("alpha_kd must lie in [0, 1]"));
        }
        if !(self.t_kd > 0.0) {
            return Err(invalid("t_kd must be positive"));
        }
        Ok(())
    }
}

/// `α_KD·T²·KL(softmax(teacher/T) ‖ softmax(student/T)) + (1−α_KD)·CE(student, label)`.
pub fn distill_loss(
    student: &[f64],
    teacher: &[f64],
    label: usize,
    cfg: &DistillConfig,
) -> Result<f64> {
    distill_loss_grad(student, teacher, label, cfg).map(|(l, _)| l)
}

/// [`distill_loss`] and its gradient w.r.t. the student logits.
pub fn distill_loss_grad(
    student: &[f64],
    teacher: &[f64],
    label: usize,
    cfg: &DistillConfig,
) -> Result<(f64, Vec<f64>)> {
    ensure_dim("teacher logits", student.len(), teacher.len())?;
    if label >= student.len() {
        return Err(invalid(alloc::format!(
            "label {label} out of range for {} classes",
            student.len()
        )));
    }
    if !student.iter().chain(teacher).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("distillation logits"));
    }
    let t = cfg.t_kd;
    let a = cfg.alpha_kd;
    let (kl, kl_grad) = kl_to_target(teacher, student, t);
    let (ce, ce_grad) = cross_entropy(student, label);
    let loss = a * t * t * kl + (1.0 - a) * ce;
    let grad = kl_grad
        .iter()
        .zip(&ce_grad)
        .map(|(&k, &c)| a * t * t * k + (1.0 - a) * c)
        .collect();
    Ok((loss, grad))
}

/// `softmax(γ / T)` for one class row.
pub fn attention_from_relevance(gamma: &[f64], t_lens: f64) -> Vec<f64> {
    crate::numcore::loss::softmax(gamma, t_lens)
}

/// Attention rescaled so its maximum is one.
pub fn scaled_attention_from_relevance(gamma: &[f64], t_lens: f64) -> Vec<f64> {
    let max = gamma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    gamma
        .iter()
        .map(|&g| math::exp((g - max) / t_lens))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExpertRepr", into = "ExpertRepr")]
pub struct ElenExpert {
    heads: Vec<DenseNet>,
    t_lens: f64,
    lambda_lens: f64,
    concept_index: Vec<usize>,
    class_names: Vec<String>,
}

/// Checkpoint layout; `relevance` is derived from the heads and checked on load.
#[derive(Serialize, Deserialize)]
struct ExpertRepr {
    relevance: Matrix,
    t_lens: f64,
    lambda_lens: f64,
    heads: Vec<DenseNet>,
    concept_index: Vec<usize>,
    class_names: Vec<String>,
}

impl TryFrom<ExpertRepr> for ElenExpert {
    type Error = Error;
    fn try_from(r: ExpertRepr) -> Result<Self> {
        let e = ElenExpert::from_parts(
            r.heads,
            r.t_lens,
            r.lambda_lens,
            r.concept_index,
            r.class_names,
        )?;
        if e.relevance() != r.relevance {
            return Err(Error::Invariant(
                "stored relevance does not match head weights".into(),
            ));
        }
        Ok(e)
    }
}

impl From<ElenExpert> for ExpertRepr {
    fn from(e: ElenExpert) -> Self {
        ExpertRepr {
            relevance: e.relevance(),
            t_lens: e.t_lens,
            lambda_lens: e.lambda_lens,
            heads: e.heads,
            concept_index: e.concept_index,
            class_names: e.class_names,
        }
    }
}

/// Forward record for [`ElenExpert::backward`].
#[derive(Debug, Clone, Default)]
pub struct ExpertTape {
    inputs: Option<Matrix>,
    heads: Vec<Tape>,
}

impl ElenExpert {
    pub fn new<R: Rng + ?Sized>(
        concept_index: Vec<usize>,
        class_names: Vec<String>,
        hidden: usize,
        t_lens: f64,
        lambda_lens: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = concept_index.len();
        let heads = (0..class_names.len())
            .map(|_| {
                DenseNet::init(
                    &[n, hidden, 1],
                    &[Activation::Relu, Activation::Identity],
                    rng,
                )
            })
            .collect();
        Self::from_parts(heads, t_lens, lambda_lens, concept_index, class_names)
    }

    pub fn from_parts(
        heads: Vec<DenseNet>,
        t_lens: f64,
        lambda_lens: f64,
        concept_index: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if heads.is_empty() {
            return Err(invalid("expert needs at least one class"));
        }
        ensure_dim("expert class names", heads.len(), class_names.len())?;
        if !(t_lens > 0.0) {
            return Err(invalid("t_lens must be positive"));
        }
        if !(lambda_lens >= 0.0) {
            return Err(invalid("lambda_lens must be non-negative"));
        }
        for h in &heads {
            ensure_dim("expert head input", concept_index.len(), h.input_dim())?;
            ensure_dim("expert head output", 1, h.output_dim())?;
        }
        Ok(Self {
            heads,
            t_lens,
            lambda_lens,
            concept_index,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.heads.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.concept_index.len()
    }

    /// Global concept ids of the expert's inputs, in input order.
    pub fn concept_index(&self) -> &[usize] {
        &self.concept_index
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn t_lens(&self) -> f64 {
        self.t_lens
    }

    pub fn lambda_lens(&self) -> f64 {
        self.lambda_lens
    }

    pub fn heads(&self) -> &[DenseNet] {
        &self.heads
    }

    fn relevance_row(&self, class: usize) -> Vec<f64> {
        let w = &self.heads[class].layers()[0].weight;
        (0..w.cols())
            .map(|j| (0..w.rows()).map(|h| w.get(h, j).abs()).sum())
            .collect()
    }

    /// Relevance scores γ, `classes × concepts`.
    pub fn relevance(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..self.num_classes())
            .map(|i| self.relevance_row(i))
            .collect();
        Matrix::from_rows(&rows).expect("rows share concept count")
    }

    /// Attention α, each row a categorical distribution over concepts.
    pub fn attention(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..self.num_classes())
            .map(|i| attention_from_relevance(&self.relevance_row(i), self.t_lens))
            .collect();
        Matrix::from_rows(&rows).expect("rows share concept count")
    }

    /// α̃ = α / max α per class.
    pub fn scaled_attention(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..self.num_classes())
            .map(|i| scaled_attention_from_relevance(&self.relevance_row(i), self.t_lens))
            .collect();
        Matrix::from_rows(&rows).expect("rows share concept count")
    }

    /// Σ over classes of the Shannon entropy (nats) of each attention row.
    pub fn entropy_reg(&self) -> f64 {
        let att = self.attention();
        att.iter_rows().map(entropy).sum()
    }

    /// Class logits and the attention matrix for a batch of concept vectors.
    pub fn forward(&self, concepts: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((self.logits(concepts)?, self.attention()))
    }

    pub fn logits(&self, concepts: &Matrix) -> Result<Matrix> {
        ensure_dim(
            "expert concept vector",
            self.num_concepts(),
            concepts.cols(),
        )?;
        let scaled = self.scaled_attention();
        let mut out = Matrix::zeros(concepts.rows(), self.num_classes());
        for (i, head) in self.heads.iter().enumerate() {
            let modulated = modulate(concepts, scaled.row(i));
            let col = head.forward(&modulated)?;
            for r in 0..concepts.rows() {
                out.set(r, i, col.get(r, 0));
            }
        }
        Ok(out)
    }

    pub fn logits_row(&self, concepts: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, concepts.len(), concepts.to_vec())?;
        Ok(self.logits(&m)?.into_vec())
    }

    pub fn predict_row(&self, concepts: &[f64]) -> Result<usize> {
        Ok(math::argmax(&self.logits_row(concepts)?))
    }

    /// The `n` most attended concepts (local indices) for `class`, descending;
    /// ties go to the lower index.
    pub fn top_concepts(&self, class: usize, n: usize) -> Vec<usize> {
        top_indices(&self.relevance_row(class), n)
    }

    pub fn forward_taped(&self, concepts: &Matrix, tape: &mut ExpertTape) -> Result<Matrix> {
        ensure_dim(
            "expert concept vector",
            self.num_concepts(),
            concepts.cols(),
        )?;
        let scaled = self.scaled_attention();
        let mut out = Matrix::zeros(concepts.rows(), self.num_classes());
        tape.heads.clear();
        for (i, head) in self.heads.iter().enumerate() {
            let modulated = modulate(concepts, scaled.row(i));
            let mut t = Tape::default();
            let col = head.forward_taped(&modulated, &mut t)?;
            for r in 0..concepts.rows() {
                out.set(r, i, col.get(r, 0));
            }
            tape.heads.push(t);
        }
        tape.inputs = Some(concepts.clone());
        Ok(out)
    }

    /// Flat parameter gradient given dLoss/dLogits and dLoss/d(entropy_reg).
    pub fn backward(
        &self,
        tape: &ExpertTape,
        dlogits: &Matrix,
        d_entropy: f64,
    ) -> Result<Vec<f64>> {
        let concepts = tape.inputs.as_ref().ok_or(Error::NoForwardPass)?;
        ensure_dim("expert tape heads", self.num_classes(), tape.heads.len())?;
        ensure_dim("expert dlogits rows", concepts.rows(), dlogits.rows())?;
        ensure_dim("expert dlogits cols", self.num_classes(), dlogits.cols())?;
        let n = self.num_concepts();
        let mut flat = Vec::with_capacity(self.num_params());
        for (i, head) in self.heads.iter().enumerate() {
            let upstream = Matrix::from_vec(concepts.rows(), 1, dlogits.column(i))?;
            let mut grads = head.backward(&tape.heads[i], &upstream)?;

            let gamma = self.relevance_row(i);
            let scaled = scaled_attention_from_relevance(&gamma, self.t_lens);
            let alpha = attention_from_relevance(&gamma, self.t_lens);
            let h = entropy(&alpha);
            let top = math::argmax(&gamma);

            // dL/dα̃_j = Σ_r dL/dc̃_rj · c_rj
            let mut d_scaled = vec![0.0; n];
            for r in 0..concepts.rows() {
                let g = grads.input.row(r);
                let c = concepts.row(r);
                for j in 0..n {
                    d_scaled[j] += g[j] * c[j];
                }
            }
            // α̃_j = exp((γ_j − γ_top)/T)
            let mut d_gamma = vec![0.0; n];
            for j in 0..n {
                if j != top {
                    let v = d_scaled[j] * scaled[j] / self.t_lens;
                    d_gamma[j] += v;
                    d_gamma[top] -= v;
                }
            }
            // ∂H/∂γ_l = −(α_l/T)(ln α_l + H)
            if d_entropy != 0.0 {
                for l in 0..n {
                    d_gamma[l] +=
                        d_entropy * (-(alpha[l] / self.t_lens) * (math::ln(alpha[l]) + h));
                }
            }
            // γ_j = Σ_h |W_hj|
            let w = &head.layers()[0].weight;
            let gw = &mut grads.layers[0].weight;
            for hh in 0..w.rows() {
                for j in 0..n {
                    let s = sign(w.get(hh, j));
                    if s != 0.0 {
                        gw.set(hh, j, gw.get(hh, j) + d_gamma[j] * s);
                    }
                }
            }
            let before = flat.len();
            for l in &grads.layers {
                flat.extend_from_slice(l.weight.as_slice());
                flat.extend_from_slice(&l.bias);
            }
            debug_assert_eq!(flat.len() - before, head.num_params());
        }
        Ok(flat)
    }

    pub fn num_params(&self) -> usize {
        self.heads.iter().map(DenseNet::num_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for h in &self.heads {
            h.params_into(&mut v);
        }
        v
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<usize> {
        let mut at = 0;
        for h in &mut self.heads {
            at += h.set_params(&src[at..])?;
        }
        Ok(at)
    }

    pub fn is_finite(&self) -> bool {
        self.heads.iter().all(DenseNet::is_finite)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn modulate(concepts: &Matrix, scaled: &[f64]) -> Matrix {
    let mut m = concepts.clone();
    for r in 0..m.rows() {
        for (v, &a) in m.row_mut(r).iter_mut().zip(scaled) {
            *v *= a;
        }
    }
    m
}

/// Indices of the `n` largest values, descending, ties to the lower index.
pub fn top_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Per-sample objective `distill_loss + λ_lens · entropy_reg`.
pub fn expert_sample_loss(
    expert: &ElenExpert,
    teacher_logits: &[f64],
    concepts: &[f64],
    label: usize,
    cfg: &DistillConfig,
) -> Result<f64> {
    let student = expert.logits_row(concepts)?;
    Ok(distill_loss(&student, teacher_logits, label, cfg)?
        + expert.lambda_lens() * expert.entropy_reg())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, Dense};
    use alloc::string::ToString;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| alloc::format!("class_{i}")).collect()
    }

    /// Expert whose class-0 first layer has one hidden unit carrying `gamma`
    /// as weights, so relevance equals `gamma` exactly.
    fn expert_with_relevance(gamma: &[f64], t_lens: f64) -> ElenExpert {
        let n = gamma.len();
        let first = Dense {
            weight: Matrix::from_vec(1, n, gamma.to_vec()).unwrap(),
            bias: vec![0.0],
            activation: Activation::Relu,
        };
        let second = Dense {
            weight: Matrix::from_rows(&[[1.0]]).unwrap(),
            bias: vec![0.0],
            activation: Activation::Identity,
        };
        let head = DenseNet::new(vec![first, second]).unwrap();
        ElenExpert::from_parts(vec![head], t_lens, 0.0, (0..n).collect(), names(1)).unwrap()
    }

    #[test]
    fn uniform_relevance_gives_uniform_attention() {
        let e = expert_with_relevance(&[0.3; 4], 0.7);
        for &a in e.attention().row(0) {
            assert!((a - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn peaked_relevance_gives_near_one_hot() {
        let a = attention_from_relevance(&[10.0, 0.0, 0.0, 0.0], 0.7);
        assert!(a[0] > 0.999);
        let e = expert_with_relevance(&[10.0, 0.0, 0.0, 0.0], 0.7);
        assert!(e.attention().get(0, 0) > 0.999);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let mut rng = math::rng_from(4);
        let e = ElenExpert::new((0..5).collect(), names(3), 10, 0.7, 1e-4, &mut rng).unwrap();
        assert_eq!(e.logits_row(&[0.0; 5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = math::rng_from(5);
        let e = ElenExpert::new((0..6).collect(), names(3), 10, 0.7, 1e-4, &mut rng).unwrap();
        for row in e.attention().iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&a| a > 0.0));
        }
    }

    #[test]
    fn entropy_reg_known_values() {
        let e = expert_with_relevance(&[0.5; 4], 1.0);
        assert!((e.entropy_reg() - math::ln(4.0)).abs() < 1e-12);
        let two = expert_with_relevance(&[0.5, 0.5], 1.0);
        assert!((two.entropy_reg() - math::ln(2.0)).abs() < 1e-12);
        let h = two.heads[0].clone();
        let both =
            ElenExpert::from_parts(vec![h.clone(), h], 1.0, 0.0, vec![0, 1], names(2)).unwrap();
        assert!((both.entropy_reg() - 2.0 * math::ln(2.0)).abs() < 1e-12);
        let peaked = expert_with_relevance(&[500.0, 0.0], 1.0);
        assert!(peaked.entropy_reg() < 1e-12);
    }

    #[test]
    fn distill_endpoints() {
        let cfg = DistillConfig {
            alpha_kd: 1.0,
            t_kd: 3.0,
        };
        assert!(
            distill_loss(&[0.2, -1.0, 3.0], &[0.2, -1.0, 3.0], 1, &cfg)
                .unwrap()
                .abs()
                < 1e-12
        );
        let ce_only = DistillConfig {
            alpha_kd: 0.0,
            t_kd: 3.0,
        };
        let (ce, _) = cross_entropy(&[0.2, -1.0, 3.0], 1);
        assert_eq!(
            distill_loss(&[0.2, -1.0, 3.0], &[5.0, 0.0, 0.0], 1, &ce_only).unwrap(),
            ce
        );
    }

    #[test]
    fn distill_known_value() {
        let cfg = DistillConfig {
            alpha_kd: 1.0,
            t_kd: 1.0,
        };
        let l = distill_loss(&[0.0, 0.0], &[math::ln(3.0), 0.0], 0, &cfg).unwrap();
        assert!((l - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn distill_rejects_bad_inputs() {
        let cfg = DistillConfig::default();
        assert!(matches!(
            distill_loss(&[f64::NAN, 0.0], &[0.0, 0.0], 0, &cfg),
            Err(Error::NonFinite(_))
        ));
        assert!(distill_loss(&[0.0, 0.0], &[0.0, 0.0], 2, &cfg).is_err());
    }

    #[test]
    fn sample_loss_adds_weighted_entropy() {
        let mut e = expert_with_relevance(&[0.5; 4], 0.7);
        let cfg = DistillConfig {
            alpha_kd: 0.9,
            t_kd: 10.0,
        };
        let c = [0.2, 0.9, 0.4, 0.1];
        let student = e.logits_row(&c).unwrap();
        let teacher = [student[0] + 0.3];
        let d = distill_loss(&student, &teacher, 0, &cfg).unwrap();
        assert_eq!(expert_sample_loss(&e, &teacher, &c, 0, &cfg).unwrap(), d);
        e.lambda_lens = 1e-4;
        let l = expert_sample_loss(&e, &teacher, &c, 0, &cfg).unwrap();
        assert!((l - (d + 1e-4 * math::ln(4.0))).abs() < 1e-15);
    }

    #[test]
    fn top_concepts_ranking_and_ties() {
        assert_eq!(top_indices(&[0.1, 0.7, 0.2], 1), vec![1]);
        assert_eq!(top_indices(&[0.4, 0.4, 0.2], 1), vec![0]);
        let mut all = top_indices(&[0.3, 0.1, 0.5, 0.1], 4);
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = math::rng_from(11);
        let e = ElenExpert::new((0..6).collect(), names(3), 5, 0.7, 1e-2, &mut rng).unwrap();
        let concepts = Matrix::from_vec(5, 6, (0..30).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let teacher = Matrix::from_vec(
            5,
            3,
            (0..15).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect(),
        )
        .unwrap();
        let labels = [0usize, 2, 1, 1, 0];
        let cfg = DistillConfig {
            alpha_kd: 0.7,
            t_kd: 2.0,
        };
        let objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut ex = e.clone();
            ex.set_params(p)?;
            let mut tape = ExpertTape::default();
            let logits = ex.forward_taped(&concepts, &mut tape)?;
            let mut total = 0.0;
            let mut dl = Matrix::zeros(5, 3);
            for r in 0..5 {
                let (l, g) = distill_loss_grad(logits.row(r), teacher.row(r), labels[r], &cfg)?;
                total += l / 5.0;
                for (d, gv) in dl.row_mut(r).iter_mut().zip(g) {
                    *d = gv / 5.0;
                }
            }
            total += ex.lambda_lens() * ex.entropy_reg();
            let grad = ex.backward(&tape, &dl, ex.lambda_lens())?;
            Ok((total, grad))
        };
        let r = grad_check(objective, &e.params(), 1e-3, 1e-4).unwrap();
        assert!(r.passed, "max rel error {}", r.max_relative_error);
    }

    #[test]
    fn checkpoint_roundtrip_rejects_tampered_relevance() {
        let mut rng = math::rng_from(2);
        let e = ElenExpert::new(vec![3, 5], names(2), 4, 0.7, 1e-4, &mut rng).unwrap();
        let mut repr: ExpertRepr = e.clone().into();
        assert_eq!(ElenExpert::try_from(repr).unwrap(), e);
        repr = e.into();
        repr.relevance.set(0, 0, 123.0);
        assert!(ElenExpert::try_from(repr)
            .unwrap_err()
            .to_string()
            .contains("relevance"));
    }
}
