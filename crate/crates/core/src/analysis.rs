//! Concept validation: completeness, zero-out ablation and interventions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::carver::{Blackbox, Bucket, ConceptView, MoIE, TrainConfig};
use crate::concepts::ConceptBank;
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::math;
use crate::numcore::loss::cross_entropy;
use crate::numcore::{dot, Activation, DenseNet, Matrix, OptState, Optimizer, Tape};

/// Projections of each embedding onto the selected concept directions,
/// L2-normalized per row. Rows with no projection stay zero.
pub fn concept_scores(embeddings: &Matrix, bank: &ConceptBank, top: &[usize]) -> Result<Matrix> {
    ensure_dim(
        "score embedding dim",
        bank.embedding_dim(),
        embeddings.cols(),
    )?;
    if top.is_empty() {
        return Err(invalid("concept scores need at least one concept"));
    }
    if let Some(&i) = top.iter().find(|&&i| i >= bank.len()) {
        return Err(invalid(format!("concept {i} is not in the bank")));
    }
    let mut out = Matrix::zeros(embeddings.rows(), top.len());
    let mut zero_rows = 0usize;
    for (r, x) in embeddings.iter_rows().enumerate() {
        let row = out.row_mut(r);
        for (v, &i) in row.iter_mut().zip(top) {
            *v = dot(x, bank.directions.row(i));
        }
        let norm = math::sqrt(row.iter().map(|v| v * v).sum());
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            zero_rows += 1;
        }
    }
    if zero_rows > 0 {
        log::warn!("{zero_rows} rows project to zero on the selected concepts");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletenessConfig {
    /// Hidden width of the projection back to embedding space.
    pub hidden: usize,
    pub restarts: usize,
    pub train: TrainConfig,
    /// Chance accuracy; `1 / num_classes` when unset.
    pub baseline: Option<f64>,
}

impl Default for CompletenessConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            restarts: 3,
            train: TrainConfig {
                epochs: 60,
                learning_rate: 0.005,
                batch_size: Some(64),
                weight_decay: 0.0,
                optimizer: Optimizer::adam(),
            },
            baseline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessEval {
    /// Concept scores → embeddings.
    pub projection: DenseNet,
    pub concepts: Vec<usize>,
    pub baseline: f64,
    /// Validation accuracy of `h(Γ(v))`.
    pub concept_accuracy: f64,
    pub blackbox_accuracy: f64,
    pub eta: f64,
}

/// Completeness of the bank's `top` concepts for explaining `f0`.
pub fn completeness(
    f0: &Blackbox,
    bank: &ConceptBank,
    top: &[usize],
    train: &ConceptView,
    val: &ConceptView,
    cfg: &CompletenessConfig,
    seed: u64,
) -> Result<CompletenessEval> {
    let ts = concept_scores(&train.embeddings, bank, top)?;
    let vs = concept_scores(&val.embeddings, bank, top)?;
    let mut eval = completeness_from_scores(f0, &ts, train, &vs, val, cfg, seed)?;
    eval.concepts = top.to_vec();
    Ok(eval)
}

/// Completeness given precomputed concept scores, e.g. a chance control.
pub fn completeness_from_scores(
    f0: &Blackbox,
    train_scores: &Matrix,
    train: &ConceptView,
    val_scores: &Matrix,
    val: &ConceptView,
    cfg: &CompletenessConfig,
    seed: u64,
) -> Result<CompletenessEval> {
    cfg.train.validate("completeness.train")?;
    if cfg.hidden == 0 || cfg.restarts == 0 {
        return Err(invalid(
            "completeness.hidden and completeness.restarts must be positive",
        ));
    }
    ensure_dim("train scores", train.len(), train_scores.rows())?;
    ensure_dim("val scores", val.len(), val_scores.rows())?;
    ensure_dim("score width", train_scores.cols(), val_scores.cols())?;
    if val.is_empty() || train.is_empty() {
        return Err(invalid("completeness needs non-empty train and val sets"));
    }
    let k = f0.num_classes();
    let baseline = cfg.baseline.unwrap_or(1.0 / k as f64);
    if !(baseline > 0.0 && baseline < 1.0) {
        return Err(invalid("completeness baseline must lie in (0, 1)"));
    }
    let blackbox_accuracy = accuracy(&f0.predict(&val.embeddings)?, &val.labels);
    if blackbox_accuracy - baseline <= 0.0 {
        return Err(Error::UndefinedScore(format!(
            "blackbox accuracy {blackbox_accuracy:.3} is not above chance {baseline:.3}"
        )));
    }

    let mut best: Option<(f64, DenseNet)> = None;
    for restart in 0..cfg.restarts {
        let s = math::mix_seed(seed, restart as u64);
        let gamma = fit_projection(f0, train_scores, &train.labels, cfg, s)?;
        let acc = accuracy(&predict_through(f0, &gamma, val_scores)?, &val.labels);
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, gamma));
        }
    }
    let (concept_accuracy, projection) = best.expect("at least one restart");
    Ok(CompletenessEval {
        projection,
        concepts: Vec::new(),
        baseline,
        concept_accuracy,
        blackbox_accuracy,
        eta: (concept_accuracy - baseline) / (blackbox_accuracy - baseline),
    })
}

fn predict_through(f0: &Blackbox, gamma: &DenseNet, scores: &Matrix) -> Result<Vec<usize>> {
    f0.predict(&gamma.forward(scores)?)
}

/// Trains `Γ` so that the frozen head classifies `Γ(v)` correctly.
fn fit_projection(
    f0: &Blackbox,
    scores: &Matrix,
    labels: &[usize],
    cfg: &CompletenessConfig,
    seed: u64,
) -> Result<DenseNet> {
    let mut rng = math::rng_from(seed);
    let dims = [scores.cols(), cfg.hidden, f0.embedding_dim()];
    let mut gamma = DenseNet::init(&dims, &[Activation::Relu, Activation::Identity], &mut rng);
    let mut opt = OptState::new(
        cfg.train.optimizer,
        cfg.train.learning_rate,
        gamma.num_params(),
        seed,
    )
    .with_weight_decay(cfg.train.weight_decay);
    let mut params = gamma.params();
    for epoch in 0..cfg.train.epochs {
        for batch in opt.batches(labels.len(), cfg.train.batch_size, epoch as u64) {
            let x = scores.select_rows(&batch);
            let mut gt = Tape::default();
            let emb = gamma.forward_taped(&x, &mut gt)?;
            let mut ht = Tape::default();
            let logits = f0.head.forward_taped(&emb, &mut ht)?;
            let scale = 1.0 / batch.len() as f64;
            let mut d = Matrix::zeros(batch.len(), f0.num_classes());
            for (r, &j) in batch.iter().enumerate() {
                let (_, g) = cross_entropy(logits.row(r), labels[j]);
                for (dv, gv) in d.row_mut(r).iter_mut().zip(g) {
                    *dv = gv * scale;
                }
            }
            let through = f0.head.backward(&ht, &d)?.input;
            let grads = gamma.backward(&gt, &through)?.flatten();
            opt.step(&mut params, &grads)?;
            gamma.set_params(&params)?;
        }
    }
    Ok(gamma)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Global concept ids ordered by their strongest attention in any expert
/// and class.
pub fn attention_ranking(moie: &MoIE) -> Vec<usize> {
    let mut best = vec![0.0f64; moie.concept_index.len()];
    for s in &moie.stages {
        for row in s.expert.attention().iter_rows() {
            for (b, &v) in best.iter_mut().zip(row) {
                *b = b.max(v);
            }
        }
    }
    crate::elen::top_indices(&best, best.len())
        .into_iter()
        .map(|i| moie.concept_index[i])
        .collect()
}

/// How the concepts to remove are chosen for each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRanking {
    /// Top attention of the routed expert for the predicted class.
    Attention,
    /// A per-sample uniform permutation; prefixes are nested across `N`.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub n: usize,
    pub accuracy: f64,
    /// Unablated minus ablated accuracy.
    pub drop: f64,
}

/// Expert-routed rows of `view` with their expert and unablated prediction.
fn routed(moie: &MoIE, view: &ConceptView) -> Result<Vec<(usize, usize, usize)>> {
    let buckets = moie.route(&view.concepts)?;
    let mut out = Vec::new();
    for (j, b) in buckets.into_iter().enumerate() {
        if let Bucket::Expert(k) = b {
            let class = moie.stages[k - 1]
                .expert
                .predict_row(view.concepts.row(j))?;
            out.push((j, k - 1, class));
        }
    }
    Ok(out)
}

/// Accuracy on expert-covered rows after zeroing `N` concepts per row, for
/// each `N`. Routes stay fixed; only the expert's input changes.
pub fn zero_out_ablation(
    moie: &MoIE,
    view: &ConceptView,
    ns: &[usize],
    ranking: AblationRanking,
) -> Result<Vec<AblationPoint>> {
    let nc = moie.concept_index.len();
    if let Some(&n) = ns.iter().find(|&&n| n > nc) {
        return Err(invalid(format!("cannot zero {n} of {nc} concepts")));
    }
    let rows = routed(moie, view)?;
    if rows.is_empty() {
        return Err(Error::UndefinedScore(
            "no expert-covered rows to ablate".into(),
        ));
    }
    let orders: Vec<Vec<usize>> = rows
        .iter()
        .map(|&(j, k, class)| match ranking {
            AblationRanking::Attention => moie.stages[k].expert.top_concepts(class, nc),
            AblationRanking::Random { seed } => {
                let mut o: Vec<usize> = (0..nc).collect();
                o.shuffle(&mut math::rng_from(math::mix_seed(seed, j as u64)));
                o
            }
        })
        .collect();
    let base = rows
        .iter()
        .filter(|&&(j, _, class)| class == view.labels[j])
        .count() as f64
        / rows.len() as f64;
    ns.iter()
        .map(|&n| {
            let mut hits = 0usize;
            for (&(j, k, _), order) in rows.iter().zip(&orders) {
                let mut c = view.concepts.row(j).to_vec();
                for &i in &order[..n] {
                    c[i] = 0.0;
                }
                hits += (moie.stages[k].expert.predict_row(&c)? == view.labels[j]) as usize;
            }
            let accuracy = hits as f64 / rows.len() as f64;
            Ok(AblationPoint {
                n,
                accuracy,
                drop: base - accuracy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionScope {
    /// Every expert-covered row.
    All,
    /// Rows covered by the last two experts.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub n: usize,
    pub samples: usize,
    pub before: f64,
    pub after: f64,
}

impl Intervention {
    pub fn gain(&self) -> f64 {
        self.after - self.before
    }
}

/// Replaces each in-scope row's top-`N` attention concepts with oracle
/// values and re-predicts through the same expert. `oracle` holds ground
/// truth over global concept ids.
pub fn intervene(
    moie: &MoIE,
    view: &ConceptView,
    oracle: Option<&Matrix>,
    n: usize,
    scope: InterventionScope,
) -> Result<Intervention> {
    let oracle = oracle.ok_or_else(|| invalid("intervention needs ground-truth concepts"))?;
    ensure_dim("oracle rows", view.len(), oracle.rows())?;
    if moie.concept_index.iter().any(|&i| i >= oracle.cols()) {
        return Err(invalid("oracle lacks a concept the experts read"));
    }
    let nc = moie.concept_index.len();
    if n > nc {
        return Err(invalid(format!("cannot intervene on {n} of {nc} concepts")));
    }
    let first_hard = moie.len().saturating_sub(2);
    let rows: Vec<(usize, usize, usize)> = routed(moie, view)?
        .into_iter()
        .filter(|&(_, k, _)| scope == InterventionScope::All || k >= first_hard)
        .collect();
    if rows.is_empty() {
        return Err(Error::UndefinedScore(
            "no rows in intervention scope".into(),
        ));
    }
    let (mut before, mut after) = (0usize, 0usize);
    for &(j, k, class) in &rows {
        let expert = &moie.stages[k].expert;
        let mut c = view.concepts.row(j).to_vec();
        for i in expert.top_concepts(class, n) {
            c[i] = oracle.get(j, moie.concept_index[i]);
        }
        before += (class == view.labels[j]) as usize;
        after += (expert.predict_row(&c)? == view.labels[j]) as usize;
    }
    let m = rows.len() as f64;
    Ok(Intervention {
        n,
        samples: rows.len(),
        before: before as f64 / m,
        after: after as f64 / m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::carver::{Stage, StopReason};
    use crate::concepts::ConceptMode;
    use crate::elen::ElenExpert;
    use crate::numcore::Dense;
    use crate::selector::Selector;
    use alloc::string::String;
    use rand::Rng;

    fn bank(directions: Matrix) -> ConceptBank {
        let n = directions.rows();
        ConceptBank {
            names: (0..n).map(|i| format!("c{i}")).collect(),
            directions,
            biases: vec![0.0; n],
            scores: vec![1.0; n],
            degenerate: vec![false; n],
            mode: ConceptMode::Cav,
        }
    }

    #[test]
    fn scores_normalize_projections() {
        let b = bank(Matrix::identity(3));
        let e = Matrix::from_rows(&[[1.0, 1.0, 0.0], [0.0, 0.0, 5.0], [0.0, 0.0, 0.0]]).unwrap();
        let s = concept_scores(&e, &b, &[0, 1]).unwrap();
        let h = 1.0 / math::sqrt(2.0);
        assert!((s.get(0, 0) - h).abs() < 1e-12 && (s.get(0, 1) - h).abs() < 1e-12);
        assert_eq!(s.row(1), &[0.0, 0.0]);
        assert_eq!(s.row(2), &[0.0, 0.0]);
        let single =
            concept_scores(&Matrix::from_rows(&[[0.0, 2.0, 0.0]]).unwrap(), &b, &[1]).unwrap();
        assert_eq!(single.get(0, 0), 1.0);
    }

    #[test]
    fn scores_reject_unknown_concepts() {
        let b = bank(Matrix::identity(2));
        assert!(concept_scores(&Matrix::zeros(1, 2), &b, &[2]).is_err());
        assert!(concept_scores(&Matrix::zeros(1, 2), &b, &[]).is_err());
    }

    /// Two-class problem whose label is the sign of the first embedding
    /// coordinate, with an identity-like blackbox head.
    fn sign_task(m: usize, seed: u64) -> (Blackbox, ConceptView) {
        let mut rng = math::rng_from(seed);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..2).map(|_| math::normal(&mut rng)).collect())
            .collect();
        let labels: Vec<usize> = rows.iter().map(|r| (r[0] > 0.0) as usize).collect();
        let emb = Matrix::from_rows(&rows).unwrap();
        let head = DenseNet::new(vec![Dense {
            weight: Matrix::from_rows(&[[-1.0, 0.0], [1.0, 0.0]]).unwrap(),
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let view = ConceptView::new(Matrix::zeros(m, 1), emb, labels).unwrap();
        (Blackbox { head, iteration: 0 }, view)
    }

    fn quick() -> CompletenessConfig {
        CompletenessConfig {
            hidden: 16,
            restarts: 2,
            train: TrainConfig {
                epochs: 30,
                ..CompletenessConfig::default().train
            },
            baseline: None,
        }
    }

    #[test]
    fn informative_concepts_are_complete() {
        let (f0, train) = sign_task(400, 1);
        let (_, val) = sign_task(200, 2);
        let b = bank(Matrix::identity(2));
        let eval = completeness(&f0, &b, &[0, 1], &train, &val, &quick(), 3).unwrap();
        assert!(eval.eta > 0.9, "eta {}", eval.eta);
        assert_eq!(eval.blackbox_accuracy, 1.0);
    }

    #[test]
    fn noise_scores_are_incomplete() {
        let (f0, train) = sign_task(400, 1);
        let (_, val) = sign_task(200, 2);
        let mut rng = math::rng_from(9);
        let mut noise = |m: usize| {
            Matrix::from_vec(m, 2, (0..2 * m).map(|_| rng.gen::<f64>()).collect()).unwrap()
        };
        let (ts, vs) = (noise(400), noise(200));
        let eval = completeness_from_scores(&f0, &ts, &train, &vs, &val, &quick(), 3).unwrap();
        assert!(eval.eta < 0.2, "eta {}", eval.eta);
    }

    #[test]
    fn chance_blackbox_is_undefined() {
        let (mut f0, train) = sign_task(100, 1);
        f0.head.layers_mut()[0].weight = Matrix::zeros(2, 2);
        let b = bank(Matrix::identity(2));
        // a constant predictor sits exactly at the majority rate
        let majority = train.labels.iter().filter(|&&y| y == 0).count() as f64 / train.len() as f64;
        let cfg = CompletenessConfig {
            baseline: Some(majority),
            ..quick()
        };
        let err = completeness(&f0, &b, &[0], &train, &train, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::UndefinedScore(_)));
    }

    /// Expert on two concepts whose class-1 logit is `w · c0` and class-0
    /// logit is zero; the selector always routes to it.
    fn single_rule_moie() -> MoIE {
        let head = |w: f64| {
            DenseNet::new(vec![
                Dense {
                    weight: Matrix::from_rows(&[[w, 0.0]]).unwrap(),
                    bias: vec![0.0],
                    activation: Activation::Relu,
                },
                Dense {
                    weight: Matrix::from_rows(&[[1.0]]).unwrap(),
                    bias: vec![-0.5 * w.signum().max(0.0)],
                    activation: Activation::Identity,
                },
            ])
            .unwrap()
        };
        let names: Vec<String> = vec!["a".into(), "b".into()];
        let expert =
            ElenExpert::from_parts(vec![head(0.0), head(4.0)], 0.7, 0.0, vec![0, 1], names)
                .unwrap();
        let gate = DenseNet::new(vec![Dense {
            weight: Matrix::zeros(1, 2),
            bias: vec![5.0],
            activation: Activation::Sigmoid,
        }])
        .unwrap();
        let mut rng = math::rng_from(0);
        MoIE {
            stages: vec![Stage {
                selector: Selector::from_parts(gate, 0.5, 32.0).unwrap(),
                expert,
            }],
            residual: Blackbox {
                head: DenseNet::init(&[1, 2], &[Activation::Identity], &mut rng),
                iteration: 1,
            },
            concept_index: vec![0, 1],
            records: Vec::new(),
            stop: StopReason::MaxIterations,
        }
    }

    fn rule_view(m: usize) -> ConceptView {
        let rows: Vec<[f64; 2]> = (0..m)
            .map(|j| [(j % 2) as f64, ((j / 2) % 2) as f64])
            .collect();
        let labels = rows.iter().map(|r| r[0] as usize).collect();
        ConceptView::new(
            Matrix::from_rows(&rows).unwrap(),
            Matrix::zeros(m, 1),
            labels,
        )
        .unwrap()
    }

    #[test]
    fn zeroing_the_rule_concept_hurts() {
        let moie = single_rule_moie();
        let view = rule_view(40);
        let curve =
            zero_out_ablation(&moie, &view, &[0, 1, 2], AblationRanking::Attention).unwrap();
        assert_eq!(curve[0].drop, 0.0);
        assert_eq!(curve[0].accuracy, 1.0);
        assert!(curve[1].drop >= 0.3, "{curve:?}");
        assert!(curve[2].accuracy <= 0.5 + 0.1);
        assert!(zero_out_ablation(&moie, &view, &[3], AblationRanking::Attention).is_err());
        let random =
            zero_out_ablation(&moie, &view, &[0, 2], AblationRanking::Random { seed: 1 }).unwrap();
        assert_eq!(random[1].accuracy, curve[2].accuracy);
    }

    #[test]
    fn intervention_repairs_flipped_concepts() {
        let moie = single_rule_moie();
        let clean = rule_view(40);
        let oracle = clean.concepts.clone();
        let mut noisy = clean.clone();
        for j in (0..40).step_by(4) {
            noisy.concepts.set(j, 0, 1.0 - noisy.concepts.get(j, 0));
        }
        let none = intervene(&moie, &noisy, Some(&oracle), 0, InterventionScope::All).unwrap();
        assert_eq!(none.gain(), 0.0);
        let full = intervene(&moie, &noisy, Some(&oracle), 2, InterventionScope::All).unwrap();
        assert_eq!(full.after, 1.0);
        assert!((full.before - 0.75).abs() < 1e-12);
        let hard = intervene(&moie, &noisy, Some(&oracle), 2, InterventionScope::Hard).unwrap();
        assert_eq!(hard.samples, 40);
        assert!(intervene(&moie, &noisy, None, 1, InterventionScope::All).is_err());
        assert!(intervene(&moie, &noisy, Some(&oracle), 3, InterventionScope::All).is_err());
    }

    #[test]
    fn ranking_orders_by_peak_attention() {
        let moie = single_rule_moie();
        assert_eq!(attention_ranking(&moie), vec![0, 1]);
    }
}
