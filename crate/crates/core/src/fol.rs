//! Propositional explanations over binarized concepts.
//!
//! A [`Clause`] is a conjunction of literals over global concept ids. Local
//! explanations are single clauses extracted from one expert decision; the
//! clauses for one (expert, class) pair are merged into a [`DnfFormula`].

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;
use serde::{Deserialize, Serialize};

use crate::carver::{Bucket, MoIE};
use crate::elen::ElenExpert;
use crate::error::{ensure_dim, invalid, Result};
use crate::math;
use crate::numcore::Matrix;

/// `concept` or `¬concept`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Literal {
    #[serde(rename = "idx")]
    pub index: usize,
    #[serde(rename = "neg")]
    pub negated: bool,
}

impl Literal {
    pub fn pos(index: usize) -> Self {
        Self {
            index,
            negated: false,
        }
    }

    pub fn neg(index: usize) -> Self {
        Self {
            index,
            negated: true,
        }
    }

    pub fn eval(&self, truth: &[bool]) -> bool {
        truth[self.index] != self.negated
    }
}

/// Conjunction of literals sorted by concept id, one literal per concept.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Literal>", into = "Vec<Literal>")]
pub struct Clause(Vec<Literal>);

impl TryFrom<Vec<Literal>> for Clause {
    type Error = crate::Error;
    fn try_from(v: Vec<Literal>) -> Result<Self> {
        Clause::new(v)
    }
}

impl From<Clause> for Vec<Literal> {
    fn from(c: Clause) -> Self {
        c.0
    }
}

impl Clause {
    pub fn new(mut literals: Vec<Literal>) -> Result<Self> {
        if literals.is_empty() {
            return Err(invalid("a conjunction needs at least one literal"));
        }
        literals.sort();
        literals.dedup();
        if literals.windows(2).any(|w| w[0].index == w[1].index) {
            return Err(invalid(
                "a conjunction may not use a concept with both polarities",
            ));
        }
        Ok(Self(literals))
    }

    pub fn literals(&self) -> &[Literal] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn eval(&self, truth: &[bool]) -> bool {
        self.0.iter().all(|l| l.eval(truth))
    }

    /// True if every literal of `self` also appears in `other`.
    pub fn subsumes(&self, other: &Clause) -> bool {
        self.0.iter().all(|l| other.0.binary_search(l).is_ok())
    }

    pub fn max_index(&self) -> usize {
        self.0.iter().map(|l| l.index).max().unwrap_or(0)
    }
}

/// Disjunction of clauses; false when empty.
pub fn eval_terms(terms: &[Clause], truth: &[bool]) -> bool {
    terms.iter().any(|t| t.eval(truth))
}

/// One extracted local explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conjunction {
    pub clause: Clause,
    pub sample: usize,
    pub expert: usize,
    pub class: usize,
    /// Percentile at which the masked prediction first matched.
    pub percentile: u32,
    /// Every concept had to be kept.
    pub uncompressed: bool,
}

/// Class-level explanation of one expert.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnfFormula {
    pub class: usize,
    pub expert: usize,
    pub conjunctions: Vec<Clause>,
}

impl DnfFormula {
    pub fn eval(&self, truth: &[bool]) -> bool {
        eval_terms(&self.conjunctions, truth)
    }

    /// `class ⇐ (a ∧ ¬b) ∨ (c)`; an empty formula renders as `⊥`.
    pub fn to_text(&self, class_names: &[String], concept_names: &[String]) -> String {
        let mut s = String::new();
        let _ = write!(s, "{} ⇐ ", class_names[self.class]);
        if self.conjunctions.is_empty() {
            s.push('⊥');
        }
        for (i, c) in self.conjunctions.iter().enumerate() {
            if i > 0 {
                s.push_str(" ∨ ");
            }
            s.push('(');
            for (j, l) in c.literals().iter().enumerate() {
                if j > 0 {
                    s.push_str(" ∧ ");
                }
                if l.negated {
                    s.push('¬');
                }
                s.push_str(&concept_names[l.index]);
            }
            s.push(')');
        }
        s
    }

    /// Inverse of [`DnfFormula::to_text`].
    pub fn parse_text(
        text: &str,
        expert: usize,
        class_names: &[String],
        concept_names: &[String],
    ) -> Result<Self> {
        let (head, body) = text
            .split_once('⇐')
            .ok_or_else(|| invalid(format!("missing '⇐' in formula {text:?}")))?;
        let head = head.trim();
        let class = class_names
            .iter()
            .position(|c| c == head)
            .ok_or_else(|| invalid(format!("unknown class {head:?}")))?;
        let body = body.trim();
        let mut conjunctions = Vec::new();
        if body != "⊥" {
            for term in body.split('∨') {
                let term = term.trim();
                let inner = term
                    .strip_prefix('(')
                    .and_then(|t| t.strip_suffix(')'))
                    .ok_or_else(|| invalid(format!("unparenthesized term {term:?}")))?;
                let mut lits = Vec::new();
                for lit in inner.split('∧') {
                    let lit = lit.trim();
                    let (negated, name) = match lit.strip_prefix('¬') {
                        Some(rest) => (true, rest.trim()),
                        None => (false, lit),
                    };
                    let index = concept_names
                        .iter()
                        .position(|c| c == name)
                        .ok_or_else(|| invalid(format!("unknown concept {name:?}")))?;
                    lits.push(Literal { index, negated });
                }
                conjunctions.push(Clause::new(lits)?);
            }
        }
        Ok(Self {
            class,
            expert,
            conjunctions,
        })
    }
}

/// `v > threshold` per entry.
pub fn binarize(values: &[f64], threshold: f64) -> Vec<bool> {
    values.iter().map(|&v| v > threshold).collect()
}

/// Default threshold applied to concept activations in `[0, 1]`.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// Nearest-rank percentile: the value at rank `max(1, ⌈p/100·n⌉)`.
pub fn nearest_rank_percentile(values: &[f64], p: u32) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((p as usize * n).div_ceil(100)).clamp(1, n);
    sorted[rank - 1]
}

/// Explains one expert decision.
///
/// The percentile threshold on the predicted class's scaled attention is
/// lowered from 99 to 0; the first mask whose masked input keeps the
/// prediction yields the clause. Literal polarity follows
/// `binarize(concepts, 0.5)` and literal ids are global concept ids.
pub fn extract_local_fol(
    expert: &ElenExpert,
    concepts: &[f64],
    sample: usize,
    expert_id: usize,
) -> Result<Conjunction> {
    ensure_dim(
        "explained concept vector",
        expert.num_concepts(),
        concepts.len(),
    )?;
    let class = expert.predict_row(concepts)?;
    let scaled = expert.scaled_attention();
    let att = scaled.row(class);
    let truth = binarize(concepts, BINARIZE_THRESHOLD);
    let mut masked = alloc::vec![0.0; concepts.len()];
    for p in (0..=99u32).rev() {
        let threshold = nearest_rank_percentile(att, p);
        let keep: Vec<usize> = (0..att.len()).filter(|&j| att[j] >= threshold).collect();
        for (j, m) in masked.iter_mut().enumerate() {
            *m = if att[j] >= threshold {
                concepts[j]
            } else {
                0.0
            };
        }
        if expert.predict_row(&masked)? == class || p == 0 {
            let uncompressed = keep.len() == concepts.len();
            let lits = keep
                .iter()
                .map(|&j| Literal {
                    index: expert.concept_index()[j],
                    negated: !truth[j],
                })
                .collect();
            return Ok(Conjunction {
                clause: Clause::new(lits)?,
                sample,
                expert: expert_id,
                class,
                percentile: p,
                uncompressed,
            });
        }
    }
    unreachable!("percentile 0 keeps every concept")
}

/// Whether the clause's concepts alone, every other input zeroed, still
/// give the clause's class.
pub fn preserves_prediction(
    expert: &ElenExpert,
    concepts: &[f64],
    conj: &Conjunction,
) -> Result<bool> {
    ensure_dim(
        "explained concept vector",
        expert.num_concepts(),
        concepts.len(),
    )?;
    let kept: BTreeSet<usize> = conj.clause.literals().iter().map(|l| l.index).collect();
    let masked: Vec<f64> = expert
        .concept_index()
        .iter()
        .zip(concepts)
        .map(|(g, &v)| if kept.contains(g) { v } else { 0.0 })
        .collect();
    Ok(expert.predict_row(&masked)? == conj.class)
}

/// Merges local clauses into one formula: duplicates and clauses absorbed by
/// a shorter one are removed, the rest ordered by (length, literals).
pub fn aggregate(conjunctions: &[Conjunction]) -> Result<DnfFormula> {
    let first = conjunctions
        .first()
        .ok_or_else(|| invalid("cannot aggregate an empty set of conjunctions"))?;
    if conjunctions
        .iter()
        .any(|c| c.class != first.class || c.expert != first.expert)
    {
        return Err(invalid(
            "aggregated conjunctions must share expert and class",
        ));
    }
    let clauses = conjunctions.iter().map(|c| c.clause.clone()).collect();
    Ok(DnfFormula {
        class: first.class,
        expert: first.expert,
        conjunctions: simplify(clauses),
    })
}

/// Deduplication plus absorption (`A ∨ (A ∧ B) = A`).
pub fn simplify(clauses: Vec<Clause>) -> Vec<Clause> {
    let unique: BTreeSet<Clause> = clauses.into_iter().collect();
    let mut sorted: Vec<Clause> = unique.into_iter().collect();
    sorted.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    let mut kept: Vec<Clause> = Vec::new();
    for c in sorted {
        if !kept.iter().any(|k| k.subsumes(&c)) {
            kept.push(c);
        }
    }
    kept
}

/// Groups local explanations by (expert, class) and aggregates each group.
pub fn aggregate_all(conjunctions: &[Conjunction]) -> Vec<DnfFormula> {
    let mut keys: Vec<(usize, usize)> = conjunctions.iter().map(|c| (c.expert, c.class)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .map(|(e, k)| {
            let group: Vec<Conjunction> = conjunctions
                .iter()
                .filter(|c| c.expert == e && c.class == k)
                .cloned()
                .collect();
            aggregate(&group).expect("group is non-empty and homogeneous")
        })
        .collect()
}

/// Local explanations for every expert-routed row of `concepts` (filtered
/// columns, in the MoIE's concept order). `sample` is the row index.
pub fn explain_routed(moie: &MoIE, concepts: &Matrix) -> Result<Vec<Conjunction>> {
    let buckets = moie.route(concepts)?;
    let mut out = Vec::new();
    for (j, b) in buckets.into_iter().enumerate() {
        if let Bucket::Expert(k) = b {
            out.push(extract_local_fol(
                &moie.stages[k - 1].expert,
                concepts.row(j),
                j,
                k,
            )?);
        }
    }
    Ok(out)
}

/// Fidelity inputs for the expert-routed rows, with binarized concepts
/// scattered to global ids over `num_concepts` columns.
pub fn routed_samples(
    moie: &MoIE,
    concepts: &Matrix,
    num_concepts: usize,
) -> Result<Vec<FidelitySample>> {
    if moie.concept_index.iter().any(|&i| i >= num_concepts) {
        return Err(invalid("concept index exceeds the global concept count"));
    }
    let buckets = moie.route(concepts)?;
    let mut out = Vec::new();
    for (j, b) in buckets.into_iter().enumerate() {
        if let Bucket::Expert(k) = b {
            let row = concepts.row(j);
            let mut truth = alloc::vec![false; num_concepts];
            for (&g, v) in moie
                .concept_index
                .iter()
                .zip(binarize(row, BINARIZE_THRESHOLD))
            {
                truth[g] = v;
            }
            out.push(FidelitySample {
                expert: k,
                predicted: moie.stages[k - 1].expert.predict_row(row)?,
                truth,
            });
        }
    }
    Ok(out)
}

/// A covered sample to score: routing expert, its predicted class, and the
/// binarized global concept vector.
#[derive(Debug, Clone)]
pub struct FidelitySample {
    pub expert: usize,
    pub predicted: usize,
    pub truth: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub overall: f64,
    pub samples: usize,
    /// (expert, fidelity, sample count)
    pub per_expert: Vec<(usize, f64, usize)>,
}

/// Fraction of samples whose formulas reproduce the expert's decision: the
/// predicted class's formula holds and no other class formula of the same
/// expert does.
pub fn fidelity(formulas: &[DnfFormula], samples: &[FidelitySample]) -> Result<FidelityReport> {
    if samples.is_empty() {
        return Err(crate::Error::UndefinedScore(
            "fidelity over zero samples".into(),
        ));
    }
    let mut per: alloc::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    let mut hits = 0;
    for s in samples {
        let mut own = false;
        let mut other = false;
        for f in formulas.iter().filter(|f| f.expert == s.expert) {
            if f.conjunctions
                .iter()
                .any(|c| c.max_index() >= s.truth.len())
            {
                return Err(invalid("formula references a concept beyond the sample"));
            }
            let v = f.eval(&s.truth);
            if f.class == s.predicted {
                own |= v;
            } else {
                other |= v;
            }
        }
        let ok = own && !other;
        hits += ok as usize;
        let e = per.entry(s.expert).or_default();
        e.0 += ok as usize;
        e.1 += 1;
    }
    Ok(FidelityReport {
        overall: hits as f64 / samples.len() as f64,
        samples: samples.len(),
        per_expert: per
            .into_iter()
            .map(|(k, (h, n))| (k, h as f64 / n as f64, n))
            .collect(),
    })
}

/// Expert-routed prediction agreement with the formula, used as a sanity
/// check on a single sample.
pub fn explains(formula: &DnfFormula, concepts: &[f64]) -> bool {
    formula.eval(&binarize(concepts, BINARIZE_THRESHOLD))
}

/// Mean literal count of a set of clauses.
pub fn mean_length(clauses: &[Clause]) -> f64 {
    let lens: Vec<f64> = clauses.iter().map(|c| c.len() as f64).collect();
    math::mean(&lens)
}
