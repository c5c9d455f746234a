use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{default_class_names, split_sizes, Dataset};
use crate::error::{invalid, Error, Result};
use crate::fol::{eval_terms, Clause, Literal};
use crate::math;
use crate::numcore::Matrix;

/// Maps true binary concepts to a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelRule {
    /// The first class whose formula holds wins; otherwise `default_class`.
    DecisionList {
        classes: Vec<ClassRule>,
        default_class: usize,
    },
    /// `label = Σ_b 2^b · [bits[b] holds]`.
    Bits { bits: Vec<Vec<Clause>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRule {
    pub class: usize,
    pub terms: Vec<Clause>,
}

impl LabelRule {
    pub fn eval(&self, truth: &[bool]) -> usize {
        match self {
            LabelRule::DecisionList {
                classes,
                default_class,
            } => classes
                .iter()
                .find(|c| eval_terms(&c.terms, truth))
                .map_or(*default_class, |c| c.class),
            LabelRule::Bits { bits } => bits
                .iter()
                .enumerate()
                .map(|(b, terms)| usize::from(eval_terms(terms, truth)) << b)
                .sum(),
        }
    }

    /// Concept ids the rule reads.
    pub fn concepts(&self) -> BTreeSet<usize> {
        let clauses: Vec<&Clause> = match self {
            LabelRule::DecisionList { classes, .. } => {
                classes.iter().flat_map(|c| &c.terms).collect()
            }
            LabelRule::Bits { bits } => bits.iter().flatten().collect(),
        };
        clauses
            .into_iter()
            .flat_map(|c| c.literals().iter().map(|l| l.index))
            .collect()
    }

    fn max_class(&self) -> usize {
        match self {
            LabelRule::DecisionList {
                classes,
                default_class,
            } => classes
                .iter()
                .map(|c| c.class)
                .max()
                .unwrap_or(0)
                .max(*default_class),
            LabelRule::Bits { bits } => (1usize << bits.len()) - 1,
        }
    }

    /// Rule over two one-hot attribute groups: the class is `table[a][b]` for
    /// the active member `a` of `first` and `b` of `second`.
    pub fn from_table(first: &[usize], second: &[usize], table: &[Vec<usize>]) -> Result<Self> {
        if table.len() != first.len() || table.iter().any(|r| r.len() != second.len()) {
            return Err(invalid("class table shape must match the attribute groups"));
        }
        let mut classes: Vec<ClassRule> = Vec::new();
        for (a, row) in table.iter().enumerate() {
            for (b, &class) in row.iter().enumerate() {
                let term = Clause::new(vec![Literal::pos(first[a]), Literal::pos(second[b])])?;
                match classes.iter_mut().find(|c| c.class == class) {
                    Some(c) => c.terms.push(term),
                    None => classes.push(ClassRule {
                        class,
                        terms: vec![term],
                    }),
                }
            }
        }
        classes.sort_by_key(|c| c.class);
        let default_class = classes.first().map_or(0, |c| c.class);
        Ok(LabelRule::DecisionList {
            classes,
            default_class,
        })
    }
}

/// One interpretable subgroup: its labeling rule and an optional concept
/// that is on exactly for members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupSpec {
    pub rule: LabelRule,
    #[serde(default)]
    pub marker: Option<usize>,
}

/// A concept whose value agrees with the lowest label bit at a controlled
/// rate per split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpuriousSpec {
    pub concept: usize,
    pub train_agreement: f64,
    /// Applied to the test split; validation uses the train rate.
    pub test_agreement: f64,
    /// Embedding strength relative to other concepts.
    #[serde(default = "one")]
    pub gain: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub num_classes: usize,
    pub num_concepts: usize,
    pub embedding_dim: usize,
    /// Total rows across train/val/test.
    pub samples: usize,
    #[serde(default = "default_ratios")]
    pub split: [f64; 3],
    pub subgroups: Vec<SubgroupSpec>,
    /// Fraction ρ of rows whose label ignores the concepts.
    #[serde(default)]
    pub hard_fraction: f64,
    #[serde(default)]
    pub hard_marker: Option<usize>,
    /// Rule concepts of other subgroups are off for each row, and hard rows
    /// have every rule concept off, so a row's subgroup shows in its concepts.
    #[serde(default)]
    pub own_rules_only: bool,
    /// Embedding strength of a latent class code carried only by hard rows.
    /// Hard labels stay independent of every concept but become partly
    /// learnable from embeddings.
    #[serde(default)]
    pub hard_signal: f64,
    /// Chance that a hard row's label is redrawn uniformly instead of
    /// copying its latent class.
    #[serde(default = "one")]
    pub hard_label_noise: f64,
    /// Concept sets where exactly one member is on.
    #[serde(default)]
    pub exclusive_groups: Vec<Vec<usize>>,
    #[serde(default)]
    pub spurious: Option<SpuriousSpec>,
    /// Probability of flipping an observed concept annotation.
    #[serde(default)]
    pub concept_noise: f64,
    /// Observed values are pulled into `[0, jitter]` / `[1 − jitter, 1]`.
    #[serde(default)]
    pub jitter: f64,
    /// Standard deviation of the additive embedding noise.
    #[serde(default)]
    pub embedding_noise: f64,
    /// Per-concept embedding strength; missing entries default to 1.
    #[serde(default)]
    pub concept_gains: Vec<f64>,
    /// Seed of the embedding mixing matrix; derived from the run seed if unset.
    #[serde(default)]
    pub mixing_seed: Option<u64>,
    #[serde(default)]
    pub concept_names: Option<Vec<String>>,
}

fn default_ratios() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

impl Default for GenSpec {
    /// Two interpretable subgroups of four classes each over concepts 0..5
    /// and 5..10, free concepts 10..16, and 15% hard rows.
    fn default() -> Self {
        let table0 = vec![vec![0, 1], vec![2, 3], vec![3, 0]];
        let table1 = vec![vec![1, 0], vec![3, 2], vec![2, 1]];
        let sub = |base: usize, table: &[Vec<usize>]| SubgroupSpec {
            rule: LabelRule::from_table(&[base, base + 1, base + 2], &[base + 3, base + 4], table)
                .expect("static table"),
            marker: None,
        };
        GenSpec {
            num_classes: 4,
            num_concepts: 16,
            embedding_dim: 32,
            samples: 3000,
            split: default_ratios(),
            subgroups: vec![sub(0, &table0), sub(5, &table1)],
            hard_fraction: 0.15,
            hard_marker: None,
            own_rules_only: true,
            hard_signal: 1.5,
            hard_label_noise: 0.5,
            exclusive_groups: vec![vec![0, 1, 2], vec![3, 4], vec![5, 6, 7], vec![8, 9]],
            spurious: None,
            concept_noise: 0.1,
            jitter: 0.2,
            embedding_noise: 0.3,
            concept_gains: Vec::new(),
            mixing_seed: None,
            concept_names: None,
        }
    }
}

impl GenSpec {
    /// Binary task whose label is the parity of two one-hot attributes, with
    /// a strongly embedded background concept that agrees with the label on
    /// 95% of training rows and 50% of test rows. The background doubles as
    /// metadata.
    pub fn shortcut() -> Self {
        let rule = LabelRule::from_table(&[0, 1], &[2, 3], &[vec![1, 0], vec![0, 1]])
            .expect("static table");
        let mut gains = vec![1.0; 8];
        for g in &mut gains[..4] {
            *g = 0.5;
        }
        GenSpec {
            num_classes: 2,
            num_concepts: 8,
            embedding_dim: 32,
            samples: 3000,
            split: default_ratios(),
            subgroups: vec![SubgroupSpec { rule, marker: None }],
            hard_fraction: 0.0,
            hard_marker: None,
            own_rules_only: false,
            hard_signal: 0.0,
            hard_label_noise: 1.0,
            exclusive_groups: vec![vec![0, 1], vec![2, 3]],
            spurious: Some(SpuriousSpec {
                concept: 4,
                train_agreement: 0.95,
                test_agreement: 0.5,
                gain: 3.0,
            }),
            concept_noise: 0.1,
            jitter: 0.2,
            embedding_noise: 0.6,
            concept_gains: gains,
            mixing_seed: None,
            concept_names: None,
        }
    }

    /// Default spec with exact binary annotations.
    pub fn noiseless() -> Self {
        GenSpec {
            concept_noise: 0.0,
            jitter: 0.0,
            ..GenSpec::default()
        }
    }

    fn names(&self) -> Vec<String> {
        self.concept_names
            .clone()
            .unwrap_or_else(|| (0..self.num_concepts).map(|i| format!("c{i}")).collect())
    }

    fn gain(&self, j: usize) -> f64 {
        let g = self.concept_gains.get(j).copied().unwrap_or(1.0);
        match self.spurious {
            Some(s) if s.concept == j => g * s.gain,
            _ => g,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_concepts;
        if self.num_classes < 2 {
            return Err(invalid("num_classes must be at least 2"));
        }
        if n == 0 || self.embedding_dim == 0 {
            return Err(invalid("num_concepts and embedding_dim must be positive"));
        }
        if self.subgroups.is_empty() {
            return Err(invalid("at least one subgroup is required"));
        }
        if !(0.0..1.0).contains(&self.hard_fraction) {
            return Err(invalid("hard_fraction must lie in [0, 1)"));
        }
        for (name, v) in [
            ("concept_noise", self.concept_noise),
            ("jitter", self.jitter),
        ] {
            if !(0.0..=0.5).contains(&v) {
                return Err(invalid(format!("{name} must lie in [0, 0.5]")));
            }
        }
        if !(0.0..=1.0).contains(&self.hard_label_noise) {
            return Err(invalid("hard_label_noise must lie in [0, 1]"));
        }
        if !(self.embedding_noise >= 0.0) || !(self.hard_signal >= 0.0) {
            return Err(invalid(
                "embedding_noise and hard_signal must be non-negative",
            ));
        }
        if self.concept_gains.len() > n || self.concept_gains.iter().any(|g| !(*g > 0.0)) {
            return Err(invalid(
                "concept_gains must be positive, one per concept at most",
            ));
        }
        if let Some(names) = &self.concept_names {
            if names.len() != n {
                return Err(invalid("concept_names must have num_concepts entries"));
            }
        }
        split_sizes(self.samples, &self.split)?;

        let in_range = |i: usize, what: &str| -> Result<()> {
            if i < n {
                Ok(())
            } else {
                Err(invalid(format!("{what} concept {i} out of range")))
            }
        };
        let mut rule_concepts = BTreeSet::new();
        for (s, sg) in self.subgroups.iter().enumerate() {
            let used = sg.rule.concepts();
            if used.is_empty() {
                return Err(invalid(format!("subgroup {s} rule reads no concepts")));
            }
            for &i in &used {
                in_range(i, "rule")?;
                if !rule_concepts.insert(i) {
                    return Err(invalid(format!(
                        "concept {i} is shared by two subgroup rules"
                    )));
                }
            }
            if sg.rule.max_class() >= self.num_classes {
                return Err(invalid(format!(
                    "subgroup {s} rule emits a class out of range"
                )));
            }
        }
        let mut reserved = BTreeSet::new();
        let markers = self
            .subgroups
            .iter()
            .filter_map(|s| s.marker)
            .chain(self.hard_marker)
            .chain(self.spurious.map(|s| s.concept));
        for i in markers {
            in_range(i, "marker")?;
            if rule_concepts.contains(&i) || !reserved.insert(i) {
                return Err(invalid(format!(
                    "concept {i} is used as a marker and for another role"
                )));
            }
        }
        let mut grouped = BTreeSet::new();
        for g in &self.exclusive_groups {
            if g.len() < 2 {
                return Err(invalid("exclusive groups need at least two concepts"));
            }
            for &i in g {
                in_range(i, "exclusive group")?;
                if reserved.contains(&i) || !grouped.insert(i) {
                    return Err(invalid(format!(
                        "concept {i} appears in two exclusive roles"
                    )));
                }
            }
        }
        if let Some(s) = self.spurious {
            for a in [s.train_agreement, s.test_agreement] {
                if !(0.0..=1.0).contains(&a) {
                    return Err(invalid("spurious agreement rates must lie in [0, 1]"));
                }
            }
            if !(s.gain > 0.0) {
                return Err(invalid("spurious gain must be positive"));
            }
        }
        Ok(())
    }
}

/// Generates train/val/test splits. Deterministic in `(spec, seed)`.
pub fn generate(spec: &GenSpec, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let [n_train, n_val, n_test] = split_sizes(spec.samples, &spec.split)?;
    let num_groups = spec.subgroups.len() + 1;
    let d_in = spec.num_concepts + num_groups + spec.num_classes;
    let mut mix_rng = math::rng_from(
        spec.mixing_seed
            .unwrap_or_else(|| math::mix_seed(seed, math::fnv1a(b"mixing"))),
    );
    let scale = 1.0 / math::sqrt(d_in as f64);
    let mixing = Matrix::from_vec(
        spec.embedding_dim,
        d_in,
        (0..spec.embedding_dim * d_in)
            .map(|_| scale * math::normal(&mut mix_rng))
            .collect(),
    )?;

    let agreement = spec
        .spurious
        .map(|s| [s.train_agreement, s.train_agreement, s.test_agreement]);
    let names = ["train", "val", "test"];
    let mut out = Vec::with_capacity(3);
    for (k, n) in [n_train, n_val, n_test].into_iter().enumerate() {
        let mut rng = math::rng_from(math::mix_seed(seed, k as u64 + 1));
        out.push(generate_split(
            spec,
            &mixing,
            n,
            agreement.map(|a| a[k]),
            names[k],
            seed,
            &mut rng,
        )?);
    }
    let test = out.pop().expect("three splits");
    let val = out.pop().expect("three splits");
    let train = out.pop().expect("three splits");
    Ok((train, val, test))
}

fn generate_split<R: Rng>(
    spec: &GenSpec,
    mixing: &Matrix,
    m: usize,
    agreement: Option<f64>,
    name: &str,
    seed: u64,
    rng: &mut R,
) -> Result<Dataset> {
    let n = spec.num_concepts;
    let s_count = spec.subgroups.len();
    let mut truth = vec![vec![false; n]; m];
    let mut groups = vec![0usize; m];
    let mut labels = vec![0usize; m];
    let mut latent_class = vec![0usize; m];

    let markers: Vec<usize> = spec
        .subgroups
        .iter()
        .filter_map(|s| s.marker)
        .chain(spec.hard_marker)
        .collect();
    let rule_concepts: Vec<BTreeSet<usize>> =
        spec.subgroups.iter().map(|s| s.rule.concepts()).collect();
    for j in 0..m {
        let hard = rng.gen::<f64>() < spec.hard_fraction;
        let g = if hard {
            s_count
        } else {
            rng.gen_range(0..s_count)
        };
        groups[j] = g;
        let t = &mut truth[j];
        for v in t.iter_mut() {
            *v = rng.gen::<bool>();
        }
        for grp in &spec.exclusive_groups {
            let on = grp[rng.gen_range(0..grp.len())];
            for &i in grp {
                t[i] = i == on;
            }
        }
        for &i in &markers {
            t[i] = false;
        }
        if spec.own_rules_only {
            for (s, concepts) in rule_concepts.iter().enumerate() {
                if s != g {
                    for &i in concepts {
                        t[i] = false;
                    }
                }
            }
        }
        let own_marker = if hard {
            spec.hard_marker
        } else {
            spec.subgroups[g].marker
        };
        if let Some(i) = own_marker {
            t[i] = true;
        }
        labels[j] = if hard {
            latent_class[j] = rng.gen_range(0..spec.num_classes);
            if rng.gen::<f64>() < spec.hard_label_noise {
                rng.gen_range(0..spec.num_classes)
            } else {
                latent_class[j]
            }
        } else {
            spec.subgroups[g].rule.eval(t)
        };
    }

    if let (Some(s), Some(rate)) = (spec.spurious, agreement) {
        let agree = libm::round(rate * m as f64) as usize;
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(rng);
        for (pos, &j) in order.iter().enumerate() {
            let bit = labels[j] & 1 == 1;
            truth[j][s.concept] = if pos < agree { bit } else { !bit };
        }
    }

    for j in 0..m {
        let g = groups[j];
        if g < s_count && spec.subgroups[g].rule.eval(&truth[j]) != labels[j] {
            return Err(Error::Invariant(format!(
                "{name} row {j}: subgroup rule disagrees with the generated label"
            )));
        }
    }

    let d_in = mixing.cols();
    let mut embeddings = Matrix::zeros(m, spec.embedding_dim);
    let mut signal = vec![0.0; d_in];
    for j in 0..m {
        for i in 0..n {
            signal[i] = spec.gain(i) * if truth[j][i] { 1.0 } else { -1.0 };
        }
        let (group_code, latent) = signal[n..].split_at_mut(s_count + 1);
        for (k, v) in group_code.iter_mut().enumerate() {
            *v = if k == groups[j] { 1.0 } else { 0.0 };
        }
        for (c, v) in latent.iter_mut().enumerate() {
            *v = if groups[j] == s_count && c == latent_class[j] {
                spec.hard_signal
            } else {
                0.0
            };
        }
        let row = embeddings.row_mut(j);
        for (r, x) in row.iter_mut().enumerate() {
            *x = crate::numcore::dot(mixing.row(r), &signal)
                + spec.embedding_noise * math::normal(rng);
        }
    }

    let mut observed = Matrix::zeros(m, n);
    let mut true_m = Matrix::zeros(m, n);
    for j in 0..m {
        for i in 0..n {
            let t = truth[j][i];
            true_m.set(j, i, if t { 1.0 } else { 0.0 });
            let bit = if rng.gen::<f64>() < spec.concept_noise {
                !t
            } else {
                t
            };
            let pull = spec.jitter * rng.gen::<f64>();
            observed.set(j, i, if bit { 1.0 - pull } else { pull });
        }
    }

    let metadata = spec.spurious.map(|s| {
        Matrix::from_vec(m, 1, (0..m).map(|j| true_m.get(j, s.concept)).collect()).expect("m × 1")
    });

    let ds = Dataset {
        name: String::from(name),
        seed,
        num_classes: spec.num_classes,
        class_names: default_class_names(spec.num_classes),
        concept_names: spec.names(),
        embeddings,
        labels,
        concepts: observed,
        true_concepts: Some(true_m),
        subgroups: Some(groups),
        metadata,
    };
    ds.validate()?;
    Ok(ds)
}
