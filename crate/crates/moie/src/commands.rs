//! Subcommands. Each one reuses upstream artifacts in the run directory when
//! they were produced from the same settings, writes its own artifacts and
//! a summary JSON under `summaries/`, and refreshes the run manifest.

use std::fmt;
use std::path::{Path, PathBuf};

use moie_core::analysis::{
    attention_ranking, completeness, intervene, zero_out_ablation, AblationPoint, AblationRanking,
    CompletenessEval, Intervention, InterventionScope,
};
use moie_core::carver::{
    coverage_report, Blackbox, ConceptView, CoverageReport, IterationRecord, MoIE, StopReason,
};
use moie_core::concepts::{ConceptBank, ConceptMode};
use moie_core::data::{self, generate, Dataset};
use moie_core::fol::{
    aggregate_all, explain_routed, fidelity, mean_length, preserves_prediction, routed_samples,
    DnfFormula, FidelityReport,
};
use moie_core::math;
use moie_core::pipeline::{fit_bank, fit_blackbox, make_view, run_with, stage_seed};
use moie_core::shortcut::{
    agreement_groups, fix_shortcut, MetadataSpec, ShortcutConfig, ShortcutSide,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::error::{invalid, Error, Result};
use crate::io::{self, read_json, write_json, SCHEMA_VERSION};
use crate::report::{write_curves, write_table, CurveRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainBlackbox,
    LearnConcepts,
    Carve,
    Explain,
    Completeness,
    Ablate,
    Intervene,
    Shortcut,
    Report,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::GenData,
        Command::TrainBlackbox,
        Command::LearnConcepts,
        Command::Carve,
        Command::Explain,
        Command::Completeness,
        Command::Ablate,
        Command::Intervene,
        Command::Shortcut,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainBlackbox => "train-blackbox",
            Command::LearnConcepts => "learn-concepts",
            Command::Carve => "carve",
            Command::Explain => "explain",
            Command::Completeness => "completeness",
            Command::Ablate => "ablate",
            Command::Intervene => "intervene",
            Command::Shortcut => "shortcut",
            Command::Report => "report",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fields shared by every summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary<T> {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    #[serde(flatten)]
    pub body: T,
}

/// Lists every file in the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub artifacts: Vec<String>,
}

/// A saved model plus the settings hash it was produced under.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint<T> {
    schema_version: u32,
    fingerprint: String,
    value: T,
}

fn fingerprint(parts: &[&dyn erased::Json]) -> Result<String> {
    let mut h = 0u64;
    for p in parts {
        h = math::mix_seed(h, math::fnv1a(p.json()?.as_bytes()));
    }
    Ok(format!("{h:016x}"))
}

/// Object-safe JSON encoding for fingerprint parts.
mod erased {
    use crate::error::{Error, Result};

    pub trait Json {
        fn json(&self) -> Result<String>;
    }

    impl<T: serde::Serialize> Json for T {
        fn json(&self) -> Result<String> {
            serde_json::to_string(self).map_err(|e| Error::Runtime(e.to_string()))
        }
    }
}

/// Trained models with the views they read.
pub struct Carved {
    pub splits: [Dataset; 3],
    pub f0: Blackbox,
    pub bank: ConceptBank,
    pub moie: MoIE,
    pub views: [ConceptView; 3],
}

impl Carved {
    pub fn train(&self) -> &ConceptView {
        &self.views[0]
    }

    pub fn test(&self) -> &ConceptView {
        &self.views[2]
    }
}

/// A run directory driven by one configuration.
pub struct Workspace {
    cfg: RunConfig,
    out: PathBuf,
}

impl Workspace {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        Ok(Self { cfg, out })
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn summary_path(&self, cmd: Command) -> PathBuf {
        self.out.join("summaries").join(format!("{cmd}.json"))
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.out.join("checkpoints").join(format!("{name}.json"))
    }

    fn reports(&self, file: &str) -> PathBuf {
        self.out.join("reports").join(file)
    }

    /// Runs one subcommand and returns the path of its summary.
    pub fn run(&self, cmd: Command) -> Result<PathBuf> {
        log::info!("{cmd}: seed {} in {}", self.cfg.seed, self.out.display());
        match cmd {
            Command::GenData => {
                let splits = self.build_data()?;
                self.finish(cmd, &data_summary(&splits))
            }
            Command::TrainBlackbox => self.train_blackbox(),
            Command::LearnConcepts => self.learn_concepts(),
            Command::Carve => self.carve(),
            Command::Explain => self.explain(),
            Command::Completeness => self.completeness(),
            Command::Ablate => self.ablate(),
            Command::Intervene => self.intervene(),
            Command::Shortcut => self.shortcut(),
            Command::Report => self.report(),
        }
    }

    fn finish<T: Serialize>(&self, cmd: Command, body: &T) -> Result<PathBuf> {
        let path = self.summary_path(cmd);
        write_json(
            &path,
            &Summary {
                schema_version: SCHEMA_VERSION,
                command: cmd.name().to_string(),
                seed: self.cfg.seed,
                body,
            },
        )?;
        self.write_manifest()?;
        Ok(path)
    }

    fn write_manifest(&self) -> Result<()> {
        let mut artifacts = Vec::new();
        list_files(&self.out, &self.out, &mut artifacts)?;
        artifacts.retain(|a| a != io::MANIFEST);
        artifacts.sort();
        write_json(
            &self.out.join(io::MANIFEST),
            &RunManifest {
                schema_version: SCHEMA_VERSION,
                seed: self.cfg.seed,
                artifacts,
            },
        )
    }

    // ---- data ----

    fn data_fingerprint(&self) -> Result<String> {
        fingerprint(&[&self.cfg.seed, &self.cfg.data])
    }

    /// Generates or loads and splits the data source and saves the splits.
    fn build_data(&self) -> Result<[Dataset; 3]> {
        let seed = self.cfg.seed;
        let (train, val, test) = match &self.cfg.data {
            DataSource::Csv { path, split } => data::split(&io::load_csv(path)?, split, seed)?,
            _ => {
                let spec = self.cfg.spec().expect("generated sources carry a spec");
                generate(&spec, seed)?
            }
        };
        let dir = self.data_dir();
        io::save_splits(&dir, &[&train, &val, &test], seed, self.cfg.spec().as_ref())?;
        std::fs::write(dir.join("fingerprint"), self.data_fingerprint()?)
            .map_err(|e| Error::write(&dir, e))?;
        Ok([train, val, test])
    }

    fn data(&self) -> Result<[Dataset; 3]> {
        let dir = self.data_dir();
        let stamp = std::fs::read_to_string(dir.join("fingerprint")).unwrap_or_default();
        if stamp == self.data_fingerprint()? {
            let (_, splits) = io::load_splits(&dir)?;
            if let Ok(s) = <[Dataset; 3]>::try_from(splits) {
                log::info!("reusing data in {}", dir.display());
                return Ok(s);
            }
        }
        self.build_data()
    }

    // ---- checkpoints ----

    fn load_checkpoint<T: DeserializeOwned>(&self, name: &str, fp: &str) -> Option<T> {
        let path = self.checkpoint_path(name);
        if !path.is_file() {
            return None;
        }
        match read_json::<Checkpoint<T>>(&path) {
            Ok(c) if c.schema_version == SCHEMA_VERSION && c.fingerprint == fp => {
                log::info!("reusing {}", path.display());
                Some(c.value)
            }
            Ok(_) => None,
            Err(e) => {
                log::warn!("ignoring unreadable checkpoint: {e}");
                None
            }
        }
    }

    fn save_checkpoint<T: Serialize>(&self, name: &str, fp: &str, value: &T) -> Result<()> {
        write_json(
            &self.checkpoint_path(name),
            &Checkpoint {
                schema_version: SCHEMA_VERSION,
                fingerprint: fp.to_string(),
                value,
            },
        )
    }

    fn blackbox_fingerprint(&self) -> Result<String> {
        fingerprint(&[&self.data_fingerprint()?, &self.cfg.pipeline.blackbox])
    }

    fn bank_fingerprint(&self) -> Result<String> {
        let p = &self.cfg.pipeline;
        match p.concept_mode {
            ConceptMode::Probe => {
                fingerprint(&[&self.data_fingerprint()?, &p.concept_mode, &p.probes])
            }
            ConceptMode::Cav => fingerprint(&[&self.data_fingerprint()?, &p.concept_mode, &p.cav]),
        }
    }

    fn moie_fingerprint(&self) -> Result<String> {
        let p = &self.cfg.pipeline;
        fingerprint(&[
            &self.blackbox_fingerprint()?,
            &self.bank_fingerprint()?,
            &p.concept_threshold,
            &p.concept_source,
            &p.schedule,
            &p.carve,
        ])
    }

    fn fit_f0(&self, train: &Dataset) -> Result<Blackbox> {
        let fp = self.blackbox_fingerprint()?;
        let f0 = fit_blackbox(train, &self.cfg.pipeline, self.cfg.seed)?;
        self.save_checkpoint("blackbox", &fp, &f0)?;
        Ok(f0)
    }

    fn f0(&self, train: &Dataset) -> Result<Blackbox> {
        match self.load_checkpoint("blackbox", &self.blackbox_fingerprint()?) {
            Some(f0) => Ok(f0),
            None => self.fit_f0(train),
        }
    }

    fn fit_concepts(&self, train: &Dataset, val: &Dataset) -> Result<ConceptBank> {
        let fp = self.bank_fingerprint()?;
        let bank = fit_bank(train, val, &self.cfg.pipeline, self.cfg.seed)?;
        self.save_checkpoint("bank", &fp, &bank)?;
        Ok(bank)
    }

    fn bank(&self, train: &Dataset, val: &Dataset) -> Result<ConceptBank> {
        match self.load_checkpoint("bank", &self.bank_fingerprint()?) {
            Some(b) => Ok(b),
            None => self.fit_concepts(train, val),
        }
    }

    fn carve_fresh(&self) -> Result<Carved> {
        let [train, val, test] = self.data()?;
        let f0 = self.f0(&train)?;
        let bank = self.bank(&train, &val)?;
        let run = run_with(
            &train,
            &val,
            &test,
            f0,
            bank,
            &self.cfg.pipeline,
            self.cfg.seed,
        )?;
        self.save_checkpoint("moie", &self.moie_fingerprint()?, &run.moie)?;
        Ok(Carved {
            splits: [train, val, test],
            f0: run.f0,
            bank: run.bank,
            moie: run.moie,
            views: [run.train, run.val, run.test],
        })
    }

    /// The carved cascade, from checkpoints when they are current.
    pub fn carved(&self) -> Result<Carved> {
        let Some(moie) = self.load_checkpoint::<MoIE>("moie", &self.moie_fingerprint()?) else {
            return self.carve_fresh();
        };
        moie.validate()?;
        let splits = self.data()?;
        let f0 = self.f0(&splits[0])?;
        let bank = self.bank(&splits[0], &splits[1])?;
        let source = self.cfg.pipeline.concept_source;
        let [a, b, c] = &splits;
        let views = [
            make_view(a, &bank, &moie.concept_index, source)?,
            make_view(b, &bank, &moie.concept_index, source)?,
            make_view(c, &bank, &moie.concept_index, source)?,
        ];
        Ok(Carved {
            splits,
            f0,
            bank,
            moie,
            views,
        })
    }

    // ---- subcommands ----

    fn train_blackbox(&self) -> Result<PathBuf> {
        let splits = self.data()?;
        let f0 = self.fit_f0(&splits[0])?;
        let accuracy =
            |d: &Dataset| -> Result<f64> { Ok(accuracy(&f0.predict(&d.embeddings)?, &d.labels)) };
        let body = BlackboxSummary {
            iterations_trained: f0.iteration,
            accuracy: SplitScores {
                train: accuracy(&splits[0])?,
                val: accuracy(&splits[1])?,
                test: accuracy(&splits[2])?,
            },
            checkpoint: "checkpoints/blackbox.json".into(),
        };
        self.finish(Command::TrainBlackbox, &body)
    }

    fn learn_concepts(&self) -> Result<PathBuf> {
        let splits = self.data()?;
        let bank = self.fit_concepts(&splits[0], &splits[1])?;
        let threshold = self.cfg.pipeline.concept_threshold;
        let kept = moie_core::concepts::filter_concepts(&bank, threshold).unwrap_or_default();
        let concepts = (0..bank.len())
            .map(|i| ConceptEntry {
                id: i,
                name: bank.names[i].clone(),
                score: bank.scores[i],
                degenerate: bank.degenerate[i],
                kept: kept.contains(&i),
            })
            .collect();
        let body = ConceptsSummary {
            mode: bank.mode,
            threshold,
            concepts,
            kept,
            checkpoint: "checkpoints/bank.json".into(),
        };
        self.finish(Command::LearnConcepts, &body)
    }

    fn carve(&self) -> Result<PathBuf> {
        let c = self.carve_fresh()?;
        let body = CarveSummary {
            iterations: c.moie.len(),
            stop: c.moie.stop,
            concept_index: c.moie.concept_index.clone(),
            records: c.moie.records.clone(),
            train: coverage_report(&c.moie, &c.f0, c.train())?,
            test: coverage_report(&c.moie, &c.f0, c.test())?,
            checkpoints: ["blackbox", "bank", "moie"]
                .map(|n| format!("checkpoints/{n}.json"))
                .to_vec(),
        };
        self.finish(Command::Carve, &body)
    }

    fn explain(&self) -> Result<PathBuf> {
        let c = self.carved()?;
        let train = &c.splits[0];
        let conj = explain_routed(&c.moie, &c.train().concepts)?;
        let mut held = 0usize;
        for x in &conj {
            let expert = &c.moie.stages[x.expert - 1].expert;
            held += preserves_prediction(expert, c.train().concepts.row(x.sample), x)? as usize;
        }
        let formulas = aggregate_all(&conj);
        let text = formula_lines(&formulas, &train.class_names, &train.concept_names);
        let parsed = parse_formula_lines(&text, &train.class_names, &train.concept_names)?;
        if parsed != formulas {
            return Err(Error::Runtime(
                "formula text does not parse back to the same formulas".into(),
            ));
        }
        write_json(&self.out.join("explanations/formulas.json"), &formulas)?;
        let path = self.out.join("explanations/formulas.txt");
        std::fs::write(&path, &text).map_err(|e| Error::write(&path, e))?;

        let samples = routed_samples(&c.moie, &c.test().concepts, train.num_concepts())?;
        let fidelity = if samples.is_empty() {
            log::warn!("no test rows reach an expert; fidelity undefined");
            None
        } else {
            Some(fidelity(&formulas, &samples)?)
        };
        let clauses: Vec<_> = formulas
            .iter()
            .flat_map(|f| f.conjunctions.iter().cloned())
            .collect();
        let body = ExplainSummary {
            local_explanations: conj.len(),
            prediction_preserved: held,
            uncompressed: conj.iter().filter(|x| x.uncompressed).count(),
            formulas: formulas.len(),
            clauses: clauses.len(),
            mean_clause_length: mean_length(&clauses),
            fidelity,
            files: vec![
                "explanations/formulas.json".into(),
                "explanations/formulas.txt".into(),
            ],
        };
        self.finish(Command::Explain, &body)
    }

    fn completeness(&self) -> Result<PathBuf> {
        let c = self.carved()?;
        let a = &self.cfg.analysis;
        let ranking = attention_ranking(&c.moie);
        let top_n =
            ((a.top_fraction * ranking.len() as f64).ceil() as usize).clamp(1, ranking.len());
        let seed = stage_seed(self.cfg.seed, "completeness");
        let eval = |ids: &[usize]| {
            completeness(
                &c.f0,
                &c.bank,
                ids,
                c.train(),
                &c.views[1],
                &a.completeness,
                seed,
            )
        };
        let all = eval(&c.moie.concept_index)?;
        let top = eval(&ranking[..top_n])?;
        let s = self.cfg.seed;
        let mut rows = Vec::new();
        for e in [&all, &top] {
            let n = e.concepts.len();
            rows.push(CurveRow {
                n,
                metric: "eta".into(),
                value: e.eta,
                seed: s,
            });
            rows.push(CurveRow {
                n,
                metric: "concept_accuracy".into(),
                value: e.concept_accuracy,
                seed: s,
            });
        }
        write_curves(&self.reports("completeness.csv"), &rows)?;
        let body = CompletenessSummary {
            top_fraction: a.top_fraction,
            all: CompletenessPoint::from(&all),
            top: CompletenessPoint::from(&top),
            files: vec!["reports/completeness.csv".into()],
        };
        self.finish(Command::Completeness, &body)
    }

    fn ablation_curves(&self, c: &Carved) -> Result<(Vec<AblationPoint>, Vec<AblationPoint>)> {
        let nc = c.moie.concept_index.len();
        let ns = self
            .cfg
            .analysis
            .ablation_sizes
            .clone()
            .unwrap_or_else(|| (0..=nc).collect());
        let random = AblationRanking::Random {
            seed: stage_seed(self.cfg.seed, "ablate"),
        };
        Ok((
            zero_out_ablation(&c.moie, c.test(), &ns, AblationRanking::Attention)?,
            zero_out_ablation(&c.moie, c.test(), &ns, random)?,
        ))
    }

    fn write_ablation(&self, attention: &[AblationPoint], random: &[AblationPoint]) -> Result<()> {
        let s = self.cfg.seed;
        let mut rows = Vec::new();
        for (tag, pts) in [("attention", attention), ("random", random)] {
            for p in pts {
                rows.push(CurveRow {
                    n: p.n,
                    metric: format!("accuracy_{tag}"),
                    value: p.accuracy,
                    seed: s,
                });
                rows.push(CurveRow {
                    n: p.n,
                    metric: format!("drop_{tag}"),
                    value: p.drop,
                    seed: s,
                });
            }
        }
        write_curves(&self.reports("ablation.csv"), &rows)
    }

    fn ablate(&self) -> Result<PathBuf> {
        let c = self.carved()?;
        let (attention, random) = self.ablation_curves(&c)?;
        self.write_ablation(&attention, &random)?;
        let body = AblationSummary {
            attention,
            random,
            files: vec!["reports/ablation.csv".into()],
        };
        self.finish(Command::Ablate, &body)
    }

    fn intervene(&self) -> Result<PathBuf> {
        let c = self.carved()?;
        let oracle = c.splits[2].true_concepts.as_ref();
        if oracle.is_none() {
            return Err(invalid(
                "intervene: the test split has no ground-truth concepts",
            ));
        }
        let nc = c.moie.concept_index.len();
        let ns = self
            .cfg
            .analysis
            .intervention_sizes
            .clone()
            .unwrap_or_else(|| (0..=nc).collect());
        let mut all = Vec::new();
        let mut hard = Vec::new();
        for &n in &ns {
            all.push(intervene(
                &c.moie,
                c.test(),
                oracle,
                n,
                InterventionScope::All,
            )?);
            match intervene(&c.moie, c.test(), oracle, n, InterventionScope::Hard) {
                Ok(x) => hard.push(x),
                Err(moie_core::Error::UndefinedScore(why)) => {
                    log::warn!("hard scope skipped: {why}")
                }
                Err(e) => return Err(e.into()),
            }
        }
        let s = self.cfg.seed;
        let mut rows = Vec::new();
        for (tag, xs) in [("all", &all), ("hard", &hard)] {
            for x in xs {
                rows.push(CurveRow {
                    n: x.n,
                    metric: format!("before_{tag}"),
                    value: x.before,
                    seed: s,
                });
                rows.push(CurveRow {
                    n: x.n,
                    metric: format!("after_{tag}"),
                    value: x.after,
                    seed: s,
                });
                rows.push(CurveRow {
                    n: x.n,
                    metric: format!("gain_{tag}"),
                    value: x.gain(),
                    seed: s,
                });
            }
        }
        write_curves(&self.reports("intervention.csv"), &rows)?;
        let body = InterventionSummary {
            all,
            hard,
            files: vec!["reports/intervention.csv".into()],
        };
        self.finish(Command::Intervene, &body)
    }

    fn shortcut(&self) -> Result<PathBuf> {
        let [train, val, test] = self.data()?;
        let concepts = match (&self.cfg.shortcut.metadata_concepts, self.cfg.spec().and_then(|s| s.spurious)) {
            (Some(c), _) => c.clone(),
            (None, Some(sp)) => vec![sp.concept],
            (None, None) => {
                return Err(invalid(
                    "shortcut.metadata_concepts: required when the data source plants no spurious concept",
                ))
            }
        };
        if let Some(&bad) = concepts.iter().find(|&&i| i >= train.num_concepts()) {
            return Err(invalid(format!(
                "shortcut.metadata_concepts: concept {bad} does not exist"
            )));
        }
        let meta = test
            .metadata
            .as_ref()
            .ok_or_else(|| invalid("shortcut: the data carries no metadata columns"))?;
        let spec = MetadataSpec {
            concepts,
            subgroups: agreement_groups(&test.labels, &meta.column(0))?,
        };
        let fix_cfg = ShortcutConfig {
            flag_threshold: self.cfg.shortcut.flag_threshold,
        };
        let fix = fix_shortcut(
            &train,
            &val,
            &test,
            &spec,
            &self.cfg.pipeline,
            &fix_cfg,
            self.cfg.seed,
        )?;
        let mut rows = Vec::new();
        for (side, s) in [("before", &fix.before), ("after", &fix.after)] {
            for (g, &acc) in s.group_accuracy.iter().enumerate() {
                rows.push(GroupRow {
                    side,
                    group: g,
                    accuracy: acc,
                    seed: self.cfg.seed,
                });
            }
        }
        write_table(
            &self.reports("shortcut.csv"),
            &["side", "group", "accuracy", "seed"],
            &rows,
        )?;
        let body = ShortcutSummary {
            metadata_concepts: spec.concepts.clone(),
            flagged_before: fix.before.spurious.flagged(),
            flagged_after: fix.after.spurious.flagged(),
            before: fix.before,
            after: fix.after,
            files: vec!["reports/shortcut.csv".into()],
        };
        self.finish(Command::Shortcut, &body)
    }

    fn report(&self) -> Result<PathBuf> {
        let c = self.carved()?;
        let train = &c.splits[0];
        let mut coverage = Vec::new();
        for (split, view) in [("train", c.train()), ("test", c.test())] {
            let r = coverage_report(&c.moie, &c.f0, view)?;
            for b in &r.buckets {
                coverage.push(BucketRow {
                    split,
                    bucket: b.bucket.to_string(),
                    count: b.count,
                    coverage: b.coverage,
                    accuracy: b.accuracy,
                    proportional_accuracy: b.proportional_accuracy,
                    f0_accuracy: b.f0_accuracy,
                });
            }
        }
        write_table(
            &self.reports("coverage.csv"),
            &[
                "split",
                "bucket",
                "count",
                "coverage",
                "accuracy",
                "proportional_accuracy",
                "f0_accuracy",
            ],
            &coverage,
        )?;
        let iterations: Vec<IterationRow> = c.moie.records.iter().map(IterationRow::from).collect();
        write_table(
            &self.reports("iterations.csv"),
            &[
                "iteration",
                "tau",
                "coverage",
                "newly_covered",
                "cumulative_coverage",
                "residual_val_accuracy",
                "kept",
            ],
            &iterations,
        )?;
        let mut attention = Vec::new();
        for (k, s) in c.moie.stages.iter().enumerate() {
            let att = s.expert.attention();
            for class in 0..s.expert.num_classes() {
                for (rank, i) in s
                    .expert
                    .top_concepts(class, s.expert.num_concepts())
                    .into_iter()
                    .enumerate()
                {
                    let id = c.moie.concept_index[i];
                    attention.push(AttentionRow {
                        expert: k + 1,
                        class: train.class_names[class].clone(),
                        rank: rank + 1,
                        concept_id: id,
                        concept: train.concept_names[id].clone(),
                        attention: att.get(class, i),
                    });
                }
            }
        }
        write_table(
            &self.reports("attention.csv"),
            &[
                "expert",
                "class",
                "rank",
                "concept_id",
                "concept",
                "attention",
            ],
            &attention,
        )?;
        let (a, r) = self.ablation_curves(&c)?;
        self.write_ablation(&a, &r)?;
        let files = ["coverage", "iterations", "attention", "ablation"]
            .map(|f| format!("reports/{f}.csv"))
            .to_vec();
        self.finish(
            Command::Report,
            &ReportSummary {
                experts: c.moie.len(),
                files,
            },
        )
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::read(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::read(dir, e))?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// One `expert <k>: <formula>` line per formula.
pub fn formula_lines(
    formulas: &[DnfFormula],
    class_names: &[String],
    concept_names: &[String],
) -> String {
    formulas
        .iter()
        .map(|f| {
            format!(
                "expert {}: {}\n",
                f.expert,
                f.to_text(class_names, concept_names)
            )
        })
        .collect()
}

pub fn parse_formula_lines(
    text: &str,
    class_names: &[String],
    concept_names: &[String],
) -> Result<Vec<DnfFormula>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || {
                invalid(format!(
                    "formula line {}: expected 'expert <k>: <formula>'",
                    i + 1
                ))
            };
            let (head, body) = line.split_once(':').ok_or_else(bad)?;
            let expert = head
                .trim()
                .strip_prefix("expert ")
                .and_then(|k| k.trim().parse().ok())
                .ok_or_else(bad)?;
            Ok(DnfFormula::parse_text(
                body.trim(),
                expert,
                class_names,
                concept_names,
            )?)
        })
        .collect()
}

fn data_summary(splits: &[Dataset; 3]) -> DataSummary {
    let first = &splits[0];
    DataSummary {
        num_classes: first.num_classes,
        num_concepts: first.num_concepts(),
        embedding_dim: first.embedding_dim(),
        splits: splits
            .iter()
            .map(|d| {
                let mut class_counts = vec![0usize; d.num_classes];
                for &y in &d.labels {
                    class_counts[y] += 1;
                }
                SplitSummary {
                    name: d.name.clone(),
                    rows: d.len(),
                    class_counts,
                    majority_rate: d.majority_rate(),
                    has_truth: d.true_concepts.is_some(),
                    has_metadata: d.metadata.is_some(),
                }
            })
            .collect(),
        directory: "data".into(),
    }
}

// ---- summary bodies ----

#[derive(Debug, Clone, Serialize)]
struct SplitSummary {
    name: String,
    rows: usize,
    class_counts: Vec<usize>,
    majority_rate: f64,
    has_truth: bool,
    has_metadata: bool,
}

#[derive(Debug, Clone, Serialize)]
struct DataSummary {
    num_classes: usize,
    num_concepts: usize,
    embedding_dim: usize,
    splits: Vec<SplitSummary>,
    directory: String,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct SplitScores {
    train: f64,
    val: f64,
    test: f64,
}

#[derive(Debug, Clone, Serialize)]
struct BlackboxSummary {
    iterations_trained: usize,
    accuracy: SplitScores,
    checkpoint: String,
}

#[derive(Debug, Clone, Serialize)]
struct ConceptEntry {
    id: usize,
    name: String,
    score: f64,
    degenerate: bool,
    kept: bool,
}

#[derive(Debug, Clone, Serialize)]
struct ConceptsSummary {
    mode: ConceptMode,
    threshold: f64,
    concepts: Vec<ConceptEntry>,
    kept: Vec<usize>,
    checkpoint: String,
}

#[derive(Debug, Clone, Serialize)]
struct CarveSummary {
    iterations: usize,
    stop: StopReason,
    concept_index: Vec<usize>,
    records: Vec<IterationRecord>,
    train: CoverageReport,
    test: CoverageReport,
    checkpoints: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct ExplainSummary {
    local_explanations: usize,
    prediction_preserved: usize,
    uncompressed: usize,
    formulas: usize,
    clauses: usize,
    mean_clause_length: f64,
    /// Test-split agreement between formulas and expert decisions.
    fidelity: Option<FidelityReport>,
    files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct CompletenessPoint {
    concepts: Vec<usize>,
    baseline: f64,
    concept_accuracy: f64,
    blackbox_accuracy: f64,
    eta: f64,
}

impl From<&CompletenessEval> for CompletenessPoint {
    fn from(e: &CompletenessEval) -> Self {
        Self {
            concepts: e.concepts.clone(),
            baseline: e.baseline,
            concept_accuracy: e.concept_accuracy,
            blackbox_accuracy: e.blackbox_accuracy,
            eta: e.eta,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct CompletenessSummary {
    top_fraction: f64,
    all: CompletenessPoint,
    top: CompletenessPoint,
    files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct AblationSummary {
    attention: Vec<AblationPoint>,
    random: Vec<AblationPoint>,
    files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct InterventionSummary {
    all: Vec<Intervention>,
    hard: Vec<Intervention>,
    files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct GroupRow<'a> {
    side: &'a str,
    group: usize,
    accuracy: f64,
    seed: u64,
}

#[derive(Debug, Clone, Serialize)]
struct ShortcutSummary {
    metadata_concepts: Vec<usize>,
    /// (expert, class) formulas leaning on a metadata concept.
    flagged_before: Vec<(usize, usize)>,
    flagged_after: Vec<(usize, usize)>,
    before: ShortcutSide,
    after: ShortcutSide,
    files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct BucketRow<'a> {
    split: &'a str,
    bucket: String,
    count: usize,
    coverage: f64,
    accuracy: Option<f64>,
    proportional_accuracy: f64,
    f0_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct IterationRow {
    iteration: usize,
    tau: f64,
    coverage: f64,
    newly_covered: usize,
    cumulative_coverage: f64,
    residual_val_accuracy: Option<f64>,
    kept: bool,
}

impl From<&IterationRecord> for IterationRow {
    fn from(r: &IterationRecord) -> Self {
        Self {
            iteration: r.iteration,
            tau: r.tau,
            coverage: r.coverage,
            newly_covered: r.newly_covered,
            cumulative_coverage: r.cumulative_coverage,
            residual_val_accuracy: r.residual_val_accuracy,
            kept: r.kept,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct AttentionRow {
    expert: usize,
    class: String,
    rank: usize,
    concept_id: usize,
    concept: String,
    attention: f64,
}

#[derive(Debug, Clone, Serialize)]
struct ReportSummary {
    experts: usize,
    files: Vec<String>,
}
