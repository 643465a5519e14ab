//! Run configuration, recipe execution over seeds, η sweeps and reports.
//!
//! Reports are written twice: `report.json` for machines and `report.txt`
//! for people. Apart from `wall_clock_seconds` and the per-stage training
//! log, every number in a report is recomputed from the checkpoints and
//! the corpus.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{generate, median_split, Corpus, CorpusSpec, Domain, Split, Utterance};
use crate::decode::ErrorCounts;
use crate::error::{Error, Result};
use crate::pipeline::recipe::{terminal_stages, Runner, StageKind, StageSummary};
use crate::pipeline::train::{evaluate, single_picks};
use crate::pipeline::{Checkpoint, ModelKind, Recipe};
use crate::supernet::{ArchSpace, DerivedArch};

pub const SCHEMA_VERSION: u32 = 1;

/// Where the corpus lives. A missing directory is generated from `spec`
/// and saved there.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub spec: CorpusSpec,
}

/// Which stages to score, and on what.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_domain")]
    pub domain: Domain,
    #[serde(default = "default_split")]
    pub split: Split,
    /// Stage names; empty means every stage no other stage consumes.
    #[serde(default)]
    pub systems: Vec<String>,
}

fn default_domain() -> Domain {
    Domain::Target
}
fn default_split() -> Split {
    Split::Test
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            domain: default_domain(),
            split: default_split(),
            systems: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub etas: Vec<f64>,
    /// Stages whose `eta` is replaced; empty means every adapt stage.
    #[serde(default)]
    pub stages: Vec<String>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub corpus: CorpusConfig,
    pub recipe: Recipe,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

impl RunConfig {
    /// Parses TOML, applies `path=value` overrides of scalar fields, then
    /// validates. Overrides see every field, including defaulted ones.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let doc: toml::Table = toml::from_str(text).map_err(|e| Error::config("config", e.message().trim()))?;
        let mut cfg = from_table(doc, &[])?;
        if !overrides.is_empty() {
            let mut doc = toml::Table::try_from(&cfg).map_err(|e| Error::Format(e.to_string()))?;
            for o in overrides {
                apply_override(&mut doc, o)?;
            }
            cfg = from_table(doc, overrides)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config { field, message } => Error::Config {
                field,
                message: format!("{message} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<ArchSpace> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        self.corpus.spec.validate()?;
        let space = self.recipe.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::Config {
                field: format!("recipe.{field}"),
                message,
            },
            other => other,
        })?;
        if space.vocab != self.corpus.spec.vocab || space.feat_dim != self.corpus.spec.feat_dim {
            return Err(Error::config(
                "recipe.space",
                "vocab and feat_dim must match corpus.spec",
            ));
        }
        let names: BTreeSet<&str> = self.recipe.stages.iter().map(|s| s.name.as_str()).collect();
        for (i, s) in self.evaluation.systems.iter().enumerate() {
            if !names.contains(s.as_str()) {
                return Err(Error::config(
                    format!("evaluation.systems[{i}]"),
                    format!("no stage named `{s}`"),
                ));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.etas.is_empty() {
                return Err(Error::config("sweep.etas", "need at least one value"));
            }
            if let Some(i) = sw.etas.iter().position(|e| !(e.is_finite() && *e >= 0.0)) {
                return Err(Error::config(
                    format!("sweep.etas[{i}]"),
                    "must be finite and nonnegative",
                ));
            }
            for (i, s) in sw.stages.iter().enumerate() {
                if !names.contains(s.as_str()) {
                    return Err(Error::config(
                        format!("sweep.stages[{i}]"),
                        format!("no stage named `{s}`"),
                    ));
                }
            }
            if sweep_targets(&self.recipe, sw).is_empty() {
                return Err(Error::config("sweep.stages", "no stage to apply the sweep to"));
            }
        }
        Ok(space)
    }

    pub fn systems(&self) -> Vec<String> {
        if self.evaluation.systems.is_empty() {
            terminal_stages(&self.recipe)
        } else {
            self.evaluation.systems.clone()
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed-{seed}"))
    }

    /// Loads the corpus directory, or generates (and saves) it.
    pub fn corpus(&self) -> Result<Corpus> {
        match &self.corpus.dir {
            Some(dir) if dir.join("manifest.tsv").exists() => {
                let c = Corpus::load(dir)?;
                if c.spec != self.corpus.spec {
                    return Err(Error::config(
                        "corpus.spec",
                        format!("differs from the spec stored in {}", dir.display()),
                    ));
                }
                Ok(c)
            }
            Some(dir) => {
                let c = generate(&self.corpus.spec)?;
                c.save(dir)?;
                Ok(c)
            }
            None => generate(&self.corpus.spec),
        }
    }
}

fn field_in_message(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

fn from_table(doc: toml::Table, overrides: &[String]) -> Result<RunConfig> {
    toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| {
        let msg = e.message().trim().to_string();
        let field = field_in_message(&msg).unwrap_or_else(|| "config".into());
        // name the override that introduced an unknown key
        let field = overrides
            .iter()
            .filter_map(|o| o.split_once('=').map(|(p, _)| p.trim()))
            .find(|p| p.rsplit('.').next() == Some(field.as_str()))
            .map_or(field, String::from);
        Error::config(field, msg)
    })
}

/// `a.b.0.c=value`: sets a scalar. A missing final key is added to its
/// table and left to deserialization to accept or reject. Values parse as
/// TOML scalars; anything else is taken as a string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like `path=value`"))?;
    let path = path.trim();
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    if value.is_table() || value.is_array() {
        return Err(Error::config(path, "only scalar fields can be overridden"));
    }
    let keys: Vec<&str> = path.split('.').collect();
    let missing = || Error::config(path, "no such field");
    let (last, parents) = keys.split_last().ok_or_else(missing)?;
    let mut cur: &mut toml::Value = doc
        .get_mut(parents.first().copied().unwrap_or(last))
        .ok_or_else(missing)?;
    if parents.is_empty() {
        return set_scalar(cur, value, path);
    }
    for k in &parents[1..] {
        cur = match cur {
            toml::Value::Table(t) => t.get_mut(*k),
            toml::Value::Array(a) => k.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(missing)?;
    }
    match cur {
        toml::Value::Table(t) if !t.contains_key(*last) => {
            t.insert(last.to_string(), value);
            Ok(())
        }
        toml::Value::Table(t) => set_scalar(t.get_mut(*last).unwrap(), value, path),
        toml::Value::Array(a) => {
            let slot = last
                .parse::<usize>()
                .ok()
                .and_then(|i| a.get_mut(i))
                .ok_or_else(missing)?;
            set_scalar(slot, value, path)
        }
        _ => Err(missing()),
    }
}

fn set_scalar(slot: &mut toml::Value, value: toml::Value, path: &str) -> Result<()> {
    if slot.is_table() || slot.is_array() {
        return Err(Error::config(path, "only scalar fields can be overridden"));
    }
    // integers may stand in for floats
    *slot = match (&*slot, value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    Ok(())
}

/// Edit counts on one subset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerRecord {
    pub utterances: usize,
    pub edits: usize,
    pub reference_tokens: usize,
    pub ter: f64,
}

impl TerRecord {
    fn from_counts(c: ErrorCounts, utterances: usize) -> Self {
        Self {
            utterances,
            edits: c.edits,
            reference_tokens: c.reference_tokens,
            ter: c.rate(),
        }
    }
}

/// TER overall and on the two halves of a median length split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedTer {
    pub overall: TerRecord,
    pub shorter: TerRecord,
    pub longer: TerRecord,
}

/// Greedy-decodes `utts` with the checkpoint's model (a supernet is scored
/// at its extracted architecture).
pub fn stratified_eval(ck: &Checkpoint, utts: &[&Utterance]) -> Result<StratifiedTer> {
    if utts.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let model = ck.model()?;
    let picks = match ck.kind {
        ModelKind::Supernet => model.choice_picks(&ck.current_arch()?)?,
        ModelKind::Derived => single_picks(&model),
    };
    let (short, long) = median_split(utts);
    let score = |set: &[&Utterance]| -> Result<TerRecord> {
        Ok(TerRecord::from_counts(evaluate(&model, &picks, set)?.0, set.len()))
    };
    let shorter = score(&short)?;
    let longer = score(&long)?;
    let overall = TerRecord::from_counts(
        ErrorCounts {
            edits: shorter.edits + longer.edits,
            reference_tokens: shorter.reference_tokens + longer.reference_tokens,
        },
        utts.len(),
    );
    Ok(StratifiedTer {
        overall,
        shorter,
        longer,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: String,
    pub seed: u64,
    /// Penalty of the last search stage in the system's history.
    pub eta: f64,
    pub param_count: u64,
    pub arch: Option<DerivedArch>,
    pub ter: StratifiedTer,
}

impl SystemReport {
    pub fn new(system: &str, seed: u64, ck: &Checkpoint, utts: &[&Utterance]) -> Result<Self> {
        let summary = StageSummary::from_checkpoint(ck)?;
        let eta = ck
            .lineage
            .iter()
            .rev()
            .find(|e| matches!(e.config.kind, StageKind::Pretrain | StageKind::Adapt))
            .map_or(0.0, |e| e.config.eta);
        Ok(Self {
            system: system.to_string(),
            seed,
            eta,
            param_count: summary.param_count,
            arch: summary.arch,
            ter: stratified_eval(ck, utts)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStages {
    pub seed: u64,
    pub stages: Vec<StageSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub domain: Domain,
    pub split: Split,
    pub seeds: Vec<u64>,
    pub systems: Vec<SystemReport>,
    /// Training log; empty when the report was rebuilt from checkpoints.
    #[serde(default)]
    pub stages: Vec<SeedStages>,
    #[serde(default)]
    pub wall_clock_seconds: Option<f64>,
}

impl Report {
    pub fn system(&self, name: &str, seed: u64) -> Option<&SystemReport> {
        self.systems.iter().find(|s| s.system == name && s.seed == seed)
    }

    /// Writes `<stem>.json` and `<stem>.txt` under `dir`.
    pub fn write_as(&self, dir: &Path, stem: &str) -> Result<()> {
        write_pair(dir, stem, self, &render_report(self))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.write_as(dir, "report")
    }
}

fn write_pair<T: Serialize>(dir: &Path, stem: &str, value: &T, text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    let jp = dir.join(format!("{stem}.json"));
    fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
    let tp = dir.join(format!("{stem}.txt"));
    fs::write(&tp, text).map_err(|e| Error::io(&tp, e))
}

fn eval_set<'c>(cfg: &RunConfig, corpus: &'c Corpus) -> Vec<&'c Utterance> {
    corpus.select(cfg.evaluation.domain, cfg.evaluation.split)
}

/// Called after every completed stage with the run seed.
pub type Progress<'a> = &'a mut dyn FnMut(u64, &StageSummary);

/// Runs the recipe once per seed and scores the configured systems.
pub fn run(cfg: &RunConfig, corpus: &Corpus, progress: Progress<'_>) -> Result<Report> {
    cfg.validate()?;
    let start = Instant::now();
    let utts = eval_set(cfg, corpus);
    let mut systems = Vec::new();
    let mut stages = Vec::new();
    for &seed in &cfg.seeds {
        let mut runner = Runner::new(corpus, &cfg.recipe, seed)?.with_out_dir(cfg.seed_dir(seed));
        let mut log = Vec::new();
        for s in &cfg.recipe.stages {
            let summary = runner.run_stage(s)?;
            progress(seed, &summary);
            log.push(summary);
        }
        for name in cfg.systems() {
            systems.push(SystemReport::new(
                &name,
                seed,
                runner.checkpoint(&name).unwrap(),
                &utts,
            )?);
        }
        stages.push(SeedStages { seed, stages: log });
    }
    let report = Report {
        schema_version: SCHEMA_VERSION,
        domain: cfg.evaluation.domain,
        split: cfg.evaluation.split,
        seeds: cfg.seeds.clone(),
        systems,
        stages,
        wall_clock_seconds: Some(start.elapsed().as_secs_f64()),
    };
    report.write(&cfg.output_dir)?;
    Ok(report)
}

/// Rebuilds the system scores from the checkpoints under `output_dir`.
pub fn evaluate_saved(cfg: &RunConfig, corpus: &Corpus) -> Result<Report> {
    cfg.validate()?;
    let utts = eval_set(cfg, corpus);
    let mut systems = Vec::new();
    for &seed in &cfg.seeds {
        for name in cfg.systems() {
            let ck = Checkpoint::load(&cfg.seed_dir(seed).join(format!("{name}.ckpt")))?;
            systems.push(SystemReport::new(&name, seed, &ck, &utts)?);
        }
    }
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        domain: cfg.evaluation.domain,
        split: cfg.evaluation.split,
        seeds: cfg.seeds.clone(),
        systems,
        stages: Vec::new(),
        wall_clock_seconds: None,
    })
}

/// Stages whose `eta` a sweep replaces.
fn sweep_targets(recipe: &Recipe, sw: &SweepConfig) -> BTreeSet<String> {
    recipe
        .stages
        .iter()
        .filter(|s| {
            if sw.stages.is_empty() {
                s.kind == StageKind::Adapt
            } else {
                sw.stages.contains(&s.name)
            }
        })
        .map(|s| s.name.clone())
        .collect()
}

/// Stages that depend on a swept stage, directly or not.
fn affected_stages(recipe: &Recipe, targets: &BTreeSet<String>) -> BTreeSet<String> {
    let mut hit = targets.clone();
    for s in &recipe.stages {
        if s.input.iter().chain(&s.inherit_from).any(|i| hit.contains(i)) {
            hit.insert(s.name.clone());
        }
    }
    hit
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepArm {
    pub eta: f64,
    pub seed: u64,
    pub systems: Vec<SystemReport>,
    pub stages: Vec<StageSummary>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    pub system: String,
    /// Per seed; `None` where the arm failed.
    pub param_counts: Vec<Option<u64>>,
    pub ters: Vec<Option<f64>>,
    pub median_param_count: Option<f64>,
    pub median_ter: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    pub arms: Vec<SweepArm>,
    pub wall_clock_seconds: Option<f64>,
}

impl SweepReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_pair(dir, "sweep", self, &render_sweep(self))
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// One recipe run per η and seed. Stages that do not depend on a swept
/// stage run once per seed and are shared by every arm; a failing arm is
/// recorded and the others continue.
pub fn sweep(cfg: &RunConfig, corpus: &Corpus, progress: Progress<'_>) -> Result<SweepReport> {
    cfg.validate()?;
    let sw = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("sweep", "missing [sweep] section"))?;
    let start = Instant::now();
    let utts = eval_set(cfg, corpus);
    let targets = sweep_targets(&cfg.recipe, sw);
    let affected = affected_stages(&cfg.recipe, &targets);
    let systems = cfg.systems();
    let mut arms = Vec::new();

    for &seed in &cfg.seeds {
        let seed_dir = cfg.seed_dir(seed);
        let mut shared = Runner::new(corpus, &cfg.recipe, seed)?.with_out_dir(seed_dir.join("shared"));
        let mut shared_log = Vec::new();
        for s in cfg.recipe.stages.iter().filter(|s| !affected.contains(&s.name)) {
            let summary = shared.run_stage(s)?;
            progress(seed, &summary);
            shared_log.push(summary);
        }
        for (k, &eta) in sw.etas.iter().enumerate() {
            let mut recipe = cfg.recipe.clone();
            for s in recipe.stages.iter_mut().filter(|s| targets.contains(&s.name)) {
                s.eta = eta;
            }
            let arm = (|| -> Result<(Vec<SystemReport>, Vec<StageSummary>)> {
                let mut runner = Runner::new(corpus, &recipe, seed)?.with_out_dir(seed_dir.join(format!("eta-{k}")));
                for (name, ck) in shared.checkpoints() {
                    runner.insert(name.clone(), ck.clone());
                }
                let mut log = shared_log.clone();
                for s in recipe.stages.iter().filter(|s| affected.contains(&s.name)) {
                    let summary = runner.run_stage(s)?;
                    progress(seed, &summary);
                    log.push(summary);
                }
                let reports = systems
                    .iter()
                    .map(|name| SystemReport::new(name, seed, runner.checkpoint(name).unwrap(), &utts))
                    .collect::<Result<Vec<_>>>()?;
                Ok((reports, log))
            })();
            arms.push(match arm {
                Ok((systems, stages)) => SweepArm {
                    eta,
                    seed,
                    systems,
                    stages,
                    error: None,
                },
                Err(e) => SweepArm {
                    eta,
                    seed,
                    systems: Vec::new(),
                    stages: Vec::new(),
                    error: Some(e.to_string()),
                },
            });
        }
    }

    let mut rows = Vec::new();
    for &eta in &sw.etas {
        for name in &systems {
            let per_seed: Vec<Option<&SystemReport>> = cfg
                .seeds
                .iter()
                .map(|&seed| {
                    arms.iter()
                        .find(|a| a.eta.to_bits() == eta.to_bits() && a.seed == seed)
                        .and_then(|a| a.systems.iter().find(|s| &s.system == name))
                })
                .collect();
            let param_counts: Vec<Option<u64>> = per_seed.iter().map(|s| s.map(|s| s.param_count)).collect();
            let ters: Vec<Option<f64>> = per_seed.iter().map(|s| s.map(|s| s.ter.overall.ter)).collect();
            let pc: Vec<f64> = param_counts.iter().flatten().map(|&c| c as f64).collect();
            let tv: Vec<f64> = ters.iter().flatten().copied().collect();
            rows.push(SweepRow {
                eta,
                system: name.clone(),
                median_param_count: median(&pc),
                median_ter: median(&tv),
                param_counts,
                ters,
            });
        }
    }
    let report = SweepReport {
        schema_version: SCHEMA_VERSION,
        seeds: cfg.seeds.clone(),
        rows,
        arms,
        wall_clock_seconds: Some(start.elapsed().as_secs_f64()),
    };
    report.write(&cfg.output_dir)?;
    Ok(report)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

pub fn render_report(r: &Report) -> String {
    let mut s = format!("# {} {} TER (%)\n\n", r.domain, r.split);
    let _ = writeln!(
        s,
        "{:<20} {:>6} {:>10} {:>9} {:>8} {:>8} {:>8} {:>5} {:>5}",
        "system", "seed", "eta", "params", "all", "shorter", "longer", "n_s", "n_l"
    );
    for x in &r.systems {
        let _ = writeln!(
            s,
            "{:<20} {:>6} {:>10.3e} {:>9} {:>8} {:>8} {:>8} {:>5} {:>5}",
            x.system,
            x.seed,
            x.eta,
            x.param_count,
            pct(x.ter.overall.ter),
            pct(x.ter.shorter.ter),
            pct(x.ter.longer.ter),
            x.ter.shorter.utterances,
            x.ter.longer.utterances
        );
    }
    if let Some(t) = r.wall_clock_seconds {
        let _ = writeln!(s, "\nwall clock: {t:.1} s");
    }
    s
}

pub fn render_sweep(r: &SweepReport) -> String {
    let mut s = String::from("# eta sweep (medians over seeds)\n\n");
    let _ = writeln!(s, "{:<20} {:>10} {:>12} {:>8}", "system", "eta", "params", "TER %");
    for row in &r.rows {
        let _ = writeln!(
            s,
            "{:<20} {:>10.3e} {:>12} {:>8}",
            row.system,
            row.eta,
            row.median_param_count.map_or("-".into(), |p| format!("{p:.0}")),
            row.median_ter.map_or("-".into(), pct)
        );
    }
    for a in r.arms.iter().filter(|a| a.error.is_some()) {
        let _ = writeln!(
            s,
            "failed: eta {:e} seed {}: {}",
            a.eta,
            a.seed,
            a.error.as_deref().unwrap()
        );
    }
    s
}

/// Layer-indexed table of choices, bottom layer first. When `reference`
/// is given, differing cells are marked with `*`.
pub fn render_arch(arch: &DerivedArch, reference: Option<&DerivedArch>) -> String {
    let mut s = format!(
        "{:<8} {:>5} {:>6} {:>4} {:>5} {:>4}\n",
        "side", "layer", "FD", "AH", "ADIM", "CK"
    );
    let cell = |v: Option<usize>, r: Option<Option<usize>>| {
        let text = v.map_or("-".to_string(), |v| v.to_string());
        match r {
            Some(r) if r != v => format!("{text}*"),
            _ => text,
        }
    };
    for (side, blocks, refs) in [
        ("encoder", &arch.encoder, reference.map(|r| &r.encoder)),
        ("decoder", &arch.decoder, reference.map(|r| &r.decoder)),
    ] {
        for (i, b) in blocks.iter().enumerate() {
            let r = refs.and_then(|r| r.get(i));
            let _ = writeln!(
                s,
                "{:<8} {:>5} {:>6} {:>4} {:>5} {:>4}",
                side,
                i,
                cell(Some(b.fd), r.map(|r| Some(r.fd))),
                cell(Some(b.ah), r.map(|r| Some(r.ah))),
                cell(Some(b.adim), r.map(|r| Some(r.adim))),
                cell(b.ck, r.map(|r| r.ck)),
            );
        }
    }
    s
}
