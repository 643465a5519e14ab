//! Declarative stage recipes and the runner that executes them.
//!
//! A recipe is an ordered list of stages. Each stage names its input by an
//! earlier stage name (or a checkpoint file) and emits one checkpoint:
//!
//! | kind       | input    | output   | data (default) |
//! |------------|----------|----------|----------------|
//! | `pretrain` | none     | supernet | source         |
//! | `adapt`    | supernet | supernet | target         |
//! | `derive`   | supernet | derived  | none           |
//! | `train`    | derived  | derived  | source         |
//! | `finetune` | derived  | derived  | target         |
//!
//! Every checkpoint carries the stage history that produced it; a stage
//! refuses to run when appending itself would break the order
//! `pretrain adapt* derive (train|finetune)*`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Domain, Split, Utterance};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::params::{Adam, ParamSet};
use crate::search::{ArchLogits, RngState, SearchOptimizers, TempSchedule};
use crate::supernet::{space_cost_model, ArchSpace, ConformerModel, DerivedArch, MaterializeInit, SpaceConfig};

use super::checkpoint::{Checkpoint, LineageEntry, ModelKind, OptimizerState};
use super::train::{derived_epoch, evaluate, single_picks, supernet_epoch, EpochStats, SupernetTask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Pretrain,
    Adapt,
    Derive,
    Train,
    Finetune,
}

impl StageKind {
    pub fn input(self) -> Option<ModelKind> {
        match self {
            Self::Pretrain => None,
            Self::Adapt | Self::Derive => Some(ModelKind::Supernet),
            Self::Train | Self::Finetune => Some(ModelKind::Derived),
        }
    }

    pub fn output(self) -> ModelKind {
        match self {
            Self::Pretrain | Self::Adapt => ModelKind::Supernet,
            _ => ModelKind::Derived,
        }
    }

    pub fn default_domain(self) -> Option<Domain> {
        match self {
            Self::Pretrain | Self::Train => Some(Domain::Source),
            Self::Adapt | Self::Finetune => Some(Domain::Target),
            Self::Derive => None,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Adapt => "adapt",
            Self::Derive => "derive",
            Self::Train => "train",
            Self::Finetune => "finetune",
        }
    }
}

/// Initialization of a derived model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Copy the shared-weight slices of the chosen candidates.
    #[default]
    Inherit,
    /// Random initialization from the stage seed.
    Fresh,
}

fn default_batch() -> usize {
    8
}
fn default_lr_weights() -> f64 {
    1e-3
}
fn default_lr_logits() -> f64 {
    3e-3
}
fn default_clip() -> Option<f64> {
    Some(5.0)
}
fn default_patience() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Unique within a recipe; also the checkpoint file stem.
    pub name: String,
    pub kind: StageKind,
    /// Earlier stage name or checkpoint path.
    #[serde(default)]
    pub input: Option<String>,
    /// `derive` only: supernet supplying the weights (defaults to `input`).
    #[serde(default)]
    pub inherit_from: Option<String>,
    #[serde(default)]
    pub init: InitMode,
    /// Overrides the kind's default domain.
    #[serde(default)]
    pub domain: Option<Domain>,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr_weights")]
    pub lr_weights: f64,
    #[serde(default = "default_lr_logits")]
    pub lr_logits: f64,
    /// Model-size penalty per parameter.
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub temperature: TempSchedule,
    /// Joint gradient-norm limit.
    #[serde(default = "default_clip")]
    pub clip: Option<f64>,
    /// Stage-local seed, combined with the run seed.
    #[serde(default)]
    pub seed: u64,
    /// Re-draw the CTC head and output projection before training.
    #[serde(default)]
    pub reinit_output: bool,
    /// Derived stages stop after this many epochs without a dev TER
    /// improvement and keep the best weights; 0 disables.
    #[serde(default = "default_patience")]
    pub patience: usize,
}

impl StageConfig {
    /// Stage with every optional field at its default.
    pub fn new(name: impl Into<String>, kind: StageKind) -> Self {
        Self {
            name: name.into(),
            kind,
            input: None,
            inherit_from: None,
            init: InitMode::default(),
            domain: None,
            epochs: 0,
            batch_size: default_batch(),
            lr_weights: default_lr_weights(),
            lr_logits: default_lr_logits(),
            eta: 0.0,
            temperature: TempSchedule::default(),
            clip: default_clip(),
            seed: 0,
            reinit_output: false,
            patience: default_patience(),
        }
    }

    pub fn with_input(mut self, input: impl Into<String>) -> Self {
        self.input = Some(input.into());
        self
    }

    pub fn domain(&self) -> Option<Domain> {
        self.domain.or(self.kind.default_domain())
    }

    fn validate(&self, at: &str) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("{at}.{f}"), m));
        let safe = |c: char| c.is_ascii_alphanumeric() || "-_.".contains(c);
        if self.name.is_empty() || !self.name.chars().all(safe) || self.name.starts_with('.') {
            return bad("name", "must be nonempty and use only letters, digits, `-`, `_`, `.`");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr_weights >= 0.0 && self.lr_weights.is_finite()) {
            return bad("lr_weights", "must be finite and nonnegative");
        }
        if !(self.lr_logits >= 0.0 && self.lr_logits.is_finite()) {
            return bad("lr_logits", "must be finite and nonnegative");
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("eta", "must be finite and nonnegative");
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return bad("clip", "must be positive");
        }
        self.temperature
            .validate()
            .map_err(|e| Error::config(format!("{at}.temperature"), e.to_string()))?;
        match (self.kind.input(), &self.input) {
            (None, Some(_)) => return bad("input", "pretrain stages take no input"),
            (Some(_), None) => return bad("input", "required for this stage kind"),
            _ => {}
        }
        if self.inherit_from.is_some() && self.kind != StageKind::Derive {
            return bad("inherit_from", "only valid for derive stages");
        }
        if self.kind == StageKind::Derive && self.epochs > 0 {
            return bad("epochs", "derive stages do not train");
        }
        Ok(())
    }
}

/// Search space, objective and ordered stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    #[serde(default = "SpaceConfig::desk")]
    pub space: SpaceConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub stages: Vec<StageConfig>,
}

impl Recipe {
    /// Checks fields and the stage graph; inputs that are not earlier stage
    /// names are treated as checkpoint paths and checked when loaded.
    pub fn validate(&self) -> Result<ArchSpace> {
        let space = self.space.build().map_err(|e| Error::config("space", e.to_string()))?;
        self.loss.validate()?;
        if self.stages.is_empty() {
            return Err(Error::config("stages", "recipe has no stages"));
        }
        // per stage: kind of model produced and kinds along its history
        let mut seen: BTreeMap<&str, Vec<StageKind>> = BTreeMap::new();
        for (i, s) in self.stages.iter().enumerate() {
            let at = format!("stages[{i}]");
            s.validate(&at)?;
            if seen.contains_key(s.name.as_str()) {
                return Err(Error::config(
                    format!("{at}.name"),
                    format!("duplicate stage `{}`", s.name),
                ));
            }
            let mut history = Vec::new();
            if let Some(input) = &s.input {
                match seen.get(input.as_str()) {
                    Some(h) => history = h.clone(),
                    None if is_stage_name(input) => {
                        return Err(Error::config(
                            format!("{at}.input"),
                            format!("`{input}` is not an earlier stage (or a `.ckpt` path)"),
                        ))
                    }
                    None => {}
                }
            }
            if let Some(src) = &s.inherit_from {
                match seen.get(src.as_str()) {
                    Some(h) if *h.last().unwrap() != StageKind::Pretrain && *h.last().unwrap() != StageKind::Adapt => {
                        return Err(Error::config(
                            format!("{at}.inherit_from"),
                            format!("`{src}` is not a supernet"),
                        ));
                    }
                    None if is_stage_name(src) => {
                        return Err(Error::config(
                            format!("{at}.inherit_from"),
                            format!("`{src}` is not an earlier stage (or a `.ckpt` path)"),
                        ))
                    }
                    _ => {}
                }
            }
            let external = s.input.is_some() && history.is_empty();
            if !external {
                history.push(s.kind);
                check_order(&history).map_err(|e| Error::config(format!("{at}.input"), e.to_string()))?;
            } else {
                history.push(s.kind);
            }
            seen.insert(&s.name, history);
        }
        Ok(space)
    }
}

fn is_stage_name(s: &str) -> bool {
    !s.contains('/') && !s.ends_with(".ckpt")
}

/// Checks a stage history against `pretrain adapt* derive (train|finetune)*`.
fn check_order(kinds: &[StageKind]) -> Result<()> {
    use StageKind::*;
    let mut prev: Option<StageKind> = None;
    for &k in kinds {
        let ok = match (prev, k) {
            (None, Pretrain) => true,
            (Some(Pretrain | Adapt), Adapt | Derive) => true,
            (Some(Derive | Train | Finetune), Train | Finetune) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::Lineage(match prev {
                None => format!("history must start with pretrain, found {}", k.label()),
                Some(p) => format!("{} cannot follow {}", k.label(), p.label()),
            }));
        }
        prev = Some(k);
    }
    Ok(())
}

/// Validates a checkpoint's recorded stage history.
pub fn check_lineage(lineage: &[LineageEntry]) -> Result<()> {
    let kinds: Vec<StageKind> = lineage.iter().map(|e| e.config.kind).collect();
    check_order(&kinds).map_err(|e| match e {
        Error::Lineage(m) => Error::Lineage(format!(
            "{m} (history: {})",
            lineage
                .iter()
                .map(|e| e.config.name.as_str())
                .collect::<Vec<_>>()
                .join(" → ")
        )),
        other => other,
    })
}

/// Per-stage record for reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub kind: StageKind,
    pub domain: Option<Domain>,
    pub seed: u64,
    pub epochs_run: usize,
    pub final_train_loss: Option<f64>,
    pub best_dev_ter: Option<f64>,
    /// Parameters of the emitted model; for supernets, of the architecture
    /// extracted from the current logits.
    pub param_count: u64,
    pub arch: Option<DerivedArch>,
}

impl StageSummary {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let e = ck
            .lineage
            .last()
            .ok_or_else(|| Error::Lineage("checkpoint has an empty history".into()))?;
        let param_count = match (&ck.kind, &ck.logits) {
            (ModelKind::Supernet, Some(l)) => space_cost_model(&ck.space).exact(&l.argmax_indices()),
            _ => ck.params.count(),
        };
        Ok(Self {
            name: e.config.name.clone(),
            kind: e.config.kind,
            domain: e.config.domain(),
            seed: e.seed,
            epochs_run: e.epochs_run,
            final_train_loss: e.stats.last().map(|s| s.train_loss),
            best_dev_ter: e.stats.iter().filter_map(|s| s.dev_ter).reduce(f64::min),
            param_count,
            arch: e.arch.clone(),
        })
    }
}

/// Effective seed of a stage within a run.
pub fn stage_seed(run_seed: u64, stage_seed: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(stage_seed);
    rng.next_u64()
}

/// Executes stages one at a time, keeping every emitted checkpoint.
pub struct Runner<'c> {
    corpus: &'c Corpus,
    space: ArchSpace,
    loss: LossConfig,
    run_seed: u64,
    out_dir: Option<PathBuf>,
    checkpoints: BTreeMap<String, Checkpoint>,
    /// State at the last completed epoch of a stage that diverged.
    pub last_good: Option<Checkpoint>,
}

impl<'c> Runner<'c> {
    pub fn new(corpus: &'c Corpus, recipe: &Recipe, run_seed: u64) -> Result<Self> {
        let space = recipe.validate()?;
        if space.vocab != corpus.spec.vocab || space.feat_dim != corpus.spec.feat_dim {
            return Err(Error::config(
                "space",
                format!(
                    "vocab/feat_dim {}/{} do not match the corpus ({}/{})",
                    space.vocab, space.feat_dim, corpus.spec.vocab, corpus.spec.feat_dim
                ),
            ));
        }
        Ok(Self {
            corpus,
            space,
            loss: recipe.loss,
            run_seed,
            out_dir: None,
            checkpoints: BTreeMap::new(),
            last_good: None,
        })
    }

    /// Saves each checkpoint as `<dir>/<stage>.ckpt` and reuses an existing
    /// file when its last history entry matches the stage exactly.
    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn checkpoint(&self, name: &str) -> Option<&Checkpoint> {
        self.checkpoints.get(name)
    }

    pub fn checkpoints(&self) -> &BTreeMap<String, Checkpoint> {
        &self.checkpoints
    }

    /// Makes `ck` available as an input under `name`.
    pub fn insert(&mut self, name: impl Into<String>, ck: Checkpoint) {
        self.checkpoints.insert(name.into(), ck);
    }

    pub fn checkpoint_path(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(format!("{name}.ckpt")))
    }

    fn resolve(&self, key: &str) -> Result<Checkpoint> {
        if let Some(c) = self.checkpoints.get(key) {
            return Ok(c.clone());
        }
        Checkpoint::load(Path::new(key))
    }

    pub fn run_stage(&mut self, cfg: &StageConfig) -> Result<StageSummary> {
        cfg.validate(&format!("stage `{}`", cfg.name))?;
        let seed = stage_seed(self.run_seed, cfg.seed);
        let input = cfg.input.as_deref().map(|k| self.resolve(k)).transpose()?;

        if let Some(path) = self.checkpoint_path(&cfg.name) {
            if path.exists() {
                let ck = Checkpoint::load(&path)?;
                let fresh = |ck: &Checkpoint| {
                    let last = ck.lineage.last()?;
                    let prefix = &ck.lineage[..ck.lineage.len() - 1];
                    let same_input = match &input {
                        Some(i) => i.lineage == prefix,
                        None => prefix.is_empty(),
                    };
                    (last.config == *cfg && last.seed == seed && same_input).then_some(())
                };
                if fresh(&ck).is_some() {
                    let summary = StageSummary::from_checkpoint(&ck)?;
                    self.checkpoints.insert(cfg.name.clone(), ck);
                    return Ok(summary);
                }
            }
        }

        if let Some(inp) = &input {
            let want = cfg.kind.input().unwrap();
            if inp.kind != want {
                return Err(Error::Lineage(format!(
                    "stage `{}` ({}) needs a {want:?} checkpoint, `{}` is {:?}",
                    cfg.name,
                    cfg.kind.label(),
                    cfg.input.as_deref().unwrap(),
                    inp.kind
                )));
            }
            let mut kinds: Vec<StageKind> = inp.lineage.iter().map(|e| e.config.kind).collect();
            kinds.push(cfg.kind);
            check_lineage(&inp.lineage)?;
            check_order(&kinds).map_err(|e| Error::Lineage(format!("stage `{}`: {e}", cfg.name)))?;
        }

        self.last_good = None;
        let ck = match cfg.kind {
            StageKind::Pretrain | StageKind::Adapt => self.search_stage(cfg, seed, input)?,
            StageKind::Derive => self.derive_stage(cfg, seed, input.unwrap())?,
            StageKind::Train | StageKind::Finetune => self.training_stage(cfg, seed, input.unwrap())?,
        };
        if let Some(path) = self.checkpoint_path(&cfg.name) {
            ck.save(&path)?;
        }
        let summary = StageSummary::from_checkpoint(&ck)?;
        self.checkpoints.insert(cfg.name.clone(), ck);
        Ok(summary)
    }

    fn split(&self, domain: Option<Domain>, split: Split) -> Vec<&'c Utterance> {
        match domain {
            Some(d) => self.corpus.select(d, split),
            None => Vec::new(),
        }
    }

    fn diverged(&mut self, cfg: &StageConfig, ck: Checkpoint, epoch: usize) -> Error {
        if let Some(dir) = &self.out_dir {
            // best effort: the divergence is the error worth reporting
            let _ = ck.save(&dir.join(format!("{}.last_good.ckpt", cfg.name)));
        }
        self.last_good = Some(ck);
        Error::Diverged { epoch }
    }

    fn search_stage(&mut self, cfg: &StageConfig, seed: u64, input: Option<Checkpoint>) -> Result<Checkpoint> {
        let (model, mut logits, mut lineage) = match input {
            None => (
                ConformerModel::new(self.space.clone(), seed)?,
                ArchLogits::for_space(&self.space, seed ^ 0x5eed),
                Vec::new(),
            ),
            Some(ck) => {
                if ck.space != self.space {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "stage `{}`: checkpoint search space differs from the recipe space",
                        cfg.name
                    )));
                }
                let logits = ck
                    .logits
                    .clone()
                    .ok_or_else(|| Error::IncompatibleCheckpoint("supernet checkpoint without logits".into()))?;
                (ck.model()?, logits, ck.lineage)
            }
        };
        logits.eta = cfg.eta;
        let domain = cfg.domain();
        let train = self.split(domain, Split::Train);
        let heldout = self.split(domain, Split::Heldout);
        let mut task = SupernetTask::new(model, self.loss);
        let mut opt = SearchOptimizers::new(task.model.params(), &logits, cfg.lr_weights, cfg.lr_logits);
        opt.clip = cfg.clip;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stats = Vec::new();

        let entry = |stats: &[EpochStats], logits: &ArchLogits| -> Result<LineageEntry> {
            Ok(LineageEntry {
                config: cfg.clone(),
                seed,
                epochs_run: stats.len(),
                stats: stats.to_vec(),
                arch: Some(logits.extract(&self.space)?),
            })
        };
        let snapshot = |task: &SupernetTask, logits: &ArchLogits, opt: &SearchOptimizers, rng: &ChaCha8Rng| {
            (
                task.model.params().clone(),
                logits.clone(),
                opt.clone(),
                RngState::capture(rng),
            )
        };
        let build =
            |params: ParamSet, logits: ArchLogits, opt: SearchOptimizers, rng: RngState, lineage: Vec<LineageEntry>| {
                Checkpoint {
                    kind: ModelKind::Supernet,
                    space: self.space.clone(),
                    params,
                    logits: Some(logits),
                    optimizer: OptimizerState {
                        weights: Some(opt.weights),
                        logits: Some(opt.logits),
                    },
                    rng,
                    lineage,
                }
            };

        for epoch in 0..cfg.epochs {
            let good = snapshot(&task, &logits, &opt, &rng);
            logits.temperature = cfg.temperature.at(epoch, cfg.epochs);
            match supernet_epoch(
                &mut task,
                &mut logits,
                &mut opt,
                &train,
                &heldout,
                cfg.batch_size,
                &mut rng,
                epoch,
            ) {
                Ok(s) => stats.push(s),
                Err(Error::Diverged { epoch }) => {
                    let mut lin = lineage.clone();
                    lin.push(entry(&stats, &good.1)?);
                    let ck = build(good.0, good.1, good.2, good.3, lin);
                    return Err(self.diverged(cfg, ck, epoch));
                }
                Err(e) => return Err(e),
            }
        }
        lineage.push(entry(&stats, &logits)?);
        Ok(build(
            task.model.into_params(),
            logits,
            opt,
            RngState::capture(&rng),
            lineage,
        ))
    }

    fn derive_stage(&mut self, cfg: &StageConfig, seed: u64, input: Checkpoint) -> Result<Checkpoint> {
        let logits = input
            .logits
            .as_ref()
            .ok_or_else(|| Error::IncompatibleCheckpoint("supernet checkpoint without logits".into()))?;
        let arch = logits.extract(&input.space)?;
        let weights = match &cfg.inherit_from {
            Some(k) => {
                let w = self.resolve(k)?;
                if w.kind != ModelKind::Supernet || w.space != input.space {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "stage `{}`: `{k}` is not a supernet over the same space",
                        cfg.name
                    )));
                }
                w
            }
            None => input.clone(),
        };
        let init = match cfg.init {
            InitMode::Inherit => MaterializeInit::Inherit,
            InitMode::Fresh => MaterializeInit::Fresh { seed },
        };
        let model = weights.model()?.materialize(&arch, init)?;
        let mut lineage = input.lineage;
        lineage.push(LineageEntry {
            config: cfg.clone(),
            seed,
            epochs_run: 0,
            stats: Vec::new(),
            arch: Some(arch),
        });
        Ok(Checkpoint {
            kind: ModelKind::Derived,
            space: model.space().clone(),
            params: model.into_params(),
            logits: None,
            optimizer: OptimizerState::default(),
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(seed)),
            lineage,
        })
    }

    fn training_stage(&mut self, cfg: &StageConfig, seed: u64, input: Checkpoint) -> Result<Checkpoint> {
        let arch = input.arch()?;
        let mut model = input.model()?;
        if cfg.reinit_output {
            model.reinit_output_layers(seed);
        }
        let domain = cfg.domain();
        let train = self.split(domain, Split::Train);
        let dev = self.split(domain, Split::Dev);
        let picks = single_picks(&model);
        let mut opt = Adam::for_params(cfg.lr_weights, model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stats: Vec<EpochStats> = Vec::new();
        let mut best: Option<(f64, ParamSet)> = None;
        let mut stale = 0;

        let entry = |stats: &[EpochStats]| LineageEntry {
            config: cfg.clone(),
            seed,
            epochs_run: stats.len(),
            stats: stats.to_vec(),
            arch: Some(arch.clone()),
        };
        let build = |params: ParamSet, opt: Adam, rng: RngState, lineage: Vec<LineageEntry>| Checkpoint {
            kind: ModelKind::Derived,
            space: input.space.clone(),
            params,
            logits: None,
            optimizer: OptimizerState {
                weights: Some(opt),
                logits: None,
            },
            rng,
            lineage,
        };

        for epoch in 0..cfg.epochs {
            let good = (model.params().clone(), opt.clone(), RngState::capture(&rng));
            let loss = match derived_epoch(
                &mut model,
                &mut opt,
                &train,
                cfg.batch_size,
                &self.loss,
                cfg.clip,
                &mut rng,
                epoch,
            ) {
                Ok(l) => l,
                Err(Error::Diverged { epoch }) => {
                    let mut lin = input.lineage.clone();
                    lin.push(entry(&stats));
                    let ck = build(good.0, good.1, good.2, lin);
                    return Err(self.diverged(cfg, ck, epoch));
                }
                Err(e) => return Err(e),
            };
            let dev_ter = if dev.is_empty() {
                None
            } else {
                Some(evaluate(&model, &picks, &dev)?.0.rate())
            };
            stats.push(EpochStats {
                epoch,
                train_loss: loss,
                heldout_loss: None,
                temperature: None,
                dev_ter,
            });
            if cfg.patience == 0 {
                continue;
            }
            if let Some(ter) = dev_ter {
                if best.as_ref().map_or(true, |(b, _)| ter < *b) {
                    best = Some((ter, model.params().clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        break;
                    }
                }
            }
        }
        let params = match best {
            Some((_, p)) => p,
            None => model.into_params(),
        };
        let mut lineage = input.lineage.clone();
        lineage.push(entry(&stats));
        Ok(build(params, opt, RngState::capture(&rng), lineage))
    }
}

/// Result of a full recipe run.
#[derive(Clone, Debug)]
pub struct RecipeOutcome {
    pub stages: Vec<StageSummary>,
    pub checkpoints: BTreeMap<String, Checkpoint>,
}

/// Runs every stage of `recipe` in order.
pub fn run_recipe(corpus: &Corpus, recipe: &Recipe, run_seed: u64, out_dir: Option<&Path>) -> Result<RecipeOutcome> {
    let mut runner = Runner::new(corpus, recipe, run_seed)?;
    if let Some(d) = out_dir {
        runner = runner.with_out_dir(d);
    }
    let mut stages = Vec::new();
    for s in &recipe.stages {
        stages.push(runner.run_stage(s)?);
    }
    Ok(RecipeOutcome {
        stages,
        checkpoints: runner.checkpoints,
    })
}

/// Names of the stages whose outputs no later stage consumes.
pub fn terminal_stages(recipe: &Recipe) -> Vec<String> {
    let used: BTreeSet<&str> = recipe
        .stages
        .iter()
        .flat_map(|s| s.input.iter().chain(&s.inherit_from))
        .map(String::as_str)
        .collect();
    recipe
        .stages
        .iter()
        .filter(|s| !used.contains(s.name.as_str()))
        .map(|s| s.name.clone())
        .collect()
}
