//! Experiment configuration, the E1/E2/E3 presets and the multi-seed job
//! runner that writes run, summary and curve tables.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    Agent, AgentConfig, AgentKind, DEFAULT_HEAD_HIDDEN, DEFAULT_HIDDEN, DQN_WINDOWS,
};
use crate::evalkit::{
    assemble_learning_curve, evaluate_behavior, evaluate_policy, EvalReport, MIN_RUNS,
};
use crate::seeding::{derive_seed, named_seed};
use crate::simworld::{
    campaign_log, generate_dataset, random_world, sim_reset, sim_step, split_dataset, ActionId,
    BehaviorPolicy, Dataset, PolicyKind, RandomWorldParams, SimulatorSpec, WorldConfig, OBS_DIMS,
    STEPS,
};
use crate::trainers::{
    train_agent, train_separate_hybrid, EvalHook, Hyperparams, TrainError, TrainLog,
};

/// World seed used by every preset.
pub const PRESET_WORLD_SEED: u64 = 2024;

#[derive(Debug, Error)]
pub enum XctlError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("unknown preset `{0}` (expected E1, E2 or E3)")]
    UnknownPreset(String),
    #[error("world: {0}")]
    World(String),
    #[error("{0}")]
    Io(String),
}

impl XctlError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            XctlError::Io(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> XctlError {
    XctlError::Io(format!("{}: {e}", path.display()))
}

pub type Result<T> = std::result::Result<T, XctlError>;

/// A roster entry: a plain agent kind, the window-selected DQN, or the
/// two-phase variant of a hybrid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelId {
    Agent(AgentKind),
    DqnBest,
    Separate(AgentKind),
}

impl ModelId {
    fn file_stem(self) -> String {
        let s: String = self
            .to_string()
            .to_lowercase()
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '_' {
                    c
                } else {
                    '-'
                }
            })
            .collect();
        s.trim_matches('-').replace("--", "-")
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelId::Agent(k) => write!(f, "{k}"),
            ModelId::DqnBest => f.write_str("DQN"),
            ModelId::Separate(k) => write!(f, "{}(separate)", k.name()),
        }
    }
}

impl FromStr for ModelId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "DQN" {
            return Ok(ModelId::DqnBest);
        }
        if let Some(base) = s.strip_suffix("(separate)") {
            let k: AgentKind = base.parse()?;
            return if k.is_hybrid() {
                Ok(ModelId::Separate(k))
            } else {
                Err(format!("`{s}`: only hybrids have a separate variant"))
            };
        }
        s.strip_suffix("(joint)")
            .unwrap_or(s)
            .parse()
            .map(ModelId::Agent)
    }
}

impl TryFrom<String> for ModelId {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<ModelId> for String {
    fn from(m: ModelId) -> String {
        m.to_string()
    }
}

/// The eight-model roster: three supervised and five reinforcement models.
pub fn full_roster() -> Vec<ModelId> {
    AgentKind::ROSTER
        .iter()
        .map(|&k| match k {
            AgentKind::Dqn { .. } => ModelId::DqnBest,
            k => ModelId::Agent(k),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldSource {
    Random {
        seed: u64,
        #[serde(default)]
        params: RandomWorldParams,
        #[serde(default)]
        config: WorldConfig,
    },
    File {
        path: PathBuf,
    },
}

impl WorldSource {
    pub fn build(&self) -> Result<SimulatorSpec> {
        match self {
            WorldSource::Random {
                seed,
                params,
                config,
            } => random_world(config, params, *seed).map_err(|e| XctlError::World(e.to_string())),
            WorldSource::File { path } => {
                SimulatorSpec::load(path).map_err(|e| XctlError::World(e.to_string()))
            }
        }
    }
}

/// The synthetic campaign log that policies M and R are derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub donors: usize,
    pub seed: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            donors: 1000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSizes {
    pub hidden: usize,
    pub head_hidden: usize,
}

impl Default for AgentSizes {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            head_hidden: DEFAULT_HEAD_HIDDEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// `E1`, `E2`, `E3` or `custom`.
    pub experiment: String,
    pub policies: Vec<PolicyKind>,
    /// Transitions generated per run before the 4:1:1 split.
    pub data_sizes: Vec<usize>,
    pub roster: Vec<ModelId>,
    pub hyperparams: Hyperparams,
    /// Learning rate per agent kind name (`DQN` covers every window),
    /// replacing `hyperparams.lr` for that kind.
    pub lr_overrides: BTreeMap<String, f64>,
    pub agent: AgentSizes,
    pub world: WorldSource,
    pub campaign: CampaignConfig,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    /// Rollouts used to pick the DQN window.
    pub select_episodes: usize,
    /// Rollouts per learning-curve checkpoint.
    pub curve_episodes: usize,
    pub significance: bool,
    pub save_checkpoints: bool,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: "custom".into(),
            policies: vec![PolicyKind::M],
            data_sizes: vec![100_000],
            roster: full_roster(),
            hyperparams: Hyperparams {
                gamma: 0.9,
                lr: 0.2,
                iterations: 1000,
                eval_every: 100,
                ..Default::default()
            },
            lr_overrides: [("SL_LSTM", 1.0), ("RL_LSTM", 1.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            agent: AgentSizes::default(),
            world: WorldSource::Random {
                seed: PRESET_WORLD_SEED,
                params: RandomWorldParams::default(),
                config: WorldConfig::default(),
            },
            campaign: CampaignConfig::default(),
            seeds: (0..10).collect(),
            eval_episodes: 2000,
            select_episodes: 500,
            curve_episodes: 200,
            significance: true,
            save_checkpoints: true,
            threads: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn from_document(doc: &str) -> Result<Self> {
        serde_json::from_str(doc).map_err(|e| XctlError::Invalid(vec![format!("document: {e}")]))
    }

    /// Hash of everything that affects results; output location and thread
    /// count are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.threads = 0;
        c.save_checkpoints = false;
        let digest = Sha256::digest(serde_json::to_vec(&c).expect("config serializes"));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// The Table-2 settings. E1 also carries the two-phase hybrid for the
/// joint-versus-separate comparison.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = ExperimentConfig {
        experiment: name.to_string(),
        output_dir: PathBuf::from("runs").join(name),
        ..Default::default()
    };
    Ok(match name {
        "E1" => {
            let mut roster = full_roster();
            roster.push(ModelId::Separate(AgentKind::HybridRnn));
            ExperimentConfig { roster, ..base }
        }
        "E2" => ExperimentConfig {
            policies: vec![PolicyKind::U, PolicyKind::M, PolicyKind::R],
            ..base
        },
        "E3" => ExperimentConfig {
            data_sizes: vec![50_000, 100_000, 200_000, 500_000],
            ..base
        },
        other => return Err(XctlError::UnknownPreset(other.to_string())),
    })
}

fn has_duplicates<T: Ord + Clone>(xs: &[T]) -> bool {
    let mut v = xs.to_vec();
    v.sort();
    v.windows(2).any(|w| w[0] == w[1])
}

/// Every rule the config breaks, each naming the field.
pub fn validate_config(cfg: &ExperimentConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut bad = |field: &str, rule: &str| out.push(format!("{field}: {rule}"));
    if cfg.roster.is_empty() {
        bad("roster", "must not be empty");
    }
    if has_duplicates(&cfg.roster) {
        bad("roster", "models must be unique");
    }
    if cfg.seeds.is_empty() {
        bad("seeds", "must not be empty");
    }
    if has_duplicates(&cfg.seeds) {
        bad("seeds", "seeds must be unique");
    }
    if cfg.significance && cfg.seeds.len() < MIN_RUNS {
        bad(
            "seeds",
            &format!("significance testing needs at least {MIN_RUNS} seeds"),
        );
    }
    if cfg.policies.is_empty() {
        bad("policies", "must not be empty");
    }
    if has_duplicates(&cfg.policies) {
        bad("policies", "policies must be unique");
    }
    if cfg.data_sizes.is_empty() {
        bad("data_sizes", "must not be empty");
    }
    if has_duplicates(&cfg.data_sizes) {
        bad("data_sizes", "sizes must be unique");
    }
    if cfg.data_sizes.iter().any(|&n| n < 6 * STEPS) {
        bad(
            "data_sizes",
            &format!(
                "each size needs at least {} transitions for a 4:1:1 split",
                6 * STEPS
            ),
        );
    }
    let hp = &cfg.hyperparams;
    if !(hp.gamma > 0.0 && hp.gamma < 1.0) {
        bad("hyperparams.gamma", "discount out of (0,1)");
    }
    if let Err(e) = hp.validate() {
        if hp.gamma >= 0.0 && hp.gamma < 1.0 {
            bad("hyperparams", &e.to_string());
        }
    }
    for (name, lr) in &cfg.lr_overrides {
        if !AgentKind::ROSTER.iter().any(|k| k.name() == name) {
            bad("lr_overrides", &format!("unknown agent kind `{name}`"));
        }
        if !(*lr > 0.0 && lr.is_finite()) {
            bad(
                "lr_overrides",
                &format!("learning rate for {name} must be > 0"),
            );
        }
    }
    if hp.iterations == 0 {
        bad("hyperparams.iterations", "must be >= 1");
    }
    if cfg.eval_episodes == 0 {
        bad("eval_episodes", "must be >= 1");
    }
    if cfg.select_episodes == 0 && cfg.roster.contains(&ModelId::DqnBest) {
        bad(
            "select_episodes",
            "window selection needs at least one episode",
        );
    }
    if cfg.curve_episodes == 0 && hp.eval_every > 0 {
        bad(
            "curve_episodes",
            "learning curves need at least one episode",
        );
    }
    if cfg.agent.hidden == 0 || cfg.agent.head_hidden == 0 {
        bad("agent", "layer sizes must be >= 1");
    }
    let logged = cfg.policies.iter().any(|p| *p != PolicyKind::U);
    if logged && cfg.campaign.donors == 0 {
        bad(
            "campaign.donors",
            "policies M and R need a non-empty campaign log",
        );
    }
    out
}

/// One job: a model trained on one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunKey {
    pub policy: PolicyKind,
    pub data_size: usize,
    pub model: ModelId,
    pub seed: u64,
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} policy={} size={} seed={}",
            self.model, self.policy, self.data_size, self.seed
        )
    }
}

impl RunKey {
    fn file_stem(&self) -> String {
        format!(
            "{}_{}_{}_{}",
            self.policy,
            self.data_size,
            self.seed,
            self.model.file_stem()
        )
    }

    fn data_seed(&self) -> u64 {
        named_seed(
            derive_seed(self.seed, self.data_size as u64),
            self.policy.name(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub key: RunKey,
    /// Undiscounted per-step reward of greedy rollouts, in dollars.
    pub avg_reward: f64,
    pub discounted_return: f64,
    /// Window picked for the window-selected DQN.
    pub window: Option<usize>,
    /// `(iteration, eval reward)` learning-curve checkpoints.
    pub curve: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunResult>,
    pub failures: Vec<(RunKey, String)>,
    /// One report per (policy, data size), in canonical order.
    pub reports: Vec<EvalReport>,
    pub output_dir: PathBuf,
}

impl ExperimentOutcome {
    pub fn report(&self, policy: PolicyKind, data_size: usize) -> Option<&EvalReport> {
        self.reports
            .iter()
            .find(|r| r.policy == policy && r.data_size == data_size)
    }

    /// Per-seed rewards of one model in one setting, in seed order.
    pub fn values(&self, model: ModelId, policy: PolicyKind, data_size: usize) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| {
                r.key.model == model && r.key.policy == policy && r.key.data_size == data_size
            })
            .map(|r| r.avg_reward)
            .collect()
    }
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    sim: &'a SimulatorSpec,
    agent_cfg: AgentConfig,
    cache_dir: PathBuf,
    checkpoint_dir: PathBuf,
}

struct Splits {
    train: Dataset,
    valid: Dataset,
}

fn behavior(
    kind: PolicyKind,
    log: Option<&Arc<Dataset>>,
) -> std::result::Result<BehaviorPolicy, String> {
    match (kind, log) {
        (PolicyKind::U, _) => Ok(BehaviorPolicy::Uniform),
        (k, Some(log)) => BehaviorPolicy::from_log(k, log).map_err(|e| e.to_string()),
        (k, None) => Err(format!("policy {k} needs a campaign log")),
    }
}

impl Context<'_> {
    fn cache_path(&self, key: &RunKey) -> PathBuf {
        self.cache_dir.join(format!("{}.json", key.file_stem()))
    }

    fn cached(&self, key: &RunKey) -> Option<RunResult> {
        let s = fs::read_to_string(self.cache_path(key)).ok()?;
        serde_json::from_str::<RunResult>(&s)
            .ok()
            .filter(|r| r.key == *key)
    }

    fn data(
        &self,
        key: &RunKey,
        log: Option<&Arc<Dataset>>,
    ) -> std::result::Result<Splits, String> {
        let policy = behavior(key.policy, log)?;
        let seed = key.data_seed();
        let ds =
            generate_dataset(self.sim, &policy, key.data_size, seed).map_err(|e| e.to_string())?;
        let (train, valid, _) = split_dataset(&ds, seed).map_err(|e| e.to_string())?;
        Ok(Splits { train, valid })
    }

    fn train(
        &self,
        key: &RunKey,
        kind: AgentKind,
        separate: bool,
        data: &Splits,
    ) -> std::result::Result<(Agent, TrainLog), String> {
        let data_seed = key.data_seed();
        let mut agent = Agent::new(
            kind,
            &self.agent_cfg,
            named_seed(data_seed, &format!("init/{kind}")),
        )
        .map_err(|e| e.to_string())?;
        let hp = Hyperparams {
            seed: named_seed(data_seed, &format!("train/{kind}")),
            lr: self
                .cfg
                .lr_overrides
                .get(kind.name())
                .copied()
                .unwrap_or(self.cfg.hyperparams.lr),
            ..self.cfg.hyperparams.clone()
        };
        let curve_seed = named_seed(key.seed, "curve");
        let mut eval = |a: &Agent| {
            evaluate_policy(self.sim, a, self.cfg.curve_episodes, curve_seed)
                .map(|v| v.per_step)
                .map_err(|e| TrainError::Eval(e.to_string()))
        };
        let hook: Option<EvalHook<'_>> = (hp.eval_every > 0).then_some(&mut eval);
        let log = if separate {
            train_separate_hybrid(
                &mut agent,
                &data.train,
                &data.valid,
                &hp,
                hp.iterations,
                hook,
            )
        } else {
            train_agent(&mut agent, &data.train, &hp, hook)
        }
        .map_err(|e| e.to_string())?;
        Ok((agent, log))
    }

    fn run(&self, key: RunKey, data: &Splits) -> std::result::Result<RunResult, String> {
        let (agent, log, window) = match key.model {
            ModelId::Agent(k) => {
                let (a, l) = self.train(&key, k, false, data)?;
                (a, l, k.window())
            }
            ModelId::Separate(k) => {
                let (a, l) = self.train(&key, k, true, data)?;
                (a, l, None)
            }
            ModelId::DqnBest => {
                let select_seed = named_seed(key.seed, "select");
                let mut best: Option<(f64, Agent, TrainLog, usize)> = None;
                for w in DQN_WINDOWS {
                    let (a, l) = self.train(&key, AgentKind::Dqn { window: w }, false, data)?;
                    let v = evaluate_policy(self.sim, &a, self.cfg.select_episodes, select_seed)
                        .map_err(|e| e.to_string())?
                        .per_step;
                    if best.as_ref().is_none_or(|b| v > b.0) {
                        best = Some((v, a, l, w));
                    }
                }
                let (_, a, l, w) = best.expect("at least one window");
                (a, l, Some(w))
            }
        };
        let value = evaluate_policy(
            self.sim,
            &agent,
            self.cfg.eval_episodes,
            named_seed(key.seed, "eval"),
        )
        .map_err(|e| e.to_string())?;
        if self.cfg.save_checkpoints {
            let path = self
                .checkpoint_dir
                .join(format!("{}.json", key.file_stem()));
            agent.checkpoint().save(&path).map_err(|e| e.to_string())?;
        }
        let result = RunResult {
            key,
            avg_reward: value.per_step,
            discounted_return: value.discounted,
            window,
            curve: log.checkpoints(),
        };
        let json = serde_json::to_string(&result).map_err(|e| e.to_string())?;
        fs::write(self.cache_path(&key), json).map_err(|e| e.to_string())?;
        Ok(result)
    }
}

/// Runs every job of `cfg` and writes `runs.csv`, `summary.csv`,
/// `curves.csv` and `config.snapshot.json` (the given document verbatim,
/// or the serialized config) into the output directory. Jobs finished by an
/// earlier run with the same config are loaded from the cache. Failed jobs
/// are reported in the outcome and in `failures.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, document: Option<&str>) -> Result<ExperimentOutcome> {
    let violations = validate_config(cfg);
    if !violations.is_empty() {
        return Err(XctlError::Invalid(violations));
    }
    let sim = cfg.world.build()?;
    let out = cfg.output_dir.clone();
    let ctx = Context {
        cfg,
        sim: &sim,
        agent_cfg: AgentConfig {
            world: sim.config.clone(),
            hidden: cfg.agent.hidden,
            head_hidden: cfg.agent.head_hidden,
        },
        cache_dir: out.join("cache").join(cfg.hash()),
        checkpoint_dir: out.join("checkpoints"),
    };
    for dir in [&out, &ctx.cache_dir, &ctx.checkpoint_dir] {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let snapshot = out.join("config.snapshot.json");
    let doc = document.map_or_else(|| cfg.to_document(), str::to_string);
    fs::write(&snapshot, doc).map_err(|e| io_err(&snapshot, e))?;

    let needs_log = cfg.policies.iter().any(|p| *p != PolicyKind::U);
    let log = if needs_log {
        Some(Arc::new(
            campaign_log(&sim, cfg.campaign.donors, cfg.campaign.seed)
                .map_err(|e| XctlError::World(e.to_string()))?,
        ))
    } else {
        None
    };

    let mut groups = Vec::new();
    for &policy in &cfg.policies {
        for &data_size in &cfg.data_sizes {
            for &seed in &cfg.seeds {
                groups.push((policy, data_size, seed));
            }
        }
    }
    let run_all = || -> Vec<(RunKey, std::result::Result<RunResult, String>)> {
        groups
            .par_iter()
            .flat_map_iter(|&(policy, data_size, seed)| {
                let keys: Vec<RunKey> = cfg
                    .roster
                    .iter()
                    .map(|&model| RunKey {
                        policy,
                        data_size,
                        model,
                        seed,
                    })
                    .collect();
                let cached: Vec<Option<RunResult>> = keys.iter().map(|k| ctx.cached(k)).collect();
                if cached.iter().all(Option::is_some) {
                    return keys
                        .into_iter()
                        .zip(cached.into_iter().map(|c| Ok(c.expect("cached"))))
                        .collect();
                }
                let data = ctx.data(&keys[0], log.as_ref());
                keys.into_par_iter()
                    .zip(cached)
                    .map(|(k, c)| {
                        let r = match (c, &data) {
                            (Some(c), _) => Ok(c),
                            (None, Ok(d)) => ctx.run(k, d),
                            (None, Err(e)) => Err(format!("data generation: {e}")),
                        };
                        (k, r)
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let mut results = if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| XctlError::Io(e.to_string()))?
            .install(run_all)
    } else {
        run_all()
    };
    results.sort_by_key(|(k, _)| *k);

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (k, r) in results {
        match r {
            Ok(r) => runs.push(r),
            Err(e) => failures.push((k, e)),
        }
    }
    let reports = build_reports(cfg, &runs);
    write_runs(&out.join("runs.csv"), &runs)?;
    write_summary(&out.join("summary.csv"), cfg, &runs, &reports)?;
    write_curves(&out.join("curves.csv"), cfg, &runs)?;
    let fail_path = out.join("failures.csv");
    if failures.is_empty() {
        let _ = fs::remove_file(&fail_path);
    } else {
        write_failures(&fail_path, &failures)?;
    }
    Ok(ExperimentOutcome {
        runs,
        failures,
        reports,
        output_dir: out,
    })
}

fn settings(cfg: &ExperimentConfig) -> Vec<(PolicyKind, usize)> {
    let mut v: Vec<_> = cfg
        .policies
        .iter()
        .flat_map(|&p| cfg.data_sizes.iter().map(move |&n| (p, n)))
        .collect();
    v.sort();
    v
}

fn build_reports(cfg: &ExperimentConfig, runs: &[RunResult]) -> Vec<EvalReport> {
    settings(cfg)
        .into_iter()
        .map(|(policy, size)| {
            let mut by_model: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in runs
                .iter()
                .filter(|r| r.key.policy == policy && r.key.data_size == size)
            {
                by_model
                    .entry(r.key.model.to_string())
                    .or_default()
                    .push(r.avg_reward);
            }
            EvalReport::from_runs(policy, size, cfg.seeds.clone(), &by_model)
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| io_err(path, e))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| io_err(path, e))
}

fn write_runs(path: &Path, runs: &[RunResult]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let row = |w: &mut csv::Writer<fs::File>, rec: Vec<String>| {
        w.write_record(rec).map_err(|e| io_err(path, e))
    };
    row(
        &mut w,
        [
            "model",
            "policy",
            "data_size",
            "seed",
            "avg_reward",
            "discounted_return",
            "dqn_window",
        ]
        .map(String::from)
        .to_vec(),
    )?;
    for r in runs {
        row(
            &mut w,
            vec![
                r.key.model.to_string(),
                r.key.policy.to_string(),
                r.key.data_size.to_string(),
                r.key.seed.to_string(),
                r.avg_reward.to_string(),
                r.discounted_return.to_string(),
                r.window.map(|w| w.to_string()).unwrap_or_default(),
            ],
        )?;
    }
    finish(w, path)
}

fn write_summary(
    path: &Path,
    cfg: &ExperimentConfig,
    runs: &[RunResult],
    reports: &[EvalReport],
) -> Result<()> {
    let mut w = csv_writer(path)?;
    let names: Vec<String> = cfg.roster.iter().map(ToString::to_string).collect();
    let mut header: Vec<String> = [
        "policy",
        "data_size",
        "model",
        "n_runs",
        "mean",
        "std",
        "dqn_windows",
    ]
    .map(String::from)
    .to_vec();
    header.extend(names.iter().map(|n| format!("p_vs_{n}")));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for rep in reports {
        for (model, name) in cfg.roster.iter().zip(&names) {
            let Some(m) = rep.model(name) else { continue };
            let windows: Vec<String> = runs
                .iter()
                .filter(|r| {
                    r.key.model == *model
                        && r.key.policy == rep.policy
                        && r.key.data_size == rep.data_size
                })
                .filter_map(|r| r.window.map(|w| w.to_string()))
                .collect();
            let mut rec = vec![
                rep.policy.to_string(),
                rep.data_size.to_string(),
                name.clone(),
                m.n_runs.to_string(),
                m.mean.to_string(),
                m.std.to_string(),
                if *model == ModelId::DqnBest {
                    windows.join(";")
                } else {
                    String::new()
                },
            ];
            rec.extend(names.iter().map(|other| {
                if other == name {
                    String::new()
                } else {
                    rep.p_value(name, other)
                        .map(|p| p.to_string())
                        .unwrap_or_default()
                }
            }));
            w.write_record(&rec).map_err(|e| io_err(path, e))?;
        }
    }
    finish(w, path)
}

fn write_curves(path: &Path, cfg: &ExperimentConfig, runs: &[RunResult]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "policy",
        "data_size",
        "model",
        "iteration",
        "mean",
        "std",
        "n",
    ])
    .map_err(|e| io_err(path, e))?;
    for (policy, size) in settings(cfg) {
        for model in &cfg.roster {
            let logs: Vec<TrainLog> = runs
                .iter()
                .filter(|r| {
                    r.key.model == *model && r.key.policy == policy && r.key.data_size == size
                })
                .filter(|r| !r.curve.is_empty())
                .map(|r| {
                    let mut log = TrainLog::default();
                    for &(i, v) in &r.curve {
                        log.push(i, None, None);
                        log.set_eval(i, v);
                    }
                    log
                })
                .collect();
            // Two-phase runs stop phase 1 at different points, so their
            // schedules may not line up; those curves are left out.
            let Ok(curve) = assemble_learning_curve(&logs) else {
                continue;
            };
            for p in curve {
                w.write_record([
                    policy.to_string(),
                    size.to_string(),
                    model.to_string(),
                    p.iteration.to_string(),
                    p.mean.to_string(),
                    p.std.to_string(),
                    p.n.to_string(),
                ])
                .map_err(|e| io_err(path, e))?;
            }
        }
    }
    finish(w, path)
}

fn write_failures(path: &Path, failures: &[(RunKey, String)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["model", "policy", "data_size", "seed", "error"])
        .map_err(|e| io_err(path, e))?;
    for (k, e) in failures {
        w.write_record([
            k.model.to_string(),
            k.policy.to_string(),
            k.data_size.to_string(),
            k.seed.to_string(),
            e.clone(),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    finish(w, path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimCheck {
    /// Largest total-variation distance between next-observation
    /// frequencies and the stored table rows over the probe states.
    pub max_tv: f64,
    pub uniform_mean_reward: f64,
    pub steps_per_probe: usize,
}

/// Samples `steps` one-step transitions from a few probe states and
/// compares their frequencies with the tables; also reports the mean reward
/// of uniformly random actions.
pub fn simcheck(sim: &SimulatorSpec, steps: usize, seed: u64) -> Result<SimCheck> {
    sim.validate()
        .map_err(|e| XctlError::World(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_tv: f64 = 0.0;
    let probes = sim.initial.iter().take(3).zip([0usize, 5, 11]);
    for (&obs, a) in probes {
        let a = ActionId::new(a).expect("valid action");
        let mut base = sim_reset(sim, &mut rng);
        base.obs = obs;
        let mut counts: Vec<Vec<f64>> = sim
            .config
            .cardinalities
            .iter()
            .map(|&k| vec![0.0; k])
            .collect();
        let mut donated = false;
        for _ in 0..steps {
            let mut st = base.clone();
            let o =
                sim_step(sim, &mut st, a, &mut rng).map_err(|e| XctlError::World(e.to_string()))?;
            donated = o.reward > 0.0;
            for (d, c) in counts.iter_mut().enumerate() {
                c[o.obs.get(d)] += 1.0;
            }
        }
        for (d, c) in counts.iter().enumerate().take(OBS_DIMS) {
            let row = sim.tables.row(d, obs.get(d), a, donated);
            let tv = 0.5
                * c.iter()
                    .zip(row)
                    .map(|(n, p)| (n / steps as f64 - p).abs())
                    .sum::<f64>();
            max_tv = max_tv.max(tv);
        }
    }
    let uniform = evaluate_behavior(
        sim,
        &BehaviorPolicy::Uniform,
        2000,
        named_seed(seed, "uniform"),
    )
    .map_err(|e| XctlError::World(e.to_string()))?;
    Ok(SimCheck {
        max_tv,
        uniform_mean_reward: uniform.per_step,
        steps_per_probe: steps,
    })
}
