//! Policy evaluation, multi-seed aggregation and significance testing.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::Statistics;
use thiserror::Error;

use crate::simworld::{
    generate_dataset, ActionId, BehaviorPolicy, Dataset, Observation, PolicyKind, SequentialPolicy,
    SimError, SimulatorSpec, NUM_ACTIONS, STEPS,
};
use crate::trainers::TrainLog;

/// Discount used for the diagnostic discounted return.
pub const DIAGNOSTIC_GAMMA: f64 = 0.9;
/// Evaluation episodes per run unless configured otherwise.
pub const DEFAULT_EVAL_EPISODES: usize = 2000;
/// Smallest sample size accepted by [`significance_test`].
pub const MIN_RUNS: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least one evaluation episode")]
    NoEpisodes,
    #[error("significance test needs at least {MIN_RUNS} runs per side, got {0} and {1}")]
    TooFewRuns(usize, usize),
    #[error("test dataset is empty")]
    EmptyDataset,
    #[error("learning curves have mismatched checkpoint schedules")]
    MismatchedSchedules,
    #[error("no training logs given")]
    NoLogs,
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Outcome of greedy rollouts in the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyValue {
    /// Undiscounted average reward per step, in dollars.
    pub per_step: f64,
    /// Mean discounted episode return at [`DIAGNOSTIC_GAMMA`].
    pub discounted: f64,
    pub episodes: usize,
}

fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Rolls `policy` out for `n_episodes` seeded episodes. The policy is cloned
/// per episode, so the caller's copy is never touched.
pub fn evaluate_policy(
    sim: &SimulatorSpec,
    policy: &dyn SequentialPolicy,
    n_episodes: usize,
    seed: u64,
) -> Result<PolicyValue> {
    evaluate_behavior(
        sim,
        &BehaviorPolicy::Greedy(policy.clone_box()),
        n_episodes,
        seed,
    )
}

/// [`evaluate_policy`] for any behavior policy, e.g. the logging policies.
pub fn evaluate_behavior(
    sim: &SimulatorSpec,
    policy: &BehaviorPolicy,
    n_episodes: usize,
    seed: u64,
) -> Result<PolicyValue> {
    if n_episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    let ds = generate_dataset(sim, policy, n_episodes * STEPS, seed)?;
    let discounted = ds
        .trajectories()
        .iter()
        .map(|t| discounted_return(&t.rewards, DIAGNOSTIC_GAMMA))
        .sum::<f64>()
        / ds.len() as f64;
    Ok(PolicyValue {
        per_step: ds.mean_reward(),
        discounted,
        episodes: ds.len(),
    })
}

/// Two-sided Welch t-test p-value.
pub fn significance_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < MIN_RUNS || b.len() < MIN_RUNS {
        return Err(EvalError::TooFewRuns(a.len(), b.len()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (a.mean(), b.mean());
    let (va, vb) = (a.variance() / na, b.variance() / nb);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    Ok((2.0 * dist.cdf(-t.abs())).min(1.0))
}

/// Sample mean and standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = xs.mean();
    let s = if xs.len() > 1 { xs.std_dev() } else { 0.0 };
    (m, s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SameDeviatedResult {
    /// `None` when no step agreed with the log.
    pub same_mean: Option<f64>,
    pub deviated_mean: Option<f64>,
    pub same_count: usize,
    pub deviated_count: usize,
}

/// Replays logged trajectories, feeding the policy the logged history, and
/// splits transitions by whether its action agrees with the logged one.
pub fn same_deviated_eval(
    policy: &dyn SequentialPolicy,
    test: &Dataset,
) -> Result<SameDeviatedResult> {
    if test.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut p = policy.clone_box();
    let (mut same, mut dev) = (Vec::new(), Vec::new());
    for traj in test.trajectories() {
        p.reset();
        for t in 0..traj.actions.len() {
            let prev = (t > 0).then(|| (traj.actions[t - 1], traj.rewards[t - 1]));
            let a = p.act(&traj.observations[t], prev)?;
            if a == traj.actions[t] {
                same.push(traj.rewards[t]);
            } else {
                dev.push(traj.rewards[t]);
            }
        }
    }
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(SameDeviatedResult {
        same_mean: avg(&same),
        deviated_mean: avg(&dev),
        same_count: same.len(),
        deviated_count: dev.len(),
    })
}

type HistoryKey = Vec<(Observation, Option<(u8, u64)>)>;

/// Memorizes a test log. On a logged history it agrees with the log exactly
/// when the logged reward beats `threshold`; anywhere else it picks an
/// action by hashing the history.
#[derive(Debug, Clone)]
pub struct CherryPicker {
    table: std::sync::Arc<HashMap<HistoryKey, (ActionId, f64)>>,
    threshold: f64,
    history: HistoryKey,
}

impl CherryPicker {
    pub fn new(test: &Dataset, threshold: f64) -> Self {
        let mut table = HashMap::new();
        for traj in test.trajectories() {
            let mut h = Vec::new();
            for t in 0..traj.actions.len() {
                let prev = (t > 0).then(|| (traj.actions[t - 1], traj.rewards[t - 1]));
                h.push(key_step(&traj.observations[t], prev));
                table
                    .entry(h.clone())
                    .or_insert((traj.actions[t], traj.rewards[t]));
            }
        }
        Self {
            table: std::sync::Arc::new(table),
            threshold,
            history: Vec::new(),
        }
    }
}

fn key_step(obs: &Observation, prev: Option<(ActionId, f64)>) -> (Observation, Option<(u8, u64)>) {
    (*obs, prev.map(|(a, r)| (a.index() as u8, r.to_bits())))
}

fn hash_action(h: &HistoryKey) -> ActionId {
    use std::hash::{Hash, Hasher};
    let mut s = std::collections::hash_map::DefaultHasher::new();
    h.hash(&mut s);
    ActionId::new((crate::seeding::mix64(s.finish()) % NUM_ACTIONS as u64) as usize)
        .expect("in range")
}

impl SequentialPolicy for CherryPicker {
    fn reset(&mut self) {
        self.history.clear();
    }

    fn act(
        &mut self,
        obs: &Observation,
        prev: Option<(ActionId, f64)>,
    ) -> crate::simworld::Result<ActionId> {
        self.history.push(key_step(obs, prev));
        Ok(match self.table.get(&self.history) {
            Some(&(a, r)) if r > self.threshold => a,
            Some(&(a, _)) => ActionId::new((a.index() + 1) % NUM_ACTIONS).expect("in range"),
            None => hash_action(&self.history),
        })
    }

    fn clone_box(&self) -> Box<dyn SequentialPolicy> {
        Box::new(self.clone())
    }
}

/// One row of a learning curve table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Per-checkpoint mean and standard deviation of evaluation reward across
/// logs that share a checkpoint schedule.
pub fn assemble_learning_curve(logs: &[TrainLog]) -> Result<Vec<CurvePoint>> {
    let first = logs.first().ok_or(EvalError::NoLogs)?.checkpoints();
    let all: Vec<Vec<(usize, f64)>> = logs.iter().map(|l| l.checkpoints()).collect();
    let schedule: Vec<usize> = first.iter().map(|c| c.0).collect();
    if all
        .iter()
        .any(|c| c.iter().map(|x| x.0).ne(schedule.iter().copied()))
    {
        return Err(EvalError::MismatchedSchedules);
    }
    Ok(schedule
        .iter()
        .enumerate()
        .map(|(k, &iteration)| {
            let vals: Vec<f64> = all.iter().map(|c| c[k].1).collect();
            let (mean, std) = mean_std(&vals);
            CurvePoint {
                iteration,
                mean,
                std,
                n: vals.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseP {
    pub a: String,
    pub b: String,
    /// `None` when either side has fewer than [`MIN_RUNS`] runs.
    pub p_value: Option<f64>,
}

/// Aggregated results for one (policy, data size) setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: PolicyKind,
    pub data_size: usize,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelSummary>,
    pub pairwise: Vec<PairwiseP>,
}

impl EvalReport {
    /// Builds a report from per-model run values, ordered by model name.
    pub fn from_runs(
        policy: PolicyKind,
        data_size: usize,
        seeds: Vec<u64>,
        runs: &BTreeMap<String, Vec<f64>>,
    ) -> Self {
        let models = runs
            .iter()
            .map(|(m, v)| {
                let (mean, std) = mean_std(v);
                ModelSummary {
                    model: m.clone(),
                    mean,
                    std,
                    n_runs: v.len(),
                }
            })
            .collect();
        let names: Vec<&String> = runs.keys().collect();
        let mut pairwise = Vec::new();
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                pairwise.push(PairwiseP {
                    a: (*a).clone(),
                    b: (*b).clone(),
                    p_value: significance_test(&runs[*a], &runs[*b]).ok(),
                });
            }
        }
        Self {
            policy,
            data_size,
            seeds,
            models,
            pairwise,
        }
    }

    pub fn model(&self, name: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.model == name)
    }

    pub fn p_value(&self, a: &str, b: &str) -> Option<f64> {
        self.pairwise
            .iter()
            .find(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a))
            .and_then(|p| p.p_value)
    }
}
