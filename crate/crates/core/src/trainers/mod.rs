//! Training procedures: supervised reward regression, offline Q-learning
//! with a frozen target network, and joint or two-phase training of the
//! hybrid models.

mod log;
mod tabular;

pub use log::{TrainLog, TrainRecord};
pub use tabular::{q_learning_tabular_update, TabularQ};

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{softmax, Agent, AgentError, AgentKind};
use crate::numkit::{
    clip_grad_norm, sgd_step, GradBuffers, Net, NetParams, NetSpec, NumError, Params,
};
use crate::seeding::named_seed;
use crate::simworld::{Dataset, Trajectory, STEPS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{op} cannot train {kind}")]
    WrongKind { op: &'static str, kind: AgentKind },
    #[error("{what} diverged at iteration {iteration}; try a smaller learning rate")]
    Diverged {
        what: &'static str,
        iteration: usize,
    },
    #[error("non-finite TD target")]
    NonFiniteTarget,
    #[error("invalid hyperparameters: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyData,
    #[error("evaluation failed: {0}")]
    Eval(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub gamma: f64,
    pub lr: f64,
    /// When set, supervised reward regression only uses transitions with
    /// `r > tau`.
    pub tau: Option<f64>,
    /// Trajectories per minibatch; transition-level models draw
    /// `batch_size * 22` transitions instead.
    pub batch_size: usize,
    pub iterations: usize,
    /// Target network is synced every `target_sync` iterations.
    pub target_sync: usize,
    pub seed: u64,
    pub reward_scale: f64,
    pub obs_loss_weight: f64,
    pub reward_loss_weight: f64,
    pub td_loss_weight: f64,
    pub grad_clip: Option<f64>,
    /// Evaluation checkpoint period in iterations; 0 disables.
    pub eval_every: usize,
    /// Two-phase hybrid training: validation checks between which the SL
    /// loss may fail to improve before phase 1 stops.
    pub patience: usize,
    pub check_every: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            lr: 0.1,
            tau: None,
            batch_size: 32,
            iterations: 1000,
            target_sync: 100,
            seed: 0,
            reward_scale: 0.01,
            obs_loss_weight: 1.0,
            reward_loss_weight: 1.0,
            td_loss_weight: 1.0,
            grad_clip: Some(5.0),
            eval_every: 0,
            patience: 5,
            check_every: 50,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1)");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be > 0");
        }
        if self.batch_size == 0 || self.target_sync == 0 || self.check_every == 0 {
            return bad("batch_size, target_sync and check_every must be >= 1");
        }
        if !(self.reward_scale > 0.0) {
            return bad("reward_scale must be > 0");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be > 0");
            }
        }
        Ok(())
    }

    fn sync_due(&self, iteration: usize) -> bool {
        iteration.is_multiple_of(self.target_sync)
    }

    fn eval_due(&self, iteration: usize) -> bool {
        self.eval_every > 0 && iteration.is_multiple_of(self.eval_every)
    }
}

/// Called at evaluation checkpoints with the current agent; returns the
/// average per-step reward to log.
pub type EvalHook<'a> = &'a mut dyn FnMut(&Agent) -> Result<f64>;

/// A logged transition in network-input form, for transition-level
/// Q-learning. `next = None` marks a terminal transition.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatTransition {
    pub x: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next: Option<Vec<f64>>,
}

/// Minibatch for [`q_learning_param_update`].
#[derive(Debug, Clone, Copy)]
pub enum TdBatch<'a> {
    /// `(trajectory, step)` pairs for feed-forward Q-networks.
    Transitions(&'a [(&'a Trajectory, usize)]),
    /// Whole trajectories for recurrent Q-networks.
    Sequences(&'a [&'a Trajectory]),
}

fn apply_step(
    net: &mut Net,
    grads: &mut GradBuffers,
    hp: &Hyperparams,
    what: &'static str,
    iteration: usize,
) -> Result<()> {
    if let Some(c) = hp.grad_clip {
        clip_grad_norm(grads, c);
    }
    sgd_step(net.params_mut(), grads, hp.lr)?;
    if !net.params().all_finite() {
        return Err(TrainError::Diverged { what, iteration });
    }
    Ok(())
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Gradient of the mean half squared TD error over flat transitions.
/// Targets come from `target` only.
pub fn fitted_q_grads(
    online: &mut Net,
    target: &Net,
    head: usize,
    batch: &[FlatTransition],
    hp: &Hyperparams,
) -> Result<(f64, GradBuffers)> {
    let xs: Vec<Vec<f64>> = batch.iter().map(|t| t.x.clone()).collect();
    let next_idx: Vec<usize> = (0..batch.len())
        .filter(|&i| batch[i].next.is_some())
        .collect();
    let next_xs: Vec<Vec<f64>> = next_idx
        .iter()
        .filter_map(|&i| batch[i].next.clone())
        .collect();
    let next_q = target.eval_seq(&next_xs, &[head])?;
    let next_q = next_q.head(head).unwrap_or(&[]);
    let mut boot = vec![0.0; batch.len()];
    for (j, &i) in next_idx.iter().enumerate() {
        boot[i] = max(&next_q[j]);
    }
    let out = online.forward_seq(&xs, &[head])?;
    let q = out.head(head).unwrap_or(&[]);
    let n = batch.len().max(1) as f64;
    let mut d = vec![vec![0.0; q.first().map_or(0, |v| v.len())]; batch.len()];
    let mut loss = 0.0;
    for (i, tr) in batch.iter().enumerate() {
        let y = tr.reward + hp.gamma * boot[i];
        if !y.is_finite() {
            return Err(TrainError::NonFiniteTarget);
        }
        let delta = q[i][tr.action] - y;
        loss += 0.5 * delta * delta;
        d[i][tr.action] = hp.td_loss_weight * delta / n;
    }
    let mut heads = vec![None; online.spec().heads.len()];
    heads[head] = Some(d);
    Ok((loss / n, online.backward(&heads)?))
}

/// One SGD step of transition-level Q-learning on a generic network.
pub fn fitted_q_step(
    online: &mut Net,
    target: &Net,
    head: usize,
    batch: &[FlatTransition],
    hp: &Hyperparams,
) -> Result<f64> {
    let (loss, mut g) = fitted_q_grads(online, target, head, batch, hp)?;
    apply_step(online, &mut g, hp, "TD loss", 0)?;
    Ok(loss)
}

/// TD gradient for one recurrent trajectory, added into `grads`. Returns the
/// summed half squared TD error over its 22 steps.
fn recurrent_td_grads(
    online: &mut Net,
    target: &Net,
    head: usize,
    xs: &[Vec<f64>],
    traj: &Trajectory,
    hp: &Hyperparams,
    norm: f64,
    grads: &mut GradBuffers,
) -> Result<f64> {
    let tq = target.eval_seq(xs, &[head])?;
    let tq = tq.head(head).unwrap_or(&[]);
    let out = online.forward_seq(xs, &[head])?;
    let q = out.head(head).unwrap_or(&[]);
    let mut d = vec![vec![0.0; q[0].len()]; xs.len()];
    let mut loss = 0.0;
    for t in 0..xs.len() {
        let boot = if t + 1 < STEPS { max(&tq[t + 1]) } else { 0.0 };
        let y = traj.rewards[t] * hp.reward_scale + hp.gamma * boot;
        if !y.is_finite() {
            return Err(TrainError::NonFiniteTarget);
        }
        let a = traj.actions[t].index();
        let delta = q[t][a] - y;
        loss += 0.5 * delta * delta;
        d[t][a] = hp.td_loss_weight * delta / norm;
    }
    let mut heads = vec![None; online.spec().heads.len()];
    heads[head] = Some(d);
    grads.add_scaled(&online.backward(&heads)?, 1.0)?;
    Ok(loss)
}

fn flat_transitions(
    agent: &Agent,
    batch: &[(&Trajectory, usize)],
    hp: &Hyperparams,
) -> Vec<FlatTransition> {
    batch
        .iter()
        .map(|&(traj, t)| FlatTransition {
            x: agent.encode_at(traj, t),
            action: traj.actions[t].index(),
            reward: traj.rewards[t] * hp.reward_scale,
            next: (t + 1 < STEPS).then(|| agent.encode_at(traj, t + 1)),
        })
        .collect()
}

fn q_head(agent: &Agent, op: &'static str) -> Result<usize> {
    agent.heads().q.ok_or(TrainError::WrongKind {
        op,
        kind: agent.kind(),
    })
}

/// Computes the mean TD loss and its gradient without applying it.
fn td_grads(
    agent: &mut Agent,
    target: &Agent,
    batch: TdBatch<'_>,
    hp: &Hyperparams,
) -> Result<(f64, GradBuffers)> {
    let head = q_head(agent, "q_learning_param_update")?;
    if agent.net().spec() != target.net().spec() {
        return Err(TrainError::Config(
            "online and target networks differ in layout".into(),
        ));
    }
    match batch {
        TdBatch::Transitions(items) => {
            if agent.net().spec().core.is_some() {
                return Err(TrainError::WrongKind {
                    op: "transition-level Q-learning",
                    kind: agent.kind(),
                });
            }
            let flat = flat_transitions(agent, items, hp);
            fitted_q_grads(agent.net_mut(), target.net(), head, &flat, hp)
        }
        TdBatch::Sequences(trajs) => {
            if agent.net().spec().core.is_none() {
                return Err(TrainError::WrongKind {
                    op: "sequence Q-learning",
                    kind: agent.kind(),
                });
            }
            let norm = (trajs.len() * STEPS).max(1) as f64;
            let mut grads = agent.net().params().zeros_like();
            let mut loss = 0.0;
            for traj in trajs {
                let xs = agent.encode_trajectory(traj, STEPS);
                loss += recurrent_td_grads(
                    agent.net_mut(),
                    target.net(),
                    head,
                    &xs,
                    traj,
                    hp,
                    norm,
                    &mut grads,
                )?;
            }
            Ok((loss / norm, grads))
        }
    }
}

/// One SGD step on the squared TD error, with bootstrap targets from the
/// frozen `target` agent and zero bootstrap after step 22.
pub fn q_learning_param_update(
    agent: &mut Agent,
    target: &Agent,
    batch: TdBatch<'_>,
    hp: &Hyperparams,
) -> Result<f64> {
    let (loss, mut g) = td_grads(agent, target, batch, hp)?;
    apply_step(agent.net_mut(), &mut g, hp, "TD loss", 0)?;
    Ok(loss)
}

/// Copies the online weights into the target.
pub fn target_network_sync(agent: &Agent, target: &mut Agent) -> Result<()> {
    if agent.net().spec() != target.net().spec() {
        return Err(TrainError::Config(
            "cannot sync networks with different layouts".into(),
        ));
    }
    target.net_mut().set_params(agent.net().params().clone())?;
    Ok(())
}

struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(named_seed(seed, "minibatch")),
        }
    }

    fn trajectories<'a>(&mut self, ds: &'a Dataset, n: usize) -> Vec<&'a Trajectory> {
        let all = ds.trajectories();
        (0..n)
            .map(|_| &all[self.rng.random_range(0..all.len())])
            .collect()
    }

    fn transitions<'a>(&mut self, ds: &'a Dataset, n: usize) -> Vec<(&'a Trajectory, usize)> {
        let all = ds.trajectories();
        (0..n)
            .map(|_| {
                (
                    &all[self.rng.random_range(0..all.len())],
                    self.rng.random_range(0..STEPS),
                )
            })
            .collect()
    }
}

fn check_data(ds: &Dataset, hp: &Hyperparams) -> Result<()> {
    hp.validate()?;
    if ds.is_empty() {
        return Err(TrainError::EmptyData);
    }
    Ok(())
}

fn checkpoint(
    log: &mut TrainLog,
    iteration: usize,
    agent: &mut Agent,
    hp: &Hyperparams,
    hook: &mut Option<EvalHook<'_>>,
) -> Result<()> {
    if hp.eval_due(iteration) {
        if let Some(h) = hook.as_mut() {
            agent.reset();
            let r = h(agent)?;
            agent.reset();
            log.set_eval(iteration, r);
        }
    }
    Ok(())
}

fn included(r: f64, hp: &Hyperparams) -> bool {
    hp.tau.is_none_or(|tau| r > tau)
}

/// Mean squared error, in dollars squared, of an SL agent's predicted reward
/// for the logged action over every transition of `ds`.
pub fn sl_mse(agent: &Agent, ds: &Dataset, hp: &Hyperparams) -> Result<f64> {
    let head = agent
        .heads()
        .reward
        .filter(|_| agent.kind().is_sl())
        .ok_or(TrainError::WrongKind {
            op: "sl_mse",
            kind: agent.kind(),
        })?;
    if ds.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut total = 0.0;
    for traj in ds.trajectories() {
        let out = agent
            .net()
            .eval_seq(&agent.encode_trajectory(traj, STEPS), &[head])?;
        for (t, y) in out.head(head).unwrap_or_default().iter().enumerate() {
            let err = y[traj.actions[t].index()] / hp.reward_scale - traj.rewards[t];
            total += err * err;
        }
    }
    Ok(total / ds.num_transitions() as f64)
}

/// Supervised regression of the taken action's predicted reward onto the
/// scaled logged reward.
pub fn train_sl(
    agent: &mut Agent,
    train: &Dataset,
    hp: &Hyperparams,
    mut hook: Option<EvalHook<'_>>,
) -> Result<TrainLog> {
    if !agent.kind().is_sl() {
        return Err(TrainError::WrongKind {
            op: "train_sl",
            kind: agent.kind(),
        });
    }
    check_data(train, hp)?;
    let head = agent.heads().reward.ok_or(TrainError::WrongKind {
        op: "train_sl",
        kind: agent.kind(),
    })?;
    let started = Instant::now();
    let mut sampler = Sampler::new(hp.seed);
    let mut log = TrainLog::default();
    let recurrent = agent.net().spec().core.is_some();
    for it in 1..=hp.iterations {
        let n_heads = agent.net().spec().heads.len();
        let (loss, grads) = if recurrent {
            let batch = sampler.trajectories(train, hp.batch_size);
            let kept: usize = batch
                .iter()
                .map(|t| t.rewards.iter().filter(|&&r| included(r, hp)).count())
                .sum();
            let mut grads = agent.net().params().zeros_like();
            let mut loss = 0.0;
            for traj in &batch {
                if kept == 0 {
                    break;
                }
                let xs = agent.encode_trajectory(traj, STEPS);
                let out = agent.net_mut().forward_seq(&xs, &[head])?;
                let y = out.head(head).unwrap_or(&[]);
                let mut d = vec![vec![0.0; y[0].len()]; STEPS];
                for t in 0..STEPS {
                    if !included(traj.rewards[t], hp) {
                        continue;
                    }
                    let a = traj.actions[t].index();
                    let e = y[t][a] - traj.rewards[t] * hp.reward_scale;
                    loss += 0.5 * e * e;
                    d[t][a] = e / kept as f64;
                }
                let mut heads = vec![None; n_heads];
                heads[head] = Some(d);
                grads.add_scaled(&agent.net().backward(&heads)?, 1.0)?;
            }
            (
                if kept == 0 {
                    None
                } else {
                    Some(loss / kept as f64)
                },
                grads,
            )
        } else {
            let batch: Vec<_> = sampler
                .transitions(train, hp.batch_size * STEPS)
                .into_iter()
                .filter(|(t, s)| included(t.rewards[*s], hp))
                .collect();
            if batch.is_empty() {
                (None, agent.net().params().zeros_like())
            } else {
                let xs: Vec<Vec<f64>> = batch.iter().map(|(t, s)| agent.encode_at(t, *s)).collect();
                let out = agent.net_mut().forward_seq(&xs, &[head])?;
                let y = out.head(head).unwrap_or(&[]);
                let n = batch.len() as f64;
                let mut d = vec![vec![0.0; y[0].len()]; batch.len()];
                let mut loss = 0.0;
                for (i, (traj, s)) in batch.iter().enumerate() {
                    let a = traj.actions[*s].index();
                    let e = y[i][a] - traj.rewards[*s] * hp.reward_scale;
                    loss += 0.5 * e * e;
                    d[i][a] = e / n;
                }
                let mut heads = vec![None; n_heads];
                heads[head] = Some(d);
                (Some(loss / n), agent.net().backward(&heads)?)
            }
        };
        if let Some(l) = loss {
            let mut grads = grads;
            apply_step(agent.net_mut(), &mut grads, hp, "SL loss", it)?;
            if !l.is_finite() {
                return Err(TrainError::Diverged {
                    what: "SL loss",
                    iteration: it,
                });
            }
        }
        log.push(it, loss, None);
        checkpoint(&mut log, it, agent, hp, &mut hook)?;
    }
    agent.reset();
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

/// Offline Q-learning on logged data: transition minibatches for the
/// windowed DQN, trajectory minibatches with full unrolls for recurrent
/// Q-networks.
pub fn train_rl(
    agent: &mut Agent,
    train: &Dataset,
    hp: &Hyperparams,
    mut hook: Option<EvalHook<'_>>,
) -> Result<TrainLog> {
    if !agent.kind().is_q() {
        return Err(TrainError::WrongKind {
            op: "train_rl",
            kind: agent.kind(),
        });
    }
    check_data(train, hp)?;
    let started = Instant::now();
    let mut sampler = Sampler::new(hp.seed);
    let mut target = agent.clone();
    let mut log = TrainLog::default();
    let recurrent = agent.net().spec().core.is_some();
    for it in 1..=hp.iterations {
        let (loss, mut g) = if recurrent {
            let batch = sampler.trajectories(train, hp.batch_size);
            td_grads(agent, &target, TdBatch::Sequences(&batch), hp)?
        } else {
            let batch = sampler.transitions(train, hp.batch_size * STEPS);
            td_grads(agent, &target, TdBatch::Transitions(&batch), hp)?
        };
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                what: "TD loss",
                iteration: it,
            });
        }
        apply_step(agent.net_mut(), &mut g, hp, "TD loss", it)?;
        if hp.sync_due(it) {
            target_network_sync(agent, &mut target)?;
        }
        log.push(it, None, Some(loss));
        checkpoint(&mut log, it, agent, hp, &mut hook)?;
    }
    agent.reset();
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

fn hybrid_heads(agent: &Agent, op: &'static str) -> Result<(usize, usize, usize)> {
    let h = agent.heads();
    match (h.obs, h.reward, h.q) {
        (Some(o), Some(r), Some(q)) if agent.kind().is_hybrid() => Ok((o, r, q)),
        _ => Err(TrainError::WrongKind {
            op,
            kind: agent.kind(),
        }),
    }
}

/// Normalizers for the hybrid SL terms: the cross-entropy of a uniform
/// prediction and the variance of the scaled rewards.
#[derive(Debug, Clone, Copy)]
struct SlScale {
    obs: f64,
    reward: f64,
}

impl SlScale {
    fn new(agent: &Agent, ds: &Dataset, hp: &Hyperparams) -> Self {
        let obs = agent
            .config()
            .world
            .cardinalities
            .iter()
            .map(|&k| (k as f64).ln())
            .sum();
        let rs: Vec<f64> = ds
            .trajectories()
            .iter()
            .flat_map(|t| t.rewards.iter().map(|r| r * hp.reward_scale))
            .collect();
        let n = rs.len().max(1) as f64;
        let mean = rs.iter().sum::<f64>() / n;
        let var = rs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        let floor = hp.reward_scale * hp.reward_scale;
        Self {
            obs,
            reward: var.max(floor),
        }
    }
}

/// Next-observation cross-entropy plus reward regression for one
/// trajectory, each normalized by `scale`. Adds the gradient into `grads`
/// and returns the summed weighted loss.
fn hybrid_sl_grads(
    agent: &mut Agent,
    traj: &Trajectory,
    hp: &Hyperparams,
    scale: SlScale,
    norm: f64,
    grads: &mut GradBuffers,
) -> Result<f64> {
    let (ko, kr, _) = hybrid_heads(agent, "hybrid SL step")?;
    let cards = agent.config().world.cardinalities;
    let xs = agent.encode_trajectory(traj, STEPS);
    let out = agent.net_mut().forward_seq(&xs, &[ko, kr])?;
    let logits = out.head(ko).unwrap_or(&[]);
    let preds = out.head(kr).unwrap_or(&[]);
    let wo = hp.obs_loss_weight / scale.obs;
    let wr = hp.reward_loss_weight / scale.reward;
    let mut d_obs = vec![vec![0.0; logits[0].len()]; STEPS];
    let mut d_rew = vec![vec![0.0; preds[0].len()]; STEPS];
    let mut loss = 0.0;
    for t in 0..STEPS {
        let next = &traj.observations[t + 1];
        let mut offset = 0;
        for (d, &k) in cards.iter().enumerate() {
            let p = softmax(&logits[t][offset..offset + k]);
            let target = next.get(d);
            loss -= wo * p[target].max(1e-300).ln();
            for (j, pj) in p.iter().enumerate() {
                let y = if j == target { 1.0 } else { 0.0 };
                d_obs[t][offset + j] = wo * (pj - y) / norm;
            }
            offset += k;
        }
        let a = traj.actions[t].index();
        let e = preds[t][a] - traj.rewards[t] * hp.reward_scale;
        loss += wr * 0.5 * e * e;
        d_rew[t][a] = wr * e / norm;
    }
    let mut heads = vec![None; agent.net().spec().heads.len()];
    heads[ko] = Some(d_obs);
    heads[kr] = Some(d_rew);
    grads.add_scaled(&agent.net().backward(&heads)?, 1.0)?;
    Ok(loss)
}

fn hybrid_sl_step(
    agent: &mut Agent,
    batch: &[&Trajectory],
    hp: &Hyperparams,
    scale: SlScale,
    it: usize,
) -> Result<f64> {
    let norm = (batch.len() * STEPS) as f64;
    let mut grads = agent.net().params().zeros_like();
    let mut loss = 0.0;
    for traj in batch {
        loss += hybrid_sl_grads(agent, traj, hp, scale, norm, &mut grads)?;
    }
    let loss = loss / norm;
    if !loss.is_finite() {
        return Err(TrainError::Diverged {
            what: "SL loss",
            iteration: it,
        });
    }
    apply_step(agent.net_mut(), &mut grads, hp, "SL loss", it)?;
    Ok(loss)
}

/// Mean weighted, normalized SL loss of a hybrid agent over a dataset,
/// without updating. The reward term is normalized by the dataset's own
/// reward variance.
pub fn hybrid_sl_loss(agent: &Agent, ds: &Dataset, hp: &Hyperparams) -> Result<f64> {
    let (ko, kr, _) = hybrid_heads(agent, "hybrid_sl_loss")?;
    let cards = agent.config().world.cardinalities;
    let scale = SlScale::new(agent, ds, hp);
    let (wo, wr) = (
        hp.obs_loss_weight / scale.obs,
        hp.reward_loss_weight / scale.reward,
    );
    let mut total = 0.0;
    for traj in ds.trajectories() {
        let out = agent
            .net()
            .eval_seq(&agent.encode_trajectory(traj, STEPS), &[ko, kr])?;
        let (logits, preds) = (out.head(ko).unwrap_or(&[]), out.head(kr).unwrap_or(&[]));
        for t in 0..STEPS {
            let mut offset = 0;
            for (d, &k) in cards.iter().enumerate() {
                let p = softmax(&logits[t][offset..offset + k]);
                total -= wo * p[traj.observations[t + 1].get(d)].max(1e-300).ln();
                offset += k;
            }
            let e = preds[t][traj.actions[t].index()] - traj.rewards[t] * hp.reward_scale;
            total += wr * 0.5 * e * e;
        }
    }
    Ok(total / (ds.num_transitions().max(1)) as f64)
}

/// Interleaved hybrid training. Each iteration takes one SL step through
/// the heads and the recurrent core, then one TD step on the Q head with the
/// hidden states treated as constants. The target holds a snapshot of both
/// the core and the Q head.
pub fn train_joint_hybrid(
    agent: &mut Agent,
    train: &Dataset,
    hp: &Hyperparams,
    mut hook: Option<EvalHook<'_>>,
) -> Result<TrainLog> {
    hybrid_heads(agent, "train_joint_hybrid")?;
    check_data(train, hp)?;
    let started = Instant::now();
    let mut sampler = Sampler::new(hp.seed);
    let mut target = agent.clone();
    let mut log = TrainLog::default();
    let scale = SlScale::new(agent, train, hp);
    for it in 1..=hp.iterations {
        let batch = sampler.trajectories(train, hp.batch_size);
        let sl = hybrid_sl_step(agent, &batch, hp, scale, it)?;
        let td = hybrid_rl_step(agent, &target, &batch, hp, it)?;
        if hp.sync_due(it) {
            target_network_sync(agent, &mut target)?;
        }
        log.push(it, Some(sl), Some(td));
        checkpoint(&mut log, it, agent, hp, &mut hook)?;
    }
    agent.reset();
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

/// The RL half of a joint iteration. Only the Q head receives gradient.
pub fn hybrid_rl_step(
    agent: &mut Agent,
    target: &Agent,
    batch: &[&Trajectory],
    hp: &Hyperparams,
    it: usize,
) -> Result<f64> {
    hybrid_heads(agent, "hybrid_rl_step")?;
    let (loss, mut g) = td_grads(agent, target, TdBatch::Sequences(batch), hp)?;
    if !loss.is_finite() {
        return Err(TrainError::Diverged {
            what: "TD loss",
            iteration: it,
        });
    }
    if let Some(core) = g.core.as_mut() {
        core.fill(0.0);
    }
    apply_step(agent.net_mut(), &mut g, hp, "TD loss", it)?;
    Ok(loss)
}

/// Two-phase ablation of the hybrid: phase 1 trains the core and SL heads
/// with early stopping on validation SL loss (at most `phase1_iterations`
/// steps); phase 2 freezes the core and runs `hp.iterations` TD steps on
/// the Q head alone.
pub fn train_separate_hybrid(
    agent: &mut Agent,
    train: &Dataset,
    valid: &Dataset,
    hp: &Hyperparams,
    phase1_iterations: usize,
    mut hook: Option<EvalHook<'_>>,
) -> Result<TrainLog> {
    let (_, _, kq) = hybrid_heads(agent, "train_separate_hybrid")?;
    check_data(train, hp)?;
    let started = Instant::now();
    let mut sampler = Sampler::new(hp.seed);
    let mut log = TrainLog::default();

    let mut best = (f64::INFINITY, agent.net().params().clone());
    let mut stale = 0;
    let mut it = 0;
    let scale = SlScale::new(agent, train, hp);
    while it < phase1_iterations {
        it += 1;
        let batch = sampler.trajectories(train, hp.batch_size);
        let sl = hybrid_sl_step(agent, &batch, hp, scale, it)?;
        log.push(it, Some(sl), None);
        if it % hp.check_every == 0 || it == phase1_iterations {
            let v = if valid.is_empty() {
                sl
            } else {
                hybrid_sl_loss(agent, valid, hp)?
            };
            if v < best.0 {
                best = (v, agent.net().params().clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= hp.patience {
                    break;
                }
            }
        }
    }
    if phase1_iterations > 0 && best.0.is_finite() {
        agent.net_mut().set_params(best.1)?;
    }

    // Phase 2 on precomputed hidden states: the core no longer changes.
    let feats: Vec<Vec<Vec<f64>>> = train
        .trajectories()
        .iter()
        .map(|t| {
            Ok(agent
                .net()
                .core_states(&agent.encode_trajectory(t, STEPS))?
                .unwrap_or_default())
        })
        .collect::<Result<_>>()?;
    let head_spec = NetSpec {
        input_dim: agent.net().spec().feature_dim(),
        core: None,
        heads: vec![agent.net().spec().heads[kq].clone()],
    };
    let mut q = Net::new(
        head_spec,
        NetParams {
            core: None,
            heads: vec![agent.net().params().heads[kq].clone()],
        },
    )?;
    let mut q_target = q.clone();
    let offset = it;
    let mut rng = ChaCha8Rng::seed_from_u64(named_seed(hp.seed, "phase2"));
    let sync_head = |agent: &mut Agent, q: &Net| {
        agent.net_mut().params_mut().heads[kq] = q.params().heads[0].clone();
    };
    for j in 1..=hp.iterations {
        let n = train.len();
        let batch: Vec<FlatTransition> = (0..hp.batch_size * STEPS)
            .map(|_| {
                let i = rng.random_range(0..n);
                let t = rng.random_range(0..STEPS);
                let traj = &train.trajectories()[i];
                FlatTransition {
                    x: feats[i][t].clone(),
                    action: traj.actions[t].index(),
                    reward: traj.rewards[t] * hp.reward_scale,
                    next: (t + 1 < STEPS).then(|| feats[i][t + 1].clone()),
                }
            })
            .collect();
        let (loss, mut g) = fitted_q_grads(&mut q, &q_target, 0, &batch, hp)?;
        apply_step(&mut q, &mut g, hp, "TD loss", offset + j)?;
        if hp.sync_due(j) {
            q_target = q.clone();
        }
        log.push(offset + j, None, Some(loss));
        if hp.eval_due(offset + j) && hook.is_some() {
            sync_head(agent, &q);
        }
        checkpoint(&mut log, offset + j, agent, hp, &mut hook)?;
    }
    sync_head(agent, &q);
    agent.reset();
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

/// Dispatches to the trainer matching the agent's kind.
pub fn train_agent(
    agent: &mut Agent,
    train: &Dataset,
    hp: &Hyperparams,
    hook: Option<EvalHook<'_>>,
) -> Result<TrainLog> {
    let k = agent.kind();
    if k.is_sl() {
        train_sl(agent, train, hp, hook)
    } else if k.is_q() {
        train_rl(agent, train, hp, hook)
    } else {
        train_joint_hybrid(agent, train, hp, hook)
    }
}
