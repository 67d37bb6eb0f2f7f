use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionId, Dataset, Result, SimError, WorldConfig, MAX_REWARD, NUM_ACTIONS, STEPS};
use crate::numkit::{
    clip_grad_norm, dot, sgd_step, CellKind, CellState, CoreSpec, DenseLayer, HeadSpec, Net,
    NetParams, NetSpec, Params, Recurrent,
};
use crate::seeding::derive_seed;

/// Dollars per unit of raw head output for nets fitted from data.
pub const FIT_OUTPUT_SCALE: f64 = 100.0;

/// Recurrent reward function: the core summarizes the history, and a linear
/// head gives one reward per action. Output is clamped to `[0, 1000]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardNet {
    pub core: Recurrent,
    pub head: DenseLayer,
    pub output_scale: f64,
}

impl RewardNet {
    pub fn new(core: Recurrent, head: DenseLayer, output_scale: f64) -> Result<Self> {
        if head.in_dim() != core.hidden() || head.out_dim() != NUM_ACTIONS {
            return Err(SimError::Config(format!(
                "reward head must be {NUM_ACTIONS} x {}, got {} x {}",
                core.hidden(),
                head.out_dim(),
                head.in_dim()
            )));
        }
        Ok(Self {
            core,
            head,
            output_scale,
        })
    }

    pub fn hidden(&self) -> usize {
        self.core.hidden()
    }

    pub fn zero_state(&self) -> CellState {
        self.core.zero_state()
    }

    pub fn advance(&self, state: &CellState, input: &[f64]) -> Result<CellState> {
        Ok(self.core.step(input, state)?)
    }

    /// Reward for `action` given the history summary `h`.
    pub fn reward(&self, h: &[f64], action: ActionId) -> f64 {
        let a = action.index();
        let raw = self.head.bias()[a] + dot(self.head.weights().row(a), h);
        (self.output_scale * raw).clamp(0.0, MAX_REWARD)
    }

    pub fn rewards(&self, h: &[f64]) -> Vec<f64> {
        ActionId::all().map(|a| self.reward(h, a)).collect()
    }

    fn net_spec(config: &WorldConfig, cell: CellKind, hidden: usize) -> NetSpec {
        NetSpec {
            input_dim: config.step_width(),
            core: Some(CoreSpec { cell, hidden }),
            heads: vec![HeadSpec::linear("reward", NUM_ACTIONS)],
        }
    }

    fn from_net(net: &Net, output_scale: f64) -> Result<Self> {
        let p = net.params();
        let core = p
            .core
            .clone()
            .ok_or_else(|| SimError::Config("reward net needs a core".into()))?;
        let head = p.heads[0].layers()[0].clone();
        Self::new(core, head, output_scale)
    }

    fn to_net(&self, config: &WorldConfig) -> Result<Net> {
        let spec = Self::net_spec(config, self.core.kind(), self.hidden());
        let params = NetParams {
            core: Some(self.core.clone()),
            heads: vec![crate::numkit::Mlp::new(vec![self.head.clone()])?],
        };
        Ok(Net::new(spec, params)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardFitConfig {
    pub cell: CellKind,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for RewardFitConfig {
    fn default() -> Self {
        Self {
            cell: CellKind::Rnn,
            hidden: 16,
            epochs: 20,
            lr: 0.1,
            batch_size: 16,
            grad_clip: Some(5.0),
            seed: 0,
        }
    }
}

/// Per-epoch half mean squared error (in units of `FIT_OUTPUT_SCALE`
/// dollars) and the held-out error when a validation set was given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_loss: Vec<f64>,
    pub valid_loss: Option<f64>,
}

fn sequence_loss(net: &Net, config: &WorldConfig, ds: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for traj in ds.trajectories() {
        let out = net.eval_seq(&config.encode_trajectory(traj, STEPS), &[0])?;
        for (t, y) in out.head(0).unwrap_or(&[]).iter().enumerate() {
            let e = y[traj.actions[t].index()] - traj.rewards[t] / FIT_OUTPUT_SCALE;
            total += 0.5 * e * e;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Fits a recurrent reward function by regressing each `r_t` on the
/// summary of the history up to `o_t`, through the taken action's output.
pub fn fit_reward_net(
    train: &Dataset,
    valid: Option<&Dataset>,
    config: &WorldConfig,
    fit: &RewardFitConfig,
) -> Result<(RewardNet, FitReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(SimError::Config("empty training set".into()));
    }
    let spec = RewardNet::net_spec(config, fit.cell, fit.hidden);
    let mut net = Net::from_seed(spec, fit.seed)?;
    let inputs: Vec<Vec<Vec<f64>>> = train
        .trajectories()
        .iter()
        .map(|t| config.encode_trajectory(t, STEPS))
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut train_loss = Vec::with_capacity(fit.epochs);
    let batch = fit.batch_size.max(1);
    for epoch in 0..fit.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(fit.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_n = 0usize;
        for chunk in order.chunks(batch) {
            let mut grads = net.params().zeros_like();
            let steps = (chunk.len() * STEPS) as f64;
            for &i in chunk {
                let traj = &train.trajectories()[i];
                let out = net.forward_seq(&inputs[i], &[0])?;
                let ys = out.head(0).unwrap_or(&[]);
                let mut d = vec![vec![0.0; NUM_ACTIONS]; ys.len()];
                for (t, y) in ys.iter().enumerate() {
                    let a = traj.actions[t].index();
                    let e = y[a] - traj.rewards[t] / FIT_OUTPUT_SCALE;
                    epoch_loss += 0.5 * e * e;
                    d[t][a] = e / steps;
                }
                epoch_n += ys.len();
                let g = net.backward(&[Some(d)])?;
                grads.add_scaled(&g, 1.0)?;
            }
            if let Some(c) = fit.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            sgd_step(net.params_mut(), &grads, fit.lr)?;
        }
        let mean = epoch_loss / epoch_n.max(1) as f64;
        if !mean.is_finite() || !net.params().all_finite() {
            return Err(SimError::Diverged(format!("epoch {epoch} loss {mean}")));
        }
        train_loss.push(mean);
    }
    let valid_loss = valid.map(|v| sequence_loss(&net, config, v)).transpose()?;
    Ok((
        RewardNet::from_net(&net, FIT_OUTPUT_SCALE)?,
        FitReport {
            train_loss,
            valid_loss,
        },
    ))
}

impl RewardNet {
    /// Mean half squared error of this net on `ds` in fitting units.
    pub fn regression_loss(&self, config: &WorldConfig, ds: &Dataset) -> Result<f64> {
        let net = self.to_net(config)?;
        sequence_loss(&net, config, ds)
    }
}
