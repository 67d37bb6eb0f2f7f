use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::policy::{generate_dataset, BehaviorPolicy};
use super::{
    ActionId, ObsTables, Observation, Result, RewardNet, SimError, WorldConfig, NUM_ACTIONS,
    OBS_DIMS, STEPS,
};
use crate::numkit::{CellState, DenseLayer, Matrix, Recurrent, RnnCell};
use crate::seeding::named_seed;

/// The complete simulated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorSpec {
    pub config: WorldConfig,
    pub tables: ObsTables,
    pub reward: RewardNet,
    /// Empirical pool of first observations; episodes start from a uniform
    /// draw over it.
    pub initial: Vec<Observation>,
    pub seed: u64,
}

impl SimulatorSpec {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.tables.validate()?;
        if self.tables.cardinalities != self.config.cardinalities {
            return Err(SimError::Config(
                "table cardinalities differ from config".into(),
            ));
        }
        if self.reward.core.in_dim() != self.config.step_width() {
            return Err(SimError::Config(format!(
                "reward core expects {} inputs, world encodes {}",
                self.reward.core.in_dim(),
                self.config.step_width()
            )));
        }
        if self.initial.is_empty() {
            return Err(SimError::Config("empty initial-observation pool".into()));
        }
        self.initial
            .iter()
            .try_for_each(|o| self.config.check_observation(o))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| SimError::Json(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sim: Self = serde_json::from_str(s).map_err(|e| SimError::Json(e.to_string()))?;
        sim.validate()?;
        Ok(sim)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| SimError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| SimError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_json(&s)
    }
}

/// Per-episode simulator state.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    /// Actions taken so far in this episode.
    pub steps_taken: usize,
    pub obs: Observation,
    /// Reward-net history summary.
    pub hidden: CellState,
    pub prev: Option<(ActionId, f64)>,
}

impl SimState {
    pub fn done(&self) -> bool {
        self.steps_taken >= STEPS
    }

    /// 1-based index of the step about to be taken.
    pub fn step(&self) -> usize {
        self.steps_taken + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

pub fn sim_reset<R: Rng>(sim: &SimulatorSpec, rng: &mut R) -> SimState {
    let obs = sim.initial[rng.random_range(0..sim.initial.len())];
    SimState {
        steps_taken: 0,
        obs,
        hidden: sim.reward.zero_state(),
        prev: None,
    }
}

/// Advances one step: the reward is a deterministic function of the history
/// and the action, and every observation dimension moves independently given
/// `(o_d, a, 1{r > 0})`.
pub fn sim_step<R: Rng>(
    sim: &SimulatorSpec,
    state: &mut SimState,
    action: ActionId,
    rng: &mut R,
) -> Result<StepOutcome> {
    if state.done() {
        return Err(SimError::EpisodeFinished(state.steps_taken));
    }
    let input = sim.config.encode_step(&state.obs, state.prev);
    let hidden = sim.reward.advance(&state.hidden, &input)?;
    let reward = sim.reward.reward(&hidden.h, action);
    let next = sim
        .tables
        .sample_next(&state.obs, action, reward > 0.0, rng);
    state.hidden = hidden;
    state.obs = next;
    state.prev = Some((action, reward));
    state.steps_taken += 1;
    Ok(StepOutcome {
        obs: next,
        reward,
        done: state.done(),
    })
}

/// Knobs for synthetic worlds. The reward core carries a "goodwill"
/// direction `u`: each action's reward loads positively on it, while actions
/// that pay more immediately push the state against it (fatigue), so the
/// myopic choice erodes future rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomWorldParams {
    pub reward_hidden: usize,
    /// Diagonal recurrence is drawn from `[memory_min, memory_max]`.
    pub memory_min: f64,
    pub memory_max: f64,
    pub recurrent_noise: f64,
    pub fatigue: f64,
    pub action_noise: f64,
    pub obs_scale: f64,
    pub goodwill_gain_min: f64,
    pub goodwill_gain_max: f64,
    pub head_noise: f64,
    pub payoff_spread: f64,
    pub reward_offset: f64,
    pub baseline_goodwill: f64,
    pub table_concentration: f64,
    /// Weight of the last observation dimension's transition mass that is
    /// moved onto a bucket of the action's payoff rank.
    pub action_echo: f64,
    pub initial_pool: usize,
    pub target_mean_reward: f64,
    pub calibration_transitions: usize,
}

impl Default for RandomWorldParams {
    fn default() -> Self {
        Self {
            reward_hidden: 6,
            memory_min: 0.6,
            memory_max: 0.9,
            recurrent_noise: 0.05,
            fatigue: 1.0,
            action_noise: 0.3,
            obs_scale: 0.3,
            goodwill_gain_min: 0.5,
            goodwill_gain_max: 1.5,
            head_noise: 0.3,
            payoff_spread: 1.0,
            reward_offset: -0.5,
            baseline_goodwill: 0.0,
            table_concentration: 1.0,
            action_echo: 0.7,
            initial_pool: 512,
            target_mean_reward: 10.0,
            calibration_transitions: 11_000,
        }
    }
}

fn normal<R: Rng>(rng: &mut R, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * sd
}

fn dirichlet_row<R: Rng>(k: usize, concentration: f64, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| SimError::Config(e.to_string()))?;
    let mut row: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let mut sum: f64 = row.iter().sum();
    if sum <= 0.0 {
        row = vec![1.0; k];
        sum = k as f64;
    }
    row.iter_mut().for_each(|p| *p /= sum);
    // Put the rounding residue on the largest entry so rows sum to 1 tightly.
    let resid = 1.0 - row.iter().sum::<f64>();
    if let Some(i) = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])) {
        row[i] += resid;
    }
    Ok(row)
}

/// A seeded synthetic world: Dirichlet observation tables, a structured
/// random reward RNN, and an output scale found by bisection so the mean
/// reward under uniformly random actions hits `target_mean_reward`.
pub fn random_world(
    config: &WorldConfig,
    params: &RandomWorldParams,
    seed: u64,
) -> Result<SimulatorSpec> {
    config.validate()?;
    if params.reward_hidden == 0 || params.initial_pool == 0 {
        return Err(SimError::Config(
            "reward_hidden and initial_pool must be >= 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&params.action_echo) {
        return Err(SimError::Config(format!(
            "action_echo must be in [0, 1], got {}",
            params.action_echo
        )));
    }
    let reward = structured_reward_net(config, params, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(named_seed(seed, "tables"));
    let cards = config.cardinalities;
    let mut tables = (0..OBS_DIMS)
        .map(|d| {
            (0..cards[d] * NUM_ACTIONS * 2)
                .map(|_| dirichlet_row(cards[d], params.table_concentration, &mut rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if params.action_echo > 0.0 {
        echo_actions(
            &mut tables[OBS_DIMS - 1],
            cards[OBS_DIMS - 1],
            &reward,
            params.action_echo,
        );
    }
    let tables = ObsTables::from_rows(cards, 0.0, tables)?;

    let mut rng = ChaCha8Rng::seed_from_u64(named_seed(seed, "initial"));
    let marginals = (0..OBS_DIMS)
        .map(|d| dirichlet_row(cards[d], 1.0, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let initial = (0..params.initial_pool)
        .map(|_| {
            let mut o = [0u16; OBS_DIMS];
            for d in 0..OBS_DIMS {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                o[d] = (cards[d] - 1) as u16;
                for (v, p) in marginals[d].iter().enumerate() {
                    acc += p;
                    if u < acc {
                        o[d] = v as u16;
                        break;
                    }
                }
            }
            Observation(o)
        })
        .collect();

    let mut sim = SimulatorSpec {
        config: config.clone(),
        tables,
        reward,
        initial,
        seed,
    };
    calibrate_scale(&mut sim, params)?;
    sim.validate()?;
    Ok(sim)
}

/// Mixes each row toward the bucket of its action's payoff rank.
fn echo_actions(rows: &mut [Vec<f64>], card: usize, reward: &RewardNet, weight: f64) {
    let bias = reward.head.bias();
    for (i, row) in rows.iter_mut().enumerate() {
        let a = (i / 2) % NUM_ACTIONS;
        let rank = (0..NUM_ACTIONS).filter(|&b| bias[b] < bias[a]).count();
        let bucket = rank * card / NUM_ACTIONS;
        row.iter_mut().for_each(|p| *p *= 1.0 - weight);
        row[bucket] += weight;
    }
}

fn structured_reward_net(
    config: &WorldConfig,
    p: &RandomWorldParams,
    seed: u64,
) -> Result<RewardNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(named_seed(seed, "reward"));
    let h = p.reward_hidden;
    let obs_width = config.obs_width();
    let width = config.step_width();

    let mut u: Vec<f64> = (0..h).map(|_| normal(&mut rng, 1.0)).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    u.iter_mut().for_each(|x| *x /= norm);

    let payoff: Vec<f64> = (0..NUM_ACTIONS).map(|_| normal(&mut rng, 1.0)).collect();
    let mean = payoff.iter().sum::<f64>() / NUM_ACTIONS as f64;
    let sd = (payoff.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / NUM_ACTIONS as f64)
        .sqrt()
        .max(1e-12);
    let z: Vec<f64> = payoff.iter().map(|c| (c - mean) / sd).collect();

    let mut wh = Matrix::zeros(h, h);
    for i in 0..h {
        for j in 0..h {
            let v = if i == j {
                rng.random_range(p.memory_min..=p.memory_max)
            } else {
                normal(&mut rng, p.recurrent_noise)
            };
            wh.set(i, j, v);
        }
    }
    let mut wx = Matrix::zeros(h, width);
    for i in 0..h {
        for j in 0..obs_width {
            wx.set(i, j, normal(&mut rng, p.obs_scale));
        }
        for a in 0..NUM_ACTIONS {
            let v = -p.fatigue * z[a] * u[i] + normal(&mut rng, p.action_noise);
            wx.set(i, obs_width + a, v);
        }
        wx.set(i, width - 1, normal(&mut rng, 1.0));
    }
    let b: Vec<f64> = u.iter().map(|ui| p.baseline_goodwill * ui).collect();
    let core = Recurrent::Rnn(RnnCell::new(wx, wh, b)?);

    let mut w = Matrix::zeros(NUM_ACTIONS, h);
    let mut bias = vec![0.0; NUM_ACTIONS];
    for a in 0..NUM_ACTIONS {
        let gain = rng.random_range(p.goodwill_gain_min..=p.goodwill_gain_max);
        for i in 0..h {
            w.set(a, i, gain * u[i] + normal(&mut rng, p.head_noise));
        }
        bias[a] = p.payoff_spread * z[a] + p.reward_offset;
    }
    let head = DenseLayer::new(w, bias, crate::numkit::Activation::Identity)?;
    RewardNet::new(core, head, 1.0)
}

fn mean_uniform_reward(sim: &SimulatorSpec, transitions: usize) -> Result<f64> {
    let ds = generate_dataset(
        sim,
        &BehaviorPolicy::Uniform,
        transitions,
        named_seed(sim.seed, "calibrate"),
    )?;
    Ok(ds.mean_reward())
}

fn calibrate_scale(sim: &mut SimulatorSpec, p: &RandomWorldParams) -> Result<()> {
    let target = p.target_mean_reward;
    let tol = 0.05 * target;
    let n = p.calibration_transitions.max(STEPS);
    let eval = |scale: f64, sim: &mut SimulatorSpec| -> Result<f64> {
        sim.reward.output_scale = scale;
        mean_uniform_reward(sim, n)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut grow = 0;
    while eval(hi, sim)? < target {
        lo = hi;
        hi *= 2.0;
        grow += 1;
        if grow > 40 {
            return Err(SimError::Rescale(
                "mean reward never reaches the target".into(),
            ));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let m = eval(mid, sim)?;
        if (m - target).abs() <= tol {
            return Ok(());
        }
        if m < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(SimError::Rescale(format!(
        "bracket [{lo}, {hi}] did not converge"
    )))
}
