//! Donor interaction data, the factored simulator (per-dimension observation
//! tables plus a recurrent reward function), synthetic worlds and the
//! behavior policies used to collect training data.

mod csvio;
mod policy;
mod reward;
mod sim;
mod tables;

pub use csvio::{load_sequences, save_sequences, CSV_HEADER};
pub use policy::{
    behavior_action, campaign_log, campaign_schedule, generate_dataset, split_dataset,
    ActionHistogram, BehaviorPolicy, PolicyKind, SequentialPolicy, StepContext,
};
pub use reward::{fit_reward_net, FitReport, RewardFitConfig, RewardNet};
pub use sim::{
    random_world, sim_reset, sim_step, RandomWorldParams, SimState, SimulatorSpec, StepOutcome,
};
pub use tables::{fit_observation_tables, ObsTables};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::NumError;

pub const NUM_ACTIONS: usize = 12;
pub const OBS_DIMS: usize = 5;
/// Observations per trajectory.
pub const HORIZON: usize = 23;
/// Actions (and rewards) per trajectory.
pub const STEPS: usize = HORIZON - 1;
pub const MAX_REWARD: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("line {line}, field `{field}`: {msg}")]
    Csv {
        line: u64,
        field: &'static str,
        msg: String,
    },
    #[error("donor {donor}: {msg}")]
    Trajectory { donor: u64, msg: String },
    #[error("need at least {need} donors to split, got {got}")]
    TooFewDonors { need: usize, got: usize },
    #[error("training diverged ({0}); try a smaller learning rate")]
    Diverged(String),
    #[error("episode already finished after {0} steps")]
    EpisodeFinished(usize),
    #[error("behavior policy: {0}")]
    Policy(String),
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("reward rescaling did not converge: {0}")]
    Rescale(String),
    #[error("json: {0}")]
    Json(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Five discrete features: recency, frequency, average-donation bucket,
/// mails in the last six months, total mails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Observation(pub [u16; OBS_DIMS]);

impl Observation {
    pub fn get(&self, d: usize) -> usize {
        self.0[d] as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ActionId(u8);

impl ActionId {
    pub fn new(a: usize) -> Result<Self> {
        if a < NUM_ACTIONS {
            Ok(Self(a as u8))
        } else {
            Err(SimError::Config(format!(
                "action {a} out of range [0, {NUM_ACTIONS})"
            )))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = ActionId> {
        (0..NUM_ACTIONS as u8).map(ActionId)
    }
}

impl TryFrom<u8> for ActionId {
    type Error = SimError;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v as usize)
    }
}

impl From<ActionId> for u8 {
    fn from(a: ActionId) -> u8 {
        a.0
    }
}

/// Dimension cardinalities and horizon of a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub cardinalities: [usize; OBS_DIMS],
    pub horizon: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            cardinalities: [8, 8, 8, 8, 12],
            horizon: HORIZON,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon != HORIZON {
            return Err(SimError::Config(format!(
                "horizon must be {HORIZON}, got {}",
                self.horizon
            )));
        }
        if let Some(d) = self
            .cardinalities
            .iter()
            .position(|&c| c < 2 || c > u16::MAX as usize)
        {
            return Err(SimError::Config(format!(
                "dimension {} needs cardinality in [2, 65535]",
                d + 1
            )));
        }
        Ok(())
    }

    /// Width of the concatenated one-hot observation encoding.
    pub fn obs_width(&self) -> usize {
        self.cardinalities.iter().sum()
    }

    /// Width of a per-step recurrent input: one-hot observation, one-hot
    /// previous action and scaled previous reward.
    pub fn step_width(&self) -> usize {
        self.obs_width() + NUM_ACTIONS + 1
    }

    pub fn check_observation(&self, o: &Observation) -> Result<()> {
        for d in 0..OBS_DIMS {
            if o.get(d) >= self.cardinalities[d] {
                return Err(SimError::Config(format!(
                    "o{} = {} outside [0, {})",
                    d + 1,
                    o.get(d),
                    self.cardinalities[d]
                )));
            }
        }
        Ok(())
    }

    /// Concatenated one-hot encoding of `o`, written into `out`.
    pub fn write_obs_one_hot(&self, o: &Observation, out: &mut [f64]) {
        let mut offset = 0;
        for d in 0..OBS_DIMS {
            out[offset + o.get(d)] = 1.0;
            offset += self.cardinalities[d];
        }
    }

    pub fn obs_one_hot(&self, o: &Observation) -> Vec<f64> {
        let mut v = vec![0.0; self.obs_width()];
        self.write_obs_one_hot(o, &mut v);
        v
    }

    /// `[one-hot(o_t) ; one-hot(a_{t-1}) ; r_{t-1} / 1000]`, zeros for the
    /// action/reward part at the first step.
    pub fn encode_step(&self, o: &Observation, prev: Option<(ActionId, f64)>) -> Vec<f64> {
        let mut v = vec![0.0; self.step_width()];
        self.write_obs_one_hot(o, &mut v);
        if let Some((a, r)) = prev {
            let base = self.obs_width();
            v[base + a.index()] = 1.0;
            v[base + NUM_ACTIONS] = r / MAX_REWARD;
        }
        v
    }

    /// Recurrent inputs for steps `1..=n` of a trajectory (`n <= 23`).
    pub fn encode_trajectory(&self, traj: &Trajectory, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|t| {
                let prev = (t > 0).then(|| (traj.actions[t - 1], traj.rewards[t - 1]));
                self.encode_step(&traj.observations[t], prev)
            })
            .collect()
    }
}

/// One donor's sequence `(o1, a1, r1, ..., o22, a22, r22, o23)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub donor_id: u64,
    pub observations: Vec<Observation>,
    pub actions: Vec<ActionId>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn validate(&self, config: &WorldConfig) -> Result<()> {
        let fail = |msg: String| SimError::Trajectory {
            donor: self.donor_id,
            msg,
        };
        if self.observations.len() != HORIZON {
            return Err(fail(format!(
                "expected {HORIZON} observations, got {}",
                self.observations.len()
            )));
        }
        if self.actions.len() != STEPS || self.rewards.len() != STEPS {
            return Err(fail(format!(
                "expected {STEPS} actions and rewards, got {} and {}",
                self.actions.len(),
                self.rewards.len()
            )));
        }
        for o in &self.observations {
            config
                .check_observation(o)
                .map_err(|e| fail(e.to_string()))?;
        }
        if let Some(r) = self
            .rewards
            .iter()
            .find(|r| !(0.0..=MAX_REWARD).contains(*r))
        {
            return Err(fail(format!("reward {r} outside [0, {MAX_REWARD}]")));
        }
        Ok(())
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    histogram: [u64; NUM_ACTIONS],
    pub split: Option<SplitTag>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, split: Option<SplitTag>) -> Self {
        let mut histogram = [0u64; NUM_ACTIONS];
        for t in &trajectories {
            for a in &t.actions {
                histogram[a.index()] += 1;
            }
        }
        Self {
            trajectories,
            histogram,
            split,
        }
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.actions.len()).sum()
    }

    /// Action counts over all transitions.
    pub fn action_histogram(&self) -> &[u64; NUM_ACTIONS] {
        &self.histogram
    }

    pub fn mean_reward(&self) -> f64 {
        let n = self.num_transitions();
        if n == 0 {
            return 0.0;
        }
        self.trajectories
            .iter()
            .map(|t| t.total_reward())
            .sum::<f64>()
            / n as f64
    }

    pub fn validate(&self, config: &WorldConfig) -> Result<()> {
        self.trajectories
            .iter()
            .try_for_each(|t| t.validate(config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_layout() {
        let cfg = WorldConfig::default();
        let o = Observation([1, 0, 7, 3, 11]);
        let v = cfg.encode_step(&o, Some((ActionId::new(4).unwrap(), 250.0)));
        assert_eq!(v.len(), 44 + 12 + 1);
        assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 6);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[8], 1.0);
        assert_eq!(v[16 + 7], 1.0);
        assert_eq!(v[24 + 3], 1.0);
        assert_eq!(v[32 + 11], 1.0);
        assert_eq!(v[44 + 4], 1.0);
        assert_eq!(v[56], 0.25);
        let first = cfg.encode_step(&o, None);
        assert!(first[44..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn action_range() {
        assert!(ActionId::new(11).is_ok());
        assert!(ActionId::new(12).is_err());
        assert_eq!(ActionId::all().count(), NUM_ACTIONS);
    }

    #[test]
    fn histogram_counts_every_action() {
        let t = Trajectory {
            donor_id: 1,
            observations: vec![Observation([0; 5]); HORIZON],
            actions: (0..STEPS).map(|i| ActionId::new(i % 3).unwrap()).collect(),
            rewards: vec![0.0; STEPS],
        };
        let ds = Dataset::new(vec![t.clone(), t], None);
        assert_eq!(ds.action_histogram().iter().sum::<u64>(), 2 * STEPS as u64);
        assert_eq!(ds.action_histogram()[0], 16);
    }
}
