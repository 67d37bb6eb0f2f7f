//! The eight model families: supervised reward regressors, Q-networks and
//! the hybrid recurrent composite, with online state tracking and greedy
//! action selection.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{
    Activation, CellKind, CellState, CoreSpec, HeadSpec, Net, NetSpec, NumError, Params,
};
use crate::simworld::{
    ActionId, Observation, SequentialPolicy, SimError, Trajectory, WorldConfig, NUM_ACTIONS,
    OBS_DIMS,
};

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_HEAD_HIDDEN: usize = 64;
pub const DQN_WINDOWS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("{op} is not defined for {kind}")]
    WrongKind { op: &'static str, kind: AgentKind },
    #[error("DQN window must be in 1..=3, got {0}")]
    Window(usize),
    #[error("non-finite action values")]
    NonFinite,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentKind {
    SlDnn,
    SlRnn,
    SlLstm,
    Dqn { window: usize },
    RlRnn,
    RlLstm,
    HybridRnn,
    HybridLstm,
}

impl AgentKind {
    /// Three supervised and five reinforcement-learning models.
    pub const ROSTER: [AgentKind; 8] = [
        AgentKind::SlDnn,
        AgentKind::SlRnn,
        AgentKind::SlLstm,
        AgentKind::Dqn { window: 1 },
        AgentKind::RlRnn,
        AgentKind::RlLstm,
        AgentKind::HybridRnn,
        AgentKind::HybridLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::SlDnn => "SL_DNN",
            AgentKind::SlRnn => "SL_RNN",
            AgentKind::SlLstm => "SL_LSTM",
            AgentKind::Dqn { .. } => "DQN",
            AgentKind::RlRnn => "RL_RNN",
            AgentKind::RlLstm => "RL_LSTM",
            AgentKind::HybridRnn => "HYBRID_RNN",
            AgentKind::HybridLstm => "HYBRID_LSTM",
        }
    }

    pub fn is_sl(self) -> bool {
        matches!(
            self,
            AgentKind::SlDnn | AgentKind::SlRnn | AgentKind::SlLstm
        )
    }

    pub fn is_q(self) -> bool {
        matches!(
            self,
            AgentKind::Dqn { .. } | AgentKind::RlRnn | AgentKind::RlLstm
        )
    }

    pub fn is_hybrid(self) -> bool {
        matches!(self, AgentKind::HybridRnn | AgentKind::HybridLstm)
    }

    pub fn cell(self) -> Option<CellKind> {
        match self {
            AgentKind::SlRnn | AgentKind::RlRnn | AgentKind::HybridRnn => Some(CellKind::Rnn),
            AgentKind::SlLstm | AgentKind::RlLstm | AgentKind::HybridLstm => Some(CellKind::Lstm),
            AgentKind::SlDnn | AgentKind::Dqn { .. } => None,
        }
    }

    pub fn window(self) -> Option<usize> {
        match self {
            AgentKind::Dqn { window } => Some(window),
            _ => None,
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentKind::Dqn { window } => write!(f, "DQN(w={window})"),
            k => f.write_str(k.name()),
        }
    }
}

impl FromStr for AgentKind {
    type Err = String;

    /// Accepts roster names; `DQN` means window 1, `DQN(w=2)` picks a window.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let k = match s {
            "SL_DNN" => AgentKind::SlDnn,
            "SL_RNN" => AgentKind::SlRnn,
            "SL_LSTM" => AgentKind::SlLstm,
            "DQN" => AgentKind::Dqn { window: 1 },
            "RL_RNN" => AgentKind::RlRnn,
            "RL_LSTM" => AgentKind::RlLstm,
            "HYBRID_RNN" => AgentKind::HybridRnn,
            "HYBRID_LSTM" => AgentKind::HybridLstm,
            other => {
                let w = other
                    .strip_prefix("DQN(w=")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| format!("unknown model `{other}`"))?;
                AgentKind::Dqn { window: w }
            }
        };
        Ok(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub world: WorldConfig,
    pub hidden: usize,
    pub head_hidden: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            hidden: DEFAULT_HIDDEN,
            head_hidden: DEFAULT_HEAD_HIDDEN,
        }
    }
}

/// Network layout for each kind.
pub fn net_spec(kind: AgentKind, cfg: &AgentConfig) -> Result<NetSpec> {
    let obs_w = cfg.world.obs_width();
    let core = |cell| {
        Some(CoreSpec {
            cell,
            hidden: cfg.hidden,
        })
    };
    let mlp = |name| HeadSpec::mlp(name, &[cfg.head_hidden], Activation::Tanh, NUM_ACTIONS);
    let spec = match kind {
        AgentKind::SlDnn => NetSpec {
            input_dim: obs_w,
            core: None,
            heads: vec![mlp("reward")],
        },
        AgentKind::Dqn { window } => {
            if !DQN_WINDOWS.contains(&window) {
                return Err(AgentError::Window(window));
            }
            NetSpec {
                input_dim: obs_w * window,
                core: None,
                heads: vec![mlp("q")],
            }
        }
        AgentKind::SlRnn | AgentKind::SlLstm => NetSpec {
            input_dim: cfg.world.step_width(),
            core: core(kind.cell().unwrap_or(CellKind::Rnn)),
            heads: vec![HeadSpec::linear("reward", NUM_ACTIONS)],
        },
        AgentKind::RlRnn | AgentKind::RlLstm => NetSpec {
            input_dim: cfg.world.step_width(),
            core: core(kind.cell().unwrap_or(CellKind::Rnn)),
            heads: vec![HeadSpec::linear("q", NUM_ACTIONS)],
        },
        AgentKind::HybridRnn | AgentKind::HybridLstm => NetSpec {
            input_dim: cfg.world.step_width(),
            core: core(kind.cell().unwrap_or(CellKind::Rnn)),
            heads: vec![
                HeadSpec::linear("obs", obs_w),
                HeadSpec::linear("reward", NUM_ACTIONS),
                mlp("q").detached(),
            ],
        },
    };
    spec.validate()?;
    Ok(spec)
}

/// What the agent sees at step `t`: `o_t` and the previous action/reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInput {
    pub obs: Observation,
    pub prev: Option<(ActionId, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridOutput {
    /// Next-observation logits, one block per observation dimension.
    pub obs_logits: Vec<Vec<f64>>,
    pub reward: Vec<f64>,
    pub q: Vec<f64>,
    pub hidden: CellState,
}

/// Head positions inside the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadIndex {
    pub obs: Option<usize>,
    pub reward: Option<usize>,
    pub q: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    kind: AgentKind,
    config: AgentConfig,
    net: Net,
    heads: HeadIndex,
    state: Option<CellState>,
    window: VecDeque<Observation>,
    step: usize,
}

impl Agent {
    pub fn new(kind: AgentKind, config: &AgentConfig, seed: u64) -> Result<Self> {
        let net = Net::from_seed(net_spec(kind, config)?, seed)?;
        Self::from_net(kind, config, net)
    }

    pub fn from_net(kind: AgentKind, config: &AgentConfig, net: Net) -> Result<Self> {
        if net.spec() != &net_spec(kind, config)? {
            return Err(AgentError::Checkpoint(format!(
                "network layout does not match {kind}"
            )));
        }
        let spec = net.spec();
        let heads = HeadIndex {
            obs: spec.head_index("obs"),
            reward: spec.head_index("reward"),
            q: spec.head_index("q"),
        };
        let mut agent = Self {
            kind,
            config: config.clone(),
            state: None,
            window: VecDeque::new(),
            heads,
            net,
            step: 0,
        };
        agent.reset();
        Ok(agent)
    }

    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    /// Mutable network access for trainers.
    pub fn net_mut(&mut self) -> &mut Net {
        &mut self.net
    }

    pub fn heads(&self) -> HeadIndex {
        self.heads
    }

    pub fn hidden_state(&self) -> Option<&CellState> {
        self.state.as_ref()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn reset(&mut self) {
        self.state = self.net.zero_state();
        self.window.clear();
        self.step = 0;
    }

    /// Observations currently in the DQN window, oldest first, `None` for
    /// zero padding.
    pub fn window_contents(&self) -> Vec<Option<Observation>> {
        let w = self.kind.window().unwrap_or(0);
        let pad = w.saturating_sub(self.window.len());
        (0..pad)
            .map(|_| None)
            .chain(self.window.iter().map(|o| Some(*o)))
            .collect()
    }

    /// Network input for step `t` (0-based) of a logged trajectory.
    pub fn encode_at(&self, traj: &Trajectory, t: usize) -> Vec<f64> {
        let world = &self.config.world;
        match self.kind {
            AgentKind::SlDnn => world.obs_one_hot(&traj.observations[t]),
            AgentKind::Dqn { window } => {
                let obs_w = world.obs_width();
                let mut x = vec![0.0; obs_w * window];
                for slot in 0..window {
                    let back = window - 1 - slot;
                    if t >= back {
                        world.write_obs_one_hot(
                            &traj.observations[t - back],
                            &mut x[slot * obs_w..],
                        );
                    }
                }
                x
            }
            _ => {
                let prev = (t > 0).then(|| (traj.actions[t - 1], traj.rewards[t - 1]));
                world.encode_step(&traj.observations[t], prev)
            }
        }
    }

    /// Inputs for steps `0..n` of a logged trajectory (`n <= 23`).
    pub fn encode_trajectory(&self, traj: &Trajectory, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|t| self.encode_at(traj, t)).collect()
    }

    fn online_input(&mut self, input: &StepInput) -> Vec<f64> {
        let world = &self.config.world;
        match self.kind {
            AgentKind::SlDnn => world.obs_one_hot(&input.obs),
            AgentKind::Dqn { window } => {
                self.window.push_back(input.obs);
                while self.window.len() > window {
                    self.window.pop_front();
                }
                let obs_w = world.obs_width();
                let mut x = vec![0.0; obs_w * window];
                let pad = window - self.window.len();
                for (i, o) in self.window.iter().enumerate() {
                    world.write_obs_one_hot(o, &mut x[(pad + i) * obs_w..]);
                }
                x
            }
            _ => world.encode_step(&input.obs, input.prev),
        }
    }

    fn advance(&mut self, input: &StepInput, heads: &[usize]) -> Result<Vec<Option<Vec<f64>>>> {
        let x = self.online_input(input);
        let out = self.net.step(self.state.as_mut(), &x, heads)?;
        self.step += 1;
        Ok(out)
    }

    fn wrong(&self, op: &'static str) -> AgentError {
        AgentError::WrongKind {
            op,
            kind: self.kind,
        }
    }

    /// Predicted immediate reward per action (in training units).
    pub fn sl_predict(&mut self, input: &StepInput) -> Result<Vec<f64>> {
        if !self.kind.is_sl() {
            return Err(self.wrong("sl_predict"));
        }
        let k = self.heads.reward.ok_or_else(|| self.wrong("sl_predict"))?;
        Ok(self
            .advance(input, &[k])?
            .swap_remove(k)
            .unwrap_or_default())
    }

    pub fn q_values(&mut self, input: &StepInput) -> Result<Vec<f64>> {
        if !self.kind.is_q() {
            return Err(self.wrong("q_values"));
        }
        let k = self.heads.q.ok_or_else(|| self.wrong("q_values"))?;
        Ok(self
            .advance(input, &[k])?
            .swap_remove(k)
            .unwrap_or_default())
    }

    pub fn hybrid_forward(&mut self, input: &StepInput) -> Result<HybridOutput> {
        let (Some(ko), Some(kr), Some(kq)) = (self.heads.obs, self.heads.reward, self.heads.q)
        else {
            return Err(self.wrong("hybrid_forward"));
        };
        let mut out = self.advance(input, &[ko, kr, kq])?;
        let logits = out[ko].take().unwrap_or_default();
        let mut blocks = Vec::with_capacity(OBS_DIMS);
        let mut offset = 0;
        for &k in &self.config.world.cardinalities {
            blocks.push(logits[offset..offset + k].to_vec());
            offset += k;
        }
        Ok(HybridOutput {
            obs_logits: blocks,
            reward: out[kr].take().unwrap_or_default(),
            q: out[kq].take().unwrap_or_default(),
            hidden: self.state.clone().unwrap_or_else(|| CellState {
                h: vec![],
                c: vec![],
            }),
        })
    }

    /// Values the agent acts greedily on: reward predictions for supervised
    /// kinds, Q-values otherwise.
    pub fn action_values(&mut self, input: &StepInput) -> Result<Vec<f64>> {
        let k = if self.kind.is_sl() {
            self.heads.reward
        } else {
            self.heads.q
        };
        let k = k.ok_or_else(|| self.wrong("action_values"))?;
        Ok(self
            .advance(input, &[k])?
            .swap_remove(k)
            .unwrap_or_default())
    }

    pub fn act(&mut self, input: &StepInput) -> Result<ActionId> {
        greedy_action(&self.action_values(input)?)
    }

    pub fn checkpoint(&self) -> AgentCheckpoint {
        AgentCheckpoint {
            kind: self.kind,
            config: self.config.clone(),
            spec: self.net.spec().clone(),
            weights: self.net.params().to_flat(),
            step: self.step,
        }
    }

    pub fn from_checkpoint(ck: &AgentCheckpoint) -> Result<Self> {
        let mut agent = Self::new(ck.kind, &ck.config, 0)?;
        if &ck.spec != agent.net.spec() {
            return Err(AgentError::Checkpoint(
                "spec does not match kind and config".into(),
            ));
        }
        agent.net.params_mut().set_flat(&ck.weights)?;
        agent.step = ck.step;
        Ok(agent)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn greedy_action(values: &[f64]) -> Result<ActionId> {
    if values.len() != NUM_ACTIONS {
        return Err(NumError::Dim {
            context: "greedy_action",
            expected: NUM_ACTIONS,
            got: values.len(),
        }
        .into());
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AgentError::NonFinite);
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    Ok(ActionId::new(best)?)
}

/// Softmax over one block of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub kind: AgentKind,
    pub config: AgentConfig,
    pub spec: NetSpec,
    pub weights: Vec<f64>,
    pub step: usize,
}

impl AgentCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| AgentError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| AgentError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| AgentError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| AgentError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}

impl SequentialPolicy for Agent {
    fn reset(&mut self) {
        Agent::reset(self);
    }

    fn act(
        &mut self,
        obs: &Observation,
        prev: Option<(ActionId, f64)>,
    ) -> crate::simworld::Result<ActionId> {
        Agent::act(self, &StepInput { obs: *obs, prev })
            .map_err(|e| SimError::Policy(e.to_string()))
    }

    fn clone_box(&self) -> Box<dyn SequentialPolicy> {
        Box::new(self.clone())
    }
}
