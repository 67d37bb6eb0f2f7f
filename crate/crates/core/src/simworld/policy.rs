use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sim::{sim_reset, sim_step, SimulatorSpec};
use super::{
    ActionId, Dataset, Observation, Result, SimError, SplitTag, Trajectory, NUM_ACTIONS, STEPS,
};
use crate::seeding::{derive_seed, named_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyKind {
    U,
    M,
    R,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::U => "U",
            PolicyKind::M => "M",
            PolicyKind::R => "R",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Normalized action distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionHistogram {
    probs: [f64; NUM_ACTIONS],
}

impl ActionHistogram {
    pub fn from_counts(counts: &[u64; NUM_ACTIONS]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(SimError::Policy("empty action histogram".into()));
        }
        let mut probs = [0.0; NUM_ACTIONS];
        for (p, &c) in probs.iter_mut().zip(counts) {
            *p = c as f64 / total as f64;
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64; NUM_ACTIONS] {
        &self.probs
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> ActionId {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return ActionId(a as u8);
            }
        }
        ActionId(self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u8)
    }
}

/// A policy that picks actions from its own running view of an episode.
pub trait SequentialPolicy: Send + Sync {
    fn reset(&mut self);
    fn act(&mut self, obs: &Observation, prev: Option<(ActionId, f64)>) -> Result<ActionId>;
    fn clone_box(&self) -> Box<dyn SequentialPolicy>;
}

/// What a behavior policy may look at when choosing `a_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub donor: usize,
    /// 0-based step index.
    pub step: usize,
    pub obs: Observation,
    pub prev: Option<(ActionId, f64)>,
}

pub enum BehaviorPolicy {
    Uniform,
    Matching(ActionHistogram),
    /// Replays logged actions: donor `i` follows logged trajectory
    /// `i mod len`.
    Logged(Arc<Dataset>),
    Greedy(Box<dyn SequentialPolicy>),
}

impl Clone for BehaviorPolicy {
    fn clone(&self) -> Self {
        match self {
            BehaviorPolicy::Uniform => BehaviorPolicy::Uniform,
            BehaviorPolicy::Matching(h) => BehaviorPolicy::Matching(h.clone()),
            BehaviorPolicy::Logged(d) => BehaviorPolicy::Logged(Arc::clone(d)),
            BehaviorPolicy::Greedy(p) => BehaviorPolicy::Greedy(p.clone_box()),
        }
    }
}

impl fmt::Debug for BehaviorPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BehaviorPolicy::Uniform => f.write_str("Uniform"),
            BehaviorPolicy::Matching(h) => f.debug_tuple("Matching").field(h).finish(),
            BehaviorPolicy::Logged(d) => write!(f, "Logged({} trajectories)", d.len()),
            BehaviorPolicy::Greedy(_) => f.write_str("Greedy(..)"),
        }
    }
}

impl BehaviorPolicy {
    /// U, M or R built from a raw log: M matches the log's action
    /// frequencies and R replays it.
    pub fn from_log(kind: PolicyKind, log: &Arc<Dataset>) -> Result<Self> {
        Ok(match kind {
            PolicyKind::U => BehaviorPolicy::Uniform,
            PolicyKind::M => {
                BehaviorPolicy::Matching(ActionHistogram::from_counts(log.action_histogram())?)
            }
            PolicyKind::R => {
                if log.is_empty() {
                    return Err(SimError::Policy("replay needs a nonempty log".into()));
                }
                BehaviorPolicy::Logged(Arc::clone(log))
            }
        })
    }

    pub fn reset(&mut self) {
        if let BehaviorPolicy::Greedy(p) = self {
            p.reset();
        }
    }
}

pub fn behavior_action<R: Rng>(
    policy: &mut BehaviorPolicy,
    ctx: &StepContext,
    rng: &mut R,
) -> Result<ActionId> {
    match policy {
        BehaviorPolicy::Uniform => Ok(ActionId(rng.random_range(0..NUM_ACTIONS) as u8)),
        BehaviorPolicy::Matching(h) => Ok(h.sample(rng)),
        BehaviorPolicy::Logged(log) => {
            if log.is_empty() {
                return Err(SimError::Policy("replay log is empty".into()));
            }
            let traj = &log.trajectories()[ctx.donor % log.len()];
            traj.actions.get(ctx.step).copied().ok_or_else(|| {
                SimError::Policy(format!(
                    "step {} beyond logged horizon of donor {}",
                    ctx.step + 1,
                    traj.donor_id
                ))
            })
        }
        BehaviorPolicy::Greedy(p) => p.act(&ctx.obs, ctx.prev),
    }
}

fn rollout(
    sim: &SimulatorSpec,
    policy: &mut BehaviorPolicy,
    donor: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    policy.reset();
    let mut state = sim_reset(sim, &mut rng);
    let mut observations = Vec::with_capacity(STEPS + 1);
    let mut actions = Vec::with_capacity(STEPS);
    let mut rewards = Vec::with_capacity(STEPS);
    observations.push(state.obs);
    for step in 0..STEPS {
        let ctx = StepContext {
            donor,
            step,
            obs: state.obs,
            prev: state.prev,
        };
        let a = behavior_action(policy, &ctx, &mut rng)?;
        let out = sim_step(sim, &mut state, a, &mut rng)?;
        observations.push(out.obs);
        actions.push(a);
        rewards.push(out.reward);
    }
    Ok(Trajectory {
        donor_id: donor as u64,
        observations,
        actions,
        rewards,
    })
}

/// Rolls out `ceil(n_transitions / 22)` full episodes. Donor `i` uses its
/// own seed derived from `(seed, i)`, so the result does not depend on how
/// the work is scheduled across threads.
pub fn generate_dataset(
    sim: &SimulatorSpec,
    policy: &BehaviorPolicy,
    n_transitions: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_transitions < STEPS {
        return Err(SimError::Config(format!(
            "need at least {STEPS} transitions, got {n_transitions}"
        )));
    }
    let n = n_transitions.div_ceil(STEPS);
    let trajs = (0..n)
        .into_par_iter()
        .map_init(
            || policy.clone(),
            |p, i| rollout(sim, p, i, derive_seed(seed, i as u64)),
        )
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(trajs, None))
}

/// A seeded mailing calendar of 22 actions. Every action appears at least
/// once; the rest repeat a few favored actions.
pub fn campaign_schedule(seed: u64) -> Vec<ActionId> {
    let mut rng = ChaCha8Rng::seed_from_u64(named_seed(seed, "campaign"));
    let mut favored: Vec<usize> = (0..NUM_ACTIONS).collect();
    favored.shuffle(&mut rng);
    let weights = [8.0, 4.0, 2.0, 1.0];
    let total: f64 = weights.iter().sum();
    let mut sched: Vec<usize> = (0..NUM_ACTIONS).collect();
    while sched.len() < STEPS {
        let mut u = rng.random::<f64>() * total;
        let mut pick = favored[weights.len() - 1];
        for (k, w) in weights.iter().enumerate() {
            if u < *w {
                pick = favored[k];
                break;
            }
            u -= w;
        }
        sched.push(pick);
    }
    sched.shuffle(&mut rng);
    sched.into_iter().map(|a| ActionId(a as u8)).collect()
}

/// The raw historical log that M and R are derived from: `n_donors`
/// episodes under a deterministic rule-based mailing campaign: at step `t`
/// a donor whose first feature is `v` receives `schedule[(t + v) mod 22]`.
pub fn campaign_log(sim: &SimulatorSpec, n_donors: usize, seed: u64) -> Result<Dataset> {
    let schedule = campaign_schedule(seed);
    let trajs = (0..n_donors)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(named_seed(seed, "log"), i as u64));
            let mut state = sim_reset(sim, &mut rng);
            let mut observations = vec![state.obs];
            let mut actions = Vec::with_capacity(STEPS);
            let mut rewards = Vec::with_capacity(STEPS);
            for t in 0..STEPS {
                let a = schedule[(t + state.obs.get(0)) % STEPS];
                let out = sim_step(sim, &mut state, a, &mut rng)?;
                observations.push(out.obs);
                actions.push(a);
                rewards.push(out.reward);
            }
            Ok(Trajectory {
                donor_id: i as u64,
                observations,
                actions,
                rewards,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(trajs, None))
}

/// Donor-level shuffle and 4:1:1 split (sizes rounded to nearest).
pub fn split_dataset(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let n = ds.len();
    if n < 6 {
        return Err(SimError::TooFewDonors { need: 6, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(named_seed(seed, "split")));
    let n_train = (4.0 * n as f64 / 6.0).round() as usize;
    let n_valid = (n as f64 / 6.0).round() as usize;
    let pick = |idx: &[usize], tag| {
        Dataset::new(
            idx.iter().map(|&i| ds.trajectories()[i].clone()).collect(),
            Some(tag),
        )
    };
    Ok((
        pick(&order[..n_train], SplitTag::Train),
        pick(&order[n_train..n_train + n_valid], SplitTag::Valid),
        pick(&order[n_train + n_valid..], SplitTag::Test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::{random_world, Observation, RandomWorldParams, WorldConfig, HORIZON};
    use std::collections::BTreeSet;

    fn world() -> SimulatorSpec {
        let p = RandomWorldParams {
            calibration_transitions: 2_200,
            ..Default::default()
        };
        random_world(&WorldConfig::default(), &p, 11).unwrap()
    }

    fn ctx(donor: usize, step: usize) -> StepContext {
        StepContext {
            donor,
            step,
            obs: Observation([0; 5]),
            prev: None,
        }
    }

    #[test]
    fn uniform_frequencies() {
        let mut p = BehaviorPolicy::Uniform;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; NUM_ACTIONS];
        let n = 100_000;
        for _ in 0..n {
            counts[behavior_action(&mut p, &ctx(0, 0), &mut rng)
                .unwrap()
                .index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 12.0).abs() < 0.01);
        }
    }

    #[test]
    fn matching_normalizes() {
        let mut counts = [0u64; NUM_ACTIONS];
        counts[0] = 3;
        counts[1] = 1;
        let h = ActionHistogram::from_counts(&counts).unwrap();
        assert_eq!(h.probs()[0], 0.75);
        assert_eq!(h.probs()[1], 0.25);
        assert!(ActionHistogram::from_counts(&[0; NUM_ACTIONS]).is_err());
    }

    #[test]
    fn replay_returns_logged_action() {
        let sim = world();
        let log = Arc::new(campaign_log(&sim, 3, 5).unwrap());
        let mut p = BehaviorPolicy::from_log(PolicyKind::R, &log).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for donor in 0..6 {
            for t in 0..STEPS {
                let a = behavior_action(&mut p, &ctx(donor, t), &mut rng).unwrap();
                assert_eq!(a, log.trajectories()[donor % 3].actions[t]);
            }
        }
        assert!(matches!(
            behavior_action(&mut p, &ctx(0, STEPS), &mut rng),
            Err(SimError::Policy(_))
        ));
    }

    #[test]
    fn schedule_covers_all_actions() {
        let s = campaign_schedule(4);
        assert_eq!(s.len(), STEPS);
        let distinct: BTreeSet<_> = s.iter().collect();
        assert_eq!(distinct.len(), NUM_ACTIONS);
        assert_eq!(s, campaign_schedule(4));
    }

    #[test]
    fn generated_counts_and_determinism() {
        let sim = world();
        let a = generate_dataset(&sim, &BehaviorPolicy::Uniform, 500, 3).unwrap();
        assert_eq!(a.len(), 23);
        a.validate(&sim.config).unwrap();
        for t in a.trajectories() {
            assert_eq!(t.observations.len(), HORIZON);
        }
        let b = generate_dataset(&sim, &BehaviorPolicy::Uniform, 500, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(50_000usize.div_ceil(STEPS), 2273);
        assert!(generate_dataset(&sim, &BehaviorPolicy::Uniform, 21, 3).is_err());
    }

    #[test]
    fn parallel_matches_serial() {
        let sim = world();
        let par = generate_dataset(&sim, &BehaviorPolicy::Uniform, 220, 8).unwrap();
        for (i, t) in par.trajectories().iter().enumerate() {
            let mut p = BehaviorPolicy::Uniform;
            let serial = rollout(&sim, &mut p, i, derive_seed(8, i as u64)).unwrap();
            assert_eq!(&serial, t);
        }
    }

    #[test]
    fn split_proportions() {
        let trajs = (0..600)
            .map(|i| Trajectory {
                donor_id: i,
                observations: vec![Observation([0; 5]); HORIZON],
                actions: vec![ActionId(0); STEPS],
                rewards: vec![0.0; STEPS],
            })
            .collect();
        let ds = Dataset::new(trajs, None);
        let (tr, va, te) = split_dataset(&ds, 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (400, 100, 100));
        let ids: BTreeSet<u64> = [&tr, &va, &te]
            .iter()
            .flat_map(|d| d.trajectories().iter().map(|t| t.donor_id))
            .collect();
        assert_eq!(ids.len(), 600);
        assert_eq!(split_dataset(&ds, 1).unwrap().0, tr);
        let small = Dataset::new(ds.trajectories()[..5].to_vec(), None);
        assert!(matches!(
            split_dataset(&small, 1),
            Err(SimError::TooFewDonors { .. })
        ));
    }
}
