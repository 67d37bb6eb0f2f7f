#![allow(dead_code)]

use hybrid_rl::numkit::{HeadSpec, Net, NetSpec};
use hybrid_rl::simworld::{
    ActionId, Dataset, ObsTables, Observation, Trajectory, NUM_ACTIONS, OBS_DIMS, STEPS,
};
use hybrid_rl::trainers::{
    fitted_q_step, q_learning_tabular_update, FlatTransition, Hyperparams, TabularQ,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite MDP with deterministic transitions and rewards.
#[derive(Debug, Clone)]
pub struct Mdp {
    pub next: Vec<Vec<usize>>,
    pub reward: Vec<Vec<f64>>,
}

impl Mdp {
    pub fn states(&self) -> usize {
        self.next.len()
    }

    pub fn actions(&self) -> usize {
        self.next[0].len()
    }
}

pub fn random_mdp(seed: u64) -> Mdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = rng.random_range(2..=5);
    let na = rng.random_range(2..=3);
    let next = (0..ns)
        .map(|_| (0..na).map(|_| rng.random_range(0..ns)).collect())
        .collect();
    let reward = (0..ns)
        .map(|_| (0..na).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    Mdp { next, reward }
}

pub fn value_iteration(mdp: &Mdp, gamma: f64) -> Vec<Vec<f64>> {
    let mut q = vec![vec![0.0; mdp.actions()]; mdp.states()];
    loop {
        let v: Vec<f64> = q
            .iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut delta: f64 = 0.0;
        for s in 0..mdp.states() {
            for a in 0..mdp.actions() {
                let new = mdp.reward[s][a] + gamma * v[mdp.next[s][a]];
                delta = delta.max((new - q[s][a]).abs());
                q[s][a] = new;
            }
        }
        if delta < 1e-13 {
            return q;
        }
    }
}

/// Uniform-action episodes from uniform start states, so every pair is visited.
pub fn covering_transitions(mdp: &Mdp, n: usize, seed: u64) -> Vec<(usize, usize, f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut s = 0;
    for i in 0..n {
        if i % 10 == 0 {
            s = rng.random_range(0..mdp.states());
        }
        let a = rng.random_range(0..mdp.actions());
        let s2 = mdp.next[s][a];
        out.push((s, a, mdp.reward[s][a], s2));
        s = s2;
    }
    out
}

pub fn tabular_q(mdp: &Mdp, gamma: f64, seed: u64) -> TabularQ {
    let mut q = TabularQ::zeros(mdp.states(), mdp.actions());
    for (s, a, r, s2) in covering_transitions(mdp, 60_000, seed) {
        q_learning_tabular_update(&mut q, s, a, r, Some(s2), gamma, 0.5);
    }
    q
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Linear Q-network on one-hot state features, trained by minibatch
/// Q-learning with a periodically synced target.
pub fn linear_q(mdp: &Mdp, gamma: f64, seed: u64) -> Vec<Vec<f64>> {
    let ns = mdp.states();
    let spec = NetSpec {
        input_dim: ns,
        core: None,
        heads: vec![HeadSpec::linear("q", mdp.actions())],
    };
    let mut online = Net::from_seed(spec, seed).unwrap();
    let mut target = online.clone();
    let data: Vec<FlatTransition> = covering_transitions(mdp, 5_000, seed ^ 0xa5a5)
        .into_iter()
        .map(|(s, a, r, s2)| FlatTransition {
            x: one_hot(ns, s),
            action: a,
            reward: r,
            next: Some(one_hot(ns, s2)),
        })
        .collect();
    let hp = Hyperparams {
        gamma,
        lr: 2.0,
        grad_clip: None,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for it in 1..=6_000 {
        let batch: Vec<FlatTransition> = (0..32)
            .map(|_| data[rng.random_range(0..data.len())].clone())
            .collect();
        fitted_q_step(&mut online, &target, 0, &batch, &hp).unwrap();
        if it % 20 == 0 {
            target = online.clone();
        }
    }
    let xs: Vec<Vec<f64>> = (0..ns).map(|s| one_hot(ns, s)).collect();
    online
        .eval_seq(&xs, &[0])
        .unwrap()
        .head(0)
        .unwrap()
        .to_vec()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Draws transitions straight from `truth`, with uniformly random
/// actions and donation flags, chained into 23-step trajectories.
pub fn sample_from_tables(truth: &ObsTables, n_transitions: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cards = truth.cardinalities;
    let trajs = (0..n_transitions.div_ceil(STEPS))
        .map(|i| {
            let mut o = Observation([0; OBS_DIMS]);
            for d in 0..OBS_DIMS {
                o.0[d] = rng.random_range(0..cards[d]) as u16;
            }
            let mut observations = vec![o];
            let mut actions = Vec::new();
            let mut rewards = Vec::new();
            for _ in 0..STEPS {
                let a = ActionId::new(rng.random_range(0..NUM_ACTIONS)).unwrap();
                let r = if rng.random::<bool>() { 50.0 } else { 0.0 };
                o = truth.sample_next(&o, a, r > 0.0, &mut rng);
                observations.push(o);
                actions.push(a);
                rewards.push(r);
            }
            Trajectory {
                donor_id: i as u64,
                observations,
                actions,
                rewards,
            }
        })
        .collect();
    Dataset::new(trajs, None)
}

/// Two-sided permutation p-value for a difference in means, from
/// `rounds` random relabelings (with the observed split counted once).
pub fn permutation_p(a: &[f64], b: &[f64], rounds: usize, seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let observed = (mean(a) - mean(b)).abs();
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 1;
    for _ in 0..rounds {
        pooled.shuffle(&mut rng);
        let (x, y) = pooled.split_at(a.len());
        if (mean(x) - mean(y)).abs() >= observed - 1e-12 {
            extreme += 1;
        }
    }
    extreme as f64 / (rounds + 1) as f64
}
