mod common;

use common::{sample_from_tables, tv};
use hybrid_rl::numkit::{CellKind, Net, NetSpec};
use hybrid_rl::simworld::{
    fit_observation_tables, fit_reward_net, generate_dataset, random_world, sim_reset, sim_step,
    ActionId, BehaviorPolicy, Dataset, Observation, RandomWorldParams, RewardFitConfig, SimState,
    SimulatorSpec, Trajectory, WorldConfig, HORIZON, NUM_ACTIONS, OBS_DIMS, STEPS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn world(seed: u64) -> SimulatorSpec {
    random_world(&WorldConfig::default(), &RandomWorldParams::default(), seed).unwrap()
}

#[test]
fn table_fit_recovers_known_tables_per_row() {
    let config = WorldConfig {
        cardinalities: [3; OBS_DIMS],
        ..Default::default()
    };
    let params = RandomWorldParams {
        calibration_transitions: 2_200,
        ..Default::default()
    };
    let truth = random_world(&config, &params, 21).unwrap().tables;
    let ds = sample_from_tables(&truth, 100_000, 4);
    let fitted = fit_observation_tables(&ds, &config, 0.1).unwrap();
    let mut worst: f64 = 0.0;
    for d in 0..OBS_DIMS {
        for (p, q) in truth.tables[d].iter().zip(&fitted.tables[d]) {
            worst = worst.max(tv(p, q));
        }
    }
    assert!(worst < 0.05, "worst row TV {worst}");
}

#[test]
fn table_fit_converges_with_more_data() {
    let world = world(3);
    let small = generate_dataset(&world, &BehaviorPolicy::Uniform, 10_000, 1).unwrap();
    let large = generate_dataset(&world, &BehaviorPolicy::Uniform, 100_000, 1).unwrap();
    let weighted_tv = |ds: &Dataset| {
        let fitted = fit_observation_tables(ds, &world.config, 0.1).unwrap();
        let mut total = 0.0;
        let mut n = 0.0;
        for traj in ds.trajectories() {
            for t in 0..STEPS {
                let a = traj.actions[t];
                let donated = traj.rewards[t] > 0.0;
                for d in 0..OBS_DIMS {
                    let v = traj.observations[t].get(d);
                    total += tv(
                        world.tables.row(d, v, a, donated),
                        fitted.row(d, v, a, donated),
                    );
                    n += 1.0;
                }
            }
        }
        total / n
    };
    let (s, l) = (weighted_tv(&small), weighted_tv(&large));
    assert!(l < s, "{l} !< {s}");
    assert!(l < 0.05, "visit-weighted TV {l}");
}

fn state_at(world: &SimulatorSpec, obs: Observation) -> SimState {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut st = sim_reset(world, &mut rng);
    st.obs = obs;
    st
}

#[test]
fn sim_step_frequencies_match_tables() {
    let world = world(5);
    let starts = [
        (Observation([0, 1, 2, 3, 4]), 0),
        (Observation([7, 7, 0, 5, 11]), 5),
        (Observation([3, 0, 6, 1, 0]), 11),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 50_000;
    for (obs, a) in starts {
        let a = ActionId::new(a).unwrap();
        let base = state_at(&world, obs);
        let mut counts: Vec<Vec<f64>> = world
            .config
            .cardinalities
            .iter()
            .map(|&k| vec![0.0; k])
            .collect();
        let mut donated = None;
        for _ in 0..n {
            let mut st = base.clone();
            let out = sim_step(&world, &mut st, a, &mut rng).unwrap();
            donated = Some(out.reward > 0.0);
            for d in 0..OBS_DIMS {
                counts[d][out.obs.get(d)] += 1.0;
            }
        }
        for d in 0..OBS_DIMS {
            let freq: Vec<f64> = counts[d].iter().map(|c| c / n as f64).collect();
            let row = world.tables.row(d, obs.get(d), a, donated.unwrap());
            let dist = tv(&freq, row);
            assert!(dist < 0.02, "dim {d}: TV {dist}");
        }
    }
}

#[test]
fn next_observation_dimensions_are_independent() {
    let world = world(6);
    let obs = Observation([2, 5, 1, 1, 3]);
    let a = ActionId::new(4).unwrap();
    let base = state_at(&world, obs);
    let (k0, k1) = (world.config.cardinalities[0], world.config.cardinalities[1]);
    let mut joint = vec![vec![0.0; k1]; k0];
    let n = 50_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..n {
        let mut st = base.clone();
        let out = sim_step(&world, &mut st, a, &mut rng).unwrap();
        joint[out.obs.get(0)][out.obs.get(1)] += 1.0;
    }
    let row: Vec<f64> = (0..k0).map(|i| joint[i].iter().sum::<f64>()).collect();
    let col: Vec<f64> = (0..k1)
        .map(|j| (0..k0).map(|i| joint[i][j]).sum::<f64>())
        .collect();
    let mut chi2 = 0.0;
    let mut cells = 0usize;
    for i in 0..k0 {
        for j in 0..k1 {
            let e = row[i] * col[j] / n as f64;
            if e > 5.0 {
                chi2 += (joint[i][j] - e).powi(2) / e;
                cells += 1;
            }
        }
    }
    let live_rows = row.iter().filter(|&&c| c > 0.0).count();
    let live_cols = col.iter().filter(|&&c| c > 0.0).count();
    let dof = ((live_rows - 1) * (live_cols - 1)).max(1) as f64;
    // Upper 0.1% tail of chi-square, via the Wilson-Hilferty approximation.
    let z = 3.09;
    let crit = dof * (1.0 - 2.0 / (9.0 * dof) + z * (2.0 / (9.0 * dof)).sqrt()).powi(3);
    assert!(cells > 0);
    assert!(chi2 < crit, "chi2 {chi2} >= {crit} on {dof} dof");
}

#[test]
fn uniform_mean_reward_in_band() {
    for seed in [0, 1, 2] {
        let world = world(seed);
        let ds = generate_dataset(&world, &BehaviorPolicy::Uniform, 10_000, 999).unwrap();
        let m = ds.mean_reward();
        assert!((5.0..=15.0).contains(&m), "seed {seed}: mean {m}");
    }
}

#[test]
fn reward_depends_on_history() {
    let world = world(8);
    let obs = Observation([1, 1, 1, 1, 1]);
    // Same observations and rewards; the histories differ only in the first action.
    let reward_after = |first: usize| {
        let mut st = state_at(&world, obs);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let first = ActionId::new(first).unwrap();
        let second = ActionId::new(5).unwrap();
        sim_step(&world, &mut st, first, &mut rng).unwrap();
        st.obs = obs;
        st.prev = Some((first, 0.0));
        sim_step(&world, &mut st, second, &mut rng).unwrap();
        st.obs = obs;
        st.prev = Some((second, 0.0));
        let input = world.config.encode_step(&st.obs, st.prev);
        let h = world.reward.advance(&st.hidden, &input).unwrap();
        world.reward.rewards(&h.h)
    };
    assert_eq!(reward_after(2), reward_after(2));
    assert!((1..NUM_ACTIONS).any(|a| reward_after(0) != reward_after(a)));
}

fn indicator_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajs = (0..n)
        .map(|i| {
            let observations = (0..HORIZON)
                .map(|_| {
                    let mut o = [0u16; OBS_DIMS];
                    for (d, v) in o.iter_mut().enumerate() {
                        *v = rng.random_range(0..WorldConfig::default().cardinalities[d]) as u16;
                    }
                    Observation(o)
                })
                .collect();
            let actions: Vec<ActionId> = (0..STEPS)
                .map(|_| ActionId::new(rng.random_range(0..NUM_ACTIONS)).unwrap())
                .collect();
            let rewards = actions
                .iter()
                .map(|a| if a.index() == 3 { 100.0 } else { 0.0 })
                .collect();
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

#[test]
fn reward_net_learns_action_indicator() {
    let cfg = WorldConfig::default();
    let train = indicator_dataset(600, 1);
    let held_out = indicator_dataset(40, 2);
    let fit = RewardFitConfig {
        epochs: 150,
        lr: 1.0,
        seed: 3,
        ..Default::default()
    };
    let (net, report) = fit_reward_net(&train, Some(&held_out), &cfg, &fit).unwrap();
    assert!(report.train_loss.last().unwrap() < report.train_loss.first().unwrap());
    assert!(report.valid_loss.is_some());
    for traj in held_out.trajectories() {
        let mut h = net.zero_state();
        for t in 0..STEPS {
            let prev = (t > 0).then(|| (traj.actions[t - 1], traj.rewards[t - 1]));
            h = net
                .advance(&h, &cfg.encode_step(&traj.observations[t], prev))
                .unwrap();
            let r = net.reward(&h.h, traj.actions[t]);
            assert!(
                (r - traj.rewards[t]).abs() <= 1.0,
                "predicted {r}, actual {}",
                traj.rewards[t]
            );
        }
    }
}

#[test]
fn reward_fit_zero_epochs_and_determinism() {
    let cfg = WorldConfig::default();
    let train = indicator_dataset(20, 1);
    let fit = RewardFitConfig {
        epochs: 0,
        seed: 9,
        ..Default::default()
    };
    let (net, report) = fit_reward_net(&train, None, &cfg, &fit).unwrap();
    assert!(report.train_loss.is_empty());
    let spec = NetSpec {
        input_dim: cfg.step_width(),
        core: Some(hybrid_rl::numkit::CoreSpec {
            cell: CellKind::Rnn,
            hidden: fit.hidden,
        }),
        heads: vec![hybrid_rl::numkit::HeadSpec::linear("reward", NUM_ACTIONS)],
    };
    let init = Net::from_seed(spec, 9).unwrap();
    assert_eq!(Some(&net.core), init.params().core.as_ref());

    let fit = RewardFitConfig {
        epochs: 2,
        seed: 9,
        ..Default::default()
    };
    let a = fit_reward_net(&train, None, &cfg, &fit).unwrap().0;
    let b = fit_reward_net(&train, None, &cfg, &fit).unwrap().0;
    assert_eq!(a, b);
}

#[test]
fn generated_data_is_reproducible_and_valid() {
    let world = world(12);
    let a = generate_dataset(&world, &BehaviorPolicy::Uniform, 2_000, 5).unwrap();
    let b = generate_dataset(&world, &BehaviorPolicy::Uniform, 2_000, 5).unwrap();
    assert_eq!(a, b);
    a.validate(&world.config).unwrap();
    assert_eq!(a.len(), 91);
}
