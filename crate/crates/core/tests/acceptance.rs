//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use hybrid_rl::agents::AgentKind;
use hybrid_rl::evalkit::{mean_std, same_deviated_eval, significance_test, CherryPicker};
use hybrid_rl::numkit::{corrupted_gradient_error, gradient_suite};
use hybrid_rl::simworld::{
    fit_observation_tables, generate_dataset, random_world, BehaviorPolicy, Dataset, PolicyKind,
    RandomWorldParams, SimulatorSpec, WorldConfig, OBS_DIMS, STEPS,
};
use hybrid_rl::xctl::{
    preset, run_experiment, simcheck, ExperimentConfig, ExperimentOutcome, ModelId,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const HYBRID: ModelId = ModelId::Agent(AgentKind::HybridRnn);
const SEPARATE: ModelId = ModelId::Separate(AgentKind::HybridRnn);
const RL_RNN: ModelId = ModelId::Agent(AgentKind::RlRnn);
const DQN: ModelId = ModelId::DqnBest;
const SL_DNN: ModelId = ModelId::Agent(AgentKind::SlDnn);

type Verdict = (bool, String);

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fresh(root: &Path, name: &str) -> PathBuf {
    let dir = root.join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn run(cfg: &ExperimentConfig) -> ExperimentOutcome {
    let out = run_experiment(cfg, None).expect("experiment runs");
    assert!(out.failures.is_empty(), "failed jobs: {:?}", out.failures);
    out
}

fn c1_gradients() -> Verdict {
    let t = Instant::now();
    let reports = gradient_suite(20).unwrap();
    let mut ok = reports.len() == 5;
    let mut parts = Vec::new();
    for r in &reports {
        ok &= r.instances >= 20 && r.max_rel_error < 1e-4;
        parts.push(format!("{} {:.1e}", r.name, r.max_rel_error));
    }
    let corrupted = corrupted_gradient_error(0).unwrap();
    ok &= corrupted > 1e-4;
    parts.push(format!("corrupted backward {corrupted:.1e}"));
    let secs = t.elapsed().as_secs_f64();
    ok &= secs < 60.0;
    (ok, parts.join(", "))
}

fn c2_oracles() -> Verdict {
    let t = Instant::now();
    let (mut tab, mut lin): (f64, f64) = (0.0, 0.0);
    for seed in 0..10 {
        let mdp = random_mdp(seed);
        let star = value_iteration(&mdp, 0.9);
        tab = tab.max(max_abs_diff(&tabular_q(&mdp, 0.9, seed).q, &star));
        lin = lin.max(max_abs_diff(&linear_q(&mdp, 0.9, seed), &star));
    }
    let ok = tab < 1e-3 && lin < 1e-3 && t.elapsed().as_secs_f64() < 60.0;
    (
        ok,
        format!("tabular |Q-Q*| {tab:.1e}, linear {lin:.1e} over 10 MDPs"),
    )
}

fn c3_simulator(world: &SimulatorSpec) -> Verdict {
    let t = Instant::now();
    let config = WorldConfig {
        cardinalities: [3; OBS_DIMS],
        ..Default::default()
    };
    let params = RandomWorldParams {
        calibration_transitions: 2_200,
        ..Default::default()
    };
    let truth = random_world(&config, &params, 21).unwrap().tables;
    let fitted =
        fit_observation_tables(&sample_from_tables(&truth, 100_000, 4), &config, 0.1).unwrap();
    let mut worst: f64 = 0.0;
    for d in 0..OBS_DIMS {
        for (p, q) in truth.tables[d].iter().zip(&fitted.tables[d]) {
            worst = worst.max(tv(p, q));
        }
    }
    let step = simcheck(world, 50_000, 0).unwrap().max_tv;
    let ok = worst < 0.05 && step < 0.02 && t.elapsed().as_secs_f64() < 120.0;
    (
        ok,
        format!("table fit worst row TV {worst:.4}, sim_step TV {step:.4}"),
    )
}

/// `better` beats `worse` in mean, and with Welch p < 0.05 when `p` is set.
fn beats(
    out: &ExperimentOutcome,
    policy: PolicyKind,
    size: usize,
    better: ModelId,
    worse: ModelId,
    p: bool,
) -> Verdict {
    let (a, b) = (
        out.values(better, policy, size),
        out.values(worse, policy, size),
    );
    let (ma, mb) = (mean(&a), mean(&b));
    let mut ok = a.len() >= 10 && b.len() >= 10 && ma > mb;
    let mut s = format!("{better} {ma:.3} > {worse} {mb:.3}");
    if p {
        let pv = significance_test(&a, &b).unwrap();
        ok &= pv < 0.05;
        s += &format!(" (p={pv:.2e})");
    }
    (ok, s)
}

fn all(vs: Vec<Verdict>) -> Verdict {
    let ok = vs.iter().all(|v| v.0);
    let s = vs
        .iter()
        .map(|(p, s)| format!("{}{s}", if *p { "" } else { "[x] " }))
        .collect::<Vec<_>>()
        .join("; ");
    (ok, s)
}

fn c4_ordering(e1: &ExperimentOutcome) -> Verdict {
    let (m, n) = (PolicyKind::M, 100_000);
    let joint = mean(&e1.values(HYBRID, m, n));
    let sep = mean(&e1.values(SEPARATE, m, n));
    all(vec![
        beats(e1, m, n, HYBRID, RL_RNN, true),
        beats(e1, m, n, RL_RNN, DQN, true),
        beats(e1, m, n, DQN, SL_DNN, true),
        (
            joint >= sep,
            format!("joint {joint:.3} >= separate {sep:.3}"),
        ),
    ])
}

fn c5_policy_effect(root: &Path) -> Verdict {
    let mut cfg = preset("E2").unwrap();
    cfg.policies = vec![PolicyKind::U, PolicyKind::R];
    cfg.roster = vec![
        DQN,
        RL_RNN,
        ModelId::Agent(AgentKind::RlLstm),
        HYBRID,
        ModelId::Agent(AgentKind::HybridLstm),
    ];
    cfg.output_dir = fresh(root, "e2");
    let out = run(&cfg);
    all(cfg
        .roster
        .iter()
        .map(|&m| {
            let u = mean(&out.values(m, PolicyKind::U, 100_000));
            let r = mean(&out.values(m, PolicyKind::R, 100_000));
            (r < u, format!("{m} R {r:.3} < U {u:.3}"))
        })
        .collect())
}

fn c6_data_sizes(root: &Path) -> Verdict {
    let mut cfg = preset("E3").unwrap();
    cfg.data_sizes = vec![50_000, 200_000];
    cfg.roster = vec![SL_DNN, DQN, RL_RNN, HYBRID];
    cfg.output_dir = fresh(root, "e3");
    let out = run(&cfg);
    let mut vs = Vec::new();
    for n in [50_000, 200_000] {
        for (a, b) in [(HYBRID, RL_RNN), (RL_RNN, DQN), (DQN, SL_DNN)] {
            let (ok, s) = beats(&out, PolicyKind::M, n, a, b, false);
            vs.push((ok, format!("{}K: {s}", n / 1000)));
        }
    }
    all(vs)
}

fn episode_means(ds: &Dataset) -> Vec<f64> {
    ds.trajectories()
        .iter()
        .map(|t| t.total_reward() / STEPS as f64)
        .collect()
}

fn c7_cherry_picker(world: &SimulatorSpec) -> Verdict {
    let behavior = BehaviorPolicy::Uniform;
    let test = generate_dataset(world, &behavior, 1000 * STEPS, 31).unwrap();
    let picker = CherryPicker::new(&test, test.mean_reward());
    let sd = same_deviated_eval(&picker, &test).unwrap();
    let same = sd.same_mean.unwrap_or(f64::NEG_INFINITY);

    let n = 2000 * STEPS;
    let own = episode_means(
        &generate_dataset(world, &BehaviorPolicy::Greedy(Box::new(picker)), n, 32).unwrap(),
    );
    let base = episode_means(&generate_dataset(world, &behavior, n, 33).unwrap());
    let ((mo, so), (mb, sb)) = (mean_std(&own), mean_std(&base));
    let half = 1.96 * (so * so / own.len() as f64 + sb * sb / base.len() as f64).sqrt();
    let ok = same > test.mean_reward() && (mo - mb).abs() < half;
    (
        ok,
        format!(
            "same_mean {same:.3} > dataset mean {:.3}; true value {mo:.3} vs behavior {mb:.3} (95% CI half-width {half:.3})",
            test.mean_reward()
        ),
    )
}

fn c8_determinism(root: &Path, first: &Path) -> Verdict {
    let mut cfg = preset("E1").unwrap();
    cfg.output_dir = fresh(root, "e1-rerun");
    run(&cfg);
    let a = fs::read(first.join("summary.csv")).unwrap();
    let b = fs::read(cfg.output_dir.join("summary.csv")).unwrap();
    (
        a == b,
        format!("summary.csv {} bytes, identical: {}", a.len(), a == b),
    )
}

fn c9_calibration() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let trials = 1000;
    let (mut welch, mut perm, mut agree) = (0, 0, 0);
    for t in 0..trials {
        let mut draw =
            |n| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let (a, b) = (draw(10), draw(10));
        let w = significance_test(&a, &b).unwrap() < 0.05;
        let p = permutation_p(&a, &b, 2000, t) < 0.05;
        welch += w as usize;
        perm += p as usize;
        agree += (w == p) as usize;
    }
    let rate = |k: usize| k as f64 / trials as f64;
    let band = |r: f64| (0.03..=0.07).contains(&r);
    let ok = band(rate(welch)) && band(rate(perm));
    (
        ok,
        format!(
            "Welch FPR {:.3}, permutation FPR {:.3}, decisions agree {:.3}",
            rate(welch),
            rate(perm),
            rate(agree)
        ),
    )
}

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, id: u8, name: &str, f: impl FnOnce() -> Verdict) {
        let t = Instant::now();
        let (ok, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        if !ok {
            self.failed += 1;
        }
        println!(
            "criterion {id} {:<4} {name} [{:.0}s]: {detail}",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        std::io::stdout().flush().ok();
    }
}

fn main() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&root).unwrap();
    let world = preset("E1").unwrap().world.build().unwrap();
    let mut report = Report { failed: 0 };

    report.check(1, "gradient fidelity", c1_gradients);
    report.check(2, "value-iteration oracles", c2_oracles);
    report.check(3, "simulator consistency", || c3_simulator(&world));
    report.check(7, "SAME/DEVIATED flaw", || c7_cherry_picker(&world));
    report.check(9, "significance calibration", c9_calibration);

    let mut e1 = preset("E1").unwrap();
    e1.output_dir = fresh(&root, "e1");
    let e1_out = catch_unwind(|| run(&e1)).ok();
    report.check(4, "E1 ordering", || {
        c4_ordering(e1_out.as_ref().expect("E1 completed"))
    });
    report.check(5, "E2 logging-policy effect", || c5_policy_effect(&root));
    report.check(6, "E3 stability across data sizes", || c6_data_sizes(&root));
    report.check(8, "E1 determinism", || {
        c8_determinism(&root, &e1.output_dir)
    });

    println!("acceptance: {} of 9 criteria failed", report.failed);
    if report.failed > 0 {
        std::process::exit(1);
    }
}
