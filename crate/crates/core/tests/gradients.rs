use hybrid_rl::numkit::{
    compare_gradients, finite_diff_check, Activation, CellKind, CoreSpec, HeadSpec, Net, NetSpec,
    Params, SeqOutputs,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type DOut = Vec<Option<Vec<Vec<f64>>>>;

/// Half squared error against fixed random targets on every evaluated head.
fn squared_loss(targets: Vec<Vec<Vec<f64>>>) -> impl Fn(&SeqOutputs) -> (f64, DOut) {
    move |out: &SeqOutputs| {
        let mut total = 0.0;
        let mut d = Vec::new();
        for (k, tk) in targets.iter().enumerate() {
            match out.head(k) {
                Some(ys) => {
                    let mut dk = Vec::new();
                    for (y, t) in ys.iter().zip(tk) {
                        let diff: Vec<f64> = y.iter().zip(t).map(|(a, b)| a - b).collect();
                        total += 0.5 * diff.iter().map(|v| v * v).sum::<f64>();
                        dk.push(diff);
                    }
                    d.push(Some(dk));
                }
                None => d.push(None),
            }
        }
        (total, d)
    }
}

fn random_case(
    spec: &NetSpec,
    steps: usize,
    seed: u64,
) -> (Net, Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mut net = Net::from_seed(spec.clone(), seed).unwrap();
    // Push the weights away from the small-init regime so gates and tanh
    // units are exercised away from their linear region.
    let flat: Vec<f64> = net
        .params()
        .to_flat()
        .iter()
        .map(|_| rng.random_range(-0.8..0.8))
        .collect();
    net.params_mut().set_flat(&flat).unwrap();
    let inputs = (0..steps)
        .map(|_| {
            (0..spec.input_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let targets = spec
        .heads
        .iter()
        .map(|h| {
            (0..steps)
                .map(|_| (0..h.out).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        })
        .collect();
    (net, inputs, targets)
}

fn worst_error(spec: &NetSpec, steps: usize, instances: u64) -> f64 {
    (0..instances)
        .map(|seed| {
            let (net, xs, targets) = random_case(spec, steps, seed);
            finite_diff_check(&net, &xs, &squared_loss(targets)).unwrap()
        })
        .fold(0.0, f64::max)
}

fn recurrent(cell: CellKind, heads: Vec<HeadSpec>) -> NetSpec {
    NetSpec {
        input_dim: 5,
        core: Some(CoreSpec { cell, hidden: 4 }),
        heads,
    }
}

#[test]
fn dense_network_gradients() {
    let spec = NetSpec {
        input_dim: 6,
        core: None,
        heads: vec![HeadSpec::mlp("out", &[7], Activation::Tanh, 3)],
    };
    let err = worst_error(&spec, 4, 20);
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn rnn_bptt_over_22_steps() {
    let spec = recurrent(CellKind::Rnn, vec![HeadSpec::linear("out", 3)]);
    let err = worst_error(&spec, 22, 20);
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn lstm_bptt_over_5_and_22_steps() {
    let spec = recurrent(CellKind::Lstm, vec![HeadSpec::linear("out", 3)]);
    assert!(worst_error(&spec, 5, 20) < 1e-4);
    let err = worst_error(&spec, 22, 20);
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn hybrid_heads_both_cells() {
    for cell in [CellKind::Rnn, CellKind::Lstm] {
        let spec = recurrent(
            cell,
            vec![
                HeadSpec::linear("obs", 6),
                HeadSpec::linear("reward", 3),
                HeadSpec::mlp("q", &[5], Activation::Tanh, 3).detached(),
            ],
        );
        let err = worst_error(&spec, 22, 20);
        assert!(err < 1e-4, "{cell:?}: max rel err {err}");
    }
}

#[test]
fn linear_regression_is_near_exact() {
    let spec = NetSpec {
        input_dim: 3,
        core: None,
        heads: vec![HeadSpec::linear("y", 1)],
    };
    let (net, xs, targets) = random_case(&spec, 8, 11);
    let err = finite_diff_check(&net, &xs, &squared_loss(targets)).unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn corrupted_gradient_is_detected() {
    let spec = recurrent(CellKind::Lstm, vec![HeadSpec::linear("out", 3)]);
    let (mut net, xs, targets) = random_case(&spec, 5, 3);
    let loss = squared_loss(targets);
    let heads = net.all_heads();
    let out = net.forward_seq(&xs, &heads).unwrap();
    let (_, d) = loss(&out);
    let mut grads = net.backward(&d).unwrap();
    // Flip the sign of a single nonzero entry.
    let mut flat = grads.to_flat();
    let idx = flat.iter().position(|g| g.abs() > 1e-3).unwrap();
    flat[idx] = -flat[idx];
    grads.set_flat(&flat).unwrap();
    let err = compare_gradients(&net, &xs, &loss, &grads).unwrap();
    assert!(err > 0.1, "{err}");
}

#[test]
fn non_finite_parameters_are_rejected() {
    let spec = recurrent(CellKind::Rnn, vec![HeadSpec::linear("out", 2)]);
    let (mut net, xs, targets) = random_case(&spec, 3, 5);
    let mut flat = net.params().to_flat();
    flat[0] = f64::NAN;
    net.params_mut().set_flat(&flat).unwrap();
    assert!(finite_diff_check(&net, &xs, &squared_loss(targets)).is_err());
}

#[test]
fn one_hot_inputs_match_dense_path() {
    // Sparse matvec shortcuts must not change gradients.
    let spec = recurrent(CellKind::Lstm, vec![HeadSpec::linear("out", 2)]);
    let (net, _, targets) = random_case(&spec, 22, 8);
    let xs: Vec<Vec<f64>> = (0..22)
        .map(|t| {
            let mut x = vec![0.0; 5];
            x[t % 5] = 1.0;
            x
        })
        .collect();
    let err = finite_diff_check(&net, &xs, &squared_loss(targets)).unwrap();
    assert!(err < 1e-4, "{err}");
}
