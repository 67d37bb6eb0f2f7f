use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Activation, CellKind, CoreSpec, GradBuffers, HeadSpec, Net, NetSpec, NumError, Params, Result,
    SeqOutputs,
};

/// Step of the five-point central-difference stencil.
pub const FD_EPSILON: f64 = 1e-3;

/// A scalar loss over a network's sequence outputs together with its
/// derivative with respect to those outputs.
pub trait SeqLoss {
    fn value_and_grad(&self, out: &SeqOutputs) -> (f64, Vec<Option<Vec<Vec<f64>>>>);
}

impl<F> SeqLoss for F
where
    F: Fn(&SeqOutputs) -> (f64, Vec<Option<Vec<Vec<f64>>>>),
{
    fn value_and_grad(&self, out: &SeqOutputs) -> (f64, Vec<Option<Vec<Vec<f64>>>>) {
        self(out)
    }
}

/// Max relative error between the analytic gradient and central finite
/// differences, `|a - n| / max(|a|, |n|, 1e-8)` over every parameter.
///
/// The analytic side ignores head detachment so both sides differentiate the
/// same function.
pub fn finite_diff_check(net: &Net, inputs: &[Vec<f64>], loss: &dyn SeqLoss) -> Result<f64> {
    let mut probe = net.clone();
    let heads = probe.all_heads();
    let out = probe.forward_seq(inputs, &heads)?;
    let (_, d_out) = loss.value_and_grad(&out);
    let analytic = probe.backward_full(&d_out)?;
    compare_gradients(net, inputs, loss, &analytic)
}

/// Compares a supplied gradient against finite differences. Exposed
/// separately so a deliberately wrong gradient can be shown to fail.
pub fn compare_gradients(
    net: &Net,
    inputs: &[Vec<f64>],
    loss: &dyn SeqLoss,
    analytic: &GradBuffers,
) -> Result<f64> {
    if !net.params().all_finite() {
        return Err(NumError::NonFinite("network parameters"));
    }
    let grad = analytic.to_flat();
    if grad.len() != net.params().num_params() {
        return Err(NumError::Shape(format!(
            "gradient has {} entries, network has {}",
            grad.len(),
            net.params().num_params()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(NumError::NonFinite("analytic gradient"));
    }
    let heads = net.all_heads();
    let base = net.params().to_flat();
    let mut probe = net.clone();
    let mut eval = |flat: &[f64]| -> Result<f64> {
        probe.params_mut().set_flat(flat)?;
        let out = probe.eval_seq(inputs, &heads)?;
        let v = loss.value_and_grad(&out).0;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumError::NonFinite("loss"))
        }
    };
    let mut worst: f64 = 0.0;
    let mut flat = base.clone();
    for i in 0..base.len() {
        let mut at = |offset: f64| -> Result<f64> {
            flat[i] = base[i] + offset;
            eval(&flat)
        };
        let near = at(FD_EPSILON)? - at(-FD_EPSILON)?;
        let far = at(2.0 * FD_EPSILON)? - at(-2.0 * FD_EPSILON)?;
        flat[i] = base[i];
        let numeric = (8.0 * near - far) / (12.0 * FD_EPSILON);
        let a = grad[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Half squared error against fixed targets on every head.
#[derive(Debug, Clone)]
pub struct SquaredTargets(pub Vec<Vec<Vec<f64>>>);

impl SeqLoss for SquaredTargets {
    fn value_and_grad(&self, out: &SeqOutputs) -> (f64, Vec<Option<Vec<Vec<f64>>>>) {
        let mut total = 0.0;
        let d = self
            .0
            .iter()
            .enumerate()
            .map(|(k, tk)| {
                out.head(k).map(|ys| {
                    ys.iter()
                        .zip(tk)
                        .map(|(y, t)| {
                            let diff: Vec<f64> = y.iter().zip(t).map(|(a, b)| a - b).collect();
                            total += 0.5 * diff.iter().map(|v| v * v).sum::<f64>();
                            diff
                        })
                        .collect()
                })
            })
            .collect();
        (total, d)
    }
}

/// A network with weights drawn from U(-0.8, 0.8), random inputs and random
/// targets, all determined by `seed`.
pub fn random_instance(
    spec: &NetSpec,
    steps: usize,
    seed: u64,
) -> Result<(Net, Vec<Vec<f64>>, SquaredTargets)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut net = Net::from_seed(spec.clone(), seed)?;
    let flat: Vec<f64> = (0..net.params().num_params())
        .map(|_| rng.random_range(-0.8..0.8))
        .collect();
    net.params_mut().set_flat(&flat)?;
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
    Ok((net, inputs, SquaredTargets(targets)))
}

/// Worst finite-difference error for one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

/// The architectures used by the agents, at small sizes: a dense MLP, a
/// plain recurrent and an LSTM core over 22 steps, and both hybrid head
/// layouts.
pub fn gradient_suite(instances: usize) -> Result<Vec<GradCheckReport>> {
    let rec = |cell, heads| NetSpec {
        input_dim: 5,
        core: Some(CoreSpec { cell, hidden: 4 }),
        heads,
    };
    let hybrid = |cell| {
        rec(
            cell,
            vec![
                HeadSpec::linear("obs", 6),
                HeadSpec::linear("reward", 3),
                HeadSpec::mlp("q", &[5], Activation::Tanh, 3).detached(),
            ],
        )
    };
    let cases = [
        (
            "dense",
            NetSpec {
                input_dim: 6,
                core: None,
                heads: vec![HeadSpec::mlp("out", &[7], Activation::Tanh, 3)],
            },
            4,
        ),
        (
            "rnn-22",
            rec(CellKind::Rnn, vec![HeadSpec::linear("out", 3)]),
            22,
        ),
        (
            "lstm-22",
            rec(CellKind::Lstm, vec![HeadSpec::linear("out", 3)]),
            22,
        ),
        ("hybrid-rnn", hybrid(CellKind::Rnn), 22),
        ("hybrid-lstm", hybrid(CellKind::Lstm), 22),
    ];
    cases
        .into_iter()
        .map(|(name, spec, steps)| {
            let mut worst: f64 = 0.0;
            for i in 0..instances {
                let (net, xs, loss) = random_instance(&spec, steps, i as u64)?;
                worst = worst.max(finite_diff_check(&net, &xs, &loss)?);
            }
            Ok(GradCheckReport {
                name,
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}

/// Error reported by [`compare_gradients`] after flipping the sign of one
/// sizeable entry of a correct LSTM gradient. Large values mean the check
/// catches broken backward passes.
pub fn corrupted_gradient_error(seed: u64) -> Result<f64> {
    let spec = NetSpec {
        input_dim: 5,
        core: Some(CoreSpec {
            cell: CellKind::Lstm,
            hidden: 4,
        }),
        heads: vec![HeadSpec::linear("out", 3)],
    };
    let (mut net, xs, loss) = random_instance(&spec, 5, seed)?;
    let heads = net.all_heads();
    let out = net.forward_seq(&xs, &heads)?;
    let (_, d) = loss.value_and_grad(&out);
    let mut grads = net.backward(&d)?;
    let mut flat = grads.to_flat();
    let idx = flat
        .iter()
        .position(|g| g.abs() > 1e-3)
        .ok_or(NumError::NonFinite("gradient is all zero"))?;
    flat[idx] = -flat[idx];
    grads.set_flat(&flat)?;
    compare_gradients(&net, &xs, &loss, &grads)
}
