use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cells::CoreTrace;
use super::dense::MlpCache;
use super::{
    check_dim, Activation, CellKind, CellState, DenseLayer, Mlp, NumError, Params, Recurrent,
    Result,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreSpec {
    pub cell: CellKind,
    pub hidden: usize,
}

/// An output head: an MLP reading the core's hidden state (or the raw input
/// when the network has no recurrent core).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub out: usize,
    pub output_activation: Activation,
    /// Gradients from this head stop at the hidden-state boundary and never
    /// reach the recurrent core.
    #[serde(default)]
    pub detached: bool,
}

impl HeadSpec {
    pub fn linear(name: &str, out: usize) -> Self {
        Self {
            name: name.to_string(),
            hidden: Vec::new(),
            hidden_activation: Activation::Tanh,
            out,
            output_activation: Activation::Identity,
            detached: false,
        }
    }

    pub fn mlp(name: &str, hidden: &[usize], activation: Activation, out: usize) -> Self {
        Self {
            name: name.to_string(),
            hidden: hidden.to_vec(),
            hidden_activation: activation,
            out,
            output_activation: Activation::Identity,
            detached: false,
        }
    }

    pub fn detached(mut self) -> Self {
        self.detached = true;
        self
    }
}

/// Layered description of a network: optional recurrent core plus heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub core: Option<CoreSpec>,
    pub heads: Vec<HeadSpec>,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(NumError::Spec("input_dim must be >= 1".into()));
        }
        if let Some(core) = &self.core {
            if core.hidden == 0 {
                return Err(NumError::Spec("core hidden size must be >= 1".into()));
            }
        }
        if self.heads.is_empty() {
            return Err(NumError::Spec("at least one head is required".into()));
        }
        for h in &self.heads {
            if h.out == 0 || h.hidden.contains(&0) {
                return Err(NumError::Spec(format!(
                    "head `{}` has a zero-width layer",
                    h.name
                )));
            }
        }
        Ok(())
    }

    /// Width of the vector every head reads.
    pub fn feature_dim(&self) -> usize {
        self.core.map_or(self.input_dim, |c| c.hidden)
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.name == name)
    }

    /// Deterministic initialization from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<NetParams> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let core = self
            .core
            .map(|c| Recurrent::init(c.cell, self.input_dim, c.hidden, &mut rng));
        let heads = self
            .heads
            .iter()
            .map(|h| {
                let mut layers = Vec::with_capacity(h.hidden.len() + 1);
                let mut width = self.feature_dim();
                for &n in &h.hidden {
                    layers.push(DenseLayer::init(n, width, h.hidden_activation, &mut rng));
                    width = n;
                }
                layers.push(DenseLayer::init(
                    h.out,
                    width,
                    h.output_activation,
                    &mut rng,
                ));
                Mlp::new(layers)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NetParams { core, heads })
    }

    /// Largest initial weight magnitude any parameter can take.
    pub fn init_bound(&self) -> f64 {
        let mut bound: f64 = 0.0;
        if let Some(c) = &self.core {
            bound = bound.max(1.0 / ((self.input_dim + c.hidden) as f64).sqrt());
            if c.cell == CellKind::Lstm {
                bound = bound.max(super::cells::LSTM_FORGET_BIAS);
            }
        }
        for h in &self.heads {
            let mut width = self.feature_dim();
            for &n in h.hidden.iter().chain(std::iter::once(&h.out)) {
                bound = bound.max(1.0 / (width as f64).sqrt());
                width = n;
            }
        }
        bound
    }
}

/// Network weights, ordered as core blocks followed by each head's layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub core: Option<Recurrent>,
    pub heads: Vec<Mlp>,
}

/// Gradient buffers share the parameter layout.
pub type GradBuffers = NetParams;

impl NetParams {
    fn check_against(&self, spec: &NetSpec) -> Result<()> {
        spec.validate()?;
        match (&self.core, &spec.core) {
            (None, None) => {}
            (Some(core), Some(cs)) => {
                if core.kind() != cs.cell {
                    return Err(NumError::Spec("core cell kind differs from spec".into()));
                }
                check_dim("core hidden", cs.hidden, core.hidden())?;
                check_dim("core input", spec.input_dim, core.in_dim())?;
            }
            _ => return Err(NumError::Spec("core presence differs from spec".into())),
        }
        check_dim("head count", spec.heads.len(), self.heads.len())?;
        for (h, hs) in self.heads.iter().zip(&spec.heads) {
            check_dim("head input", spec.feature_dim(), h.in_dim())?;
            check_dim("head output", hs.out, h.out_dim())?;
            check_dim("head depth", hs.hidden.len() + 1, h.layers().len())?;
        }
        Ok(())
    }
}

impl Params for NetParams {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut out = self.core.as_ref().map_or_else(Vec::new, |c| c.blocks());
        for h in &self.heads {
            out.extend(h.blocks());
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.core.as_mut().map_or_else(Vec::new, |c| c.blocks_mut());
        for h in &mut self.heads {
            out.extend(h.blocks_mut());
        }
        out
    }
}

/// Per-head output sequences; `None` for heads that were not evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqOutputs {
    pub heads: Vec<Option<Vec<Vec<f64>>>>,
}

impl SeqOutputs {
    pub fn head(&self, k: usize) -> Option<&[Vec<f64>]> {
        self.heads.get(k).and_then(|h| h.as_deref())
    }
}

#[derive(Debug, Clone)]
struct NetTrace {
    steps: usize,
    core: Option<CoreTrace>,
    heads: Vec<Option<Vec<MlpCache>>>,
}

/// A network instance: spec, weights and the cache of its last forward pass.
///
/// Without a core, the input sequence is treated as a batch of independent
/// inputs.
#[derive(Debug, Clone)]
pub struct Net {
    spec: NetSpec,
    params: NetParams,
    trace: Option<NetTrace>,
}

impl PartialEq for Net {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

impl Net {
    pub fn new(spec: NetSpec, params: NetParams) -> Result<Self> {
        params.check_against(&spec)?;
        Ok(Self {
            spec,
            params,
            trace: None,
        })
    }

    pub fn from_seed(spec: NetSpec, seed: u64) -> Result<Self> {
        let params = spec.init_params(seed)?;
        Self::new(spec, params)
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &NetParams {
        &self.params
    }

    /// Mutable weights. Drops any cached forward pass.
    pub fn params_mut(&mut self) -> &mut NetParams {
        self.trace = None;
        &mut self.params
    }

    pub fn set_params(&mut self, params: NetParams) -> Result<()> {
        params.check_against(&self.spec)?;
        self.params = params;
        self.trace = None;
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.trace = None;
    }

    pub fn zero_state(&self) -> Option<CellState> {
        self.params.core.as_ref().map(|c| c.zero_state())
    }

    pub fn all_heads(&self) -> Vec<usize> {
        (0..self.spec.heads.len()).collect()
    }

    /// Hidden state at step `t` of the cached forward pass.
    pub fn cached_hidden(&self, t: usize) -> Option<&[f64]> {
        let trace = self.trace.as_ref()?;
        trace
            .core
            .as_ref()
            .filter(|c| t < c.len())
            .map(|c| c.hidden(t))
    }

    /// Forward over a sequence from the zero state, caching intermediates for
    /// [`Net::backward`]. Only the heads listed in `heads` are evaluated.
    pub fn forward_seq(&mut self, inputs: &[Vec<f64>], heads: &[usize]) -> Result<SeqOutputs> {
        let (outputs, trace) = self.run(inputs, heads, true)?;
        self.trace = trace;
        Ok(outputs)
    }

    /// Forward over a sequence without touching the cache.
    pub fn eval_seq(&self, inputs: &[Vec<f64>], heads: &[usize]) -> Result<SeqOutputs> {
        Ok(self.run(inputs, heads, false)?.0)
    }

    /// Hidden states of the core over `inputs`, or `None` without a core.
    pub fn core_states(&self, inputs: &[Vec<f64>]) -> Result<Option<Vec<Vec<f64>>>> {
        let Some(core) = &self.params.core else {
            return Ok(None);
        };
        let mut state = core.zero_state();
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            state = core.step(x, &state)?;
            out.push(state.h.clone());
        }
        Ok(Some(out))
    }

    /// Evaluate the given heads on precomputed feature vectors (hidden states).
    pub fn heads_on_features(&self, features: &[Vec<f64>], head: usize) -> Result<Vec<Vec<f64>>> {
        features
            .iter()
            .map(|f| self.params.heads[head].apply(f))
            .collect()
    }

    fn run(
        &self,
        inputs: &[Vec<f64>],
        heads: &[usize],
        keep: bool,
    ) -> Result<(SeqOutputs, Option<NetTrace>)> {
        for x in inputs {
            check_dim("Net input", self.spec.input_dim, x.len())?;
        }
        for &k in heads {
            if k >= self.params.heads.len() {
                return Err(NumError::Spec(format!("no head with index {k}")));
            }
        }
        let core_trace = match &self.params.core {
            Some(core) => Some(core.unroll(inputs, &core.zero_state())?),
            None => None,
        };
        let feature = |t: usize| -> &[f64] {
            match &core_trace {
                Some(tr) => tr.hidden(t),
                None => &inputs[t],
            }
        };
        let mut outputs: Vec<Option<Vec<Vec<f64>>>> = vec![None; self.params.heads.len()];
        let mut caches: Vec<Option<Vec<MlpCache>>> = vec![None; self.params.heads.len()];
        for &k in heads {
            let head = &self.params.heads[k];
            let mut outs = Vec::with_capacity(inputs.len());
            let mut cs = Vec::with_capacity(if keep { inputs.len() } else { 0 });
            for t in 0..inputs.len() {
                if keep {
                    let c = head.forward(feature(t))?;
                    outs.push(c.output().to_vec());
                    cs.push(c);
                } else {
                    outs.push(head.apply(feature(t))?);
                }
            }
            outputs[k] = Some(outs);
            if keep {
                caches[k] = Some(cs);
            }
        }
        let trace = keep.then_some(NetTrace {
            steps: inputs.len(),
            core: core_trace,
            heads: caches,
        });
        Ok((SeqOutputs { heads: outputs }, trace))
    }

    /// Single step for online use. Advances `state` (ignored without a core)
    /// and returns the requested head outputs.
    pub fn step(
        &self,
        state: Option<&mut CellState>,
        x: &[f64],
        heads: &[usize],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        check_dim("Net input", self.spec.input_dim, x.len())?;
        let feature: Vec<f64> = match (&self.params.core, state) {
            (Some(core), Some(st)) => {
                *st = core.step(x, st)?;
                st.h.clone()
            }
            (Some(_), None) => {
                return Err(NumError::Spec("recurrent net stepped without state".into()))
            }
            (None, _) => x.to_vec(),
        };
        let mut out = vec![None; self.params.heads.len()];
        for &k in heads {
            let head = self
                .params
                .heads
                .get(k)
                .ok_or_else(|| NumError::Spec(format!("no head with index {k}")))?;
            out[k] = Some(head.apply(&feature)?);
        }
        Ok(out)
    }

    /// Gradients of a loss given its derivative with respect to each head's
    /// outputs (`None` = head does not contribute). Detached heads do not
    /// propagate into the core.
    pub fn backward(&self, d_out: &[Option<Vec<Vec<f64>>>]) -> Result<GradBuffers> {
        self.backward_impl(d_out, true)
    }

    /// Like [`Net::backward`] but ignoring detachment, i.e. the true
    /// derivative of the composed function. Used for gradient checking.
    pub fn backward_full(&self, d_out: &[Option<Vec<Vec<f64>>>]) -> Result<GradBuffers> {
        self.backward_impl(d_out, false)
    }

    fn backward_impl(
        &self,
        d_out: &[Option<Vec<Vec<f64>>>],
        respect_detach: bool,
    ) -> Result<GradBuffers> {
        let trace = self.trace.as_ref().ok_or(NumError::NoForward)?;
        check_dim("backward head count", self.params.heads.len(), d_out.len())?;
        let mut grads = self.params.zeros_like();
        let feat_dim = self.spec.feature_dim();
        let mut d_feat: Option<Vec<Vec<f64>>> = None;
        for (k, d) in d_out.iter().enumerate() {
            let Some(d) = d else { continue };
            let caches = trace.heads[k].as_ref().ok_or(NumError::NoForward)?;
            check_dim("backward steps", trace.steps, d.len())?;
            let to_core =
                self.params.core.is_some() && !(respect_detach && self.spec.heads[k].detached);
            for t in 0..trace.steps {
                let dx = self.params.heads[k].backward(
                    &caches[t],
                    &d[t],
                    &mut grads.heads[k],
                    to_core,
                )?;
                if let Some(dx) = dx {
                    let acc = d_feat.get_or_insert_with(|| vec![vec![0.0; feat_dim]; trace.steps]);
                    for (a, v) in acc[t].iter_mut().zip(&dx) {
                        *a += v;
                    }
                }
            }
        }
        if let (Some(core), Some(core_trace), Some(d_feat), Some(core_grad)) =
            (&self.params.core, &trace.core, &d_feat, grads.core.as_mut())
        {
            core.backward(core_trace, d_feat, core_grad)?;
        }
        Ok(grads)
    }
}
