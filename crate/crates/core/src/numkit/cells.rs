use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dense::init_bound;
use super::{check_dim, sigmoid, uniform_fill, Matrix, NumError, Params, Result};

/// Forget-gate bias used at initialization.
pub const LSTM_FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Rnn,
    Lstm,
}

/// Recurrent state carried between steps. `c` is empty for the plain RNN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl CellState {
    pub fn zeros(kind: CellKind, hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: match kind {
                CellKind::Rnn => Vec::new(),
                CellKind::Lstm => vec![0.0; hidden],
            },
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.c).all(|v| v.is_finite())
    }
}

/// `h_t = tanh(W_x x_t + W_h h_{t-1} + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnCell {
    pub wx: Matrix,
    pub wh: Matrix,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RnnStepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    h: Vec<f64>,
}

impl RnnCell {
    pub fn new(wx: Matrix, wh: Matrix, b: Vec<f64>) -> Result<Self> {
        let hidden = b.len();
        if hidden == 0 {
            return Err(NumError::Spec("RnnCell hidden size must be >= 1".into()));
        }
        check_dim("RnnCell W_x rows", hidden, wx.rows())?;
        check_dim("RnnCell W_h rows", hidden, wh.rows())?;
        check_dim("RnnCell W_h cols", hidden, wh.cols())?;
        Ok(Self { wx, wh, b })
    }

    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        Self {
            wx: Matrix::zeros(hidden, in_dim),
            wh: Matrix::zeros(hidden, hidden),
            b: vec![0.0; hidden],
        }
    }

    pub fn hidden(&self) -> usize {
        self.b.len()
    }

    pub fn in_dim(&self) -> usize {
        self.wx.cols()
    }

    pub fn step(&self, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
        Ok(self.step_cached(x, h_prev)?.h)
    }

    fn step_cached(&self, x: &[f64], h_prev: &[f64]) -> Result<RnnStepCache> {
        check_dim("RnnCell input", self.in_dim(), x.len())?;
        check_dim("RnnCell h_prev", self.hidden(), h_prev.len())?;
        let mut a = self.b.clone();
        self.wx.matvec_acc(x, &mut a);
        self.wh.matvec_acc(h_prev, &mut a);
        let h = a.into_iter().map(f64::tanh).collect();
        Ok(RnnStepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            h,
        })
    }
}

impl Params for RnnCell {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![self.wx.as_slice(), self.wh.as_slice(), &self.b]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.wx.as_mut_slice(), self.wh.as_mut_slice(), &mut self.b]
    }
}

/// One LSTM gate block: `W_x` (H x in), `W_h` (H x H), bias (H).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmGate {
    pub wx: Matrix,
    pub wh: Matrix,
    pub b: Vec<f64>,
}

impl LstmGate {
    fn zeros(in_dim: usize, hidden: usize) -> Self {
        Self {
            wx: Matrix::zeros(hidden, in_dim),
            wh: Matrix::zeros(hidden, hidden),
            b: vec![0.0; hidden],
        }
    }

    fn preactivation(&self, x: &[f64], h_prev: &[f64]) -> Vec<f64> {
        let mut a = self.b.clone();
        self.wx.matvec_acc(x, &mut a);
        self.wh.matvec_acc(h_prev, &mut a);
        a
    }

    fn accumulate(
        &self,
        grad: &mut LstmGate,
        da: &[f64],
        x: &[f64],
        h_prev: &[f64],
        dh_prev: &mut [f64],
    ) {
        grad.wx.add_outer(da, x);
        grad.wh.add_outer(da, h_prev);
        for (g, d) in grad.b.iter_mut().zip(da) {
            *g += d;
        }
        self.wh.tr_matvec_acc(da, dh_prev);
    }
}

/// Standard LSTM without peepholes:
///
/// ```text
/// i = σ(.)  f = σ(.)  o = σ(.)  g = tanh(.)
/// c_t = f ⊙ c_{t-1} + i ⊙ g
/// h_t = o ⊙ tanh(c_t)
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub input: LstmGate,
    pub forget: LstmGate,
    pub output: LstmGate,
    pub candidate: LstmGate,
}

#[derive(Debug, Clone)]
pub struct LstmStepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    tanh_c: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

impl LstmCell {
    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        Self {
            input: LstmGate::zeros(in_dim, hidden),
            forget: LstmGate::zeros(in_dim, hidden),
            output: LstmGate::zeros(in_dim, hidden),
            candidate: LstmGate::zeros(in_dim, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.input.b.len()
    }

    pub fn in_dim(&self) -> usize {
        self.input.wx.cols()
    }

    fn gates(&self) -> [&LstmGate; 4] {
        [&self.input, &self.forget, &self.output, &self.candidate]
    }

    fn validate(&self) -> Result<()> {
        let (h, n) = (self.hidden(), self.in_dim());
        if h == 0 {
            return Err(NumError::Spec("LstmCell hidden size must be >= 1".into()));
        }
        for g in self.gates() {
            check_dim("LstmCell gate W_x rows", h, g.wx.rows())?;
            check_dim("LstmCell gate W_x cols", n, g.wx.cols())?;
            check_dim("LstmCell gate W_h rows", h, g.wh.rows())?;
            check_dim("LstmCell gate W_h cols", h, g.wh.cols())?;
            check_dim("LstmCell gate bias", h, g.b.len())?;
        }
        Ok(())
    }

    pub fn new(
        input: LstmGate,
        forget: LstmGate,
        output: LstmGate,
        candidate: LstmGate,
    ) -> Result<Self> {
        let cell = Self {
            input,
            forget,
            output,
            candidate,
        };
        cell.validate()?;
        Ok(cell)
    }

    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let cache = self.step_cached(x, h_prev, c_prev)?;
        Ok((cache.h, cache.c))
    }

    fn step_cached(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<LstmStepCache> {
        check_dim("LstmCell input", self.in_dim(), x.len())?;
        check_dim("LstmCell h_prev", self.hidden(), h_prev.len())?;
        check_dim("LstmCell c_prev", self.hidden(), c_prev.len())?;
        let i: Vec<f64> = self
            .input
            .preactivation(x, h_prev)
            .into_iter()
            .map(sigmoid)
            .collect();
        let f: Vec<f64> = self
            .forget
            .preactivation(x, h_prev)
            .into_iter()
            .map(sigmoid)
            .collect();
        let o: Vec<f64> = self
            .output
            .preactivation(x, h_prev)
            .into_iter()
            .map(sigmoid)
            .collect();
        let g: Vec<f64> = self
            .candidate
            .preactivation(x, h_prev)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let c: Vec<f64> = (0..self.hidden())
            .map(|k| f[k] * c_prev[k] + i[k] * g[k])
            .collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h = o.iter().zip(&tanh_c).map(|(o, t)| o * t).collect();
        Ok(LstmStepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            i,
            f,
            o,
            g,
            tanh_c,
            c,
            h,
        })
    }
}

impl Params for LstmCell {
    fn blocks(&self) -> Vec<&[f64]> {
        self.gates()
            .into_iter()
            .flat_map(|g| [g.wx.as_slice(), g.wh.as_slice(), g.b.as_slice()])
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        [
            &mut self.input,
            &mut self.forget,
            &mut self.output,
            &mut self.candidate,
        ]
        .into_iter()
        .flat_map(|g| [g.wx.as_mut_slice(), g.wh.as_mut_slice(), g.b.as_mut_slice()])
        .collect()
    }
}

/// A recurrent core of either cell type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cell", rename_all = "snake_case")]
pub enum Recurrent {
    Rnn(RnnCell),
    Lstm(LstmCell),
}

/// Per-step caches from [`Recurrent::unroll`].
#[derive(Debug, Clone)]
pub enum CoreTrace {
    Rnn(Vec<RnnStepCache>),
    Lstm(Vec<LstmStepCache>),
}

impl CoreTrace {
    pub fn len(&self) -> usize {
        match self {
            CoreTrace::Rnn(v) => v.len(),
            CoreTrace::Lstm(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hidden(&self, t: usize) -> &[f64] {
        match self {
            CoreTrace::Rnn(v) => &v[t].h,
            CoreTrace::Lstm(v) => &v[t].h,
        }
    }

    pub fn state(&self, t: usize) -> CellState {
        match self {
            CoreTrace::Rnn(v) => CellState {
                h: v[t].h.clone(),
                c: Vec::new(),
            },
            CoreTrace::Lstm(v) => CellState {
                h: v[t].h.clone(),
                c: v[t].c.clone(),
            },
        }
    }
}

impl Recurrent {
    pub fn zeros(kind: CellKind, in_dim: usize, hidden: usize) -> Self {
        match kind {
            CellKind::Rnn => Recurrent::Rnn(RnnCell::zeros(in_dim, hidden)),
            CellKind::Lstm => Recurrent::Lstm(LstmCell::zeros(in_dim, hidden)),
        }
    }

    /// Uniform weights in `[-s, s]` with `s = 1/sqrt(in + H)`; zero biases
    /// except the LSTM forget gate, which starts at [`LSTM_FORGET_BIAS`].
    pub fn init<R: Rng>(kind: CellKind, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = init_bound(in_dim + hidden);
        let mut core = Self::zeros(kind, in_dim, hidden);
        match &mut core {
            Recurrent::Rnn(cell) => {
                uniform_fill(cell.wx.as_mut_slice(), bound, rng);
                uniform_fill(cell.wh.as_mut_slice(), bound, rng);
            }
            Recurrent::Lstm(cell) => {
                for gate in [
                    &mut cell.input,
                    &mut cell.forget,
                    &mut cell.output,
                    &mut cell.candidate,
                ] {
                    uniform_fill(gate.wx.as_mut_slice(), bound, rng);
                    uniform_fill(gate.wh.as_mut_slice(), bound, rng);
                }
                cell.forget.b.iter_mut().for_each(|b| *b = LSTM_FORGET_BIAS);
            }
        }
        core
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Recurrent::Rnn(_) => CellKind::Rnn,
            Recurrent::Lstm(_) => CellKind::Lstm,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Recurrent::Rnn(c) => c.hidden(),
            Recurrent::Lstm(c) => c.hidden(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Recurrent::Rnn(c) => c.in_dim(),
            Recurrent::Lstm(c) => c.in_dim(),
        }
    }

    pub fn zero_state(&self) -> CellState {
        CellState::zeros(self.kind(), self.hidden())
    }

    pub fn step(&self, x: &[f64], state: &CellState) -> Result<CellState> {
        match self {
            Recurrent::Rnn(cell) => Ok(CellState {
                h: cell.step(x, &state.h)?,
                c: Vec::new(),
            }),
            Recurrent::Lstm(cell) => {
                let (h, c) = cell.step(x, &state.h, &state.c)?;
                Ok(CellState { h, c })
            }
        }
    }

    /// Runs the cell over `xs` starting from `init`, keeping every
    /// intermediate needed for backpropagation through time.
    pub fn unroll(&self, xs: &[Vec<f64>], init: &CellState) -> Result<CoreTrace> {
        match self {
            Recurrent::Rnn(cell) => {
                let mut caches: Vec<RnnStepCache> = Vec::with_capacity(xs.len());
                for x in xs {
                    let h_prev = caches.last().map_or(&init.h[..], |c| &c.h[..]);
                    let c = cell.step_cached(x, h_prev)?;
                    caches.push(c);
                }
                Ok(CoreTrace::Rnn(caches))
            }
            Recurrent::Lstm(cell) => {
                let mut caches: Vec<LstmStepCache> = Vec::with_capacity(xs.len());
                for x in xs {
                    let (h_prev, c_prev) = caches
                        .last()
                        .map_or((&init.h[..], &init.c[..]), |c| (&c.h[..], &c.c[..]));
                    let c = cell.step_cached(x, h_prev, c_prev)?;
                    caches.push(c);
                }
                Ok(CoreTrace::Lstm(caches))
            }
        }
    }

    /// Full backpropagation through time. `dh[t]` is the loss gradient
    /// arriving at the hidden output of step `t` from outside the core.
    pub fn backward(&self, trace: &CoreTrace, dh: &[Vec<f64>], grad: &mut Recurrent) -> Result<()> {
        check_dim("Recurrent::backward steps", trace.len(), dh.len())?;
        let hidden = self.hidden();
        match (self, trace, grad) {
            (Recurrent::Rnn(cell), CoreTrace::Rnn(caches), Recurrent::Rnn(g)) => {
                let mut dh_next = vec![0.0; hidden];
                for t in (0..caches.len()).rev() {
                    let c = &caches[t];
                    check_dim("Recurrent::backward dh", hidden, dh[t].len())?;
                    let da: Vec<f64> = (0..hidden)
                        .map(|k| (dh[t][k] + dh_next[k]) * (1.0 - c.h[k] * c.h[k]))
                        .collect();
                    g.wx.add_outer(&da, &c.x);
                    g.wh.add_outer(&da, &c.h_prev);
                    for (gb, d) in g.b.iter_mut().zip(&da) {
                        *gb += d;
                    }
                    dh_next.iter_mut().for_each(|v| *v = 0.0);
                    cell.wh.tr_matvec_acc(&da, &mut dh_next);
                }
                Ok(())
            }
            (Recurrent::Lstm(cell), CoreTrace::Lstm(caches), Recurrent::Lstm(g)) => {
                let mut dh_next = vec![0.0; hidden];
                let mut dc_next = vec![0.0; hidden];
                let mut dai = vec![0.0; hidden];
                let mut daf = vec![0.0; hidden];
                let mut dao = vec![0.0; hidden];
                let mut dag = vec![0.0; hidden];
                for t in (0..caches.len()).rev() {
                    let c = &caches[t];
                    check_dim("Recurrent::backward dh", hidden, dh[t].len())?;
                    for k in 0..hidden {
                        let dh_k = dh[t][k] + dh_next[k];
                        let dc = dc_next[k] + dh_k * c.o[k] * (1.0 - c.tanh_c[k] * c.tanh_c[k]);
                        let d_o = dh_k * c.tanh_c[k];
                        let d_i = dc * c.g[k];
                        let d_g = dc * c.i[k];
                        let d_f = dc * c.c_prev[k];
                        dai[k] = d_i * c.i[k] * (1.0 - c.i[k]);
                        daf[k] = d_f * c.f[k] * (1.0 - c.f[k]);
                        dao[k] = d_o * c.o[k] * (1.0 - c.o[k]);
                        dag[k] = d_g * (1.0 - c.g[k] * c.g[k]);
                        dc_next[k] = dc * c.f[k];
                    }
                    dh_next.iter_mut().for_each(|v| *v = 0.0);
                    cell.input
                        .accumulate(&mut g.input, &dai, &c.x, &c.h_prev, &mut dh_next);
                    cell.forget
                        .accumulate(&mut g.forget, &daf, &c.x, &c.h_prev, &mut dh_next);
                    cell.output
                        .accumulate(&mut g.output, &dao, &c.x, &c.h_prev, &mut dh_next);
                    cell.candidate.accumulate(
                        &mut g.candidate,
                        &dag,
                        &c.x,
                        &c.h_prev,
                        &mut dh_next,
                    );
                }
                Ok(())
            }
            _ => Err(NumError::Shape(
                "cell kind mismatch between params, trace and grads".into(),
            )),
        }
    }
}

impl Params for Recurrent {
    fn blocks(&self) -> Vec<&[f64]> {
        match self {
            Recurrent::Rnn(c) => c.blocks(),
            Recurrent::Lstm(c) => c.blocks(),
        }
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Recurrent::Rnn(c) => c.blocks_mut(),
            Recurrent::Lstm(c) => c.blocks_mut(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rnn_gives_zero_state() {
        let cell = RnnCell::zeros(3, 4);
        let h = cell
            .step(&[1.0, -2.0, 0.5], &[0.3, 0.1, -0.2, 0.9])
            .unwrap();
        assert_eq!(h, vec![0.0; 4]);
    }

    #[test]
    fn rnn_bias_only() {
        let mut cell = RnnCell::zeros(2, 3);
        cell.b = vec![0.5f64.atanh(); 3];
        let h = cell.step(&[4.0, -1.0], &[0.7, 0.2, 0.1]).unwrap();
        for v in h {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn rnn_rejects_bad_hidden() {
        let cell = RnnCell::zeros(2, 3);
        assert!(cell.step(&[1.0, 1.0], &[0.0; 2]).is_err());
    }

    #[test]
    fn zero_lstm_stays_at_zero() {
        let cell = LstmCell::zeros(3, 2);
        let (h, c) = cell
            .step(&[1.0, 2.0, 3.0], &[0.4, -0.4], &[0.0, 0.0])
            .unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        let mut cell = LstmCell::zeros(2, 3);
        cell.forget.b = vec![20.0; 3];
        cell.input.b = vec![-20.0; 3];
        let c_prev = [0.3, -0.7, 1.2];
        let (_, c) = cell.step(&[0.5, -0.5], &[0.1, 0.2, 0.3], &c_prev).unwrap();
        for (a, b) in c.iter().zip(&c_prev) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn init_respects_bound_and_forget_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let core = Recurrent::init(CellKind::Lstm, 5, 4, &mut rng);
        let bound = 1.0 / 9f64.sqrt();
        let Recurrent::Lstm(cell) = &core else {
            unreachable!()
        };
        assert!(cell.forget.b.iter().all(|&b| b == LSTM_FORGET_BIAS));
        assert!(cell.input.b.iter().all(|&b| b == 0.0));
        for g in [&cell.input, &cell.forget, &cell.output, &cell.candidate] {
            assert!(g
                .wx
                .as_slice()
                .iter()
                .chain(g.wh.as_slice())
                .all(|w| w.abs() <= bound));
        }
    }
}
