use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_len, sigmoid, InitScheme, Matrix, NeuralError, Parameters};

/// A sequence of equally sized vectors stored contiguously, one row per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub steps: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Sequence {
    pub fn zeros(steps: usize, width: usize) -> Self {
        Self {
            steps,
            width,
            data: vec![0.0; steps * width],
        }
    }

    /// Each value becomes one step of width 1.
    pub fn scalars(values: &[f64]) -> Self {
        Self {
            steps: values.len(),
            width: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], width: usize) -> Result<Self, NeuralError> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            check_len("sequence step", width, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            steps: rows.len(),
            width,
            data,
        })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks_exact(self.width.max(1)).map(<[f64]>::to_vec).collect()
    }

    #[inline]
    pub fn step(&self, t: usize) -> &[f64] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    #[inline]
    pub fn step_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.width..(t + 1) * self.width]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Lstm,
    Gru,
}

/// LSTM cell. Gate order is input, forget, candidate, output:
///
/// ```text
/// i = σ(W_i x + U_i h + b_i)    f = σ(W_f x + U_f h + b_f)
/// g = tanh(W_c x + U_c h + b_c) o = σ(W_o x + U_o h + b_o)
/// c' = f ⊙ c + i ⊙ g            h' = o ⊙ tanh(c')
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w: [Matrix; 4],
    pub u: [Matrix; 4],
    pub b: [Matrix; 4],
}

/// GRU cell with the reset gate applied before the recurrent product:
///
/// ```text
/// z = σ(W_z x + U_z h + b_z)    r = σ(W_r x + U_r h + b_r)
/// g = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = z ⊙ h + (1 - z) ⊙ g
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub w: [Matrix; 3],
    pub u: [Matrix; 3],
    pub b: [Matrix; 3],
}

const LSTM_GATES: [&str; 4] = ["i", "f", "c", "o"];
const GRU_GATES: [&str; 3] = ["z", "r", "h"];

fn gate_tensors<'a, const N: usize>(
    names: [&str; N],
    w: &'a [Matrix; N],
    u: &'a [Matrix; N],
    b: &'a [Matrix; N],
) -> Vec<(String, &'a Matrix)> {
    let mut out = Vec::with_capacity(3 * N);
    for (k, g) in names.iter().enumerate() {
        out.push((format!("W_{g}"), &w[k]));
    }
    for (k, g) in names.iter().enumerate() {
        out.push((format!("U_{g}"), &u[k]));
    }
    for (k, g) in names.iter().enumerate() {
        out.push((format!("b_{g}"), &b[k]));
    }
    out
}

fn gate_tensors_mut<'a, const N: usize>(
    w: &'a mut [Matrix; N],
    u: &'a mut [Matrix; N],
    b: &'a mut [Matrix; N],
) -> Vec<&'a mut Matrix> {
    w.iter_mut().chain(u.iter_mut()).chain(b.iter_mut()).collect()
}

impl LstmCell {
    /// Glorot-uniform weights, zero biases except the forget gate at +1.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let w = std::array::from_fn(|_| InitScheme::GlorotUniform.sample(hidden, input, rng));
        let u = std::array::from_fn(|_| InitScheme::GlorotUniform.sample(hidden, hidden, rng));
        let mut b: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(hidden, 1));
        b[1].fill(1.0);
        Self { w, u, b }
    }

    pub fn input_size(&self) -> usize {
        self.w[0].cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w[0].rows()
    }
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let w = std::array::from_fn(|_| InitScheme::GlorotUniform.sample(hidden, input, rng));
        let u = std::array::from_fn(|_| InitScheme::GlorotUniform.sample(hidden, hidden, rng));
        let b = std::array::from_fn(|_| Matrix::zeros(hidden, 1));
        Self { w, u, b }
    }

    pub fn input_size(&self) -> usize {
        self.w[0].cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w[0].rows()
    }
}

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub enum RecurrentCache {
    Lstm {
        input: Sequence,
        output: Sequence,
        /// i, f, g, o after activation
        gates: [Sequence; 4],
        cell: Sequence,
        tanh_cell: Sequence,
    },
    Gru {
        input: Sequence,
        output: Sequence,
        /// z, r, candidate after activation
        gates: [Sequence; 3],
        reset_hidden: Sequence,
    },
}

impl RecurrentCache {
    pub fn output(&self) -> &Sequence {
        match self {
            RecurrentCache::Lstm { output, .. } | RecurrentCache::Gru { output, .. } => output,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecurrentCell {
    Lstm(LstmCell),
    Gru(GruCell),
}

impl RecurrentCell {
    pub fn new<R: Rng + ?Sized>(kind: CellKind, input: usize, hidden: usize, rng: &mut R) -> Self {
        match kind {
            CellKind::Lstm => RecurrentCell::Lstm(LstmCell::new(input, hidden, rng)),
            CellKind::Gru => RecurrentCell::Gru(GruCell::new(input, hidden, rng)),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            RecurrentCell::Lstm(_) => CellKind::Lstm,
            RecurrentCell::Gru(_) => CellKind::Gru,
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            RecurrentCell::Lstm(c) => c.input_size(),
            RecurrentCell::Gru(c) => c.input_size(),
        }
    }

    pub fn hidden_size(&self) -> usize {
        match self {
            RecurrentCell::Lstm(c) => c.hidden_size(),
            RecurrentCell::Gru(c) => c.hidden_size(),
        }
    }

    /// One timestep. `cell_state` is ignored (and returned empty) for GRU.
    pub fn step(&self, x: &[f64], hidden: &[f64], cell_state: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NeuralError> {
        check_len("recurrent input", self.input_size(), x.len())?;
        check_len("recurrent hidden", self.hidden_size(), hidden.len())?;
        let input = Sequence {
            steps: 1,
            width: x.len(),
            data: x.to_vec(),
        };
        match self {
            RecurrentCell::Lstm(c) => {
                check_len("lstm cell state", self.hidden_size(), cell_state.len())?;
                let cache = lstm_forward(c, &input, hidden, cell_state);
                match cache {
                    RecurrentCache::Lstm { output, cell, .. } => Ok((output.data, cell.data)),
                    RecurrentCache::Gru { .. } => unreachable!(),
                }
            }
            RecurrentCell::Gru(c) => {
                let cache = gru_forward(c, &input, hidden);
                Ok((cache.output().data.clone(), Vec::new()))
            }
        }
    }

    /// Runs the whole sequence from a zero state.
    pub fn forward_seq(&self, input: &Sequence) -> Result<RecurrentCache, NeuralError> {
        check_len("recurrent input", self.input_size(), input.width)?;
        let zeros = vec![0.0; self.hidden_size()];
        Ok(match self {
            RecurrentCell::Lstm(c) => lstm_forward(c, input, &zeros, &zeros),
            RecurrentCell::Gru(c) => gru_forward(c, input, &zeros),
        })
    }

    /// Backpropagates `d_output` (one row per step) through the sequence,
    /// accumulating into `grad`, and returns the gradient for the inputs.
    pub fn backward_seq(&self, cache: &RecurrentCache, d_output: &Sequence, grad: &mut RecurrentCell) -> Sequence {
        match (self, grad, cache) {
            (RecurrentCell::Lstm(c), RecurrentCell::Lstm(g), RecurrentCache::Lstm { .. }) => {
                lstm_backward(c, cache, d_output, g)
            }
            (RecurrentCell::Gru(c), RecurrentCell::Gru(g), RecurrentCache::Gru { .. }) => {
                gru_backward(c, cache, d_output, g)
            }
            _ => panic!("cell, gradient buffer and cache kinds must agree"),
        }
    }
}

impl Parameters for RecurrentCell {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        match self {
            RecurrentCell::Lstm(c) => gate_tensors(LSTM_GATES, &c.w, &c.u, &c.b),
            RecurrentCell::Gru(c) => gate_tensors(GRU_GATES, &c.w, &c.u, &c.b),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            RecurrentCell::Lstm(c) => gate_tensors_mut(&mut c.w, &mut c.u, &mut c.b),
            RecurrentCell::Gru(c) => gate_tensors_mut(&mut c.w, &mut c.u, &mut c.b),
        }
    }
}

fn lstm_forward(cell: &LstmCell, input: &Sequence, h0: &[f64], c0: &[f64]) -> RecurrentCache {
    let (steps, hsz) = (input.steps, cell.hidden_size());
    let mut output = Sequence::zeros(steps, hsz);
    let mut gates: [Sequence; 4] = std::array::from_fn(|_| Sequence::zeros(steps, hsz));
    let mut cstate = Sequence::zeros(steps, hsz);
    let mut tanh_c = Sequence::zeros(steps, hsz);
    let mut h_prev = h0.to_vec();
    let mut c_prev = c0.to_vec();
    let mut pre = vec![0.0; hsz];
    for t in 0..steps {
        let x = input.step(t);
        for k in 0..4 {
            pre.copy_from_slice(cell.b[k].as_slice());
            cell.w[k].matvec_acc(x, &mut pre);
            cell.u[k].matvec_acc(&h_prev, &mut pre);
            let dst = gates[k].step_mut(t);
            if k == 2 {
                for (d, p) in dst.iter_mut().zip(&pre) {
                    *d = p.tanh();
                }
            } else {
                for (d, p) in dst.iter_mut().zip(&pre) {
                    *d = sigmoid(*p);
                }
            }
        }
        let (i, f, g, o) = (gates[0].step(t), gates[1].step(t), gates[2].step(t), gates[3].step(t));
        let c = cstate.step_mut(t);
        for j in 0..hsz {
            c[j] = f[j] * c_prev[j] + i[j] * g[j];
        }
        let tc = tanh_c.step_mut(t);
        for j in 0..hsz {
            tc[j] = c[j].tanh();
        }
        let h = output.step_mut(t);
        for j in 0..hsz {
            h[j] = o[j] * tc[j];
        }
        h_prev.copy_from_slice(h);
        c_prev.copy_from_slice(cstate.step(t));
    }
    RecurrentCache::Lstm {
        input: input.clone(),
        output,
        gates,
        cell: cstate,
        tanh_cell: tanh_c,
    }
}

fn lstm_backward(cell: &LstmCell, cache: &RecurrentCache, d_output: &Sequence, grad: &mut LstmCell) -> Sequence {
    let RecurrentCache::Lstm {
        input,
        output,
        gates,
        cell: cstate,
        tanh_cell,
    } = cache
    else {
        unreachable!()
    };
    let (steps, hsz) = (input.steps, cell.hidden_size());
    let mut d_input = Sequence::zeros(steps, input.width);
    let mut dh_next = vec![0.0; hsz];
    let mut dc_next = vec![0.0; hsz];
    let mut dpre: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hsz]);
    let zeros = vec![0.0; hsz];
    for t in (0..steps).rev() {
        let (i, f, g, o) = (gates[0].step(t), gates[1].step(t), gates[2].step(t), gates[3].step(t));
        let tc = tanh_cell.step(t);
        let c_prev = if t > 0 { cstate.step(t - 1) } else { &zeros[..] };
        let dout = d_output.step(t);
        for j in 0..hsz {
            let dh = dout[j] + dh_next[j];
            let dc = dh * o[j] * (1.0 - tc[j] * tc[j]) + dc_next[j];
            dpre[0][j] = dc * g[j] * i[j] * (1.0 - i[j]);
            dpre[1][j] = dc * c_prev[j] * f[j] * (1.0 - f[j]);
            dpre[2][j] = dc * i[j] * (1.0 - g[j] * g[j]);
            dpre[3][j] = dh * tc[j] * o[j] * (1.0 - o[j]);
            dc_next[j] = dc * f[j];
        }
        let x = input.step(t);
        let dx = d_input.step_mut(t);
        dh_next.fill(0.0);
        for k in 0..4 {
            grad.w[k].add_outer(&dpre[k], x);
            if t > 0 {
                grad.u[k].add_outer(&dpre[k], output.step(t - 1));
            }
            grad.b[k].add_flat(&dpre[k]);
            cell.w[k].matvec_t_acc(&dpre[k], dx);
            cell.u[k].matvec_t_acc(&dpre[k], &mut dh_next);
        }
    }
    d_input
}

fn gru_forward(cell: &GruCell, input: &Sequence, h0: &[f64]) -> RecurrentCache {
    let (steps, hsz) = (input.steps, cell.hidden_size());
    let mut output = Sequence::zeros(steps, hsz);
    let mut gates: [Sequence; 3] = std::array::from_fn(|_| Sequence::zeros(steps, hsz));
    let mut reset_hidden = Sequence::zeros(steps, hsz);
    let mut h_prev = h0.to_vec();
    let mut pre = vec![0.0; hsz];
    for t in 0..steps {
        let x = input.step(t);
        for k in 0..2 {
            pre.copy_from_slice(cell.b[k].as_slice());
            cell.w[k].matvec_acc(x, &mut pre);
            cell.u[k].matvec_acc(&h_prev, &mut pre);
            for (d, p) in gates[k].step_mut(t).iter_mut().zip(&pre) {
                *d = sigmoid(*p);
            }
        }
        let rh = reset_hidden.step_mut(t);
        for ((d, r), h) in rh.iter_mut().zip(gates[1].step(t)).zip(&h_prev) {
            *d = r * h;
        }
        pre.copy_from_slice(cell.b[2].as_slice());
        cell.w[2].matvec_acc(x, &mut pre);
        cell.u[2].matvec_acc(reset_hidden.step(t), &mut pre);
        for (d, p) in gates[2].step_mut(t).iter_mut().zip(&pre) {
            *d = p.tanh();
        }
        let (z, g) = (gates[0].step(t), gates[2].step(t));
        let h = output.step_mut(t);
        for j in 0..hsz {
            h[j] = z[j] * h_prev[j] + (1.0 - z[j]) * g[j];
        }
        h_prev.copy_from_slice(h);
    }
    RecurrentCache::Gru {
        input: input.clone(),
        output,
        gates,
        reset_hidden,
    }
}

fn gru_backward(cell: &GruCell, cache: &RecurrentCache, d_output: &Sequence, grad: &mut GruCell) -> Sequence {
    let RecurrentCache::Gru {
        input,
        output,
        gates,
        reset_hidden,
    } = cache
    else {
        unreachable!()
    };
    let (steps, hsz) = (input.steps, cell.hidden_size());
    let mut d_input = Sequence::zeros(steps, input.width);
    let mut dh_next = vec![0.0; hsz];
    let mut dh = vec![0.0; hsz];
    let mut dz = vec![0.0; hsz];
    let mut dr = vec![0.0; hsz];
    let mut dg = vec![0.0; hsz];
    let mut drh = vec![0.0; hsz];
    let zeros = vec![0.0; hsz];
    for t in (0..steps).rev() {
        let (z, r, g) = (gates[0].step(t), gates[1].step(t), gates[2].step(t));
        let h_prev = if t > 0 { output.step(t - 1) } else { &zeros[..] };
        let dout = d_output.step(t);
        for j in 0..hsz {
            dh[j] = dout[j] + dh_next[j];
            dz[j] = dh[j] * (h_prev[j] - g[j]) * z[j] * (1.0 - z[j]);
            dg[j] = dh[j] * (1.0 - z[j]) * (1.0 - g[j] * g[j]);
            dh_next[j] = dh[j] * z[j];
        }
        let x = input.step(t);
        let dx = d_input.step_mut(t);

        grad.w[2].add_outer(&dg, x);
        grad.u[2].add_outer(&dg, reset_hidden.step(t));
        grad.b[2].add_flat(&dg);
        cell.w[2].matvec_t_acc(&dg, dx);
        drh.fill(0.0);
        cell.u[2].matvec_t_acc(&dg, &mut drh);
        for j in 0..hsz {
            dr[j] = drh[j] * h_prev[j] * r[j] * (1.0 - r[j]);
            dh_next[j] += drh[j] * r[j];
        }
        for (k, d) in [(0usize, &dz), (1, &dr)] {
            grad.w[k].add_outer(d, x);
            if t > 0 {
                grad.u[k].add_outer(d, h_prev);
            }
            grad.b[k].add_flat(d);
            cell.w[k].matvec_t_acc(d, dx);
            cell.u[k].matvec_t_acc(d, &mut dh_next);
        }
    }
    d_input
}

/// Runs `cell` over `sequence` from a zero state, returning every hidden
/// state and the final one.
pub fn rnn_forward(cell: &RecurrentCell, sequence: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>), NeuralError> {
    let input = Sequence::from_rows(sequence, cell.input_size())?;
    let cache = cell.forward_seq(&input)?;
    let outputs = cache.output().to_rows();
    let last = outputs.last().cloned().unwrap_or_else(|| vec![0.0; cell.hidden_size()]);
    Ok((outputs, last))
}
