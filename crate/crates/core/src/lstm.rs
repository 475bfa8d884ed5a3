//! Many-to-one LSTM with backpropagation through time.
//!
//! Per timestep, with `σ` the logistic function and `∘` the elementwise
//! product:
//!
//! ```text
//! g_t = σ(W_g z_t + U_g h_{t−1} + b_g)          forget gate
//! i_t = σ(W_i z_t + U_i h_{t−1} + b_i)          input gate
//! o_t = σ(W_o z_t + U_o h_{t−1} + b_o)          output gate
//! c_t = g_t ∘ c_{t−1} + i_t ∘ tanh(W_c z_t + U_c h_{t−1} + b_c)
//! h_t = o_t ∘ tanh(c_t)
//! ```
//!
//! The sequence starts from `h_0 = c_0 = 0` and only `h_T` is emitted.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{glorot_uniform, Param};
use crate::tensor::{sigmoid, Tensor};

/// Gate order used for storage and checkpoint names.
pub const GATES: [Gate; 4] = [Gate::Forget, Gate::Input, Gate::Output, Gate::Cell];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Forget,
    Input,
    Output,
    Cell,
}

impl Gate {
    pub fn key(self) -> &'static str {
        match self {
            Gate::Forget => "g",
            Gate::Input => "i",
            Gate::Output => "o",
            Gate::Cell => "c",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// `W: [h × d]`, `U: [h × h]`, `b: [h]` for one gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl GateParams {
    fn zeros(d: usize, h: usize) -> Self {
        GateParams {
            w: Tensor::zeros(&[h, d]),
            u: Tensor::zeros(&[h, h]),
            b: Tensor::zeros(&[h]),
        }
    }

    /// `W z + U h_prev + b`, accumulated in index order.
    fn preactivation(&self, z: &[f64], h_prev: &[f64], out: &mut [f64]) {
        let d = z.len();
        let h = h_prev.len();
        let w = self.w.data();
        let u = self.u.data();
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = self.b.data()[j];
            for (wv, zv) in w[j * d..(j + 1) * d].iter().zip(z) {
                acc += wv * zv;
            }
            for (uv, hv) in u[j * h..(j + 1) * h].iter().zip(h_prev) {
                acc += uv * hv;
            }
            *o = acc;
        }
    }
}

/// The twelve LSTM parameter tensors plus sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    input_dim: usize,
    hidden: usize,
    steps: usize,
    gates: [GateParams; 4],
}

pub fn lstm_param_count(input_dim: usize, hidden: usize) -> Result<usize> {
    if input_dim == 0 || hidden == 0 {
        return Err(Error::Config(format!(
            "LSTM sizes must be positive, got d={input_dim} h={hidden}"
        )));
    }
    Ok(4 * (input_dim * hidden + hidden * hidden + hidden))
}

impl LstmCell {
    /// Glorot-uniform `W` and `U`, zero biases.
    pub fn new(input_dim: usize, hidden: usize, steps: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut cell = Self::zeros(input_dim, hidden, steps)?;
        for g in &mut cell.gates {
            g.w = glorot_uniform(&[hidden, input_dim], input_dim, hidden, rng);
            g.u = glorot_uniform(&[hidden, hidden], hidden, hidden, rng);
        }
        Ok(cell)
    }

    pub fn zeros(input_dim: usize, hidden: usize, steps: usize) -> Result<Self> {
        lstm_param_count(input_dim, hidden)?;
        if steps == 0 {
            return Err(Error::Config("LSTM needs at least one timestep".into()));
        }
        Ok(LstmCell {
            input_dim,
            hidden,
            steps,
            gates: std::array::from_fn(|_| GateParams::zeros(input_dim, hidden)),
        })
    }

    /// Builds a cell from explicit parameters in `[forget, input, output, cell]` order.
    pub fn from_gates(steps: usize, gates: [GateParams; 4]) -> Result<Self> {
        let [h, d] = *gates[0].w.shape() else {
            return Err(Error::dim(format!("W must be [h × d], got {:?}", gates[0].w.shape())));
        };
        for (gate, p) in GATES.iter().zip(&gates) {
            if p.w.shape() != [h, d] || p.u.shape() != [h, h] || p.b.shape() != [h] {
                return Err(Error::dim(format!(
                    "gate {}: expected W [{h}×{d}], U [{h}×{h}], b [{h}]; got {:?}, {:?}, {:?}",
                    gate.key(),
                    p.w.shape(),
                    p.u.shape(),
                    p.b.shape()
                )));
            }
        }
        let mut cell = Self::zeros(d, h, steps)?;
        cell.gates = gates;
        Ok(cell)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn gate(&self, gate: Gate) -> &GateParams {
        &self.gates[gate.index()]
    }

    pub fn gate_mut(&mut self, gate: Gate) -> &mut GateParams {
        &mut self.gates[gate.index()]
    }

    pub fn param_count(&self) -> usize {
        lstm_param_count(self.input_dim, self.hidden).expect("validated at construction")
    }

    /// One recurrence step. Returns `(h_t, c_t)`.
    pub fn step(&self, z: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        if z.shape() != [self.input_dim] || h_prev.shape() != [self.hidden] || c_prev.shape() != [self.hidden] {
            return Err(Error::dim(format!(
                "lstm step expects z [{}], h [{}], c [{}]; got {:?}, {:?}, {:?}",
                self.input_dim,
                self.hidden,
                self.hidden,
                z.shape(),
                h_prev.shape(),
                c_prev.shape()
            )));
        }
        let s = self.step_raw(z.data(), h_prev.data(), c_prev.data());
        Ok((Tensor::vector(s.h)?, Tensor::vector(s.c)?))
    }

    fn step_raw(&self, z: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
        let h = self.hidden;
        let mut pre = [vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]];
        for (p, g) in pre.iter_mut().zip(&self.gates) {
            g.preactivation(z, h_prev, p);
        }
        let [pg, pi, po, pc] = pre;
        let g: Vec<f64> = pg.into_iter().map(sigmoid).collect();
        let i: Vec<f64> = pi.into_iter().map(sigmoid).collect();
        let o: Vec<f64> = po.into_iter().map(sigmoid).collect();
        let cand: Vec<f64> = pc.into_iter().map(f64::tanh).collect();
        let c: Vec<f64> = (0..h).map(|k| g[k] * c_prev[k] + i[k] * cand[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h_t: Vec<f64> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
        StepCache {
            z: z.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            g,
            i,
            o,
            cand,
            c,
            tanh_c,
            h: h_t,
        }
    }

    fn run(&self, seq: &[f64]) -> Vec<StepCache> {
        let mut h = vec![0.0; self.hidden];
        let mut c = vec![0.0; self.hidden];
        let mut steps = Vec::with_capacity(self.steps);
        for z in seq.chunks_exact(self.input_dim) {
            let s = self.step_raw(z, &h, &c);
            h.clone_from(&s.h);
            c.clone_from(&s.c);
            steps.push(s);
        }
        steps
    }

    fn check_sequence(&self, seq: &Tensor) -> Result<()> {
        if seq.shape() != [self.steps, self.input_dim] {
            return Err(Error::dim(format!(
                "LSTM expects a [{} × {}] sequence, got {:?}",
                self.steps,
                self.input_dim,
                seq.shape()
            )));
        }
        Ok(())
    }

    /// Runs a `[q × d]` sequence from zero state and returns `h_T`.
    pub fn forward(&self, seq: &Tensor) -> Result<Tensor> {
        self.check_sequence(seq)?;
        let steps = self.run(seq.data());
        Tensor::vector(steps.last().expect("q ≥ 1").h.clone())
    }

    /// Gate activations `(g, i, o)` at every step, for inspection.
    pub fn gate_trace(&self, seq: &Tensor) -> Result<Vec<[Vec<f64>; 3]>> {
        self.check_sequence(seq)?;
        Ok(self
            .run(seq.data())
            .into_iter()
            .map(|s| [s.g, s.i, s.o])
            .collect())
    }

    fn backprop(&self, steps: &[StepCache], grad_ht: &[f64], grads: &mut LstmParamGrads) -> Vec<f64> {
        let (d, h) = (self.input_dim, self.hidden);
        let mut dseq = vec![0.0; steps.len() * d];
        let mut dh = grad_ht.to_vec();
        let mut dc_next = vec![0.0; h];
        let mut da = [vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]];
        for (t, s) in steps.iter().enumerate().rev() {
            for k in 0..h {
                let d_o = dh[k] * s.tanh_c[k];
                let dc = dc_next[k] + dh[k] * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]);
                let d_g = dc * s.c_prev[k];
                let d_i = dc * s.cand[k];
                let d_cand = dc * s.i[k];
                dc_next[k] = dc * s.g[k];
                da[0][k] = d_g * s.g[k] * (1.0 - s.g[k]);
                da[1][k] = d_i * s.i[k] * (1.0 - s.i[k]);
                da[2][k] = d_o * s.o[k] * (1.0 - s.o[k]);
                da[3][k] = d_cand * (1.0 - s.cand[k] * s.cand[k]);
            }
            let dz = &mut dseq[t * d..(t + 1) * d];
            let mut dh_prev = vec![0.0; h];
            for (gi, (p, a)) in self.gates.iter().zip(&da).enumerate() {
                let gw = grads.gates[gi].w.data_mut();
                for j in 0..h {
                    for (x, zv) in gw[j * d..(j + 1) * d].iter_mut().zip(&s.z) {
                        *x += a[j] * zv;
                    }
                }
                let gu = grads.gates[gi].u.data_mut();
                for j in 0..h {
                    for (x, hv) in gu[j * h..(j + 1) * h].iter_mut().zip(&s.h_prev) {
                        *x += a[j] * hv;
                    }
                }
                for (x, av) in grads.gates[gi].b.data_mut().iter_mut().zip(a) {
                    *x += av;
                }
                let w = p.w.data();
                let u = p.u.data();
                for j in 0..h {
                    for (x, wv) in dz.iter_mut().zip(&w[j * d..(j + 1) * d]) {
                        *x += wv * a[j];
                    }
                    for (x, uv) in dh_prev.iter_mut().zip(&u[j * h..(j + 1) * h]) {
                        *x += uv * a[j];
                    }
                }
            }
            dh = dh_prev;
        }
        dseq
    }
}

struct StepCache {
    z: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    g: Vec<f64>,
    i: Vec<f64>,
    o: Vec<f64>,
    cand: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

/// Gradients for the twelve parameter tensors, same layout as the cell.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParamGrads {
    pub gates: [GateParams; 4],
}

impl LstmParamGrads {
    fn zeros(d: usize, h: usize) -> Self {
        LstmParamGrads {
            gates: std::array::from_fn(|_| GateParams::zeros(d, h)),
        }
    }

    pub fn gate(&self, gate: Gate) -> &GateParams {
        &self.gates[gate.index()]
    }
}

pub struct LstmGradients {
    pub sequence: Tensor,
    pub params: LstmParamGrads,
}

/// Trainable wrapper around [`LstmCell`] holding forward caches and
/// accumulated gradients.
pub struct LstmLayer {
    name: String,
    cell: LstmCell,
    grads: LstmParamGrads,
    cache: Option<Vec<Vec<StepCache>>>,
}

impl LstmLayer {
    pub fn new(name: impl Into<String>, cell: LstmCell) -> Self {
        let grads = LstmParamGrads::zeros(cell.input_dim, cell.hidden);
        LstmLayer {
            name: name.into(),
            cell,
            grads,
            cache: None,
        }
    }

    pub fn cell(&self) -> &LstmCell {
        &self.cell
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `[q × d]` → `h_T: [h]`, or batched `[B × q × d]` → `[B × h]`.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (q, d) = (self.cell.steps, self.cell.input_dim);
        let batched = match *x.shape() {
            [a, b] if a == q && b == d => false,
            [_, a, b] if a == q && b == d => true,
            _ => {
                return Err(Error::dim(format!(
                    "{}: expected [{q} × {d}] or [B × {q} × {d}], got {:?}",
                    self.name,
                    x.shape()
                )))
            }
        };
        let runs: Vec<Vec<StepCache>> = x
            .data()
            .chunks_exact(q * d)
            .map(|seq| self.cell.run(seq))
            .collect();
        let mut out = Vec::with_capacity(runs.len() * self.cell.hidden);
        for r in &runs {
            out.extend_from_slice(&r.last().expect("q ≥ 1").h);
        }
        self.cache = Some(runs);
        if batched {
            Tensor::new(&[x.shape()[0], self.cell.hidden], out)
        } else {
            Tensor::vector(out)
        }
    }

    /// BPTT from `grad_hT` (`[h]` or `[B × h]`). Returns the input-sequence
    /// gradient and this call's parameter gradients; accumulators are untouched.
    pub fn backward(&mut self, grad_ht: &Tensor) -> Result<LstmGradients> {
        let runs = self.cache.take().ok_or_else(|| crate::layers::missing_cache(&self.name))?;
        let h = self.cell.hidden;
        if grad_ht.len() != runs.len() * h {
            return Err(Error::dim(format!(
                "{}: grad_hT {:?} does not match {} sequences of width {h}",
                self.name,
                grad_ht.shape(),
                runs.len()
            )));
        }
        let mut params = LstmParamGrads::zeros(self.cell.input_dim, h);
        let mut dseq = Vec::with_capacity(runs.len() * self.cell.steps * self.cell.input_dim);
        for (run, g) in runs.iter().zip(grad_ht.data().chunks_exact(h)) {
            dseq.extend(self.cell.backprop(run, g, &mut params));
        }
        let (q, d) = (self.cell.steps, self.cell.input_dim);
        let sequence = if grad_ht.rank() == 1 {
            Tensor::new(&[q, d], dseq)?
        } else {
            Tensor::new(&[runs.len(), q, d], dseq)?
        };
        Ok(LstmGradients { sequence, params })
    }

    /// Backward pass that adds parameter gradients into the accumulators.
    pub fn backward_accumulate(&mut self, grad_ht: &Tensor) -> Result<Tensor> {
        let g = self.backward(grad_ht)?;
        for (acc, new) in self.grads.gates.iter_mut().zip(&g.params.gates) {
            for (a, b) in [(&mut acc.w, &new.w), (&mut acc.u, &new.u), (&mut acc.b, &new.b)] {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
        }
        Ok(g.sequence)
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(12);
        for (gate, p) in GATES.iter().zip(&self.cell.gates) {
            let k = gate.key();
            out.push((format!("{}.{k}.W", self.name), &p.w));
            out.push((format!("{}.{k}.U", self.name), &p.u));
            out.push((format!("{}.{k}.b", self.name), &p.b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<Param<'_>> {
        let mut out = Vec::with_capacity(12);
        for ((gate, p), g) in GATES
            .iter()
            .zip(self.cell.gates.iter_mut())
            .zip(self.grads.gates.iter_mut())
        {
            let k = gate.key();
            out.push(Param {
                name: format!("{}.{k}.W", self.name),
                value: &mut p.w,
                grad: &mut g.w,
            });
            out.push(Param {
                name: format!("{}.{k}.U", self.name),
                value: &mut p.u,
                grad: &mut g.u,
            });
            out.push(Param {
                name: format!("{}.{k}.b", self.name),
                value: &mut p.b,
                grad: &mut g.b,
            });
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads.gates {
            g.w.data_mut().fill(0.0);
            g.u.data_mut().fill(0.0);
            g.b.data_mut().fill(0.0);
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::gradcheck::{numeric_grad, relative_error};
    use rand::{Rng, SeedableRng};

    fn random_cell(d: usize, h: usize, q: usize, rng: &mut ChaCha8Rng) -> LstmCell {
        let mut cell = LstmCell::new(d, h, q, rng).unwrap();
        for g in GATES {
            for v in cell.gate_mut(g).b.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        cell
    }

    fn random_seq(q: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(&[q, d], (0..q * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Scalar reference recurrence written directly from the gate equations.
    fn oracle_forward(cell: &LstmCell, seq: &Tensor) -> Vec<f64> {
        let (d, h) = (cell.input_dim(), cell.hidden());
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        for t in 0..cell.steps() {
            let z = &seq.data()[t * d..(t + 1) * d];
            let pre = |gate: Gate, j: usize| {
                let p = cell.gate(gate);
                let mut a = p.b.data()[j];
                for k in 0..d {
                    a += p.w.get(&[j, k]).unwrap() * z[k];
                }
                for k in 0..h {
                    a += p.u.get(&[j, k]).unwrap() * hs[k];
                }
                a
            };
            let mut nh = vec![0.0; h];
            let mut nc = vec![0.0; h];
            for j in 0..h {
                let g = sig(pre(Gate::Forget, j));
                let i = sig(pre(Gate::Input, j));
                let o = sig(pre(Gate::Output, j));
                nc[j] = g * cs[j] + i * pre(Gate::Cell, j).tanh();
                nh[j] = o * nc[j].tanh();
            }
            hs = nh;
            cs = nc;
        }
        hs
    }

    #[test]
    fn zero_weights_give_half_gates_and_zero_state() {
        let cell = LstmCell::zeros(3, 2, 4).unwrap();
        let z = Tensor::vector(vec![0.3, -1.0, 2.0]).unwrap();
        let (h, c) = cell.step(&z, &Tensor::zeros(&[2]), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
        assert_eq!(c.data(), &[0.0, 0.0]);
        let seq = Tensor::new(&[4, 3], vec![0.7; 12]).unwrap();
        for [g, i, o] in cell.gate_trace(&seq).unwrap() {
            assert!(g.iter().chain(&i).chain(&o).all(|&v| v == 0.5));
        }
    }

    #[test]
    fn zero_candidate_and_state_keep_cell_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cell = random_cell(2, 2, 1, &mut rng);
        let p = cell.gate_mut(Gate::Cell);
        p.w = Tensor::zeros(&[2, 2]);
        p.u = Tensor::zeros(&[2, 2]);
        p.b = Tensor::zeros(&[2]);
        let z = Tensor::vector(vec![0.4, -0.9]).unwrap();
        let h0 = Tensor::vector(vec![0.2, 0.1]).unwrap();
        let (_, c) = cell.step(&z, &h0, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_hand_case() {
        let one = || GateParams {
            w: Tensor::full(&[1, 1], 1.0),
            u: Tensor::full(&[1, 1], 1.0),
            b: Tensor::zeros(&[1]),
        };
        let cell = LstmCell::from_gates(1, [one(), one(), one(), one()]).unwrap();
        let (h, c) = cell
            .step(
                &Tensor::full(&[1], 1.0),
                &Tensor::zeros(&[1]),
                &Tensor::full(&[1], 1.0),
            )
            .unwrap();
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        let c_want = s + s * 1.0f64.tanh();
        let h_want = s * c_want.tanh();
        assert!((c.data()[0] - c_want).abs() < 1e-12, "{c:?}");
        assert!((h.data()[0] - h_want).abs() < 1e-12, "{h:?}");
        assert!((c_want - 1.287829).abs() < 1e-6 && (h_want - 0.627655).abs() < 1e-6);
    }

    #[test]
    fn single_step_sequence_equals_step_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cell = random_cell(3, 2, 1, &mut rng);
        let seq = random_seq(1, 3, &mut rng);
        let z = Tensor::vector(seq.data().to_vec()).unwrap();
        let (h, _) = cell.step(&z, &Tensor::zeros(&[2]), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(cell.forward(&seq).unwrap(), h);
    }

    #[test]
    fn zero_sequence_with_zero_bias_stays_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cell = LstmCell::new(3, 4, 6, &mut rng).unwrap();
        let h = cell.forward(&Tensor::zeros(&[6, 3])).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let cell = random_cell(2, 2, 3, &mut rng);
            let seq = random_seq(3, 2, &mut rng);
            let got = cell.forward(&seq).unwrap();
            for (a, b) in got.data().iter().zip(oracle_forward(&cell, &seq)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_step_count_is_dimension_error() {
        let cell = LstmCell::zeros(2, 2, 3).unwrap();
        assert!(matches!(cell.forward(&Tensor::zeros(&[4, 2])), Err(Error::Dimension(_))));
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(lstm_param_count(50, 20).unwrap(), 5680);
        assert_eq!(lstm_param_count(1, 1).unwrap(), 12);
        assert!(lstm_param_count(0, 20).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(50, 20, 5, &mut rng).unwrap();
        let layer = LstmLayer::new("lstm", cell);
        let total: usize = layer.params().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(total, 5680);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut layer = LstmLayer::new("lstm", random_cell(3, 4, 5, &mut rng));
        layer.forward(&random_seq(5, 3, &mut rng)).unwrap();
        let g = layer.backward(&Tensor::zeros(&[4])).unwrap();
        assert!(g.sequence.data().iter().all(|&v| v == 0.0));
        for p in &g.params.gates {
            assert!(p.w.data().iter().chain(p.u.data()).chain(p.b.data()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scalar_gradient_matches_symbolic_derivative() {
        // q = 1, h = d = 1, zero initial state: c = i·c̃, h = o·tanh(c).
        let gp = |w: f64, b: f64| GateParams {
            w: Tensor::full(&[1, 1], w),
            u: Tensor::full(&[1, 1], 0.4),
            b: Tensor::full(&[1], b),
        };
        let cell = LstmCell::from_gates(1, [gp(0.3, 0.1), gp(-0.7, 0.2), gp(0.5, -0.3), gp(1.1, 0.05)]).unwrap();
        let z = 0.8;
        let mut layer = LstmLayer::new("l", cell);
        layer.forward(&Tensor::full(&[1, 1], z)).unwrap();
        let g = layer.backward(&Tensor::full(&[1], 1.0)).unwrap();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let i = sig(-0.7 * z + 0.2);
        let o = sig(0.5 * z - 0.3);
        let cand = (1.1 * z + 0.05).tanh();
        let c = i * cand;
        let tc = c.tanh();
        let dc = o * (1.0 - tc * tc);
        let d_wo = tc * o * (1.0 - o) * z;
        let d_wi = dc * cand * i * (1.0 - i) * z;
        let d_wc = dc * i * (1.0 - cand * cand) * z;
        let dz = tc * o * (1.0 - o) * 0.5 + dc * cand * i * (1.0 - i) * -0.7 + dc * i * (1.0 - cand * cand) * 1.1;
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(g.params.gate(Gate::Output).w.data()[0], d_wo));
        assert!(close(g.params.gate(Gate::Input).w.data()[0], d_wi));
        assert!(close(g.params.gate(Gate::Cell).w.data()[0], d_wc));
        // c_prev = 0, so the forget gate receives no gradient.
        assert_eq!(g.params.gate(Gate::Forget).w.data()[0], 0.0);
        // h_prev = 0, so no U gradients either.
        assert_eq!(g.params.gate(Gate::Output).u.data()[0], 0.0);
        assert!(close(g.sequence.data()[0], dz));
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (q, d, h) = (5, 3, 4);
        let cell = random_cell(d, h, q, &mut rng);
        let seq = random_seq(q, d, &mut rng);
        let proj: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |cell: &LstmCell, seq: &Tensor| -> f64 {
            cell.forward(seq).unwrap().data().iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        let mut layer = LstmLayer::new("l", cell.clone());
        layer.forward(&seq).unwrap();
        let g = layer.backward(&Tensor::vector(proj.clone()).unwrap()).unwrap();

        let num_seq = numeric_grad(&seq, 1e-5, |s| loss(&cell, s));
        assert!(relative_error(g.sequence.data(), &num_seq) < 1e-4);
        for gate in GATES {
            let fields: [(fn(&mut GateParams) -> &mut Tensor, &Tensor); 3] = [
                (|p| &mut p.w, &g.params.gate(gate).w),
                (|p| &mut p.u, &g.params.gate(gate).u),
                (|p| &mut p.b, &g.params.gate(gate).b),
            ];
            for (field, analytic) in fields {
                let base = field(cell.clone().gate_mut(gate)).clone();
                let num = numeric_grad(&base, 1e-5, |t| {
                    let mut c = cell.clone();
                    *field(c.gate_mut(gate)) = t.clone();
                    loss(&c, &seq)
                });
                assert!(relative_error(analytic.data(), &num) < 1e-4, "{gate:?}");
            }
        }
    }

    #[test]
    fn batched_forward_equals_per_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cell = random_cell(2, 3, 4, &mut rng);
        let a = random_seq(4, 2, &mut rng);
        let b = random_seq(4, 2, &mut rng);
        let mut layer = LstmLayer::new("l", cell.clone());
        let out = layer.forward(&Tensor::stack(&[&a, &b]).unwrap()).unwrap();
        assert_eq!(out.outer(0), cell.forward(&a).unwrap().data());
        assert_eq!(out.outer(1), cell.forward(&b).unwrap().data());
    }

    #[test]
    fn gates_and_hidden_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let cell = random_cell(3, 5, 8, &mut rng);
            let seq = random_seq(8, 3, &mut rng).scale(4.0);
            for [g, i, o] in cell.gate_trace(&seq).unwrap() {
                assert!(g.iter().chain(&i).chain(&o).all(|&v| v > 0.0 && v < 1.0));
            }
            assert!(cell.forward(&seq).unwrap().data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    proptest::proptest! {
        #[test]
        fn gates_stay_in_unit_interval_and_state_is_finite(
            d in 1usize..5, h in 1usize..5, q in 1usize..12, seed in 0u64..1000, scale in 0.1f64..20.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cell = random_cell(d, h, q, &mut rng);
            let seq = Tensor::new(&[q, d], (0..q * d).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap();
            let out = cell.forward(&seq).unwrap();
            proptest::prop_assert_eq!(out.shape(), &[h][..]);
            proptest::prop_assert!(out.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
            for step in cell.gate_trace(&seq).unwrap() {
                proptest::prop_assert!(step.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
