//! Deep GRU networks in state-space form.
//!
//! Each layer `l` advances its state with
//!
//! ```text
//! z  = σ(W_z v + U_z ξ + b_z)
//! f  = σ(W_f v + U_f ξ + b_f)
//! ξ⁺ = z ∘ ξ + (1 − z) ∘ tanh(W_r v + U_r (f ∘ ξ) + b_r)
//! ```
//!
//! where `v` is the network input for the first layer and the *updated*
//! state of the previous layer for every following one. The output is read
//! from the updated state of the last layer through an affine map, optionally
//! squashed by `tanh` (controller networks).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ImcError, Result};
use crate::linalg::{inf_norm_vec, sigmoid, Matrix};

/// Weights of one GRU layer; `n` rows everywhere, `W_*` share the input width.
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayerWeights {
    pub w_z: Matrix,
    pub w_f: Matrix,
    pub w_r: Matrix,
    pub u_z: Matrix,
    pub u_f: Matrix,
    pub u_r: Matrix,
    pub b_z: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_r: Vec<f64>,
}

impl GruLayerWeights {
    pub fn zeros(width: usize, input_dim: usize) -> Self {
        GruLayerWeights {
            w_z: Matrix::zeros(width, input_dim),
            w_f: Matrix::zeros(width, input_dim),
            w_r: Matrix::zeros(width, input_dim),
            u_z: Matrix::zeros(width, width),
            u_f: Matrix::zeros(width, width),
            u_r: Matrix::zeros(width, width),
            b_z: vec![0.0; width],
            b_f: vec![0.0; width],
            b_r: vec![0.0; width],
        }
    }

    /// Uniform initialization: input weights in `±1/√m`, recurrent weights in
    /// `±recurrent_scale/√n`, biases zero.
    pub fn random<R: Rng + ?Sized>(width: usize, input_dim: usize, recurrent_scale: f64, rng: &mut R) -> Self {
        let a_in = 1.0 / (input_dim.max(1) as f64).sqrt();
        let a_rec = recurrent_scale / (width.max(1) as f64).sqrt();
        let mut draw = |rows, cols, a: f64| {
            Matrix::from_fn(rows, cols, |_, _| if a > 0.0 { rng.random_range(-a..a) } else { 0.0 })
        };
        GruLayerWeights {
            w_z: draw(width, input_dim, a_in),
            w_f: draw(width, input_dim, a_in),
            w_r: draw(width, input_dim, a_in),
            u_z: draw(width, width, a_rec),
            u_f: draw(width, width, a_rec),
            u_r: draw(width, width, a_rec),
            b_z: vec![0.0; width],
            b_f: vec![0.0; width],
            b_r: vec![0.0; width],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.u_z.rows()
    }

    /// W_z, W_f, W_r, U_z, U_f, U_r, b_z, b_f, b_r.
    pub fn arrays(&self) -> [&[f64]; 9] {
        [
            self.w_z.as_slice(),
            self.w_f.as_slice(),
            self.w_r.as_slice(),
            self.u_z.as_slice(),
            self.u_f.as_slice(),
            self.u_r.as_slice(),
            &self.b_z,
            &self.b_f,
            &self.b_r,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.w_z.as_mut_slice(),
            self.w_f.as_mut_slice(),
            self.w_r.as_mut_slice(),
            self.u_z.as_mut_slice(),
            self.u_f.as_mut_slice(),
            self.u_r.as_mut_slice(),
            &mut self.b_z,
            &mut self.b_f,
            &mut self.b_r,
        ]
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    /// Checks shape consistency and finiteness; `index` names the layer in errors.
    pub fn validate(&self, index: usize) -> Result<()> {
        let n = self.width();
        let m = self.input_dim();
        let ctx = |what: &str| format!("layer {} {}", index + 1, what);
        for (name, w) in [("W_z", &self.w_z), ("W_f", &self.w_f), ("W_r", &self.w_r)] {
            if w.shape() != (n, m) {
                return Err(ImcError::dims(
                    ctx(name),
                    format!("{n}x{m}"),
                    format!("{}x{}", w.rows(), w.cols()),
                ));
            }
        }
        for (name, u) in [("U_z", &self.u_z), ("U_f", &self.u_f), ("U_r", &self.u_r)] {
            if u.shape() != (n, n) {
                return Err(ImcError::dims(
                    ctx(name),
                    format!("{n}x{n}"),
                    format!("{}x{}", u.rows(), u.cols()),
                ));
            }
        }
        for (name, b) in [("b_z", &self.b_z), ("b_f", &self.b_f), ("b_r", &self.b_r)] {
            if b.len() != n {
                return Err(ImcError::dims(ctx(name), n, b.len()));
            }
        }
        let finite = [&self.w_z, &self.w_f, &self.w_r, &self.u_z, &self.u_f, &self.u_r]
            .iter()
            .all(|m| m.is_finite())
            && [&self.b_z, &self.b_f, &self.b_r]
                .iter()
                .all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(ImcError::NonFinite(ctx("weights")));
        }
        Ok(())
    }

    /// Advances this layer by one step. Gate activations are written to
    /// `z`, `f`, and the candidate to `c`; the new state to `next`.
    #[inline]
    pub(crate) fn forward(&self, xi: &[f64], v: &[f64], z: &mut [f64], f: &mut [f64], c: &mut [f64], next: &mut [f64]) {
        z.copy_from_slice(&self.b_z);
        self.w_z.mul_vec_acc(v, z);
        self.u_z.mul_vec_acc(xi, z);
        f.copy_from_slice(&self.b_f);
        self.w_f.mul_vec_acc(v, f);
        self.u_f.mul_vec_acc(xi, f);
        for (zi, fi) in z.iter_mut().zip(f.iter_mut()) {
            *zi = sigmoid(*zi);
            *fi = sigmoid(*fi);
        }
        // next temporarily holds f ∘ ξ
        for ((n, fi), x) in next.iter_mut().zip(f.iter()).zip(xi) {
            *n = fi * x;
        }
        c.copy_from_slice(&self.b_r);
        self.w_r.mul_vec_acc(v, c);
        self.u_r.mul_vec_acc(next, c);
        for (((n, ci), zi), x) in next.iter_mut().zip(c.iter_mut()).zip(z.iter()).zip(xi) {
            *ci = ci.tanh();
            *n = zi * x + (1.0 - zi) * *ci;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputMap {
    pub u_o: Matrix,
    pub b_o: Vec<f64>,
    pub activation: OutputActivation,
}

impl OutputMap {
    pub fn zeros(output_dim: usize, last_width: usize, activation: OutputActivation) -> Self {
        OutputMap {
            u_o: Matrix::zeros(output_dim, last_width),
            b_o: vec![0.0; output_dim],
            activation,
        }
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.u_o.rows()
    }

    #[inline]
    pub fn apply(&self, last_state: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b_o);
        self.u_o.mul_vec_acc(last_state, out);
        if self.activation == OutputActivation::Tanh {
            out.iter_mut().for_each(|y| *y = y.tanh());
        }
    }
}

/// Network shape: input width, per-layer state widths, output width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub input_dim: usize,
    pub layer_widths: Vec<usize>,
    pub output_dim: usize,
}

impl Topology {
    pub fn new(input_dim: usize, layer_widths: Vec<usize>, output_dim: usize) -> Self {
        Topology {
            input_dim,
            layer_widths,
            output_dim,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.layer_widths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.layer_widths.is_empty() || self.layer_widths.contains(&0)
        {
            return Err(ImcError::InvalidArgument(format!(
                "topology must have positive dimensions and at least one layer: {self:?}"
            )));
        }
        Ok(())
    }
}

/// A deep GRU: the single parametric object used for both the plant model
/// (identity output) and the controller (tanh output).
#[derive(Debug, Clone, PartialEq)]
pub struct GruNetwork {
    layers: Vec<GruLayerWeights>,
    output: OutputMap,
    offsets: Vec<usize>,
}

impl GruNetwork {
    pub fn new(layers: Vec<GruLayerWeights>, output: OutputMap) -> Result<Self> {
        if layers.is_empty() {
            return Err(ImcError::InvalidArgument(
                "a GRU network needs at least one layer".into(),
            ));
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.validate(i)?;
            if i > 0 && layer.input_dim() != layers[i - 1].width() {
                return Err(ImcError::dims(
                    format!("layer {} input", i + 1),
                    layers[i - 1].width(),
                    layer.input_dim(),
                ));
            }
        }
        let last = layers.last().map(|l| l.width()).unwrap_or(0);
        if output.u_o.cols() != last {
            return Err(ImcError::dims("output map U_o columns", last, output.u_o.cols()));
        }
        if output.b_o.len() != output.u_o.rows() {
            return Err(ImcError::dims("output map b_o", output.u_o.rows(), output.b_o.len()));
        }
        if !output.u_o.is_finite() || output.b_o.iter().any(|v| !v.is_finite()) {
            return Err(ImcError::NonFinite("output map".into()));
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for l in &layers {
            acc += l.width();
            offsets.push(acc);
        }
        Ok(GruNetwork {
            layers,
            output,
            offsets,
        })
    }

    pub fn zeros(topology: &Topology, activation: OutputActivation) -> Result<Self> {
        topology.validate()?;
        let mut layers = Vec::with_capacity(topology.layer_widths.len());
        let mut input = topology.input_dim;
        for &w in &topology.layer_widths {
            layers.push(GruLayerWeights::zeros(w, input));
            input = w;
        }
        let output = OutputMap::zeros(topology.output_dim, input, activation);
        GruNetwork::new(layers, output)
    }

    /// Random initialization; output weights in `±1/√n_M`, output bias zero.
    pub fn random<R: Rng + ?Sized>(
        topology: &Topology,
        activation: OutputActivation,
        recurrent_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        topology.validate()?;
        let mut layers = Vec::with_capacity(topology.layer_widths.len());
        let mut input = topology.input_dim;
        for &w in &topology.layer_widths {
            layers.push(GruLayerWeights::random(w, input, recurrent_scale, rng));
            input = w;
        }
        let a = 1.0 / (input as f64).sqrt();
        let u_o = Matrix::from_fn(topology.output_dim, input, |_, _| rng.random_range(-a..a));
        let output = OutputMap {
            u_o,
            b_o: vec![0.0; topology.output_dim],
            activation,
        };
        GruNetwork::new(layers, output)
    }

    pub fn topology(&self) -> Topology {
        Topology {
            input_dim: self.input_dim(),
            layer_widths: self.layers.iter().map(|l| l.width()).collect(),
            output_dim: self.output_dim(),
        }
    }

    #[inline]
    pub fn layers(&self) -> &[GruLayerWeights] {
        &self.layers
    }

    #[inline]
    pub fn output(&self) -> &OutputMap {
        &self.output
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.output.output_dim()
    }

    #[inline]
    pub fn state_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Offsets of each layer's block inside the concatenated state; length `M + 1`.
    #[inline]
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub(crate) fn max_width(&self) -> usize {
        self.layers.iter().map(|l| l.width()).max().unwrap_or(0)
    }

    /// Every weight array in canonical order (per layer: W_z, W_f, W_r,
    /// U_z, U_f, U_r, b_z, b_f, b_r; then U_o, b_o).
    pub fn arrays(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 9 + 2);
        for l in &self.layers {
            out.extend(l.arrays());
        }
        out.push(self.output.u_o.as_slice());
        out.push(&self.output.b_o[..]);
        out
    }

    /// Mutable view in the same order as [`arrays`](Self::arrays). Shapes
    /// cannot change through this view, so the structural invariants hold.
    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 9 + 2);
        for l in &mut self.layers {
            out.extend(l.arrays_mut());
        }
        out.push(self.output.u_o.as_mut_slice());
        out.push(&mut self.output.b_o[..]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn zero_state(&self) -> GruState {
        GruState {
            data: vec![0.0; self.state_dim()],
        }
    }

    pub fn state_from_vec(&self, data: Vec<f64>) -> Result<GruState> {
        if data.len() != self.state_dim() {
            return Err(ImcError::dims("GRU state", self.state_dim(), data.len()));
        }
        Ok(GruState { data })
    }

    /// Output map applied to a full concatenated state.
    pub fn output_of(&self, state: &GruState) -> Vec<f64> {
        let mut y = vec![0.0; self.output_dim()];
        let m = self.layers.len();
        self.output
            .apply(&state.data[self.offsets[m - 1]..self.offsets[m]], &mut y);
        y
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(ImcError::dims("network input (layer 1)", self.input_dim(), input.len()));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(ImcError::NonFinite("network input".into()));
        }
        Ok(())
    }

    /// One step of the deep GRU: returns the updated state and the output.
    pub fn step(&self, state: &GruState, input: &[f64]) -> Result<(GruState, Vec<f64>)> {
        if state.data.len() != self.state_dim() {
            return Err(ImcError::dims("GRU state", self.state_dim(), state.data.len()));
        }
        self.check_input(input)?;
        let mut next = state.clone();
        let mut y = vec![0.0; self.output_dim()];
        let mut ws = Workspace::new(self);
        self.step_in_place(&mut next.data, input, &mut y, &mut ws);
        Ok((next, y))
    }

    /// Allocation-free step for hot loops; the caller guarantees dimensions.
    #[inline]
    pub(crate) fn step_in_place(&self, xi: &mut [f64], input: &[f64], y: &mut [f64], ws: &mut Workspace) {
        let m = self.layers.len();
        for l in 0..m {
            let (lo, hi) = (self.offsets[l], self.offsets[l + 1]);
            let n = hi - lo;
            let Workspace { z, f, c, next } = ws;
            let (z, f, c, next) = (&mut z[..n], &mut f[..n], &mut c[..n], &mut next[..n]);
            if l == 0 {
                self.layers[0].forward(&xi[lo..hi], input, z, f, c, next);
            } else {
                let (prev, cur) = xi.split_at(lo);
                let v = &prev[self.offsets[l - 1]..];
                self.layers[l].forward(&cur[..n], v, z, f, c, next);
            }
            xi[lo..hi].copy_from_slice(next);
        }
        self.output.apply(&xi[self.offsets[m - 1]..], y);
    }

    /// Folds [`step`](Self::step) over an input sequence.
    pub fn simulate(&self, initial: &GruState, inputs: &[Vec<f64>], sample_period: f64) -> Result<Trajectory> {
        if inputs.is_empty() {
            return Err(ImcError::InvalidArgument("empty input sequence".into()));
        }
        if initial.data.len() != self.state_dim() {
            return Err(ImcError::dims(
                "initial GRU state",
                self.state_dim(),
                initial.data.len(),
            ));
        }
        let mut ws = Workspace::new(self);
        let mut xi = initial.data.clone();
        let mut states = Vec::with_capacity(inputs.len() + 1);
        let mut outputs = Vec::with_capacity(inputs.len());
        states.push(xi.clone());
        for (k, u) in inputs.iter().enumerate() {
            self.check_input(u).map_err(|e| e.at_step(k))?;
            let mut y = vec![0.0; self.output_dim()];
            self.step_in_place(&mut xi, u, &mut y, &mut ws);
            states.push(xi.clone());
            outputs.push(y);
        }
        Ok(Trajectory {
            inputs: inputs.to_vec(),
            states,
            outputs,
            sample_period,
        })
    }

    /// Outputs only, without recording states.
    pub fn simulate_outputs(&self, initial: &[f64], inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if initial.len() != self.state_dim() {
            return Err(ImcError::dims("initial GRU state", self.state_dim(), initial.len()));
        }
        let mut ws = Workspace::new(self);
        let mut xi = initial.to_vec();
        let mut outputs = Vec::with_capacity(inputs.len());
        for (k, u) in inputs.iter().enumerate() {
            self.check_input(u).map_err(|e| e.at_step(k))?;
            let mut y = vec![0.0; self.output_dim()];
            self.step_in_place(&mut xi, u, &mut y, &mut ws);
            outputs.push(y);
        }
        Ok(outputs)
    }

    /// `‖ξ(k)‖∞` for `k = 0..=len(inputs)`, starting outside the unit hypercube.
    pub fn capture_probe(&self, initial: &GruState, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if initial.in_unit_box() {
            return Err(ImcError::InvalidArgument(format!(
                "capture probe needs an initial state outside the unit hypercube (‖ξ₀‖∞ = {})",
                initial.inf_norm()
            )));
        }
        let traj = self.simulate(initial, inputs, 1.0)?;
        Ok(traj.states.iter().map(|s| inf_norm_vec(s)).collect())
    }
}

/// Scratch buffers for [`GruNetwork::step_in_place`].
#[derive(Debug, Clone)]
pub(crate) struct Workspace {
    z: Vec<f64>,
    f: Vec<f64>,
    c: Vec<f64>,
    next: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(net: &GruNetwork) -> Self {
        let n = net.max_width();
        Workspace {
            z: vec![0.0; n],
            f: vec![0.0; n],
            c: vec![0.0; n],
            next: vec![0.0; n],
        }
    }
}

/// Concatenated per-layer state `ξ = [ξ¹; …; ξᴹ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruState {
    data: Vec<f64>,
}

impl GruState {
    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn inf_norm(&self) -> f64 {
        inf_norm_vec(&self.data)
    }

    /// Membership in the invariant set `[-1, 1]^n`.
    pub fn in_unit_box(&self) -> bool {
        self.data.iter().all(|v| v.abs() <= 1.0)
    }

    /// State block of layer `l` (0-based).
    pub fn layer<'a>(&'a self, net: &GruNetwork, l: usize) -> &'a [f64] {
        &self.data[net.offsets()[l]..net.offsets()[l + 1]]
    }
}

/// Inputs, states (initial state first), and outputs of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub inputs: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub sample_period: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory stores the initial state")
    }
}
