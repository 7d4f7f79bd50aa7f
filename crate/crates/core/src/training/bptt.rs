//! Reverse-mode differentiation through full GRU rollouts.

use crate::gru::{GruNetwork, OutputActivation};

use super::grads::GradientSet;

/// Per-layer activations recorded during a forward rollout.
struct LayerTape {
    width: usize,
    input_dim: usize,
    /// Layer input `v(k)`, `T × m_l`.
    v: Vec<f64>,
    /// Layer state `ξ(k)` for `k = 0..=T`, `(T+1) × n_l`.
    xi: Vec<f64>,
    z: Vec<f64>,
    f: Vec<f64>,
    c: Vec<f64>,
}

/// Everything needed to back-propagate through one rollout.
pub struct Tape {
    steps: usize,
    layers: Vec<LayerTape>,
    /// Network outputs, `T × p`.
    outputs: Vec<f64>,
    output_dim: usize,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn output(&self, k: usize) -> &[f64] {
        &self.outputs[k * self.output_dim..(k + 1) * self.output_dim]
    }

    pub fn flat_outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn outputs(&self) -> Vec<Vec<f64>> {
        (0..self.steps).map(|k| self.output(k).to_vec()).collect()
    }

    pub fn final_state(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for lt in &self.layers {
            let n = lt.width;
            out.extend_from_slice(&lt.xi[self.steps * n..(self.steps + 1) * n]);
        }
        out
    }
}

/// Forward rollout from `initial` recording the tape. Dimensions are the
/// caller's responsibility (checked upstream by the loss functions).
pub fn forward(net: &GruNetwork, initial: &[f64], inputs: &[Vec<f64>]) -> Tape {
    let t_len = inputs.len();
    let offsets = net.offsets();
    let mut layers: Vec<LayerTape> = net
        .layers()
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let n = w.width();
            let mut xi = vec![0.0; (t_len + 1) * n];
            xi[..n].copy_from_slice(&initial[offsets[l]..offsets[l + 1]]);
            LayerTape {
                width: n,
                input_dim: w.input_dim(),
                v: vec![0.0; t_len * w.input_dim()],
                xi,
                z: vec![0.0; t_len * n],
                f: vec![0.0; t_len * n],
                c: vec![0.0; t_len * n],
            }
        })
        .collect();
    let p = net.output_dim();
    let mut outputs = vec![0.0; t_len * p];

    for (k, u) in inputs.iter().enumerate() {
        for l in 0..layers.len() {
            let (before, rest) = layers.split_at_mut(l);
            let lt = &mut rest[0];
            let n = lt.width;
            let m = lt.input_dim;
            let v = &mut lt.v[k * m..(k + 1) * m];
            if l == 0 {
                v.copy_from_slice(u);
            } else {
                let prev = &before[l - 1];
                let pn = prev.width;
                v.copy_from_slice(&prev.xi[(k + 1) * pn..(k + 2) * pn]);
            }
            let (cur, next) = lt.xi.split_at_mut((k + 1) * n);
            net.layers()[l].forward(
                &cur[k * n..],
                v,
                &mut lt.z[k * n..(k + 1) * n],
                &mut lt.f[k * n..(k + 1) * n],
                &mut lt.c[k * n..(k + 1) * n],
                &mut next[..n],
            );
        }
        let last = layers.last().unwrap();
        let n = last.width;
        net.output()
            .apply(&last.xi[(k + 1) * n..(k + 2) * n], &mut outputs[k * p..(k + 1) * p]);
    }
    Tape {
        steps: t_len,
        layers,
        outputs,
        output_dim: p,
    }
}

/// Back-propagates output gradients `dL/dζ(k)` (flattened `T × p`) through the
/// rollout. Accumulates parameter gradients into `grads` and returns
/// `dL/dv(k)` for the network input when `want_input_grad` is set.
pub fn backward(
    net: &GruNetwork,
    tape: &Tape,
    output_grad: &[f64],
    grads: &mut GradientSet,
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let t_len = tape.steps;
    let p = tape.output_dim;
    let n_layers = tape.layers.len();
    let m0 = tape.layers[0].input_dim;
    let mut input_grad = want_input_grad.then(|| vec![0.0; t_len * m0]);

    // carry[l] = dL/dξ^l(k+1) flowing back from later time steps
    let mut carry: Vec<Vec<f64>> = tape.layers.iter().map(|lt| vec![0.0; lt.width]).collect();
    let max_w = tape.layers.iter().map(|lt| lt.width.max(lt.input_dim)).max().unwrap();
    let mut g_next = vec![0.0; max_w];
    let mut dv = vec![0.0; max_w];
    let mut da_z = vec![0.0; max_w];
    let mut da_f = vec![0.0; max_w];
    let mut da_r = vec![0.0; max_w];
    let mut dfx = vec![0.0; max_w];
    let mut fx = vec![0.0; max_w];
    let mut dxi = vec![0.0; max_w];
    let mut dy = vec![0.0; p];

    let out_map = net.output();
    for k in (0..t_len).rev() {
        // output layer
        let y = tape.output(k);
        let mut any = false;
        for j in 0..p {
            let mut g = output_grad[k * p + j];
            if out_map.activation == OutputActivation::Tanh {
                g *= 1.0 - y[j] * y[j];
            }
            any |= g != 0.0;
            dy[j] = g;
        }
        let last = &tape.layers[n_layers - 1];
        let nl = last.width;
        let g_top = &mut g_next[..nl];
        g_top.copy_from_slice(&carry[n_layers - 1]);
        if any {
            let xi_out = &last.xi[(k + 1) * nl..(k + 2) * nl];
            grads.u_o.add_outer(&dy, xi_out);
            for (b, d) in grads.b_o.iter_mut().zip(&dy) {
                *b += d;
            }
            out_map.u_o.tr_mul_vec_acc(&dy, g_top);
        }

        for l in (0..n_layers).rev() {
            let lt = &tape.layers[l];
            let w = &net.layers()[l];
            let g = &mut grads.layers[l];
            let n = lt.width;
            let m = lt.input_dim;
            let xi = &lt.xi[k * n..(k + 1) * n];
            let z = &lt.z[k * n..(k + 1) * n];
            let f = &lt.f[k * n..(k + 1) * n];
            let c = &lt.c[k * n..(k + 1) * n];
            let v = &lt.v[k * m..(k + 1) * m];
            let gn = &g_next[..n];

            let dxi = &mut dxi[..n];
            let da_z = &mut da_z[..n];
            let da_f = &mut da_f[..n];
            let da_r = &mut da_r[..n];
            let dfx = &mut dfx[..n];
            let fx = &mut fx[..n];
            for i in 0..n {
                dxi[i] = gn[i] * z[i];
                da_z[i] = gn[i] * (xi[i] - c[i]) * z[i] * (1.0 - z[i]);
                da_r[i] = gn[i] * (1.0 - z[i]) * (1.0 - c[i] * c[i]);
                fx[i] = f[i] * xi[i];
                dfx[i] = 0.0;
            }
            w.u_r.tr_mul_vec_acc(da_r, dfx);
            for i in 0..n {
                da_f[i] = dfx[i] * xi[i] * f[i] * (1.0 - f[i]);
                dxi[i] += dfx[i] * f[i];
            }
            g.w_r.add_outer(da_r, v);
            g.u_r.add_outer(da_r, fx);
            g.w_z.add_outer(da_z, v);
            g.u_z.add_outer(da_z, xi);
            g.w_f.add_outer(da_f, v);
            g.u_f.add_outer(da_f, xi);
            for i in 0..n {
                g.b_r[i] += da_r[i];
                g.b_z[i] += da_z[i];
                g.b_f[i] += da_f[i];
            }
            w.u_z.tr_mul_vec_acc(da_z, dxi);
            w.u_f.tr_mul_vec_acc(da_f, dxi);

            let dv = &mut dv[..m];
            dv.iter_mut().for_each(|x| *x = 0.0);
            w.w_z.tr_mul_vec_acc(da_z, dv);
            w.w_f.tr_mul_vec_acc(da_f, dv);
            w.w_r.tr_mul_vec_acc(da_r, dv);

            carry[l].copy_from_slice(dxi);
            if l > 0 {
                // v^l = ξ^{l-1,+}(k): seed the previous layer's gradient
                let pn = tape.layers[l - 1].width;
                debug_assert_eq!(pn, m);
                for i in 0..pn {
                    g_next[i] = carry[l - 1][i] + dv[i];
                }
            } else if let Some(ig) = input_grad.as_mut() {
                ig[k * m0..(k + 1) * m0].copy_from_slice(dv);
            }
        }
    }
    input_grad
}
