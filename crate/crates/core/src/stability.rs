//! Sufficient condition for incremental input-to-state stability (δISS) of a
//! deep GRU, the per-layer residual `ν`, and the hinge penalty used to enforce
//! `ν ≤ ν*` during training.
//!
//! For layer `l`, with `‖·‖` the induced ∞-norm and `[A B c]` horizontal
//! stacking,
//!
//! ```text
//! σ̄_z = σ(‖[W_z U_z b_z]‖)   σ̄_f = σ(‖[W_f U_f b_f]‖)   φ̄_r = tanh(‖[W_r U_r b_r]‖)
//! ν   = ‖U_r‖ (¼‖U_f‖ + σ̄_f) + ¼ (1 + φ̄_r)/(1 − σ̄_z) ‖U_z‖ − 1
//! ```
//!
//! The network is δISS if `ν < 0` for every layer. The condition is sufficient,
//! not necessary.

use serde::{Deserialize, Serialize};

use crate::gru::{GruLayerWeights, GruNetwork};
use crate::linalg::{argmax_row, concat_inf_norm, sigmoid, sign, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerBounds {
    pub sigma_z: f64,
    pub sigma_f: f64,
    pub phi_r: f64,
}

pub fn layer_bounds(layer: &GruLayerWeights) -> LayerBounds {
    let (nz, _) = concat_inf_norm(&layer.w_z, &layer.u_z, &layer.b_z);
    let (nf, _) = concat_inf_norm(&layer.w_f, &layer.u_f, &layer.b_f);
    let (nr, _) = concat_inf_norm(&layer.w_r, &layer.u_r, &layer.b_r);
    LayerBounds {
        sigma_z: sigmoid(nz),
        sigma_f: sigmoid(nf),
        phi_r: nr.tanh(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStabilityReport {
    pub layer: usize,
    pub bounds: LayerBounds,
    /// `‖U_r‖ (¼‖U_f‖ + σ̄_f)`
    pub lhs: f64,
    /// `1 − ¼ (1 + φ̄_r)/(1 − σ̄_z) ‖U_z‖`
    pub rhs: f64,
    /// `lhs − rhs`
    pub residual: f64,
}

pub fn layer_report(index: usize, layer: &GruLayerWeights) -> LayerStabilityReport {
    let bounds = layer_bounds(layer);
    let lhs = layer.u_r.inf_norm() * (0.25 * layer.u_f.inf_norm() + bounds.sigma_f);
    let rhs = 1.0 - 0.25 * (1.0 + bounds.phi_r) / (1.0 - bounds.sigma_z) * layer.u_z.inf_norm();
    LayerStabilityReport {
        layer: index,
        bounds,
        lhs,
        rhs,
        residual: lhs - rhs,
    }
}

/// Residual `ν` of one layer; negative iff the layer satisfies the condition.
pub fn delta_iss_residual(layer: &GruLayerWeights) -> f64 {
    layer_report(0, layer).residual
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub layers: Vec<LayerStabilityReport>,
    /// True iff every layer residual is strictly negative.
    pub certified: bool,
    /// `min_l (−ν_l)`; positive when certified.
    pub margin: f64,
}

impl StabilityCertificate {
    pub fn residuals(&self) -> Vec<f64> {
        self.layers.iter().map(|r| r.residual).collect()
    }

    /// Certified with every residual at or below `target`.
    pub fn meets(&self, target: f64) -> bool {
        self.certified && self.layers.iter().all(|r| r.residual <= target)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.layers {
            s.push_str(&format!(
                "layer {}: nu = {:+.6}  (sigma_z {:.4}, sigma_f {:.4}, phi_r {:.4})\n",
                r.layer + 1,
                r.residual,
                r.bounds.sigma_z,
                r.bounds.sigma_f,
                r.bounds.phi_r
            ));
        }
        s.push_str(&format!(
            "verdict: {} (margin {:+.6}); the condition is sufficient, not necessary, for delta-ISS\n",
            if self.certified { "CERTIFIED" } else { "NOT CERTIFIED" },
            self.margin
        ));
        s
    }
}

pub fn certify(net: &GruNetwork) -> StabilityCertificate {
    let layers: Vec<_> = net
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| layer_report(i, l))
        .collect();
    let certified = layers.iter().all(|r| r.residual < 0.0);
    let margin = layers.iter().map(|r| -r.residual).fold(f64::INFINITY, f64::min);
    StabilityCertificate {
        layers,
        certified,
        margin,
    }
}

/// Hinge penalty `ρ(ν) = λ max(0, ν − ν*)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Penalty {
    /// Target residual `ν* < 0`.
    pub target: f64,
    /// Slope `λ > 0`.
    pub slope: f64,
}

impl Default for Penalty {
    fn default() -> Self {
        Penalty {
            target: -0.05,
            slope: 10.0,
        }
    }
}

impl Penalty {
    pub fn value(&self, nu: f64) -> f64 {
        penalty(nu, self.target, self.slope)
    }

    pub fn subgradient(&self, nu: f64) -> f64 {
        if nu > self.target {
            self.slope
        } else {
            0.0
        }
    }
}

pub fn penalty(nu: f64, target: f64, slope: f64) -> f64 {
    slope * (nu - target).max(0.0)
}

/// Subgradient of `ν` with respect to every array of the layer, scaled by
/// `scale`, accumulated into `grad` (a layer of identical shape).
///
/// The ∞-norm subgradient puts `sign(a_ij)` on the maximizing row; ties pick
/// the first maximal row.
pub fn accumulate_residual_gradient(layer: &GruLayerWeights, scale: f64, grad: &mut GruLayerWeights) {
    if scale == 0.0 {
        return;
    }
    let (nz, rz) = concat_inf_norm(&layer.w_z, &layer.u_z, &layer.b_z);
    let (nf, rf) = concat_inf_norm(&layer.w_f, &layer.u_f, &layer.b_f);
    let (nr, rr) = concat_inf_norm(&layer.w_r, &layer.u_r, &layer.b_r);
    let sz = sigmoid(nz);
    let sf = sigmoid(nf);
    let pr = nr.tanh();
    let a = layer.u_r.inf_norm();
    let c = layer.u_f.inf_norm();
    let d = layer.u_z.inf_norm();

    let d_a = 0.25 * c + sf;
    let d_c = 0.25 * a;
    let d_nf = a * sf * (1.0 - sf);
    let d_d = 0.25 * (1.0 + pr) / (1.0 - sz);
    let d_nr = 0.25 * d * (1.0 - pr * pr) / (1.0 - sz);
    let d_nz = 0.25 * (1.0 + pr) * d * sz / (1.0 - sz);

    fn add_row_sign(src: &Matrix, row: usize, k: f64, dst: &mut Matrix) {
        if k == 0.0 {
            return;
        }
        for j in 0..src.cols() {
            let g = dst.get(row, j) + k * sign(src.get(row, j));
            dst.set(row, j, g);
        }
    }

    add_row_sign(&layer.u_r, argmax_row(&layer.u_r), scale * d_a, &mut grad.u_r);
    add_row_sign(&layer.u_f, argmax_row(&layer.u_f), scale * d_c, &mut grad.u_f);
    add_row_sign(&layer.u_z, argmax_row(&layer.u_z), scale * d_d, &mut grad.u_z);

    let concat_terms = [
        (scale * d_nz, rz, &layer.w_z, &layer.u_z, &layer.b_z, 0usize),
        (scale * d_nf, rf, &layer.w_f, &layer.u_f, &layer.b_f, 1),
        (scale * d_nr, rr, &layer.w_r, &layer.u_r, &layer.b_r, 2),
    ];
    for (k, row, w, u, b, which) in concat_terms {
        if k == 0.0 {
            continue;
        }
        let (gw, gu, gb) = match which {
            0 => (&mut grad.w_z, &mut grad.u_z, &mut grad.b_z),
            1 => (&mut grad.w_f, &mut grad.u_f, &mut grad.b_f),
            _ => (&mut grad.w_r, &mut grad.u_r, &mut grad.b_r),
        };
        add_row_sign(w, row, k, gw);
        add_row_sign(u, row, k, gu);
        gb[row] += k * sign(b[row]);
    }
}
