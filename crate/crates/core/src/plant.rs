//! Quadruple-tank process: four interconnected tanks fed by two pumps through
//! two three-way valves. Only `h₁`, `h₂` are measured.
//!
//! ```text
//! ḣ₁ = −a₁/S √(2g h₁) + a₃/S √(2g h₃) + γ_a/S q_a
//! ḣ₂ = −a₂/S √(2g h₂) + a₄/S √(2g h₄) + γ_b/S q_b
//! ḣ₃ = −a₃/S √(2g h₃) + (1−γ_b)/S q_b
//! ḣ₄ = −a₄/S √(2g h₄) + (1−γ_a)/S q_a
//! ```

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ImcError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TankParams {
    /// Outlet areas `a₁..a₄`, m².
    pub a: [f64; 4],
    /// Tank cross-section, m².
    pub s: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub g: f64,
    pub h_min: [f64; 4],
    pub h_max: [f64; 4],
    /// Pump bounds for `q_a`, `q_b`, m³/s.
    pub q_min: [f64; 2],
    pub q_max: [f64; 2],
}

impl Default for TankParams {
    fn default() -> Self {
        TankParams {
            a: [1.31e-4, 1.51e-4, 9.27e-5, 8.82e-5],
            s: 0.06,
            gamma_a: 0.3,
            gamma_b: 0.4,
            g: 9.81,
            h_min: [0.0; 4],
            h_max: [1.36, 1.36, 1.3, 1.3],
            q_min: [0.0, 0.0],
            q_max: [9e-4, 1.3e-3],
        }
    }
}

impl TankParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ImcError::Config(format!("tank parameters: {m}")));
        if !self.a.iter().all(|&a| a > 0.0) || !(self.s > 0.0) || !(self.g > 0.0) {
            return bad("areas and gravity must be positive");
        }
        if !(0.0 < self.gamma_a && self.gamma_a < 1.0 && 0.0 < self.gamma_b && self.gamma_b < 1.0) {
            return bad("valve splits must lie in (0, 1)");
        }
        if (0..4).any(|i| !(0.0 <= self.h_min[i] && self.h_min[i] < self.h_max[i])) {
            return bad("level bounds must satisfy 0 <= min < max");
        }
        if (0..2).any(|i| !(0.0 <= self.q_min[i] && self.q_min[i] < self.q_max[i])) {
            return bad("flow bounds must satisfy 0 <= min < max");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: TankParams = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ImcError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn clamp_flows(&self, qa: f64, qb: f64) -> (f64, f64) {
        (
            qa.clamp(self.q_min[0], self.q_max[0]),
            qb.clamp(self.q_min[1], self.q_max[1]),
        )
    }

    pub fn clamp_levels(&self, h: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|i| h[i].clamp(self.h_min[i], self.h_max[i]))
    }
}

/// Tank levels `h₁..h₄`, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TankState {
    pub h: [f64; 4],
}

impl TankState {
    pub fn new(h: [f64; 4]) -> Self {
        TankState { h }
    }
}

/// The right-hand side of the tank equations at `state`.
pub fn derivatives(state: &TankState, qa: f64, qb: f64, p: &TankParams) -> Result<[f64; 4]> {
    for (i, &h) in state.h.iter().enumerate() {
        if !h.is_finite() {
            return Err(ImcError::NonFinite(format!("level h{}", i + 1)));
        }
        if h < 0.0 {
            return Err(ImcError::Domain(format!("negative level h{} = {h:e}", i + 1)));
        }
    }
    Ok(raw_rhs(&state.h, qa, qb, p))
}

#[inline]
fn raw_rhs(h: &[f64; 4], qa: f64, qb: f64, p: &TankParams) -> [f64; 4] {
    let out: [f64; 4] = std::array::from_fn(|i| p.a[i] / p.s * (2.0 * p.g * h[i].max(0.0)).sqrt());
    [
        -out[0] + out[2] + p.gamma_a / p.s * qa,
        -out[1] + out[3] + p.gamma_b / p.s * qb,
        -out[2] + (1.0 - p.gamma_b) / p.s * qb,
        -out[3] + (1.0 - p.gamma_a) / p.s * qa,
    ]
}

/// Right-hand side restricted to the level box: evaluated at the clamped
/// levels, with outward motion at a bound suppressed.
#[inline]
fn projected_rhs(h: &[f64; 4], qa: f64, qb: f64, p: &TankParams) -> [f64; 4] {
    let hc = p.clamp_levels(*h);
    let mut d = raw_rhs(&hc, qa, qb, p);
    for i in 0..4 {
        if (hc[i] >= p.h_max[i] && d[i] > 0.0) || (hc[i] <= p.h_min[i] && d[i] < 0.0) {
            d[i] = 0.0;
        }
    }
    d
}

/// One RK4 step on the projected field. Also reports whether any stage point
/// left the level box, which signals a bound crossing inside the step.
fn rk4(h: &[f64; 4], dt: f64, qa: f64, qb: f64, p: &TankParams) -> ([f64; 4], bool) {
    let add = |x: &[f64; 4], k: &[f64; 4], s: f64| -> [f64; 4] { std::array::from_fn(|i| x[i] + s * k[i]) };
    let outside = |x: &[f64; 4]| (0..4).any(|i| x[i] > p.h_max[i] || x[i] < p.h_min[i]);
    let k1 = projected_rhs(h, qa, qb, p);
    let s2 = add(h, &k1, dt / 2.0);
    let k2 = projected_rhs(&s2, qa, qb, p);
    let s3 = add(h, &k2, dt / 2.0);
    let k3 = projected_rhs(&s3, qa, qb, p);
    let s4 = add(h, &k3, dt);
    let k4 = projected_rhs(&s4, qa, qb, p);
    let out = std::array::from_fn(|i| h[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    let crossed = outside(&s2) || outside(&s3) || outside(&s4) || outside(&out);
    (out, crossed)
}

/// Fixed-step integration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Integrator {
    /// Nominal RK4 substep, seconds.
    pub substep: f64,
    /// Micro-steps used to re-integrate a substep that crosses a level bound
    /// or runs within `low_margin` of the bottom, where `√h` is stiff.
    pub refine: usize,
    /// Meters.
    pub low_margin: f64,
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator {
            substep: 1.0,
            refine: 32,
            low_margin: 0.02,
        }
    }
}

fn near_bottom(h: &[f64; 4], p: &TankParams, low_margin: f64) -> bool {
    (0..4).any(|i| h[i] <= p.h_min[i] + low_margin)
}

/// Advances the plant by `tau_s` seconds with the flows held constant.
/// Flows are clamped to the pump bounds and levels to the level box.
pub fn step(
    state: &TankState,
    qa: f64,
    qb: f64,
    p: &TankParams,
    tau_s: f64,
    integrator: &Integrator,
) -> Result<TankState> {
    if !(tau_s > 0.0 && integrator.substep > 0.0) {
        return Err(ImcError::InvalidArgument(
            "sampling period and substep must be positive".into(),
        ));
    }
    if !qa.is_finite() || !qb.is_finite() {
        return Err(ImcError::NonFinite("pump flow".into()));
    }
    if state.h.iter().any(|h| !h.is_finite()) {
        return Err(ImcError::NonFinite("tank state".into()));
    }
    let (qa, qb) = p.clamp_flows(qa, qb);
    let n = (tau_s / integrator.substep).ceil().max(1.0) as usize;
    let dt = tau_s / n as f64;
    let micro = integrator.refine.max(1);
    let mut h = p.clamp_levels(state.h);
    for _ in 0..n {
        let (trial, crossed) = rk4(&h, dt, qa, qb, p);
        h = if crossed || near_bottom(&trial, p, integrator.low_margin) || near_bottom(&h, p, integrator.low_margin) {
            let mut x = h;
            for _ in 0..micro {
                x = p.clamp_levels(rk4(&x, dt / micro as f64, qa, qb, p).0);
            }
            x
        } else {
            trial
        };
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(ImcError::NonFinite("tank state after integration".into()));
    }
    Ok(TankState { h })
}

/// Steps under constant flows until the largest level change per period is
/// below `tol`, up to `cap` periods.
#[allow(clippy::too_many_arguments)]
pub fn settle(
    initial: &TankState,
    qa: f64,
    qb: f64,
    p: &TankParams,
    tau_s: f64,
    integrator: &Integrator,
    tol: f64,
    cap: usize,
) -> Result<TankState> {
    let mut x = *initial;
    let mut last = f64::INFINITY;
    for _ in 0..cap {
        let next = step(&x, qa, qb, p, tau_s, integrator)?;
        last = (0..4).map(|i| (next.h[i] - x.h[i]).abs()).fold(0.0, f64::max);
        x = next;
        if last < tol {
            return Ok(x);
        }
    }
    Err(ImcError::Unsettled { cap, last_delta: last })
}

pub const CHANNELS: [&str; 6] = ["h1", "h2", "h3", "h4", "qa", "qb"];

/// Per-channel affine maps between physical units and `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub channels: Vec<(String, f64, f64)>,
}

impl Normalizer {
    pub fn from_params(p: &TankParams) -> Self {
        let mut channels = Vec::with_capacity(6);
        for i in 0..4 {
            channels.push((CHANNELS[i].to_string(), p.h_min[i], p.h_max[i]));
        }
        for i in 0..2 {
            channels.push((CHANNELS[4 + i].to_string(), p.q_min[i], p.q_max[i]));
        }
        Normalizer { channels }
    }

    fn range(&self, channel: &str) -> Result<(f64, f64)> {
        self.channels
            .iter()
            .find(|(n, _, _)| n == channel)
            .map(|&(_, lo, hi)| (lo, hi))
            .ok_or_else(|| ImcError::UnknownChannel(channel.to_string()))
    }

    pub fn normalize(&self, value: f64, channel: &str) -> Result<f64> {
        let (lo, hi) = self.range(channel)?;
        Ok(2.0 * (value - lo) / (hi - lo) - 1.0)
    }

    pub fn denormalize(&self, value: f64, channel: &str) -> Result<f64> {
        let (lo, hi) = self.range(channel)?;
        Ok(lo + (value + 1.0) * 0.5 * (hi - lo))
    }

    /// Normalized measured outputs `[h₁, h₂]`.
    pub fn outputs(&self, state: &TankState) -> [f64; 2] {
        [
            self.normalize(state.h[0], "h1").expect("registered"),
            self.normalize(state.h[1], "h2").expect("registered"),
        ]
    }

    /// Normalized outputs back to meters.
    pub fn outputs_to_meters(&self, y: &[f64]) -> [f64; 2] {
        [
            self.denormalize(y[0], "h1").expect("registered"),
            self.denormalize(y[1], "h2").expect("registered"),
        ]
    }

    pub fn meters_to_outputs(&self, h: &[f64]) -> [f64; 2] {
        [
            self.normalize(h[0], "h1").expect("registered"),
            self.normalize(h[1], "h2").expect("registered"),
        ]
    }

    /// Normalized inputs to pump flows, m³/s (not clamped).
    pub fn inputs_to_flows(&self, u: &[f64]) -> (f64, f64) {
        (
            self.denormalize(u[0], "qa").expect("registered"),
            self.denormalize(u[1], "qb").expect("registered"),
        )
    }

    pub fn flows_to_inputs(&self, qa: f64, qb: f64) -> [f64; 2] {
        [
            self.normalize(qa, "qa").expect("registered"),
            self.normalize(qb, "qb").expect("registered"),
        ]
    }
}

/// Normalized measurement `[h₁, h₂]` plus white Gaussian noise of standard
/// deviation `noise_std` in normalized units.
pub fn measure<R: Rng + ?Sized>(state: &TankState, normalizer: &Normalizer, noise_std: f64, rng: &mut R) -> [f64; 2] {
    let mut y = normalizer.outputs(state);
    if noise_std > 0.0 {
        let n = Normal::new(0.0, noise_std).expect("positive std");
        for v in y.iter_mut() {
            *v += n.sample(rng);
        }
    }
    y
}

/// A simulated quadruple tank driven in normalized units.
#[derive(Debug, Clone)]
pub struct QuadTank {
    pub params: TankParams,
    pub normalizer: Normalizer,
    pub integrator: Integrator,
    pub tau_s: f64,
    pub noise_std: f64,
    pub state: TankState,
}

impl QuadTank {
    pub fn new(params: TankParams, tau_s: f64, initial: TankState) -> Result<Self> {
        params.validate()?;
        let normalizer = Normalizer::from_params(&params);
        Ok(QuadTank {
            params,
            normalizer,
            integrator: Integrator::default(),
            tau_s,
            noise_std: 0.0,
            state: initial,
        })
    }

    /// Applies normalized inputs for one sampling period, then measures.
    pub fn advance<R: Rng + ?Sized>(&mut self, u: &[f64], rng: &mut R) -> Result<[f64; 2]> {
        let (qa, qb) = self.normalizer.inputs_to_flows(u);
        self.state = step(&self.state, qa, qb, &self.params, self.tau_s, &self.integrator)?;
        Ok(measure(&self.state, &self.normalizer, self.noise_std, rng))
    }

    /// Levels reached from empty tanks under constant normalized inputs.
    pub fn settled_levels(params: &TankParams, tau_s: f64, u: &[f64]) -> Result<TankState> {
        let nz = Normalizer::from_params(params);
        let (qa, qb) = nz.inputs_to_flows(u);
        settle(
            &TankState::new([0.0; 4]),
            qa,
            qb,
            params,
            tau_s,
            &Integrator::default(),
            1e-12,
            20_000,
        )
    }
}
