//! Steady states of a δISS model: `ξ_s = f(ξ_s, u_s)`, `y_s = g(ξ_s)`.
//!
//! Fixed points are found by simulating under a constant input until the
//! state stops moving; the input matching a requested output is found by a
//! grid warm start followed by Nelder–Mead on the settled output mismatch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ImcError, Result};
use crate::gru::{GruNetwork, Workspace};
use crate::linalg::{inf_norm_vec, l2_norm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquilibriumConfig {
    /// Settle threshold on `‖ξ(k+1) − ξ(k)‖∞`.
    pub settle_tol: f64,
    pub settle_cap: usize,
    /// Success threshold on `‖g(ξ_s) − y⁰‖₂`.
    pub tol_y: f64,
    /// Warm-start grid points per input channel.
    pub grid: usize,
    /// Nearest warm-start samples tried in turn before giving up.
    pub starts: usize,
    /// Objective evaluations allowed in each local search.
    pub budget: usize,
    /// Local search stops once the simplex is this small in every coordinate.
    pub x_tol: f64,
}

impl Default for EquilibriumConfig {
    fn default() -> Self {
        EquilibriumConfig {
            settle_tol: 1e-9,
            settle_cap: 50_000,
            tol_y: 1e-3,
            grid: 5,
            starts: 3,
            budget: 600,
            x_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub u_s: Vec<f64>,
    pub xi_s: Vec<f64>,
    pub y_s: Vec<f64>,
    /// `‖ξ_s − f(ξ_s, u_s)‖∞`.
    pub state_residual: f64,
    /// `‖y_s − g(ξ_s)‖∞`.
    pub output_residual: f64,
    /// `‖y_s − y⁰‖₂` when solved for a target, otherwise 0.
    pub score: f64,
}

/// Iterates the model under constant `u` from `xi0` until the state settles.
/// Returns the settled state and the number of steps taken.
pub fn settle_model(model: &GruNetwork, u: &[f64], xi0: &[f64], tol: f64, cap: usize) -> Result<(Vec<f64>, usize)> {
    if u.len() != model.input_dim() {
        return Err(ImcError::dims("equilibrium input", model.input_dim(), u.len()));
    }
    if xi0.len() != model.state_dim() {
        return Err(ImcError::dims(
            "equilibrium initial state",
            model.state_dim(),
            xi0.len(),
        ));
    }
    let mut ws = Workspace::new(model);
    let mut xi = xi0.to_vec();
    let mut prev = xi.clone();
    let mut y = vec![0.0; model.output_dim()];
    let mut last = f64::INFINITY;
    for k in 1..=cap {
        model.step_in_place(&mut xi, u, &mut y, &mut ws);
        last = xi.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if !last.is_finite() {
            return Err(ImcError::NonFinite("model state while settling".into()));
        }
        if last < tol {
            return Ok((xi, k));
        }
        prev.copy_from_slice(&xi);
    }
    Err(ImcError::Unsettled { cap, last_delta: last })
}

fn finish(model: &GruNetwork, u: Vec<f64>, xi: Vec<f64>, target: Option<&[f64]>) -> Equilibrium {
    let state = model
        .state_from_vec(xi.clone())
        .expect("settled state has model dimension");
    let (next, _) = model.step(&state, &u).expect("dimensions checked while settling");
    let state_residual = next
        .as_slice()
        .iter()
        .zip(&xi)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let y_s = model.output_of(&state);
    let score = target.map_or(0.0, |t| mismatch(&y_s, t));
    Equilibrium {
        u_s: u,
        xi_s: xi,
        output_residual: 0.0,
        y_s,
        state_residual,
        score,
    }
}

fn mismatch(y: &[f64], target: &[f64]) -> f64 {
    let d: Vec<f64> = y.iter().zip(target).map(|(a, b)| a - b).collect();
    l2_norm(&d)
}

/// The equilibrium reached under constant `u` from the zero state.
pub fn model_equilibrium(model: &GruNetwork, u: &[f64], cfg: &EquilibriumConfig) -> Result<Equilibrium> {
    let (xi, _) = settle_model(model, u, &vec![0.0; model.state_dim()], cfg.settle_tol, cfg.settle_cap)?;
    Ok(finish(model, u.to_vec(), xi, None))
}

/// Every point of a `grid^m` lattice on `[-1, 1]^m`, first channel slowest.
pub fn input_grid(m: usize, grid: usize) -> Vec<Vec<f64>> {
    let g = grid.max(1);
    let coord = |j: usize| {
        if g == 1 {
            0.0
        } else {
            -1.0 + 2.0 * j as f64 / (g - 1) as f64
        }
    };
    let total = g.pow(m as u32);
    (0..total)
        .map(|mut idx| {
            let mut u = vec![0.0; m];
            for c in (0..m).rev() {
                u[c] = coord(idx % g);
                idx /= g;
            }
            u
        })
        .collect()
}

fn check_target(model: &GruNetwork, y0: &[f64]) -> Result<()> {
    if y0.len() != model.output_dim() {
        return Err(ImcError::dims("equilibrium target", model.output_dim(), y0.len()));
    }
    if y0.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
        return Err(ImcError::EquilibriumNotFound {
            best_score: f64::INFINITY,
            tol: f64::NAN,
        });
    }
    Ok(())
}

/// Finds `u_s ∈ [-1, 1]^m` whose equilibrium output matches `y0`: a grid
/// warm start, then a local search from the best grid point.
pub fn solve_equilibrium(model: &GruNetwork, y0: &[f64], cfg: &EquilibriumConfig) -> Result<Equilibrium> {
    check_target(model, y0)?;
    let candidates = input_grid(model.input_dim(), cfg.grid);
    let settled: Vec<Equilibrium> = candidates
        .into_par_iter()
        .map(|u| model_equilibrium(model, &u, cfg))
        .collect::<Result<_>>()?;
    let warm: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = settled.into_iter().map(|e| (e.u_s, e.xi_s, e.y_s)).collect();
    solve_from_samples(model, y0, &warm, cfg)
}

/// Local search seeded by the settled samples whose outputs are closest to
/// `y0`, nearest first; the first converged search wins. Each sample is
/// `(u_s, ξ_s, y_s)`.
pub fn solve_from_samples(
    model: &GruNetwork,
    y0: &[f64],
    samples: &[(Vec<f64>, Vec<f64>, Vec<f64>)],
    cfg: &EquilibriumConfig,
) -> Result<Equilibrium> {
    check_target(model, y0)?;
    if samples.is_empty() {
        return Err(ImcError::InvalidArgument("no warm-start samples".into()));
    }
    let mut order: Vec<&(Vec<f64>, Vec<f64>, Vec<f64>)> = samples.iter().collect();
    order.sort_by(|a, b| mismatch(&a.2, y0).total_cmp(&mismatch(&b.2, y0)));
    let g = cfg.grid.max(2);
    let step = 1.0 / (g - 1) as f64;
    let mut closest = f64::INFINITY;
    for start in order.into_iter().take(cfg.starts.max(1)) {
        match refine(model, y0, &start.0, &start.1, step, cfg) {
            Err(ImcError::EquilibriumNotFound { best_score, .. }) => closest = closest.min(best_score),
            done => return done,
        }
    }
    Err(ImcError::EquilibriumNotFound {
        best_score: closest,
        tol: cfg.tol_y,
    })
}

/// Local search from a given input, settling the first evaluation from zero.
pub fn solve_equilibrium_from(
    model: &GruNetwork,
    y0: &[f64],
    u_start: &[f64],
    cfg: &EquilibriumConfig,
) -> Result<Equilibrium> {
    check_target(model, y0)?;
    if u_start.len() != model.input_dim() {
        return Err(ImcError::dims("equilibrium start", model.input_dim(), u_start.len()));
    }
    refine(model, y0, u_start, &vec![0.0; model.state_dim()], 0.25, cfg)
}

fn refine(
    model: &GruNetwork,
    y0: &[f64],
    u_start: &[f64],
    xi_start: &[f64],
    step: f64,
    cfg: &EquilibriumConfig,
) -> Result<Equilibrium> {
    let mut warm = xi_start.to_vec();
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut failure = None;
    let mut objective = |u: &[f64], warm: &mut Vec<f64>, best: &mut Option<(f64, Vec<f64>, Vec<f64>)>| -> f64 {
        let clamped: Vec<f64> = u.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let outside: f64 = u.iter().zip(&clamped).map(|(a, b)| (a - b).abs()).sum();
        match settle_model(model, &clamped, warm, cfg.settle_tol, cfg.settle_cap) {
            Ok((xi, _)) => {
                let state = model.state_from_vec(xi.clone()).expect("model dimension");
                let score = mismatch(&model.output_of(&state), y0);
                if best.as_ref().is_none_or(|b| score < b.0) {
                    *best = Some((score, clamped, xi.clone()));
                    *warm = xi;
                }
                score + outside
            }
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        }
    };
    let mut f = |u: &[f64]| objective(u, &mut warm, &mut best);
    // restart from the incumbent until a restart stops improving it
    let mut x = u_start.to_vec();
    let mut used = 0;
    let mut last = f64::INFINITY;
    while used < cfg.budget {
        let (next, value, evals) = nelder_mead(&mut f, &x, step, cfg.budget - used, cfg.x_tol);
        used += evals;
        if !(value < last - 1e-15) {
            break;
        }
        x = next;
        last = value;
    }
    let Some((score, u, xi)) = best else {
        return Err(failure.unwrap_or(ImcError::EquilibriumNotFound {
            best_score: f64::INFINITY,
            tol: cfg.tol_y,
        }));
    };
    if score >= cfg.tol_y {
        return Err(ImcError::EquilibriumNotFound {
            best_score: score,
            tol: cfg.tol_y,
        });
    }
    // settle once more from the best state so the residuals refer to it
    let (xi, _) = settle_model(model, &u, &xi, cfg.settle_tol, cfg.settle_cap)?;
    Ok(finish(model, u, xi, Some(y0)))
}

/// Minimizes `f` with the standard Nelder–Mead moves (reflection 1,
/// expansion 2, contraction ½, shrink ½). Stops after `budget` evaluations or
/// when every vertex is within `x_tol` of the best one in every coordinate.
/// Returns the best vertex, its value and the evaluations used.
fn nelder_mead(
    f: &mut impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    budget: usize,
    x_tol: f64,
) -> (Vec<f64>, f64, usize) {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut v = x0.to_vec();
        // step inward so the start simplex stays inside the box
        v[i] += if v[i] + step <= 1.0 { step } else { -step };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut evals = n + 1;
    while evals < budget {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        let spread = simplex[1..]
            .iter()
            .map(|v| inf_norm_vec(&v.iter().zip(&simplex[0]).map(|(a, b)| a - b).collect::<Vec<_>>()))
            .fold(0.0, f64::max);
        if spread < x_tol {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (c - w)).collect() };
        let xr = along(1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < values[0] {
            let xe = along(2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            // outside contraction when the reflection helped at all
            let xc = if fr < values[n] { along(0.5) } else { along(-0.5) };
            let fc = f(&xc);
            evals += 1;
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    let shrunk: Vec<f64> = simplex[i]
                        .iter()
                        .zip(&simplex[0])
                        .map(|(v, b)| b + 0.5 * (v - b))
                        .collect();
                    values[i] = f(&shrunk);
                    simplex[i] = shrunk;
                }
                evals += n;
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    (simplex[best].clone(), values[best], evals)
}
