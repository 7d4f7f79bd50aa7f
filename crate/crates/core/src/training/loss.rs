use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ImcError, Result};
use crate::gru::GruNetwork;
use crate::stability::{accumulate_residual_gradient, delta_iss_residual, Penalty};

use super::bptt;
use super::grads::GradientSet;

/// One input/output experiment window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoSequence {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl IoSequence {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Mean squared error ignoring the first `washout` samples:
/// `1/(T−T_w) Σ_{k=T_w}^{T−1} ‖a(k) − b(k)‖²`.
pub fn mse_washout(predicted: &[Vec<f64>], measured: &[Vec<f64>], washout: usize) -> Result<f64> {
    check_pair(predicted, measured, washout)?;
    let n = (predicted.len() - washout) as f64;
    let mut acc = 0.0;
    for (a, b) in predicted[washout..].iter().zip(&measured[washout..]) {
        acc += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(acc / n)
}

fn check_pair(a: &[Vec<f64>], b: &[Vec<f64>], washout: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(ImcError::LengthMismatch(format!(
            "{} predicted samples vs {} measured",
            a.len(),
            b.len()
        )));
    }
    if a.len() <= washout {
        return Err(ImcError::InvalidArgument(format!(
            "sequence length {} must exceed washout {}",
            a.len(),
            washout
        )));
    }
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != y.len() {
            return Err(ImcError::dims("output sample", x.len(), y.len()).at_step(k));
        }
    }
    Ok(())
}

/// Writes `d mse / d a(k)` into `grad` (flattened, `T × p`).
fn mse_grad(predicted: &[f64], measured: &[Vec<f64>], p: usize, washout: usize, grad: &mut [f64]) -> f64 {
    let t_len = measured.len();
    let scale = 1.0 / (t_len - washout) as f64;
    let mut acc = 0.0;
    for k in washout..t_len {
        for j in 0..p {
            let e = predicted[k * p + j] - measured[k][j];
            acc += e * e;
            grad[k * p + j] = 2.0 * scale * e;
        }
    }
    acc * scale
}

/// `Σ_l ρ(ν^l)`, adding its subgradient into `grads` when given.
pub fn penalty_term(net: &GruNetwork, penalty: &Penalty, grads: Option<&mut GradientSet>) -> f64 {
    let mut total = 0.0;
    let mut grads = grads;
    for (l, layer) in net.layers().iter().enumerate() {
        let nu = delta_iss_residual(layer);
        total += penalty.value(nu);
        if let Some(g) = grads.as_deref_mut() {
            accumulate_residual_gradient(layer, penalty.subgradient(nu), &mut g.layers[l]);
        }
    }
    total
}

fn check_inputs(net: &GruNetwork, inputs: &[Vec<f64>], what: &str) -> Result<()> {
    if inputs.is_empty() {
        return Err(ImcError::InvalidArgument(format!("empty {what} sequence")));
    }
    for (k, u) in inputs.iter().enumerate() {
        if u.len() != net.input_dim() {
            return Err(ImcError::dims(format!("{what} input"), net.input_dim(), u.len()).at_step(k));
        }
    }
    Ok(())
}

fn check_initial(net: &GruNetwork, initial: &[f64]) -> Result<()> {
    if initial.len() != net.state_dim() {
        return Err(ImcError::dims("initial state", net.state_dim(), initial.len()));
    }
    Ok(())
}

/// Washout MSE of one sequence and its parameter gradient.
pub fn sequence_mse_grad(
    net: &GruNetwork,
    seq: &IoSequence,
    initial: &[f64],
    washout: usize,
) -> Result<(f64, GradientSet)> {
    check_initial(net, initial)?;
    check_inputs(net, &seq.inputs, "model")?;
    let predicted_dims = vec![vec![0.0; net.output_dim()]; seq.len()];
    check_pair(&predicted_dims, &seq.outputs, washout)?;
    let tape = bptt::forward(net, initial, &seq.inputs);
    let p = net.output_dim();
    let mut dy = vec![0.0; seq.len() * p];
    let mse = mse_grad(tape.flat_outputs(), &seq.outputs, p, washout, &mut dy);
    let mut g = GradientSet::zeros_like(net);
    bptt::backward(net, &tape, &dy, &mut g, false);
    Ok((mse, g))
}

/// Model loss `Σ_batch MSE + Σ_l ρ(ν^l)` and its gradient.
///
/// `initial[i]` is the starting state of `batch[i]`. Per-sequence terms are
/// evaluated in parallel and reduced in batch order, so the result does not
/// depend on the worker count.
pub fn model_loss(
    net: &GruNetwork,
    batch: &[&IoSequence],
    initial: &[Vec<f64>],
    washout: usize,
    penalty: &Penalty,
) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(ImcError::InvalidArgument("empty batch".into()));
    }
    if initial.len() != batch.len() {
        return Err(ImcError::LengthMismatch(format!(
            "{} initial states for {} sequences",
            initial.len(),
            batch.len()
        )));
    }
    let parts: Vec<Result<(f64, GradientSet)>> = batch
        .par_iter()
        .zip(initial.par_iter())
        .map(|(seq, x0)| sequence_mse_grad(net, seq, x0, washout))
        .collect();
    reduce(net, parts, penalty)
}

fn reduce(net: &GruNetwork, parts: Vec<Result<(f64, GradientSet)>>, penalty: &Penalty) -> Result<(f64, GradientSet)> {
    let mut total = 0.0;
    let mut grads = GradientSet::zeros_like(net);
    for part in parts {
        let (l, g) = part?;
        total += l;
        grads.add_assign(&g);
    }
    total += penalty_term(net, penalty, Some(&mut grads));
    Ok((total, grads))
}

fn check_pair_dims(ctrl: &GruNetwork, model: &GruNetwork) -> Result<()> {
    if ctrl.output_dim() != model.input_dim() {
        return Err(ImcError::dims(
            "controller output vs model input",
            model.input_dim(),
            ctrl.output_dim(),
        ));
    }
    if ctrl.input_dim() != model.output_dim() {
        return Err(ImcError::dims(
            "controller input vs model output",
            model.output_dim(),
            ctrl.input_dim(),
        ));
    }
    Ok(())
}

/// Nominal tracking MSE of the series `reference → ctrl → model` and its
/// gradient with respect to the controller only. Both networks start from
/// the given states.
pub fn tracking_mse_grad(
    ctrl: &GruNetwork,
    model: &GruNetwork,
    reference: &[Vec<f64>],
    ctrl_initial: &[f64],
    model_initial: &[f64],
    washout: usize,
) -> Result<(f64, GradientSet)> {
    check_pair_dims(ctrl, model)?;
    check_initial(ctrl, ctrl_initial)?;
    check_initial(model, model_initial)?;
    check_inputs(ctrl, reference, "reference")?;
    if reference.len() <= washout {
        return Err(ImcError::InvalidArgument(format!(
            "sequence length {} must exceed washout {}",
            reference.len(),
            washout
        )));
    }
    let c_tape = bptt::forward(ctrl, ctrl_initial, reference);
    let u = c_tape.outputs();
    let m_tape = bptt::forward(model, model_initial, &u);
    let p = model.output_dim();
    let mut dy = vec![0.0; reference.len() * p];
    let mse = mse_grad(m_tape.flat_outputs(), reference, p, washout, &mut dy);
    let mut scratch = GradientSet::zeros_like(model);
    let du = bptt::backward(model, &m_tape, &dy, &mut scratch, true).expect("input gradient requested");
    let mut g = GradientSet::zeros_like(ctrl);
    bptt::backward(ctrl, &c_tape, &du, &mut g, false);
    Ok((mse, g))
}

/// Controller loss `Σ_batch MSE(y_m, ỹ⁰) + Σ_l ρ(ν^l(ctrl))` with zero
/// initial states for both networks; the model only receives reads.
pub fn controller_loss(
    ctrl: &GruNetwork,
    model: &GruNetwork,
    batch: &[&[Vec<f64>]],
    washout: usize,
    penalty: &Penalty,
) -> Result<(f64, GradientSet)> {
    check_pair_dims(ctrl, model)?;
    if batch.is_empty() {
        return Err(ImcError::InvalidArgument("empty batch".into()));
    }
    let xc = vec![0.0; ctrl.state_dim()];
    let xm = vec![0.0; model.state_dim()];
    let parts: Vec<Result<(f64, GradientSet)>> = batch
        .par_iter()
        .map(|r| tracking_mse_grad(ctrl, model, r, &xc, &xm, washout))
        .collect();
    reduce(ctrl, parts, penalty)
}

/// Rolls `reference → ctrl → model` from zero states and returns `(u_c, y_m)`.
pub fn rollout_pair(
    ctrl: &GruNetwork,
    model: &GruNetwork,
    reference: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    check_pair_dims(ctrl, model)?;
    let u = ctrl.simulate_outputs(&vec![0.0; ctrl.state_dim()], reference)?;
    let y = model.simulate_outputs(&vec![0.0; model.state_dim()], &u)?;
    Ok((u, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_have_zero_error() {
        let a = vec![vec![0.3, -0.2]; 10];
        assert_eq!(mse_washout(&a, &a, 3).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_p_delta_squared() {
        let d = 0.125;
        let a: Vec<Vec<f64>> = (0..20).map(|k| vec![k as f64 * 0.01, -0.5]).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|x| x + d).collect()).collect();
        let v = mse_washout(&a, &b, 5).unwrap();
        assert!((v - 2.0 * d * d).abs() < 1e-15);
    }

    #[test]
    fn washout_masks_early_samples() {
        let a = vec![vec![0.1, 0.2]; 30];
        let mut b = a.clone();
        let clean = mse_washout(&a, &b, 7).unwrap();
        for row in b.iter_mut().take(7) {
            row[0] = 1e6;
            row[1] = f64::NAN;
        }
        assert_eq!(mse_washout(&a, &b, 7).unwrap(), clean);
    }

    #[test]
    fn mse_rejects_bad_lengths() {
        let a = vec![vec![0.0]; 5];
        assert!(matches!(mse_washout(&a, &a[..4], 0), Err(ImcError::LengthMismatch(_))));
        assert!(mse_washout(&a, &a, 5).is_err());
    }
}
