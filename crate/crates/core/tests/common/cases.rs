//! Gradient-oracle instances and the integrator step-halving check, shared by
//! the per-module tests and the acceptance run.

use super::dd::Dd;
use super::{central_differences_dd, lift, lift_vec, oracle_mse, oracle_penalty, relative_error, OracleNet};
use imc_core::training::{controller_loss, flatten_params, model_loss, unflatten_params, IoSequence};
use imc_core::{GruNetwork, OutputActivation, Penalty, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;
pub const T_S: usize = 20;
const WASHOUT: usize = 5;

fn random_seq(rng: &mut ChaCha8Rng, t: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// M=1, n=3, m=2 network with every array nonzero. Odd seeds keep the raw
/// scale (penalty active), even seeds shrink it (penalty inactive).
fn tiny_net(rng: &mut ChaCha8Rng, activation: OutputActivation, penalty_active: bool) -> GruNetwork {
    let topo = Topology::new(2, vec![3], 2);
    let mut net = GruNetwork::random(&topo, activation, 1.0, rng).unwrap();
    let shrink = if penalty_active { 1.0 } else { 0.2 };
    let mut flat = flatten_params(&net);
    for x in flat.iter_mut() {
        if *x == 0.0 {
            *x = rng.random_range(-0.3..0.3);
        }
        *x *= shrink;
    }
    unflatten_params(&mut net, &flat);
    net
}

fn max_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &f)| relative_error(a, f))
        .fold(0.0, f64::max)
}

pub fn model_case(seed: u64) -> f64 {
    let pen = Penalty::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = tiny_net(&mut rng, OutputActivation::Identity, seed % 2 == 1);
    let seqs: Vec<IoSequence> = (0..2)
        .map(|_| IoSequence {
            inputs: random_seq(&mut rng, T_S, 2),
            outputs: random_seq(&mut rng, T_S, 2),
        })
        .collect();
    let inits: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let batch: Vec<&IoSequence> = seqs.iter().collect();
    let (_, g) = model_loss(&net, &batch, &inits, WASHOUT, &pen).unwrap();

    let lifted: Vec<(Vec<Vec<Dd>>, Vec<Vec<Dd>>, Vec<Dd>)> = seqs
        .iter()
        .zip(&inits)
        .map(|(s, x0)| (lift(&s.inputs), lift(&s.outputs), lift_vec(x0)))
        .collect();
    let fd = central_differences_dd(&net, H, |p| {
        let o = OracleNet::<Dd>::from_flat(&net, p);
        let mut l = Dd::ZERO;
        for (u, y, x0) in &lifted {
            l = l + oracle_mse(&o.outputs(x0, u), y, WASHOUT);
        }
        l + oracle_penalty(&o, pen.target, pen.slope)
    });
    max_relative_error(&g.to_flat(), &fd)
}

pub fn controller_case(seed: u64) -> f64 {
    let pen = Penalty::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
    let ctrl = tiny_net(&mut rng, OutputActivation::Tanh, seed % 2 == 1);
    let model = tiny_net(&mut rng, OutputActivation::Identity, false);
    let refs: Vec<Vec<Vec<f64>>> = (0..2).map(|_| random_seq(&mut rng, T_S, 2)).collect();
    let batch: Vec<&[Vec<f64>]> = refs.iter().map(|r| r.as_slice()).collect();
    let (_, g) = controller_loss(&ctrl, &model, &batch, WASHOUT, &pen).unwrap();

    let om = OracleNet::<Dd>::from_net(&model);
    let lifted: Vec<Vec<Vec<Dd>>> = refs.iter().map(|r| lift(r)).collect();
    let zero = vec![Dd::ZERO; 3];
    let fd = central_differences_dd(&ctrl, H, |p| {
        let oc = OracleNet::<Dd>::from_flat(&ctrl, p);
        let mut l = Dd::ZERO;
        for r in &lifted {
            let u = oc.outputs(&zero, r);
            l = l + oracle_mse(&om.outputs(&zero, &u), r, WASHOUT);
        }
        l + oracle_penalty(&oc, pen.target, pen.slope)
    });
    max_relative_error(&g.to_flat(), &fd)
}

pub mod plant {
    use imc_core::plant::{step, Integrator, TankParams, TankState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const TAU: f64 = 25.0;

    pub fn random_point(rng: &mut ChaCha8Rng, p: &TankParams) -> (TankState, f64, f64) {
        let h = std::array::from_fn(|i| rng.random_range(p.h_min[i]..=p.h_max[i]));
        let qa = rng.random_range(p.q_min[0]..=p.q_max[0]);
        let qb = rng.random_range(p.q_min[1]..=p.q_max[1]);
        (TankState::new(h), qa, qb)
    }

    pub fn max_diff(a: &TankState, b: &TankState) -> f64 {
        (0..4).map(|i| (a.h[i] - b.h[i]).abs()).fold(0.0, f64::max)
    }

    pub fn worst_step_halving_error(points: usize, seed: u64) -> f64 {
        let p = TankParams::default();
        let coarse = Integrator::default();
        let fine = Integrator {
            substep: coarse.substep / 2.0,
            ..coarse
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..points {
            let (s, qa, qb) = random_point(&mut rng, &p);
            let a = step(&s, qa, qb, &p, TAU, &coarse).unwrap();
            let b = step(&s, qa, qb, &p, TAU, &fine).unwrap();
            worst = worst.max(max_diff(&a, &b));
        }
        worst
    }

    /// Closed-form steady state of the four tank equations.
    pub fn analytic_equilibrium(p: &TankParams, qa: f64, qb: f64) -> [f64; 4] {
        let two_g = 2.0 * p.g;
        let h4 = ((1.0 - p.gamma_a) * qa / p.a[3]).powi(2) / two_g;
        let h3 = ((1.0 - p.gamma_b) * qb / p.a[2]).powi(2) / two_g;
        let h1 = ((p.gamma_a * qa + p.a[2] * (two_g * h3).sqrt()) / p.a[0]).powi(2) / two_g;
        let h2 = ((p.gamma_b * qb + p.a[3] * (two_g * h4).sqrt()) / p.a[1]).powi(2) / two_g;
        [h1, h2, h3, h4]
    }
}
