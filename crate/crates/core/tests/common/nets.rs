//! Randomized network generators and the behavioral suites shared by the
//! property tests and the acceptance run.

use imc_core::linalg::l2_norm;
use imc_core::{certify, GruNetwork, GruState, OutputActivation, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vec<R: Rng>(rng: &mut R, dim: usize, amp: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-amp..=amp)).collect()
}

/// 1 to 3 layers of width 1 to 6, input and output width 1 to 3, with every
/// parameter (biases included) uniform in `±scale/√fan_in`.
pub fn random_net<R: Rng>(rng: &mut R, activation: OutputActivation, scale: f64) -> GruNetwork {
    let m = rng.random_range(1..=3);
    let p = rng.random_range(1..=3);
    let widths: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=6)).collect();
    let topo = Topology::new(m, widths, p);
    let mut net = GruNetwork::random(&topo, activation, 1.0, rng).unwrap();
    for a in net.arrays_mut() {
        let fan = (a.len() as f64).sqrt().max(1.0);
        for x in a.iter_mut() {
            *x = rng.random_range(-1.0..=1.0) * scale * 2.0 / fan;
        }
    }
    net
}

/// Shrinks every layer's recurrent matrices until the net is certified.
pub fn certify_by_shrinking(mut net: GruNetwork) -> GruNetwork {
    while !certify(&net).certified {
        for (i, a) in net.arrays_mut().into_iter().enumerate() {
            // per layer: W_z W_f W_r U_z U_f U_r b_z b_f b_r
            if i % 9 >= 3 && i % 9 < 6 {
                a.iter_mut().for_each(|x| *x *= 0.8);
            }
        }
    }
    net
}

pub fn random_certified_net<R: Rng>(rng: &mut R) -> GruNetwork {
    let scale = rng.random_range(0.5..3.0);
    certify_by_shrinking(random_net(rng, OutputActivation::Identity, scale))
}

/// One randomized invariant-set case: start in the unit box, take one step
/// with an input in the unit box, report whether the result left the box.
pub fn invariant_violation<R: Rng>(rng: &mut R) -> Option<String> {
    let scale = rng.random_range(0.1..20.0);
    let net = random_net(rng, OutputActivation::Identity, scale);
    let mut xi = random_vec(rng, net.state_dim(), 1.0);
    // corners are the hardest case
    if rng.random_bool(0.3) {
        xi.iter_mut().for_each(|x| *x = x.signum());
    }
    let v = random_vec(rng, net.input_dim(), 1.0);
    let (next, _) = net.step(&net.state_from_vec(xi.clone()).unwrap(), &v).unwrap();
    (!next.in_unit_box()).then(|| format!("ξ = {xi:?}, v = {v:?} -> {:?}", next.as_slice()))
}

/// Starts outside the unit box and checks strict decrease of `‖ξ‖∞` while it
/// exceeds 1, the componentwise envelope, and entry within `cap` steps.
/// Returns the entry step.
pub fn capture_case<R: Rng>(rng: &mut R, cap: usize) -> Result<usize, String> {
    let scale = rng.random_range(0.1..1.0);
    let net = random_net(rng, OutputActivation::Identity, scale);
    let n = net.state_dim();
    let mut xi0 = random_vec(rng, n, 5.0);
    let j = rng.random_range(0..n);
    xi0[j] = rng.random_range(1.01..5.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut state = net.state_from_vec(xi0.clone()).unwrap();
    let mut norm = state.inf_norm();
    for k in 1..=cap {
        let v = random_vec(rng, net.input_dim(), 1.0);
        state = net.step(&state, &v).unwrap().0;
        let next = state.inf_norm();
        if next >= norm {
            return Err(format!("‖ξ‖∞ did not decrease at k = {k}: {norm} -> {next}"));
        }
        for (i, (&x, &x0)) in state.as_slice().iter().zip(&xi0).enumerate() {
            if x.abs() > x0.abs().max(1.0) {
                return Err(format!("component {i} escaped its envelope at k = {k}"));
            }
        }
        if next <= 1.0 {
            return Ok(k);
        }
        norm = next;
    }
    Err(format!("no entry into the unit box within {cap} steps (‖ξ‖∞ = {norm})"))
}

/// `‖Δξ(K)‖₂ / ‖Δξ(0)‖₂` for two trajectories of `net` from distinct states in
/// the unit box under one shared random input sequence.
pub fn contraction_ratio<R: Rng>(rng: &mut R, net: &GruNetwork, steps: usize) -> f64 {
    let n = net.state_dim();
    let mut a = net.state_from_vec(random_vec(rng, n, 1.0)).unwrap();
    let mut b = net.state_from_vec(random_vec(rng, n, 1.0)).unwrap();
    let d0 = diff_norm(&a, &b);
    assert!(d0 > 0.0);
    for _ in 0..steps {
        let v = random_vec(rng, net.input_dim(), 1.0);
        a = net.step(&a, &v).unwrap().0;
        b = net.step(&b, &v).unwrap().0;
    }
    diff_norm(&a, &b) / d0
}

fn diff_norm(a: &GruState, b: &GruState) -> f64 {
    let d: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y).collect();
    l2_norm(&d)
}

/// A certified 2-input, 2-output model with an invertible static map: the
/// first two units follow `tanh(1.2 u)`, the rest is weak random coupling.
pub fn toy_model(seed: u64) -> GruNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = Topology::new(2, vec![4], 2);
    let mut net = GruNetwork::random(&topo, OutputActivation::Identity, 0.3, &mut rng).unwrap();
    {
        let mut a = net.arrays_mut();
        for v in a.iter_mut().flat_map(|x| x.iter_mut()) {
            *v *= 0.1;
        }
        // W_r is 4x2 row-major, U_o is 2x4
        a[2][0] += 1.2;
        a[2][3] += 1.2;
        a[9][0] += 1.0;
        a[9][5] += 1.0;
    }
    let net = certify_by_shrinking(net);
    assert!(certify(&net).certified);
    net
}
