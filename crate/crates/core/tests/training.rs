use imc_core::stability::delta_iss_residual;
use imc_core::training::{
    controller_loss, model_loss, mse_washout, penalty_term, train_controller, train_model, GradientSet, IoSequence,
    RmsProp, RmsPropConfig, TrainConfig,
};
use imc_core::{certify, GruNetwork, OutputActivation, Penalty, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_seq(rng: &mut ChaCha8Rng, t: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Sequences produced by a hidden "teacher" GRU so the student can fit them.
fn teacher_data(seed: u64, count: usize, len: usize) -> Vec<IoSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = GruNetwork::random(&Topology::new(2, vec![4], 2), OutputActivation::Identity, 0.5, &mut rng).unwrap();
    (0..count)
        .map(|_| {
            let inputs = random_seq(&mut rng, len, 2);
            let outputs = teacher.simulate_outputs(&[0.0; 4], &inputs).unwrap();
            IoSequence { inputs, outputs }
        })
        .collect()
}

#[test]
fn zero_net_model_loss_is_bias_constant() {
    let topo = Topology::new(2, vec![3, 2], 2);
    let mut net = GruNetwork::zeros(&topo, OutputActivation::Identity).unwrap();
    net.arrays_mut().last_mut().unwrap().copy_from_slice(&[0.3, -0.4]);
    let seq = IoSequence {
        inputs: vec![vec![0.0; 2]; 12],
        outputs: vec![vec![0.0; 2]; 12],
    };
    let batch = vec![&seq, &seq, &seq];
    let inits = vec![vec![0.0; 5]; 3];
    let (loss, _) = model_loss(&net, &batch, &inits, 4, &Penalty::default()).unwrap();
    assert!((loss - 3.0 * (0.09 + 0.16)).abs() < 1e-15);
}

#[test]
fn penalty_only_gradient_touches_only_unstable_recurrent_arrays() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let topo = Topology::new(2, vec![4, 3], 2);
    let mut net = GruNetwork::random(&topo, OutputActivation::Identity, 0.2, &mut rng).unwrap();
    // layer 0: recurrent weights only, large enough to violate the condition
    {
        let arrays = net.arrays_mut();
        for (i, a) in arrays.into_iter().enumerate().take(9) {
            for x in a.iter_mut() {
                *x = if (3..6).contains(&i) {
                    rng.random_range(-1.5..1.5)
                } else {
                    0.0
                };
            }
        }
    }
    let pen = Penalty::default();
    assert!(delta_iss_residual(&net.layers()[0]) > pen.target);
    assert!(delta_iss_residual(&net.layers()[1]) < pen.target);

    // perfect fit: targets are the network's own outputs from the same state
    let inputs = random_seq(&mut rng, 30, 2);
    let x0: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
    let outputs = net.simulate_outputs(&x0, &inputs).unwrap();
    let seq = IoSequence { inputs, outputs };
    let (loss, g) = model_loss(&net, &[&seq], &[x0], 10, &pen).unwrap();
    assert!(loss > 0.0);

    let arrays = g.arrays();
    for (i, a) in arrays.iter().enumerate() {
        let nonzero = a.iter().any(|&x| x != 0.0);
        if (3..6).contains(&i) {
            continue;
        }
        assert!(!nonzero, "array {i} has a nonzero gradient");
    }
    assert!(arrays[3..6].iter().any(|a| a.iter().any(|&x| x != 0.0)));
}

#[test]
fn controller_loss_with_zero_controller_is_two_simulations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = GruNetwork::random(&Topology::new(2, vec![3], 2), OutputActivation::Identity, 0.5, &mut rng).unwrap();
    let mut ctrl = GruNetwork::zeros(&Topology::new(2, vec![3, 3], 2), OutputActivation::Tanh).unwrap();
    ctrl.arrays_mut().last_mut().unwrap().copy_from_slice(&[0.4, -0.7]);
    let refs = random_seq(&mut rng, 40, 2);

    let (loss, _) = controller_loss(&ctrl, &model, &[refs.as_slice()], 8, &Penalty::default()).unwrap();
    let u = vec![vec![0.4f64.tanh(), (-0.7f64).tanh()]; 40];
    let y = model.simulate_outputs(&[0.0; 3], &u).unwrap();
    let expected = mse_washout(&y, &refs, 8).unwrap();
    assert_eq!(loss, expected);
    assert_eq!(penalty_term(&ctrl, &Penalty::default(), None), 0.0);
}

#[test]
fn penalty_drives_residuals_below_target_within_500_steps() {
    let pen = Penalty::default();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = GruNetwork::random(
            &Topology::new(2, vec![10, 10], 2),
            OutputActivation::Identity,
            0.5,
            &mut rng,
        )
        .unwrap();
        assert!(certify(&net).residuals().iter().all(|&nu| nu > 1.0));
        let mut opt = RmsProp::new(&net, RmsPropConfig::default());
        let mut steps = 0;
        while steps < 500 && !certify(&net).meets(pen.target) {
            let mut g = GradientSet::zeros_like(&net);
            penalty_term(&net, &pen, Some(&mut g));
            opt.step(&mut net, &g);
            steps += 1;
        }
        let nu = certify(&net).residuals();
        assert!(
            nu.iter().all(|&v| v <= pen.target),
            "seed {seed}: {nu:?} after {steps} steps"
        );
    }
}

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        washout: 5,
        max_epochs: 8,
        patience: 50,
        seed,
        optimizer: RmsPropConfig {
            learning_rate: 5e-3,
            ..RmsPropConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn student(seed: u64) -> GruNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GruNetwork::random(&Topology::new(2, vec![5], 2), OutputActivation::Identity, 0.3, &mut rng).unwrap()
}

#[test]
fn training_is_deterministic_across_worker_counts() {
    let data = teacher_data(1, 12, 40);
    let (tr, va) = data.split_at(9);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train_model(student(2), tr, va, &small_cfg(7), |_| {}).unwrap())
    };
    let (n1, r1) = run(1);
    let (n2, r2) = run(1);
    let (n4, r4) = run(4);
    assert_eq!(r1, r2);
    assert_eq!(r1, r4);
    assert_eq!(n1, n2);
    assert_eq!(n1, n4);
    let losses = r1.train_losses();
    assert!(losses.iter().all(|l| l.is_finite()));
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(losses[0] > min);
}

#[test]
fn model_training_reduces_validation_error() {
    let data = teacher_data(5, 16, 60);
    let (tr, va) = data.split_at(12);
    let cfg = TrainConfig {
        max_epochs: 40,
        ..small_cfg(3)
    };
    let (_, report) = train_model(student(9), tr, va, &cfg, |_| {}).unwrap();
    assert!(report.best_validation_mse < 0.5 * report.initial_validation_mse);
    assert!(report.certificate.meets(cfg.penalty.target));
}

#[test]
fn controller_training_leaves_model_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = GruNetwork::random(&Topology::new(2, vec![4], 2), OutputActivation::Identity, 0.3, &mut rng).unwrap();
    let snapshot = model.clone();
    let refs: Vec<Vec<Vec<f64>>> = (0..8)
        .map(|_| {
            let target: Vec<f64> = (0..2).map(|_| rng.random_range(-0.2..0.2)).collect();
            vec![target; 40]
        })
        .collect();
    let ctrl = GruNetwork::random(&Topology::new(2, vec![3], 2), OutputActivation::Tanh, 0.3, &mut rng).unwrap();
    let (_, report) = train_controller(ctrl, &model, &refs[..6], &refs[6..], &small_cfg(4), |_| {}).unwrap();
    assert_eq!(model, snapshot);
    assert!(report.epochs.iter().all(|e| e.validation_mse.is_finite()));
}
