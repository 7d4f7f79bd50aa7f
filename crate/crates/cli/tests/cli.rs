use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn imc(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_imc"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMOKE: [&str; 3] = ["--preset", "smoke", "--deterministic"];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    imc(&refs, &[])
}

#[test]
fn stages_chain_and_repeat_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (io, io2, model, ctrl, refs) = (d("io"), d("io2"), d("model.json"), d("ctrl.json"), d("refs"));
    let schedule = d("refs/schedule.ndjson");
    let stage = |name: &str, args: &[&str]| {
        let out = run(with(&[name], &[&SMOKE[..], args].concat()));
        assert_eq!(code(&out), 0, "{name}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };

    stage("gen-data", &["--out", &io]);
    stage("gen-data", &["--out", &io2]);
    for f in ["train.ndjson", "validation.ndjson", "test.ndjson", "meta.json"] {
        assert_eq!(
            fs::read(Path::new(&io).join(f)).unwrap(),
            fs::read(Path::new(&io2).join(f)).unwrap(),
            "{f}"
        );
    }

    let out = stage("train-model", &["--data", &io, "--out", &model]);
    assert!(Path::new(&d("model.report.json")).exists());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model epoch"));

    let out = imc(&["certify", &model], &[]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("layer 1: nu = -") && text.contains("layer 2: nu = -") && text.contains("CERTIFIED"));

    stage("gen-refs", &["--model", &model, "--out", &refs]);
    assert!(Path::new(&schedule).exists() && Path::new(&d("refs/feasible.json")).exists());

    stage(
        "train-controller",
        &["--model", &model, "--refs", &refs, "--out", &ctrl],
    );

    let (log, again) = (d("run.csv"), d("again.csv"));
    for out in [&log, &again] {
        stage(
            "simulate",
            &[
                "--model",
                &model,
                "--ctrl",
                &ctrl,
                "--schedule",
                &schedule,
                "--out",
                out,
            ],
        );
    }
    assert_eq!(fs::read(&log).unwrap(), fs::read(&again).unwrap());
    let sidecar = fs::read_to_string(d("run.json")).unwrap();
    assert!(sidecar.contains("\"sha256:") && sidecar.contains("\"ctrl.json\""));

    let report_path = d("report.json");
    let args = [
        "--log",
        &log,
        "--schedule",
        &schedule,
        "--out",
        &report_path,
        "--model",
        &model,
        "--data",
        &io,
        "--ctrl",
        &ctrl,
        "--refs",
        &refs,
    ];
    let out = stage("evaluate", &args);
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(
        table.contains("eps_tr [m]") && table.contains("FIT [%]") && !table.contains("n/a"),
        "{table}"
    );
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["steady_state"]["max_m"].as_f64().unwrap() >= report["steady_state"]["mean_m"].as_f64().unwrap());
}

#[test]
fn pipeline_reruns_reproduce_the_manifest_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let manifests: Vec<serde_json::Value> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let res = run(with(
                &["pipeline"],
                &[&SMOKE[..], &["--seed", "3", "--out", p(&out)]].concat(),
            ));
            assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
            serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
        })
        .collect();
    assert_eq!(manifests[0]["artifacts"], manifests[1]["artifacts"]);
    assert_eq!(manifests[0]["config"]["io_data"]["seed"], 21);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out = dir.path().join("io");
    fs::write(&cfg, r#"{"version": 1, "io_data": {"windowz": 3}}"#).unwrap();
    assert_eq!(code(&imc(&["gen-data", "--config", p(&cfg), "--out", p(&out)], &[])), 2);
    fs::write(&cfg, r#"{"version": 7}"#).unwrap();
    assert_eq!(code(&imc(&["gen-data", "--config", p(&cfg), "--out", p(&out)], &[])), 2);
    let typo = [("IMC__io_data__widows", "3")];
    assert_eq!(
        code(&imc(&["gen-data", "--preset", "smoke", "--out", p(&out)], &typo)),
        2
    );
    assert_eq!(code(&imc(&["gen-data", "--preset", "huge", "--out", p(&out)], &[])), 2);
    assert_eq!(code(&imc(&["simulate"], &[])), 2);
    assert!(!out.exists());

    fs::write(
        &cfg,
        r#"{"version": 1, "io_data": {"windows": 3, "validation_windows": 1, "test_len": 60}}"#,
    )
    .unwrap();
    assert_eq!(code(&imc(&["gen-data", "--config", p(&cfg), "--out", p(&out)], &[])), 0);
    let meta = fs::read_to_string(out.join("meta.json")).unwrap();
    assert!(meta.contains("\"windows\": 3"));
}

#[test]
fn certification_and_simulation_faults_have_their_codes() {
    use imc_core::weights::{self, NetworkRole};
    use imc_core::{GruNetwork, OutputActivation, Topology};
    use rand::SeedableRng;

    let dir = tempfile::tempdir().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let hot = GruNetwork::random(
        &Topology::new(2, vec![4], 2),
        OutputActivation::Identity,
        20.0,
        &mut rng,
    )
    .unwrap();
    let hot_path = dir.path().join("hot.json");
    weights::save(&hot, NetworkRole::Model, &hot_path).unwrap();
    let out = imc(&["certify", p(&hot_path)], &[]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("NOT CERTIFIED"));

    let mut model =
        GruNetwork::random(&Topology::new(2, vec![3], 2), OutputActivation::Identity, 0.1, &mut rng).unwrap();
    let n = model.arrays().len();
    for a in &mut model.arrays_mut()[n - 2..] {
        a.iter_mut().for_each(|v| *v = f64::MAX);
    }
    let ctrl = GruNetwork::random(&Topology::new(2, vec![3], 2), OutputActivation::Tanh, 0.1, &mut rng).unwrap();
    let (m, c, s, log) = (
        dir.path().join("m.json"),
        dir.path().join("c.json"),
        dir.path().join("s.ndjson"),
        dir.path().join("run.csv"),
    );
    weights::save(&model, NetworkRole::Model, &m).unwrap();
    weights::save(&ctrl, NetworkRole::Controller, &c).unwrap();
    fs::write(&s, "{\"steps\": 20, \"setpoint\": [0.1, 0.1]}\n").unwrap();
    let out = imc(
        &[
            "simulate",
            "--model",
            p(&m),
            "--ctrl",
            p(&c),
            "--schedule",
            p(&s),
            "--out",
            p(&log),
        ],
        &[],
    );
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
    let sidecar = fs::read_to_string(dir.path().join("run.json")).unwrap();
    assert!(sidecar.contains("non-finite"));
}
