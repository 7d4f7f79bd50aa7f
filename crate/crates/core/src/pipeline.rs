//! Experiment configuration, the stage functions behind the command line and
//! the end-to-end pipeline with its run manifest.
//!
//! Artifact layout under the output directory:
//!
//! ```text
//! config.json
//! data/io/{train,validation,test}.ndjson, meta.json
//! model.json, model.report.json
//! data/refs/{train,validation,test}.ndjson, meta.json, feasible.json
//! schedule.ndjson
//! controller.json, controller.report.json
//! run_nominal.csv, run_nominal.json, run_noisy.csv, run_noisy.json
//! report.json, report.txt
//! manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datagen::{
    gen_io_dataset, gen_reference_dataset, read_dataset_dir, write_dataset_dir, FeasibleMap, IoDataConfig,
    RefDataConfig, ReferenceModel, ReferenceSequence, SequenceRecord, Splits,
};
use crate::error::{ImcError, Result};
use crate::gru::{GruNetwork, OutputActivation, Topology};
use crate::hash::{content_hash, file_hash};
use crate::imc_loop::{
    mid_range_tank, run_experiment_partial, spanning_schedule, to_meters, ClosedLoopLog, ImcAssembly, Schedule,
    ScheduleConfig,
};
use crate::metrics::{
    pooled_fit, steady_state_errors, tracking_rmse, EvalReport, SteadyStateConfig, SteadyStateSummary,
};
use crate::plant::{Normalizer, TankParams};
use crate::stability::{certify, StabilityCertificate};
use crate::training::{rollout_pair, train_controller, train_model, EpochRecord, IoSequence, TrainConfig, TrainReport};
use crate::weights::{self, NetworkRole};

pub const CONFIG_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// `IMC__model_train__max_epochs=50` sets `model_train.max_epochs`.
pub const ENV_PREFIX: &str = "IMC__";

const INPUT_NAMES: [&str; 2] = ["qa", "qb"];
const OUTPUT_NAMES: [&str; 2] = ["h1", "h2"];

fn default_init_scale() -> f64 {
    0.5
}

/// Layer widths and initialization of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layers: Vec<usize>,
    /// Recurrent blocks are drawn uniformly in `±init_scale/√n`.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkSpec {
    fn init(&self, input_dim: usize, output_dim: usize, activation: OutputActivation) -> Result<GruNetwork> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let topo = Topology::new(input_dim, self.layers.clone(), output_dim);
        GruNetwork::random(&topo, activation, self.init_scale, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    /// Measurement noise of the noisy run, normalized units.
    pub noise_std: f64,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub steady_state: SteadyStateConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            noise_std: 0.01,
            seed: 0,
            schedule: ScheduleConfig::default(),
            steady_state: SteadyStateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Tank parameter JSON; built-in parameters when absent.
    pub plant_params: Option<PathBuf>,
    /// Sampling period, seconds.
    pub tau_s: f64,
    /// Model reference time constant, seconds.
    pub tau_r: f64,
    /// Feedback filter time constant; `tau_r` when absent.
    pub tau_f: Option<f64>,
    pub io_data: IoDataConfig,
    pub refs: RefDataConfig,
    pub model: NetworkSpec,
    pub model_train: TrainConfig,
    pub controller: NetworkSpec,
    pub controller_train: TrainConfig,
    pub simulation: SimulationConfig,
    /// Washout of the reported FIT figures.
    pub fit_washout: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// Full-scale settings.
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            version: CONFIG_VERSION,
            plant_params: None,
            tau_s: 25.0,
            tau_r: 2000.0,
            tau_f: None,
            io_data: IoDataConfig::default(),
            refs: RefDataConfig::default(),
            model: NetworkSpec {
                layers: vec![10, 10],
                init_scale: default_init_scale(),
                seed: 0,
            },
            model_train: TrainConfig::default(),
            controller: NetworkSpec {
                layers: vec![5, 5, 5],
                init_scale: default_init_scale(),
                seed: 0,
            },
            controller_train: TrainConfig::default(),
            simulation: SimulationConfig::default(),
            fit_washout: 50,
            output_dir: PathBuf::from("imc-run"),
        };
        cfg.reseed(0);
        cfg
    }
}

impl ExperimentConfig {
    /// Reduced budget that fits a laptop: 100 windows of 300 steps, 150
    /// references, at most 300 and 400 epochs.
    pub fn desk() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.io_data = IoDataConfig {
            windows: 100,
            window_len: 300,
            stride: 50,
            validation_windows: 20,
            test_len: 1500,
            ..cfg.io_data
        };
        cfg.refs = RefDataConfig {
            train: 120,
            validation: 20,
            test: 10,
            length: 700,
            ..cfg.refs
        };
        for (t, epochs) in [(&mut cfg.model_train, 300), (&mut cfg.controller_train, 400)] {
            t.batch_size = 8;
            t.optimizer.learning_rate = 3e-3;
            t.max_epochs = epochs;
            t.patience = 50;
        }
        cfg.output_dir = PathBuf::from("imc-desk");
        cfg.reseed(0);
        cfg
    }

    /// Tiny networks and datasets for an end-to-end check.
    pub fn smoke() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.io_data = IoDataConfig {
            windows: 20,
            window_len: 200,
            stride: 50,
            validation_windows: 5,
            test_len: 400,
            ..cfg.io_data
        };
        cfg.refs = RefDataConfig {
            train: 14,
            validation: 4,
            test: 2,
            length: 200,
            grid: 9,
            ..cfg.refs
        };
        cfg.model.layers = vec![4, 4];
        cfg.controller.layers = vec![3, 3];
        for t in [&mut cfg.model_train, &mut cfg.controller_train] {
            t.batch_size = 4;
            t.optimizer.learning_rate = 1e-2;
            t.max_epochs = 50;
        }
        cfg.simulation.schedule.hold_s = 10000.0;
        cfg.output_dir = PathBuf::from("imc-smoke");
        cfg.reseed(0);
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            other => Err(ImcError::Config(format!(
                "unknown preset `{other}` (full, desk, smoke)"
            ))),
        }
    }

    /// Derives every stage seed from one value.
    pub fn reseed(&mut self, seed: u64) {
        let s = |k: u64| seed.wrapping_mul(7).wrapping_add(k);
        self.io_data.seed = s(0);
        self.refs.seed = s(1);
        self.model.seed = s(2);
        self.model_train.seed = s(3);
        self.controller.seed = s(4);
        self.controller_train.seed = s(5);
        self.simulation.seed = s(6);
    }

    /// Parses a config document after applying `IMC__`-prefixed overrides.
    /// The document must carry the current `version`.
    pub fn from_json_with_overrides(text: &str, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| ImcError::Config(format!("config is not valid JSON: {e}")))?;
        match value.get("version").and_then(Value::as_u64) {
            Some(v) if v == u64::from(CONFIG_VERSION) => {}
            Some(v) => {
                return Err(ImcError::Config(format!(
                    "config version {v} is not supported (expected {CONFIG_VERSION})"
                )))
            }
            None => return Err(ImcError::Config("config lacks a numeric `version`".into())),
        }
        apply_overrides(&mut value, vars)?;
        Self::from_value(value)
    }

    /// A preset with overrides applied.
    pub fn preset_with_overrides(name: &str, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut value = serde_json::to_value(Self::preset(name)?)?;
        apply_overrides(&mut value, vars)?;
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| ImcError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; a relative `plant_params` is resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ImcError::io(path, e))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| ImcError::Config(format!("{}: {e}", path.display())))?;
        if let (Some(Value::String(p)), Some(dir)) = (value.get("plant_params"), path.parent()) {
            if Path::new(p).is_relative() {
                let joined = dir.join(p).display().to_string();
                value["plant_params"] = Value::String(joined);
            }
        }
        Self::from_json_with_overrides(&value.to_string(), vars)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ImcError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported", self.version));
        }
        for (name, spec) in [("model", &self.model), ("controller", &self.controller)] {
            if spec.layers.is_empty() || spec.layers.contains(&0) {
                return bad(format!("{name}: every layer needs a positive width"));
            }
            if !(spec.init_scale >= 0.0) {
                return bad(format!("{name}: init_scale must be non-negative"));
            }
        }
        if !(self.tau_s > 0.0 && self.tau_r > 0.0 && self.tau_f.is_none_or(|t| t > 0.0)) {
            return bad("time constants must be positive".into());
        }
        if let Some(p) = &self.plant_params {
            if !p.exists() {
                return bad(format!("plant_params {} does not exist", p.display()));
            }
        }
        if self.io_data.window_len <= self.model_train.washout {
            return bad("io_data.window_len must exceed model_train.washout".into());
        }
        if self.refs.length <= self.controller_train.washout {
            return bad("refs.length must exceed controller_train.washout".into());
        }
        self.io_data.mprs.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn tank_params(&self) -> Result<TankParams> {
        match &self.plant_params {
            Some(p) => TankParams::load(p),
            None => Ok(TankParams::default()),
        }
    }

    pub fn reference_model(&self) -> Result<ReferenceModel> {
        ReferenceModel::from_time_constant(self.tau_s, self.tau_r, OUTPUT_NAMES.len())
    }

    pub fn feedback_model(&self) -> Result<ReferenceModel> {
        ReferenceModel::from_time_constant(self.tau_s, self.tau_f.unwrap_or(self.tau_r), OUTPUT_NAMES.len())
    }
}

/// Applies `PREFIX a__b__c = value` overrides to a JSON document. Values are
/// parsed as JSON when possible and taken as strings otherwise. Unknown keys
/// are inserted and then rejected by the config schema.
pub fn apply_overrides(value: &mut Value, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|s| s.to_lowercase()).collect();
        if path.iter().any(String::is_empty) {
            return Err(ImcError::Config(format!("malformed override `{key}`")));
        }
        let parsed = serde_json::from_str(&raw).unwrap_or(Value::String(raw.clone()));
        let mut node = &mut *value;
        for (i, seg) in path.iter().enumerate() {
            let Value::Object(map) = node else {
                return Err(ImcError::Config(format!(
                    "override `{key}`: `{}` is not an object",
                    path[..i].join(".")
                )));
            };
            if i + 1 == path.len() {
                map.insert(seg.clone(), parsed.clone());
                break;
            }
            node = map
                .entry(seg.clone())
                .or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// `model.json` → `model.report.json`.
pub fn report_path(weights_path: &Path) -> PathBuf {
    let stem = weights_path
        .file_stem()
        .map_or("weights".into(), |s| s.to_string_lossy().into_owned());
    weights_path.with_file_name(format!("{stem}.report.json"))
}

/// `run.csv` → `run.json`.
pub fn sidecar_path(log_path: &Path) -> PathBuf {
    log_path.with_extension("json")
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ImcError::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| ImcError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| ImcError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ImcError::Format(format!("{}: {e}", path.display())))
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Plant excitation data, written as a dataset directory.
pub fn gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Splits<IoSequence>> {
    let params = cfg.tank_params()?;
    let splits = gen_io_dataset(&cfg.io_data, &params, cfg.tau_s)?;
    let (u, y) = (names(&INPUT_NAMES), names(&OUTPUT_NAMES));
    let meta = json!({
        "tool_version": TOOL_VERSION,
        "sample_period": cfg.tau_s,
        "io_data": cfg.io_data,
        "plant": params,
    });
    write_dataset_dir(
        dir,
        &splits,
        |id, s| SequenceRecord::from_io(id, s, cfg.tau_s, &u, &y),
        &meta,
    )?;
    Ok(splits)
}

pub fn load_io_data(dir: &Path) -> Result<Splits<IoSequence>> {
    read_dataset_dir(dir, |r| r.to_io())
}

fn epoch_line(label: &str, e: &EpochRecord) -> String {
    let nu: Vec<String> = e.residuals.iter().map(|v| format!("{v:+.4}")).collect();
    format!(
        "{label} epoch {:>4}: train loss {:.4e}, validation MSE {:.4e}, nu [{}]",
        e.epoch,
        e.train_loss,
        e.validation_mse,
        nu.join(", ")
    )
}

fn report_progress<'a>(label: &str, progress: &'a mut dyn FnMut(&str)) -> impl FnMut(&EpochRecord) + 'a {
    let label = label.to_string();
    move |e: &EpochRecord| {
        if e.epoch == 1 || e.epoch.is_multiple_of(10) {
            progress(&epoch_line(&label, e));
        }
    }
}

fn finish_training(
    net: GruNetwork,
    report: TrainReport,
    role: NetworkRole,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<(GruNetwork, TrainReport)> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ImcError::io(dir, e))?;
    }
    write_json(&report_path(out), &report)?;
    report.ensure_converged()?;
    weights::save(&net, role, out)?;
    progress(&format!(
        "{role:?} training stopped after epoch {} ({:?}); best epoch {} with validation MSE {:.4e}",
        report.stopping_epoch(),
        report.stop_reason,
        report.best_epoch,
        report.best_validation_mse
    ));
    Ok((net, report))
}

/// Trains the model on the train split, stops early on the validation split
/// and writes weights plus report.
pub fn train_model_stage(
    cfg: &ExperimentConfig,
    data: &Splits<IoSequence>,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<(GruNetwork, TrainReport)> {
    let net = cfg
        .model
        .init(INPUT_NAMES.len(), OUTPUT_NAMES.len(), OutputActivation::Identity)?;
    let (net, report) = {
        let cb = report_progress("model", progress);
        train_model(net, &data.train, &data.validation, &cfg.model_train, cb)?
    };
    finish_training(net, report, NetworkRole::Model, out, progress)
}

pub fn train_controller_stage(
    cfg: &ExperimentConfig,
    model: &GruNetwork,
    refs: &Splits<ReferenceSequence>,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<(GruNetwork, TrainReport)> {
    let ctrl = cfg
        .controller
        .init(model.output_dim(), model.input_dim(), OutputActivation::Tanh)?;
    let filtered = |s: &[ReferenceSequence]| -> Vec<Vec<Vec<f64>>> { s.iter().map(|r| r.filtered.clone()).collect() };
    let (ctrl, report) = {
        let cb = report_progress("controller", progress);
        train_controller(
            ctrl,
            model,
            &filtered(&refs.train),
            &filtered(&refs.validation),
            &cfg.controller_train,
            cb,
        )?
    };
    finish_training(ctrl, report, NetworkRole::Controller, out, progress)
}

/// Fails with a certification error unless every layer residual is negative.
pub fn require_certified(net: &GruNetwork, what: &str) -> Result<StabilityCertificate> {
    let cert = certify(net);
    if !cert.certified {
        let nu: Vec<String> = cert.residuals().iter().map(|v| format!("{v:+.4}")).collect();
        return Err(ImcError::Certification(format!(
            "{what}: residuals [{}]",
            nu.join(", ")
        )));
    }
    Ok(cert)
}

pub fn load_network(path: &Path, role: NetworkRole) -> Result<GruNetwork> {
    let (net, found) = weights::load(path)?;
    if found != role {
        return Err(ImcError::Format(format!(
            "{} holds a {found:?}, expected a {role:?}",
            path.display()
        )));
    }
    Ok(net)
}

/// Reference dataset, feasible output map and test schedule for `model`,
/// written into `dir` (`feasible.json`, `schedule.ndjson` beside the splits).
pub fn gen_refs(
    cfg: &ExperimentConfig,
    model: &GruNetwork,
    dir: &Path,
) -> Result<(Splits<ReferenceSequence>, FeasibleMap, Schedule)> {
    let m_r = cfg.reference_model()?;
    let (splits, map) = gen_reference_dataset(model, &cfg.refs, &m_r, cfg.tau_s)?;
    let schedule = spanning_schedule(model, &map, &cfg.simulation.schedule, cfg.tau_s)?;
    let y = names(&OUTPUT_NAMES);
    let meta = json!({
        "tool_version": TOOL_VERSION,
        "sample_period": cfg.tau_s,
        "tau_r": cfg.tau_r,
        "refs": cfg.refs,
        "schedule": cfg.simulation.schedule,
        "model": content_hash(weights::to_json(model, NetworkRole::Model)?.as_bytes()),
    });
    write_dataset_dir(
        dir,
        &splits,
        |id, s| SequenceRecord::from_reference(id, s, cfg.tau_s, &y),
        &meta,
    )?;
    write_json(&dir.join("feasible.json"), &map)?;
    schedule.write_ndjson(dir.join("schedule.ndjson"))?;
    Ok((splits, map, schedule))
}

pub fn load_refs(dir: &Path) -> Result<Splits<ReferenceSequence>> {
    read_dataset_dir(dir, |r| r.to_reference())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub file: String,
    pub hash: String,
}

impl ArtifactRef {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(ArtifactRef {
            file: path
                .file_name()
                .map_or(String::new(), |f| f.to_string_lossy().into_owned()),
            hash: file_hash(path)?,
        })
    }
}

/// JSON sidecar of a closed-loop log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub tool_version: String,
    pub sample_period: f64,
    pub tau_r: f64,
    pub tau_f: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub plant: TankParams,
    pub model: ArtifactRef,
    pub controller: ArtifactRef,
    pub schedule: ArtifactRef,
    pub steps: usize,
    pub fault: Option<String>,
}

/// Runs the loop on the tank, writes the CSV log and its sidecar. On a
/// fault the partial log is still written and a simulation error returned.
pub fn simulate(
    cfg: &ExperimentConfig,
    model_path: &Path,
    ctrl_path: &Path,
    schedule_path: &Path,
    noise_std: f64,
    seed: u64,
    out: &Path,
) -> Result<ClosedLoopLog> {
    let model = load_network(model_path, NetworkRole::Model)?;
    let ctrl = load_network(ctrl_path, NetworkRole::Controller)?;
    let schedule = Schedule::read_ndjson(schedule_path)?;
    let params = cfg.tank_params()?;
    let plant = mid_range_tank(params.clone(), cfg.tau_s, noise_std)?;
    let mut asm = ImcAssembly::new(
        ctrl,
        model,
        plant,
        &cfg.reference_model()?,
        &cfg.feedback_model()?,
        cfg.tau_s,
    )?;
    let (log, fault) = run_experiment_partial(&mut asm, &schedule, seed);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ImcError::io(dir, e))?;
    }
    log.write_csv(out)?;
    let record = SimulationRecord {
        tool_version: TOOL_VERSION.into(),
        sample_period: cfg.tau_s,
        tau_r: cfg.tau_r,
        tau_f: cfg.tau_f.unwrap_or(cfg.tau_r),
        noise_std,
        seed,
        plant: params,
        model: ArtifactRef::of(model_path)?,
        controller: ArtifactRef::of(ctrl_path)?,
        schedule: ArtifactRef::of(schedule_path)?,
        steps: log.len(),
        fault: fault.as_ref().map(|e| e.to_string()),
    };
    write_json(&sidecar_path(out), &record)?;
    match fault {
        None => Ok(log),
        Some(e) => Err(e),
    }
}

/// Tracking RMSE and steady-state errors of a log, both in meters.
pub fn evaluate_log(
    log: &ClosedLoopLog,
    schedule: &Schedule,
    normalizer: &Normalizer,
    cfg: &SteadyStateConfig,
) -> Result<(f64, SteadyStateSummary)> {
    if log.len() != schedule.duration() {
        return Err(ImcError::LengthMismatch(format!(
            "log has {} rows, schedule {} periods",
            log.len(),
            schedule.duration()
        )));
    }
    let y_p = to_meters(normalizer, &log.series(|r| &r.y_p));
    let y_ref = to_meters(normalizer, &log.series(|r| &r.y_ref));
    let setpoints: Vec<Vec<f64>> = schedule
        .segments
        .iter()
        .map(|s| normalizer.outputs_to_meters(&s.setpoint).to_vec())
        .collect();
    let rmse = tracking_rmse(&y_ref, &y_p)?;
    let ss = steady_state_errors(&y_p, &setpoints, &schedule.ranges(), cfg)?;
    Ok((rmse, ss))
}

/// Free-run FIT of the model from a zero state over the given experiments.
pub fn model_fit(model: &GruNetwork, data: &[IoSequence], washout: usize) -> Result<f64> {
    let x0 = vec![0.0; model.state_dim()];
    let pairs = data
        .iter()
        .map(|s| Ok((model.simulate_outputs(&x0, &s.inputs)?, s.outputs.clone())))
        .collect::<Result<Vec<_>>>()?;
    pooled_fit(&pairs, washout)
}

/// Nominal tracking FIT of the controller driving the model.
pub fn controller_fit(
    ctrl: &GruNetwork,
    model: &GruNetwork,
    refs: &[ReferenceSequence],
    washout: usize,
) -> Result<f64> {
    let pairs = refs
        .iter()
        .map(|r| Ok((rollout_pair(ctrl, model, &r.filtered)?.1, r.filtered.clone())))
        .collect::<Result<Vec<_>>>()?;
    pooled_fit(&pairs, washout)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: ExperimentConfig,
    /// Path relative to the output directory → content hash.
    pub artifacts: BTreeMap<String, String>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    /// Every listed artifact exists under `root` with the recorded hash.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for (rel, hash) in &self.artifacts {
            let found = file_hash(root.join(rel))?;
            if &found != hash {
                return Err(ImcError::Format(format!(
                    "{rel}: hash {found} differs from manifest {hash}"
                )));
            }
        }
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Everything one pipeline run produced, for callers that want to inspect
/// the results without reloading files.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: RunManifest,
    pub model: GruNetwork,
    pub model_report: TrainReport,
    pub controller: GruNetwork,
    pub controller_report: TrainReport,
    pub io_data: Splits<IoSequence>,
    pub refs: Splits<ReferenceSequence>,
    pub feasible: FeasibleMap,
    pub schedule: Schedule,
    pub nominal: ClosedLoopLog,
    pub noisy: ClosedLoopLog,
    pub report: EvalReport,
}

/// gen-data → train-model → certify → gen-refs → train-controller → certify
/// → simulate → evaluate, all under `cfg.output_dir`.
pub fn pipeline(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let root = cfg.output_dir.clone();
    let started = unix_now();
    fs::create_dir_all(&root).map_err(|e| ImcError::io(&root, e))?;
    // stored relative to the run directory itself
    let stored = ExperimentConfig {
        output_dir: PathBuf::from("."),
        ..cfg.clone()
    };
    fs::write(root.join("config.json"), stored.to_json()?).map_err(|e| ImcError::io(root.join("config.json"), e))?;
    let dir = root.display().to_string();
    let wrap = |stage: &str| {
        let dir = dir.clone();
        let stage = stage.to_string();
        move |e: ImcError| ImcError::Stage {
            stage,
            dir,
            source: Box::new(e),
        }
    };
    let io_dir = root.join("data/io");
    let refs_dir = root.join("data/refs");
    let model_path = root.join("model.json");
    let ctrl_path = root.join("controller.json");
    let schedule_path = root.join("schedule.ndjson");

    progress("gen-data");
    let io_data = gen_data(cfg, &io_dir).map_err(wrap("gen-data"))?;

    progress("train-model");
    let (model, model_report) = train_model_stage(cfg, &io_data, &model_path, progress).map_err(wrap("train-model"))?;

    progress("certify model");
    let cert = require_certified(&model, "model").map_err(wrap("certify-model"))?;
    progress(cert.render().trim_end());

    progress("gen-refs");
    let (refs, feasible, schedule) = gen_refs(cfg, &model, &refs_dir).map_err(wrap("gen-refs"))?;
    fs::copy(refs_dir.join("schedule.ndjson"), &schedule_path)
        .map_err(|e| wrap("gen-refs")(ImcError::io(&schedule_path, e)))?;

    progress("train-controller");
    let (controller, controller_report) =
        train_controller_stage(cfg, &model, &refs, &ctrl_path, progress).map_err(wrap("train-controller"))?;

    progress("certify controller");
    let cert = require_certified(&controller, "controller").map_err(wrap("certify-controller"))?;
    progress(cert.render().trim_end());

    progress("simulate");
    let sim = &cfg.simulation;
    let nominal_path = root.join("run_nominal.csv");
    let noisy_path = root.join("run_noisy.csv");
    let nominal = simulate(
        cfg,
        &model_path,
        &ctrl_path,
        &schedule_path,
        0.0,
        sim.seed,
        &nominal_path,
    )
    .map_err(wrap("simulate"))?;
    let noisy = simulate(
        cfg,
        &model_path,
        &ctrl_path,
        &schedule_path,
        sim.noise_std,
        sim.seed,
        &noisy_path,
    )
    .map_err(wrap("simulate"))?;

    progress("evaluate");
    let report = (|| -> Result<EvalReport> {
        let normalizer = Normalizer::from_params(&cfg.tank_params()?);
        let (_, steady) = evaluate_log(&nominal, &schedule, &normalizer, &sim.steady_state)?;
        let (rmse, _) = evaluate_log(&noisy, &schedule, &normalizer, &sim.steady_state)?;
        let report = EvalReport {
            fit_percent: Some(model_fit(&model, &io_data.test, cfg.fit_washout)?),
            controller_fit_percent: Some(controller_fit(&controller, &model, &refs.test, cfg.fit_washout)?),
            tracking_rmse_m: Some(rmse),
            steady_state: Some(steady),
            meta: json!({
                "tool_version": TOOL_VERSION,
                "fit_washout": cfg.fit_washout,
                "noise_std": sim.noise_std,
                "nominal_log": file_hash(&nominal_path)?,
                "noisy_log": file_hash(&noisy_path)?,
                "schedule": file_hash(&schedule_path)?,
            }),
        };
        write_json(&root.join("report.json"), &report)?;
        let table = report.render_table();
        fs::write(root.join("report.txt"), &table).map_err(|e| ImcError::io(root.join("report.txt"), e))?;
        Ok(report)
    })()
    .map_err(wrap("evaluate"))?;
    progress(report.render_table().trim_end());

    let produced = [
        "config.json",
        "data/io/train.ndjson",
        "data/io/validation.ndjson",
        "data/io/test.ndjson",
        "data/io/meta.json",
        "model.json",
        "model.report.json",
        "data/refs/train.ndjson",
        "data/refs/validation.ndjson",
        "data/refs/test.ndjson",
        "data/refs/meta.json",
        "data/refs/feasible.json",
        "data/refs/schedule.ndjson",
        "schedule.ndjson",
        "controller.json",
        "controller.report.json",
        "run_nominal.csv",
        "run_nominal.json",
        "run_noisy.csv",
        "run_noisy.json",
        "report.json",
        "report.txt",
    ];
    let artifacts = produced
        .iter()
        .map(|rel| Ok((rel.to_string(), file_hash(root.join(rel))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        config: cfg.clone(),
        artifacts,
        started_unix_s: started,
        finished_unix_s: unix_now(),
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(PipelineOutcome {
        manifest,
        model,
        model_report,
        controller,
        controller_report,
        io_data,
        refs,
        feasible,
        schedule,
        nominal,
        noisy,
        report,
    })
}
