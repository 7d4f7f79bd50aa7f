//! Internal model control loop with filtered modeling-error feedback.
//!
//! Per control period `k`:
//!
//! 1. `ỹ⁰(k)` from the model reference (strictly proper in `y⁰`);
//! 2. controller input `ỹ⁰(k) − F(e_m)`, where `F` has absorbed `e_m` up to `k−1`;
//! 3. `u_c(k)` from the controller;
//! 4. plant step and measurement `y_p(k)`;
//! 5. model step with the same `u_c(k)`, giving `y_m(k)`;
//! 6. `e_m(k) = y_p(k) − y_m(k)` is fed to `F` for the next period.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{solve_from_samples, EquilibriumConfig, FeasibleMap, FirstOrderFilter, ReferenceModel};
use crate::error::{ImcError, Result};
use crate::gru::{GruNetwork, OutputActivation, Workspace};
use crate::plant::{Normalizer, QuadTank};

/// Anything the loop can drive: takes a normalized input, returns a
/// normalized measurement.
pub trait Plant {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn advance(&mut self, u: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
    /// Optional physical state for logging.
    fn physical_state(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl Plant for QuadTank {
    fn input_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        2
    }

    fn advance(&mut self, u: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        QuadTank::advance(self, u, rng).map(|y| y.to_vec())
    }

    fn physical_state(&self) -> Vec<f64> {
        self.state.h.to_vec()
    }
}

/// A GRU network standing in for the plant, with an optional constant
/// output offset acting as an unmodeled disturbance.
#[derive(Debug, Clone)]
pub struct ModelPlant {
    pub net: GruNetwork,
    pub state: Vec<f64>,
    pub offset: Vec<f64>,
    ws: Workspace,
}

impl ModelPlant {
    pub fn new(net: GruNetwork, state: Vec<f64>) -> Result<Self> {
        if state.len() != net.state_dim() {
            return Err(ImcError::dims("model plant state", net.state_dim(), state.len()));
        }
        let ws = Workspace::new(&net);
        let offset = vec![0.0; net.output_dim()];
        Ok(ModelPlant { net, state, offset, ws })
    }
}

impl Plant for ModelPlant {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn advance(&mut self, u: &[f64], _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.net.output_dim()];
        self.net.step_in_place(&mut self.state, u, &mut y, &mut self.ws);
        for (v, o) in y.iter_mut().zip(&self.offset) {
            *v += o;
        }
        Ok(y)
    }
}

/// One control period of the loop, all signals normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub k: usize,
    pub time: f64,
    pub y0: Vec<f64>,
    pub y_ref: Vec<f64>,
    pub e_filt: Vec<f64>,
    pub ctrl_in: Vec<f64>,
    pub u_c: Vec<f64>,
    pub y_p: Vec<f64>,
    pub y_m: Vec<f64>,
    pub e_m: Vec<f64>,
    pub xi_c: Vec<f64>,
    pub xi_m: Vec<f64>,
    pub plant: Vec<f64>,
}

const LOG_GROUPS: [&str; 11] = [
    "y0", "y_ref", "e_filt", "ctrl_in", "u_c", "y_p", "y_m", "e_m", "xi_c", "xi_m", "plant",
];

impl LogRow {
    fn groups(&self) -> [&Vec<f64>; 11] {
        [
            &self.y0,
            &self.y_ref,
            &self.e_filt,
            &self.ctrl_in,
            &self.u_c,
            &self.y_p,
            &self.y_m,
            &self.e_m,
            &self.xi_c,
            &self.xi_m,
            &self.plant,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClosedLoopLog {
    pub sample_period: f64,
    pub rows: Vec<LogRow>,
}

impl ClosedLoopLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn series(&self, pick: impl Fn(&LogRow) -> &Vec<f64>) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| pick(r).clone()).collect()
    }

    /// CSV with one row per period; vector signals are spread over columns
    /// named `<signal>.<index>` (1-based).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let Some(first) = self.rows.first() else {
            w.write_record(["k", "time"])?;
            return w.flush().map_err(|e| ImcError::io(path, e));
        };
        let mut header = vec!["k".to_string(), "time".to_string()];
        for (name, g) in LOG_GROUPS.iter().zip(first.groups()) {
            header.extend((1..=g.len()).map(|i| format!("{name}.{i}")));
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.k.to_string(), format!("{:?}", r.time)];
            for g in r.groups() {
                rec.extend(g.iter().map(|v| format!("{v:?}")));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| ImcError::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>, sample_period: f64) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut slots: Vec<Vec<usize>> = vec![Vec::new(); LOG_GROUPS.len()];
        for (col, name) in header.iter().enumerate().skip(2) {
            let group = name.split('.').next().unwrap_or("");
            let g = LOG_GROUPS
                .iter()
                .position(|x| *x == group)
                .ok_or_else(|| ImcError::Format(format!("unknown log column `{name}`")))?;
            slots[g].push(col);
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| ImcError::Format(format!("bad number `{s}` in {}: {e}", path.display())))
        };
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let get = |cols: &Vec<usize>| -> Result<Vec<f64>> { cols.iter().map(|&c| parse(&rec[c])).collect() };
            rows.push(LogRow {
                k: rec[0]
                    .parse()
                    .map_err(|e| ImcError::Format(format!("bad step index `{}`: {e}", &rec[0])))?,
                time: parse(&rec[1])?,
                y0: get(&slots[0])?,
                y_ref: get(&slots[1])?,
                e_filt: get(&slots[2])?,
                ctrl_in: get(&slots[3])?,
                u_c: get(&slots[4])?,
                y_p: get(&slots[5])?,
                y_m: get(&slots[6])?,
                e_m: get(&slots[7])?,
                xi_c: get(&slots[8])?,
                xi_m: get(&slots[9])?,
                plant: get(&slots[10])?,
            });
        }
        Ok(ClosedLoopLog { sample_period, rows })
    }
}

/// Held set-point segment, normalized outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub steps: usize,
    pub setpoint: Vec<f64>,
}

/// Piecewise-constant set-point schedule, stored as NDJSON (one segment per line).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Schedule {
    pub segments: Vec<Segment>,
}

impl Schedule {
    pub fn duration(&self) -> usize {
        self.segments.iter().map(|s| s.steps).sum()
    }

    /// `y⁰(k)` for every period.
    pub fn expand(&self) -> Vec<Vec<f64>> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.setpoint.clone(), s.steps))
            .collect()
    }

    /// `[start, end)` period range of each segment.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        let mut t = 0;
        self.segments
            .iter()
            .map(|s| {
                let r = (t, t + s.steps);
                t += s.steps;
                r
            })
            .collect()
    }

    pub fn write_ndjson(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        for s in &self.segments {
            text.push_str(&serde_json::to_string(s)?);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| ImcError::io(path, e))
    }

    pub fn read_ndjson(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ImcError::io(path, e))?;
        let segments = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| ImcError::Format(format!("{} line {}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(Schedule { segments })
    }
}

/// Test schedule visiting the diagonals of the feasible output map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Fraction of the way from the hull centroid to the inset boundary.
    pub reach: f64,
    /// Hold per set-point, seconds.
    pub hold_s: f64,
    pub margin: f64,
    pub equilibrium: EquilibriumConfig,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            reach: 0.6,
            hold_s: 15000.0,
            margin: 0.02,
            equilibrium: EquilibriumConfig::default(),
        }
    }
}

/// One set-point per diagonal direction (four for two outputs, visited
/// counter-clockwise from the upper right; two for one output), measured
/// from the deepest point of the map. Each is pulled back toward that point
/// until the model has an equilibrium there.
pub fn spanning_schedule(model: &GruNetwork, map: &FeasibleMap, cfg: &ScheduleConfig, tau_s: f64) -> Result<Schedule> {
    let p = map.output_dim();
    let dirs: Vec<Vec<f64>> = match p {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0]],
        _ => {
            return Err(ImcError::InvalidArgument(format!(
                "spanning schedule needs 1 or 2 outputs, got {p}"
            )))
        }
    };
    if !(cfg.reach > 0.0 && cfg.reach < 1.0) || !(cfg.hold_s > 0.0) {
        return Err(ImcError::Config(
            "schedule needs reach in (0,1) and a positive hold".into(),
        ));
    }
    let center = map.deepest_point();
    if !map.admits(&center, cfg.margin) {
        return Err(ImcError::InsufficientSetPoints {
            needed: dirs.len(),
            found: 0,
        });
    }
    let warm: Vec<_> = map
        .points
        .iter()
        .map(|s| (s.u.clone(), s.xi.clone(), s.y.clone()))
        .collect();
    let steps = ((cfg.hold_s / tau_s).round() as usize).max(1);
    let mut segments = Vec::with_capacity(dirs.len());
    for d in &dirs {
        let mut t = cfg.reach * map.reach(&center, d, cfg.margin);
        let mut found = None;
        for _ in 0..12 {
            let y: Vec<f64> = center.iter().zip(d).map(|(c, d)| c + t * d).collect();
            match solve_from_samples(model, &y, &warm, &cfg.equilibrium) {
                Ok(_) => {
                    found = Some(y);
                    break;
                }
                Err(ImcError::EquilibriumNotFound { .. }) => t *= 0.8,
                Err(e) => return Err(e),
            }
        }
        let Some(setpoint) = found else {
            return Err(ImcError::InsufficientSetPoints {
                needed: dirs.len(),
                found: segments.len(),
            });
        };
        segments.push(Segment { steps, setpoint });
    }
    Ok(Schedule { segments })
}

/// Controller, internal model, plant and the two filters of the loop.
pub struct ImcAssembly<P: Plant> {
    pub controller: GruNetwork,
    pub model: GruNetwork,
    pub plant: P,
    pub reference: FirstOrderFilter,
    pub feedback: FirstOrderFilter,
    pub sample_period: f64,
    xi_c: Vec<f64>,
    xi_m: Vec<f64>,
    ws_c: Workspace,
    ws_m: Workspace,
    k: usize,
}

impl<P: Plant> ImcAssembly<P> {
    /// Zero controller and model states, both filters primed at zero.
    pub fn new(
        controller: GruNetwork,
        model: GruNetwork,
        plant: P,
        reference: &ReferenceModel,
        feedback: &ReferenceModel,
        sample_period: f64,
    ) -> Result<Self> {
        if controller.output().activation != OutputActivation::Tanh {
            return Err(ImcError::Config("the controller needs a tanh output map".into()));
        }
        if model.output().activation != OutputActivation::Identity {
            return Err(ImcError::Config("the model needs an identity output map".into()));
        }
        let m = model.input_dim();
        let p = model.output_dim();
        if controller.output_dim() != m {
            return Err(ImcError::dims(
                "controller output vs model input",
                m,
                controller.output_dim(),
            ));
        }
        if controller.input_dim() != p {
            return Err(ImcError::dims(
                "controller input vs model output",
                p,
                controller.input_dim(),
            ));
        }
        if plant.input_dim() != m {
            return Err(ImcError::dims("plant input vs model input", m, plant.input_dim()));
        }
        if plant.output_dim() != p {
            return Err(ImcError::dims("plant output vs model output", p, plant.output_dim()));
        }
        if reference.channels() != p || feedback.channels() != p {
            return Err(ImcError::dims(
                "filter channels",
                p,
                reference.channels().min(feedback.channels()),
            ));
        }
        Ok(ImcAssembly {
            xi_c: vec![0.0; controller.state_dim()],
            xi_m: vec![0.0; model.state_dim()],
            ws_c: Workspace::new(&controller),
            ws_m: Workspace::new(&model),
            reference: FirstOrderFilter::new(reference.clone(), vec![0.0; p])?,
            feedback: FirstOrderFilter::new(feedback.clone(), vec![0.0; p])?,
            controller,
            model,
            plant,
            sample_period,
            k: 0,
        })
    }

    pub fn model_state(&self) -> &[f64] {
        &self.xi_m
    }

    pub fn controller_state(&self) -> &[f64] {
        &self.xi_c
    }

    pub fn set_model_state(&mut self, xi: Vec<f64>) -> Result<()> {
        if xi.len() != self.xi_m.len() {
            return Err(ImcError::dims("model state", self.xi_m.len(), xi.len()));
        }
        self.xi_m = xi;
        Ok(())
    }

    /// One control period.
    pub fn closed_loop_step(&mut self, y0: &[f64], rng: &mut ChaCha8Rng) -> Result<LogRow> {
        let p = self.model.output_dim();
        if y0.len() != p {
            return Err(ImcError::dims("set-point", p, y0.len()));
        }
        let y_ref = self.reference.output().to_vec();
        self.reference.advance(y0);
        let e_filt = self.feedback.output().to_vec();
        let ctrl_in: Vec<f64> = y_ref.iter().zip(&e_filt).map(|(r, e)| r - e).collect();
        let mut u_c = vec![0.0; self.controller.output_dim()];
        self.controller
            .step_in_place(&mut self.xi_c, &ctrl_in, &mut u_c, &mut self.ws_c);
        let y_p = self.plant.advance(&u_c, rng)?;
        let mut y_m = vec![0.0; p];
        self.model.step_in_place(&mut self.xi_m, &u_c, &mut y_m, &mut self.ws_m);
        let e_m: Vec<f64> = y_p.iter().zip(&y_m).map(|(a, b)| a - b).collect();
        self.feedback.advance(&e_m);
        let row = LogRow {
            k: self.k,
            time: (self.k + 1) as f64 * self.sample_period,
            y0: y0.to_vec(),
            y_ref,
            e_filt,
            ctrl_in,
            u_c,
            y_p,
            y_m,
            e_m,
            xi_c: self.xi_c.clone(),
            xi_m: self.xi_m.clone(),
            plant: self.plant.physical_state(),
        };
        self.k += 1;
        let finite = [&row.u_c, &row.y_p, &row.y_m, &row.xi_c, &row.xi_m]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(ImcError::Simulation(format!(
                "non-finite signal at step {} (t = {} s)",
                row.k, row.time
            )));
        }
        Ok(row)
    }
}

/// Runs the loop over the whole schedule. On a fault the rows produced so
/// far are returned with the error.
pub fn run_experiment_partial<P: Plant>(
    assembly: &mut ImcAssembly<P>,
    schedule: &Schedule,
    seed: u64,
) -> (ClosedLoopLog, Option<ImcError>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = ClosedLoopLog {
        sample_period: assembly.sample_period,
        rows: Vec::with_capacity(schedule.duration()),
    };
    for y0 in schedule.expand() {
        match assembly.closed_loop_step(&y0, &mut rng) {
            Ok(row) => log.rows.push(row),
            Err(e) => {
                let t = (log.rows.len() + 1) as f64 * assembly.sample_period;
                let e = match e {
                    ImcError::Simulation(_) => e,
                    other => ImcError::Simulation(format!("at t = {t} s: {other}")),
                };
                return (log, Some(e));
            }
        }
    }
    (log, None)
}

pub fn run_experiment<P: Plant>(
    assembly: &mut ImcAssembly<P>,
    schedule: &Schedule,
    seed: u64,
) -> Result<ClosedLoopLog> {
    match run_experiment_partial(assembly, schedule, seed) {
        (log, None) => Ok(log),
        (_, Some(e)) => Err(e),
    }
}

/// A quadruple tank started from the levels it settles to at mid-range pumps.
pub fn mid_range_tank(params: crate::plant::TankParams, tau_s: f64, noise_std: f64) -> Result<QuadTank> {
    let start = QuadTank::settled_levels(&params, tau_s, &[0.0, 0.0])?;
    let mut plant = QuadTank::new(params, tau_s, start)?;
    plant.noise_std = noise_std;
    Ok(plant)
}

/// Converts a normalized output series to meters.
pub fn to_meters(normalizer: &Normalizer, ys: &[Vec<f64>]) -> Vec<Vec<f64>> {
    ys.iter().map(|y| normalizer.outputs_to_meters(y).to_vec()).collect()
}
