use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ImcError, Result};
use crate::gru::GruNetwork;
use crate::plant::{QuadTank, TankParams};
use crate::training::IoSequence;

use super::equilibrium::{solve_from_samples, EquilibriumConfig};
use super::feasible::{feasible_output_map, FeasibleMap};
use super::mprs::{gen_mprs, MprsConfig};
use super::reference::{filter_reference, ReferenceModel};
use super::slices::{experiment_length, tbptt_slices};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceKind {
    Io,
    Reference,
}

/// One line of a dataset file. Channel names carry a role prefix: `u.` and
/// `y.` for plant inputs and outputs, `sp.` and `ref.` for raw set-points and
/// filtered references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    pub id: String,
    pub kind: SequenceKind,
    pub sample_period: f64,
    pub channels: Vec<String>,
    pub data: Vec<Vec<f64>>,
}

/// Piecewise-constant set-points and their filtered version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSequence {
    pub setpoint: Vec<Vec<f64>>,
    pub filtered: Vec<Vec<f64>>,
}

impl ReferenceSequence {
    pub fn len(&self) -> usize {
        self.filtered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filtered.is_empty()
    }
}

fn columns(rows: &[Vec<f64>], prefix: &str, names: &[String]) -> Vec<String> {
    let width = rows.first().map_or(names.len(), |r| r.len());
    (0..width)
        .map(|i| {
            format!(
                "{prefix}.{}",
                names.get(i).cloned().unwrap_or_else(|| (i + 1).to_string())
            )
        })
        .collect()
}

fn join(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().chain(y).copied().collect())
        .collect()
}

fn split_columns(rec: &SequenceRecord, first: &str, second: &str) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n_first = rec
        .channels
        .iter()
        .filter(|c| c.starts_with(&format!("{first}.")))
        .count();
    let n_second = rec
        .channels
        .iter()
        .filter(|c| c.starts_with(&format!("{second}.")))
        .count();
    let ordered = rec.channels[..n_first]
        .iter()
        .all(|c| c.starts_with(&format!("{first}.")));
    if !ordered || n_first + n_second != rec.channels.len() {
        return Err(ImcError::Format(format!(
            "record {}: expected `{first}.*` channels followed by `{second}.*` channels, got {:?}",
            rec.id, rec.channels
        )));
    }
    let mut a = Vec::with_capacity(rec.data.len());
    let mut b = Vec::with_capacity(rec.data.len());
    for (k, row) in rec.data.iter().enumerate() {
        if row.len() != rec.channels.len() {
            return Err(ImcError::Format(format!(
                "record {} row {k}: {} values for {} channels",
                rec.id,
                row.len(),
                rec.channels.len()
            )));
        }
        a.push(row[..n_first].to_vec());
        b.push(row[n_first..].to_vec());
    }
    Ok((a, b))
}

impl SequenceRecord {
    pub fn from_io(id: String, seq: &IoSequence, sample_period: f64, inputs: &[String], outputs: &[String]) -> Self {
        let mut channels = columns(&seq.inputs, "u", inputs);
        channels.extend(columns(&seq.outputs, "y", outputs));
        SequenceRecord {
            id,
            kind: SequenceKind::Io,
            sample_period,
            channels,
            data: join(&seq.inputs, &seq.outputs),
        }
    }

    pub fn from_reference(id: String, seq: &ReferenceSequence, sample_period: f64, outputs: &[String]) -> Self {
        let mut channels = columns(&seq.setpoint, "sp", outputs);
        channels.extend(columns(&seq.filtered, "ref", outputs));
        SequenceRecord {
            id,
            kind: SequenceKind::Reference,
            sample_period,
            channels,
            data: join(&seq.setpoint, &seq.filtered),
        }
    }

    pub fn to_io(&self) -> Result<IoSequence> {
        if self.kind != SequenceKind::Io {
            return Err(ImcError::Format(format!("record {} is not an io sequence", self.id)));
        }
        let (inputs, outputs) = split_columns(self, "u", "y")?;
        Ok(IoSequence { inputs, outputs })
    }

    pub fn to_reference(&self) -> Result<ReferenceSequence> {
        if self.kind != SequenceKind::Reference {
            return Err(ImcError::Format(format!(
                "record {} is not a reference sequence",
                self.id
            )));
        }
        let (setpoint, filtered) = split_columns(self, "sp", "ref")?;
        Ok(ReferenceSequence { setpoint, filtered })
    }
}

pub fn write_ndjson(path: impl AsRef<Path>, records: &[SequenceRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| ImcError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| ImcError::io(path, e))?;
    }
    w.flush().map_err(|e| ImcError::io(path, e))
}

pub fn read_ndjson(path: impl AsRef<Path>) -> Result<Vec<SequenceRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| ImcError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ImcError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord = serde_json::from_str(&line)
            .map_err(|e| ImcError::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Train, validation and test partitions of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "validation", "test"];

impl<T> Splits<T> {
    pub fn parts(&self) -> [(&'static str, &[T]); 3] {
        [
            (SPLIT_NAMES[0], &self.train),
            (SPLIT_NAMES[1], &self.validation),
            (SPLIT_NAMES[2], &self.test),
        ]
    }
}

/// Writes `train.ndjson`, `validation.ndjson`, `test.ndjson` and `meta.json`.
pub fn write_dataset_dir<T>(
    dir: impl AsRef<Path>,
    splits: &Splits<T>,
    to_record: impl Fn(String, &T) -> SequenceRecord,
    meta: &impl Serialize,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| ImcError::io(dir, e))?;
    for (name, items) in splits.parts() {
        let records: Vec<SequenceRecord> = items
            .iter()
            .enumerate()
            .map(|(i, s)| to_record(format!("{name}-{i:04}"), s))
            .collect();
        write_ndjson(dir.join(format!("{name}.ndjson")), &records)?;
    }
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(meta)? + "\n").map_err(|e| ImcError::io(&meta_path, e))
}

pub fn read_dataset_dir<T>(
    dir: impl AsRef<Path>,
    from_record: impl Fn(&SequenceRecord) -> Result<T>,
) -> Result<Splits<T>> {
    let dir = dir.as_ref();
    let load = |name: &str| -> Result<Vec<T>> {
        read_ndjson(dir.join(format!("{name}.ndjson")))?
            .iter()
            .map(&from_record)
            .collect()
    };
    Ok(Splits {
        train: load("train")?,
        validation: load("validation")?,
        test: load("test")?,
    })
}

/// Plant excitation experiments: one long MPRS run per partition, the
/// training and validation runs cut into overlapping windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoDataConfig {
    pub windows: usize,
    pub window_len: usize,
    pub stride: usize,
    pub validation_windows: usize,
    pub test_len: usize,
    pub mprs: MprsConfig,
    /// Measurement noise on the identification data, normalized units.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for IoDataConfig {
    fn default() -> Self {
        IoDataConfig {
            windows: 200,
            window_len: 700,
            stride: 100,
            validation_windows: 25,
            test_len: 1500,
            mprs: MprsConfig::default(),
            noise_std: 0.0,
            seed: 0,
        }
    }
}

/// Drives `plant` with `inputs` and records the measurements.
pub fn run_plant_experiment<R: Rng>(plant: &mut QuadTank, inputs: &[Vec<f64>], rng: &mut R) -> Result<IoSequence> {
    let outputs = inputs
        .iter()
        .enumerate()
        .map(|(k, u)| plant.advance(u, rng).map(|y| y.to_vec()).map_err(|e| e.at_step(k)))
        .collect::<Result<_>>()?;
    Ok(IoSequence {
        inputs: inputs.to_vec(),
        outputs,
    })
}

/// Runs the three experiments from the mid-range operating point, each with
/// its own MPRS and noise stream.
pub fn gen_io_dataset(cfg: &IoDataConfig, params: &TankParams, tau_s: f64) -> Result<Splits<IoSequence>> {
    if cfg.windows == 0 || cfg.validation_windows == 0 || cfg.test_len == 0 {
        return Err(ImcError::Config(
            "io dataset: every partition needs at least one sequence".into(),
        ));
    }
    let start = QuadTank::settled_levels(params, tau_s, &[0.0, 0.0])?;
    let lengths = [
        experiment_length(cfg.windows, cfg.window_len, cfg.stride),
        experiment_length(cfg.validation_windows, cfg.window_len, cfg.stride),
        cfg.test_len,
    ];
    let runs: Vec<IoSequence> = (0..3u64)
        .into_par_iter()
        .map(|part| {
            let mprs = MprsConfig {
                seed: cfg.seed.wrapping_mul(3).wrapping_add(part),
                ..cfg.mprs.clone()
            };
            let inputs = gen_mprs(&mprs, lengths[part as usize])?;
            let mut plant = QuadTank::new(params.clone(), tau_s, start)?;
            plant.noise_std = cfg.noise_std;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1000 + part);
            run_plant_experiment(&mut plant, &inputs, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut runs = runs.into_iter();
    let train = tbptt_slices(&runs.next().unwrap(), cfg.window_len, cfg.stride)?;
    let validation = tbptt_slices(&runs.next().unwrap(), cfg.window_len, cfg.stride)?;
    Ok(Splits {
        train,
        validation,
        test: vec![runs.next().unwrap()],
    })
}

/// Controller references: random feasible set-point steps filtered through
/// the model reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefDataConfig {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub length: usize,
    /// Set-point hold range, seconds.
    pub hold_min_s: f64,
    pub hold_max_s: f64,
    /// Inset from the feasible hull boundary, fraction of its extent.
    pub margin: f64,
    /// Input grid per channel for the feasible output map.
    pub grid: usize,
    /// Draws per set-point before a sequence is given up.
    pub attempts: usize,
    pub equilibrium: EquilibriumConfig,
    pub seed: u64,
}

impl Default for RefDataConfig {
    fn default() -> Self {
        RefDataConfig {
            train: 380,
            validation: 40,
            test: 10,
            length: 700,
            hold_min_s: 2000.0,
            hold_max_s: 10000.0,
            margin: 0.02,
            grid: 21,
            attempts: 200,
            equilibrium: EquilibriumConfig::default(),
            seed: 0,
        }
    }
}

impl RefDataConfig {
    pub fn count(&self) -> usize {
        self.train + self.validation + self.test
    }

    /// Hold range in sampling periods (at least one).
    pub fn hold_steps(&self, tau_s: f64) -> (usize, usize) {
        let lo = ((self.hold_min_s / tau_s).round() as usize).max(1);
        let hi = ((self.hold_max_s / tau_s).round() as usize).max(lo);
        (lo, hi)
    }
}

/// Draws a set-point inside the map with the configured inset and keeps it
/// only if the model has an equilibrium there.
pub fn screened_set_point<R: Rng>(
    model: &GruNetwork,
    map: &FeasibleMap,
    warm: &[(Vec<f64>, Vec<f64>, Vec<f64>)],
    margin: f64,
    cfg: &EquilibriumConfig,
    rng: &mut R,
    attempts: usize,
) -> Result<Vec<f64>> {
    for _ in 0..attempts {
        let Some(y) = map.sample(rng, margin, 10_000) else {
            continue;
        };
        match solve_from_samples(model, &y, warm, cfg) {
            Ok(_) => return Ok(y),
            Err(ImcError::EquilibriumNotFound { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(ImcError::InsufficientSetPoints { needed: 1, found: 0 })
}

/// Builds `count()` reference sequences, each from its own random stream, and
/// assigns them to partitions by a seeded shuffle.
pub fn gen_reference_dataset(
    model: &GruNetwork,
    cfg: &RefDataConfig,
    reference: &ReferenceModel,
    tau_s: f64,
) -> Result<(Splits<ReferenceSequence>, FeasibleMap)> {
    if cfg.length == 0 || cfg.train == 0 || cfg.validation == 0 || cfg.test == 0 {
        return Err(ImcError::Config(
            "reference dataset: empty partition or zero length".into(),
        ));
    }
    let map = feasible_output_map(model, cfg.grid, &cfg.equilibrium)?;
    let warm: Vec<_> = map
        .points
        .iter()
        .map(|s| (s.u.clone(), s.xi.clone(), s.y.clone()))
        .collect();
    let (hold_lo, hold_hi) = cfg.hold_steps(tau_s);
    let built: Vec<Result<ReferenceSequence>> = (0..cfg.count())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let mut setpoint = Vec::with_capacity(cfg.length);
            while setpoint.len() < cfg.length {
                let y = screened_set_point(model, &map, &warm, cfg.margin, &cfg.equilibrium, &mut rng, cfg.attempts)?;
                let hold = rng.random_range(hold_lo..=hold_hi).min(cfg.length - setpoint.len());
                setpoint.extend(std::iter::repeat_n(y, hold));
            }
            let filtered = filter_reference(&setpoint, reference, &setpoint[0])?;
            Ok(ReferenceSequence { setpoint, filtered })
        })
        .collect();
    let found = built.iter().filter(|r| r.is_ok()).count();
    if found < cfg.count() {
        if let Some(Err(e)) = built
            .iter()
            .find(|r| !matches!(r, Ok(_) | Err(ImcError::InsufficientSetPoints { .. })))
        {
            return Err(ImcError::Config(format!("reference generation failed: {e}")));
        }
        return Err(ImcError::InsufficientSetPoints {
            needed: cfg.count(),
            found,
        });
    }
    let mut all: Vec<ReferenceSequence> = built.into_iter().map(|r| r.unwrap()).collect();
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    let mut slots: Vec<Option<ReferenceSequence>> = all.drain(..).map(Some).collect();
    let mut take =
        |idx: &[usize]| -> Vec<ReferenceSequence> { idx.iter().map(|&i| slots[i].take().unwrap()).collect() };
    let train = take(&order[..cfg.train]);
    let validation = take(&order[cfg.train..cfg.train + cfg.validation]);
    let test = take(&order[cfg.train + cfg.validation..]);
    Ok((
        Splits {
            train,
            validation,
            test,
        },
        map,
    ))
}
