use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ImcError, Result};
use crate::gru::GruNetwork;
use crate::stability::{certify, Penalty, StabilityCertificate};

use super::grads::GradientSet;
use super::loss::{controller_loss, model_loss, mse_washout, rollout_pair, IoSequence};
use super::rmsprop::{RmsProp, RmsPropConfig};

fn default_batch() -> usize {
    32
}
fn default_washout() -> usize {
    50
}
fn default_max_epochs() -> usize {
    1000
}
fn default_patience() -> usize {
    20
}
fn default_clip() -> Option<f64> {
    Some(10.0)
}
fn default_true() -> bool {
    true
}
fn default_div_factor() -> f64 {
    10.0
}
fn default_div_epochs() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: RmsPropConfig,
    /// Washout `T_w` in steps.
    #[serde(default = "default_washout")]
    pub washout: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub penalty: Penalty,
    /// Global ℓ₂ gradient clipping threshold.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    /// Only epochs whose residuals all satisfy `ν ≤ ν*` may become the best.
    #[serde(default = "default_true")]
    pub require_target_for_best: bool,
    #[serde(default = "default_div_factor")]
    pub divergence_factor: f64,
    #[serde(default = "default_div_epochs")]
    pub divergence_epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch(),
            optimizer: RmsPropConfig::default(),
            washout: default_washout(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            penalty: Penalty::default(),
            clip_norm: default_clip(),
            require_target_for_best: true,
            divergence_factor: default_div_factor(),
            divergence_epochs: default_div_epochs(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, sequence_len: usize) -> Result<()> {
        let bad = |m: String| Err(ImcError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.washout >= sequence_len {
            return bad(format!(
                "washout {} must be shorter than the sequences ({})",
                self.washout, sequence_len
            ));
        }
        if !(self.penalty.target < 0.0 && self.penalty.slope > 0.0) {
            return bad("penalty needs target < 0 and slope > 0".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.decay) && o.eps > 0.0) {
            return bad("optimizer needs lr > 0, decay in [0,1), eps > 0".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-batch training loss including the penalty.
    pub train_loss: f64,
    pub validation_mse: f64,
    pub residuals: Vec<f64>,
    /// Number of updates whose gradient was clipped.
    pub clipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// Validation MSE of the untrained network.
    pub initial_validation_mse: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights are returned; `0` means the initial weights.
    pub best_epoch: usize,
    pub best_validation_mse: f64,
    pub stop_reason: StopReason,
    /// Certificate of the returned weights.
    pub certificate: StabilityCertificate,
}

impl TrainReport {
    pub fn stopping_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn validation_series(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.validation_mse).collect()
    }

    pub fn ensure_converged(&self) -> Result<()> {
        if self.stop_reason == StopReason::Diverged {
            return Err(ImcError::Divergence(format!(
                "validation MSE above {}x its initial value {:.4e} for {} consecutive epochs (stopped at epoch {})",
                self.config.divergence_factor,
                self.initial_validation_mse,
                self.config.divergence_epochs,
                self.stopping_epoch()
            )));
        }
        Ok(())
    }
}

/// A trainable objective over an indexed training set.
pub trait Objective {
    fn train_len(&self) -> usize;

    /// Shortest training sequence, for washout validation.
    fn min_sequence_len(&self) -> usize;

    /// Loss and gradient on the given training items.
    fn batch_loss(
        &self,
        net: &GruNetwork,
        batch: &[usize],
        rng: &mut ChaCha8Rng,
        cfg: &TrainConfig,
    ) -> Result<(f64, GradientSet)>;

    /// Mean validation MSE without the penalty.
    fn validation_mse(&self, net: &GruNetwork, cfg: &TrainConfig) -> Result<f64>;
}

/// Model identification objective: initial states drawn uniformly from the
/// unit box per sequence and per epoch.
pub struct ModelObjective<'a> {
    pub train: &'a [IoSequence],
    pub validation: &'a [IoSequence],
}

impl Objective for ModelObjective<'_> {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn min_sequence_len(&self) -> usize {
        self.train
            .iter()
            .chain(self.validation)
            .map(|s| s.len())
            .min()
            .unwrap_or(0)
    }

    fn batch_loss(
        &self,
        net: &GruNetwork,
        batch: &[usize],
        rng: &mut ChaCha8Rng,
        cfg: &TrainConfig,
    ) -> Result<(f64, GradientSet)> {
        let n = net.state_dim();
        let seqs: Vec<&IoSequence> = batch.iter().map(|&i| &self.train[i]).collect();
        let inits: Vec<Vec<f64>> = batch
            .iter()
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        model_loss(net, &seqs, &inits, cfg.washout, &cfg.penalty)
    }

    fn validation_mse(&self, net: &GruNetwork, cfg: &TrainConfig) -> Result<f64> {
        mean_parallel(self.validation.len(), |i| {
            let s = &self.validation[i];
            let y = net.simulate_outputs(&vec![0.0; net.state_dim()], &s.inputs)?;
            mse_washout(&y, &s.outputs, cfg.washout)
        })
    }
}

/// Controller objective over filtered reference sequences, model frozen.
pub struct ControllerObjective<'a> {
    pub model: &'a GruNetwork,
    pub train: &'a [Vec<Vec<f64>>],
    pub validation: &'a [Vec<Vec<f64>>],
}

impl Objective for ControllerObjective<'_> {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn min_sequence_len(&self) -> usize {
        self.train
            .iter()
            .chain(self.validation)
            .map(|s| s.len())
            .min()
            .unwrap_or(0)
    }

    fn batch_loss(
        &self,
        net: &GruNetwork,
        batch: &[usize],
        _rng: &mut ChaCha8Rng,
        cfg: &TrainConfig,
    ) -> Result<(f64, GradientSet)> {
        let refs: Vec<&[Vec<f64>]> = batch.iter().map(|&i| self.train[i].as_slice()).collect();
        controller_loss(net, self.model, &refs, cfg.washout, &cfg.penalty)
    }

    fn validation_mse(&self, net: &GruNetwork, cfg: &TrainConfig) -> Result<f64> {
        mean_parallel(self.validation.len(), |i| {
            let r = &self.validation[i];
            let (_, y) = rollout_pair(net, self.model, r)?;
            mse_washout(&y, r, cfg.washout)
        })
    }
}

fn mean_parallel(n: usize, f: impl Fn(usize) -> Result<f64> + Sync + Send) -> Result<f64> {
    use rayon::prelude::*;
    if n == 0 {
        return Err(ImcError::InvalidArgument("empty validation set".into()));
    }
    let vals: Vec<Result<f64>> = (0..n).into_par_iter().map(f).collect();
    let mut acc = 0.0;
    for v in vals {
        acc += v?;
    }
    Ok(acc / n as f64)
}

/// Epoch loop with RMSProp, gradient clipping and early stopping on the
/// validation MSE. Returns the best eligible weights; when no epoch is
/// eligible the final weights are returned.
pub fn train<O: Objective + ?Sized>(
    net: GruNetwork,
    objective: &O,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(GruNetwork, TrainReport)> {
    cfg.validate(objective.min_sequence_len())?;
    if objective.train_len() == 0 {
        return Err(ImcError::InvalidArgument("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = net;
    let mut opt = RmsProp::new(&net, cfg.optimizer);
    let initial = objective.validation_mse(&net, cfg)?;
    if !initial.is_finite() {
        return Err(ImcError::NanLoss {
            epoch: 0,
            learning_rate: cfg.optimizer.learning_rate,
        });
    }

    let mut best: Option<(usize, f64, GruNetwork)> = None;
    let mut stale = 0usize;
    let mut above = 0usize;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..objective.train_len()).collect();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut clipped = 0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, mut g) = objective.batch_loss(&net, chunk, &mut rng, cfg)?;
            if !loss.is_finite() || !g.is_finite() {
                return Err(ImcError::NanLoss {
                    epoch,
                    learning_rate: cfg.optimizer.learning_rate,
                });
            }
            if let Some(c) = cfg.clip_norm {
                clipped += g.clip_global_norm(c) as usize;
            }
            opt.step(&mut net, &g);
            loss_sum += loss;
            batches += 1;
        }
        let val = objective.validation_mse(&net, cfg)?;
        if !val.is_finite() {
            return Err(ImcError::NanLoss {
                epoch,
                learning_rate: cfg.optimizer.learning_rate,
            });
        }
        let cert = certify(&net);
        let residuals = cert.residuals();
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            validation_mse: val,
            residuals,
            clipped,
        };
        on_epoch(&record);

        let eligible = !cfg.require_target_for_best || record.residuals.iter().all(|&nu| nu <= cfg.penalty.target);
        epochs.push(record);

        if eligible && best.as_ref().is_none_or(|b| val < b.1) {
            best = Some((epoch, val, net.clone()));
            stale = 0;
        } else if best.is_some() {
            stale += 1;
        }

        above = if val > cfg.divergence_factor * initial {
            above + 1
        } else {
            0
        };
        if above >= cfg.divergence_epochs {
            stop_reason = StopReason::Diverged;
            break;
        }
        if stale >= cfg.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }

    let (best_epoch, best_val, out) = match best {
        Some(b) => b,
        None => {
            let v = epochs.last().map_or(initial, |e| e.validation_mse);
            (epochs.last().map_or(0, |e| e.epoch), v, net)
        }
    };
    let certificate = certify(&out);
    Ok((
        out,
        TrainReport {
            config: cfg.clone(),
            initial_validation_mse: initial,
            epochs,
            best_epoch,
            best_validation_mse: best_val,
            stop_reason,
            certificate,
        },
    ))
}

pub fn train_model(
    net: GruNetwork,
    train_set: &[IoSequence],
    validation: &[IoSequence],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(GruNetwork, TrainReport)> {
    let obj = ModelObjective {
        train: train_set,
        validation,
    };
    train(net, &obj, cfg, on_epoch)
}

pub fn train_controller(
    ctrl: GruNetwork,
    model: &GruNetwork,
    train_set: &[Vec<Vec<f64>>],
    validation: &[Vec<Vec<f64>>],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(GruNetwork, TrainReport)> {
    let obj = ControllerObjective {
        model,
        train: train_set,
        validation,
    };
    train(ctrl, &obj, cfg, on_epoch)
}
