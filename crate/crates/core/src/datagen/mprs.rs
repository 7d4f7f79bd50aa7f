use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ImcError, Result};

/// Multilevel pseudo-random signal: per channel, a piecewise-constant signal
/// whose values are drawn from `levels` equally spaced values of the
/// amplitude range and whose hold times are uniform in `[hold_min, hold_max]`
/// steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MprsConfig {
    pub levels: usize,
    pub hold_min: usize,
    pub hold_max: usize,
    /// Normalized `(low, high)` per channel.
    pub amplitude: Vec<(f64, f64)>,
    pub seed: u64,
}

impl Default for MprsConfig {
    fn default() -> Self {
        MprsConfig {
            levels: 9,
            hold_min: 4,
            hold_max: 60,
            amplitude: vec![(-1.0, 1.0); 2],
            seed: 0,
        }
    }
}

impl MprsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ImcError::Config(format!("MPRS: {m}")));
        if self.levels == 0 {
            return bad("at least one level is required".into());
        }
        if self.hold_min == 0 || self.hold_min > self.hold_max {
            return bad(format!("hold range [{}, {}] is invalid", self.hold_min, self.hold_max));
        }
        if self.amplitude.is_empty() {
            return bad("no channels".into());
        }
        for &(lo, hi) in &self.amplitude {
            if !(-1.0 <= lo && lo <= hi && hi <= 1.0) {
                return bad(format!("amplitude ({lo}, {hi}) must be ordered inside [-1, 1]"));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.amplitude.len()
    }

    fn level(&self, channel: usize, j: usize) -> f64 {
        let (lo, hi) = self.amplitude[channel];
        if self.levels == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * j as f64 / (self.levels - 1) as f64
        }
    }
}

/// Generates `length` samples; the same config and seed give the same signal.
pub fn gen_mprs(cfg: &MprsConfig, length: usize) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if length == 0 {
        return Err(ImcError::InvalidArgument("MPRS length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.channels();
    let mut out = vec![vec![0.0; m]; length];
    for c in 0..m {
        let mut k = 0;
        while k < length {
            let value = cfg.level(c, rng.random_range(0..cfg.levels));
            let hold = rng.random_range(cfg.hold_min..=cfg.hold_max);
            for row in out.iter_mut().skip(k).take(hold) {
                row[c] = value;
            }
            k += hold;
        }
    }
    Ok(out)
}
