//! Fit and tracking measures. Everything reported here is in meters except
//! FIT, which is a percentage and unit-free.

use serde::{Deserialize, Serialize};

use crate::error::{ImcError, Result};
use crate::training::mse_washout;

/// `100 (1 − √(MSE(y_m, y_p) / MSE(y_p, ȳ_p)))`, `ȳ_p` the mean of `y_p` over
/// the same post-washout window as both MSEs.
pub fn fit_index(y_m: &[Vec<f64>], y_p: &[Vec<f64>], washout: usize) -> Result<f64> {
    let err = mse_washout(y_m, y_p, washout)?;
    let tail = &y_p[washout..];
    let p = tail[0].len();
    let mean: Vec<f64> = (0..p)
        .map(|c| tail.iter().map(|y| y[c]).sum::<f64>() / tail.len() as f64)
        .collect();
    let avg = vec![mean; y_p.len()];
    let var = mse_washout(&avg, y_p, washout)?;
    if var <= 0.0 {
        return Err(ImcError::ZeroVariance);
    }
    Ok(100.0 * (1.0 - (err / var).sqrt()))
}

/// FIT over several sequences at once: the post-washout parts are joined
/// and scored as one trajectory.
pub fn pooled_fit(pairs: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)], washout: usize) -> Result<f64> {
    let mut y_m = Vec::new();
    let mut y_p = Vec::new();
    for (m, p) in pairs {
        if m.len() != p.len() || m.len() <= washout {
            return Err(ImcError::LengthMismatch(format!(
                "pair of lengths {} and {} with washout {washout}",
                m.len(),
                p.len()
            )));
        }
        y_m.extend_from_slice(&m[washout..]);
        y_p.extend_from_slice(&p[washout..]);
    }
    if y_p.is_empty() {
        return Err(ImcError::InvalidArgument("no sequences".into()));
    }
    fit_index(&y_m, &y_p, 0)
}

/// `‖ỹ⁰ − y_p‖₂,₂ / √T`: root of the time-averaged squared Euclidean error.
pub fn tracking_rmse(reference: &[Vec<f64>], y_p: &[Vec<f64>]) -> Result<f64> {
    if reference.len() != y_p.len() {
        return Err(ImcError::LengthMismatch(format!(
            "{} reference samples vs {} outputs",
            reference.len(),
            y_p.len()
        )));
    }
    if reference.is_empty() {
        return Err(ImcError::InvalidArgument("empty trajectories".into()));
    }
    let sum: f64 = reference
        .iter()
        .zip(y_p)
        .map(|(r, y)| r.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok((sum / reference.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteadyStateConfig {
    /// Trailing periods of each hold averaged as the steady output.
    pub window: usize,
    /// Largest per-period change inside the window still counted as settled, meters.
    pub drift_threshold: f64,
}

impl Default for SteadyStateConfig {
    fn default() -> Self {
        SteadyStateConfig {
            window: 10,
            drift_threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateEntry {
    pub segment: usize,
    pub setpoint_m: Vec<f64>,
    pub output_m: Vec<f64>,
    /// `‖y⁰_ss − y_p,ss‖₂`, meters.
    pub error_m: f64,
    /// Largest per-period change inside the window, meters.
    pub drift_m: f64,
    pub settled: bool,
}

/// Per-segment steady-state errors and their mean `ε̂_ss` and max `ε̌_ss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateSummary {
    pub mean_m: f64,
    pub max_m: f64,
    pub entries: Vec<SteadyStateEntry>,
}

impl SteadyStateSummary {
    pub fn all_settled(&self) -> bool {
        self.entries.iter().all(|e| e.settled)
    }
}

/// `setpoints_m[i]` is held over `ranges[i]`; `y_p_m` is the noise-free
/// plant output in meters.
pub fn steady_state_errors(
    y_p_m: &[Vec<f64>],
    setpoints_m: &[Vec<f64>],
    ranges: &[(usize, usize)],
    cfg: &SteadyStateConfig,
) -> Result<SteadyStateSummary> {
    if setpoints_m.len() != ranges.len() || ranges.is_empty() {
        return Err(ImcError::LengthMismatch(format!(
            "{} set-points for {} segments",
            setpoints_m.len(),
            ranges.len()
        )));
    }
    if cfg.window == 0 {
        return Err(ImcError::Config("steady-state window must be positive".into()));
    }
    let mut entries = Vec::with_capacity(ranges.len());
    for (i, (&(a, b), sp)) in ranges.iter().zip(setpoints_m).enumerate() {
        if b > y_p_m.len() || b < a + cfg.window {
            return Err(ImcError::InvalidArgument(format!(
                "segment {i} [{a}, {b}) does not fit a {}-period window in a {}-period log",
                cfg.window,
                y_p_m.len()
            )));
        }
        let win = &y_p_m[b - cfg.window..b];
        let p = sp.len();
        let output_m: Vec<f64> = (0..p)
            .map(|c| win.iter().map(|y| y[c]).sum::<f64>() / cfg.window as f64)
            .collect();
        let error_m = sp
            .iter()
            .zip(&output_m)
            .map(|(s, y)| (s - y) * (s - y))
            .sum::<f64>()
            .sqrt();
        let drift_m = win
            .windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        entries.push(SteadyStateEntry {
            segment: i,
            setpoint_m: sp.clone(),
            output_m,
            error_m,
            drift_m,
            settled: drift_m <= cfg.drift_threshold,
        });
    }
    let max_m = entries.iter().map(|e| e.error_m).fold(0.0, f64::max);
    let mean_m = entries.iter().map(|e| e.error_m).sum::<f64>() / entries.len() as f64;
    Ok(SteadyStateSummary { mean_m, max_m, entries })
}

/// Closed-loop evaluation in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Model FIT on its test sequence, percent.
    pub fit_percent: Option<f64>,
    /// Nominal tracking FIT of controller and model on held-out references.
    #[serde(default)]
    pub controller_fit_percent: Option<f64>,
    /// Tracking RMSE of the noisy run, meters.
    pub tracking_rmse_m: Option<f64>,
    pub steady_state: Option<SteadyStateSummary>,
    pub meta: serde_json::Value,
}

impl EvalReport {
    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>, scale: f64, unit: &str| match v {
            Some(x) => format!("{:.4}{unit}", x * scale),
            None => "n/a".into(),
        };
        let ss = self.steady_state.as_ref();
        let mut s = String::new();
        s.push_str("metric                          IMC (GRU)\n");
        s.push_str(&format!(
            "FIT [%]                         {}\n",
            fmt(self.fit_percent, 1.0, "")
        ));
        s.push_str(&format!(
            "controller FIT [%]              {}\n",
            fmt(self.controller_fit_percent, 1.0, "")
        ));
        s.push_str(&format!(
            "eps_tr [m]                      {}\n",
            fmt(self.tracking_rmse_m, 1.0, "")
        ));
        s.push_str(&format!(
            "eps_ss mean [1e-2 m]            {}\n",
            fmt(ss.map(|x| x.mean_m), 100.0, "")
        ));
        s.push_str(&format!(
            "eps_ss max  [1e-2 m]            {}\n",
            fmt(ss.map(|x| x.max_m), 100.0, "")
        ));
        if let Some(ss) = ss {
            s.push_str("\nsegment  setpoint [m]        steady output [m]   error [m]   drift [m]   settled\n");
            for e in &ss.entries {
                s.push_str(&format!(
                    "{:>7}  {:<18}  {:<18}  {:<10.3e}  {:<10.3e}  {}\n",
                    e.segment,
                    format_vec(&e.setpoint_m),
                    format_vec(&e.output_m),
                    e.error_m,
                    e.drift_m,
                    if e.settled { "yes" } else { "NO" }
                ));
            }
        }
        s
    }
}

fn format_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}
