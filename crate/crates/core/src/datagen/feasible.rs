use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ImcError, Result};
use crate::gru::GruNetwork;

use super::equilibrium::{input_grid, model_equilibrium, EquilibriumConfig};

/// One settled operating point of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyPoint {
    pub u: Vec<f64>,
    pub xi: Vec<f64>,
    pub y: Vec<f64>,
    pub state_residual: f64,
}

/// Attainable steady outputs of a model on an input grid, with their convex
/// hull (an interval for one output, a counter-clockwise polygon for two).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleMap {
    pub points: Vec<SteadyPoint>,
    pub hull: Vec<Vec<f64>>,
}

pub fn feasible_output_map(model: &GruNetwork, grid: usize, cfg: &EquilibriumConfig) -> Result<FeasibleMap> {
    let p = model.output_dim();
    if p == 0 || p > 2 {
        return Err(ImcError::InvalidArgument(format!(
            "feasible output maps support one or two outputs, got {p}"
        )));
    }
    let points: Vec<SteadyPoint> = input_grid(model.input_dim(), grid)
        .into_par_iter()
        .map(|u| {
            model_equilibrium(model, &u, cfg).map(|e| SteadyPoint {
                u: e.u_s,
                xi: e.xi_s,
                y: e.y_s,
                state_residual: e.state_residual,
            })
        })
        .collect::<Result<_>>()?;
    let hull = if p == 1 {
        let lo = points.iter().map(|s| s.y[0]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|s| s.y[0]).fold(f64::NEG_INFINITY, f64::max);
        vec![vec![lo], vec![hi]]
    } else {
        let pts: Vec<[f64; 2]> = points.iter().map(|s| [s.y[0], s.y[1]]).collect();
        convex_hull(&pts).into_iter().map(|q| q.to_vec()).collect()
    };
    Ok(FeasibleMap { points, hull })
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Monotone-chain convex hull, counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

impl FeasibleMap {
    pub fn output_dim(&self) -> usize {
        self.hull.first().map_or(0, |v| v.len())
    }

    /// Largest extent of the hull over the output channels.
    pub fn extent(&self) -> f64 {
        (0..self.output_dim())
            .map(|c| {
                let lo = self.hull.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
                let hi = self.hull.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            })
            .fold(0.0, f64::max)
    }

    /// Smallest distance from `y` to the hull boundary, negative outside.
    pub fn depth(&self, y: &[f64]) -> f64 {
        if self.output_dim() == 1 {
            return (y[0] - self.hull[0][0]).min(self.hull[1][0] - y[0]);
        }
        if self.hull.len() < 3 {
            return f64::NEG_INFINITY;
        }
        let q = [y[0], y[1]];
        let n = self.hull.len();
        (0..n)
            .map(|i| {
                let a = [self.hull[i][0], self.hull[i][1]];
                let b = [self.hull[(i + 1) % n][0], self.hull[(i + 1) % n][1]];
                cross(a, b, q) / ((b[0] - a[0]).hypot(b[1] - a[1]))
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Inside the hull by at least `margin · extent` and inside `[-1, 1]^p`.
    pub fn admits(&self, y: &[f64], margin: f64) -> bool {
        y.iter().all(|v| v.abs() <= 1.0) && self.depth(y) >= margin * self.extent()
    }

    /// Mean of the hull vertices.
    pub fn centroid(&self) -> Vec<f64> {
        let n = self.hull.len().max(1) as f64;
        (0..self.output_dim())
            .map(|c| self.hull.iter().map(|v| v[c]).sum::<f64>() / n)
            .collect()
    }

    /// The deepest of the vertex mean and the settled grid outputs.
    pub fn deepest_point(&self) -> Vec<f64> {
        std::iter::once(self.centroid())
            .chain(self.points.iter().map(|s| s.y.clone()))
            .filter(|y| y.iter().all(|v| v.abs() <= 1.0))
            .map(|y| (self.depth(&y), y))
            .fold(None, |best: Option<(f64, Vec<f64>)>, (d, y)| match best {
                Some((bd, _)) if bd >= d => best,
                _ => Some((d, y)),
            })
            .map_or_else(|| self.centroid(), |(_, y)| y)
    }

    /// Largest `t` with `from + t·dir` admitted, by bisection; `from` must be
    /// admitted itself.
    pub fn reach(&self, from: &[f64], dir: &[f64], margin: f64) -> f64 {
        let at = |t: f64| -> Vec<f64> { from.iter().zip(dir).map(|(a, d)| a + t * d).collect() };
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        if !self.admits(from, margin) || norm == 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, 2.0 * (from.len() as f64).sqrt() / norm + 2.0 / norm);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.admits(&at(mid), margin) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Uniform rejection sample over the admitted region.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, margin: f64, max_tries: usize) -> Option<Vec<f64>> {
        let p = self.output_dim();
        let bounds: Vec<(f64, f64)> = (0..p)
            .map(|c| {
                let lo = self.hull.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
                let hi = self.hull.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                (lo.max(-1.0), hi.min(1.0))
            })
            .collect();
        if bounds.iter().any(|(lo, hi)| lo >= hi) {
            return None;
        }
        (0..max_tries).find_map(|_| {
            let y: Vec<f64> = bounds.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect();
            self.admits(&y, margin).then_some(y)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hull_of_a_square_with_interior_points() {
        let pts = [
            [0.0, 0.0],
            [1.0, 0.0],
            [1.0, 1.0],
            [0.0, 1.0],
            [0.5, 0.5],
            [0.2, 0.7],
            [0.5, 0.0],
        ];
        let h = convex_hull(&pts);
        assert_eq!(h, vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
    }

    fn square_map() -> FeasibleMap {
        FeasibleMap {
            points: Vec::new(),
            hull: vec![vec![-0.5, -0.5], vec![0.5, -0.5], vec![0.5, 0.5], vec![-0.5, 0.5]],
        }
    }

    #[test]
    fn depth_is_signed_distance_to_the_boundary() {
        let m = square_map();
        assert!((m.depth(&[0.0, 0.0]) - 0.5).abs() < 1e-15);
        assert!((m.depth(&[0.4, 0.0]) - 0.1).abs() < 1e-15);
        assert!((m.depth(&[0.7, 0.0]) + 0.2).abs() < 1e-15);
        assert_eq!(m.extent(), 1.0);
    }

    #[test]
    fn reach_stops_at_the_inset_boundary() {
        let m = square_map();
        assert_eq!(m.centroid(), vec![0.0, 0.0]);
        assert!((m.reach(&[0.0, 0.0], &[1.0, 1.0], 0.02) - 0.48).abs() < 1e-12);
        assert!((m.reach(&[0.0, 0.0], &[0.0, -2.0], 0.02) - 0.24).abs() < 1e-12);
        assert_eq!(m.reach(&[0.6, 0.0], &[1.0, 0.0], 0.02), 0.0);
    }

    #[test]
    fn deepest_point_prefers_interior_samples() {
        // vertex mean (1/3, 1/3) sits 0.236 from the hypotenuse
        let hull = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let at = |y: Vec<f64>| SteadyPoint {
            u: vec![0.0, 0.0],
            xi: Vec::new(),
            y,
            state_residual: 0.0,
        };
        let m = FeasibleMap {
            points: vec![at(vec![0.05, 0.05]), at(vec![0.29, 0.29]), at(vec![0.6, 0.05])],
            hull,
        };
        assert!(m.depth(&m.centroid()) < m.depth(&[0.29, 0.29]));
        assert_eq!(m.deepest_point(), vec![0.29, 0.29]);
    }

    #[test]
    fn samples_respect_the_inset() {
        let m = square_map();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let y = m.sample(&mut rng, 0.02, 1000).unwrap();
            assert!(y.iter().all(|v| v.abs() <= 0.48));
        }
        assert!(m.sample(&mut rng, 0.6, 1000).is_none());
    }

    #[test]
    fn interval_map_for_one_output() {
        let m = FeasibleMap {
            points: Vec::new(),
            hull: vec![vec![-0.2], vec![0.6]],
        };
        assert!(m.admits(&[0.0], 0.02));
        assert!(!m.admits(&[0.59], 0.02));
        assert!((m.depth(&[0.5]) - 0.1).abs() < 1e-15);
    }
}
