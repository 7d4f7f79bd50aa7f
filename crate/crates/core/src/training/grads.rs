use crate::gru::{GruLayerWeights, GruNetwork};
use crate::linalg::Matrix;

/// Gradient carrier congruent with a [`GruNetwork`]: one array per weight
/// array, same shapes, same canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<GruLayerWeights>,
    pub u_o: Matrix,
    pub b_o: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(net: &GruNetwork) -> Self {
        GradientSet {
            layers: net
                .layers()
                .iter()
                .map(|l| GruLayerWeights::zeros(l.width(), l.input_dim()))
                .collect(),
            u_o: Matrix::zeros(net.output().u_o.rows(), net.output().u_o.cols()),
            b_o: vec![0.0; net.output().b_o.len()],
        }
    }

    pub fn arrays(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 9 + 2);
        for l in &self.layers {
            out.extend(l.arrays());
        }
        out.push(self.u_o.as_slice());
        out.push(&self.b_o);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 9 + 2);
        for l in &mut self.layers {
            out.extend(l.arrays_mut());
        }
        out.push(self.u_o.as_mut_slice());
        out.push(&mut self.b_o);
        out
    }

    /// Shapes match the network array by array.
    pub fn is_congruent(&self, net: &GruNetwork) -> bool {
        let a = self.arrays();
        let b = net.arrays();
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
            && self
                .layers
                .iter()
                .zip(net.layers())
                .all(|(g, l)| g.w_z.shape() == l.w_z.shape() && g.u_z.shape() == l.u_z.shape())
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.arrays_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.arrays()
            .iter()
            .flat_map(|a| a.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|x| x.is_finite()))
    }

    /// Flattened copy in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.arrays().concat()
    }

    /// Rescales to global ℓ₂ norm `max_norm` if larger; returns whether it did.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> bool {
        let n = self.l2_norm();
        if n > max_norm && n.is_finite() {
            self.scale(max_norm / n);
            true
        } else {
            false
        }
    }
}

/// Flattened copy of the network parameters in canonical order.
pub fn flatten_params(net: &GruNetwork) -> Vec<f64> {
    net.arrays().concat()
}

/// Writes a flat parameter vector back into the network.
pub fn unflatten_params(net: &mut GruNetwork, flat: &[f64]) {
    let mut off = 0;
    for a in net.arrays_mut() {
        let n = a.len();
        a.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    assert_eq!(off, flat.len(), "parameter vector length mismatch");
}
