//! Independent scalar re-evaluation of the deep GRU and its residual, used as
//! an oracle against the library implementation. Generic over the scalar so
//! finite differences can run in double-double precision.
#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

pub mod cases;
pub mod dd;
pub mod nets;

use std::ops::{Add, Div, Mul, Neg, Sub};

use dd::Dd;
use imc_core::{GruNetwork, OutputActivation};

pub trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn sigmoid(self) -> Self {
        Self::of(1.0) / (Self::of(1.0) + (-self).exp())
    }
    fn max(self, o: Self) -> Self {
        if o > self {
            o
        } else {
            self
        }
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

impl Real for Dd {
    fn of(x: f64) -> Self {
        Dd::new(x)
    }
    fn to_f64(self) -> f64 {
        Dd::to_f64(self)
    }
    fn exp(self) -> Self {
        Dd::exp(self)
    }
    fn tanh(self) -> Self {
        Dd::tanh(self)
    }
    fn abs(self) -> Self {
        Dd::abs(self)
    }
    fn sigmoid(self) -> Self {
        Dd::sigmoid(self)
    }
}

pub struct OracleLayer<R> {
    pub n: usize,
    pub m: usize,
    /// `[W_z, W_f, W_r]`, each `n × m`
    pub w: [Vec<Vec<R>>; 3],
    /// `[U_z, U_f, U_r]`, each `n × n`
    pub u: [Vec<Vec<R>>; 3],
    pub b: [Vec<R>; 3],
}

pub struct OracleNet<R> {
    pub layers: Vec<OracleLayer<R>>,
    pub uo: Vec<Vec<R>>,
    pub bo: Vec<R>,
    pub tanh_out: bool,
}

fn rows<R: Real>(flat: &[R], r: usize, c: usize) -> Vec<Vec<R>> {
    assert_eq!(flat.len(), r * c);
    (0..r).map(|i| flat[i * c..(i + 1) * c].to_vec()).collect()
}

/// Array lengths of `net` in canonical order.
pub fn array_lengths(net: &GruNetwork) -> Vec<usize> {
    net.arrays().iter().map(|a| a.len()).collect()
}

impl<R: Real> OracleNet<R> {
    pub fn from_net(net: &GruNetwork) -> Self {
        let flat: Vec<R> = net.arrays().iter().flat_map(|a| a.iter()).map(|&x| R::of(x)).collect();
        Self::from_flat(net, &flat)
    }

    /// Builds the oracle from a flat parameter vector laid out like `net`.
    pub fn from_flat(net: &GruNetwork, flat: &[R]) -> Self {
        let lens = array_lengths(net);
        let mut arrays: Vec<&[R]> = Vec::with_capacity(lens.len());
        let mut off = 0;
        for l in &lens {
            arrays.push(&flat[off..off + l]);
            off += l;
        }
        assert_eq!(off, flat.len());
        let mut layers = Vec::new();
        let mut m = net.input_dim();
        for (l, &n) in net.topology().layer_widths.iter().enumerate() {
            let a = &arrays[l * 9..(l + 1) * 9];
            layers.push(OracleLayer {
                n,
                m,
                w: [rows(a[0], n, m), rows(a[1], n, m), rows(a[2], n, m)],
                u: [rows(a[3], n, n), rows(a[4], n, n), rows(a[5], n, n)],
                b: [a[6].to_vec(), a[7].to_vec(), a[8].to_vec()],
            });
            m = n;
        }
        let k = arrays.len();
        OracleNet {
            layers,
            uo: rows(arrays[k - 2], net.output_dim(), m),
            bo: arrays[k - 1].to_vec(),
            tanh_out: net.output().activation == OutputActivation::Tanh,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.layers.iter().map(|l| l.n).sum()
    }

    /// One step written directly from the gate equations; returns the new
    /// concatenated state and the output.
    pub fn step(&self, xi: &[R], input: &[R]) -> (Vec<R>, Vec<R>) {
        let zero = R::of(0.0);
        let one = R::of(1.0);
        let mut next = Vec::with_capacity(xi.len());
        let mut v = input.to_vec();
        let mut off = 0;
        for layer in &self.layers {
            let x = &xi[off..off + layer.n];
            let gate = |g: usize, i: usize| {
                let mut a = layer.b[g][i];
                for j in 0..layer.m {
                    a = a + layer.w[g][i][j] * v[j];
                }
                for j in 0..layer.n {
                    a = a + layer.u[g][i][j] * x[j];
                }
                a.sigmoid()
            };
            let f: Vec<R> = (0..layer.n).map(|i| gate(1, i)).collect();
            let mut out = vec![zero; layer.n];
            for i in 0..layer.n {
                let z = gate(0, i);
                let mut a = layer.b[2][i];
                for j in 0..layer.m {
                    a = a + layer.w[2][i][j] * v[j];
                }
                for j in 0..layer.n {
                    a = a + layer.u[2][i][j] * (f[j] * x[j]);
                }
                out[i] = z * x[i] + (one - z) * a.tanh();
            }
            next.extend_from_slice(&out);
            v = out;
            off += layer.n;
        }
        let mut y = self.bo.clone();
        for (i, yi) in y.iter_mut().enumerate() {
            for j in 0..v.len() {
                *yi = *yi + self.uo[i][j] * v[j];
            }
            if self.tanh_out {
                *yi = yi.tanh();
            }
        }
        (next, y)
    }

    pub fn outputs(&self, initial: &[R], inputs: &[Vec<R>]) -> Vec<Vec<R>> {
        let mut xi = initial.to_vec();
        inputs
            .iter()
            .map(|u| {
                let (nx, y) = self.step(&xi, u);
                xi = nx;
                y
            })
            .collect()
    }

    pub fn residuals(&self) -> Vec<R> {
        self.layers.iter().map(oracle_residual).collect()
    }
}

fn row_sum_norm<R: Real>(blocks: &[&Vec<Vec<R>>], bias: Option<&Vec<R>>, n: usize) -> R {
    let mut best = R::of(0.0);
    for i in 0..n {
        let mut s = R::of(0.0);
        for b in blocks {
            for &x in &b[i] {
                s = s + x.abs();
            }
        }
        if let Some(b) = bias {
            s = s + b[i].abs();
        }
        best = best.max(s);
    }
    best
}

pub fn oracle_residual<R: Real>(l: &OracleLayer<R>) -> R {
    let q = R::of(0.25);
    let one = R::of(1.0);
    let sz = row_sum_norm(&[&l.w[0], &l.u[0]], Some(&l.b[0]), l.n).sigmoid();
    let sf = row_sum_norm(&[&l.w[1], &l.u[1]], Some(&l.b[1]), l.n).sigmoid();
    let pr = row_sum_norm(&[&l.w[2], &l.u[2]], Some(&l.b[2]), l.n).tanh();
    let uz = row_sum_norm(&[&l.u[0]], None, l.n);
    let uf = row_sum_norm(&[&l.u[1]], None, l.n);
    let ur = row_sum_norm(&[&l.u[2]], None, l.n);
    ur * (q * uf + sf) + q * (one + pr) / (one - sz) * uz - one
}

pub fn oracle_mse<R: Real>(a: &[Vec<R>], b: &[Vec<R>], washout: usize) -> R {
    let mut s = R::of(0.0);
    for k in washout..a.len() {
        for j in 0..a[k].len() {
            let e = a[k][j] - b[k][j];
            s = s + e * e;
        }
    }
    s / R::of((a.len() - washout) as f64)
}

pub fn oracle_penalty<R: Real>(net: &OracleNet<R>, target: f64, slope: f64) -> R {
    let mut s = R::of(0.0);
    for nu in net.residuals() {
        s = s + R::of(slope) * (nu - R::of(target)).max(R::of(0.0));
    }
    s
}

pub fn lift<R: Real>(seq: &[Vec<f64>]) -> Vec<Vec<R>> {
    seq.iter().map(|r| r.iter().map(|&x| R::of(x)).collect()).collect()
}

pub fn lift_vec<R: Real>(v: &[f64]) -> Vec<R> {
    v.iter().map(|&x| R::of(x)).collect()
}

/// Central differences of `loss` at the parameters of `net`, evaluated in
/// double-double precision: `(L(p + h e_i) − L(p − h e_i)) / 2h`.
pub fn central_differences_dd(net: &GruNetwork, h: f64, loss: impl Fn(&[Dd]) -> Dd) -> Vec<f64> {
    let base: Vec<Dd> = net
        .arrays()
        .iter()
        .flat_map(|a| a.iter())
        .map(|&x| Dd::new(x))
        .collect();
    let hd = Dd::new(h);
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + hd;
            let up = loss(&p);
            p[i] = base[i] - hd;
            let down = loss(&p);
            ((up - down) / (hd + hd)).to_f64()
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let d = a.abs().max(b.abs());
    if d == 0.0 {
        0.0
    } else {
        (a - b).abs() / d
    }
}
