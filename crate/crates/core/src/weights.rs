//! Versioned JSON weight files.
//!
//! ```json
//! { "format_version": 1, "role": "model" | "controller",
//!   "dims": { "input_dim": m, "layer_widths": [n_1, …], "output_dim": p },
//!   "layers": [ { "w_z": [...], "w_f": [...], "w_r": [...],
//!                 "u_z": [...], "u_f": [...], "u_r": [...],
//!                 "b_z": [...], "b_f": [...], "b_r": [...] } ],
//!   "output": { "activation": "identity" | "tanh", "u_o": [...], "b_o": [...] } }
//! ```
//!
//! Matrices are flattened row-major. Keys are always written in the order
//! above; the reader checks every array length against `dims` before
//! building the network.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ImcError, Result};
use crate::gru::{GruLayerWeights, GruNetwork, OutputActivation, OutputMap, Topology};
use crate::linalg::Matrix;

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkRole {
    Model,
    Controller,
}

impl NetworkRole {
    pub fn activation(self) -> OutputActivation {
        match self {
            NetworkRole::Model => OutputActivation::Identity,
            NetworkRole::Controller => OutputActivation::Tanh,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    w_z: Vec<f64>,
    w_f: Vec<f64>,
    w_r: Vec<f64>,
    u_z: Vec<f64>,
    u_f: Vec<f64>,
    u_r: Vec<f64>,
    b_z: Vec<f64>,
    b_f: Vec<f64>,
    b_r: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputRecord {
    activation: OutputActivation,
    u_o: Vec<f64>,
    b_o: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightFile {
    format_version: u32,
    role: NetworkRole,
    dims: Topology,
    layers: Vec<LayerRecord>,
    output: OutputRecord,
}

pub fn to_json(net: &GruNetwork, role: NetworkRole) -> Result<String> {
    if net.output().activation != role.activation() {
        return Err(ImcError::Format(format!(
            "{role:?} networks use a {:?} output map, found {:?}",
            role.activation(),
            net.output().activation
        )));
    }
    let layers = net
        .layers()
        .iter()
        .map(|l| LayerRecord {
            w_z: l.w_z.as_slice().to_vec(),
            w_f: l.w_f.as_slice().to_vec(),
            w_r: l.w_r.as_slice().to_vec(),
            u_z: l.u_z.as_slice().to_vec(),
            u_f: l.u_f.as_slice().to_vec(),
            u_r: l.u_r.as_slice().to_vec(),
            b_z: l.b_z.clone(),
            b_f: l.b_f.clone(),
            b_r: l.b_r.clone(),
        })
        .collect();
    let file = WeightFile {
        format_version: WEIGHTS_FORMAT_VERSION,
        role,
        dims: net.topology(),
        layers,
        output: OutputRecord {
            activation: net.output().activation,
            u_o: net.output().u_o.as_slice().to_vec(),
            b_o: net.output().b_o.clone(),
        },
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<(GruNetwork, NetworkRole)> {
    let file: WeightFile = serde_json::from_str(text)?;
    if file.format_version != WEIGHTS_FORMAT_VERSION {
        return Err(ImcError::Format(format!(
            "unsupported weight format version {} (expected {WEIGHTS_FORMAT_VERSION})",
            file.format_version
        )));
    }
    file.dims.validate()?;
    if file.output.activation != file.role.activation() {
        return Err(ImcError::Format(format!(
            "role {:?} requires {:?} output activation, file declares {:?}",
            file.role,
            file.role.activation(),
            file.output.activation
        )));
    }
    let widths = &file.dims.layer_widths;
    if file.layers.len() != widths.len() {
        return Err(ImcError::dims("layer count", widths.len(), file.layers.len()));
    }
    let mut layers = Vec::with_capacity(widths.len());
    let mut input = file.dims.input_dim;
    for (i, (rec, &n)) in file.layers.into_iter().zip(widths).enumerate() {
        let mat = |name: &str, data: Vec<f64>, cols: usize| {
            Matrix::from_row_major(n, cols, data)
                .map_err(|_| ImcError::dims(format!("layer {} {name}", i + 1), n * cols, "a different count"))
        };
        let vector = |name: &str, data: Vec<f64>| {
            if data.len() != n {
                Err(ImcError::dims(format!("layer {} {name}", i + 1), n, data.len()))
            } else {
                Ok(data)
            }
        };
        layers.push(GruLayerWeights {
            w_z: mat("W_z", rec.w_z, input)?,
            w_f: mat("W_f", rec.w_f, input)?,
            w_r: mat("W_r", rec.w_r, input)?,
            u_z: mat("U_z", rec.u_z, n)?,
            u_f: mat("U_f", rec.u_f, n)?,
            u_r: mat("U_r", rec.u_r, n)?,
            b_z: vector("b_z", rec.b_z)?,
            b_f: vector("b_f", rec.b_f)?,
            b_r: vector("b_r", rec.b_r)?,
        });
        input = n;
    }
    let p = file.dims.output_dim;
    let u_o = Matrix::from_row_major(p, input, file.output.u_o)
        .map_err(|_| ImcError::dims("output U_o", p * input, "a different count"))?;
    if file.output.b_o.len() != p {
        return Err(ImcError::dims("output b_o", p, file.output.b_o.len()));
    }
    let net = GruNetwork::new(
        layers,
        OutputMap {
            u_o,
            b_o: file.output.b_o,
            activation: file.output.activation,
        },
    )?;
    Ok((net, file.role))
}

pub fn save(net: &GruNetwork, role: NetworkRole, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json(net, role)?).map_err(|e| ImcError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(GruNetwork, NetworkRole)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ImcError::io(path, e))?;
    from_json(&text)
}
