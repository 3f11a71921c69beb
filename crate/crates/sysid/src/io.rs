//! Model serialization. The saved form is JSON with shortest round-trip
//! float encoding, so a loaded model reproduces simulations bit-exactly.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SysidError};
use crate::model::{Layer, ModelParams, ModelSpec, SaturationConfig};
use crate::objectives::Scaling;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedMatrix {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

impl SavedMatrix {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        SavedMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(SysidError::Serialization(format!(
                "matrix data length {} does not match {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedLayer {
    w: SavedMatrix,
    b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedParams {
    x0_list: Vec<Vec<f64>>,
    a: SavedMatrix,
    b: SavedMatrix,
    c: SavedMatrix,
    /// Absent when the model has no feedthrough.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d: Option<SavedMatrix>,
    theta_x: Vec<SavedLayer>,
    theta_y: Vec<SavedLayer>,
}

/// A trained model with everything needed to evaluate it on new data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub version: String,
    pub spec: ModelSpec,
    params: SavedParams,
    pub sat: SaturationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<Scaling>,
}

impl SavedModel {
    pub fn new(
        spec: &ModelSpec,
        params: &ModelParams,
        sat: &SaturationConfig,
        scaling: Option<Scaling>,
    ) -> Self {
        let saved = SavedParams {
            x0_list: params
                .x0_list
                .iter()
                .map(|x| x.iter().copied().collect())
                .collect(),
            a: SavedMatrix::from(&params.a),
            b: SavedMatrix::from(&params.b),
            c: SavedMatrix::from(&params.c),
            d: if spec.feedthrough {
                Some(SavedMatrix::from(&params.d))
            } else {
                None
            },
            theta_x: params
                .theta_x
                .iter()
                .map(|l| SavedLayer {
                    w: SavedMatrix::from(&l.w),
                    b: l.b.iter().copied().collect(),
                })
                .collect(),
            theta_y: params
                .theta_y
                .iter()
                .map(|l| SavedLayer {
                    w: SavedMatrix::from(&l.w),
                    b: l.b.iter().copied().collect(),
                })
                .collect(),
        };
        SavedModel {
            version: env!("CARGO_PKG_VERSION").to_string(),
            spec: spec.clone(),
            params: saved,
            sat: sat.clone(),
            scaling,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        let spec = &self.spec;
        let to_layers = |layers: &[SavedLayer]| -> Result<Vec<Layer>> {
            layers
                .iter()
                .map(|l| {
                    Ok(Layer {
                        w: l.w.to_matrix()?,
                        b: DVector::from_row_slice(&l.b),
                    })
                })
                .collect()
        };
        Ok(ModelParams {
            x0_list: self
                .params
                .x0_list
                .iter()
                .map(|x| DVector::from_row_slice(x))
                .collect(),
            a: self.params.a.to_matrix()?,
            b: self.params.b.to_matrix()?,
            c: self.params.c.to_matrix()?,
            d: match &self.params.d {
                Some(m) => m.to_matrix()?,
                None => DMatrix::zeros(spec.n_y, spec.n_u),
            },
            theta_x: to_layers(&self.params.theta_x)?,
            theta_y: to_layers(&self.params.theta_y)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| SysidError::Serialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SysidError::Serialization(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| SysidError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SysidError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text)
    }
}
