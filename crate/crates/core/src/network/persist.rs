//! JSON model files: `{"format_version": 1, "config": …, "layers": [{"w": [[…]], "b": […]}]}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Ensemble, Model, ModelConfig};
use crate::error::{EdlError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerFile {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelBody {
    config: ModelConfig,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    #[serde(flatten)]
    body: ModelBody,
}

#[derive(Serialize, Deserialize)]
struct EnsembleFile {
    format_version: u32,
    members: Vec<ModelBody>,
}

impl Model {
    fn to_body(&self) -> ModelBody {
        let layers = self
            .shapes
            .iter()
            .map(|s| LayerFile {
                w: self.params[s.weights()]
                    .chunks(s.fan_in)
                    .map(<[f64]>::to_vec)
                    .collect(),
                b: self.params[s.bias()].to_vec(),
            })
            .collect();
        ModelBody {
            config: self.config.clone(),
            layers,
        }
    }

    fn from_body(body: ModelBody) -> Result<Self> {
        let mut model = Model::new(body.config)?;
        if body.layers.len() != model.shapes.len() {
            return Err(EdlError::ModelFormat(format!(
                "config implies {} layers, file has {}",
                model.shapes.len(),
                body.layers.len()
            )));
        }
        for (shape, layer) in model.shapes.clone().iter().zip(body.layers) {
            let rows_ok = layer.w.len() == shape.fan_out && layer.w.iter().all(|r| r.len() == shape.fan_in);
            if !rows_ok || layer.b.len() != shape.fan_out {
                return Err(EdlError::ModelFormat(format!(
                    "layer shape does not match {}×{}",
                    shape.fan_out, shape.fan_in
                )));
            }
            let flat: Vec<f64> = layer.w.into_iter().flatten().collect();
            model.params[shape.weights()].copy_from_slice(&flat);
            model.params[shape.bias()].copy_from_slice(&layer.b);
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(EdlError::ModelFormat("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile {
            format_version: FORMAT_VERSION,
            body: self.to_body(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(s).map_err(|e| EdlError::ModelFormat(e.to_string()))?;
        check_version(file.format_version)?;
        Self::from_body(file.body)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| EdlError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| EdlError::io(path, e))?)
    }
}

impl Ensemble {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&EnsembleFile {
            format_version: FORMAT_VERSION,
            members: self.members().iter().map(Model::to_body).collect(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: EnsembleFile =
            serde_json::from_str(s).map_err(|e| EdlError::ModelFormat(e.to_string()))?;
        check_version(file.format_version)?;
        let members = file
            .members
            .into_iter()
            .map(Model::from_body)
            .collect::<Result<Vec<_>>>()?;
        Ensemble::from_members(members)
    }
}

fn check_version(v: u32) -> Result<()> {
    if v == FORMAT_VERSION {
        Ok(())
    } else {
        Err(EdlError::ModelFormat(format!(
            "unsupported format_version {v}, expected {FORMAT_VERSION}"
        )))
    }
}
