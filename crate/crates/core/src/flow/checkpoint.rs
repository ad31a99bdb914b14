//! Versioned checkpoint container: hyperparameters, every parameter tensor
//! by name, normalization statistics, the length histogram and the validity
//! thresholds. Serialized as JSON; the shortest-roundtrip float encoding
//! makes reloads bit-exact, so a saved model reproduces outputs exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::params::restore_values;
use crate::flow::{FlowModel, HyperParams, NormStats};
use crate::geometry::{LoopClass, ValiditySpec};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub class: LoopClass,
    pub validity: ValiditySpec,
    pub hyper: HyperParams,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub length_counts: Vec<(usize, usize)>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &FlowModel) -> Self {
        let params = model
            .params
            .ids()
            .map(|id| NamedTensor {
                name: model.params.name(id).to_string(),
                shape: model.params.tensor(id).shape.clone(),
                values: model.params.tensor(id).data.clone(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            class: model.class,
            validity: model.validity,
            hyper: model.hyper.clone(),
            norm_mean: model.norm.mean.clone(),
            norm_std: model.norm.std.clone(),
            length_counts: model.length_counts.clone(),
            params,
        }
    }

    pub fn into_model(self) -> Result<FlowModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} unsupported, expected {CHECKPOINT_VERSION}",
                self.version
            )));
        }
        let mut model = FlowModel::new(self.hyper, self.class, self.validity, 0)?;
        let stored: Vec<(String, Vec<usize>, Vec<f64>)> =
            self.params.into_iter().map(|t| (t.name, t.shape, t.values)).collect();
        restore_values(&mut model.params, &stored)?;
        let n2 = model.n_max() * model.n_max();
        if self.norm_mean.len() != n2 || self.norm_std.len() != n2 {
            return Err(Error::Data("normalization statistics size mismatch".into()));
        }
        model.norm = NormStats { mean: self.norm_mean, std: self.norm_std };
        if self.length_counts.is_empty() {
            return Err(Error::Data("checkpoint has no length histogram".into()));
        }
        model.length_counts = self.length_counts;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut writer = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut writer, self)
            .map_err(|e| Error::Data(format!("checkpoint serialization failed: {e}")))?;
        use std::io::Write;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        serde_json::from_reader(reader)
            .map_err(|e| Error::Data(format!("corrupt checkpoint {path:?}: {e}")))
    }
}

/// Save a model to `path`.
pub fn save_model(model: &FlowModel, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

/// Load a model from `path`.
pub fn load_model(path: &Path) -> Result<FlowModel> {
    Checkpoint::load(path)?.into_model()
}
