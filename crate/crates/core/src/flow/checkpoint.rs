use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FlowConfig, FlowModel};
use crate::error::{Error, Result};
use crate::series::Normalizer;

pub const CHECKPOINT_FORMAT: &str = "cindi-flow";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: hyperparameters, mask layout, flat parameters and the
/// normalizer the model was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: FlowConfig,
    /// `(passive, active)` channels per layer; checked on load.
    pub masks: Vec<(Vec<usize>, Vec<usize>)>,
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalizer: Option<Normalizer>,
}

impl Checkpoint {
    pub fn from_model(model: &FlowModel, normalizer: Option<&Normalizer>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            masks: model.masks(),
            params: model.params().values().to_vec(),
            normalizer: normalizer.cloned(),
        }
    }

    pub fn into_model(self) -> Result<FlowModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("not a flow checkpoint: '{}'", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let model = FlowModel::from_parts(self.config, &self.params)?;
        if model.masks() != self.masks {
            return Err(Error::invalid("checkpoint mask layout does not match its config"));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &FlowModel, normalizer: Option<&Normalizer>) -> Result<()> {
    let json = serde_json::to_vec(&Checkpoint::from_model(model, normalizer))?;
    crate::pipeline::write_atomic(path.as_ref(), &json)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(FlowModel, Option<Normalizer>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
    let normalizer = ckpt.normalizer.clone();
    Ok((ckpt.into_model()?, normalizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::EncoderKind;
    use crate::ndcore::Matrix;

    #[test]
    fn reload_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut m = FlowModel::new(FlowConfig::new(3, 5, 3, EncoderKind::Cnn), 4).unwrap();
        m.perturb(9, 0.2);
        let norm = Normalizer {
            mean: vec![1.0, 2.0, 3.0],
            std: vec![0.5, 0.25, 1.0 / 3.0],
        };
        save_checkpoint(&path, &m, Some(&norm)).unwrap();
        let (back, n2) = load_checkpoint(&path).unwrap();
        assert_eq!(n2.unwrap(), norm);
        let w = Matrix::from_vec(5, 3, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let x = [0.1, 0.7, -1.3];
        assert_eq!(
            m.log_likelihood(&x, &w).unwrap().to_bits(),
            back.log_likelihood(&x, &w).unwrap().to_bits()
        );
    }

    #[test]
    fn wrong_version_rejected() {
        let m = FlowModel::new(FlowConfig::new(2, 2, 2, EncoderKind::Base), 0).unwrap();
        let mut c = Checkpoint::from_model(&m, None);
        c.version = 99;
        assert!(c.into_model().is_err());
    }
}
