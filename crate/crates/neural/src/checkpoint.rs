use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dense::{Activation, Dense, DenseNet};
use crate::optim::Optimizer;
use crate::{NeuralError, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON snapshot of a network and its training state.
///
/// `metadata` carries owner-specific fields (normalisation constants,
/// generator ids, configuration echoes) that the engine does not interpret.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub params: Vec<f64>,
    pub optimizer: Option<Optimizer>,
    pub seed: u64,
    pub epoch: usize,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn capture(net: &DenseNet, optimizer: Option<&Optimizer>, seed: u64, epoch: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            widths: net.widths(),
            activations: net.activations(),
            params: net.flat_params(),
            optimizer: optimizer.cloned(),
            seed,
            epoch,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn restore(&self) -> Result<DenseNet, NeuralError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Format(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        if self.widths.len() != self.activations.len() + 1 {
            return Err(NeuralError::Format(
                "widths and activations disagree".into(),
            ));
        }
        let mut layers = Vec::with_capacity(self.activations.len());
        for (i, &act) in self.activations.iter().enumerate() {
            let (k, n) = (self.widths[i], self.widths[i + 1]);
            layers.push(Dense {
                weight: Tensor::zeros(k, n),
                bias: Tensor::zeros(1, n),
                activation: act,
            });
        }
        let mut net = DenseNet::from_layers(layers)?;
        net.set_flat_params(&self.params)?;
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String, NeuralError> {
        serde_json::to_string_pretty(self).map_err(|e| NeuralError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, NeuralError> {
        serde_json::from_str(text).map_err(|e| NeuralError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_network_bitwise() {
        let net = DenseNet::new(&[4, 6, 2], Activation::Tanh, Activation::Sigmoid, 3).unwrap();
        let mut opt = Optimizer::adam(1e-3).unwrap();
        let mut p = net.flat_params();
        let g: Vec<f64> = p.iter().map(|x| x * 0.1).collect();
        opt.step_flat(&mut p, &g).unwrap();
        let ck = Checkpoint::capture(&net, Some(&opt), 3, 5);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.restore().unwrap(), net);
    }

    #[test]
    fn rejects_unknown_version() {
        let net = DenseNet::new(&[2, 2], Activation::Tanh, Activation::Identity, 0).unwrap();
        let mut ck = Checkpoint::capture(&net, None, 0, 0);
        ck.version = 99;
        assert!(ck.restore().is_err());
    }
}
