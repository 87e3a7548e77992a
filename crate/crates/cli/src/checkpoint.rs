//! JSON checkpoints. Floats are written in shortest round-trip form and
//! parsed exactly, so `load(save(net))` reproduces every bit.

use std::path::Path;

use genconv::net::LayerSpec;
use genconv::{LayerShape, Network, SeededRng, Shape, TopMode};
use serde::{Deserialize, Serialize};

use crate::data::Preprocessing;
use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub shape: LayerShape,
    pub in_channels: usize,
    /// Flat `(filter, in_channel, ky, kx)` order.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Saved position of one random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl From<&SeededRng> for RngState {
    fn from(r: &SeededRng) -> Self {
        RngState {
            seed: r.seed(),
            word_pos: r.word_pos(),
        }
    }
}

impl RngState {
    pub fn restore(&self) -> SeededRng {
        SeededRng::restore(self.seed, self.word_pos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub input: Shape,
    pub sigma_sq: f64,
    pub layers: Vec<LayerRecord>,
    /// Learning iterations completed.
    pub iteration: usize,
    /// Langevin step size used during training.
    pub epsilon: f64,
    pub seed: u64,
    /// Persistent chain streams at the end of training.
    pub rng_streams: Vec<RngState>,
    pub preprocessing: Preprocessing,
}

impl Checkpoint {
    pub fn new(net: &Network, preprocessing: Preprocessing, iteration: usize, epsilon: f64, seed: u64) -> Result<Self> {
        if !matches!(net.top_mode(), TopMode::ConvSum) {
            return Err(CliError::Checkpoint {
                path: Path::new("-").to_path_buf(),
                reason: "only conv-sum networks can be saved".into(),
            });
        }
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            input: net.input_shape(),
            sigma_sq: net.sigma_sq(),
            layers: net
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    shape: l.shape(),
                    in_channels: l.in_channels(),
                    weights: l.weights().to_vec(),
                    biases: l.biases().to_vec(),
                })
                .collect(),
            iteration,
            epsilon,
            seed,
            rng_streams: Vec::new(),
            preprocessing,
        })
    }

    pub fn network(&self) -> genconv::Result<Network> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerSpec::new(l.shape, l.in_channels, l.weights.clone(), l.biases.clone()))
            .collect::<genconv::Result<_>>()?;
        Network::new(self.input, layers, TopMode::ConvSum, self.sigma_sq)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| CliError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if c.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                c.format_version
            )));
        }
        if c.preprocessing.shape != c.input || c.preprocessing.mean_image.len() != c.input.len() {
            return Err(bad("preprocessing does not match the input shape".into()));
        }
        c.network().map_err(|e| bad(e.to_string()))?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text, path)
    }
}
