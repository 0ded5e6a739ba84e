//! Checkpoint files.
//!
//! A checkpoint is a single JSON document. Flow checkpoints carry the four
//! networks of a training run; each tensor is stored as base64 of its
//! little-endian `f64` bytes in row-major order. Gaussian checkpoints carry a
//! linear-Gaussian policy `N(−Kx, Σ)` as plain nested arrays.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use flowsac_core::flow_policy::FlowPolicy;
use flowsac_core::lqr::GaussianPolicy;
use flowsac_core::nn::{Activation, Layer, MlpParams};
use flowsac_core::sac::SacState;
use flowsac_core::{Matrix, Vector};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const FORMAT: &str = "flowsac-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub writer: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub alpha: f64,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Body {
    Flow {
        episode: usize,
        ode_steps: usize,
        networks: Networks,
    },
    Gaussian {
        #[serde(rename = "K")]
        k: Vec<Vec<f64>>,
        #[serde(rename = "Sigma")]
        sigma: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Networks {
    pub theta: NetRecord,
    pub theta_bar: NetRecord,
    pub psi: NetRecord,
    pub psi_bar: NetRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetRecord {
    pub activation: String,
    /// Layer widths from input to output.
    pub sizes: Vec<usize>,
    /// `weight` (out × in) then `bias` for each layer.
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(format!("checkpoint: {}", msg.into()))
}

fn encode(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode(name: &str, data: &str, len: usize) -> Result<Vec<f64>, CliError> {
    let bytes = STANDARD.decode(data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
    if bytes.len() != len * 8 {
        return Err(bad(format!(
            "tensor {name} holds {} bytes, expected {}",
            bytes.len(),
            len * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl NetRecord {
    pub fn from_params(net: &MlpParams) -> Self {
        let mut tensors = Vec::new();
        for (l, layer) in net.layers().iter().enumerate() {
            let w = layer.weight();
            tensors.push(TensorRecord {
                name: format!("layer{l}.weight"),
                shape: vec![w.rows(), w.cols()],
                data: encode(w.as_slice()),
            });
            tensors.push(TensorRecord {
                name: format!("layer{l}.bias"),
                shape: vec![layer.bias().dim()],
                data: encode(layer.bias().as_slice()),
            });
        }
        NetRecord {
            activation: net.activation().id().to_string(),
            sizes: net.sizes(),
            tensors,
        }
    }

    pub fn to_params(&self) -> Result<MlpParams, CliError> {
        let activation = Activation::from_id(&self.activation)
            .ok_or_else(|| bad(format!("unknown activation `{}`", self.activation)))?;
        if self.sizes.len() < 2 || self.tensors.len() != 2 * (self.sizes.len() - 1) {
            return Err(bad("layer sizes and tensor count disagree"));
        }
        let mut layers = Vec::new();
        for (l, pair) in self.tensors.chunks_exact(2).enumerate() {
            let (rows, cols) = (self.sizes[l + 1], self.sizes[l]);
            let (w, b) = (&pair[0], &pair[1]);
            if w.shape != [rows, cols] || b.shape != [rows] {
                return Err(bad(format!("layer {l} tensors have unexpected shapes")));
            }
            let weight = Matrix::new(rows, cols, decode(&w.name, &w.data, rows * cols)?)
                .map_err(|e| bad(format!("{}: {e}", w.name)))?;
            let bias = Vector::new(decode(&b.name, &b.data, rows)?).map_err(|e| bad(format!("{}: {e}", b.name)))?;
            layers.push(Layer::new(weight, bias).map_err(|e| bad(e.to_string()))?);
        }
        MlpParams::new(layers, activation).map_err(|e| bad(e.to_string()))
    }
}

impl Checkpoint {
    pub fn from_training(state: &SacState, alpha: f64, ode_steps: usize) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            writer: concat!("flowsac ", env!("CARGO_PKG_VERSION")).to_string(),
            state_dim: state.state_dim,
            action_dim: state.action_dim,
            alpha,
            body: Body::Flow {
                episode: state.episode,
                ode_steps,
                networks: Networks {
                    theta: NetRecord::from_params(&state.theta),
                    theta_bar: NetRecord::from_params(&state.theta_bar),
                    psi: NetRecord::from_params(&state.psi),
                    psi_bar: NetRecord::from_params(&state.psi_bar),
                },
            },
        }
    }

    pub fn from_gaussian(policy: &GaussianPolicy, alpha: f64) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            writer: concat!("flowsac ", env!("CARGO_PKG_VERSION")).to_string(),
            state_dim: policy.k().cols(),
            action_dim: policy.k().rows(),
            alpha,
            body: Body::Gaussian {
                k: policy.k().to_rows(),
                sigma: policy.sigma().to_rows(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if ckpt.format != FORMAT {
            return Err(bad(format!("unexpected format `{}`", ckpt.format)));
        }
        if ckpt.version != VERSION {
            return Err(bad(format!("unsupported version {}", ckpt.version)));
        }
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Checkpoint::from_json(&text)
    }

    /// The policy stored in this checkpoint, ready for sampling.
    pub fn policy(&self, ode_steps: Option<usize>) -> Result<LoadedPolicy, CliError> {
        match &self.body {
            Body::Flow {
                ode_steps: stored,
                networks,
                ..
            } => {
                let net = networks.theta.to_params()?;
                let flow = FlowPolicy::new(net, self.state_dim, self.action_dim, ode_steps.unwrap_or(*stored))
                    .map_err(|e| bad(e.to_string()))?;
                Ok(LoadedPolicy::Flow(flow))
            }
            Body::Gaussian { k, sigma } => {
                let k = Matrix::from_rows(k).map_err(|e| bad(format!("K: {e}")))?;
                let sigma = Matrix::from_rows(sigma).map_err(|e| bad(format!("Sigma: {e}")))?;
                if k.rows() != self.action_dim || k.cols() != self.state_dim {
                    return Err(bad("K shape disagrees with state_dim/action_dim"));
                }
                Ok(LoadedPolicy::Gaussian(
                    GaussianPolicy::new(k, sigma).map_err(|e| bad(format!("Sigma: {e}")))?,
                ))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum LoadedPolicy {
    Flow(FlowPolicy),
    Gaussian(GaussianPolicy),
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowsac_core::rng::{stream_rng, Stream};
    use flowsac_core::sac::SacConfig;

    #[test]
    fn flow_round_trip_is_exact() {
        let cfg = SacConfig {
            hidden_pi: vec![4, 3],
            hidden_q: vec![5],
            ..SacConfig::default()
        };
        let state = SacState::init(2, 1, &cfg, 7).unwrap();
        let ckpt = Checkpoint::from_training(&state, 0.5, 16);
        let back = Checkpoint::from_json(&ckpt.to_json()).unwrap();
        assert_eq!(back, ckpt);
        let Body::Flow { networks, .. } = &back.body else {
            panic!("expected flow body")
        };
        assert_eq!(networks.theta.to_params().unwrap(), state.theta);
        assert_eq!(networks.psi_bar.to_params().unwrap(), state.psi_bar);
        let LoadedPolicy::Flow(flow) = back.policy(None).unwrap() else {
            panic!("expected flow policy")
        };
        let mut rng = stream_rng(1, Stream::Samples, 0);
        let x = Vector::new(vec![0.3, -0.2]).unwrap();
        let direct = FlowPolicy::new(state.theta.clone(), 2, 1, 16).unwrap();
        let mut rng2 = stream_rng(1, Stream::Samples, 0);
        assert_eq!(
            flow.sample(&x, &mut rng).unwrap(),
            direct.sample(&x, &mut rng2).unwrap()
        );
    }

    #[test]
    fn gaussian_round_trip() {
        let p = GaussianPolicy::new(
            Matrix::from_rows(&[vec![0.1, 0.2]]).unwrap(),
            Matrix::from_rows(&[vec![0.3]]).unwrap(),
        )
        .unwrap();
        let ckpt = Checkpoint::from_gaussian(&p, 1.0);
        let back = Checkpoint::from_json(&ckpt.to_json()).unwrap();
        let LoadedPolicy::Gaussian(g) = back.policy(None).unwrap() else {
            panic!("expected gaussian policy")
        };
        assert_eq!(g, p);
    }

    #[test]
    fn corrupted_payload_rejected() {
        let cfg = SacConfig {
            hidden_pi: vec![2],
            hidden_q: vec![2],
            ..SacConfig::default()
        };
        let state = SacState::init(1, 1, &cfg, 0).unwrap();
        let mut ckpt = Checkpoint::from_training(&state, 1.0, 8);
        if let Body::Flow { networks, .. } = &mut ckpt.body {
            networks.theta.tensors[0].data = STANDARD.encode([0u8; 3]);
        }
        let back = Checkpoint::from_json(&ckpt.to_json()).unwrap();
        assert!(back.policy(None).is_err());
    }
}
