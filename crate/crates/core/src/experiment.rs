//! Base-network descriptions and the default network for each suite family.

use serde::{Deserialize, Serialize};

use crate::nn::{AttentionBlock, InputSpec, Layer, LinearLayer, Model, NnError};
use crate::seed;
use crate::tasks::{Suite, SuiteSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

fn one() -> f64 {
    1.0
}

/// Frozen base network. Layer names are fixed by the variant:
/// `mlp.<i>` and `head` for MLPs, `lin` for the single linear map,
/// `embed`, `attn.{q,k,v,o}` and `head` for the attention classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
        #[serde(default = "one")]
        gain: f64,
        #[serde(default)]
        seed: u64,
    },
    /// One bias-free linear layer. On a shared-low-rank suite its weight is
    /// the suite's base map; otherwise it is drawn at random.
    Linear {
        #[serde(default)]
        seed: u64,
    },
    Attention {
        dim: usize,
        heads: usize,
        #[serde(default = "one")]
        gain: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl ModelSpec {
    pub fn default_for(suite: &SuiteSpec) -> ModelSpec {
        match suite {
            SuiteSpec::Sinusoid { .. } => ModelSpec::Mlp {
                hidden: vec![32, 32],
                activation: Activation::Tanh,
                gain: 2.0,
                seed: 0,
            },
            SuiteSpec::SharedLowRank { .. } => ModelSpec::Linear { seed: 0 },
            SuiteSpec::Sequence { .. } => ModelSpec::Attention {
                dim: 32,
                heads: 2,
                gain: 1.0,
                seed: 0,
            },
        }
    }

    /// Layers an adapter attaches to when none are named explicitly.
    pub fn default_targets(&self) -> Vec<String> {
        match self {
            ModelSpec::Mlp { hidden, .. } => (0..hidden.len())
                .map(|i| format!("mlp.{i}"))
                .chain(std::iter::once("head".to_string()))
                .collect(),
            ModelSpec::Linear { .. } => vec!["lin".into()],
            ModelSpec::Attention { .. } => ["attn.q", "attn.k", "attn.v", "attn.o"].map(String::from).to_vec(),
        }
    }

    pub fn build(&self, suite: &Suite) -> Result<Model, NnError> {
        let (input, d_out) = match suite.spec {
            SuiteSpec::Sinusoid { .. } => (InputSpec::Features { dim: 1 }, 1),
            SuiteSpec::SharedLowRank { dim, .. } => (InputSpec::Features { dim }, dim),
            SuiteSpec::Sequence { vocab, seq_len, .. } => (InputSpec::Tokens { vocab, seq_len }, 2),
        };
        let d_in = input.width();
        match *self {
            ModelSpec::Mlp {
                ref hidden,
                activation,
                gain,
                seed,
            } => {
                if hidden.contains(&0) {
                    return Err(NnError::Config("hidden widths must be positive".into()));
                }
                let mut rng = seed::stream(&[seed::TAG_MODEL, seed]);
                let mut layers = Vec::new();
                let mut width = d_in;
                for (i, &h) in hidden.iter().enumerate() {
                    layers.push(Layer::Linear(LinearLayer::random(
                        format!("mlp.{i}"),
                        width,
                        h,
                        true,
                        gain,
                        &mut rng,
                    )));
                    layers.push(match activation {
                        Activation::Tanh => Layer::Tanh,
                        Activation::Relu => Layer::Relu,
                    });
                    width = h;
                }
                let head = LinearLayer::random("head", width, d_out, true, gain, &mut rng);
                Model::new(input, layers, head)
            }
            ModelSpec::Linear { seed } => {
                let head = match suite.basis() {
                    Some(basis) => LinearLayer::new("lin", basis.w0.clone(), None)?,
                    None => {
                        let mut rng = seed::stream(&[seed::TAG_MODEL, seed]);
                        LinearLayer::random("lin", d_in, d_out, false, 1.0, &mut rng)
                    }
                };
                Model::new(input, vec![], head)
            }
            ModelSpec::Attention { dim, heads, gain, seed } => {
                let mut rng = seed::stream(&[seed::TAG_MODEL, seed]);
                let embed = LinearLayer::random("embed", d_in, dim, false, gain, &mut rng);
                let attn = AttentionBlock::random("attn", dim, heads, gain, &mut rng)?;
                let head = LinearLayer::random("head", dim, d_out, true, gain, &mut rng);
                Model::new(
                    input,
                    vec![Layer::Linear(embed), Layer::Attention(Box::new(attn)), Layer::MeanPool],
                    head,
                )
            }
        }
    }
}

/// Where adapters go and their shape. `targets: None` means the model's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    #[serde(default)]
    pub targets: Option<Vec<String>>,
    pub rank: usize,
    pub scale: f64,
}

impl AdapterSpec {
    /// Shapes picked by the pilot sweeps in `results/`.
    pub fn default_for(suite: &SuiteSpec) -> AdapterSpec {
        let (rank, scale) = match suite {
            SuiteSpec::Sinusoid { .. } => (1, 2.0),
            SuiteSpec::SharedLowRank { .. } => (2, 8.0),
            SuiteSpec::Sequence { .. } => (4, 32.0),
        };
        AdapterSpec {
            targets: None,
            rank,
            scale,
        }
    }

    pub fn resolved_targets(&self, model: &ModelSpec) -> Vec<String> {
        self.targets.clone().unwrap_or_else(|| model.default_targets())
    }
}
