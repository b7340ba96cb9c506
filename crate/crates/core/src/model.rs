//! Learnable parameters of the full model and its ablation variants.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::dynamics::{DynamicsVars, MlpVars};
use crate::encoder::{EncoderVars, GruVars, HeadVars};
use crate::error::{Error, Result};

/// Model variants; everything but `Full` removes one component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// Drops the salience force and the weighting parameter.
    NoSalience,
    /// Replaces the dynamical system by `α·MLP₁(s_sal) + (1−α)·MLP₂(s_sem)`.
    NoDyns,
    /// Feeds projected word embeddings straight to attention.
    NoGru,
    /// Full architecture trained with the MSE stage only.
    #[serde(rename = "no-pdloss")]
    NoPdLoss,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoSalience,
        Variant::NoDyns,
        Variant::NoGru,
        Variant::NoPdLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSalience => "no-salience",
            Variant::NoDyns => "no-dyns",
            Variant::NoGru => "no-gru",
            Variant::NoPdLoss => "no-pdloss",
        }
    }

    pub fn has_gru(self) -> bool {
        self != Variant::NoGru
    }

    pub fn has_inherent(self) -> bool {
        self != Variant::NoDyns
    }

    pub fn has_salience(self) -> bool {
        self != Variant::NoSalience
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Where a rollout starts before the first word.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialPoint {
    #[default]
    Salient,
    Center,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// GRU hidden size.
    pub hidden: usize,
    /// Attention query/key width.
    pub key_dim: usize,
    /// Hidden width of every force MLP.
    pub mlp_width: usize,
    pub variant: Variant,
    /// Adds a residual MLP on top of the attention output.
    pub residual_head: bool,
    pub initial_point: InitialPoint,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden: 64,
            key_dim: 32,
            mlp_width: 32,
            variant: Variant::Full,
            residual_head: false,
            initial_point: InitialPoint::Salient,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Flat, ordered parameter list. Names are `<group>.<field>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
}

enum Init {
    Xavier,
    Zeros,
    Const(f64),
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let (d, h, k, m) = (config.embed_dim, config.hidden, config.key_dim, config.mlp_width);
        if d == 0 || h == 0 || k == 0 || m == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut add = |name: &str, shape: &[usize], init: Init| {
            let tensor = match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Const(c) => Tensor::new(shape.to_vec(), vec![c; shape.iter().product()]).expect("shape"),
                Init::Xavier => {
                    let (fan_in, fan_out) = (shape[0], shape[1]);
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n = fan_in * fan_out;
                    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
                    Tensor::new(shape.to_vec(), data).expect("shape")
                }
            };
            params.push(NamedTensor {
                name: name.to_string(),
                tensor,
            });
        };

        add("input.weight", &[d, h], Init::Xavier);
        add("input.bias", &[1, h], Init::Zeros);
        if config.variant.has_gru() {
            for gate in ["z", "r", "h"] {
                add(&format!("gru.w_{gate}"), &[h, h], Init::Xavier);
                add(&format!("gru.u_{gate}"), &[h, h], Init::Xavier);
                add(&format!("gru.b_{gate}"), &[1, h], Init::Zeros);
            }
        }
        add("query.weight", &[h, k], Init::Xavier);
        add("key.weight", &[d, k], Init::Xavier);
        if config.residual_head {
            add("head.w1", &[2, m], Init::Xavier);
            add("head.b1", &[1, m], Init::Zeros);
            add("head.w2", &[m, 2], Init::Zeros);
            add("head.b2", &[1, 2], Init::Zeros);
        }
        let mut mlps = vec![];
        if config.variant.has_inherent() {
            mlps.push("mlp_a");
        }
        if config.variant.has_salience() {
            mlps.push("mlp_b");
        }
        mlps.push("mlp_c");
        // The feedforward merge outputs positions, not velocities; centring its
        // output bias keeps the initial points inside the clamp where gradients flow.
        let out_bias = if config.variant == Variant::NoDyns { 0.5 } else { 0.0 };
        for mlp in mlps {
            add(&format!("{mlp}.w1"), &[2, m], Init::Xavier);
            add(&format!("{mlp}.b1"), &[1, m], Init::Zeros);
            add(&format!("{mlp}.w2"), &[m, 2], Init::Xavier);
            add(&format!("{mlp}.b2"), &[1, 2], Init::Const(out_bias));
        }
        if config.variant.has_salience() {
            add("alpha.logit", &[], Init::Zeros);
        }
        Ok(Self { config, params })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.tensor)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// `α = σ(alpha_logit)`, if the variant has one.
    pub fn alpha(&self) -> Option<f64> {
        self.get("alpha.logit").map(|t| sigmoid(t.item()))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }

    /// Group of a parameter name (text before the first dot).
    pub fn group_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in self.names() {
            let g = Self::group_of(n);
            if !out.iter().any(|o| o == g) {
                out.push(g.to_string());
            }
        }
        out
    }

    /// Binds every parameter to the tape. `trainable` selects between
    /// gradient-tracking leaves and constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<ModelVars<'t>> {
        let all: Vec<Var<'t>> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect();
        let index: HashMap<&str, usize> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.as_str(), i))
            .collect();
        let opt = |name: &str| index.get(name).map(|&i| all[i]);
        let req = |name: &str| {
            opt(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let mlp = |prefix: &str| -> Result<Option<MlpVars<'t>>> {
            if opt(&format!("{prefix}.w1")).is_none() {
                return Ok(None);
            }
            Ok(Some(MlpVars {
                w1: req(&format!("{prefix}.w1"))?,
                b1: req(&format!("{prefix}.b1"))?,
                w2: req(&format!("{prefix}.w2"))?,
                b2: req(&format!("{prefix}.b2"))?,
            }))
        };

        let gru = if opt("gru.w_z").is_some() {
            Some(GruVars {
                w_z: req("gru.w_z")?,
                u_z: req("gru.u_z")?,
                b_z: req("gru.b_z")?,
                w_r: req("gru.w_r")?,
                u_r: req("gru.u_r")?,
                b_r: req("gru.b_r")?,
                w_h: req("gru.w_h")?,
                u_h: req("gru.u_h")?,
                b_h: req("gru.b_h")?,
            })
        } else {
            None
        };
        let head = mlp("head")?.map(|m| HeadVars { mlp: m });
        let encoder = EncoderVars {
            w_in: req("input.weight")?,
            b_in: req("input.bias")?,
            gru,
            w_q: req("query.weight")?,
            w_k: req("key.weight")?,
            head,
        };
        let dynamics = DynamicsVars {
            mlp_a: mlp("mlp_a")?,
            mlp_b: mlp("mlp_b")?,
            mlp_c: mlp("mlp_c")?.ok_or_else(|| Error::Config("missing mlp_c".into()))?,
            alpha_logit: opt("alpha.logit"),
            feedforward: self.config.variant == Variant::NoDyns,
        };
        Ok(ModelVars {
            encoder,
            dynamics,
            all,
        })
    }
}

/// Parameters bound to one tape.
pub struct ModelVars<'t> {
    pub encoder: EncoderVars<'t>,
    pub dynamics: DynamicsVars<'t>,
    /// Same order as [`ModelParams::params`].
    pub all: Vec<Var<'t>>,
}

impl<'t> ModelVars<'t> {
    /// Gradients in parameter order; zero where no gradient arrived.
    pub fn grads(&self) -> Vec<Tensor> {
        self.all
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}
