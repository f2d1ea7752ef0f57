//! Tiny causal transformer with policy, value and scalar-reward heads.

mod forward;
mod sample;
mod train;

pub use forward::{encode, Encoded};
pub use sample::SamplerConfig;
pub use train::{
    batch_step, bt_pair_loss, train_reward_model, train_sft, RewardTrainConfig, SftConfig,
};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use numkit::{ParamSet, RealArray};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::Vocabulary;
use crate::error::{LabError, Result};
use crate::seed;

pub const BACKBONE: &str = "backbone.";
pub const HEAD: &str = "head.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Policy,
    Value,
    Reward,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Policy => "policy",
            Role::Value => "value",
            Role::Reward => "reward",
        })
    }
}

fn default_dim() -> usize {
    32
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    2
}
fn default_mlp() -> usize {
    64
}
fn default_ctx() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab: Vocabulary,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_mlp")]
    pub mlp_hidden: usize,
    #[serde(default = "default_ctx")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl BackboneConfig {
    pub fn new(vocab: Vocabulary) -> Self {
        Self {
            vocab,
            dim: default_dim(),
            layers: default_layers(),
            heads: default_heads(),
            mlp_hidden: default_mlp(),
            max_seq_len: default_ctx(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(LabError::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.mlp_hidden == 0 || self.max_seq_len < 3 {
            return Err(LabError::Config(
                "layers, mlp_hidden and max_seq_len must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Parameter shapes of the shared trunk, in name order.
    fn backbone_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m) = (self.dim, self.mlp_hidden);
        let mut out = vec![
            (format!("{BACKBONE}tok_emb"), vec![self.vocab.size, d]),
            (format!("{BACKBONE}pos_emb"), vec![self.max_seq_len, d]),
            (format!("{BACKBONE}ln_f.g"), vec![d]),
            (format!("{BACKBONE}ln_f.b"), vec![d]),
        ];
        for l in 0..self.layers {
            let p = format!("{BACKBONE}layer{l}.");
            for ln in ["ln1", "ln2"] {
                out.push((format!("{p}{ln}.g"), vec![d]));
                out.push((format!("{p}{ln}.b"), vec![d]));
            }
            for proj in ["q", "k", "v", "o"] {
                out.push((format!("{p}attn.{proj}.w"), vec![d, d]));
                out.push((format!("{p}attn.{proj}.b"), vec![d]));
            }
            out.push((format!("{p}mlp.fc1.w"), vec![d, m]));
            out.push((format!("{p}mlp.fc1.b"), vec![m]));
            out.push((format!("{p}mlp.fc2.w"), vec![m, d]));
            out.push((format!("{p}mlp.fc2.b"), vec![d]));
        }
        out
    }

    pub fn head_width(&self, role: Role) -> usize {
        match role {
            Role::Policy => self.vocab.size,
            Role::Value | Role::Reward => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub role: Role,
    pub config: BackboneConfig,
    pub params: ParamSet,
    frozen: bool,
}

fn init_array<R: Rng>(name: &str, shape: &[usize], layers: usize, rng: &mut R) -> RealArray {
    let n: usize = shape.iter().product();
    let std = if name.ends_with(".g") {
        return RealArray::filled(shape, 1.0);
    } else if name.ends_with(".b") {
        return RealArray::zeros(shape);
    } else if name.ends_with("emb") {
        0.3
    } else {
        let fan_in = shape[0] as f64;
        let residual = name.contains("attn.o") || name.contains("fc2");
        let s = 1.0 / fan_in.sqrt();
        if residual {
            s / (2.0 * layers as f64).sqrt()
        } else {
            s
        }
    };
    let normal = Normal::new(0.0, std).expect("positive std");
    RealArray::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        .expect("finite init")
}

/// Fresh model, or one whose backbone (and, for policy-to-policy, head) is
/// copied from `init_from`. Value and reward heads always start at zero.
pub fn init_model(config: &BackboneConfig, role: Role, init_from: Option<&Model>) -> Result<Model> {
    config.validate()?;
    let mut rng = seed::rng_for(
        config.seed,
        &[seed::tag("init"), seed::tag(&role.to_string())],
    );
    let mut params = ParamSet::new();
    for (name, shape) in config.backbone_shapes() {
        let fresh = init_array(&name, &shape, config.layers, &mut rng);
        let value = match init_from {
            Some(src) => {
                let v = src.params.require(&name)?;
                if v.shape() != shape.as_slice() {
                    return Err(LabError::Config(format!(
                        "init checkpoint has {name} of shape {:?}, expected {shape:?}",
                        v.shape()
                    )));
                }
                v.clone()
            }
            None => fresh,
        };
        params.insert(name, value);
    }
    let (d, w) = (config.dim, config.head_width(role));
    let copy_head = matches!(init_from, Some(src) if src.role == role && role == Role::Policy);
    if copy_head {
        let src = init_from.unwrap();
        for n in ["w", "b"] {
            let name = format!("{HEAD}{n}");
            params.insert(name.clone(), src.params.require(&name)?.clone());
        }
    } else {
        let w_arr = match role {
            Role::Policy => init_array("head.w", &[d, w], 1, &mut rng)
                .data()
                .iter()
                .map(|x| x * 0.1)
                .collect(),
            _ => vec![0.0; d * w],
        };
        params.insert(format!("{HEAD}w"), RealArray::new(vec![d, w], w_arr)?);
        params.insert(format!("{HEAD}b"), RealArray::zeros(&[w]));
    }
    if let Some(src) = init_from {
        if src.config.vocab != config.vocab {
            return Err(LabError::Config(
                "init checkpoint uses a different vocabulary".into(),
            ));
        }
    }
    Ok(Model {
        role,
        config: config.clone(),
        params,
        frozen: false,
    })
}

impl Model {
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn backbone_fingerprint(&self) -> String {
        self.params.subset(BACKBONE).fingerprint()
    }

    pub fn expect_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(LabError::RoleMismatch {
                expected: role.to_string(),
                found: self.role.to_string(),
            });
        }
        Ok(())
    }

    pub fn ensure_trainable(&self) -> Result<()> {
        if self.frozen {
            Err(LabError::Frozen)
        } else {
            Ok(())
        }
    }

    fn meta(&self) -> Result<BTreeMap<String, serde_json::Value>> {
        let mut m = BTreeMap::new();
        m.insert("role".into(), serde_json::to_value(self.role)?);
        m.insert(
            "backbone_config".into(),
            serde_json::to_value(&self.config)?,
        );
        m.insert(
            "vocab_hash".into(),
            serde_json::Value::String(self.config.vocab.hash()),
        );
        m.insert("frozen".into(), serde_json::Value::Bool(self.frozen));
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        numkit::save_checkpoint(path, &self.params, &self.meta()?)?;
        Ok(())
    }

    /// Loads a checkpoint and checks it holds a model of `role`.
    pub fn load(path: &Path, role: Role) -> Result<Model> {
        if !path.exists() {
            return Err(LabError::MissingArtifact(path.display().to_string()));
        }
        let ck = numkit::load_checkpoint(path)?;
        let field = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| LabError::Data(format!("checkpoint header lacks `{k}`")))
        };
        let found: Role = serde_json::from_value(field("role")?)?;
        let config: BackboneConfig = serde_json::from_value(field("backbone_config")?)?;
        let hash = field("vocab_hash")?;
        if hash.as_str() != Some(config.vocab.hash().as_str()) {
            return Err(LabError::Data(
                "checkpoint vocabulary hash does not match its config".into(),
            ));
        }
        let frozen = field("frozen")?.as_bool().unwrap_or(false);
        let model = Model {
            role: found,
            config,
            params: ck.params,
            frozen,
        };
        model.expect_role(role)?;
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut expected = self.config.backbone_shapes();
        let (d, w) = (self.config.dim, self.config.head_width(self.role));
        expected.push((format!("{HEAD}w"), vec![d, w]));
        expected.push((format!("{HEAD}b"), vec![w]));
        if expected.len() != self.params.len() {
            return Err(LabError::Data(
                "checkpoint parameter set does not match its config".into(),
            ));
        }
        for (name, shape) in expected {
            if self.params.require(&name)?.shape() != shape.as_slice() {
                return Err(LabError::Data(format!(
                    "checkpoint tensor {name} has the wrong shape"
                )));
            }
        }
        Ok(())
    }
}
