use std::fs;
use std::path::{Path, PathBuf};

use dvpo_core::env::{LenRange, TaskKind, TokenTask, Vocabulary};
use dvpo_core::gvm::{GvmTrainConfig, TargetMode, TargetSpec};
use dvpo_core::models::{BackboneConfig, RewardTrainConfig, SftConfig};
use dvpo_core::rl::{Algorithm, RlConfig};
use dvpo_core::{LabError, Result};
use serde::{Deserialize, Serialize};

pub const PRESETS: [&str; 1] = ["paper-small"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of payload tokens.
    pub payload: usize,
    pub prompt_min: usize,
    pub prompt_max: usize,
    pub max_response_len: usize,
    #[serde(default = "d_continuation")]
    pub continuation: usize,
    #[serde(default)]
    pub intermediate_shaping: bool,
}

fn d_continuation() -> usize {
    3
}

impl TaskSpec {
    pub fn build(&self) -> TokenTask {
        let mut t = TokenTask::new(
            self.kind,
            Vocabulary::with_payload(self.payload),
            LenRange::new(self.prompt_min, self.prompt_max),
            self.max_response_len,
        );
        t.continuation = self.continuation;
        t.intermediate_shaping = self.intermediate_shaping;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let b = BackboneConfig::new(Vocabulary::with_payload(1));
        Self {
            dim: b.dim,
            layers: b.layers,
            heads: b.heads,
            mlp_hidden: b.mlp_hidden,
            max_seq_len: b.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSpec {
    pub train: SftConfig,
    /// Steps at which checkpoints become behavior policies. The untrained
    /// model (stage 0) is always one.
    pub stages: Vec<usize>,
    /// Stage used as initial and reference policy.
    pub init_stage: usize,
    /// Stage whose trunk initializes the value and reward models.
    pub backbone_stage: usize,
    #[serde(default = "d_temperature")]
    pub behavior_temperature: f64,
}

fn d_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReturnScheme {
    /// Clamped ground-truth score.
    Score,
    /// +1 for the best and -1 for the worst response of each prompt.
    Preference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_prompts: usize,
    pub responses_per_prompt: usize,
    /// Extra prompts generated alongside and held out from training.
    pub heldout_prompts: usize,
    #[serde(default)]
    pub conditioning_k: usize,
    #[serde(default)]
    pub conditioning_same_prompt: bool,
    pub returns: ReturnScheme,
    /// Prompt-length range of the distribution-shift split.
    pub shifted_prompt_min: usize,
    pub shifted_prompt_max: usize,
    pub shifted_prompts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GvmSpec {
    pub target: TargetSpec,
    pub train: GvmTrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairScheme {
    /// Every strictly ordered pair within a prompt.
    All,
    /// Best against worst per prompt.
    Binarized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmSpec {
    pub pairs: PairScheme,
    pub train: RewardTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceSpec {
    pub n_mdps: usize,
    pub layer_widths: Vec<usize>,
    pub n_actions: usize,
    pub noise_levels: Vec<f64>,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Greedy-reward evaluation prompts used during and after RL.
    pub n_prompts: usize,
    pub judge_prompts: usize,
    pub equivalence: EquivalenceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub algorithms: Vec<Algorithm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelSpec,
    pub sft: SftSpec,
    pub dataset: DatasetSpec,
    pub gvm: GvmSpec,
    pub rm: RmSpec,
    /// `rl.seed` is combined with the global seed.
    pub rl: RlConfig,
    pub eval: EvalSpec,
    pub pipeline: PipelineSpec,
}

impl ExperimentConfig {
    pub fn paper_small() -> Self {
        Self {
            seed: 0,
            task: TaskSpec {
                kind: TaskKind::Copy,
                payload: 6,
                prompt_min: 3,
                prompt_max: 6,
                max_response_len: 8,
                continuation: d_continuation(),
                intermediate_shaping: false,
            },
            model: ModelSpec::default(),
            sft: SftSpec {
                train: SftConfig {
                    steps: 400,
                    batch_size: 16,
                    lr: 3e-3,
                    max_grad_norm: 1.0,
                    demo_noise: 0.7,
                },
                stages: vec![100, 200, 400],
                init_stage: 400,
                backbone_stage: 400,
                behavior_temperature: 1.0,
            },
            dataset: DatasetSpec {
                n_prompts: 500,
                responses_per_prompt: 4,
                heldout_prompts: 100,
                conditioning_k: 0,
                conditioning_same_prompt: false,
                returns: ReturnScheme::Score,
                shifted_prompt_min: 6,
                shifted_prompt_max: 7,
                shifted_prompts: 100,
            },
            gvm: GvmSpec {
                target: TargetSpec {
                    mode: TargetMode::MonteCarlo,
                    gamma: 1.0,
                },
                train: GvmTrainConfig {
                    epochs: 20,
                    batch_size: 16,
                    lr: 1e-3,
                    max_grad_norm: 1.0,
                },
            },
            rm: RmSpec {
                pairs: PairScheme::All,
                train: RewardTrainConfig {
                    epochs: 8,
                    batch_size: 16,
                    lr: 1e-3,
                    max_grad_norm: 1.0,
                },
            },
            rl: RlConfig {
                prompts_per_step: 64,
                steps: 400,
                lr: 2e-4,
                eval_every: 2,
                whiten_advantages: true,
                ..RlConfig::new(Algorithm::Dvpo)
            },
            eval: EvalSpec {
                n_prompts: 64,
                judge_prompts: 200,
                equivalence: EquivalenceSpec {
                    n_mdps: 20,
                    layer_widths: vec![1, 2, 2],
                    n_actions: 2,
                    noise_levels: vec![0.0, 0.01, 0.1],
                    draws: 10,
                },
            },
            pipeline: PipelineSpec {
                algorithms: Algorithm::ALL.to_vec(),
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-small" => Ok(Self::paper_small()),
            _ => Err(LabError::Config(format!(
                "unknown preset `{name}` (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn task(&self) -> TokenTask {
        self.task.build()
    }

    pub fn shifted_task(&self) -> TokenTask {
        let mut t = self.task();
        t.prompt_len = LenRange::new(
            self.dataset.shifted_prompt_min,
            self.dataset.shifted_prompt_max,
        );
        t
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            vocab: Vocabulary::with_payload(self.task.payload),
            dim: self.model.dim,
            layers: self.model.layers,
            heads: self.model.heads,
            mlp_hidden: self.model.mlp_hidden,
            max_seq_len: self.model.max_seq_len,
            seed: dvpo_core::seed::derive(self.seed, &[dvpo_core::seed::tag("model")]),
        }
    }

    /// RL settings for `algorithm` with the run seed folded in.
    pub fn rl_for(&self, algorithm: Algorithm) -> RlConfig {
        RlConfig {
            algorithm,
            seed: dvpo_core::seed::derive(self.seed, &[dvpo_core::seed::tag("rl"), self.rl.seed]),
            ..self.rl.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        self.task().validate()?;
        self.shifted_task().validate()?;
        self.backbone().validate()?;
        self.gvm.target.validate()?;
        for a in Algorithm::ALL {
            self.rl_for(a).validate()?;
        }
        let s = &self.sft;
        if s.train.steps == 0 || s.train.batch_size == 0 {
            return bad("sft.train needs positive steps and batch_size".into());
        }
        if !(0.0..=1.0).contains(&s.train.demo_noise) {
            return bad("sft.train.demo_noise must lie in [0, 1]".into());
        }
        if s.stages.iter().any(|st| *st == 0 || *st > s.train.steps) {
            return bad(format!("sft.stages must lie in 1..={}", s.train.steps));
        }
        for (name, st) in [
            ("init_stage", s.init_stage),
            ("backbone_stage", s.backbone_stage),
        ] {
            if st != 0 && !s.stages.contains(&st) {
                return bad(format!("sft.{name} {st} is not a checkpointed stage"));
            }
        }
        if !(s.behavior_temperature > 0.0) {
            return bad("sft.behavior_temperature must be positive".into());
        }
        let d = &self.dataset;
        if d.n_prompts == 0
            || d.responses_per_prompt < 2
            || d.heldout_prompts == 0
            || d.shifted_prompts == 0
        {
            return bad(
                "dataset needs prompts in every split and at least two responses per prompt".into(),
            );
        }
        if self.gvm.train.epochs == 0 || self.rm.train.epochs == 0 {
            return bad("gvm and rm need at least one epoch".into());
        }
        let e = &self.eval;
        if e.n_prompts == 0 || e.judge_prompts == 0 {
            return bad("eval needs positive prompt counts".into());
        }
        let q = &e.equivalence;
        if q.layer_widths.is_empty() || q.layer_widths.contains(&0) || q.n_actions == 0 {
            return bad("eval.equivalence needs positive layer widths and actions".into());
        }
        if q.noise_levels.iter().any(|x| !(*x >= 0.0)) {
            return bad("eval.equivalence.noise_levels must be non-negative".into());
        }
        if self.pipeline.algorithms.is_empty() {
            return bad("pipeline.algorithms is empty".into());
        }
        Ok(())
    }
}

/// Output root: `DVPO_OUT` if set, else `runs`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os("DVPO_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}
