//! Stages of the experiment. Every artifact lives under one output directory.

use std::fs;
use std::path::{Path, PathBuf};

use dvpo_core::dataset::{
    assign_returns_from_preference, assign_returns_from_scores, attach_conditioning, binarize,
    generate_offline, load_dataset, save_dataset, BehaviorPolicy, OfflineDataset, PreferencePair,
    Split,
};
use dvpo_core::env::{TabularMdp, Token};
use dvpo_core::eval::{equivalence_gap, judge_win_rate, shift_eval, EquivalenceReport};
use dvpo_core::gvm::{train_gvm, Aggregation, GvmExample};
use dvpo_core::models::{init_model, train_reward_model, train_sft, Model, Role};
use dvpo_core::rl::{
    account_step, evaluate_greedy, train_dvpo, train_grpo, train_ppo_baseline, train_remax,
    Algorithm, ComputeLedger, LedgerTotals, RlOutcome,
};
use dvpo_core::seed::{derive, rng, tag};
use dvpo_core::{LabError, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PairScheme, ReturnScheme};
use crate::metrics::MetricsLog;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// Artifact paths under an output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn shifted_data(&self) -> PathBuf {
        self.root.join("data-shifted")
    }

    pub fn sft(&self, stage: usize) -> PathBuf {
        self.root.join("models").join(format!("sft-{stage}.ckpt"))
    }

    pub fn gvm(&self) -> PathBuf {
        self.root.join("models").join("gvm.ckpt")
    }

    pub fn rm(&self) -> PathBuf {
        self.root.join("models").join("rm.ckpt")
    }

    pub fn policy(&self, algo: Algorithm) -> PathBuf {
        self.root.join("models").join(format!("policy-{algo}.ckpt"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    fn save(&self, model: &Model, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        model.save(path)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub name: String,
    pub fingerprint: String,
}

fn log_checkpoint(log: &mut MetricsLog, stage: &str, name: &str, m: &Model) -> Result<()> {
    log.write(
        stage,
        "checkpoint",
        &CheckpointRecord {
            name: name.into(),
            fingerprint: m.fingerprint(),
        },
    )
}

pub fn eval_prompts(cfg: &ExperimentConfig) -> Vec<Vec<Token>> {
    let task = cfg.task();
    (0..cfg.eval.n_prompts)
        .map(|i| task.sample_prompt(derive(cfg.seed, &[tag("eval-prompts"), i as u64])))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SftStageRecord {
    stage: usize,
    loss: f64,
    greedy_reward: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetRecord {
    split: Split,
    records: usize,
    pairs: usize,
    mean_score: f64,
}

/// Trains the SFT behavior checkpoints and samples the offline dataset and the
/// shifted split from them.
pub fn gen_data(cfg: &ExperimentConfig, ws: &Workspace, log: &mut MetricsLog) -> Result<()> {
    const STAGE: &str = "gen-data";
    let task = cfg.task();
    let prompts = eval_prompts(cfg);
    let mut policy = init_model(&cfg.backbone(), Role::Policy, None)?;
    let mut checkpoints = vec![(0usize, policy.clone())];
    let stages = &cfg.sft.stages;
    let mut stage_losses = Vec::new();
    train_sft(
        &mut policy,
        &task,
        &cfg.sft.train,
        derive(cfg.seed, &[tag("sft")]),
        |step, m| {
            if stages.contains(&step) {
                checkpoints.push((step, m.clone()));
            }
            Ok(())
        },
    )
    .map(|losses| stage_losses = losses)?;
    for (stage, m) in &checkpoints {
        ws.save(m, &ws.sft(*stage))?;
        let loss = if *stage == 0 {
            f64::NAN
        } else {
            stage_losses[stage - 1]
        };
        log.write(
            STAGE,
            "sft",
            &SftStageRecord {
                stage: *stage,
                loss: if loss.is_nan() { 0.0 } else { loss },
                greedy_reward: evaluate_greedy(m, &task, &prompts)?,
            },
        )?;
        log_checkpoint(log, STAGE, &format!("sft-{stage}"), m)?;
    }
    let behaviors: Vec<BehaviorPolicy> = checkpoints
        .into_iter()
        .map(|(s, model)| BehaviorPolicy {
            id: format!("sft-{s}"),
            model,
            temperature: cfg.sft.behavior_temperature,
        })
        .collect();

    let d = &cfg.dataset;
    let mut ds = generate_offline(
        &task,
        &behaviors,
        d.n_prompts + d.heldout_prompts,
        d.responses_per_prompt,
        derive(cfg.seed, &[tag("data")]),
    )?;
    let k = d.responses_per_prompt;
    for (i, r) in ds.records.iter_mut().enumerate() {
        if i / k >= d.n_prompts {
            r.split = Split::Heldout;
        }
    }
    finish_dataset(cfg, &mut ds, derive(cfg.seed, &[tag("conditioning")]))?;
    save_dataset(&ws.data(), &ds)?;

    let mut shifted = generate_offline(
        &cfg.shifted_task(),
        &behaviors,
        d.shifted_prompts,
        k,
        derive(cfg.seed, &[tag("shifted-data")]),
    )?;
    for r in shifted.records.iter_mut() {
        r.split = Split::Shifted;
    }
    finish_dataset(
        cfg,
        &mut shifted,
        derive(cfg.seed, &[tag("shifted-conditioning")]),
    )?;
    save_dataset(&ws.shifted_data(), &shifted)?;

    for (set, split) in [
        (&ds, Split::Train),
        (&ds, Split::Heldout),
        (&shifted, Split::Shifted),
    ] {
        let recs = set.split_records(split);
        log.write(
            STAGE,
            "dataset",
            &DatasetRecord {
                split,
                records: recs.len(),
                pairs: set.split_pairs(split).len(),
                mean_score: recs.iter().filter_map(|r| r.score).sum::<f64>()
                    / recs.len().max(1) as f64,
            },
        )?;
    }
    Ok(())
}

fn finish_dataset(cfg: &ExperimentConfig, ds: &mut OfflineDataset, seed: u64) -> Result<()> {
    assign_returns_from_scores(&mut ds.records)?;
    attach_conditioning(
        &mut ds.records,
        &ds.vocab,
        cfg.dataset.conditioning_k,
        cfg.dataset.conditioning_same_prompt,
        seed,
    )?;
    ds.pairs = dvpo_core::dataset::build_pairs(&ds.records);
    Ok(())
}

fn load_data(ws: &Workspace) -> Result<OfflineDataset> {
    load_dataset(&ws.data())
}

/// Value-model supervision for the configured return scheme.
pub fn gvm_examples(cfg: &ExperimentConfig, ds: &OfflineDataset) -> Result<Vec<GvmExample>> {
    let train = ds.split_records(Split::Train);
    let labeled = match cfg.dataset.returns {
        ReturnScheme::Score => train,
        ReturnScheme::Preference => assign_returns_from_preference(&binarize(&train))?,
    };
    let cond = cfg.dataset.conditioning_k > 0;
    labeled
        .iter()
        .map(|r| GvmExample::from_record(r, cond))
        .collect()
}

pub fn rm_pairs(cfg: &ExperimentConfig, ds: &OfflineDataset) -> Vec<PreferencePair> {
    match cfg.rm.pairs {
        PairScheme::All => ds.split_pairs(Split::Train),
        PairScheme::Binarized => binarize(&ds.split_records(Split::Train)),
    }
}

fn trunk(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Model> {
    Model::load(&ws.sft(cfg.sft.backbone_stage), Role::Policy)
}

pub fn train_gvm_stage(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    log: &mut MetricsLog,
) -> Result<Model> {
    const STAGE: &str = "train-gvm";
    let ds = load_data(ws)?;
    let examples = gvm_examples(cfg, &ds)?;
    let heldout = ds.split_pairs(Split::Heldout);
    let bb = trunk(cfg, ws)?;
    let mut gvm = init_model(&bb.config, Role::Value, Some(&bb))?;
    let report = train_gvm(
        &mut gvm,
        &examples,
        &cfg.gvm.target,
        &cfg.gvm.train,
        derive(cfg.seed, &[tag("gvm")]),
        (!heldout.is_empty()).then_some(heldout.as_slice()),
    )?;
    gvm.freeze();
    ws.save(&gvm, &ws.gvm())?;
    log.write(STAGE, "gvm", &report)?;
    log_checkpoint(log, STAGE, "gvm", &gvm)?;
    Ok(gvm)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RmReport {
    pub epoch_losses: Vec<f64>,
    pub train_pairs: usize,
    pub heldout_accuracy: f64,
}

/// Fraction of pairs the reward model orders correctly; ties count one half.
pub fn reward_accuracy(rm: &Model, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(LabError::Data("no pairs to score".into()));
    }
    let mut wins = 0.0;
    for p in pairs {
        let (c, r) = (
            rm.scalar_reward(&p.prompt, &p.chosen)?,
            rm.scalar_reward(&p.prompt, &p.rejected)?,
        );
        wins += if c > r {
            1.0
        } else if c == r {
            0.5
        } else {
            0.0
        };
    }
    Ok(wins / pairs.len() as f64)
}

pub fn train_rm_stage(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    log: &mut MetricsLog,
) -> Result<Model> {
    const STAGE: &str = "train-rm";
    let ds = load_data(ws)?;
    let pairs = rm_pairs(cfg, &ds);
    let bb = trunk(cfg, ws)?;
    let mut rm = init_model(&bb.config, Role::Reward, Some(&bb))?;
    let epoch_losses = train_reward_model(
        &mut rm,
        &pairs,
        &cfg.rm.train,
        derive(cfg.seed, &[tag("rm")]),
    )?;
    rm.freeze();
    ws.save(&rm, &ws.rm())?;
    let heldout = ds.split_pairs(Split::Heldout);
    let report = RmReport {
        epoch_losses,
        train_pairs: pairs.len(),
        heldout_accuracy: if heldout.is_empty() {
            f64::NAN
        } else {
            reward_accuracy(&rm, &heldout)?
        },
    };
    log.write(STAGE, "rm", &report)?;
    log_checkpoint(log, STAGE, "rm", &rm)?;
    Ok(rm)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySummary {
    pub algorithm: Algorithm,
    pub beta: f64,
    pub initial_eval: f64,
    pub final_eval: f64,
    pub final_kl: f64,
    pub optimizer_steps: usize,
    pub iterations: usize,
    pub early_stops: usize,
    pub ledger: LedgerTotals,
    pub analytic: ComputeLedger,
    pub scorer_fingerprint_before: String,
    pub scorer_fingerprint_after: String,
}

/// Trains one policy. The initial policy doubles as the reference.
pub fn train_policy_stage(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    log: &mut MetricsLog,
    algo: Algorithm,
) -> Result<(RlOutcome, PolicySummary)> {
    const STAGE: &str = "train-policy";
    let rl = cfg.rl_for(algo);
    rl.validate()?;
    let task = cfg.task();
    let scorer_path = if algo == Algorithm::Dvpo {
        ws.gvm()
    } else {
        ws.rm()
    };
    if !scorer_path.exists() {
        let what = if algo == Algorithm::Dvpo {
            "value model"
        } else {
            "reward model"
        };
        return Err(LabError::MissingArtifact(format!(
            "{algo} needs a trained {what} at {}",
            scorer_path.display()
        )));
    }
    let init = Model::load(&ws.sft(cfg.sft.init_stage), Role::Policy)?;
    let role = if algo == Algorithm::Dvpo {
        Role::Value
    } else {
        Role::Reward
    };
    let mut scorer = Model::load(&scorer_path, role)?;
    scorer.freeze();
    let prompts = eval_prompts(cfg);
    let before = scorer.fingerprint();
    let mut log_err = None;
    let on_step = |m: &dvpo_core::rl::StepMetrics| {
        if let Err(e) = log.write(STAGE, "step", m) {
            log_err = Some(e);
        }
        Ok(())
    };
    let out = match algo {
        Algorithm::Dvpo => train_dvpo(&rl, &task, &init, &init, &scorer, &prompts, on_step),
        Algorithm::Ppo => train_ppo_baseline(&rl, &task, &init, &init, &scorer, &prompts, on_step),
        Algorithm::Remax => train_remax(&rl, &task, &init, &init, &scorer, &prompts, on_step),
        Algorithm::Grpo => train_grpo(&rl, &task, &init, &init, &scorer, &prompts, on_step),
    }?;
    if let Some(e) = log_err {
        return Err(e);
    }
    ws.save(&out.policy, &ws.policy(algo))?;
    let summary = PolicySummary {
        algorithm: algo,
        beta: rl.beta,
        initial_eval: out.initial_eval,
        final_eval: out.final_eval,
        final_kl: out.final_kl,
        optimizer_steps: out.optimizer_steps(),
        iterations: out.iterations,
        early_stops: out.early_stops,
        ledger: out.ledger_totals(),
        analytic: account_step(&rl)?,
        scorer_fingerprint_before: before,
        scorer_fingerprint_after: scorer.fingerprint(),
    };
    log.write(STAGE, "policy", &summary)?;
    log_checkpoint(log, STAGE, &format!("policy-{algo}"), &out.policy)?;
    Ok((out, summary))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WinRateRecord {
    pub algorithm: Algorithm,
    pub opponent: String,
    pub win_rate: f64,
    pub greedy_reward: f64,
    pub prompts: usize,
}

/// Win rates of every trained policy against the initial policy, and the value
/// model's accuracy on the shifted split.
pub fn eval_stage(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    log: &mut MetricsLog,
) -> Result<Vec<WinRateRecord>> {
    const STAGE: &str = "eval";
    let task = cfg.task();
    let init = Model::load(&ws.sft(cfg.sft.init_stage), Role::Policy)?;
    let prompts = eval_prompts(cfg);
    let mut out = Vec::new();
    for &algo in &cfg.pipeline.algorithms {
        let path = ws.policy(algo);
        if !path.exists() {
            continue;
        }
        let p = Model::load(&path, Role::Policy)?;
        let wr = judge_win_rate(
            &p,
            &init,
            &task,
            cfg.eval.judge_prompts,
            derive(cfg.seed, &[tag("judge")]),
        )?;
        let rec = WinRateRecord {
            algorithm: algo,
            opponent: format!("sft-{}", cfg.sft.init_stage),
            win_rate: wr.win_rate,
            greedy_reward: evaluate_greedy(&p, &task, &prompts)?,
            prompts: cfg.eval.judge_prompts,
        };
        log.write(STAGE, "win_rate", &rec)?;
        out.push(rec);
    }
    if ws.gvm().exists() {
        let gvm = Model::load(&ws.gvm(), Role::Value)?;
        let ds = load_data(ws)?;
        let shifted = load_dataset(&ws.shifted_data())?;
        let report = shift_eval(
            &gvm,
            &ds.split_pairs(Split::Heldout),
            &shifted.split_pairs(Split::Shifted),
            Aggregation::Mean,
        )?;
        log.write(STAGE, "shift", &report)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub mdp: usize,
    pub eps_r: f64,
    pub eps_q: f64,
    pub seed: u64,
    pub gap: f64,
    pub cosine: f64,
    pub eps_r2q: f64,
    pub bound: f64,
}

impl From<(usize, &EquivalenceReport)> for EquivalenceRow {
    fn from((mdp, r): (usize, &EquivalenceReport)) -> Self {
        Self {
            mdp,
            eps_r: r.eps_r,
            eps_q: r.eps_q,
            seed: r.seed,
            gap: r.gap,
            cosine: r.cosine,
            eps_r2q: r.eps_r2q,
            bound: r.bound,
        }
    }
}

/// Gradient-gap sweep over random layered MDPs and noise levels.
pub fn equiv_check(cfg: &ExperimentConfig, log: &mut MetricsLog) -> Result<Vec<EquivalenceRow>> {
    let q = &cfg.eval.equivalence;
    let mut rows = Vec::new();
    for m in 0..q.n_mdps {
        let mut r = rng(derive(cfg.seed, &[tag("equiv-mdp"), m as u64]));
        let mdp = TabularMdp::layered(&q.layer_widths, q.n_actions, 1.0, &mut r)?;
        let logits: Vec<f64> = (0..mdp.n_states * mdp.n_actions)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        for (e, &eps) in q.noise_levels.iter().enumerate() {
            for d in 0..q.draws {
                let s = derive(cfg.seed, &[tag("equiv-draw"), m as u64, e as u64, d as u64]);
                let rep = equivalence_gap(&mdp, &logits, eps, eps, s)?;
                let row = EquivalenceRow::from((m, &rep));
                log.write("equiv-check", "equivalence", &row)?;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub policies: Vec<PolicySummary>,
    pub win_rates: Vec<WinRateRecord>,
}

/// Every stage in order, into a fresh metrics log.
pub fn run_pipeline(cfg: &ExperimentConfig, ws: &Workspace) -> Result<PipelineSummary> {
    cfg.validate()?;
    fs::create_dir_all(&ws.root)?;
    fs::write(ws.root.join(CONFIG_FILE), cfg.to_toml())?;
    let mut log = MetricsLog::create(&ws.metrics())?;
    gen_data(cfg, ws, &mut log)?;
    train_gvm_stage(cfg, ws, &mut log)?;
    train_rm_stage(cfg, ws, &mut log)?;
    let mut policies = Vec::new();
    for &algo in &cfg.pipeline.algorithms {
        policies.push(train_policy_stage(cfg, ws, &mut log, algo)?.1);
    }
    let win_rates = eval_stage(cfg, ws, &mut log)?;
    equiv_check(cfg, &mut log)?;
    Ok(PipelineSummary {
        policies,
        win_rates,
    })
}
