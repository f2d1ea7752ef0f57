use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dvpo_cli::config::{default_out_root, ExperimentConfig};
use dvpo_cli::metrics::{read_log, MetricsLog};
use dvpo_cli::pipeline::{self, Workspace, CONFIG_FILE};
use dvpo_cli::{exit_code, plot};
use dvpo_core::rl::{account_step, Algorithm};
use dvpo_core::Result;

#[derive(Parser)]
#[command(
    name = "dvpo",
    version,
    about = "Offline value-model policy optimization lab"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults to the named preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "paper-small")]
    preset: String,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: $DVPO_OUT or ./runs].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train SFT behavior checkpoints and sample the offline dataset.
    GenData,
    /// Train the pairwise reward model.
    TrainRm,
    /// Train and freeze the value model.
    TrainGvm,
    /// Run RL from the initial policy.
    TrainPolicy {
        #[arg(long, value_parser = parse_algo)]
        algo: Algorithm,
        /// Group size for grpo.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Win rates of trained policies and value-model shift accuracy.
    Eval,
    /// Gradient-gap sweep on random tabular MDPs.
    EquivCheck,
    /// Per-step compute ledger of an algorithm.
    Account {
        #[arg(long, value_parser = parse_algo)]
        algo: Algorithm,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Tab-separated series from the metrics log.
    PlotData {
        #[arg(long, default_value = "eval_reward")]
        series: String,
        /// Log to read [default: <out>/metrics.jsonl].
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Every stage in order into a fresh output directory.
    Pipeline,
}

fn parse_algo(s: &str) -> std::result::Result<Algorithm, String> {
    s.parse().map_err(|e: dvpo_core::LabError| e.to_string())
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(&c.preset)?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_group(mut cfg: ExperimentConfig, n: Option<usize>) -> Result<ExperimentConfig> {
    if let Some(n) = n {
        cfg.rl.group_size = n;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let ws = Workspace::new(cli.common.out.clone().unwrap_or_else(default_out_root));
    let open = |cfg: &ExperimentConfig| -> Result<MetricsLog> {
        std::fs::create_dir_all(&ws.root)?;
        let cp = ws.root.join(CONFIG_FILE);
        if !cp.exists() {
            std::fs::write(cp, cfg.to_toml())?;
        }
        MetricsLog::append(&ws.metrics())
    };
    match cli.cmd {
        Cmd::GenData => pipeline::gen_data(&cfg, &ws, &mut open(&cfg)?),
        Cmd::TrainRm => pipeline::train_rm_stage(&cfg, &ws, &mut open(&cfg)?).map(|_| ()),
        Cmd::TrainGvm => pipeline::train_gvm_stage(&cfg, &ws, &mut open(&cfg)?).map(|_| ()),
        Cmd::TrainPolicy { algo, n } => {
            let cfg = with_group(cfg, n)?;
            let (_, s) = pipeline::train_policy_stage(&cfg, &ws, &mut open(&cfg)?, algo)?;
            println!(
                "{algo}: eval {:.4} -> {:.4}, kl {:.4}, {} steps",
                s.initial_eval, s.final_eval, s.final_kl, s.optimizer_steps
            );
            Ok(())
        }
        Cmd::Eval => {
            for r in pipeline::eval_stage(&cfg, &ws, &mut open(&cfg)?)? {
                println!(
                    "{} vs {}: win rate {:.3}, greedy reward {:.4}",
                    r.algorithm, r.opponent, r.win_rate, r.greedy_reward
                );
            }
            Ok(())
        }
        Cmd::EquivCheck => {
            println!("mdp\teps_r\teps_q\tgap\tbound\tcosine");
            for r in pipeline::equiv_check(&cfg, &mut open(&cfg)?)? {
                println!(
                    "{}\t{}\t{}\t{:.3e}\t{:.3e}\t{:.6}",
                    r.mdp, r.eps_r, r.eps_q, r.gap, r.bound, r.cosine
                );
            }
            Ok(())
        }
        Cmd::Account { algo, n } => {
            let cfg = with_group(cfg, n)?;
            let l = account_step(&cfg.rl_for(algo))?;
            println!("algorithm\t{algo}");
            println!("resident_trainable\t{}", l.resident_trainable);
            println!("resident_frozen\t{}", l.resident_frozen);
            println!("generation_multiplier\t{}", l.generation_multiplier);
            println!("backprop_multiplier\t{}", l.backprop_multiplier);
            Ok(())
        }
        Cmd::PlotData { series, log } => {
            let lines = read_log(&log.unwrap_or_else(|| ws.metrics()))?;
            print!("{}", plot::plot_data(&lines, &series)?);
            Ok(())
        }
        Cmd::Pipeline => {
            let s = pipeline::run_pipeline(&cfg, &ws)?;
            for p in &s.policies {
                println!(
                    "{}: eval {:.4} -> {:.4}, kl {:.4}",
                    p.algorithm, p.initial_eval, p.final_eval, p.final_kl
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
