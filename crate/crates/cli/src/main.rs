//! `sokd` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sokd_core::checkpoint::{load_backbone, save_checkpoint};
use sokd_core::config::{RunConfig, Task};
use sokd_core::data::{load_cifar_records, Dataset};
use sokd_core::model::{evaluate, Backbone};
use sokd_core::oracle::grad_check_suite;
use sokd_core::trainer::{describe, policy_oracle, run_experiment, run_search, train_teacher, write_run};
use sokd_core::{report, Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "sokd", version, about = "Student-oriented feature distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (the data directory for gen-data, the checkpoint directory for train-teacher).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set schedule.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset, or convert CIFAR binary records.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "cifar_test")]
        cifar_train: Option<PathBuf>,
        #[arg(long, requires = "cifar_train")]
        cifar_test: Option<PathBuf>,
        #[arg(long, default_value_t = usize::MAX)]
        max_records: usize,
        /// 1 for the 10-class files, 2 for coarse+fine labels.
        #[arg(long, default_value_t = 1)]
        label_bytes: usize,
    },
    /// Pretrain the teacher and save its checkpoint.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Run the policy search phase only.
    Search {
        #[command(flatten)]
        common: Common,
    },
    /// Run search (sokd mode) followed by distillation.
    Distill {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a student checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to `<out>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare reverse-mode gradients with central differences on random graphs.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Rank candidate sub-policies by exhaustive consistency-loss evaluation.
    PolicyOracle {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize every run directory below `--out`.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common, task: Task) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    cfg.task = task;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        match task {
            Task::GenData => cfg.data_dir = o.clone(),
            Task::TrainTeacher => cfg.teacher_checkpoint = Some(o.clone()),
            _ => cfg.out_dir = o.clone(),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let classes = cfg.data.classes;
    Ok((
        Dataset::load(&cfg.data_dir, "train", classes)?,
        Dataset::load(&cfg.data_dir, "test", classes)?,
    ))
}

fn load_teacher(cfg: &RunConfig) -> Result<Backbone> {
    load_backbone(cfg.teacher_dir())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            cifar_train,
            cifar_test,
            max_records,
            label_bytes,
        } => {
            let cfg = load_config(&common, Task::GenData)?;
            let (train, test) = match (cifar_train, cifar_test) {
                (Some(a), Some(b)) => (
                    load_cifar_records(a, max_records, label_bytes)?,
                    load_cifar_records(b, max_records, label_bytes)?,
                ),
                _ => cfg.data.generate(cfg.data_seed)?,
            };
            train.save(&cfg.data_dir, "train")?;
            test.save(&cfg.data_dir, "test")?;
            println!(
                "wrote {} train / {} test samples of {:?} to {}",
                train.len(),
                test.len(),
                train.sample_dims(),
                cfg.data_dir.display()
            );
        }
        Command::TrainTeacher { common } => {
            let cfg = load_config(&common, Task::TrainTeacher)?;
            let (train, test) = load_data(&cfg)?;
            let (model, acc) = train_teacher(&cfg, &train, &test)?;
            let dir = cfg.teacher_dir();
            save_checkpoint(&dir, &model, &[], [("test_top1".to_string(), acc as f64)].into())?;
            println!("teacher test top-1 {acc:.4}, saved to {}", dir.display());
        }
        Command::Search { common } => {
            let cfg = load_config(&common, Task::Search)?;
            let (train, test) = load_data(&cfg)?;
            let teacher = load_teacher(&cfg)?;
            let out = run_search(&cfg, &teacher, &train, &test)?;
            write_run(&cfg.out_dir, &cfg, &out)?;
            if let Some(d) = &out.discrete {
                println!("selected sub-policy #{}: {}", d.index, describe(&d.subpolicy));
            }
        }
        Command::Distill { common } => {
            let cfg = load_config(&common, Task::Distill)?;
            let (train, test) = load_data(&cfg)?;
            let teacher = load_teacher(&cfg)?;
            let out = run_experiment(&cfg, &teacher, &train, &test)?;
            write_run(&cfg.out_dir, &cfg, &out)?;
            println!("final test top-1 {:.4}", out.final_top1);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common, Task::Eval)?;
            let dir = checkpoint
                .or_else(|| cfg.student_checkpoint.clone())
                .unwrap_or_else(|| cfg.out_dir.join("checkpoint"));
            let model = load_backbone(&dir)?;
            let (_, test) = load_data(&cfg)?;
            println!("{:.4}", evaluate(&model, &test)?);
        }
        Command::GradCheck { common } => {
            let cfg = load_config(&common, Task::GradCheck)?;
            let checks = grad_check_suite(cfg.seed, cfg.oracle.grad_graphs, cfg.oracle.grad_eps)?;
            let mut text = String::from("graph,seed,params,max_rel_err,pass\n");
            let mut worst = 0.0f64;
            for c in &checks {
                let pass = c.max_rel_err <= cfg.oracle.grad_tolerance;
                text.push_str(&format!("{},{},{},{:e},{}\n", c.graph, c.seed, c.params, c.max_rel_err, pass));
                worst = worst.max(c.max_rel_err);
            }
            write_text(&cfg.out_dir.join("grad_check.csv"), &text)?;
            print!("{text}");
            if worst > cfg.oracle.grad_tolerance {
                return Err(Error::GradientMismatch {
                    worst,
                    tolerance: cfg.oracle.grad_tolerance,
                });
            }
        }
        Command::PolicyOracle { common } => {
            let cfg = load_config(&common, Task::PolicyOracle)?;
            let (train, _) = load_data(&cfg)?;
            let teacher = load_teacher(&cfg)?;
            let ranked = policy_oracle(&cfg, &teacher, &train)?;
            let mut text = String::from("rank,candidate,l_aug\n");
            for (i, r) in ranked.iter().enumerate() {
                text.push_str(&format!("{},{},{:e}\n", i + 1, describe(&r.candidate), r.l_aug));
            }
            write_text(&cfg.out_dir.join("policy_oracle.csv"), &text)?;
            print!("{text}");
        }
        Command::Report { common } => {
            let cfg = load_config(&common, Task::Report)?;
            let rep = report::write_report(&cfg.out_dir)?;
            print!("{}", rep.table());
        }
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::Internal => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
