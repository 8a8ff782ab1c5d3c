//! Command-line front end: data generation, pretraining, training, evaluation,
//! the weight solver and the preference sweep.

mod config;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use config::{load_config, AppConfig, ProviderConfig, UsageError};
use explainrl::corpus::{gen_synthetic, load_corpus};
use explainrl::metrics::evaluate;
use explainrl::pareto::{solve_weights, PreferenceConstraint};
use explainrl::policy::RecurrentPolicy;
use explainrl::prompts::{load_prototypes, Embedder, LocalEmbedder, PromptPrototype, RemoteEmbedder};
use explainrl::rewards::{Lexicon, RemoteProvider, RewardProvider, SimulatedProvider};
use explainrl::trainer::{beta_grid, pretrain_stage, sweep_beta, Providers, TrainConfig, TrainError, DEFAULT_FLOOR};

#[derive(Parser)]
#[command(
    name = "explainrl",
    version,
    about = "Train explanation generators from simulated feedback"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus as JSONL.
    GenData {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 5)]
        categories: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a policy on the training split and save a checkpoint.
    Pretrain {
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
        /// Optional run config; only its `train` section is read.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Pretrain, then run the collection/update iterations.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a checkpoint on the leave-last test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Solve for objective weights; reads JSON from --input or stdin.
    SolvePareto {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Refine one pretrained policy under a grid of preference floors.
    SweepBeta {
        #[arg(long)]
        config: PathBuf,
        /// Sum of the two floors.
        #[arg(long, default_value_t = 0.8)]
        total: f64,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            users,
            items,
            categories,
            seed,
            out,
        } => {
            if users == 0 || items == 0 || categories == 0 {
                return Err(UsageError("users, items and categories must be at least 1".into()).into());
            }
            let corpus = gen_synthetic(users, items, categories, seed);
            corpus.write_dir(&out)?;
            print_json(&serde_json::json!({
                "dir": out,
                "users": corpus.users().len(),
                "items": corpus.items().len(),
                "interactions": corpus.interactions().len(),
            }))
        }
        Command::Pretrain {
            data,
            out,
            config,
            json,
        } => {
            let train_cfg = match config {
                Some(path) => load_config(&path)?.train,
                None => TrainConfig::default(),
            };
            train_cfg.validate()?;
            let corpus = load_corpus(&data)?;
            let pre = pretrain_stage(&corpus, &train_cfg)?;
            pre.policy.save(&out, Some(&pre.vocab))?;
            if json {
                print_json(&pre.report)
            } else {
                println!("nll  {:.4} -> {:.4}", pre.report.nll_before, pre.report.nll_after);
                println!("mse  {:.4} -> {:.4}", pre.report.mse_before, pre.report.mse_after);
                println!("checkpoint written to {}", out.display());
                Ok(())
            }
        }
        Command::Train { config, json } => {
            let cfg = load_config(&config)?;
            cfg.train.validate()?;
            let corpus = load_corpus(&cfg.data)?;
            let backend = Backend::build(&cfg)?;
            let providers = backend.providers()?;
            let outcome = explainrl::trainer::train(&corpus, &cfg.train, &providers, Some(&cfg.out_dir))?;
            write_json(&cfg.out_dir.join("train_report.json"), &outcome.report)?;
            if json {
                return print_json(&outcome.report);
            }
            let r = &outcome.report;
            println!(
                "{:<12}{:>10}{:>10}{:>10}{:>10}",
                "stage", "buffer", "info", "persv", "combined"
            );
            let p = r.probe_before;
            println!(
                "{:<12}{:>10}{:>10.4}{:>10.4}{:>10.4}",
                "pretrained", "-", p.info, p.persv, p.combined
            );
            for it in &r.iterations {
                let p = it.probe;
                println!(
                    "{:<12}{:>10}{:>10.4}{:>10.4}{:>10.4}",
                    format!("iter {}", it.iteration),
                    it.buffer_size,
                    p.info,
                    p.persv,
                    p.combined
                );
            }
            println!("\ntest split after training:\n{}", r.eval_after.table());
            Ok(())
        }
        Command::Eval { data, checkpoint, json } => {
            let corpus = load_corpus(&data)?;
            let (policy, vocab) = RecurrentPolicy::load(&checkpoint)?;
            let vocab = vocab.ok_or_else(|| UsageError(format!("{} has no vocabulary", checkpoint.display())))?;
            let dims = policy.dims();
            if dims.users != corpus.users().len() || dims.items != corpus.items().len() {
                return Err(UsageError(format!(
                    "checkpoint expects {} users and {} items, corpus has {} and {}",
                    dims.users,
                    dims.items,
                    corpus.users().len(),
                    corpus.items().len()
                ))
                .into());
            }
            let (_, test) = corpus.split_leave_last()?;
            let report = evaluate(&policy, &test, &vocab, Default::default())?;
            if json {
                print_json(&report)
            } else {
                println!("{}", report.table());
                Ok(())
            }
        }
        Command::SolvePareto { input } => {
            let text = match input {
                Some(path) => std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?,
                None => {
                    let mut s = String::new();
                    std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
                    s
                }
            };
            let req: config::ParetoRequest = config::parse_json(&text, "pareto input")?;
            let m = req.grads.len();
            let constraints = req
                .constraints
                .unwrap_or_else(|| PreferenceConstraint::one_hot_floors(m, DEFAULT_FLOOR));
            let sol = solve_weights(&req.grads, &constraints).map_err(|e| UsageError(e.to_string()))?;
            print_json(&sol)
        }
        Command::SweepBeta { config, total, json } => {
            if !(0.0..=1.0).contains(&total) {
                return Err(UsageError("--total must lie in [0, 1]".into()).into());
            }
            let cfg = load_config(&config)?;
            cfg.train.validate()?;
            let corpus = load_corpus(&cfg.data)?;
            let backend = Backend::build(&cfg)?;
            let providers = backend.providers()?;
            let pre = pretrain_stage(&corpus, &cfg.train)?;
            let report = sweep_beta(&corpus, &pre, &cfg.train, &providers, &beta_grid(total))?;
            std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
            write_json(&cfg.out_dir.join("sweep_beta.json"), &report)?;
            if json {
                print_json(&report)
            } else {
                println!("{report}");
                Ok(())
            }
        }
    }
}

/// Owns the provider objects that [`Providers`] borrows.
#[allow(clippy::large_enum_variant)]
enum Backend {
    Simulated(SimulatedProvider),
    Remote {
        provider: RemoteProvider,
        embedder: Option<RemoteEmbedder>,
        prototypes: Vec<PromptPrototype>,
        lexicon: Lexicon,
    },
}

static LOCAL: LocalEmbedder = LocalEmbedder {
    dim: explainrl::prompts::LOCAL_DIM,
};

impl Backend {
    fn build(cfg: &AppConfig) -> Result<Backend> {
        let mode = cfg.train.reward_mode;
        Ok(match &cfg.provider {
            ProviderConfig::Simulated { lexicon } => {
                Backend::Simulated(SimulatedProvider::new(load_lexicon(lexicon.as_deref())?, mode))
            }
            ProviderConfig::Remote {
                chat,
                embedder,
                prototypes,
                lexicon,
            } => {
                if let Err(e) = explainrl::exec::configure_threads(chat.max_in_flight.max(1)) {
                    log::warn!("worker pool already configured: {e}");
                }
                let provider = RemoteProvider::new(chat.clone(), mode);
                let embedder = embedder.clone().map(|c| RemoteEmbedder::new(c, provider.limiter()));
                let prototypes = match prototypes {
                    Some(path) => load_prototypes(path)?,
                    None => PromptPrototype::defaults(),
                };
                Backend::Remote {
                    provider,
                    embedder,
                    prototypes,
                    lexicon: load_lexicon(lexicon.as_deref())?,
                }
            }
        })
    }

    fn providers(&self) -> Result<Providers<'_>> {
        Ok(match self {
            Backend::Simulated(p) => Providers::simulated(p),
            Backend::Remote {
                provider,
                embedder,
                prototypes,
                lexicon,
            } => {
                let emb: &dyn Embedder = match embedder {
                    Some(e) => e,
                    None => &LOCAL,
                };
                let reward: &dyn RewardProvider = provider;
                Providers {
                    prototypes: prototypes.clone(),
                    lexicon: lexicon.clone(),
                    ..Providers::new(reward, emb)
                }
            }
        })
    }
}

fn load_lexicon(path: Option<&Path>) -> Result<Lexicon> {
    Ok(match path {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::default(),
    })
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}
