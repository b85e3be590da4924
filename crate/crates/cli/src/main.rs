use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sora_core::checkpoint::read_manifest;
use sora_core::config::{LabelMode, RunConfig, Stage};
use sora_core::fusion::FusionMode;
use sora_core::pipeline::{self, EvalOptions, Layout};
use sora_core::{Error, Result};

/// Symptom-to-organ retrieval: anchor soft labels, 2D/3D image fusion and
/// contrastive alignment on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "sora", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage; overrides the config file.
    #[arg(long, env = "SORA_SEED", global = true)]
    seed: Option<u64>,
    /// Directory for the generated corpus and volumes.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Directory for anchors, labels, checkpoint and reports.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Accept artifacts whose config hash differs from the current config.
    #[arg(long, global = true)]
    force: bool,
    /// More log output (repeatable).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and split the synthetic symptom corpus.
    GenCorpus,
    /// Generate the synthetic organ volumes.
    GenVolumes,
    /// Learn positive and negative anchors per organ.
    TrainAnchors {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        margin: Option<f64>,
    },
    /// Label the training records from the anchors.
    Label {
        /// One-hot labels instead of anchor soft labels.
        #[arg(long)]
        hard: bool,
    },
    /// Train the text head, then encoders, fusion and projection jointly.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Evaluate retrieval on held-out queries and write reports.
    Eval {
        /// Retrain in memory with another fusion (concat, 2d, 3d).
        #[arg(long)]
        ablation: Option<FusionMode>,
        /// Use the anchor-based scores instead of the query scores.
        #[arg(long)]
        anchor_scores: bool,
    },
    /// Score the organs for one query embedding.
    Infer {
        /// File holding the embedding (JSON array or plain numbers).
        #[arg(long, conflicts_with = "record", required_unless_present = "record")]
        embedding: Option<PathBuf>,
        /// Use the embedding of a corpus record by id.
        #[arg(long)]
        record: Option<String>,
        /// Write a probability overlay over a held-out case.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Held-out case for the overlay (defaults to the first one).
        #[arg(long, requires = "overlay")]
        case: Option<usize>,
    },
    /// Describe a checkpoint, or the resolved config when none exists.
    Inspect { checkpoint: Option<PathBuf> },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.data_dir {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(d) = &g.out_dir {
        cfg.paths.out_dir = d.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    let force = cli.global.force;
    match &cli.command {
        Command::TrainAnchors { epochs, margin } => {
            cfg.anchors.epochs = epochs.unwrap_or(cfg.anchors.epochs);
            cfg.anchors.margin = margin.unwrap_or(cfg.anchors.margin);
        }
        Command::Label { hard: true } => cfg.labels = LabelMode::Hard,
        Command::Train { epochs, lr, tau } => {
            cfg.align.epochs = epochs.unwrap_or(cfg.align.epochs);
            cfg.align.learning_rate = lr.unwrap_or(cfg.align.learning_rate);
            cfg.align.tau = tau.unwrap_or(cfg.align.tau);
        }
        _ => {}
    }
    let cfg = cfg.resolved()?;
    let layout = Layout::new(&cfg);

    match cli.command {
        Command::GenCorpus => {
            let (train, test) = pipeline::gen_corpus(&cfg)?;
            println!(
                "wrote {} records ({train} train, {test} test) to {}",
                train + test,
                layout.corpus_dir().display()
            );
        }
        Command::GenVolumes => {
            let n = pipeline::gen_volumes(&cfg)?;
            println!("wrote {n} organ volumes to {}", layout.volumes_dir().display());
        }
        Command::TrainAnchors { .. } => {
            let out = pipeline::train_anchors_stage(&cfg, force)?;
            println!(
                "anchor loss {:.4} -> {:.4}; wrote {}",
                out.loss_trace.first().copied().unwrap_or(f64::NAN),
                out.loss_trace.last().copied().unwrap_or(f64::NAN),
                layout.anchors().display()
            );
        }
        Command::Label { .. } => {
            let labels = pipeline::label_stage(&cfg, force)?;
            println!(
                "labelled {} records; wrote {}",
                labels.len(),
                layout.labels_dir().join("labels.csv").display()
            );
        }
        Command::Train { .. } => {
            let (out, manifest) = pipeline::train_stage(&cfg, force)?;
            if let (Some(a), Some(b)) = (out.trace.first(), out.trace.last()) {
                println!(
                    "l_total {:.4} -> {:.4}, l_align {:.4} -> {:.4}",
                    a.l_total, b.l_total, a.l_align, b.l_align
                );
            }
            println!(
                "saved {} parameters to {}",
                manifest.numel(),
                layout.checkpoint().display()
            );
        }
        Command::Eval {
            ablation,
            anchor_scores,
        } => {
            let report = pipeline::eval_stage(
                &cfg,
                force,
                EvalOptions {
                    ablation,
                    anchor_scores,
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Infer {
            embedding,
            record,
            overlay,
            case,
        } => {
            let query = match (embedding, record) {
                (Some(p), _) => pipeline::read_embedding(&p)?,
                (None, Some(id)) => {
                    let (train, test) = pipeline::load_corpus(&cfg, force)?;
                    test.into_iter()
                        .chain(train)
                        .find(|r| r.id == id)
                        .ok_or_else(|| Error::Config(format!("no record with id {id:?}")))?
                        .embedding
                }
                (None, None) => unreachable!("clap requires one query source"),
            };
            let case = case.unwrap_or(cfg.volumes.train_cases);
            let target = overlay.as_deref().map(|p| (case, p));
            let (scores, _) = pipeline::infer_stage(&cfg, force, &query, target)?;
            println!("organ  score");
            for o in sora_core::eval::rank_organs(&scores) {
                println!("{o:>5}  {:.4}", scores[o]);
            }
            if let Some(p) = overlay {
                println!("wrote overlay for case {case} to {}", p.display());
            }
        }
        Command::Inspect { checkpoint } => {
            let dir = checkpoint.unwrap_or_else(|| layout.checkpoint());
            match read_manifest(&dir) {
                Ok(m) => {
                    println!("checkpoint {}", dir.display());
                    println!("config hash {}", m.config_hash);
                    println!("fusion {:?}", m.fusion);
                    println!("parameters {}", m.numel());
                    for e in m.text.iter().chain(&m.image) {
                        println!("  {:<28} {:?}", e.name, e.shape);
                    }
                }
                Err(Error::MissingArtifact(_)) => {
                    println!("no checkpoint at {}; resolved config:", dir.display());
                    println!("{}", serde_json::to_string_pretty(&cfg)?);
                    for s in [
                        Stage::Corpus,
                        Stage::Volumes,
                        Stage::Anchors,
                        Stage::Labels,
                        Stage::Model,
                    ] {
                        println!("{} hash {}", s.name(), cfg.stage_hash(s));
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
