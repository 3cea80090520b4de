//! Command-line driver: corpus generation, training runs with periodic
//! checkpoints and report files, bank-served evaluation, and paired ablation
//! comparisons.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mmrank::checkpoint;
use mmrank::config::RunConfig;
use mmrank::data::{export_jsonl, generate_corpus, import_jsonl, split_index, Corpus};
use mmrank::metrics::{write_reports_csv, write_reports_jsonl, StepReport};
use mmrank::trainer::{EvalOutcome, Trainer};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "mmrank",
    about = "Desk-scale multimodal ranking pipeline: joint encoder+CTR training with a memory bank"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print a config profile as TOML.
    PrintConfig {
        /// "desk" (default) or "production" (full-scale geometry).
        #[arg(long, default_value = "desk")]
        profile: String,
    },
    /// Generate the synthetic corpus and write it as JSONL.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the corpus's temporal train split; write reports and a final
    /// checkpoint into --out-dir.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus JSONL to load; generated from the config when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Resume from this checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write a checkpoint every N steps.
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Ablations to apply, comma separated.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
    },
    /// Score the eval split from a checkpoint, serving docs from the bank.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the full model and one ablation with shared seeds; print both
    /// holdout results and the deltas.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        name: String,
        /// Where to put the two runs' reports (subdirs full/ and <name>/).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::from_toml_path(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_or_generate_corpus(cfg: &RunConfig, path: &Option<PathBuf>) -> Result<Corpus> {
    match path {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("open corpus {}", p.display()))?;
            let corpus = import_jsonl(BufReader::new(f))?;
            if corpus.sessions.is_empty() {
                bail!("corpus {} holds no sessions", p.display());
            }
            Ok(corpus)
        }
        None => Ok(generate_corpus(&cfg.data, cfg.seed)),
    }
}

fn write_reports(dir: &Path, reports: &[StepReport]) -> Result<()> {
    let jsonl = File::create(dir.join("reports.jsonl"))?;
    write_reports_jsonl(BufWriter::new(jsonl), reports)?;
    let csv = File::create(dir.join("reports.csv"))?;
    write_reports_csv(BufWriter::new(csv), reports)?;
    Ok(())
}

fn train_run(
    cfg: RunConfig,
    corpus: &Corpus,
    out_dir: &Path,
    resume: Option<&Path>,
    checkpoint_every: Option<u64>,
) -> Result<(Trainer, EvalOutcome)> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("create out dir {}", out_dir.display()))?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = checkpoint::load(p)?;
            Trainer::resume(cfg, corpus, ckpt)?
        }
        None => Trainer::new(cfg, corpus)?,
    };
    let reports = trainer.run_with(corpus, |t, report| {
        if let Some(every) = checkpoint_every {
            if every > 0 && report.step % every == 0 {
                let path = out_dir.join(format!("checkpoint_step{}.json", report.step));
                checkpoint::save(&path, &t.checkpoint())?;
            }
        }
        Ok(())
    })?;
    write_reports(out_dir, &reports)?;
    checkpoint::save(&out_dir.join("checkpoint_final.json"), &trainer.checkpoint())?;

    let split = split_index(corpus.sessions.len(), trainer.cfg.data.eval_fraction);
    let outcome = trainer.evaluate_sessions(&corpus.sessions[split..])?;
    Ok((trainer, outcome))
}

fn apply_ablations(cfg: &mut RunConfig, names: &[String]) -> Result<()> {
    for name in names {
        cfg.ablate.apply_named(name)?;
    }
    Ok(())
}

fn print_outcome(label: &str, out: &EvalOutcome) -> Result<()> {
    let mut line = serde_json::Map::new();
    line.insert("run".into(), label.into());
    let v = serde_json::to_value(out)?;
    if let serde_json::Value::Object(m) = v {
        line.extend(m);
    }
    println!("{}", serde_json::Value::Object(line));
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::PrintConfig { profile } => {
            let cfg = match profile.as_str() {
                "desk" => RunConfig::default(),
                "production" => RunConfig::production_profile(),
                other => bail!("unknown profile {other:?}; expected \"desk\" or \"production\""),
            };
            print!("{}", cfg.to_toml_string());
        }
        Cmd::Generate { config, out } => {
            let cfg = load_config(&config)?;
            let corpus = generate_corpus(&cfg.data, cfg.seed);
            let f = File::create(&out).with_context(|| format!("create {}", out.display()))?;
            export_jsonl(&corpus, BufWriter::new(f))?;
            let samples: usize = corpus.sessions.iter().map(|s| s.samples.len()).sum();
            eprintln!(
                "wrote {} sessions / {} samples to {}",
                corpus.sessions.len(),
                samples,
                out.display()
            );
        }
        Cmd::Train {
            config,
            corpus,
            out_dir,
            resume,
            checkpoint_every,
            ablate,
        } => {
            let mut cfg = load_config(&config)?;
            apply_ablations(&mut cfg, &ablate)?;
            let corpus = load_or_generate_corpus(&cfg, &corpus)?;
            let (trainer, outcome) =
                train_run(cfg, &corpus, &out_dir, resume.as_deref(), checkpoint_every)?;
            eprintln!(
                "trained {} steps; doc encodes {}, fresh-forward {}/{} samples",
                trainer.step,
                trainer.counters.doc_encoder_invocations,
                trainer.counters.fresh_forward_samples,
                trainer.counters.train_samples,
            );
            print_outcome("train", &outcome)?;
        }
        Cmd::Eval {
            config,
            corpus,
            checkpoint,
        } => {
            let cfg = load_config(&config)?;
            let corpus = load_or_generate_corpus(&cfg, &corpus)?;
            let ckpt = checkpoint::load(&checkpoint)?;
            let mut trainer = Trainer::resume(cfg, &corpus, ckpt)?;
            let split = split_index(corpus.sessions.len(), trainer.cfg.data.eval_fraction);
            let outcome = trainer.evaluate_sessions(&corpus.sessions[split..])?;
            print_outcome("eval", &outcome)?;
        }
        Cmd::Ablate {
            config,
            corpus,
            name,
            out_dir,
        } => {
            let base = load_config(&config)?;
            let mut ablated = base.clone();
            ablated.ablate.apply_named(&name)?;
            let corpus = load_or_generate_corpus(&base, &corpus)?;
            let dir = out_dir.unwrap_or_else(|| PathBuf::from("ablate_runs"));
            let (_, full) = train_run(base, &corpus, &dir.join("full"), None, None)?;
            let (_, cut) = train_run(ablated, &corpus, &dir.join(&name), None, None)?;
            print_outcome("full", &full)?;
            print_outcome(&name, &cut)?;
            if let (Some(a), Some(b)) = (full.qauc, cut.qauc) {
                let mut delta = serde_json::Map::new();
                delta.insert("run".into(), "delta".into());
                delta.insert("qauc_drop".into(), serde_json::json!(a - b));
                println!("{}", serde_json::Value::Object(delta));
            }
            let _ = std::io::stdout().flush();
        }
    }
    Ok(())
}
