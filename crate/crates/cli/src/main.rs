//! `motionflow` command-line entry point.
//!
//! Every command validates its configuration, does its work, and writes a
//! run record (`*.run.json`) next to what it produced. Exit codes: 0 ok,
//! 1 configuration/dependency/IO failure, 2 usage, 3 numerical divergence.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use motionflow_core::dataset::{generate_dataset, Dataset, GenerationSpec};
use motionflow_core::difficulty::{emit_prompt_template, fuse_and_select, llm_gate, DifficultyLexicon, ScoredPrompt};
use motionflow_core::motion::save_motion;
use motionflow_core::oracle::run_certificate;
use motionflow_core::vocab::Vocabulary;
use motionflow_model::flow::SamplerConfig;
use motionflow_model::pipeline::{
    evaluate, file_sha256, generation_metrics, json_sha256, EvalOptions, GenerationRequest, Pipeline, Reference,
};
use motionflow_model::trainer::{run_stage, RunOptions, TrainConfig, TrainData};
use motionflow_model::ModelError;

#[derive(Parser)]
#[command(name = "motionflow", version, about = "Text-to-motion generation with a hybrid token/latent endpoint")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct SamplerArgs {
    /// Euler steps.
    #[arg(long, default_value_t = 40)]
    steps: usize,
    /// Classifier-free guidance scale.
    #[arg(long = "cfg", default_value_t = 2.0)]
    guidance: f64,
    /// Prior seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig { steps: self.steps, guidance: self.guidance, seed: self.seed }
    }
}

#[derive(clap::Args, Clone)]
struct EvalArgs {
    /// Test sequences to generate for (0 = all).
    #[arg(long, default_value_t = 0)]
    max_items: usize,
    #[arg(long, default_value_t = 10)]
    mm_groups: usize,
    #[arg(long, default_value_t = 10)]
    mm_repeats: usize,
    /// Seed for metric pair and gallery draws.
    #[arg(long, default_value_t = 0)]
    metric_seed: u64,
}

impl EvalArgs {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            max_items: self.max_items,
            mm_groups: self.mm_groups,
            mm_repeats: self.mm_repeats,
            metric_seed: self.metric_seed,
            ..EvalOptions::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic captioned motion corpus.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        /// Sequences per caption class.
        #[arg(long, default_value_t = 65)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one training stage (1 autoencoder, 2 decoder refinement, 3 flow head).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// TOML configuration; keys mirror the built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "runs/default")]
        run: PathBuf,
        /// Continue from the last checkpoint of this stage.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        precision: Option<String>,
        /// Epochs for this stage.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Cap on optimizer steps per epoch (0 = full epochs).
        #[arg(long)]
        max_batches: Option<usize>,
        /// Stop after this many epochs; the stage stays resumable.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Generate one motion from a caption.
    Sample {
        #[arg(long, default_value = "runs/default")]
        run: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 80)]
        frames: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value = "sample.fcm")]
        out: PathBuf,
    },
    /// Evaluate a trained run on the test split.
    Eval {
        #[arg(long, default_value = "runs/default")]
        run: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Report path (default `<run>/eval.json`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the theory oracles and write a certificate.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Monte-Carlo sample count.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value = "oracle_certificate.json")]
        out: PathBuf,
    },
    /// Score caption difficulty and select the hardest prompts.
    ScorePrompts {
        /// JSON lines with `caption` and optional `id`.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// JSON map caption -> score in [1, 10].
        #[arg(long)]
        llm_scores: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        top_k: usize,
        #[arg(long, default_value = "scored_prompts.json")]
        out: PathBuf,
        /// Also write request envelopes for captions that pass the gate.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Metrics over a grid of step counts and guidance scales.
    Sweep {
        #[arg(long, default_value = "runs/default")]
        run: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,40,100")]
        steps: Vec<usize>,
        #[arg(long = "cfg", value_delimiter = ',', default_value = "1,2,3")]
        guidance: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        eval: EvalArgs,
        /// Table path (default `<run>/sweep.json`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunRecord {
    command: String,
    argv: Vec<String>,
    config: Value,
    seed: u64,
    checkpoint_hashes: BTreeMap<String, String>,
    started_unix: f64,
    finished_unix: f64,
    artifacts: BTreeMap<String, String>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

struct Recorder {
    command: &'static str,
    started: f64,
}

impl Recorder {
    fn start(command: &'static str) -> Self {
        Self { command, started: now() }
    }

    /// Writes the record to `path`; artifact hashes are taken from disk.
    fn finish(self, path: &Path, config: Value, seed: u64, checkpoints: BTreeMap<String, String>, artifacts: &[&Path]) -> Result<()> {
        let mut hashed = BTreeMap::new();
        for a in artifacts {
            let h = if a.is_file() { file_sha256(a)? } else { String::new() };
            hashed.insert(a.display().to_string(), h);
        }
        let rec = RunRecord {
            command: self.command.into(),
            argv: std::env::args().collect(),
            config,
            seed,
            checkpoint_hashes: checkpoints,
            started_unix: self.started,
            finished_unix: now(),
            artifacts: hashed,
        };
        write_json(path, &rec)
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `foo.fcm` -> `foo.run.json`.
fn record_path(artifact: &Path) -> PathBuf {
    artifact.with_extension("run.json")
}

fn hashes(run: &Path) -> Result<BTreeMap<String, String>> {
    Ok(Pipeline::checkpoint_hashes(run)?.into_iter().collect())
}

fn load_data(dir: &Path) -> Result<TrainData> {
    let ds = Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))?;
    Ok(TrainData::from_dataset(&ds)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { out, per_class, seed } => {
            let rec = Recorder::start("generate-data");
            let spec = GenerationSpec::balanced(per_class);
            let manifest = generate_dataset(&spec, seed, &out)?;
            let vocab_path = out.join("vocab.json");
            Vocabulary::desk().save(&vocab_path)?;
            let manifest_path = out.join(motionflow_core::dataset::MANIFEST_FILE);
            log::info!("wrote {} sequences to {}", manifest.entries.len(), out.display());
            rec.finish(
                &out.join("generate-data.run.json"),
                serde_json::to_value(&spec)?,
                seed,
                BTreeMap::new(),
                &[&manifest_path, &vocab_path],
            )
        }
        Command::Train { stage, config, data, run, resume, seed, precision, epochs, batch_size, lr, max_batches, stop_after } => {
            let rec = Recorder::start("train");
            let key = |k: &str| format!("stage{stage}.{k}");
            let mut flags: Vec<(String, Value)> = Vec::new();
            if let Some(s) = seed {
                flags.push(("seed".into(), json!(s)));
            }
            if let Some(p) = precision {
                flags.push(("precision".into(), json!(p)));
            }
            if let Some(e) = epochs {
                flags.push((key("epochs"), json!(e)));
            }
            if let Some(b) = batch_size {
                flags.push((key("batch_size"), json!(b)));
            }
            if let Some(l) = lr {
                flags.push((key("lr"), json!(l)));
            }
            if let Some(m) = max_batches {
                flags.push((key("max_batches"), json!(m)));
            }
            let flags: Vec<(&str, Value)> = flags.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
            let resolved = config::resolve::<TrainConfig>(config.as_deref(), &flags)?;
            resolved.log();
            let cfg = resolved.value;
            cfg.validate()?;
            let train_data = load_data(&data)?;
            let outcome = run_stage(stage, &cfg, &train_data, &run, &RunOptions { resume, max_epochs_this_run: stop_after })?;
            if let Some(last) = outcome.history.last() {
                log::info!("stage {stage} epoch {} train {:?} val {:?}", last.epoch, last.train, last.val);
            }
            let tensors = outcome.checkpoint.join(motionflow_model::checkpoint::TENSOR_FILE);
            let meta = outcome.checkpoint.join(motionflow_model::checkpoint::META_FILE);
            let dir = motionflow_model::trainer::stage_dir(&run, stage);
            rec.finish(
                &dir.join("train.run.json"),
                serde_json::to_value(&cfg)?,
                cfg.seed,
                hashes(&run)?,
                &[&tensors, &meta, &outcome.metrics],
            )
        }
        Command::Sample { run, caption, frames, sampler, out } => {
            let rec = Recorder::start("sample");
            let s = sampler.config();
            s.validate()?;
            let p = Pipeline::load(&run)?;
            let motion = p.generate(&[GenerationRequest { caption: caption.clone(), frames, request: 0 }], &s)?.remove(0);
            save_motion(&out, &motion)?;
            let config = json!({ "sampler": s, "caption": caption, "frames": frames, "run": run, "train": p.config });
            rec.finish(&record_path(&out), config, s.seed, hashes(&run)?, &[&out])
        }
        Command::Eval { run, data, sampler, eval, out } => {
            let rec = Recorder::start("eval");
            let s = sampler.config();
            s.validate()?;
            let opts = eval.options();
            let p = Pipeline::load(&run)?;
            let d = load_data(&data)?;
            let report = evaluate(&p, &d, &s, &opts)?;
            let out = out.unwrap_or_else(|| run.join("eval.json"));
            write_json(&out, &report)?;
            println!("{}", serde_json::to_string(&report)?);
            let config = json!({ "sampler": s, "eval": opts, "train": p.config });
            rec.finish(&record_path(&out), config, s.seed, hashes(&run)?, &[&out])
        }
        Command::Oracle { seed, samples, out } => {
            let rec = Recorder::start("oracle");
            let cert = run_certificate(seed, samples)?;
            write_json(&out, &cert)?;
            for c in &cert.checks {
                log::info!("{} {} margin {:.3e}: {}", if c.passed { "ok" } else { "FAILED" }, c.name, c.margin, c.detail);
            }
            if !cert.all_passed() {
                log::warn!("some oracle checks failed; see {}", out.display());
            }
            rec.finish(&record_path(&out), json!({ "samples": samples }), seed, BTreeMap::new(), &[&out])
        }
        Command::ScorePrompts { input, lexicon, llm_scores, alpha, top_k, out, templates } => {
            let rec = Recorder::start("score-prompts");
            if !alpha.is_finite() || alpha < 0.0 {
                bail!("alpha must be finite and >= 0");
            }
            let lex = match &lexicon {
                Some(p) => DifficultyLexicon::from_json(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => DifficultyLexicon::default_lexicon(),
            };
            let llm: BTreeMap<String, f64> = match &llm_scores {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => BTreeMap::new(),
            };
            if let Some((c, s)) = llm.iter().find(|(_, s)| !(1.0..=10.0).contains(*s)) {
                bail!("llm score {s} for {c:?} is outside [1, 10]");
            }
            let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let mut prompts = Vec::new();
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let v: Value = serde_json::from_str(line).with_context(|| format!("{}:{}: invalid JSON", input.display(), i + 1))?;
                let caption =
                    v.get("caption").and_then(Value::as_str).with_context(|| format!("{}:{}: missing caption", input.display(), i + 1))?;
                let id = match v.get("id") {
                    Some(Value::String(s)) => s.clone(),
                    Some(other) => other.to_string(),
                    None => i.to_string(),
                };
                prompts.push(ScoredPrompt::new(id, caption, &lex, llm.get(caption).copied(), alpha));
            }
            let selected = fuse_and_select(&prompts, alpha, top_k);
            write_json(&out, &json!({ "alpha": alpha, "top_k": top_k, "scored": prompts.len(), "selected": selected }))?;
            let mut artifacts = vec![out.clone()];
            if let Some(tp) = templates {
                let lines: Vec<String> = prompts.iter().filter(|p| llm_gate(p.s_rule)).map(|p| emit_prompt_template(&p.caption)).collect();
                std::fs::write(&tp, lines.join("\n") + "\n").with_context(|| format!("writing {}", tp.display()))?;
                artifacts.push(tp);
            }
            let config = json!({ "alpha": alpha, "top_k": top_k, "lexicon_hash": json_sha256(&lex)?, "input": input });
            let refs: Vec<&Path> = artifacts.iter().map(PathBuf::as_path).collect();
            rec.finish(&record_path(&out), config, 0, BTreeMap::new(), &refs)
        }
        Command::Sweep { run, data, steps, guidance, seed, eval, out } => {
            let rec = Recorder::start("sweep");
            if steps.is_empty() || guidance.is_empty() {
                bail!("sweep needs at least one step count and one guidance scale");
            }
            let opts = eval.options();
            let p = Pipeline::load(&run)?;
            let d = load_data(&data)?;
            let reference = Reference::build(&d)?;
            let mut rows = Vec::new();
            for &l in &steps {
                for &g in &guidance {
                    let s = SamplerConfig { steps: l, guidance: g, seed };
                    s.validate()?;
                    let m = generation_metrics(&p, &d, &reference, &s, &opts)?;
                    log::info!("steps {l} cfg {g}: fid {:.4} r@3 {:.3}", m.fid_desk, m.r_at_3);
                    rows.push(json!({ "steps": l, "guidance": g, "fid_desk": m.fid_desk, "r_at_3": m.r_at_3, "r_at_1": m.r_at_1 }));
                }
            }
            let out = out.unwrap_or_else(|| run.join("sweep.json"));
            write_json(&out, &rows)?;
            println!("{}", serde_json::to_string(&rows)?);
            let config = json!({ "steps": steps, "guidance": guidance, "eval": opts, "train": p.config });
            rec.finish(&record_path(&out), config, seed, hashes(&run)?, &[&out])
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| matches!(c.downcast_ref::<ModelError>(), Some(ModelError::Divergence { .. }))) {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
