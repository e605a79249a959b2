//! `saml`: drives the quantise / pretrain / adapt pipeline step by step.
//!
//! Every subcommand works inside one run directory. The resolved
//! configuration is stored there as `config.toml`, metric records are
//! appended to `metrics.jsonl`, and checkpoints use fixed names so the
//! steps chain without extra arguments.

mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use saml_core::model::{load_checkpoint, save_checkpoint};
use saml_core::model::{Stage, TinyTransformer};
use saml_core::pipeline::corpus::{generate_corpus, Split, SpeakerPartition, SyntheticCorpus};
use saml_core::pipeline::eval::{evaluate, export_embeddings, read_jsonl, write_jsonl, MetricRecord};
use saml_core::pipeline::train::TrainOutcome;
use saml_core::pipeline::{self, ModelPruneMode, PipelineConfig};
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};

const CONFIG_FILE: &str = "config.toml";
const METRICS_FILE: &str = "metrics.jsonl";
const BASE_CKPT: &str = "base.ckpt";
const QUANT_CKPT: &str = "quantized.ckpt";
const PRETRAINED_CKPT: &str = "pretrained.ckpt";
const PRUNED_CKPT: &str = "pruned.ckpt";

#[derive(Parser, Debug)]
#[command(name = "saml", version, about = "Speaker-adaptive mixture of LoRA experts on a 4-bit base")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file (defaults apply to missing fields).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config leaf, e.g. `--set pipeline.pretrain.steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run directory (default: <output_dir>/<unix-time>-seed<seed>).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Also print metric records to stdout as JSON lines.
    #[arg(long, global = true)]
    stdout_metrics: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and write it to corpus.json.
    GenData,
    /// Train the FP32 base model on identity-channel data.
    TrainBase,
    /// Quantise the base to NF4 and attach zero-delta adapters.
    Quantize {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the adapters on the pretraining speakers.
    Pretrain {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Adapt the pretrained model to target speakers.
    Adapt {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, conflicts_with = "all_speakers", required_unless_present = "all_speakers")]
        speaker: Option<u32>,
        #[arg(long)]
        all_speakers: bool,
    },
    /// Evaluate a checkpoint per speaker.
    Eval {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "dev")]
        split: Split,
        /// Comma-separated speaker ids (default: pretraining speakers for
        /// dev, targets for test, the adapted speaker for stage-3 models).
        #[arg(long, value_delimiter = ',')]
        speakers: Vec<u32>,
    },
    /// Detect collapsed / imbalanced routers and prune experts.
    Prune {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "collapse")]
        mode: ModelPruneMode,
        #[arg(long)]
        collapse_threshold: Option<f32>,
        #[arg(long)]
        imbalance_threshold: Option<f32>,
    },
    /// Pretrain once per expert count on the same quantised base.
    Sweep {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Comma-separated counts (default: sweep.expert_counts).
        #[arg(long, value_delimiter = ',')]
        experts: Vec<usize>,
    },
    /// Mean-pooled hidden states per utterance as CSV.
    ExportEmbeddings {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Run every stage end to end and write all artefacts.
    Run,
    /// Summarise metrics.jsonl of the run directory.
    Report,
}

/// Run directory plus the resolved configuration.
struct Ctx {
    dir: PathBuf,
    cfg: RunConfig,
    overwrite: bool,
    stdout_metrics: bool,
}

impl Ctx {
    fn open(g: &Global) -> Result<Self> {
        let existing = g.run_dir.as_ref().map(|d| d.join(CONFIG_FILE)).filter(|p| p.exists());
        // reuse the stored config when chaining steps without a new one
        let cfg_path = g.config.clone().or(existing.clone());
        let cfg = RunConfig::load(cfg_path.as_deref(), &g.overrides)?;
        cfg.pipeline.validate()?;
        let dir = match &g.run_dir {
            Some(d) => d.clone(),
            None => {
                let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
                cfg.paths.output_dir.join(format!("{ts}-seed{}", cfg.pipeline.seed))
            }
        };
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = cfg.to_toml()?;
        let cfg_file = dir.join(CONFIG_FILE);
        match std::fs::read_to_string(&cfg_file) {
            Ok(old) if old == text => {}
            Ok(_) if !g.overwrite => bail!(ConfigError(format!(
                "{} holds a different configuration; pass --overwrite to replace it",
                cfg_file.display()
            ))),
            _ => std::fs::write(&cfg_file, text).with_context(|| format!("writing {}", cfg_file.display()))?,
        }
        Ok(Self {
            dir,
            cfg,
            overwrite: g.overwrite,
            stdout_metrics: g.stdout_metrics,
        })
    }

    fn pipeline(&self) -> PipelineConfig {
        self.cfg.pipeline.resolved()
    }

    fn corpus(&self) -> Result<(SyntheticCorpus, SpeakerPartition)> {
        let p = self.pipeline();
        let corpus = generate_corpus(&p.corpus)?;
        let partition = corpus.partition(p.adapt_speakers)?;
        Ok((corpus, partition))
    }

    fn output(&self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if path.exists() && !self.overwrite {
            bail!(ConfigError(format!("{} exists; pass --overwrite to replace it", path.display())));
        }
        Ok(path)
    }

    fn input(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.dir.join(default))
    }

    fn load(&self, given: &Option<PathBuf>, default: &str) -> Result<TinyTransformer> {
        let path = self.input(given, default);
        load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.output(name)?;
        std::fs::write(&path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn metrics(&self, records: &[MetricRecord]) -> Result<()> {
        write_jsonl(records, self.dir.join(METRICS_FILE))?;
        if self.stdout_metrics {
            for r in records {
                println!("{}", serde_json::to_string(r)?);
            }
        }
        Ok(())
    }
}

fn outcome_line(what: &str, out: &TrainOutcome) {
    println!(
        "{what}: dev loss {:.4} -> {:.4} (ter {:.3}) at step {}",
        out.initial_dev.loss, out.best_dev.loss, out.best_dev.ter, out.best_step
    );
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let (corpus, partition) = ctx.corpus()?;
    let path = ctx.write_json("corpus.json", &corpus)?;
    println!(
        "{} speakers ({} pretraining, {} targets), {} utterances, {} base utterances -> {}",
        corpus.speakers.len(),
        partition.pretrain.len(),
        partition.adapt.len(),
        corpus.utterances.len(),
        corpus.base.len(),
        path.display()
    );
    Ok(())
}

fn train_base(ctx: &Ctx) -> Result<()> {
    let p = ctx.pipeline();
    let (corpus, _) = ctx.corpus()?;
    let out_path = ctx.output(BASE_CKPT)?;
    let mut model = TinyTransformer::new(p.model.clone())?;
    let out = pipeline::train_base(&mut model, &corpus, &p.base, p.seed)?;
    ctx.metrics(&out.records)?;
    save_checkpoint(&model, &out_path)?;
    outcome_line("base", &out);
    println!("checkpoint -> {}", out_path.display());
    Ok(())
}

fn quantize(ctx: &Ctx, input: &Option<PathBuf>) -> Result<()> {
    let (corpus, _) = ctx.corpus()?;
    let mut model = ctx.load(input, BASE_CKPT)?;
    let out_path = ctx.output(QUANT_CKPT)?;
    let probe: Vec<_> = corpus.base_split(Split::Test).into_iter().take(32).collect();
    let report = pipeline::stage1(&mut model, &probe)?;
    save_checkpoint(&model, &out_path)?;
    ctx.write_json("compression.json", &report)?;
    let c = &report.compression;
    println!(
        "nf4 block {}: {:.2} bits/weight, {} -> {} bytes, payload ratio {:.4}, rmse {:.4}",
        c.block_size, c.bits_per_weight, c.fp32_bytes, c.quantised_bytes, c.payload_ratio, c.rmse
    );
    if let Some(d) = report.logit_max_abs_diff {
        println!("max logit change on probe batch: {d:.4}");
    }
    println!("checkpoint -> {}", out_path.display());
    Ok(())
}

fn pretrain(ctx: &Ctx, input: &Option<PathBuf>) -> Result<()> {
    let p = ctx.pipeline();
    let (corpus, partition) = ctx.corpus()?;
    let mut model = ctx.load(input, QUANT_CKPT)?;
    let out_path = ctx.output(PRETRAINED_CKPT)?;
    if p.donor_init && model.stage == Stage::Stage1 {
        let n = model.config.n_experts;
        let donors = pipeline::fit_donors(&model, &corpus, &partition.pretrain[..n.min(partition.pretrain.len())], &p.donor, p.seed)?;
        pipeline::init_from_donors(&mut model, &donors)?;
    }
    let out = pipeline::stage2_pretrain(&mut model, &corpus, &partition, &p.pretrain, p.fp32_mode, p.seed)?;
    ctx.metrics(&out.records)?;
    save_checkpoint(&model, &out_path)?;
    outcome_line("pretrain", &out);
    println!("checkpoint -> {}", out_path.display());
    Ok(())
}

fn adapt(ctx: &Ctx, input: &Option<PathBuf>, speaker: Option<u32>, all: bool) -> Result<()> {
    let p = ctx.pipeline();
    let (corpus, partition) = ctx.corpus()?;
    let model = ctx.load(input, PRETRAINED_CKPT)?;
    let speakers = if all { partition.adapt.clone() } else { speaker.into_iter().collect() };
    let names: Vec<PathBuf> = speakers
        .iter()
        .map(|s| ctx.output(&format!("adapted-{s}.ckpt")))
        .collect::<Result<_>>()?;
    let runs = if all {
        pipeline::adapt_all(&model, &corpus, &partition, &p.adapt, p.seed)?
    } else {
        let s = speakers[0];
        BTreeMap::from([(s, pipeline::stage3_adapt(&model, &corpus, &partition, s, &p.adapt, p.seed)?)])
    };
    for ((spk, (m, out)), path) in runs.iter().zip(&names) {
        ctx.metrics(&out.records)?;
        save_checkpoint(m, path)?;
        outcome_line(&format!("speaker {spk}"), out);
    }
    Ok(())
}

fn eval(ctx: &Ctx, input: &Option<PathBuf>, split: Split, speakers: &[u32]) -> Result<()> {
    let p = ctx.pipeline();
    let (corpus, partition) = ctx.corpus()?;
    let model = ctx.load(input, PRETRAINED_CKPT)?;
    let speakers = if !speakers.is_empty() {
        speakers.to_vec()
    } else if let Some(s) = model.speaker {
        vec![s]
    } else if split == Split::Test {
        partition.adapt.clone()
    } else {
        partition.pretrain.clone()
    };
    let report = evaluate(&model, &corpus.utterances, split, &speakers, p.seed)?;
    let stage = format!("eval-{}", model.stage.tag());
    let records: Vec<MetricRecord> = report
        .per_speaker
        .iter()
        .map(|(&s, m)| MetricRecord::new(p.seed, &stage, 0, Some(s), split, m, &report.routing))
        .collect();
    ctx.metrics(&records)?;
    let name = format!("eval-{}-{split:?}.json", model.stage.tag()).to_lowercase();
    let path = ctx.write_json(&name, &report)?;
    for (s, m) in &report.per_speaker {
        println!("speaker {s:>4}: loss {:.4} ter {:.4}", m.loss, m.ter);
    }
    println!("mean: loss {:.4} ter {:.4} -> {}", report.aggregate.loss, report.aggregate.ter, path.display());
    Ok(())
}

fn prune(ctx: &Ctx, input: &Option<PathBuf>, mode: ModelPruneMode, ct: Option<f32>, it: Option<f32>) -> Result<()> {
    let p = ctx.pipeline();
    let (corpus, partition) = ctx.corpus()?;
    let mut model = ctx.load(input, PRETRAINED_CKPT)?;
    let ckpt = ctx.output(PRUNED_CKPT)?;
    let calib = corpus.select(&partition.pretrain, Split::Dev);
    let ct = ct.unwrap_or(p.collapse_threshold);
    let it = it.unwrap_or(p.imbalance_threshold);
    let before = model.count_params();
    let report = pipeline::prune_model(&mut model, &calib, mode, ct, it)?;
    save_checkpoint(&model, &ckpt)?;
    let path = ctx.write_json("prune_report.json", &report)?;
    println!(
        "collapsed {:?}, imbalanced {:?}; removed {} of {} parameters",
        report.layers_collapsed, report.layers_imbalanced, report.params_removed, before.total
    );
    for (layer, m) in &report.modes {
        println!("{layer}: {m:?}");
    }
    println!("report -> {}, checkpoint -> {}", path.display(), ckpt.display());
    Ok(())
}

fn sweep(ctx: &Ctx, input: &Option<PathBuf>, experts: &[usize]) -> Result<()> {
    let p = ctx.pipeline();
    let (corpus, partition) = ctx.corpus()?;
    let model = ctx.load(input, QUANT_CKPT)?;
    let counts = if experts.is_empty() { ctx.cfg.sweep.expert_counts.clone() } else { experts.to_vec() };
    let json = ctx.output("sweep.json")?;
    let table = pipeline::sweep_experts(&counts, &model, &corpus, &partition, &p.pretrain, p.fp32_mode, p.seed)?;
    std::fs::write(&json, serde_json::to_string_pretty(&table)?)?;
    let text = table.to_text();
    std::fs::write(ctx.dir.join("sweep.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn embeddings(ctx: &Ctx, input: &Option<PathBuf>, split: Split) -> Result<()> {
    let (corpus, partition) = ctx.corpus()?;
    let model = ctx.load(input, PRETRAINED_CKPT)?;
    let speakers = match model.speaker {
        Some(s) => vec![s],
        None => partition.adapt.clone(),
    };
    let utts = corpus.select(&speakers, split);
    let tag = match model.speaker {
        Some(s) => format!("{}-{s}", model.stage.tag()),
        None => model.stage.tag().to_string(),
    };
    let path = ctx.output(&format!("embeddings-{tag}.csv").to_lowercase())?;
    let n = export_embeddings(&model, &utts, &path)?;
    println!("{n} embeddings -> {}", path.display());
    Ok(())
}

fn run_all(ctx: &Ctx) -> Result<()> {
    let outputs = [BASE_CKPT, QUANT_CKPT, PRETRAINED_CKPT, "summary.json"];
    for o in outputs {
        ctx.output(o)?;
    }
    let run = pipeline::run_pipeline(&ctx.cfg.pipeline)?;
    ctx.metrics(&run.records)?;
    save_checkpoint(&run.quantized, ctx.dir.join(QUANT_CKPT))?;
    save_checkpoint(&run.pretrained, ctx.dir.join(PRETRAINED_CKPT))?;
    for (s, m) in &run.adapted {
        save_checkpoint(m, ctx.dir.join(format!("adapted-{s}.ckpt")))?;
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        compression: &'a saml_core::model::CompressionSummary,
        base_dev_loss: f64,
        baseline_dev_loss: f64,
        pretrained_dev_loss: f64,
        pretrained_test: BTreeMap<u32, f64>,
        adapted_test: BTreeMap<u32, f64>,
    }
    let summary = Summary {
        compression: &run.stage1.compression,
        base_dev_loss: run.base.best_dev.loss,
        baseline_dev_loss: run.baseline_dev.aggregate.loss,
        pretrained_dev_loss: run.pretrained_dev.aggregate.loss,
        pretrained_test: run.pretrained_test.per_speaker.iter().map(|(&s, m)| (s, m.loss)).collect(),
        adapted_test: run.adapted_test.per_speaker.iter().map(|(&s, m)| (s, m.loss)).collect(),
    };
    std::fs::write(ctx.dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("payload ratio {:.4}", summary.compression.payload_ratio);
    println!(
        "dev loss: base {:.4}, quantised zero-adapter {:.4}, pretrained {:.4}",
        summary.base_dev_loss, summary.baseline_dev_loss, summary.pretrained_dev_loss
    );
    for (s, pre) in &summary.pretrained_test {
        let post = summary.adapted_test[s];
        println!("speaker {s:>4}: test loss {pre:.4} -> {post:.4}");
    }
    println!("outputs -> {}", ctx.dir.display());
    Ok(())
}

fn report(ctx: &Ctx) -> Result<()> {
    let path = ctx.dir.join(METRICS_FILE);
    let records = read_jsonl(&path).with_context(|| format!("reading {}", path.display()))?;
    // last record per (stage, speaker, split) wins
    let mut latest: BTreeMap<(String, Option<u32>, String), &MetricRecord> = BTreeMap::new();
    for r in &records {
        latest.insert((r.stage.clone(), r.speaker, format!("{:?}", r.split)), r);
    }
    println!("{:<14} {:>8} {:>6} {:>6} {:>9} {:>7}", "stage", "speaker", "split", "step", "loss", "ter");
    for ((stage, spk, split), r) in &latest {
        let spk = spk.map_or("-".to_string(), |s| s.to_string());
        println!("{stage:<14} {spk:>8} {split:>6} {:>6} {:>9.4} {:>7.4}", r.step, r.loss, r.ter);
    }
    println!("{} records in {}", records.len(), path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let ctx = Ctx::open(&cli.global)?;
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainBase => train_base(&ctx),
        Command::Quantize { input } => quantize(&ctx, input),
        Command::Pretrain { input } => pretrain(&ctx, input),
        Command::Adapt {
            input,
            speaker,
            all_speakers,
        } => adapt(&ctx, input, *speaker, *all_speakers),
        Command::Eval { input, split, speakers } => eval(&ctx, input, *split, speakers),
        Command::Prune {
            input,
            mode,
            collapse_threshold,
            imbalance_threshold,
        } => prune(&ctx, input, *mode, *collapse_threshold, *imbalance_threshold),
        Command::Sweep { input, experts } => sweep(&ctx, input, experts),
        Command::ExportEmbeddings { input, split } => embeddings(&ctx, input, *split),
        Command::Run => run_all(&ctx),
        Command::Report => report(&ctx),
    }
}

/// 3 for numerical failures, 2 for everything else that reaches here
/// (validation, stage order, I/O, corrupt checkpoints).
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<saml_core::Error>())
        .any(saml_core::Error::is_numeric);
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
