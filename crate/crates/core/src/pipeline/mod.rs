//! Quantise, pretrain and adapt on the synthetic multi-speaker task.
//!
//! Stages run in order: the FP32 base is trained on identity-channel data,
//! quantised (stage 1), its adapters pretrained on many speakers with
//! interleaved router/expert updates (stage 2), then copied and adapted to
//! each target speaker (stage 3). Every stage checks the tag left by the
//! previous one.

pub mod corpus;
pub mod eval;
pub mod train;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use corpus::{check_disjoint, generate_corpus, split_sizes, CorpusConfig, SpeakerPartition, SpeakerSpec, Split, SyntheticCorpus, Utterance};
pub use eval::{
    embeddings, evaluate, evaluate_adapted, export_embeddings, read_jsonl, score, score_with_routing, separation_ratio, token_error_rate,
    write_embeddings_csv, write_jsonl, EvalReport, MetricRecord, SplitMetrics,
};
pub use train::{phase_for, train, train_step, Phase, RunTag, Target, TrainConfig, TrainOutcome};

use crate::adapters::{detect_collapse, Health, PruneMode, PruneReport, DEFAULT_COLLAPSE_THRESHOLD, DEFAULT_IMBALANCE_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::{CompressionSummary, LayerRouting, ModelConfig, Stage, TinyTransformer};
use crate::numerics::{Graph, OptimizerConfig, SeededRng};

// rng streams forked from the master seed
const STREAM_CORPUS: u64 = 1;
const STREAM_MODEL: u64 = 2;
const STREAM_BASE: u64 = 10;
const STREAM_PRETRAIN: u64 = 20;
const STREAM_DONOR: u64 = 30;
const STREAM_ADAPT: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; corpus and model seeds are derived from it.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub base: TrainConfig,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    /// Number of held-out target speakers (the last ids).
    pub adapt_speakers: usize,
    /// Allow stage 2 on an unquantised base.
    pub fp32_mode: bool,
    /// Initialise experts from single-speaker LoRAs instead of zero-delta.
    pub donor_init: bool,
    pub donor: TrainConfig,
    pub collapse_threshold: f32,
    pub imbalance_threshold: f32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            base: TrainConfig {
                steps: 600,
                batch_size: 32,
                optimizer: OptimizerConfig::adam(3e-3),
                interleave_period: 1,
                eval_every: 100,
            },
            pretrain: TrainConfig {
                steps: 500,
                batch_size: 32,
                optimizer: OptimizerConfig::adam(1e-2),
                interleave_period: 1,
                eval_every: 50,
            },
            adapt: TrainConfig {
                steps: 120,
                batch_size: 24,
                optimizer: OptimizerConfig::adam(1e-2),
                interleave_period: 1,
                eval_every: 10,
            },
            adapt_speakers: 10,
            fp32_mode: false,
            donor_init: false,
            donor: TrainConfig {
                steps: 100,
                batch_size: 24,
                optimizer: OptimizerConfig::adam(1e-2),
                interleave_period: 1,
                eval_every: 20,
            },
            collapse_threshold: DEFAULT_COLLAPSE_THRESHOLD,
            imbalance_threshold: DEFAULT_IMBALANCE_THRESHOLD,
        }
    }
}

impl PipelineConfig {
    /// Copy with corpus and model seeds derived from the master seed.
    pub fn resolved(&self) -> Self {
        let master = SeededRng::new(self.seed);
        let mut out = self.clone();
        out.corpus.seed = master.fork(STREAM_CORPUS).next_u64();
        out.model.seed = master.fork(STREAM_MODEL).next_u64();
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        for t in [&self.base, &self.pretrain, &self.adapt, &self.donor] {
            t.validate()?;
        }
        if self.model.vocab_size != self.corpus.vocab_size {
            return Err(Error::Config {
                field: "model.vocab_size".into(),
                reason: format!("{} does not match corpus vocabulary {}", self.model.vocab_size, self.corpus.vocab_size),
            });
        }
        if self.model.max_len < self.corpus.seq_len {
            return Err(Error::Config {
                field: "model.max_len".into(),
                reason: format!("shorter than corpus seq_len {}", self.corpus.seq_len),
            });
        }
        if self.adapt_speakers == 0 || self.adapt_speakers >= self.corpus.n_speakers {
            return Err(Error::Config {
                field: "adapt_speakers".into(),
                reason: format!("must lie in 1..{}", self.corpus.n_speakers),
            });
        }
        adapters_thresholds(self.collapse_threshold, self.imbalance_threshold)
    }
}

fn adapters_thresholds(ct: f32, it: f32) -> Result<()> {
    for (field, v) in [("collapse_threshold", ct), ("imbalance_threshold", it)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Config {
                field: field.into(),
                reason: format!("{v} is outside (0, 1]"),
            });
        }
    }
    Ok(())
}

fn stream(seed: u64, s: u64) -> SeededRng {
    SeededRng::new(seed).fork(s)
}

/// Trains every base tensor of a fresh FP32 model on identity-channel data.
pub fn train_base(model: &mut TinyTransformer, corpus: &SyntheticCorpus, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    if model.stage != Stage::Base || model.is_quantized() {
        return Err(Error::StageOrder(format!("base training needs an unquantised base model, got stage {}", model.stage.tag())));
    }
    let tr = corpus.base_split(Split::Train);
    let dev = corpus.base_split(Split::Dev);
    let tag = RunTag {
        stage: "base",
        speaker: None,
        seed,
    };
    train(model, &tr, &dev, cfg, Target::Base, tag, &mut stream(seed, STREAM_BASE))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub compression: CompressionSummary,
    /// Largest logit change caused by quantisation on the probe batch.
    pub logit_max_abs_diff: Option<f32>,
}

/// Quantises the base; `probe` (may be empty) measures the logit drift.
pub fn stage1(model: &mut TinyTransformer, probe: &[&Utterance]) -> Result<Stage1Report> {
    let batch: Vec<Vec<u32>> = probe.iter().map(|u| u.tokens.clone()).collect();
    let before = if batch.is_empty() { None } else { Some(model.forward(&batch)?) };
    let compression = model.quantize_base(model.config.block_size)?;
    let logit_max_abs_diff = match before {
        Some(b) => Some(model.forward(&batch)?.max_abs_diff(&b)?),
        None => None,
    };
    Ok(Stage1Report {
        compression,
        logit_max_abs_diff,
    })
}

/// Stage 2: adapters trained on the pretraining speakers' data.
pub fn stage2_pretrain(
    model: &mut TinyTransformer,
    corpus: &SyntheticCorpus,
    partition: &SpeakerPartition,
    cfg: &TrainConfig,
    fp32_mode: bool,
    seed: u64,
) -> Result<TrainOutcome> {
    check_disjoint(&partition.pretrain, &partition.adapt)?;
    match model.stage {
        Stage::Stage1 => {}
        Stage::Base if fp32_mode => {}
        Stage::Base => {
            return Err(Error::StageOrder(
                "stage 2 needs a quantised (stage1) model; set fp32_mode to pretrain on an FP32 base".into(),
            ))
        }
        s => return Err(Error::StageOrder(format!("stage 2 cannot run on a {} model", s.tag()))),
    }
    let tr = corpus.select(&partition.pretrain, Split::Train);
    let dev = corpus.select(&partition.pretrain, Split::Dev);
    let tag = RunTag {
        stage: "stage2",
        speaker: None,
        seed,
    };
    let out = train(model, &tr, &dev, cfg, Target::Adapters, tag, &mut stream(seed, STREAM_PRETRAIN))?;
    model.stage = Stage::Stage2;
    Ok(out)
}

/// Stage 3: a copy of the pretrained model adapted to one target speaker.
pub fn stage3_adapt(
    pretrained: &TinyTransformer,
    corpus: &SyntheticCorpus,
    partition: &SpeakerPartition,
    speaker: u32,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TinyTransformer, TrainOutcome)> {
    if pretrained.stage != Stage::Stage2 {
        return Err(Error::StageOrder(format!(
            "speaker adaptation needs a stage2 model, got {}",
            pretrained.stage.tag()
        )));
    }
    if partition.pretrain.contains(&speaker) {
        return Err(Error::SpeakerOverlap(vec![speaker]));
    }
    if !partition.adapt.contains(&speaker) {
        return Err(Error::Config {
            field: "speaker".into(),
            reason: format!("speaker {speaker} is not an adaptation target"),
        });
    }
    let tr = corpus.select(&[speaker], Split::Train);
    if tr.is_empty() {
        return Err(Error::Empty(format!("train split of speaker {speaker}")));
    }
    let dev = corpus.select(&[speaker], Split::Dev);
    let mut model = pretrained.clone();
    let tag = RunTag {
        stage: "stage3",
        speaker: Some(speaker),
        seed,
    };
    let out = train(&mut model, &tr, &dev, cfg, Target::Adapters, tag, &mut stream(seed, STREAM_ADAPT + speaker as u64))?;
    model.stage = Stage::Stage3;
    model.speaker = Some(speaker);
    Ok((model, out))
}

/// Adapts every target speaker independently (in parallel).
pub fn adapt_all(
    pretrained: &TinyTransformer,
    corpus: &SyntheticCorpus,
    partition: &SpeakerPartition,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<BTreeMap<u32, (TinyTransformer, TrainOutcome)>> {
    partition
        .adapt
        .par_iter()
        .map(|&s| stage3_adapt(pretrained, corpus, partition, s, cfg, seed).map(|r| (s, r)))
        .collect()
}

/// One single-LoRA model per donor speaker, adapted on that speaker alone.
pub fn fit_donors(
    quantized: &TinyTransformer,
    corpus: &SyntheticCorpus,
    speakers: &[u32],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<TinyTransformer>> {
    speakers
        .iter()
        .map(|&s| {
            let mut donor = quantized.with_experts(1, seed ^ (s as u64 + 1))?;
            let tr = corpus.select(&[s], Split::Train);
            let dev = corpus.select(&[s], Split::Dev);
            let tag = RunTag {
                stage: "donor",
                speaker: Some(s),
                seed,
            };
            train(&mut donor, &tr, &dev, cfg, Target::Adapters, tag, &mut stream(seed, STREAM_DONOR + s as u64))?;
            Ok(donor)
        })
        .collect()
}

/// Copies donor `i`'s attention LoRA into expert `i` of every SAML layer.
pub fn init_from_donors(model: &mut TinyTransformer, donors: &[TinyTransformer]) -> Result<()> {
    let names: Vec<(String, usize)> = model.saml_layers().map(|l| (l.prefix().to_string(), l.experts.len())).collect();
    for (layer, n) in names {
        if donors.len() != n {
            return Err(Error::Config {
                field: "donors".into(),
                reason: format!("{} donors for {n} experts in `{layer}`", donors.len()),
            });
        }
        for (i, donor) in donors.iter().enumerate() {
            for part in ["a", "b"] {
                let src_name = format!("{layer}.experts.0.{part}");
                let dst_name = format!("{layer}.experts.{i}.{part}");
                let src = donor
                    .store
                    .find(&src_name)
                    .ok_or_else(|| Error::Layout(format!("donor lacks `{src_name}`")))?;
                let dst = model
                    .store
                    .find(&dst_name)
                    .ok_or_else(|| Error::Layout(format!("model lacks `{dst_name}`")))?;
                let v = donor.store.value(src).clone();
                if v.shape() != model.store.value(dst).shape() {
                    return Err(Error::shape("init_from_donors", v.shape(), model.store.value(dst).shape()));
                }
                model.store.get_mut(dst).value = v;
            }
        }
    }
    Ok(())
}

/// Model-level pruning policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPruneMode {
    /// Collapsed layers become a single LoRA; others untouched.
    Collapse,
    /// As `Collapse`, and imbalanced layers keep their top-1 expert plus router.
    Top1Router,
    /// Collapsed and imbalanced layers keep only their top-1 expert.
    Top1,
    /// Every routed layer keeps only its top-1 expert.
    Top1All,
}

impl std::str::FromStr for ModelPruneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "collapse" => Ok(Self::Collapse),
            "top1-router" => Ok(Self::Top1Router),
            "top1" => Ok(Self::Top1),
            "top1-all" => Ok(Self::Top1All),
            _ => Err(Error::Config {
                field: "mode".into(),
                reason: format!("unknown prune mode `{s}`"),
            }),
        }
    }
}

fn layer_action(mode: ModelPruneMode, health: Health) -> Option<PruneMode> {
    use Health::*;
    use ModelPruneMode::*;
    match (mode, health) {
        (Top1All, _) => Some(PruneMode::Top1NoRouter),
        (Top1, Collapsed | Imbalanced) => Some(PruneMode::Top1NoRouter),
        (_, Collapsed) => Some(PruneMode::CollapsePrune),
        (Top1Router, Imbalanced) => Some(PruneMode::Top1WithRouter),
        _ => None,
    }
}

/// Routes `calibration` through the model, classifies every routed layer
/// and prunes according to `mode`.
pub fn prune_model(
    model: &mut TinyTransformer,
    calibration: &[&Utterance],
    mode: ModelPruneMode,
    collapse_threshold: f32,
    imbalance_threshold: f32,
) -> Result<PruneReport> {
    adapters_thresholds(collapse_threshold, imbalance_threshold)?;
    let (_, routing) = score_with_routing(model, calibration)?;
    let stats: BTreeMap<String, _> = routing.iter().map(|r| (r.layer.clone(), r.stats.clone())).collect();
    let before = model.count_params().total;
    let mut report = PruneReport::default();
    let store = &mut model.store;
    for block in &mut model.blocks {
        for proj in &mut block.attn {
            let crate::model::AttnProjection::Saml(layer) = proj else { continue };
            let name = layer.prefix().to_string();
            let Some(st) = stats.get(&name) else {
                report.modes.insert(name, layer.mode);
                continue;
            };
            let health = detect_collapse(st, collapse_threshold, imbalance_threshold)?;
            match health {
                Health::Collapsed => report.layers_collapsed.push(name.clone()),
                Health::Imbalanced => report.layers_imbalanced.push(name.clone()),
                Health::Healthy => {}
            }
            if let Some(action) = layer_action(mode, health) {
                layer.prune(store, action, st)?;
            }
            report.modes.insert(name, layer.mode);
        }
    }
    report.params_removed = before - model.count_params().total;
    model.routing = routing;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_experts: usize,
    pub adapter_seed: u64,
    pub dev_loss: f64,
    pub dev_ter: f64,
    pub best_step: usize,
    pub trainable_params: usize,
    pub total_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Single-LoRA runs at other adapter seeds.
    pub baseline: Vec<SweepRow>,
    /// Tolerance used for the single-expert comparison.
    pub noise_band: f64,
    pub n1_matches_baseline: Option<bool>,
    /// Whether dev loss never increases with the expert count (reported only).
    pub non_worsening: bool,
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let mut s = String::from("n_experts  dev_loss  dev_ter  trainable  total  best_step\n");
        for r in self.rows.iter().chain(&self.baseline) {
            s.push_str(&format!(
                "{:>9}  {:>8.4}  {:>7.4}  {:>9}  {:>5}  {:>9}{}\n",
                r.n_experts,
                r.dev_loss,
                r.dev_ter,
                r.trainable_params,
                r.total_params,
                r.best_step,
                if self.baseline.contains(r) { "  (single-LoRA baseline)" } else { "" }
            ));
        }
        s.push_str(&format!(
            "trend: {}\n",
            if self.non_worsening { "non-worsening with more experts" } else { "not monotone" }
        ));
        s
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep_run(quantized: &TinyTransformer, n: usize, adapter_seed: u64, corpus: &SyntheticCorpus, partition: &SpeakerPartition, cfg: &TrainConfig, fp32_mode: bool, seed: u64) -> Result<SweepRow> {
    let mut m = quantized.with_experts(n, adapter_seed)?;
    let out = stage2_pretrain(&mut m, corpus, partition, cfg, fp32_mode, seed)?;
    let c = m.count_params();
    Ok(SweepRow {
        n_experts: n,
        adapter_seed,
        dev_loss: out.best_dev.loss,
        dev_ter: out.best_dev.ter,
        best_step: out.best_step,
        trainable_params: c.trainable,
        total_params: c.total,
    })
}

/// One stage-2 run per expert count on the same quantised base, corpus,
/// seeds and schedule. When 1 is among the counts, two more single-LoRA
/// runs with other adapter seeds estimate seed noise for comparison.
pub fn sweep_experts(
    counts: &[usize],
    quantized: &TinyTransformer,
    corpus: &SyntheticCorpus,
    partition: &SpeakerPartition,
    cfg: &TrainConfig,
    fp32_mode: bool,
    seed: u64,
) -> Result<SweepTable> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::Config {
            field: "expert_counts".into(),
            reason: "need one or more counts, each at least 1".into(),
        });
    }
    let adapter_seed = quantized.config.seed;
    let rows = counts
        .iter()
        .map(|&n| sweep_run(quantized, n, adapter_seed, corpus, partition, cfg, fp32_mode, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut table = SweepTable {
        non_worsening: rows.windows(2).all(|w| w[1].n_experts < w[0].n_experts || w[1].dev_loss <= w[0].dev_loss),
        rows,
        baseline: Vec::new(),
        noise_band: 0.0,
        n1_matches_baseline: None,
    };
    if let Some(one) = table.rows.iter().find(|r| r.n_experts == 1).cloned() {
        for k in 1..=2u64 {
            table
                .baseline
                .push(sweep_run(quantized, 1, adapter_seed.wrapping_add(k), corpus, partition, cfg, fp32_mode, seed)?);
        }
        let (b1, b2) = (table.baseline[0].dev_loss, table.baseline[1].dev_loss);
        let mean = 0.5 * (b1 + b2);
        table.noise_band = (2.0 * (b1 - b2).abs()).max(0.02 * mean);
        table.n1_matches_baseline = Some((one.dev_loss - mean).abs() <= table.noise_band);
    }
    Ok(table)
}

/// Everything produced by [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub config: PipelineConfig,
    pub corpus: SyntheticCorpus,
    pub partition: SpeakerPartition,
    pub base: TrainOutcome,
    pub stage1: Stage1Report,
    /// Stage-1 model with untouched (zero-delta) adapters.
    pub quantized: TinyTransformer,
    /// Zero-adapter quantised model on the pretraining speakers' dev split.
    pub baseline_dev: EvalReport,
    pub pretrain: TrainOutcome,
    pub pretrained: TinyTransformer,
    pub pretrained_dev: EvalReport,
    /// Pretrained model on each target speaker's test split.
    pub pretrained_test: EvalReport,
    pub adapted: BTreeMap<u32, TinyTransformer>,
    pub adapted_test: EvalReport,
    /// Every metric record in emission order.
    pub records: Vec<MetricRecord>,
}

fn eval_records(stage: &str, report: &EvalReport) -> Vec<MetricRecord> {
    report
        .per_speaker
        .iter()
        .map(|(&spk, m)| MetricRecord::new(report.seed, stage, 0, Some(spk), report.split, m, &report.routing))
        .collect()
}

/// Runs base training, stage 1, stage 2 and stage 3 for every target
/// speaker, then evaluates.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRun> {
    let config = config.resolved();
    config.validate()?;
    let seed = config.seed;
    let corpus = generate_corpus(&config.corpus)?;
    let partition = corpus.partition(config.adapt_speakers)?;
    let mut records = Vec::new();

    let mut model = TinyTransformer::new(config.model.clone())?;
    let base = train_base(&mut model, &corpus, &config.base, seed)?;
    records.extend(base.records.iter().cloned());

    let probe: Vec<&Utterance> = corpus.base_split(Split::Test).into_iter().take(32).collect();
    let stage1_report = if config.fp32_mode { None } else { Some(stage1(&mut model, &probe)?) };
    let stage1_report = match stage1_report {
        Some(r) => r,
        None => Stage1Report {
            compression: CompressionSummary {
                block_size: 0,
                bits_per_weight: 32.0,
                tensors: 0,
                weights: 0,
                fp32_bytes: 0,
                quantised_bytes: 0,
                payload_ratio: 1.0,
                rmse: 0.0,
                max_abs_err: 0.0,
            },
            logit_max_abs_diff: Some(0.0),
        },
    };
    let quantized = model.clone();

    let baseline_dev = evaluate(&quantized, &corpus.utterances, Split::Dev, &partition.pretrain, seed)?;
    records.extend(eval_records("baseline", &baseline_dev));

    if config.donor_init {
        let n = config.model.n_experts;
        if partition.pretrain.len() < n {
            return Err(Error::Config {
                field: "donor_init".into(),
                reason: format!("{n} donors needed, {} pretraining speakers", partition.pretrain.len()),
            });
        }
        let donors = fit_donors(&quantized, &corpus, &partition.pretrain[..n], &config.donor, seed)?;
        init_from_donors(&mut model, &donors)?;
    }
    let pretrain = stage2_pretrain(&mut model, &corpus, &partition, &config.pretrain, config.fp32_mode, seed)?;
    records.extend(pretrain.records.iter().cloned());
    let pretrained = model;
    let pretrained_dev = evaluate(&pretrained, &corpus.utterances, Split::Dev, &partition.pretrain, seed)?;
    records.extend(eval_records("stage2-dev", &pretrained_dev));
    let pretrained_test = evaluate(&pretrained, &corpus.utterances, Split::Test, &partition.adapt, seed)?;
    records.extend(eval_records("stage2-test", &pretrained_test));

    let adapted_runs = adapt_all(&pretrained, &corpus, &partition, &config.adapt, seed)?;
    let mut adapted = BTreeMap::new();
    for (spk, (m, out)) in adapted_runs {
        records.extend(out.records);
        adapted.insert(spk, m);
    }
    let adapted_test = evaluate_adapted(&adapted, &corpus.utterances, Split::Test, seed)?;
    records.extend(eval_records("stage3-test", &adapted_test));

    Ok(PipelineRun {
        config,
        corpus,
        partition,
        base,
        stage1: stage1_report,
        quantized,
        baseline_dev,
        pretrain,
        pretrained,
        pretrained_dev,
        pretrained_test,
        adapted,
        adapted_test,
        records,
    })
}

/// Logits of one batch through a fresh graph; used for paired comparisons.
pub fn batch_logits(model: &TinyTransformer, utts: &[&Utterance]) -> Result<crate::numerics::Tensor> {
    let batch: Vec<Vec<u32>> = utts.iter().map(|u| u.tokens.clone()).collect();
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &batch)?;
    Ok(g.value(out.logits).clone())
}

/// Layer routing summary helper for reports.
pub fn routing_summary(routing: &[LayerRouting]) -> BTreeMap<String, (f32, f32)> {
    routing
        .iter()
        .map(|r| (r.layer.clone(), (r.stats.top1_fraction, r.stats.mean_entropy)))
        .collect()
}
