//! Scoring, routing statistics, metric records and embedding export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{Split, Utterance};
use crate::adapters::RoutingAccumulator;
use crate::error::{Error, Result};
use crate::model::{LayerRouting, ParamCounts, TinyTransformer};
use crate::numerics::{Graph, Tensor};

/// Utterances per forward pass during evaluation.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    /// Mean token cross-entropy (nats).
    pub loss: f64,
    pub ter: f64,
    pub tokens: usize,
    pub utterances: usize,
}

/// Fraction of positions where `predicted` differs from `labels`.
pub fn token_error_rate(predicted: &[u32], labels: &[u32]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::shape("token_error_rate", &[predicted.len()], &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Empty("label sequence".into()));
    }
    let wrong = predicted.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / labels.len() as f64)
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn row_nll(row: &[f32], target: usize) -> f64 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
    m + z.ln() - row[target] as f64
}

/// Accumulates loss/error sums and per-layer gate statistics.
#[derive(Default)]
struct Scorer {
    nll: f64,
    errors: usize,
    tokens: usize,
    utterances: usize,
    routing: BTreeMap<String, RoutingAccumulator>,
}

impl Scorer {
    fn run(&mut self, model: &TinyTransformer, utts: &[&Utterance], routing: bool) -> Result<()> {
        for chunk in utts.chunks(EVAL_BATCH) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|u| u.tokens.clone()).collect();
            let mut g = Graph::new();
            let out = model.forward_graph(&mut g, &batch)?;
            let logits = g.value(out.logits);
            let mut row = 0;
            for u in chunk {
                for &y in &u.labels {
                    let r = logits.row(row);
                    self.nll += row_nll(r, y as usize);
                    self.errors += (argmax(r) != y) as usize;
                    row += 1;
                }
            }
            self.tokens += row;
            self.utterances += chunk.len();
            if routing {
                for (name, gates) in &out.gates {
                    let gv = g.value(*gates);
                    self.routing
                        .entry(name.clone())
                        .or_insert_with(|| RoutingAccumulator::new(gv.cols()))
                        .add(gv)?;
                }
            }
        }
        Ok(())
    }

    fn metrics(&self) -> SplitMetrics {
        SplitMetrics {
            loss: self.nll / self.tokens as f64,
            ter: self.errors as f64 / self.tokens as f64,
            tokens: self.tokens,
            utterances: self.utterances,
        }
    }

    fn routing(&self) -> Result<Vec<LayerRouting>> {
        self.routing
            .iter()
            .map(|(layer, acc)| {
                Ok(LayerRouting {
                    layer: layer.clone(),
                    stats: acc.finish()?,
                })
            })
            .collect()
    }
}

/// Mean cross-entropy and error rate of `model` over `utts`.
pub fn score(model: &TinyTransformer, utts: &[&Utterance]) -> Result<SplitMetrics> {
    if utts.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let mut s = Scorer::default();
    s.run(model, utts, false)?;
    Ok(s.metrics())
}

/// Like [`score`], also returning gate statistics for every routed layer.
pub fn score_with_routing(model: &TinyTransformer, utts: &[&Utterance]) -> Result<(SplitMetrics, Vec<LayerRouting>)> {
    if utts.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let mut s = Scorer::default();
    s.run(model, utts, true)?;
    Ok((s.metrics(), s.routing()?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub loss: f64,
    pub ter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub split: Split,
    pub per_speaker: BTreeMap<u32, SplitMetrics>,
    /// Unweighted mean over speakers.
    pub aggregate: Aggregate,
    pub routing: Vec<LayerRouting>,
    pub params: ParamCounts,
}

fn aggregate(per_speaker: &BTreeMap<u32, SplitMetrics>) -> Aggregate {
    let n = per_speaker.len() as f64;
    Aggregate {
        loss: per_speaker.values().map(|m| m.loss).sum::<f64>() / n,
        ter: per_speaker.values().map(|m| m.ter).sum::<f64>() / n,
    }
}

fn group_by_speaker<'a>(utts: &[&'a Utterance], speakers: &[u32], split: Split) -> Result<BTreeMap<u32, Vec<&'a Utterance>>> {
    let mut by: BTreeMap<u32, Vec<&Utterance>> = speakers.iter().map(|&s| (s, Vec::new())).collect();
    for u in utts {
        if u.split == split {
            if let Some(v) = by.get_mut(&u.speaker) {
                v.push(u);
            }
        }
    }
    if let Some((s, _)) = by.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::Empty(format!("{split:?} split of speaker {s}")));
    }
    Ok(by)
}

/// Evaluates one model on each listed speaker's `split`.
pub fn evaluate(model: &TinyTransformer, utts: &[Utterance], split: Split, speakers: &[u32], seed: u64) -> Result<EvalReport> {
    if speakers.is_empty() {
        return Err(Error::Empty("speaker list".into()));
    }
    let refs: Vec<&Utterance> = utts.iter().collect();
    let by = group_by_speaker(&refs, speakers, split)?;
    let mut all = Scorer::default();
    let mut per_speaker = BTreeMap::new();
    for (spk, us) in &by {
        let mut s = Scorer::default();
        s.run(model, us, false)?;
        per_speaker.insert(*spk, s.metrics());
        all.run(model, us, true)?;
    }
    Ok(EvalReport {
        seed,
        split,
        aggregate: aggregate(&per_speaker),
        per_speaker,
        routing: all.routing()?,
        params: model.count_params(),
    })
}

/// Evaluates each speaker with its own adapted model. Routing statistics
/// are pooled over all speakers' inputs; parameter counts are per model.
pub fn evaluate_adapted(models: &BTreeMap<u32, TinyTransformer>, utts: &[Utterance], split: Split, seed: u64) -> Result<EvalReport> {
    let speakers: Vec<u32> = models.keys().copied().collect();
    if speakers.is_empty() {
        return Err(Error::Empty("speaker list".into()));
    }
    let refs: Vec<&Utterance> = utts.iter().collect();
    let by = group_by_speaker(&refs, &speakers, split)?;
    let mut pooled = Scorer::default();
    let mut per_speaker = BTreeMap::new();
    for (spk, us) in &by {
        let mut s = Scorer::default();
        s.run(&models[spk], us, true)?;
        per_speaker.insert(*spk, s.metrics());
        for (layer, acc) in s.routing {
            match pooled.routing.get_mut(&layer) {
                Some(p) => p.merge(&acc)?,
                None => {
                    pooled.routing.insert(layer, acc);
                }
            }
        }
    }
    Ok(EvalReport {
        seed,
        split,
        aggregate: aggregate(&per_speaker),
        per_speaker,
        routing: pooled.routing()?,
        params: models[&speakers[0]].count_params(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetric {
    pub layer: String,
    pub top1_fraction: f32,
    pub entropy: f32,
}

/// One evaluation event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub seed: u64,
    pub stage: String,
    pub step: usize,
    pub speaker: Option<u32>,
    pub split: Split,
    pub loss: f64,
    pub ter: f64,
    pub layers: Vec<LayerMetric>,
}

impl MetricRecord {
    pub fn new(seed: u64, stage: &str, step: usize, speaker: Option<u32>, split: Split, m: &SplitMetrics, routing: &[LayerRouting]) -> Self {
        Self {
            seed,
            stage: stage.to_string(),
            step,
            speaker,
            split,
            loss: m.loss,
            ter: m.ter,
            layers: routing
                .iter()
                .map(|r| LayerMetric {
                    layer: r.layer.clone(),
                    top1_fraction: r.stats.top1_fraction,
                    entropy: r.stats.mean_entropy,
                })
                .collect(),
        }
    }
}

/// Appends records as JSON lines.
pub fn write_jsonl(records: &[MetricRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Mean-pooled final representation per utterance, tagged with its speaker.
pub fn embeddings(model: &TinyTransformer, utts: &[&Utterance]) -> Result<Vec<(u32, Vec<f32>)>> {
    if utts.is_empty() {
        return Err(Error::Empty("embedding split".into()));
    }
    let d = model.config.d_model;
    let mut out = Vec::with_capacity(utts.len());
    for chunk in utts.chunks(EVAL_BATCH) {
        let batch: Vec<Vec<u32>> = chunk.iter().map(|u| u.tokens.clone()).collect();
        let mut g = Graph::new();
        let fwd = model.forward_graph(&mut g, &batch)?;
        let hidden: &Tensor = g.value(fwd.hidden);
        let mut row = 0;
        for u in chunk {
            let mut mean = vec![0.0f32; d];
            for _ in 0..u.tokens.len() {
                for (m, v) in mean.iter_mut().zip(hidden.row(row)) {
                    *m += v;
                }
                row += 1;
            }
            let n = u.tokens.len() as f32;
            mean.iter_mut().for_each(|m| *m /= n);
            out.push((u.speaker, mean));
        }
    }
    Ok(out)
}

/// Writes `speaker_id,e_0,…,e_{d-1}` rows.
pub fn write_embeddings_csv(rows: &[(u32, Vec<f32>)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dim = rows.first().map_or(0, |(_, e)| e.len());
    let mut text = String::from("speaker");
    for j in 0..dim {
        text.push_str(&format!(",e{j}"));
    }
    text.push('\n');
    for (spk, e) in rows {
        text.push_str(&spk.to_string());
        for v in e {
            text.push(',');
            text.push_str(&v.to_string());
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn export_embeddings(model: &TinyTransformer, utts: &[&Utterance], path: impl AsRef<Path>) -> Result<usize> {
    let rows = embeddings(model, utts)?;
    write_embeddings_csv(&rows, path)?;
    Ok(rows.len())
}

/// Mean distance between speaker centroids divided by the mean distance of
/// utterances to their own speaker's centroid.
pub fn separation_ratio(rows: &[(u32, Vec<f32>)]) -> Result<f64> {
    let mut groups: BTreeMap<u32, Vec<&[f32]>> = BTreeMap::new();
    for (s, e) in rows {
        groups.entry(*s).or_default().push(e);
    }
    if groups.len() < 2 {
        return Err(Error::Empty("need at least two speakers for separation".into()));
    }
    let dist = |a: &[f64], b: &[f32]| a.iter().zip(b).map(|(x, &y)| (x - y as f64).powi(2)).sum::<f64>().sqrt();
    let centroids: Vec<Vec<f64>> = groups
        .values()
        .map(|es| {
            let d = es[0].len();
            let mut c = vec![0.0; d];
            for e in es {
                for (ci, &v) in c.iter_mut().zip(e.iter()) {
                    *ci += v as f64;
                }
            }
            c.iter_mut().for_each(|v| *v /= es.len() as f64);
            c
        })
        .collect();
    let (mut intra, mut n_intra) = (0.0, 0usize);
    for (c, es) in centroids.iter().zip(groups.values()) {
        for e in es {
            intra += dist(c, e);
            n_intra += 1;
        }
    }
    let (mut inter, mut n_inter) = (0.0, 0usize);
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            let cj: Vec<f32> = centroids[j].iter().map(|&v| v as f32).collect();
            inter += dist(&centroids[i], &cj);
            n_inter += 1;
        }
    }
    Ok((inter / n_inter as f64) / (intra / n_intra as f64).max(f64::MIN_POSITIVE))
}
