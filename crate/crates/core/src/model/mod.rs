//! Transformer encoder-classifier hosting the adapters.
//!
//! Every attention projection (query, key, value, output) is a
//! [`SamlLayer`]; each of the two feed-forward linears carries one plain
//! [`LoraModule`]. Blocks are pre-norm with residual connections. The head
//! predicts one label per input position.

mod checkpoint;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};

use crate::adapters::{LayerMode, LoraModule, RoutingStats, SamlLayer, SamlShape};
use crate::error::{Error, Result};
use crate::numerics::{Component, Graph, NodeId, ParamId, ParamStore, SeededRng, Tensor};
use crate::quantization::{self, CodebookId, QuantizedTensor};

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Query, Projection::Key, Projection::Value, Projection::Output];

    pub fn short(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_hidden: usize,
    pub n_experts: usize,
    pub lora_rank: usize,
    /// Defaults to `lora_rank`, i.e. a LoRA scale of 1.
    pub lora_alpha: Option<f32>,
    pub saml_targets: Vec<Projection>,
    pub block_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            max_len: 16,
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            ff_hidden: 256,
            n_experts: 4,
            lora_rank: 2,
            lora_alpha: None,
            saml_targets: Projection::ALL.to_vec(),
            block_size: quantization::DEFAULT_BLOCK_SIZE,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn alpha(&self) -> f32 {
        self.lora_alpha.unwrap_or(self.lora_rank as f32)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("ff_hidden", self.ff_hidden),
            ("n_experts", self.n_experts),
            ("lora_rank", self.lora_rank),
            ("block_size", self.block_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(config_err(field, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(config_err(
                "n_heads",
                &format!("d_model {} is not divisible by {}", self.d_model, self.n_heads),
            ));
        }
        if self.lora_rank > self.d_model {
            return Err(config_err("lora_rank", "exceeds d_model"));
        }
        if let Some(a) = self.lora_alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(config_err("lora_alpha", "must be finite and positive"));
            }
        }
        Ok(())
    }
}

fn config_err(field: &str, reason: &str) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Stage1,
    Stage2,
    Stage3,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Component::Norm, Tensor::ones(&[d]), false),
            beta: store.add(format!("{prefix}.beta"), Component::Norm, Tensor::zeros(&[d]), false),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let (gm, bt) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.layer_norm(x, gm, bt, LN_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttnProjection {
    Saml(SamlLayer),
    Plain(ParamId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardLinear {
    pub base: ParamId,
    pub bias: ParamId,
    pub lora: LoraModule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    ln1: Norm,
    pub attn: Vec<AttnProjection>,
    ln2: Norm,
    pub ff1: FeedForwardLinear,
    pub ff2: FeedForwardLinear,
}

/// Per-layer gate summary carried in checkpoint metadata and reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRouting {
    pub layer: String,
    pub stats: RoutingStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionSummary {
    pub block_size: usize,
    pub bits_per_weight: f32,
    pub tensors: usize,
    pub weights: usize,
    pub fp32_bytes: usize,
    pub quantised_bytes: usize,
    pub payload_ratio: f64,
    pub rmse: f32,
    pub max_abs_err: f32,
}

#[derive(Clone, Debug)]
pub struct TinyTransformer {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stage: Stage,
    pub speaker: Option<u32>,
    pub routing: Vec<LayerRouting>,
    pub compression: Option<CompressionSummary>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    pub blocks: Vec<Block>,
    ln_f: Norm,
    head_w: ParamId,
    head_b: ParamId,
    quantized: BTreeMap<ParamId, QuantizedTensor>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[Σ len × vocab]`, one row per input position.
    pub logits: NodeId,
    /// Final normalised representation `[Σ len × d_model]`.
    pub hidden: NodeId,
    /// `(layer name, gate rows)` for every layer that still routes.
    pub gates: Vec<(String, NodeId)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub trainable_fraction: f64,
    pub by_component: BTreeMap<Component, usize>,
}

fn linear_init(store: &mut ParamStore, name: String, component: Component, out: usize, inp: usize, rng: &mut SeededRng) -> ParamId {
    let w = Tensor::randn(&[out, inp], 1.0 / (inp as f32).sqrt(), rng);
    store.add(name, component, w, false)
}

/// Deterministic construction from `cfg.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<TinyTransformer> {
    TinyTransformer::new(cfg.clone())
}

impl TinyTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let shape = SamlShape {
            d,
            k: d,
            n_experts: config.n_experts,
            rank: config.lora_rank,
            alpha: config.alpha(),
        };
        let tok_emb = store.add("embed.token", Component::Embedding, Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng), false);
        let pos_emb = store.add("embed.position", Component::Embedding, Tensor::randn(&[config.max_len, d], 0.5, &mut rng), false);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let p = format!("blocks.{b}");
            let ln1 = Norm::new(&mut store, &format!("{p}.ln1"), d);
            let mut attn = Vec::with_capacity(4);
            for proj in Projection::ALL {
                let name = format!("{p}.attn.{}", proj.short());
                let base = linear_init(&mut store, format!("{name}.base"), Component::AttentionBase, d, d, &mut rng);
                attn.push(if config.saml_targets.contains(&proj) {
                    AttnProjection::Saml(SamlLayer::new(&mut store, &name, base, shape, &mut rng)?)
                } else {
                    AttnProjection::Plain(base)
                });
            }
            let ln2 = Norm::new(&mut store, &format!("{p}.ln2"), d);
            let ff1 = Self::ff_linear(&mut store, &format!("{p}.ff.w1"), config.ff_hidden, d, &config, &mut rng)?;
            let ff2 = Self::ff_linear(&mut store, &format!("{p}.ff.w2"), d, config.ff_hidden, &config, &mut rng)?;
            blocks.push(Block {
                ln1,
                attn,
                ln2,
                ff1,
                ff2,
            });
        }
        let ln_f = Norm::new(&mut store, "final_norm", d);
        let head_w = linear_init(&mut store, "head.weight".into(), Component::Head, config.vocab_size, d, &mut rng);
        let head_b = store.add("head.bias", Component::Bias, Tensor::zeros(&[config.vocab_size]), false);
        Ok(Self {
            config,
            store,
            stage: Stage::Base,
            speaker: None,
            routing: Vec::new(),
            compression: None,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head_w,
            head_b,
            quantized: BTreeMap::new(),
        })
    }

    fn ff_linear(store: &mut ParamStore, prefix: &str, out: usize, inp: usize, cfg: &ModelConfig, rng: &mut SeededRng) -> Result<FeedForwardLinear> {
        let base = linear_init(store, format!("{prefix}.base"), Component::FeedForwardBase, out, inp, rng);
        let bias = store.add(format!("{prefix}.bias"), Component::Bias, Tensor::zeros(&[out]), false);
        let lora = LoraModule::new(store, &format!("{prefix}.lora"), Component::FeedForwardLora, out, inp, cfg.lora_rank, cfg.alpha(), rng)?;
        Ok(FeedForwardLinear { base, bias, lora })
    }

    pub fn saml_layers(&self) -> impl Iterator<Item = &SamlLayer> {
        self.blocks.iter().flat_map(|b| {
            b.attn.iter().filter_map(|a| match a {
                AttnProjection::Saml(l) => Some(l),
                AttnProjection::Plain(_) => None,
            })
        })
    }

    pub fn saml_layers_mut(&mut self) -> impl Iterator<Item = &mut SamlLayer> {
        self.blocks.iter_mut().flat_map(|b| {
            b.attn.iter_mut().filter_map(|a| match a {
                AttnProjection::Saml(l) => Some(l),
                AttnProjection::Plain(_) => None,
            })
        })
    }

    pub fn ff_loras(&self) -> impl Iterator<Item = &LoraModule> {
        self.blocks.iter().flat_map(|b| [&b.ff1.lora, &b.ff2.lora])
    }

    pub fn layer_modes(&self) -> BTreeMap<String, (LayerMode, Option<usize>)> {
        self.saml_layers()
            .map(|l| (l.prefix().to_string(), (l.mode, l.dominant)))
            .collect()
    }

    pub fn is_quantized(&self) -> bool {
        !self.quantized.is_empty()
    }

    pub fn quantized_tensor(&self, id: ParamId) -> Option<&QuantizedTensor> {
        self.quantized.get(&id)
    }

    /// Ids of the frozen base tensors (everything that is not an adapter).
    pub fn base_param_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| !self.store.component(id).is_adapter())
            .collect()
    }

    pub fn adapter_param_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| self.store.component(id).is_adapter())
            .collect()
    }

    /// Adapters trainable, base frozen.
    pub fn freeze_base(&mut self) {
        self.store.set_trainable_by(Component::is_adapter);
    }

    pub fn freeze_all(&mut self) {
        self.store.freeze_all();
    }

    /// Sets every adapter `B` (expert and feed-forward) to zero.
    pub fn zero_adapters(&mut self) {
        let ids: Vec<ParamId> = self
            .saml_layers()
            .flat_map(|l| l.experts.iter().map(|e| e.b))
            .chain(self.ff_loras().map(|l| l.b))
            .collect();
        for id in ids {
            self.store.get_mut(id).value.fill(0.0);
        }
    }

    pub fn count_params(&self) -> ParamCounts {
        let mut by_component = BTreeMap::new();
        let (mut total, mut trainable) = (0, 0);
        for id in self.store.ids() {
            let p = self.store.get(id);
            let n = p.value.numel();
            total += n;
            if p.trainable {
                trainable += n;
            }
            *by_component.entry(self.store.component(id)).or_insert(0) += n;
        }
        ParamCounts {
            total,
            trainable,
            trainable_fraction: trainable as f64 / total as f64,
            by_component,
        }
    }

    /// Stage 1: NF4-quantises embeddings, attention and feed-forward base
    /// weights and the classifier head. Biases and norms stay FP32. Weights
    /// are replaced by their dequantised values and frozen.
    pub fn quantize_base(&mut self, block_size: usize) -> Result<CompressionSummary> {
        self.quantize_base_with(block_size, CodebookId::Nf4)
    }

    pub fn quantize_base_with(&mut self, block_size: usize, codebook: CodebookId) -> Result<CompressionSummary> {
        if self.is_quantized() {
            return Err(Error::StageOrder("model base is already quantised".into()));
        }
        let ids: Vec<ParamId> = self
            .store
            .ids()
            .filter(|&id| self.store.component(id).is_quantisable())
            .collect();
        let (mut weights, mut qbytes, mut sq, mut max_abs_err) = (0usize, 0usize, 0.0f64, 0.0f32);
        for &id in &ids {
            let original = self.store.value(id).clone();
            let q = quantization::quantize_blockwise(&original, block_size, codebook)?;
            let report = quantization::measure(&q, &original)?;
            let restored = quantization::dequantize(&q)?;
            weights += original.numel();
            qbytes += q.payload().len();
            sq += (report.rmse as f64).powi(2) * original.numel() as f64;
            max_abs_err = max_abs_err.max(report.max_abs_err);
            let p = self.store.get_mut(id);
            p.value = restored;
            p.trainable = false;
            self.quantized.insert(id, q);
        }
        let summary = CompressionSummary {
            block_size,
            bits_per_weight: quantization::bits_per_weight(block_size),
            tensors: ids.len(),
            weights,
            fp32_bytes: 4 * weights,
            quantised_bytes: qbytes,
            payload_ratio: (4 * weights) as f64 / qbytes as f64,
            rmse: (sq / weights as f64).sqrt() as f32,
            max_abs_err,
        };
        self.compression = Some(summary.clone());
        self.stage = Stage::Stage1;
        Ok(summary)
    }

    fn check_tokens(&self, batch: &[Vec<u32>]) -> Result<()> {
        if batch.is_empty() || batch.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("token batch".into()));
        }
        for seq in batch {
            if seq.len() > self.config.max_len {
                return Err(Error::Index {
                    op: "forward",
                    index: seq.len(),
                    len: self.config.max_len,
                });
            }
            if let Some(&t) = seq.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::Index {
                    op: "forward",
                    index: t as usize,
                    len: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Records a forward pass for a batch of sequences.
    pub fn forward_graph(&self, g: &mut Graph, batch: &[Vec<u32>]) -> Result<ForwardOutput> {
        self.forward_impl(g, batch, true)
    }

    /// Forward pass that ignores every adapter (plain base model).
    pub fn forward_base_graph(&self, g: &mut Graph, batch: &[Vec<u32>]) -> Result<ForwardOutput> {
        self.forward_impl(g, batch, false)
    }

    fn forward_impl(&self, g: &mut Graph, batch: &[Vec<u32>], adapters: bool) -> Result<ForwardOutput> {
        self.check_tokens(batch)?;
        let store = &self.store;
        let cfg = &self.config;
        let ids: Vec<usize> = batch.iter().flatten().map(|&t| t as usize).collect();
        let positions: Vec<usize> = batch.iter().flat_map(|s| 0..s.len()).collect();
        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let te = g.gather(tok, &ids)?;
        let pe = g.gather(pos, &positions)?;
        let mut h = g.add(te, pe)?;
        let mut gates = Vec::new();
        let dh = cfg.d_model / cfg.n_heads;
        let inv_sqrt = 1.0 / (dh as f32).sqrt();

        for block in &self.blocks {
            let a = block.ln1.apply(g, store, h)?;
            let mut proj = |g: &mut Graph, p: &AttnProjection, x: NodeId| -> Result<NodeId> {
                match p {
                    AttnProjection::Plain(w) => {
                        let w = g.param(store, *w);
                        g.matmul_nt(x, w)
                    }
                    AttnProjection::Saml(layer) if adapters => {
                        let (out, gate) = layer.forward_graph(g, store, x)?;
                        if let Some(gate) = gate {
                            gates.push((layer.prefix().to_string(), gate));
                        }
                        Ok(out)
                    }
                    AttnProjection::Saml(layer) => {
                        let w = g.param(store, layer.base);
                        g.matmul_nt(x, w)
                    }
                }
            };
            let q = proj(g, &block.attn[0], a)?;
            let k = proj(g, &block.attn[1], a)?;
            let v = proj(g, &block.attn[2], a)?;
            let mut seqs = Vec::with_capacity(batch.len());
            let mut off = 0;
            for seq in batch {
                let len = seq.len();
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for hd in 0..cfg.n_heads {
                    let qs = g.slice(q, off, len, hd * dh, dh)?;
                    let ks = g.slice(k, off, len, hd * dh, dh)?;
                    let vs = g.slice(v, off, len, hd * dh, dh)?;
                    let scores = g.matmul_nt(qs, ks)?;
                    let scores = g.scale(scores, inv_sqrt);
                    let p = g.softmax_rows(scores)?;
                    heads.push(g.matmul(p, vs)?);
                }
                seqs.push(g.concat_cols(&heads)?);
                off += len;
            }
            let ctx = g.concat_rows(&seqs)?;
            let o = proj(g, &block.attn[3], ctx)?;
            h = g.add(h, o)?;

            let f = block.ln2.apply(g, store, h)?;
            let f = self.ff_apply(g, &block.ff1, f, adapters)?;
            let f = g.gelu(f);
            let f = self.ff_apply(g, &block.ff2, f, adapters)?;
            h = g.add(h, f)?;
        }
        let hidden = self.ln_f.apply(g, store, h)?;
        let hw = g.param(store, self.head_w);
        let hb = g.param(store, self.head_b);
        let logits = g.matmul_nt(hidden, hw)?;
        let logits = g.add_row(logits, hb)?;
        Ok(ForwardOutput { logits, hidden, gates })
    }

    fn ff_apply(&self, g: &mut Graph, lin: &FeedForwardLinear, x: NodeId, adapters: bool) -> Result<NodeId> {
        let store = &self.store;
        let w = g.param(store, lin.base);
        let mut y = g.matmul_nt(x, w)?;
        if adapters {
            let delta = lin.lora.delta_graph(g, store, x)?;
            y = g.add(y, delta)?;
        }
        let b = g.param(store, lin.bias);
        g.add_row(y, b)
    }

    /// Logits `[Σ len × vocab]` for a batch.
    pub fn forward(&self, batch: &[Vec<u32>]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, batch)?;
        Ok(g.value(out.logits).clone())
    }

    /// Fresh adapters (`n_experts` per attention projection, drawn from
    /// `seed`) on top of a copy of this model's base weights.
    pub fn with_experts(&self, n_experts: usize, seed: u64) -> Result<Self> {
        let config = ModelConfig {
            n_experts,
            seed,
            ..self.config.clone()
        };
        let mut out = Self::new(config)?;
        for id in self.base_param_ids() {
            let name = self.store.name(id);
            let target = out
                .store
                .find(name)
                .ok_or_else(|| Error::Layout(format!("base tensor `{name}` missing from rebuilt model")))?;
            out.store.get_mut(target).value = self.store.value(id).clone();
            if let Some(q) = self.quantized.get(&id) {
                out.quantized.insert(target, q.clone());
            }
        }
        out.stage = if self.is_quantized() { Stage::Stage1 } else { Stage::Base };
        out.compression = self.compression.clone();
        Ok(out)
    }

    pub(crate) fn set_quantized(&mut self, id: ParamId, q: QuantizedTensor) {
        self.quantized.insert(id, q);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            max_len: 8,
            d_model: 16,
            n_heads: 4,
            n_blocks: 2,
            ff_hidden: 32,
            n_experts: 3,
            lora_rank: 2,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn builds_and_runs() {
        let cfg = ModelConfig {
            n_blocks: 2,
            n_heads: 4,
            d_model: 64,
            max_len: 8,
            ..ModelConfig::default()
        };
        let m = build_model(&cfg).unwrap();
        let batch = vec![vec![1, 2, 3, 4, 5, 6, 7, 8], vec![0, 0, 1, 1, 2, 2, 3, 3]];
        let logits = m.forward(&batch).unwrap();
        assert_eq!(logits.shape(), &[16, cfg.vocab_size]);
        assert!(logits.is_finite());
        assert_eq!(m.saml_layers().count(), 2 * 4);
        assert_eq!(m.ff_loras().count(), 2 * 2);
    }

    #[test]
    fn deterministic_build() {
        let a = build_model(&small()).unwrap();
        let b = build_model(&small()).unwrap();
        for id in a.store.ids() {
            assert_eq!(a.store.name(id), b.store.name(id));
            assert_eq!(a.store.value(id), b.store.value(id));
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let bad = ModelConfig {
            n_heads: 3,
            ..small()
        };
        match build_model(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "n_heads"),
            other => panic!("{other:?}"),
        }
        let bad = ModelConfig {
            vocab_size: 0,
            ..small()
        };
        assert!(matches!(build_model(&bad), Err(Error::Config { field, .. }) if field == "vocab_size"));
    }

    #[test]
    fn zero_adapters_equal_base_model() {
        let m = build_model(&small()).unwrap();
        let batch = vec![vec![1, 5, 3, 9], vec![10, 0, 2, 2]];
        let mut g = Graph::new();
        let a = m.forward_graph(&mut g, &batch).unwrap().logits;
        let b = m.forward_base_graph(&mut g, &batch).unwrap().logits;
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn batch_permutation_permutes_rows() {
        let mut m = build_model(&small()).unwrap();
        let mut rng = SeededRng::new(1);
        for id in m.adapter_param_ids() {
            let shape = m.store.value(id).shape().to_vec();
            m.store.get_mut(id).value = Tensor::randn(&shape, 0.1, &mut rng);
        }
        let s1 = vec![1, 2, 3, 4, 5];
        let s2 = vec![7, 7, 0, 1, 2];
        let ab = m.forward(&[s1.clone(), s2.clone()]).unwrap();
        let ba = m.forward(&[s2, s1]).unwrap();
        for t in 0..5 {
            assert_eq!(ab.row(t), ba.row(t + 5));
            assert_eq!(ab.row(t + 5), ba.row(t));
        }
    }

    #[test]
    fn out_of_range_token() {
        let m = build_model(&small()).unwrap();
        assert!(matches!(m.forward(&[vec![1, 11]]), Err(Error::Index { index: 11, .. })));
        assert!(m.forward(&[vec![0; 9]]).is_err());
    }

    #[test]
    fn placement_and_freeze() {
        let m = build_model(&small()).unwrap();
        for l in m.saml_layers() {
            assert_eq!(l.mode, LayerMode::Full);
            assert!(l.router.is_some());
            assert!(!m.store.get(l.base).trainable);
        }
        for b in &m.blocks {
            // feed-forward linears carry a single LoRA and no router
            for ff in [&b.ff1, &b.ff2] {
                assert_eq!(m.store.component(ff.lora.a), Component::FeedForwardLora);
            }
        }
        for id in m.base_param_ids() {
            assert!(!m.store.get(id).trainable, "{}", m.store.name(id));
        }
    }

    #[test]
    fn hand_count_single_expert() {
        let cfg = ModelConfig {
            n_experts: 1,
            ..small()
        };
        let m = build_model(&cfg).unwrap();
        let (v, l, d, h, r, nb) = (11, 8, 16, 32, 2, 2);
        let per_block_base = 4 * d * d + 2 * h * d + h + d + 4 * d;
        let base = v * d + l * d + nb * per_block_base + 2 * d + v * d + v;
        let per_block_adapters = 4 * r * (d + d) + r * (h + d) + r * (d + h);
        let adapters = nb * per_block_adapters;
        let c = m.count_params();
        assert_eq!(c.total, base + adapters);
        assert_eq!(c.trainable, adapters);
        assert!(m.saml_layers().all(|l| l.router.is_none()));
    }

    #[test]
    fn default_trainable_fraction_is_small() {
        let m = build_model(&ModelConfig::default()).unwrap();
        let c = m.count_params();
        assert!(c.trainable_fraction < 0.15, "{}", c.trainable_fraction);
        let mut frozen = m.clone();
        frozen.freeze_all();
        assert_eq!(frozen.count_params().trainable, 0);
    }

    #[test]
    fn quantize_base_contract() {
        let mut m = build_model(&small()).unwrap();
        let before: Vec<Tensor> = m.base_param_ids().iter().map(|&id| m.store.value(id).clone()).collect();
        let s = m.quantize_base(64).unwrap();
        assert_eq!(m.stage, Stage::Stage1);
        assert!(s.payload_ratio >= 6.8, "{}", s.payload_ratio);
        assert!(m.forward(&[vec![1, 2, 3]]).unwrap().is_finite());
        for (&id, orig) in m.base_param_ids().iter().zip(&before) {
            let c = m.store.component(id);
            if c.is_quantisable() {
                assert!(m.quantized_tensor(id).is_some());
                let n = orig.numel() as f32;
                let rms = (orig.data().iter().map(|v| v * v).sum::<f32>() / n).sqrt();
                let err = (m.store.value(id).sub(orig).unwrap().data().iter().map(|v| v * v).sum::<f32>() / n).sqrt();
                // measured NF4 error is ~0.09 of the data's RMS for Gaussian blocks of 64
                assert!(err <= 0.12 * rms, "{} {err} vs {rms}", m.store.name(id));
            } else {
                assert!(m.quantized_tensor(id).is_none());
                assert_eq!(m.store.value(id), orig);
            }
        }
        assert!(matches!(m.quantize_base(64), Err(Error::StageOrder(_))));
    }
}
