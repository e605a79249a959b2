//! LoRA modules and the speaker-adaptive mixture of LoRA experts.
//!
//! A [`SamlLayer`] wraps a frozen `[d×k]` base weight `W₀` with `n` LoRA
//! experts `(Aᵢ [r×k], Bᵢ [d×r])` and a router `W_g [n×k]`. For an input
//! row `x` the gates are `g = softmax(W_g·x)` and the output is
//!
//! ```text
//! h = W₀x + (α/r) · (Σᵢ gᵢBᵢ) · (Σᵢ gᵢAᵢ) · x
//! ```
//!
//! Gating is per token: each row of a `[T×k]` input gets its own gates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Component, Graph, NodeId, ParamId, ParamStore, SeededRng, Tensor};

/// Standard deviation of the Gaussian used for fresh `A` and router weights.
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraModule {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f32,
    pub d: usize,
    pub k: usize,
}

impl LoraModule {
    /// `A ~ N(0, INIT_STD²)`, `B = 0`, so the initial delta is exactly zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        component: Component,
        d: usize,
        k: usize,
        rank: usize,
        alpha: f32,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let a = Tensor::randn(&[rank.max(1), k.max(1)], INIT_STD, rng);
        let b = Tensor::zeros(&[d.max(1), rank.max(1)]);
        Self::from_tensors(store, prefix, component, a, b, alpha)
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        prefix: &str,
        component: Component,
        a: Tensor,
        b: Tensor,
        alpha: f32,
    ) -> Result<Self> {
        let (rank, k) = (a.shape()[0], a.cols());
        let d = b.rows();
        if a.shape().len() != 2 || b.shape() != [d, rank] {
            return Err(Error::shape("lora", a.shape(), b.shape()));
        }
        if rank > d.min(k) {
            return Err(Error::Config {
                field: "lora_rank".into(),
                reason: format!("rank {rank} exceeds min(d, k) = {}", d.min(k)),
            });
        }
        let a = store.add(format!("{prefix}.a"), component, a, true);
        let b = store.add(format!("{prefix}.b"), component, b, true);
        Ok(Self {
            a,
            b,
            rank,
            alpha,
            d,
            k,
        })
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d + self.k)
    }

    /// Dense `ΔW = (α/r)·B·A`.
    pub fn delta(&self, store: &ParamStore) -> Result<Tensor> {
        Ok(store.value(self.b).matmul(store.value(self.a))?.scale(self.scale()))
    }

    /// `W₀x + (α/r)·B·(A·x)` for a single input vector.
    pub fn forward(&self, store: &ParamStore, w0: &Tensor, x: &Tensor) -> Result<Tensor> {
        lora_forward(self, store, w0, x)
    }

    /// Low-rank delta rows `(α/r)·B·A·x[t]` for `x [T×k]`.
    pub fn delta_graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let t = g.value(x).rows();
        let ones = g.input(Tensor::ones(&[t, 1]));
        let (a, b) = (g.param(store, self.a), g.param(store, self.b));
        g.gated_low_rank(x, ones, &[a], &[b], self.scale())
    }

    fn deep_copy(&self, from: &ParamStore, to: &mut ParamStore, prefix: &str, component: Component) -> Result<Self> {
        Self::from_tensors(
            to,
            prefix,
            component,
            from.value(self.a).clone(),
            from.value(self.b).clone(),
            self.alpha,
        )
    }
}

/// `W₀x + (α/r)·B·(A·x)`.
pub fn lora_forward(m: &LoraModule, store: &ParamStore, w0: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w0.shape() != [m.d, m.k] || x.shape() != [m.k] {
        return Err(Error::shape("lora_forward", w0.shape(), x.shape()));
    }
    let base = w0.matmul(x)?;
    let u = store.value(m.a).matmul(x)?;
    let delta = store.value(m.b).matmul(&u)?.scale(m.scale());
    base.add(&delta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    pub weight: ParamId,
    pub n: usize,
    pub k: usize,
}

impl Router {
    pub fn new(store: &mut ParamStore, prefix: &str, n: usize, k: usize, rng: &mut SeededRng) -> Self {
        let w = Tensor::randn(&[n, k], INIT_STD, rng);
        Self {
            weight: store.add(format!("{prefix}.router"), Component::Router, w, true),
            n,
            k,
        }
    }

    /// `softmax(W_g·x)` for a single input vector.
    pub fn route(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        route(self, store, x)
    }

    /// Gate rows `[T×n]` for `x [T×k]`.
    pub fn gates_graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let logits = g.matmul_nt(x, w)?;
        g.softmax_rows(logits)
    }
}

pub fn route(router: &Router, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    if x.shape() != [router.k] {
        return Err(Error::shape("route", &[router.n, router.k], x.shape()));
    }
    crate::numerics::softmax(&store.value(router.weight).matmul(x)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    /// Router plus all experts.
    Full,
    /// One expert, gate fixed at 1, no router.
    CollapsedSingleLora,
    /// One expert scaled by its squared gate from the retained n-way router.
    Top1WithRouter,
    /// One expert, gate fixed at 1, router deleted from a non-collapsed layer.
    Top1NoRouter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamlLayer {
    pub base: ParamId,
    pub experts: Vec<LoraModule>,
    pub router: Option<Router>,
    pub mode: LayerMode,
    /// Index, among the original experts, of the expert kept by pruning.
    pub dominant: Option<usize>,
    pub d: usize,
    pub k: usize,
    pub rank: usize,
    pub alpha: f32,
    prefix: String,
}

/// How many experts / whether a router to create.
#[derive(Clone, Copy, Debug)]
pub struct SamlShape {
    pub d: usize,
    pub k: usize,
    pub n_experts: usize,
    pub rank: usize,
    pub alpha: f32,
}

impl SamlLayer {
    /// Fresh layer over an existing frozen base parameter. Experts start at
    /// zero delta. With `n_experts == 1` no router is created because a
    /// one-way softmax is identically 1.
    pub fn new(store: &mut ParamStore, prefix: &str, base: ParamId, shape: SamlShape, rng: &mut SeededRng) -> Result<Self> {
        let SamlShape {
            d,
            k,
            n_experts,
            rank,
            alpha,
        } = shape;
        if store.value(base).shape() != [d, k] {
            return Err(Error::shape("saml_layer", store.value(base).shape(), &[d, k]));
        }
        if n_experts == 0 {
            return Err(Error::Config {
                field: "n_experts".into(),
                reason: "must be at least 1".into(),
            });
        }
        let router = (n_experts > 1).then(|| Router::new(store, prefix, n_experts, k, rng));
        let experts = (0..n_experts)
            .map(|i| LoraModule::new(store, &format!("{prefix}.experts.{i}"), Component::Expert, d, k, rank, alpha, rng))
            .collect::<Result<Vec<_>>>()?;
        let mode = if router.is_some() {
            LayerMode::Full
        } else {
            LayerMode::CollapsedSingleLora
        };
        Ok(Self {
            base,
            experts,
            router,
            mode,
            dominant: (n_experts == 1).then_some(0),
            d,
            k,
            rank,
            alpha,
            prefix: prefix.to_string(),
        })
    }

    /// Full-mode layer with a router even for a single expert.
    pub fn with_router(store: &mut ParamStore, prefix: &str, base: ParamId, shape: SamlShape, rng: &mut SeededRng) -> Result<Self> {
        if shape.n_experts > 1 {
            return Self::new(store, prefix, base, shape, rng);
        }
        let router = Router::new(store, prefix, 1, shape.k, rng);
        let mut layer = Self::new(store, prefix, base, shape, rng)?;
        layer.router = Some(router);
        layer.mode = LayerMode::Full;
        layer.dominant = None;
        Ok(layer)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    /// Parameters owned by the adapter (router and experts), base excluded.
    pub fn adapter_param_count(&self) -> usize {
        let router = self.router.as_ref().map_or(0, |r| r.n * r.k);
        router + self.experts.iter().map(LoraModule::param_count).sum::<usize>()
    }

    fn require_full(&self, op: &str) -> Result<&Router> {
        match (&self.router, self.mode) {
            (Some(r), LayerMode::Full) => Ok(r),
            _ => Err(Error::Mode(format!("{op} needs a full-mode layer, found {:?}", self.mode))),
        }
    }

    /// Gates for one input `[k]` or per row of `[T×k]`.
    pub fn route(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let router = self.router.as_ref().ok_or_else(|| Error::Mode(format!("layer `{}` has no router", self.prefix)))?;
        if x.shape().len() == 1 {
            return route(router, store, x);
        }
        let rows = as_rows(x, self.k, "route")?;
        let mut g = Graph::new();
        let xn = g.input(rows);
        let gates = router.gates_graph(&mut g, store, xn)?;
        Ok(g.value(gates).clone())
    }

    /// Output rows for `x [T×k]`. Returns the gate node (full n-way
    /// softmax) alongside when the layer has a router.
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<(NodeId, Option<NodeId>)> {
        let w0 = g.param(store, self.base);
        let base = g.matmul_nt(x, w0)?;
        let (delta, gates) = match self.mode {
            LayerMode::Full => {
                let router = self.require_full("saml_forward")?;
                let gates = router.gates_graph(g, store, x)?;
                let a: Vec<NodeId> = self.experts.iter().map(|e| g.param(store, e.a)).collect();
                let b: Vec<NodeId> = self.experts.iter().map(|e| g.param(store, e.b)).collect();
                (g.gated_low_rank(x, gates, &a, &b, self.scale())?, Some(gates))
            }
            LayerMode::Top1WithRouter => {
                let router = self
                    .router
                    .as_ref()
                    .ok_or_else(|| Error::Mode("top1_with_router layer lost its router".into()))?;
                let dominant = self.dominant.ok_or_else(|| Error::Mode("no dominant expert recorded".into()))?;
                let gates = router.gates_graph(g, store, x)?;
                let gd = g.select_col(gates, dominant)?;
                let e = &self.experts[0];
                let (a, b) = (g.param(store, e.a), g.param(store, e.b));
                (g.gated_low_rank(x, gd, &[a], &[b], self.scale())?, Some(gates))
            }
            LayerMode::CollapsedSingleLora | LayerMode::Top1NoRouter => (self.experts[0].delta_graph(g, store, x)?, None),
        };
        Ok((g.add(base, delta)?, gates))
    }

    /// Mode-aware forward for a single vector `x [k]` or rows `x [T×k]`.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let rows = as_rows(x, self.k, "saml_forward")?;
        let mut g = Graph::new();
        let xn = g.input(rows);
        let (out, _) = self.forward_graph(&mut g, store, xn)?;
        let v = g.value(out).clone();
        if x.shape().len() == 1 {
            v.reshape(&[self.d])
        } else {
            Ok(v)
        }
    }

    /// Mixture output for one input vector; full mode only.
    pub fn saml_forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.require_full("saml_forward")?;
        if x.shape() != [self.k] {
            return Err(Error::shape("saml_forward", &[self.d, self.k], x.shape()));
        }
        self.forward(store, x)
    }

    /// Multiply-before-add expansion of the same mixture,
    /// `W₀x + (α/r)·Σᵢ Σⱼ gᵢgⱼ·Bᵢ·(Aⱼ·x)`, evaluated in f64 with its own
    /// softmax. Quadratic in the number of experts.
    pub fn saml_forward_reference(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let out = self.saml_forward_reference_f64(store, x)?;
        Tensor::new(&[self.d], out.into_iter().map(|v| v as f32).collect())
    }

    /// [`saml_forward_reference`](Self::saml_forward_reference) without the
    /// final rounding to FP32.
    pub fn saml_forward_reference_f64(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<f64>> {
        let router = self.require_full("saml_forward_reference")?;
        if x.shape() != [self.k] {
            return Err(Error::shape("saml_forward_reference", &[self.d, self.k], x.shape()));
        }
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let matvec = |m: &Tensor| -> Vec<f64> {
            (0..m.rows())
                .map(|i| m.row(i).iter().zip(&xs).map(|(&a, b)| a as f64 * b).sum())
                .collect()
        };
        let logits = matvec(store.value(router.weight));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let gates: Vec<f64> = exps.iter().map(|e| e / z).collect();

        let mut out = matvec(store.value(self.base));
        let ax: Vec<Vec<f64>> = self.experts.iter().map(|e| matvec(store.value(e.a))).collect();
        let s = self.scale() as f64;
        for (i, ei) in self.experts.iter().enumerate() {
            let bi = store.value(ei.b);
            for (j, axj) in ax.iter().enumerate() {
                let w = s * gates[i] * gates[j];
                for (row, o) in out.iter_mut().enumerate() {
                    let bax: f64 = bi.row(row).iter().zip(axj).map(|(&b, a)| b as f64 * a).sum();
                    *o += w * bax;
                }
            }
        }
        Ok(out)
    }

    /// Gate statistics over a set of calibration inputs `[T×k]`.
    pub fn collect_routing_stats(&self, store: &ParamStore, inputs: &Tensor) -> Result<RoutingStats> {
        let router = self.require_full("collect_routing_stats")?;
        let rows = as_rows(inputs, self.k, "collect_routing_stats")?;
        let mut g = Graph::new();
        let x = g.input(rows);
        let gates = router.gates_graph(&mut g, store, x)?;
        RoutingStats::from_gates(g.value(gates))
    }

    /// Applies a pruning transformation; removed parameters are deleted from
    /// `store`.
    pub fn prune(&mut self, store: &mut ParamStore, mode: PruneMode, stats: &RoutingStats) -> Result<usize> {
        if self.mode != LayerMode::Full {
            return Err(Error::Mode(format!("layer `{}` is already pruned ({:?})", self.prefix, self.mode)));
        }
        let n = self.experts.len();
        let d = stats.dominant_expert;
        if stats.mean_gates.len() != n || d >= n {
            return Err(Error::Mode(format!(
                "routing stats for {} experts do not match layer `{}` with {n}",
                stats.mean_gates.len(),
                self.prefix
            )));
        }
        let target = match mode {
            PruneMode::CollapsePrune => LayerMode::CollapsedSingleLora,
            PruneMode::Top1WithRouter => LayerMode::Top1WithRouter,
            PruneMode::Top1NoRouter => LayerMode::Top1NoRouter,
        };
        let before = self.adapter_param_count();
        self.restructure(store, target, d)?;
        Ok(before - self.adapter_param_count())
    }

    /// Puts a full layer into `mode` keeping expert `dominant`, without
    /// consulting routing statistics. Used when restoring a pruned layer.
    pub fn restructure(&mut self, store: &mut ParamStore, mode: LayerMode, dominant: usize) -> Result<()> {
        if self.mode != LayerMode::Full || mode == LayerMode::Full {
            if self.mode == mode && self.dominant == Some(dominant) {
                return Ok(());
            }
            return Err(Error::Mode(format!(
                "layer `{}` cannot go from {:?} to {mode:?}",
                self.prefix, self.mode
            )));
        }
        if dominant >= self.experts.len() {
            return Err(Error::Index {
                op: "restructure",
                index: dominant,
                len: self.experts.len(),
            });
        }
        let experts = std::mem::take(&mut self.experts);
        for (i, e) in experts.into_iter().enumerate() {
            if i == dominant {
                self.experts.push(e);
            } else {
                store.remove(e.a);
                store.remove(e.b);
            }
        }
        self.dominant = Some(dominant);
        self.mode = mode;
        if mode != LayerMode::Top1WithRouter {
            if let Some(r) = self.router.take() {
                store.remove(r.weight);
            }
        }
        Ok(())
    }

    /// Replaces the experts with deep copies of `donors` (see
    /// [`init_experts_from_loras`]).
    pub fn set_experts_from(&mut self, store: &mut ParamStore, donor_store: &ParamStore, donors: &[LoraModule]) -> Result<()> {
        if donors.len() != self.experts.len() {
            return Err(Error::Config {
                field: "donors".into(),
                reason: format!("{} donors for {} experts", donors.len(), self.experts.len()),
            });
        }
        for (e, donor) in self.experts.iter().zip(donors) {
            if (donor.d, donor.k, donor.rank) != (self.d, self.k, self.rank) {
                return Err(Error::shape("init_experts_from_loras", &[donor.d, donor.k, donor.rank], &[self.d, self.k, self.rank]));
            }
            store.get_mut(e.a).value = donor_store.value(donor.a).clone();
            store.get_mut(e.b).value = donor_store.value(donor.b).clone();
        }
        Ok(())
    }
}

fn as_rows(x: &Tensor, k: usize, op: &'static str) -> Result<Tensor> {
    match x.shape() {
        [n] if *n == k => x.clone().reshape(&[1, k]),
        [_, n] if *n == k => Ok(x.clone()),
        _ => Err(Error::shape(op, x.shape(), &[k])),
    }
}

/// Deep copies of `donors` registered in `store` under `prefix.experts.{i}`.
/// Later training of the copies never touches the donors.
pub fn init_experts_from_loras(
    store: &mut ParamStore,
    prefix: &str,
    donor_store: &ParamStore,
    donors: &[LoraModule],
) -> Result<Vec<LoraModule>> {
    let first = donors.first().ok_or_else(|| Error::Empty("donor list".into()))?;
    for d in donors {
        if (d.d, d.k, d.rank) != (first.d, first.k, first.rank) || d.alpha != first.alpha {
            return Err(Error::shape("init_experts_from_loras", &[first.d, first.k, first.rank], &[d.d, d.k, d.rank]));
        }
    }
    donors
        .iter()
        .enumerate()
        .map(|(i, d)| d.deep_copy(donor_store, store, &format!("{prefix}.experts.{i}"), Component::Expert))
        .collect()
}

/// Gate statistics of one layer over a calibration set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub mean_gates: Vec<f32>,
    pub mean_entropy: f32,
    pub top1_fraction: f32,
    pub dominant_expert: usize,
    pub inputs: usize,
}

impl RoutingStats {
    pub fn from_gates(gates: &Tensor) -> Result<Self> {
        let mut acc = RoutingAccumulator::new(gates.cols());
        acc.add(gates)?;
        acc.finish()
    }
}

/// Streaming accumulator behind [`RoutingStats`].
#[derive(Clone, Debug)]
pub struct RoutingAccumulator {
    gate_sums: Vec<f64>,
    entropy_sum: f64,
    argmax_counts: Vec<usize>,
    count: usize,
}

impl RoutingAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            gate_sums: vec![0.0; n],
            entropy_sum: 0.0,
            argmax_counts: vec![0; n],
            count: 0,
        }
    }

    pub fn add(&mut self, gates: &Tensor) -> Result<()> {
        if gates.cols() != self.gate_sums.len() {
            return Err(Error::shape("routing_stats", gates.shape(), &[self.gate_sums.len()]));
        }
        for t in 0..gates.rows() {
            let row = gates.row(t);
            let mut best = 0;
            for (i, &gv) in row.iter().enumerate() {
                self.gate_sums[i] += gv as f64;
                if gv > 0.0 {
                    self.entropy_sum -= gv as f64 * (gv as f64).ln();
                }
                if gv > row[best] {
                    best = i;
                }
            }
            self.argmax_counts[best] += 1;
            self.count += 1;
        }
        Ok(())
    }

    /// Folds another accumulator over the same expert count into this one.
    pub fn merge(&mut self, other: &RoutingAccumulator) -> Result<()> {
        if other.gate_sums.len() != self.gate_sums.len() {
            return Err(Error::shape("routing_stats", &[other.gate_sums.len()], &[self.gate_sums.len()]));
        }
        for (a, b) in self.gate_sums.iter_mut().zip(&other.gate_sums) {
            *a += b;
        }
        for (a, b) in self.argmax_counts.iter_mut().zip(&other.argmax_counts) {
            *a += b;
        }
        self.entropy_sum += other.entropy_sum;
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self) -> Result<RoutingStats> {
        if self.count == 0 {
            return Err(Error::Empty("calibration set".into()));
        }
        let c = self.count as f64;
        let mean_gates: Vec<f32> = self.gate_sums.iter().map(|s| (s / c) as f32).collect();
        let mut dominant = 0;
        for (i, &m) in mean_gates.iter().enumerate() {
            if m > mean_gates[dominant] {
                dominant = i;
            }
        }
        Ok(RoutingStats {
            top1_fraction: (self.argmax_counts[dominant] as f64 / c) as f32,
            mean_entropy: (self.entropy_sum / c) as f32,
            mean_gates,
            dominant_expert: dominant,
            inputs: self.count,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Health {
    Collapsed,
    Imbalanced,
    Healthy,
}

pub const DEFAULT_COLLAPSE_THRESHOLD: f32 = 0.99;
pub const DEFAULT_IMBALANCE_THRESHOLD: f32 = 0.90;

/// Classifies a layer by the mean gate of its dominant expert.
pub fn detect_collapse(stats: &RoutingStats, collapse_threshold: f32, imbalance_threshold: f32) -> Result<Health> {
    for (field, t) in [("collapse_threshold", collapse_threshold), ("imbalance_threshold", imbalance_threshold)] {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config {
                field: field.into(),
                reason: format!("{t} is outside (0, 1]"),
            });
        }
    }
    let top = stats.mean_gates[stats.dominant_expert];
    Ok(if top >= collapse_threshold {
        Health::Collapsed
    } else if top >= imbalance_threshold {
        Health::Imbalanced
    } else {
        Health::Healthy
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Delete the router and every non-dominant expert.
    CollapsePrune,
    /// Keep the dominant expert and the full router.
    Top1WithRouter,
    /// Keep only the dominant expert.
    Top1NoRouter,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub layers_collapsed: Vec<String>,
    pub layers_imbalanced: Vec<String>,
    pub params_removed: usize,
    pub modes: BTreeMap<String, LayerMode>,
}

/// Prunes one layer and reports the outcome.
pub fn prune_layer(
    layer: &mut SamlLayer,
    store: &mut ParamStore,
    mode: PruneMode,
    stats: &RoutingStats,
) -> Result<PruneReport> {
    let health = detect_collapse(stats, DEFAULT_COLLAPSE_THRESHOLD, DEFAULT_IMBALANCE_THRESHOLD)?;
    let removed = layer.prune(store, mode, stats)?;
    let mut report = PruneReport {
        params_removed: removed,
        ..PruneReport::default()
    };
    match health {
        Health::Collapsed => report.layers_collapsed.push(layer.prefix.clone()),
        Health::Imbalanced => report.layers_imbalanced.push(layer.prefix.clone()),
        Health::Healthy => {}
    }
    report.modes.insert(layer.prefix.clone(), layer.mode);
    Ok(report)
}
