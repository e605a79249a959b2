//! Mini-batch training with interleaved router / expert updates and
//! best-dev selection.

use serde::{Deserialize, Serialize};

use super::corpus::{Split, Utterance};
use super::eval::{score, score_with_routing, MetricRecord, SplitMetrics};
use crate::error::{Error, Result};
use crate::model::TinyTransformer;
use crate::numerics::{Component, Graph, Optimizer, OptimizerConfig, ParamId, SeededRng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Zero leaves the model untouched.
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Batches per phase before switching between expert and router updates.
    pub interleave_period: usize,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            optimizer: OptimizerConfig::adam(1e-2),
            interleave_period: 1,
            eval_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("interleave_period", self.interleave_period),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::Config {
                    field: field.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            return Err(Error::Config {
                field: "optimizer.lr".into(),
                reason: "must be finite and positive".into(),
            });
        }
        Ok(())
    }
}

/// Which parameters a step may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Every non-adapter tensor (base-model training).
    Base,
    /// Every adapter tensor.
    Adapters,
    /// Expert and feed-forward LoRA factors; routers frozen.
    Experts,
    /// Routers only.
    Router,
}

impl Phase {
    pub fn trains(self, c: Component) -> bool {
        match self {
            Phase::Base => !c.is_adapter(),
            Phase::Adapters => c.is_adapter(),
            Phase::Experts => matches!(c, Component::Expert | Component::FeedForwardLora),
            Phase::Router => c == Component::Router,
        }
    }
}

/// Phase of 1-based `step`: the first `period` steps update experts, the
/// next `period` the routers, and so on. Models without routers train all
/// adapters on every step.
pub fn phase_for(step: usize, period: usize, has_router: bool) -> Phase {
    if !has_router {
        return Phase::Adapters;
    }
    if ((step - 1) / period).is_multiple_of(2) {
        Phase::Experts
    } else {
        Phase::Router
    }
}

pub fn has_router(model: &TinyTransformer) -> bool {
    model.saml_layers().any(|l| l.router.is_some())
}

/// What a training run optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Base,
    Adapters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub best_step: usize,
    pub best_dev: SplitMetrics,
    pub initial_dev: SplitMetrics,
    pub last_train_loss: Option<f64>,
    pub records: Vec<MetricRecord>,
}

/// Labels for the record stream.
#[derive(Clone, Copy, Debug)]
pub struct RunTag<'a> {
    pub stage: &'a str,
    pub speaker: Option<u32>,
    pub seed: u64,
}

fn snapshot(model: &TinyTransformer, ids: &[ParamId]) -> Vec<Tensor> {
    ids.iter().map(|&id| model.store.value(id).clone()).collect()
}

/// Loss of one batch; gradients are accumulated into the store.
pub fn train_step(model: &mut TinyTransformer, batch: &[&Utterance], step: usize) -> Result<f64> {
    let tokens: Vec<Vec<u32>> = batch.iter().map(|u| u.tokens.clone()).collect();
    let targets: Vec<usize> = batch.iter().flat_map(|u| u.labels.iter().map(|&y| y as usize)).collect();
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &tokens)?;
    let loss = g.cross_entropy(out.logits, &targets)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, value });
    }
    g.backward(loss, &mut model.store)?;
    Ok(value as f64)
}

/// Trains `target` on `train`, evaluating on `dev` at step 0, every
/// `eval_every` steps and at the end. The parameters with the lowest dev
/// loss are restored before returning.
pub fn train(
    model: &mut TinyTransformer,
    train_set: &[&Utterance],
    dev_set: &[&Utterance],
    cfg: &TrainConfig,
    target: Target,
    tag: RunTag<'_>,
    rng: &mut SeededRng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty(format!("{} train split", tag.stage)));
    }
    if dev_set.is_empty() {
        return Err(Error::Empty(format!("{} dev split", tag.stage)));
    }
    let default_phase = match target {
        Target::Base => Phase::Base,
        Target::Adapters => Phase::Adapters,
    };
    let tracked: Vec<ParamId> = model
        .store
        .ids()
        .filter(|&id| default_phase.trains(model.store.component(id)))
        .collect();
    let routed = target == Target::Adapters && has_router(model);

    let mut records = Vec::new();
    let mut evaluate = |model: &TinyTransformer, step: usize| -> Result<SplitMetrics> {
        let (m, routing) = score_with_routing(model, dev_set)?;
        records.push(MetricRecord::new(tag.seed, tag.stage, step, tag.speaker, Split::Dev, &m, &routing));
        Ok(m)
    };
    let initial_dev = evaluate(model, 0)?;
    let mut best = (0usize, initial_dev, snapshot(model, &tracked));

    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut last_train_loss = None;
    model.store.zero_grads();
    for step in 1..=cfg.steps {
        let phase = match target {
            Target::Base => Phase::Base,
            Target::Adapters => phase_for(step, cfg.interleave_period, routed),
        };
        model.store.set_trainable_by(|c| phase.trains(c));
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train_set.len()) {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(train_set[order[cursor]]);
            cursor += 1;
        }
        last_train_loss = Some(train_step(model, &batch, step)?);
        opt.step(&mut model.store)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let m = evaluate(model, step)?;
            if m.loss < best.1.loss {
                best = (step, m, snapshot(model, &tracked));
            }
        }
    }
    for (&id, v) in tracked.iter().zip(best.2) {
        model.store.get_mut(id).value = v;
    }
    model.freeze_base();
    Ok(TrainOutcome {
        best_step: best.0,
        best_dev: best.1,
        initial_dev,
        last_train_loss,
        records,
    })
}

/// Dev metrics without any training, for reporting baselines.
pub fn dev_metrics(model: &TinyTransformer, dev_set: &[&Utterance]) -> Result<SplitMetrics> {
    score(model, dev_set)
}
