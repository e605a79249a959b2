use std::collections::BTreeMap;
use std::sync::OnceLock;

use saml_core::model::{write_checkpoint, ModelConfig, Stage, TinyTransformer};
use saml_core::numerics::{Component, Optimizer, OptimizerConfig};
use saml_core::pipeline::corpus::{generate_corpus, CorpusConfig, Split, SpeakerPartition, SyntheticCorpus};
use saml_core::pipeline::eval::{embeddings, evaluate, evaluate_adapted};
use saml_core::pipeline::train::{phase_for, train_step, Phase, TrainConfig};
use saml_core::pipeline::{fit_donors, init_from_donors, stage1, stage2_pretrain, stage3_adapt, train_base, PipelineConfig, Stage1Report};
use saml_core::Error;

struct Fixture {
    cfg: PipelineConfig,
    corpus: SyntheticCorpus,
    partition: SpeakerPartition,
    fp32: TinyTransformer,
    quantized: TinyTransformer,
    stage1: Stage1Report,
    pretrained: TinyTransformer,
}

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed: 11,
        adapt_speakers: 3,
        corpus: CorpusConfig {
            n_speakers: 10,
            utterances_per_speaker: 30,
            base_utterances: 300,
            ..CorpusConfig::default()
        },
        model: ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_blocks: 1,
            ff_hidden: 64,
            n_experts: 3,
            ..ModelConfig::default()
        },
        ..PipelineConfig::default()
    };
    cfg.base.steps = 150;
    cfg.base.eval_every = 50;
    cfg.pretrain.steps = 60;
    cfg.pretrain.eval_every = 20;
    cfg.adapt.steps = 30;
    cfg.adapt.eval_every = 10;
    cfg.donor.steps = 30;
    cfg.resolved()
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = small_config();
        cfg.validate().unwrap();
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let partition = corpus.partition(cfg.adapt_speakers).unwrap();
        let mut model = TinyTransformer::new(cfg.model.clone()).unwrap();
        train_base(&mut model, &corpus, &cfg.base, cfg.seed).unwrap();
        let fp32 = model.clone();
        let probe: Vec<_> = corpus.base_split(Split::Test).into_iter().take(32).collect();
        let stage1 = stage1(&mut model, &probe).unwrap();
        let quantized = model.clone();
        stage2_pretrain(&mut model, &corpus, &partition, &cfg.pretrain, false, cfg.seed).unwrap();
        Fixture {
            cfg,
            corpus,
            partition,
            fp32,
            quantized,
            stage1,
            pretrained: model,
        }
    })
}

fn logits(model: &TinyTransformer, corpus: &SyntheticCorpus, speakers: &[u32]) -> Vec<f32> {
    let batch: Vec<Vec<u32>> = corpus.select(speakers, Split::Test).iter().map(|u| u.tokens.clone()).collect();
    model.forward(&batch).unwrap().data().to_vec()
}

fn base_tensors(model: &TinyTransformer) -> BTreeMap<String, Vec<f32>> {
    model
        .base_param_ids()
        .into_iter()
        .map(|id| (model.store.name(id).to_string(), model.store.value(id).data().to_vec()))
        .collect()
}

#[test]
fn stages_must_run_in_order() {
    let f = fixture();
    let mut fp32 = f.fp32.clone();
    let err = stage2_pretrain(&mut fp32, &f.corpus, &f.partition, &f.cfg.pretrain, false, f.cfg.seed).unwrap_err();
    assert!(matches!(err, Error::StageOrder(_)), "{err}");
    let err = stage3_adapt(&f.quantized, &f.corpus, &f.partition, f.partition.adapt[0], &f.cfg.adapt, f.cfg.seed).unwrap_err();
    assert!(matches!(err, Error::StageOrder(_)), "{err}");
    let mut q = f.quantized.clone();
    assert!(matches!(q.quantize_base(64), Err(Error::StageOrder(_))));
    let mut again = f.pretrained.clone();
    let err = stage2_pretrain(&mut again, &f.corpus, &f.partition, &f.cfg.pretrain, false, f.cfg.seed).unwrap_err();
    assert!(matches!(err, Error::StageOrder(_)));
    let mut trained = f.quantized.clone();
    assert!(matches!(train_base(&mut trained, &f.corpus, &f.cfg.base, 0), Err(Error::StageOrder(_))));

    // fp32 mode explicitly allows stage 2 on the unquantised base
    let mut cfg = f.cfg.pretrain.clone();
    cfg.steps = 2;
    stage2_pretrain(&mut fp32, &f.corpus, &f.partition, &cfg, true, f.cfg.seed).unwrap();
    assert_eq!(fp32.stage, Stage::Stage2);
}

#[test]
fn pretraining_speaker_cannot_be_adapted() {
    let f = fixture();
    let s = f.partition.pretrain[0];
    let err = stage3_adapt(&f.pretrained, &f.corpus, &f.partition, s, &f.cfg.adapt, f.cfg.seed).unwrap_err();
    assert_eq!(err.to_string(), Error::SpeakerOverlap(vec![s]).to_string());
    let err = SpeakerPartition::new(vec![0, 1, 2, 5], vec![5, 2, 7]).unwrap_err();
    assert!(matches!(err, Error::SpeakerOverlap(ref v) if v == &vec![2, 5]), "{err}");
}

#[test]
fn quantisation_drift_is_bounded_and_nonzero() {
    let f = fixture();
    let c = &f.stage1.compression;
    assert_eq!(c.bits_per_weight, 4.5);
    assert!((c.payload_ratio - 64.0 / 9.0).abs() < 1e-9);
    let drift = f.stage1.logit_max_abs_diff.unwrap();
    assert!(drift > 0.0 && drift.is_finite() && drift < 5.0, "drift {drift}");
    let fp = logits(&f.fp32, &f.corpus, &f.partition.adapt);
    let q = logits(&f.quantized, &f.corpus, &f.partition.adapt);
    assert_ne!(fp, q);
}

#[test]
fn quantised_checkpoint_is_smaller() {
    let f = fixture();
    let fp = write_checkpoint(&f.fp32).unwrap().len();
    let q = write_checkpoint(&f.quantized).unwrap().len();
    let base_weights: usize = f.quantized.base_param_ids().iter().filter(|&&id| f.quantized.quantized_tensor(id).is_some()).map(|&id| f.quantized.store.value(id).data().len()).sum();
    // every quantised weight saves 4 bytes minus 4.5 bits
    let expected_saving = base_weights * 4 - base_weights * 9 / 16;
    assert!(q < fp, "{q} >= {fp}");
    assert!(fp - q + 4096 >= expected_saving, "saved {} of {expected_saving}", fp - q);
}

#[test]
fn zero_step_adaptation_leaves_model_unchanged() {
    let f = fixture();
    let mut cfg = f.cfg.adapt.clone();
    cfg.steps = 0;
    let s = f.partition.adapt[0];
    let (adapted, out) = stage3_adapt(&f.pretrained, &f.corpus, &f.partition, s, &cfg, f.cfg.seed).unwrap();
    assert_eq!(out.best_step, 0);
    assert_eq!(adapted.stage, Stage::Stage3);
    assert_eq!(adapted.speaker, Some(s));
    assert_eq!(logits(&adapted, &f.corpus, &[s]), logits(&f.pretrained, &f.corpus, &[s]));
}

#[test]
fn adaptation_is_isolated_per_speaker() {
    let f = fixture();
    let (a, b) = (f.partition.adapt[0], f.partition.adapt[1]);
    let before = f.pretrained.clone();
    let (ma, oa) = stage3_adapt(&f.pretrained, &f.corpus, &f.partition, a, &f.cfg.adapt, f.cfg.seed).unwrap();
    let (mb, _) = stage3_adapt(&f.pretrained, &f.corpus, &f.partition, b, &f.cfg.adapt, f.cfg.seed).unwrap();
    // the shared pretrained model is untouched
    assert_eq!(logits(&f.pretrained, &f.corpus, &[a]), logits(&before, &f.corpus, &[a]));
    // base tensors are identical to stage 1 in every adapted copy
    let base = base_tensors(&f.quantized);
    assert_eq!(base_tensors(&ma), base);
    assert_eq!(base_tensors(&mb), base);
    // adapting B does not depend on A: rerunning A gives the same model
    let (ma2, _) = stage3_adapt(&f.pretrained, &f.corpus, &f.partition, a, &f.cfg.adapt, f.cfg.seed).unwrap();
    assert_eq!(logits(&ma, &f.corpus, &[a]), logits(&ma2, &f.corpus, &[a]));
    assert!(oa.best_dev.loss <= oa.initial_dev.loss);

    // each adapted model is at least as good on its own speaker as the other one
    let ea = evaluate(&ma, &f.corpus.utterances, Split::Dev, &[a], 0).unwrap().aggregate.loss;
    let eb_on_a = evaluate(&mb, &f.corpus.utterances, Split::Dev, &[a], 0).unwrap().aggregate.loss;
    assert!(ea <= eb_on_a, "own {ea} vs other {eb_on_a}");
}

#[test]
fn interleaved_steps_update_disjoint_groups() {
    let f = fixture();
    let mut model = f.quantized.clone();
    model.store.freeze_all();
    let train = f.corpus.select(&f.partition.pretrain, Split::Train);
    let batch: Vec<_> = train.into_iter().take(8).collect();
    let groups = |m: &TinyTransformer| -> BTreeMap<Component, Vec<f32>> {
        let mut out: BTreeMap<Component, Vec<f32>> = BTreeMap::new();
        for id in m.store.ids() {
            out.entry(m.store.component(id)).or_default().extend_from_slice(m.store.value(id).data());
        }
        out
    };
    let mut opt = Optimizer::new(OptimizerConfig::adam(1e-2));
    for step in 1..=4 {
        let phase = phase_for(step, 1, true);
        assert_eq!(phase, if step % 2 == 1 { Phase::Experts } else { Phase::Router });
        model.store.set_trainable_by(|c| phase.trains(c));
        model.store.zero_grads();
        let before = groups(&model);
        train_step(&mut model, &batch, step).unwrap();
        opt.step(&mut model.store).unwrap();
        let after = groups(&model);
        for (c, v) in &before {
            let changed = &after[c] != v;
            // zero-initialised B factors make the first expert step move B only,
            // which still counts as the expert group changing
            assert_eq!(changed, phase.trains(*c), "step {step} component {c:?}");
        }
    }
}

#[test]
fn evaluation_is_deterministic_and_averages_speakers() {
    let f = fixture();
    let r1 = evaluate(&f.pretrained, &f.corpus.utterances, Split::Test, &f.partition.adapt, 5).unwrap();
    let r2 = evaluate(&f.pretrained, &f.corpus.utterances, Split::Test, &f.partition.adapt, 5).unwrap();
    assert_eq!(r1, r2);
    let n = r1.per_speaker.len() as f64;
    let mean = r1.per_speaker.values().map(|m| m.loss).sum::<f64>() / n;
    assert!((r1.aggregate.loss - mean).abs() < 1e-12);
    assert_eq!(r1.per_speaker.keys().copied().collect::<Vec<_>>(), f.partition.adapt);

    let models: BTreeMap<u32, TinyTransformer> = f.partition.adapt.iter().map(|&s| (s, f.pretrained.clone())).collect();
    let r3 = evaluate_adapted(&models, &f.corpus.utterances, Split::Test, 5).unwrap();
    assert_eq!(r3.per_speaker, r1.per_speaker);
}

#[test]
fn embeddings_have_one_row_per_utterance() {
    let f = fixture();
    let utts = f.corpus.select(&f.partition.adapt, Split::Test);
    let rows = embeddings(&f.pretrained, &utts).unwrap();
    assert_eq!(rows.len(), utts.len());
    assert!(rows.iter().all(|(_, v)| v.len() == f.cfg.model.d_model));
    assert_eq!(rows.iter().map(|(s, _)| *s).collect::<Vec<_>>(), utts.iter().map(|u| u.speaker).collect::<Vec<_>>());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    let n = saml_core::pipeline::eval::export_embeddings(&f.pretrained, &utts, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(n, utts.len());
    assert_eq!(lines.len(), utts.len() + 1);
    assert_eq!(lines[1].split(',').count(), f.cfg.model.d_model + 1);
}

#[test]
fn donor_initialisation_starts_no_worse_than_zero_delta() {
    let f = fixture();
    let n = f.cfg.model.n_experts;
    let donors = fit_donors(&f.quantized, &f.corpus, &f.partition.pretrain[..n], &f.cfg.donor, f.cfg.seed).unwrap();
    let mut init = f.quantized.clone();
    init_from_donors(&mut init, &donors).unwrap();
    let dev = |m: &TinyTransformer| evaluate(m, &f.corpus.utterances, Split::Dev, &f.partition.pretrain, 0).unwrap().aggregate.loss;
    let (zero, donor) = (dev(&f.quantized), dev(&init));
    assert!(donor <= zero, "donor init {donor} vs zero init {zero}");
    assert!(init_from_donors(&mut init, &donors[..1]).is_err());
}

#[test]
fn training_config_is_validated() {
    let f = fixture();
    let cfg = TrainConfig {
        batch_size: 0,
        ..f.cfg.adapt.clone()
    };
    let err = stage3_adapt(&f.pretrained, &f.corpus, &f.partition, f.partition.adapt[0], &cfg, 0).unwrap_err();
    assert!(matches!(err, Error::Config { ref field, .. } if field == "batch_size"), "{err}");
}
