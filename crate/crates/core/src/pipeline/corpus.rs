//! Synthetic multi-speaker sequence-labelling task.
//!
//! Clean label sequences come from one sparse Markov chain shared by every
//! speaker. Each speaker observes them through a private channel: an
//! accent-group permutation, a few speaker-specific token swaps, and a
//! noise path that emits a token from a speaker-biased distribution. The
//! model has to recover the clean labels from the observed tokens.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Successors per token in the label chain.
    pub branching: usize,
    pub accent_groups: usize,
    /// Tokens permuted by each accent group.
    pub group_tokens: usize,
    /// Random transpositions applied on top of the group permutation.
    pub speaker_swaps: usize,
    /// Probability that an observed token is drawn from the noise path.
    pub noise: f32,
    /// Scale of the per-speaker noise bias logits.
    pub bias_std: f32,
    /// Minimum mean total-variation distance between any two speakers.
    pub tv_floor: f64,
    /// Utterances generated through the identity channel for base training.
    pub base_utterances: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 60,
            utterances_per_speaker: 60,
            seq_len: 16,
            vocab_size: 32,
            branching: 3,
            accent_groups: 4,
            group_tokens: 8,
            speaker_swaps: 3,
            noise: 0.1,
            bias_std: 1.0,
            tv_floor: 0.05,
            base_utterances: 2000,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, reason: &str| Error::Config {
            field: field.into(),
            reason: reason.into(),
        };
        if self.n_speakers < 2 {
            return Err(err("n_speakers", "need at least 2 speakers"));
        }
        if self.utterances_per_speaker < 5 {
            return Err(err("utterances_per_speaker", "need at least 5 to fill every split"));
        }
        for (f, v) in [
            ("seq_len", self.seq_len),
            ("vocab_size", self.vocab_size),
            ("branching", self.branching),
            ("accent_groups", self.accent_groups),
        ] {
            if v == 0 {
                return Err(err(f, "must be positive"));
            }
        }
        if self.branching > self.vocab_size {
            return Err(err("branching", "exceeds vocab_size"));
        }
        if self.group_tokens > self.vocab_size {
            return Err(err("vocab_size", "smaller than group_tokens"));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(err("noise", "must lie in [0, 1)"));
        }
        if !(self.tv_floor >= 0.0 && self.tv_floor <= 1.0) {
            return Err(err("tv_floor", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config {
                field: "split".into(),
                reason: format!("unknown split `{s}`"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: u32,
    pub split: Split,
    /// Observed (distorted) tokens; model input.
    pub tokens: Vec<u32>,
    /// Clean labels; training target.
    pub labels: Vec<u32>,
}

/// One speaker's stochastic channel over the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub speaker_id: u32,
    pub seed: u64,
    pub group: usize,
    /// Clean label → token emitted on the noiseless path.
    pub permutation: Vec<u32>,
    pub noise: f32,
    /// Logits of the noise-path emission distribution.
    pub bias: Vec<f32>,
}

impl SpeakerSpec {
    fn noise_distribution(&self) -> Vec<f64> {
        let m = self.bias.iter().copied().fold(f32::MIN, f32::max);
        let e: Vec<f64> = self.bias.iter().map(|&b| ((b - m) as f64).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Row `y` of the confusion kernel: `P(token | label = y)`.
    pub fn kernel_row(&self, y: u32) -> Vec<f64> {
        let noise = self.noise as f64;
        let mut row: Vec<f64> = self.noise_distribution().into_iter().map(|q| noise * q).collect();
        row[self.permutation[y as usize] as usize] += 1.0 - noise;
        row
    }

    fn emit(&self, y: u32, cdf: &[f64], rng: &mut SeededRng) -> u32 {
        if (rng.uniform() as f64) < self.noise as f64 {
            let u = rng.uniform() as f64;
            cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1) as u32
        } else {
            self.permutation[y as usize]
        }
    }
}

/// Mean over labels of the total-variation distance between two kernels.
pub fn kernel_tv_distance(a: &SpeakerSpec, b: &SpeakerSpec) -> f64 {
    let v = a.permutation.len();
    let total: f64 = (0..v as u32)
        .map(|y| {
            let (ra, rb) = (a.kernel_row(y), b.kernel_row(y));
            0.5 * ra.iter().zip(&rb).map(|(p, q)| (p - q).abs()).sum::<f64>()
        })
        .sum();
    total / v as f64
}

/// Sparse first-order chain over labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelChain {
    /// Per label: `(successor, cumulative probability)`.
    pub transitions: Vec<Vec<(u32, f64)>>,
}

impl LabelChain {
    fn new(vocab: usize, branching: usize, rng: &mut SeededRng) -> Self {
        let transitions = (0..vocab)
            .map(|_| {
                let mut all: Vec<u32> = (0..vocab as u32).collect();
                rng.shuffle(&mut all);
                let w: Vec<f64> = (0..branching).map(|_| 0.2 + rng.uniform() as f64).collect();
                let z: f64 = w.iter().sum();
                let mut acc = 0.0;
                all[..branching]
                    .iter()
                    .zip(w)
                    .map(|(&s, wi)| {
                        acc += wi / z;
                        (s, acc)
                    })
                    .collect()
            })
            .collect();
        Self { transitions }
    }

    fn sample(&self, len: usize, rng: &mut SeededRng) -> Vec<u32> {
        let mut y = rng.below(self.transitions.len()) as u32;
        let mut out = Vec::with_capacity(len);
        out.push(y);
        while out.len() < len {
            let u = rng.uniform() as f64;
            let row = &self.transitions[y as usize];
            y = row.iter().find(|(_, c)| u < *c).unwrap_or(row.last().unwrap()).0;
            out.push(y);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub config: CorpusConfig,
    pub chain: LabelChain,
    pub speakers: Vec<SpeakerSpec>,
    pub utterances: Vec<Utterance>,
    /// Identity-channel utterances used to train the FP32 base model.
    pub base: Vec<Utterance>,
}

/// Train/dev/test sizes for `n` utterances: ⌊2n/5⌋, ⌊n/5⌋, remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = 2 * n / 5;
    let dev = n / 5;
    (train, dev, n - train - dev)
}

fn random_derangement_subset(vocab: usize, count: usize, rng: &mut SeededRng) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..vocab as u32).collect();
    if count < 2 {
        return perm;
    }
    let mut pool: Vec<u32> = (0..vocab as u32).collect();
    rng.shuffle(&mut pool);
    let chosen = &pool[..count];
    // cyclic shift over the chosen tokens: no fixed points among them
    for (i, &t) in chosen.iter().enumerate() {
        perm[t as usize] = chosen[(i + 1) % count];
    }
    perm
}

const MAX_SPEAKER_ATTEMPTS: usize = 64;

pub fn generate_corpus(config: &CorpusConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let master = SeededRng::new(config.seed);
    let v = config.vocab_size;
    let chain = LabelChain::new(v, config.branching, &mut master.fork(0));
    let mut group_rng = master.fork(1);
    let groups: Vec<Vec<u32>> = (0..config.accent_groups)
        .map(|_| random_derangement_subset(v, config.group_tokens, &mut group_rng))
        .collect();

    let mut speakers: Vec<SpeakerSpec> = Vec::with_capacity(config.n_speakers);
    let mut seen_perms: HashSet<Vec<u32>> = HashSet::new();
    for id in 0..config.n_speakers as u32 {
        let seed = master.fork(1000 + id as u64).next_u64();
        let mut rng = SeededRng::new(seed);
        let group = id as usize % config.accent_groups;
        let mut perm = None;
        for _ in 0..MAX_SPEAKER_ATTEMPTS {
            let mut p = groups[group].clone();
            for _ in 0..config.speaker_swaps {
                let (a, b) = (rng.below(v), rng.below(v));
                p.swap(a, b);
            }
            if seen_perms.insert(p.clone()) {
                perm = Some(p);
                break;
            }
        }
        let permutation = perm.ok_or_else(|| Error::Config {
            field: "vocab_size".into(),
            reason: format!("{v} tokens cannot give {} speakers distinct channels", config.n_speakers),
        })?;
        let bias = (0..v).map(|_| rng.normal() * config.bias_std).collect();
        speakers.push(SpeakerSpec {
            speaker_id: id,
            seed,
            group,
            permutation,
            noise: config.noise,
            bias,
        });
    }
    for i in 0..speakers.len() {
        for j in i + 1..speakers.len() {
            let tv = kernel_tv_distance(&speakers[i], &speakers[j]);
            if tv < config.tv_floor {
                return Err(Error::Config {
                    field: "vocab_size".into(),
                    reason: format!(
                        "too small for the distortion floor: speakers {i} and {j} differ by TV {tv:.4} < {}",
                        config.tv_floor
                    ),
                });
            }
        }
    }

    // labels are unique across the whole corpus so no sequence can straddle splits
    let mut used: HashSet<Vec<u32>> = HashSet::new();
    let (n_train, n_dev, _) = split_sizes(config.utterances_per_speaker);
    let mut utterances = Vec::with_capacity(config.n_speakers * config.utterances_per_speaker);
    for spk in &speakers {
        let mut rng = SeededRng::new(spk.seed).fork(7);
        let cdf = cumulative(&spk.noise_distribution());
        for u in 0..config.utterances_per_speaker {
            let labels = fresh_labels(&chain, config.seq_len, &mut used, &mut rng)?;
            let tokens = labels.iter().map(|&y| spk.emit(y, &cdf, &mut rng)).collect();
            let split = if u < n_train {
                Split::Train
            } else if u < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
            utterances.push(Utterance {
                speaker: spk.speaker_id,
                split,
                tokens,
                labels,
            });
        }
    }

    let canonical = SpeakerSpec {
        speaker_id: u32::MAX,
        seed: 0,
        group: usize::MAX,
        permutation: (0..v as u32).collect(),
        noise: config.noise,
        bias: vec![0.0; v],
    };
    let mut rng = master.fork(2);
    let cdf = cumulative(&canonical.noise_distribution());
    let mut base = Vec::with_capacity(config.base_utterances);
    let (b_train, b_dev, _) = split_sizes(config.base_utterances);
    for u in 0..config.base_utterances {
        let labels = fresh_labels(&chain, config.seq_len, &mut used, &mut rng)?;
        let tokens = labels.iter().map(|&y| canonical.emit(y, &cdf, &mut rng)).collect();
        let split = if u < b_train {
            Split::Train
        } else if u < b_train + b_dev {
            Split::Dev
        } else {
            Split::Test
        };
        base.push(Utterance {
            speaker: u32::MAX,
            split,
            tokens,
            labels,
        });
    }

    Ok(SyntheticCorpus {
        config: config.clone(),
        chain,
        speakers,
        utterances,
        base,
    })
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

fn fresh_labels(chain: &LabelChain, len: usize, used: &mut HashSet<Vec<u32>>, rng: &mut SeededRng) -> Result<Vec<u32>> {
    for _ in 0..1000 {
        let s = chain.sample(len, rng);
        if used.insert(s.clone()) {
            return Ok(s);
        }
    }
    Err(Error::Config {
        field: "seq_len".into(),
        reason: "label chain cannot produce enough distinct sequences".into(),
    })
}

impl SyntheticCorpus {
    pub fn speaker_ids(&self) -> Vec<u32> {
        self.speakers.iter().map(|s| s.speaker_id).collect()
    }

    pub fn select(&self, speakers: &[u32], split: Split) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.split == split && speakers.contains(&u.speaker))
            .collect()
    }

    pub fn base_split(&self, split: Split) -> Vec<&Utterance> {
        self.base.iter().filter(|u| u.split == split).collect()
    }

    /// Utterance counts per speaker and split.
    pub fn split_counts(&self) -> BTreeMap<u32, BTreeMap<Split, usize>> {
        let mut out: BTreeMap<u32, BTreeMap<Split, usize>> = BTreeMap::new();
        for u in &self.utterances {
            *out.entry(u.speaker).or_default().entry(u.split).or_insert(0) += 1;
        }
        out
    }

    /// The last `n_adapt` speakers are adaptation targets, the rest
    /// pretraining speakers.
    pub fn partition(&self, n_adapt: usize) -> Result<SpeakerPartition> {
        let ids = self.speaker_ids();
        if n_adapt == 0 || n_adapt >= ids.len() {
            return Err(Error::Config {
                field: "adapt_speakers".into(),
                reason: format!("need between 1 and {} adaptation speakers, got {n_adapt}", ids.len() - 1),
            });
        }
        let cut = ids.len() - n_adapt;
        SpeakerPartition::new(ids[..cut].to_vec(), ids[cut..].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerPartition {
    pub pretrain: Vec<u32>,
    pub adapt: Vec<u32>,
}

impl SpeakerPartition {
    /// Rejects any speaker present in both sets.
    pub fn new(pretrain: Vec<u32>, adapt: Vec<u32>) -> Result<Self> {
        check_disjoint(&pretrain, &adapt)?;
        Ok(Self { pretrain, adapt })
    }
}

pub fn check_disjoint(pretrain: &[u32], adapt: &[u32]) -> Result<()> {
    let p: HashSet<u32> = pretrain.iter().copied().collect();
    let mut overlap: Vec<u32> = adapt.iter().copied().filter(|s| p.contains(s)).collect();
    overlap.sort_unstable();
    overlap.dedup();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::SpeakerOverlap(overlap))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            n_speakers: 6,
            utterances_per_speaker: 12,
            base_utterances: 20,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_corpus(&small()).unwrap(), generate_corpus(&small()).unwrap());
        let other = generate_corpus(&CorpusConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(other.utterances, generate_corpus(&small()).unwrap().utterances);
    }

    #[test]
    fn split_ratio() {
        assert_eq!(split_sizes(60), (24, 12, 24));
        assert_eq!(split_sizes(12), (4, 2, 6));
        assert_eq!(split_sizes(7), (2, 1, 4));
        let c = generate_corpus(&small()).unwrap();
        for counts in c.split_counts().values() {
            assert_eq!(counts[&Split::Train], 4);
            assert_eq!(counts[&Split::Dev], 2);
            assert_eq!(counts[&Split::Test], 6);
        }
    }

    #[test]
    fn no_sequence_in_two_splits() {
        let c = generate_corpus(&small()).unwrap();
        let mut seen = HashSet::new();
        for u in c.utterances.iter().chain(&c.base) {
            assert!(seen.insert(u.labels.clone()));
        }
    }

    #[test]
    fn kernels_are_distributions_and_distinct() {
        let c = generate_corpus(&small()).unwrap();
        for s in &c.speakers {
            for y in 0..32 {
                let row = s.kernel_row(y);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        for a in &c.speakers {
            for b in &c.speakers {
                if a.speaker_id != b.speaker_id {
                    assert!(kernel_tv_distance(a, b) >= c.config.tv_floor);
                }
            }
        }
    }

    #[test]
    fn empirical_channel_matches_kernel() {
        let cfg = CorpusConfig {
            n_speakers: 2,
            utterances_per_speaker: 400,
            ..small()
        };
        let c = generate_corpus(&cfg).unwrap();
        let s = &c.speakers[0];
        let (mut hits, mut total) = (0usize, 0usize);
        for u in c.utterances.iter().filter(|u| u.speaker == 0) {
            for (&x, &y) in u.tokens.iter().zip(&u.labels) {
                total += 1;
                hits += (x == s.permutation[y as usize]) as usize;
            }
        }
        let expected: f64 = 1.0 - cfg.noise as f64 + cfg.noise as f64 / 32.0;
        let rate = hits as f64 / total as f64;
        // noise mass on the permuted token varies with the bias; allow that spread
        assert!((rate - expected).abs() < 0.04, "{rate} vs {expected}");
    }

    #[test]
    fn tiny_vocabulary_rejected() {
        let cfg = CorpusConfig {
            vocab_size: 4,
            group_tokens: 2,
            branching: 2,
            n_speakers: 40,
            ..small()
        };
        assert!(matches!(generate_corpus(&cfg), Err(Error::Config { field, .. }) if field == "vocab_size"));
    }

    #[test]
    fn overlap_is_an_error() {
        assert!(check_disjoint(&[1, 2, 3], &[4, 5]).is_ok());
        match SpeakerPartition::new(vec![1, 2, 3], vec![3, 4, 2]) {
            Err(Error::SpeakerOverlap(v)) => assert_eq!(v, vec![2, 3]),
            other => panic!("{other:?}"),
        }
        let c = generate_corpus(&small()).unwrap();
        let p = c.partition(2).unwrap();
        assert_eq!(p.adapt, vec![4, 5]);
        assert!(c.partition(6).is_err());
    }
}
