//! Knowledge-guided hard-negative batch planning.
//!
//! Each epoch is planned from a snapshot of the embedding memory, which holds
//! the fused embedding `(z_v + z_t) / 2` written the last time each sample went
//! through the encoder:
//!
//! 1. With an empty memory (first epoch) the corpus is dealt into random
//!    batches.
//! 2. Otherwise `L` anchors are drawn without replacement, weighted towards
//!    samples whose structural knowledge touches the desired concepts. Each
//!    anchor's `knn_k` nearest memory entries are retrieved and `N` of them are
//!    picked uniformly to form a hard batch.
//! 3. Samples no hard batch visited are dealt into random backfill batches, so
//!    every embedding is refreshed before the next plan is built.
//! 4. Hard and backfill batches are shuffled together.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use ndarray::ArrayView1;
use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, SampleId};
use crate::error::{ensure, Error, Result};
use crate::knowledge::{build_structural_knowledge, refreshed_knowledge, KnowledgeVocab, PseudoLabelVector};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMemory {
    entries: BTreeMap<SampleId, Vec<f64>>,
    epoch_stamp: BTreeMap<SampleId, usize>,
}

impl EmbeddingMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, id: SampleId) -> Option<&[f64]> {
        self.entries.get(&id).map(Vec::as_slice)
    }

    pub fn epoch_stamp(&self, id: SampleId) -> Option<usize> {
        self.epoch_stamp.get(&id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.entries.keys().copied()
    }

    /// Stores `(z_v + z_t) / 2` for `id`, replacing any earlier entry.
    pub fn update(
        &mut self,
        id: SampleId,
        z_v: ArrayView1<f64>,
        z_t: ArrayView1<f64>,
        epoch: usize,
    ) -> Result<()> {
        ensure!(
            z_v.len() == z_t.len(),
            Validation,
            "sample {id}: video and text embeddings differ in length"
        );
        if let Some(existing) = self.entries.values().next() {
            ensure!(
                existing.len() == z_v.len(),
                Validation,
                "sample {id}: embedding length {} differs from memory width {}",
                z_v.len(),
                existing.len()
            );
        }
        let fused = z_v.iter().zip(z_t).map(|(v, t)| (v + t) / 2.0).collect();
        self.entries.insert(id, fused);
        self.epoch_stamp.insert(id, epoch);
        Ok(())
    }

    /// Exact k nearest entries by Euclidean distance, ascending, ties broken
    /// by ascending sample id. Returns every entry when fewer than `k` exist.
    pub fn knn_search(&self, query: &[f64], k: usize) -> Result<Vec<(SampleId, f64)>> {
        if self.is_empty() {
            return Err(Error::State("nearest-neighbor search on an empty memory".into()));
        }
        ensure!(k >= 1, Validation, "k must be >= 1");
        let mut scored: Vec<(SampleId, f64)> = self
            .entries
            .iter()
            .map(|(&id, v)| (id, euclidean(query, v)))
            .collect();
        let order = |a: &(SampleId, f64), b: &(SampleId, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub batch_size: usize,
    /// Hard batches per epoch. Defaults to half the epoch.
    pub num_hard_batches: Option<usize>,
    /// Neighbors retrieved per anchor. Defaults to twice the batch size.
    pub knn_k: Option<usize>,
    pub action_weight: f64,
    pub base_weight: f64,
    pub desired_concepts: Vec<String>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            num_hard_batches: None,
            knn_k: None,
            action_weight: 2.0,
            base_weight: 1.0,
            desired_concepts: Vec::new(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 2, Config, "batch_size must be >= 2");
        ensure!(
            self.knn_k() >= self.batch_size,
            Config,
            "knn_k ({}) must be >= batch_size ({})",
            self.knn_k(),
            self.batch_size
        );
        ensure!(
            self.base_weight > 0.0 && self.action_weight >= self.base_weight,
            Config,
            "anchor weights must satisfy action_weight >= base_weight > 0"
        );
        Ok(())
    }

    pub fn knn_k(&self) -> usize {
        self.knn_k.unwrap_or(2 * self.batch_size)
    }

    pub fn hard_batches_for(&self, corpus_len: usize) -> usize {
        self.num_hard_batches
            .unwrap_or(corpus_len / (2 * self.batch_size))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Hard,
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub kind: BatchKind,
    pub sample_ids: Vec<SampleId>,
    pub anchor_id: Option<SampleId>,
}

impl Batch {
    /// Mean Euclidean distance between the members' memory entries. `None`
    /// when fewer than two members have an entry.
    pub fn mean_pairwise_distance(&self, memory: &EmbeddingMemory) -> Option<f64> {
        let vecs: Vec<&[f64]> = self.sample_ids.iter().filter_map(|&id| memory.get(id)).collect();
        if vecs.len() < 2 {
            return None;
        }
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                total += euclidean(vecs[i], vecs[j]);
                pairs += 1;
            }
        }
        Some(total / pairs as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub epoch: usize,
    pub batches: Vec<Batch>,
}

impl BatchPlan {
    pub fn hard_batches(&self) -> impl Iterator<Item = &Batch> {
        self.batches.iter().filter(|b| b.kind == BatchKind::Hard)
    }
}

/// Anchor weight per corpus sample: `action_weight` when the sample's
/// structural knowledge (extended by its refreshed label bits) meets the
/// desired concepts, `base_weight` otherwise.
pub fn anchor_weights(
    corpus: &[Sample],
    labels: &[PseudoLabelVector],
    vocab: &KnowledgeVocab,
    config: &SamplerConfig,
) -> Result<Vec<f64>> {
    if config.desired_concepts.is_empty() {
        return Ok(vec![config.base_weight; corpus.len()]);
    }
    let desired: HashSet<&str> = config.desired_concepts.iter().map(String::as_str).collect();
    let by_id: HashMap<SampleId, &PseudoLabelVector> = labels.iter().map(|l| (l.sample_id, l)).collect();
    corpus
        .iter()
        .map(|s| {
            let knowledge = match by_id.get(&s.id) {
                Some(label) if label.bits.len() == vocab.len() => refreshed_knowledge(s, label, vocab)?,
                _ => build_structural_knowledge(s)?,
            };
            let hit = knowledge.iter().any(|c| desired.contains(c.key.as_str()));
            Ok(if hit { config.action_weight } else { config.base_weight })
        })
        .collect()
}

/// Draws `config.num_hard_batches` anchors (weighted, without replacement).
pub fn sample_anchors(
    corpus: &[Sample],
    labels: &[PseudoLabelVector],
    vocab: &KnowledgeVocab,
    config: &SamplerConfig,
) -> Result<Vec<SampleId>> {
    let l = config.hard_batches_for(corpus.len());
    let mut rng = stream_rng(config.seed, Stream::Anchors, 0);
    draw_anchors(corpus, labels, vocab, config, l, &mut rng)
}

fn draw_anchors(
    corpus: &[Sample],
    labels: &[PseudoLabelVector],
    vocab: &KnowledgeVocab,
    config: &SamplerConfig,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SampleId>> {
    ensure!(
        count <= corpus.len(),
        Validation,
        "cannot draw {count} anchors from a corpus of {}",
        corpus.len()
    );
    let weights = anchor_weights(corpus, labels, vocab, config)?;
    let picked = index::sample_weighted(rng, corpus.len(), |i| weights[i], count)
        .map_err(|e| Error::Validation(format!("anchor sampling failed: {e}")))?;
    Ok(picked.into_iter().map(|i| corpus[i].id).collect())
}

/// One hard batch per anchor: `batch_size` ids drawn uniformly from the
/// anchor's `knn_k` nearest memory entries.
pub fn assemble_hard_batches(
    memory: &EmbeddingMemory,
    anchors: &[SampleId],
    config: &SamplerConfig,
) -> Result<Vec<Batch>> {
    let mut rng = stream_rng(config.seed, Stream::Batches, 0);
    assemble_with(memory, anchors, config, &mut rng)
}

fn assemble_with(
    memory: &EmbeddingMemory,
    anchors: &[SampleId],
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Batch>> {
    let n = config.batch_size;
    if memory.len() < n {
        return Err(Error::State(format!(
            "memory holds {} entries, fewer than the batch size {n}",
            memory.len()
        )));
    }
    anchors
        .iter()
        .map(|&anchor| {
            let query = memory
                .get(anchor)
                .ok_or_else(|| Error::State(format!("anchor {anchor} has no memory entry")))?;
            let neighbors = memory.knn_search(query, config.knn_k())?;
            let sample_ids = index::sample(rng, neighbors.len(), n)
                .into_iter()
                .map(|i| neighbors[i].0)
                .collect();
            Ok(Batch {
                kind: BatchKind::Hard,
                sample_ids,
                anchor_id: Some(anchor),
            })
        })
        .collect()
}

/// Deals `pending` into random batches of `n`. A short final batch is padded
/// with distinct ids drawn uniformly from `covered` outside that batch.
fn random_batches(
    mut pending: Vec<SampleId>,
    covered: &[SampleId],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Batch> {
    pending.shuffle(rng);
    pending
        .chunks(n)
        .map(|chunk| {
            let mut sample_ids = chunk.to_vec();
            if sample_ids.len() < n {
                let inside: HashSet<SampleId> = sample_ids.iter().copied().collect();
                let pool: Vec<SampleId> = covered.iter().copied().filter(|id| !inside.contains(id)).collect();
                let fill = n - sample_ids.len();
                sample_ids.extend(index::sample(rng, pool.len(), fill).into_iter().map(|i| pool[i]));
            }
            Batch {
                kind: BatchKind::Random,
                sample_ids,
                anchor_id: None,
            }
        })
        .collect()
}

/// Plans one epoch. A pure function of its arguments.
pub fn build_epoch_plan(
    corpus: &[Sample],
    memory: &EmbeddingMemory,
    labels: &[PseudoLabelVector],
    vocab: &KnowledgeVocab,
    config: &SamplerConfig,
    epoch: usize,
) -> Result<BatchPlan> {
    config.validate()?;
    let n = config.batch_size;
    ensure!(
        corpus.len() >= n,
        Validation,
        "corpus of {} samples cannot fill a batch of {n}",
        corpus.len()
    );
    let ids: Vec<SampleId> = corpus.iter().map(|s| s.id).collect();
    let mut batch_rng = stream_rng(config.seed, Stream::Batches, epoch as u64);

    if memory.is_empty() {
        return Ok(BatchPlan {
            epoch,
            batches: random_batches(ids.clone(), &ids, n, &mut batch_rng),
        });
    }

    let mut anchor_rng = stream_rng(config.seed, Stream::Anchors, epoch as u64);
    let l = config.hard_batches_for(corpus.len());
    let anchors = draw_anchors(corpus, labels, vocab, config, l, &mut anchor_rng)?;
    let mut batches = assemble_with(memory, &anchors, config, &mut batch_rng)?;

    let visited: BTreeSet<SampleId> = batches.iter().flat_map(|b| b.sample_ids.iter().copied()).collect();
    let pending: Vec<SampleId> = ids.iter().copied().filter(|id| !visited.contains(id)).collect();
    // Padding reuses ids the hard batches already cover; without hard batches
    // any id outside the short batch is covered by another one.
    let covered: Vec<SampleId> = if visited.is_empty() { ids.clone() } else { visited.into_iter().collect() };
    batches.extend(random_batches(pending, &covered, n, &mut batch_rng));

    let mut shuffle_rng = stream_rng(config.seed, Stream::Shuffle, epoch as u64);
    batches.shuffle(&mut shuffle_rng);
    Ok(BatchPlan { epoch, batches })
}
