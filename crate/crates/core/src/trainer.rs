//! The training loop: plan an epoch, run every batch through the encoder,
//! update the embedding memory, step the parameters, and at epoch end refresh
//! guidance labels from the concept head and evaluate.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_holdout, validate_corpus, Sample};
use crate::encoder::{EncoderDims, EncoderParams, Gradients, TowerCache};
use crate::error::{ensure, Result};
use crate::knowledge::{build_vocab, label_vectors, refresh_pseudo_labels, KnowledgeVocab, PseudoLabelVector, StructuralConcept};
use crate::losses::{kcl_triplet_loss, sigmoid_probs, skp_loss, LossConfig, LossReport};
use crate::metrics::{retrieval_eval, space_report, Direction, RetrievalReport, SpaceReport};
use crate::runlog::{EvalRow, RunLog, StepRow};
use crate::sampler::{build_epoch_plan, Batch, BatchPlan, EmbeddingMemory, SamplerConfig};
use crate::rng::{stream_rng, Stream};

/// Which regularizers a run enables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Random batches, triplet loss only.
    Base,
    /// Random batches, triplet loss plus concept prediction.
    SkpOnly,
    /// Hard-negative batches with uniform anchors, triplet loss only.
    KclOnly,
    /// Hard-negative batches with knowledge-weighted anchors, both losses and
    /// label refresh.
    #[default]
    Full,
}

impl Mode {
    pub fn uses_skp(self) -> bool {
        matches!(self, Mode::SkpOnly | Mode::Full)
    }

    pub fn uses_hard_batches(self) -> bool {
        matches!(self, Mode::KclOnly | Mode::Full)
    }

    pub fn uses_guidance(self) -> bool {
        self == Mode::Full
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    /// First epoch (0-based) after which guidance labels are refreshed from
    /// the concept head. `None` disables refreshing.
    pub refresh_start_epoch: Option<usize>,
    pub refresh_threshold: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub mode: Mode,
    pub hidden: usize,
    pub skp_hidden: usize,
    /// Concept vocabulary size K.
    pub vocab_size: usize,
    pub holdout_fraction: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            refresh_start_epoch: Some(10),
            refresh_threshold: 0.5,
            eval_every: 5,
            seed: 0,
            mode: Mode::Full,
            hidden: 64,
            skp_hidden: 32,
            vocab_size: 512,
            holdout_fraction: 0.1,
            alpha: 2.0,
            beta: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Config, "epochs must be >= 1");
        ensure!(self.eval_every >= 1, Config, "eval_every must be >= 1");
        ensure!(self.lr.is_finite() && self.lr >= 0.0, Config, "lr must be finite and >= 0");
        ensure!(
            self.refresh_threshold > 0.0 && self.refresh_threshold < 1.0,
            Config,
            "refresh_threshold must lie in (0, 1)"
        );
        ensure!(self.hidden >= 1 && self.skp_hidden >= 1, Config, "hidden sizes must be >= 1");
        ensure!(self.vocab_size >= 1, Config, "vocab_size must be >= 1");
        ensure!(
            (0.0..1.0).contains(&self.holdout_fraction),
            Config,
            "holdout_fraction must lie in [0, 1)"
        );
        ensure!(self.alpha > 0.0 && self.beta > 0.0, Config, "alpha and beta must be positive");
        self.loss.validate()?;
        self.sampler.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub t2v: RetrievalReport,
    pub v2t: RetrievalReport,
    pub space: SpaceReport,
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: EncoderParams,
    pub vocab: KnowledgeVocab,
    pub memory: EmbeddingMemory,
    /// Guidance labels after the last refresh.
    pub labels: Vec<PseudoLabelVector>,
    pub log: RunLog,
}

/// Encoder dimensions implied by a corpus and a configuration.
pub fn encoder_dims(corpus: &[Sample], config: &TrainConfig, vocab: &KnowledgeVocab) -> EncoderDims {
    EncoderDims {
        feat_dim: corpus.first().map_or(0, |s| s.video_feat.len()),
        hidden: config.hidden,
        vocab_tokens: corpus
            .iter()
            .flat_map(|s| s.caption.iter())
            .max()
            .map_or(1, |&t| t as usize + 1),
        skp_hidden: config.skp_hidden,
        num_concepts: vocab.len(),
    }
}

/// Subject-predicate keys of the vocabulary: the action concepts that
/// knowledge-guided anchor sampling emphasizes unless configured otherwise.
pub fn action_concepts(vocab: &KnowledgeVocab) -> Vec<String> {
    vocab
        .concepts()
        .iter()
        .filter(|k| StructuralConcept::is_subject_predicate_key(k))
        .cloned()
        .collect()
}

/// Encodes every sample; rows follow `samples` order.
pub fn encode_all(params: &EncoderParams, samples: &[Sample]) -> Result<(Array2<f64>, Array2<f64>)> {
    let h = params.dims.hidden;
    let mut z_v = Array2::zeros((samples.len(), h));
    let mut z_t = Array2::zeros((samples.len(), h));
    for (i, s) in samples.iter().enumerate() {
        z_v.row_mut(i).assign(&params.encode_video(&s.video_feat)?.0);
        z_t.row_mut(i).assign(&params.encode_text(&s.caption)?.0);
    }
    Ok((z_v, z_t))
}

/// Retrieval in both directions plus alignment and uniformity. Reads the
/// parameters only.
pub fn evaluate(samples: &[Sample], params: &EncoderParams, alpha: f64, beta: f64) -> Result<EvalReport> {
    ensure!(!samples.is_empty(), Validation, "evaluation split is empty");
    let (z_v, z_t) = encode_all(params, samples)?;
    Ok(EvalReport {
        t2v: retrieval_eval(z_t.view(), z_v.view(), Direction::T2v)?,
        v2t: retrieval_eval(z_t.view(), z_v.view(), Direction::V2t)?,
        space: space_report(z_t.view(), z_v.view(), alpha, beta)?,
    })
}

/// Fills a memory snapshot with the current encoder's view of `samples`.
pub fn memory_snapshot(params: &EncoderParams, samples: &[Sample], epoch: usize) -> Result<EmbeddingMemory> {
    let (z_v, z_t) = encode_all(params, samples)?;
    let mut memory = EmbeddingMemory::new();
    for (i, s) in samples.iter().enumerate() {
        memory.update(s.id, z_v.row(i), z_t.row(i), epoch)?;
    }
    Ok(memory)
}

struct Forward {
    z_v: Array1<f64>,
    z_t: Array1<f64>,
    video: TowerCache,
    text: TowerCache,
}

/// Trains on the non-held-out part of `corpus` and evaluates on the held-out
/// tail (or on the training split when `holdout_fraction` is 0).
pub fn train(corpus: &[Sample], config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    ensure!(!corpus.is_empty(), Validation, "corpus is empty");
    validate_corpus(corpus)?;
    let (train_set, heldout) = split_holdout(corpus, config.holdout_fraction)?;
    let eval_set = if heldout.is_empty() { &train_set } else { &heldout };
    ensure!(
        eval_set.len() >= 2,
        Validation,
        "evaluation split needs at least 2 samples, has {}",
        eval_set.len()
    );
    ensure!(
        train_set.len() >= config.sampler.batch_size,
        Validation,
        "training split of {} samples cannot fill a batch of {}",
        train_set.len(),
        config.sampler.batch_size
    );

    let vocab = build_vocab(&train_set, config.vocab_size)?;
    let skp_targets = label_vectors(&train_set, &vocab)?;
    let dims = encoder_dims(corpus, config, &vocab);
    let mut params = EncoderParams::init(dims, config.seed)?;
    set_head_prior(&mut params, &skp_targets);

    let mut sampler = SamplerConfig {
        seed: config.seed,
        ..config.sampler.clone()
    };
    if !config.mode.uses_guidance() {
        sampler.desired_concepts.clear();
    } else if sampler.desired_concepts.is_empty() {
        sampler.desired_concepts = action_concepts(&vocab);
    }

    let target_rows: HashMap<u64, Array1<f64>> = skp_targets
        .iter()
        .map(|l| (l.sample_id, l.bits.iter().map(|&b| f64::from(u8::from(b))).collect()))
        .collect();
    let by_id: HashMap<u64, &Sample> = train_set.iter().map(|s| (s.id, s)).collect();

    let mut guidance = skp_targets.clone();
    let mut memory = EmbeddingMemory::new();
    let mut log = RunLog {
        config_snapshot: serde_json::to_string(config)?,
        ..Default::default()
    };
    let mut step = 0;

    for epoch in 0..config.epochs {
        let plan = if config.mode.uses_hard_batches() {
            build_epoch_plan(&train_set, &memory, &guidance, &vocab, &sampler, epoch)?
        } else {
            build_epoch_plan(&train_set, &EmbeddingMemory::new(), &guidance, &vocab, &sampler, epoch)?
        };
        let mut task_rng = stream_rng(config.seed, Stream::TaskSwitch, epoch as u64);

        for batch in &plan.batches {
            let (use_skp, use_kcl) = pick_tasks(config, &mut task_rng);
            let report = train_step(
                &mut params,
                &mut memory,
                batch,
                &by_id,
                &target_rows,
                config,
                epoch,
                use_skp,
                use_kcl,
            )?;
            log.steps.push(StepRow {
                epoch,
                step,
                kind: batch.kind,
                report,
            });
            step += 1;
        }

        if config.mode.uses_guidance() && config.refresh_start_epoch.is_some_and(|s| epoch >= s) {
            guidance = refresh_guidance(&params, &train_set, &vocab, config.refresh_threshold, &guidance)?;
        }

        if (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs {
            let r = evaluate(eval_set, &params, config.alpha, config.beta)?;
            log.evals.push(EvalRow {
                epoch,
                t2v: r.t2v,
                v2t: r.v2t,
                space: r.space,
            });
        }
    }

    Ok(TrainedModel {
        params,
        vocab,
        memory,
        labels: guidance,
        log,
    })
}

/// Starts each concept logit at its training-set log-odds so the head does not
/// spend its first epochs (and the video tower's geometry) learning that most
/// labels are absent.
fn set_head_prior(params: &mut EncoderParams, labels: &[PseudoLabelVector]) {
    if labels.is_empty() {
        return;
    }
    let n = labels.len() as f64;
    for (k, b) in params.b_skp2.iter_mut().enumerate() {
        let p = labels.iter().filter(|l| l.bits[k]).count() as f64 / n;
        let p = p.clamp(1e-4, 1.0 - 1e-4);
        *b = (p / (1.0 - p)).ln();
    }
}

fn pick_tasks(config: &TrainConfig, rng: &mut impl Rng) -> (bool, bool) {
    let skp = config.mode.uses_skp();
    if skp && config.loss.random_task_switch {
        let pick_skp = rng.random_bool(0.5);
        (pick_skp, !pick_skp)
    } else {
        (skp, true)
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut EncoderParams,
    memory: &mut EmbeddingMemory,
    batch: &Batch,
    by_id: &HashMap<u64, &Sample>,
    targets: &HashMap<u64, Array1<f64>>,
    config: &TrainConfig,
    epoch: usize,
    use_skp: bool,
    use_kcl: bool,
) -> Result<LossReport> {
    let n = batch.sample_ids.len();
    let h = params.dims.hidden;
    let forwards = batch
        .sample_ids
        .iter()
        .map(|id| {
            let s = by_id[id];
            let (z_v, video) = params.encode_video(&s.video_feat)?;
            let (z_t, text) = params.encode_text(&s.caption)?;
            Ok(Forward { z_v, z_t, video, text })
        })
        .collect::<Result<Vec<_>>>()?;
    for (id, f) in batch.sample_ids.iter().zip(&forwards) {
        memory.update(*id, f.z_v.view(), f.z_t.view(), epoch)?;
    }

    let mut z_v = Array2::zeros((n, h));
    let mut z_t = Array2::zeros((n, h));
    for (i, f) in forwards.iter().enumerate() {
        z_v.row_mut(i).assign(&f.z_v);
        z_t.row_mut(i).assign(&f.z_t);
    }
    let mut g_zv = Array2::<f64>::zeros((n, h));
    let mut g_zt = Array2::<f64>::zeros((n, h));
    let mut grads = Gradients::zeros(params.dims);
    let mut report = LossReport::default();

    if use_kcl {
        let out = kcl_triplet_loss(z_v.view(), z_t.view(), config.loss.margin_delta)?;
        report.kcl_loss = out.loss;
        report.t2v_terms = out.t2v_terms;
        report.v2t_terms = out.v2t_terms;
        g_zv.scaled_add(config.loss.kcl_weight, &out.grad_zv);
        g_zt.scaled_add(config.loss.kcl_weight, &out.grad_zt);
    }

    if use_skp && params.dims.num_concepts > 0 {
        let k = params.dims.num_concepts;
        let mut logits = Array2::zeros((n, k));
        let mut labels = Array2::zeros((n, k));
        let mut caches = Vec::with_capacity(n);
        for (i, (id, f)) in batch.sample_ids.iter().zip(&forwards).enumerate() {
            let (l, cache) = params.skp_head(f.z_v.view())?;
            logits.row_mut(i).assign(&l.logits);
            labels.row_mut(i).assign(&targets[id]);
            caches.push(cache);
        }
        let (loss, g_logits) = skp_loss(logits.view(), labels.view())?;
        report.skp_loss = loss;
        let g_logits = g_logits * config.loss.skp_weight;
        for (i, cache) in caches.iter().enumerate() {
            let g = params.skp_backward(cache, g_logits.row(i), &mut grads);
            g_zv.row_mut(i).scaled_add(1.0, &g);
        }
    }

    for (i, f) in forwards.iter().enumerate() {
        params.video_backward(&f.video, g_zv.row(i), &mut grads);
        params.text_backward(&f.text, g_zt.row(i), &mut grads);
    }
    params.apply_gradients(&grads, config.lr)?;
    Ok(report)
}

fn refresh_guidance(
    params: &EncoderParams,
    samples: &[Sample],
    vocab: &KnowledgeVocab,
    threshold: f64,
    labels: &[PseudoLabelVector],
) -> Result<Vec<PseudoLabelVector>> {
    let mut probs = HashMap::with_capacity(samples.len());
    for s in samples {
        let (z_v, _) = params.encode_video(&s.video_feat)?;
        let (logits, _) = params.skp_head(z_v.view())?;
        probs.insert(s.id, sigmoid_probs(&logits.logits).to_vec());
    }
    refresh_pseudo_labels(&probs, vocab, threshold, labels)
}

/// Epoch plan a trained model would use for `epoch`, with memory rebuilt from
/// the current parameters (empty for epoch 0).
pub fn plan_for_inspection(
    samples: &[Sample],
    params: &EncoderParams,
    vocab: &KnowledgeVocab,
    config: &TrainConfig,
    epoch: usize,
) -> Result<(BatchPlan, EmbeddingMemory)> {
    config.validate()?;
    let labels = label_vectors(samples, vocab)?;
    let snapshot = memory_snapshot(params, samples, epoch)?;
    let mut sampler = SamplerConfig {
        seed: config.seed,
        ..config.sampler.clone()
    };
    if !config.mode.uses_guidance() {
        sampler.desired_concepts.clear();
    } else if sampler.desired_concepts.is_empty() {
        sampler.desired_concepts = action_concepts(vocab);
    }
    let planning_memory = if epoch == 0 || !config.mode.uses_hard_batches() {
        EmbeddingMemory::new()
    } else {
        snapshot.clone()
    };
    let plan = build_epoch_plan(samples, &planning_memory, &labels, vocab, &sampler, epoch)?;
    Ok((plan, snapshot))
}
