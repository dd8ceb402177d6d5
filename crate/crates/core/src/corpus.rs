//! Paired video/caption corpora: synthetic generation with known latent
//! topics, and JSONL interchange.
//!
//! The synthetic generator plants structure that the rest of the engine can be
//! checked against. Every sample belongs to one latent topic; its video feature
//! is the topic centroid plus isotropic Gaussian noise. The caption and the
//! concept annotations are derived from the *same* noise draw: each topic owns
//! a pool of concepts, every concept has a fixed direction in feature space, and
//! a sample mentions the concepts whose directions best match its noise. Topic
//! membership is therefore recoverable from either modality, while telling two
//! samples of the same topic apart requires the fine-grained concept signal.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::{stream_rng, Stream};

pub type SampleId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Noun,
    Verb,
    VisualObject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptAnnotation {
    pub surface: String,
    pub kind: ConceptKind,
    /// Index (within the same sample) of the noun acting as subject. Verbs only.
    #[serde(default)]
    pub subject_link: Option<usize>,
}

impl ConceptAnnotation {
    pub fn noun(surface: impl Into<String>) -> Self {
        Self {
            surface: surface.into(),
            kind: ConceptKind::Noun,
            subject_link: None,
        }
    }

    pub fn verb(surface: impl Into<String>, subject_link: Option<usize>) -> Self {
        Self {
            surface: surface.into(),
            kind: ConceptKind::Verb,
            subject_link,
        }
    }

    pub fn visual_object(surface: impl Into<String>) -> Self {
        Self {
            surface: surface.into(),
            kind: ConceptKind::VisualObject,
            subject_link: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub video_feat: Vec<f64>,
    pub caption: Vec<u32>,
    #[serde(rename = "concepts")]
    pub concept_annotations: Vec<ConceptAnnotation>,
    /// Ground truth for synthetic corpora. Never read by training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_id: Option<u32>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.video_feat.iter().all(|v| v.is_finite()),
            Validation,
            "sample {}: non-finite video feature",
            self.id
        );
        ensure!(
            !self.caption.is_empty(),
            Validation,
            "sample {}: empty caption",
            self.id
        );
        for (i, c) in self.concept_annotations.iter().enumerate() {
            if let Some(link) = c.subject_link {
                ensure!(
                    c.kind == ConceptKind::Verb,
                    Validation,
                    "sample {}: annotation {i} ({}) has a subject link but is not a verb",
                    self.id,
                    c.surface
                );
                let target = self.concept_annotations.get(link);
                ensure!(
                    matches!(target, Some(t) if t.kind == ConceptKind::Noun),
                    Validation,
                    "sample {}: annotation {i} ({}) links to {link}, which is not a noun",
                    self.id,
                    c.surface
                );
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_samples: usize,
    pub num_topics: usize,
    pub feat_dim: usize,
    pub vocab_tokens: usize,
    pub noise_sigma: f64,
    pub action_topic_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            num_topics: 16,
            feat_dim: 64,
            vocab_tokens: 256,
            noise_sigma: 0.05,
            action_topic_fraction: 0.25,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_topics >= 1, Config, "num_topics must be >= 1");
        ensure!(
            self.num_samples >= self.num_topics,
            Config,
            "num_samples ({}) must be >= num_topics ({})",
            self.num_samples,
            self.num_topics
        );
        ensure!(self.feat_dim >= 2, Config, "feat_dim must be >= 2");
        ensure!(self.vocab_tokens >= 1, Config, "vocab_tokens must be >= 1");
        ensure!(
            self.noise_sigma.is_finite() && self.noise_sigma >= 0.0,
            Config,
            "noise_sigma must be finite and >= 0"
        );
        ensure!(
            (0.0..=1.0).contains(&self.action_topic_fraction),
            Config,
            "action_topic_fraction must lie in [0, 1]"
        );
        Ok(())
    }
}

/// Norm of a topic centroid in expectation.
const CENTROID_SCALE: f64 = 3.0;
const NOUNS_PER_TOPIC: usize = 6;
const VERBS_PER_TOPIC: usize = 6;
const OBJECTS_PER_TOPIC: usize = 8;

struct PoolConcept {
    surface: String,
    token: u32,
    direction: Vec<f64>,
}

struct Topic {
    centroid: Vec<f64>,
    token: u32,
    action: bool,
    nouns: Vec<PoolConcept>,
    verbs: Vec<PoolConcept>,
    objects: Vec<PoolConcept>,
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Indices of `pool` ordered by descending projection onto `noise`.
fn ranked(pool: &[PoolConcept], noise: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let scores: Vec<f64> = pool.iter().map(|c| dot(&c.direction, noise)).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn build_topics<R: Rng>(config: &CorpusConfig, rng: &mut R) -> Vec<Topic> {
    let dim = config.feat_dim;
    let n_action = (config.action_topic_fraction * config.num_topics as f64).round() as usize;
    let vocab = config.vocab_tokens as u64;
    let mut next_token = config.num_topics as u64;
    let mut pool = |rng: &mut R, topic: usize, label: &str, n: usize| -> Vec<PoolConcept> {
        (0..n)
            .map(|i| {
                let token = (next_token % vocab) as u32;
                next_token += 1;
                PoolConcept {
                    surface: format!("t{topic:02}/{label}{i}"),
                    token,
                    direction: unit_vec(rng, dim),
                }
            })
            .collect()
    };
    (0..config.num_topics)
        .map(|t| {
            let centroid = gaussian_vec(rng, dim, CENTROID_SCALE / (dim as f64).sqrt());
            let action = t < n_action;
            let nouns = pool(rng, t, "noun", NOUNS_PER_TOPIC);
            let verbs = if action {
                pool(rng, t, "verb", VERBS_PER_TOPIC)
            } else {
                Vec::new()
            };
            let objects = pool(rng, t, "obj", OBJECTS_PER_TOPIC);
            Topic {
                centroid,
                token: (t as u64 % vocab) as u32,
                action,
                nouns,
                verbs,
                objects,
            }
        })
        .collect()
}

/// Generates a synthetic corpus. A pure function of `config`.
///
/// Topics are assigned in balanced proportions (counts differ by at most one)
/// and then shuffled. The first `round(action_topic_fraction * num_topics)`
/// topics are action topics: their samples carry a subject noun, a verb linked
/// to that subject, and two visual objects. Other topics carry a noun and three
/// visual objects.
pub fn generate_synthetic(config: &CorpusConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, Stream::Corpus, 0);
    let topics = build_topics(config, &mut rng);

    let mut assignment: Vec<usize> = (0..config.num_samples)
        .map(|i| i % config.num_topics)
        .collect();
    assignment.shuffle(&mut rng);

    let samples = assignment
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let topic = &topics[t];
            let noise = gaussian_vec(&mut rng, config.feat_dim, 1.0);
            let video_feat: Vec<f64> = topic
                .centroid
                .iter()
                .zip(&noise)
                .map(|(c, e)| c + config.noise_sigma * e)
                .collect();

            let mut annotations = Vec::new();
            let mut caption = vec![topic.token];
            let noun = &topic.nouns[ranked(&topic.nouns, &noise)[0]];
            annotations.push(ConceptAnnotation::noun(&noun.surface));
            caption.push(noun.token);
            let n_objects = if topic.action {
                let verb = &topic.verbs[ranked(&topic.verbs, &noise)[0]];
                annotations.push(ConceptAnnotation::verb(&verb.surface, Some(0)));
                caption.push(verb.token);
                2
            } else {
                3
            };
            for &o in ranked(&topic.objects, &noise).iter().take(n_objects) {
                let obj = &topic.objects[o];
                annotations.push(ConceptAnnotation::visual_object(&obj.surface));
                caption.push(obj.token);
            }
            caption.shuffle(&mut rng);

            Sample {
                id: i as SampleId,
                video_feat,
                caption,
                concept_annotations: annotations,
                topic_id: Some(t as u32),
            }
        })
        .collect();
    Ok(samples)
}

/// Splits off the last `round(fraction * n)` samples (by ascending id) as a
/// held-out set. Generated corpora assign topics in shuffled order, so the
/// tail follows the same topic distribution as the head.
pub fn split_holdout(samples: &[Sample], fraction: f64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    ensure!(
        (0.0..1.0).contains(&fraction),
        Config,
        "holdout fraction must lie in [0, 1)"
    );
    let mut sorted = samples.to_vec();
    sorted.sort_by_key(|s| s.id);
    let n_hold = (fraction * sorted.len() as f64).round() as usize;
    let heldout = sorted.split_off(sorted.len() - n_hold);
    Ok((sorted, heldout))
}

/// Checks per-sample invariants, id uniqueness and a common feature dimension.
pub fn validate_corpus(samples: &[Sample]) -> Result<()> {
    let mut seen = HashSet::with_capacity(samples.len());
    let dim = samples.first().map(|s| s.video_feat.len());
    for s in samples {
        s.validate()?;
        ensure!(seen.insert(s.id), Validation, "duplicate sample id {}", s.id);
        ensure!(
            Some(s.video_feat.len()) == dim,
            Validation,
            "sample {}: feature dimension {} differs from {}",
            s.id,
            s.video_feat.len(),
            dim.unwrap_or(0)
        );
    }
    Ok(())
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    validate_corpus(&samples)?;
    Ok(samples)
}

pub fn save_jsonl(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
