//! Structural knowledge: per-sample concept sets built by relational
//! transforms over annotations, the top-K concept vocabulary, and the binary
//! pseudo-labels used as structural-knowledge prediction targets.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ConceptAnnotation, ConceptKind, Sample, SampleId};
use crate::error::{ensure, Error, Result};

/// Joins subject and predicate in subject-predicate keys.
pub const SP_SEPARATOR: char = '#';

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    AsIs,
    SubjectPredicate,
    SkpPredicted,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StructuralConcept {
    pub key: String,
    pub origin: Origin,
}

impl StructuralConcept {
    pub fn new(key: impl Into<String>, origin: Origin) -> Self {
        Self {
            key: key.into(),
            origin,
        }
    }

    pub fn is_subject_predicate_key(key: &str) -> bool {
        key.matches(SP_SEPARATOR).count() == 1
    }
}

pub type Knowledge = BTreeSet<StructuralConcept>;

/// A relational transform mapping a sample's atom concepts to structural
/// concepts. New relations (knowledge-base links, superordinate concepts)
/// plug in by implementing this trait.
pub trait RelationTransform {
    fn apply(&self, concepts: &[ConceptAnnotation]) -> Result<Knowledge>;
}

/// Keeps every atom concept as it is.
#[derive(Clone, Copy, Debug, Default)]
pub struct AsIs;

/// Pairs each verb with the noun it names as subject.
#[derive(Clone, Copy, Debug, Default)]
pub struct SubjectPredicate;

impl RelationTransform for AsIs {
    fn apply(&self, concepts: &[ConceptAnnotation]) -> Result<Knowledge> {
        Ok(transform_as_is(concepts))
    }
}

impl RelationTransform for SubjectPredicate {
    fn apply(&self, concepts: &[ConceptAnnotation]) -> Result<Knowledge> {
        transform_subject_predicate(concepts)
    }
}

pub fn transform_as_is(concepts: &[ConceptAnnotation]) -> Knowledge {
    concepts
        .iter()
        .map(|c| StructuralConcept::new(c.surface.clone(), Origin::AsIs))
        .collect()
}

pub fn transform_subject_predicate(concepts: &[ConceptAnnotation]) -> Result<Knowledge> {
    let mut out = Knowledge::new();
    for (i, c) in concepts.iter().enumerate() {
        let Some(link) = c.subject_link else { continue };
        let subject = concepts.get(link).filter(|s| s.kind == ConceptKind::Noun);
        let Some(subject) = subject else {
            return Err(Error::Validation(format!(
                "annotation {i} ({}) has dangling subject link {link}",
                c.surface
            )));
        };
        ensure!(
            !subject.surface.contains(SP_SEPARATOR) && !c.surface.contains(SP_SEPARATOR),
            Validation,
            "surfaces joined into a subject-predicate key may not contain '{SP_SEPARATOR}'"
        );
        out.insert(StructuralConcept::new(
            format!("{}{SP_SEPARATOR}{}", subject.surface, c.surface),
            Origin::SubjectPredicate,
        ));
    }
    Ok(out)
}

pub fn build_structural_knowledge(sample: &Sample) -> Result<Knowledge> {
    build_structural_knowledge_with(sample, &[&AsIs, &SubjectPredicate])
}

pub fn build_structural_knowledge_with(
    sample: &Sample,
    transforms: &[&dyn RelationTransform],
) -> Result<Knowledge> {
    let mut out = Knowledge::new();
    for t in transforms {
        out.extend(t.apply(&sample.concept_annotations)?);
    }
    Ok(out)
}

/// Top-K concept vocabulary. Position in `concepts` is the label index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct KnowledgeVocab {
    concepts: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for KnowledgeVocab {
    fn from(concepts: Vec<String>) -> Self {
        let index = concepts
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i))
            .collect();
        Self { concepts, index }
    }
}

impl From<KnowledgeVocab> for Vec<String> {
    fn from(v: KnowledgeVocab) -> Self {
        v.concepts
    }
}

impl KnowledgeVocab {
    pub fn from_keys(concepts: Vec<String>) -> Result<Self> {
        let vocab = Self::from(concepts);
        ensure!(
            vocab.index.len() == vocab.concepts.len(),
            Validation,
            "vocabulary contains duplicate keys"
        );
        ensure!(
            vocab.concepts.iter().all(|k| !k.is_empty()),
            Validation,
            "vocabulary contains an empty key"
        );
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn position(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Writes one key per line; line number (from 0) is the label index.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.concepts.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_keys(text.lines().map(str::to_owned).collect())
    }
}

/// Collects the `k` keys present in the most samples. Ties are broken by
/// ascending key.
pub fn build_vocab(corpus: &[Sample], k: usize) -> Result<KnowledgeVocab> {
    ensure!(k >= 1, Config, "vocabulary size k must be >= 1");
    let mut freq: HashMap<String, usize> = HashMap::new();
    for s in corpus {
        let keys: BTreeSet<String> = build_structural_knowledge(s)?
            .into_iter()
            .map(|c| c.key)
            .collect();
        for key in keys {
            *freq.entry(key).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(KnowledgeVocab::from(
        ranked.into_iter().map(|(k, _)| k).collect::<Vec<_>>(),
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelVector {
    pub sample_id: SampleId,
    pub bits: Vec<bool>,
}

impl PseudoLabelVector {
    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Vocabulary keys whose bit is set.
    pub fn keys<'a>(&'a self, vocab: &'a KnowledgeVocab) -> impl Iterator<Item = &'a str> + 'a {
        self.bits
            .iter()
            .zip(vocab.concepts())
            .filter(|(b, _)| **b)
            .map(|(_, k)| k.as_str())
    }
}

pub fn label_vector(sample: &Sample, vocab: &KnowledgeVocab) -> Result<PseudoLabelVector> {
    let mut bits = vec![false; vocab.len()];
    for c in build_structural_knowledge(sample)? {
        if let Some(i) = vocab.position(&c.key) {
            bits[i] = true;
        }
    }
    Ok(PseudoLabelVector {
        sample_id: sample.id,
        bits,
    })
}

pub fn label_vectors(corpus: &[Sample], vocab: &KnowledgeVocab) -> Result<Vec<PseudoLabelVector>> {
    corpus.iter().map(|s| label_vector(s, vocab)).collect()
}

/// Sets every bit whose predicted probability reaches `threshold`. Original
/// bits are never cleared. Labels without an entry in `sample_probs` pass
/// through unchanged.
pub fn refresh_pseudo_labels(
    sample_probs: &HashMap<SampleId, Vec<f64>>,
    vocab: &KnowledgeVocab,
    threshold: f64,
    labels: &[PseudoLabelVector],
) -> Result<Vec<PseudoLabelVector>> {
    ensure!(
        threshold > 0.0 && threshold < 1.0,
        Validation,
        "refresh threshold {threshold} must lie in (0, 1)"
    );
    labels
        .iter()
        .map(|label| {
            ensure!(
                label.bits.len() == vocab.len(),
                Validation,
                "sample {}: label length {} != vocabulary size {}",
                label.sample_id,
                label.bits.len(),
                vocab.len()
            );
            let Some(probs) = sample_probs.get(&label.sample_id) else {
                return Ok(label.clone());
            };
            ensure!(
                probs.len() == vocab.len(),
                Validation,
                "sample {}: probability vector length {} != vocabulary size {}",
                label.sample_id,
                probs.len(),
                vocab.len()
            );
            ensure!(
                probs.iter().all(|p| (0.0..=1.0).contains(p)),
                Validation,
                "sample {}: probabilities must lie in [0, 1]",
                label.sample_id
            );
            let bits = label
                .bits
                .iter()
                .zip(probs)
                .map(|(&b, &p)| b || p >= threshold)
                .collect();
            Ok(PseudoLabelVector {
                sample_id: label.sample_id,
                bits,
            })
        })
        .collect()
}

/// Structural knowledge of a sample extended with SKP-predicted vocabulary
/// concepts from a (possibly refreshed) label vector.
pub fn refreshed_knowledge(
    sample: &Sample,
    label: &PseudoLabelVector,
    vocab: &KnowledgeVocab,
) -> Result<Knowledge> {
    let mut out = build_structural_knowledge(sample)?;
    let present: BTreeSet<String> = out.iter().map(|c| c.key.clone()).collect();
    for key in label.keys(vocab) {
        if !present.contains(key) {
            out.insert(StructuralConcept::new(key, Origin::SkpPredicted));
        }
    }
    Ok(out)
}
