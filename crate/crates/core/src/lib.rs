//! Two-tower contrastive training regularized by structural knowledge.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`corpus`]: synthetic paired corpora with planted topic structure, JSONL I/O.
//! - [`knowledge`]: structural concepts, the top-K vocabulary, pseudo-labels.
//! - [`encoder`]: a two-tower encoder with a concept head and exact gradients.
//! - [`losses`]: multi-label BCE over concept logits and the symmetric hinge
//!   triplet loss.
//! - [`sampler`]: embedding memory, exact kNN, and knowledge-guided
//!   hard-negative epoch planning.
//! - [`metrics`]: R@K, median rank, multiple choice, alignment, uniformity.
//! - [`trainer`]: the epoch loop, ablation modes, evaluation.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod knowledge;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod runlog;
pub mod sampler;
pub mod trainer;

pub use corpus::{ConceptAnnotation, ConceptKind, CorpusConfig, Sample, SampleId};
pub use encoder::{Checkpoint, EncoderDims, EncoderParams, Gradients};
pub use error::{Error, Result};
pub use knowledge::{KnowledgeVocab, PseudoLabelVector, StructuralConcept};
pub use losses::{LossConfig, LossReport};
pub use metrics::{Direction, RetrievalReport, SpaceReport};
pub use runlog::RunLog;
pub use sampler::{Batch, BatchKind, BatchPlan, EmbeddingMemory, SamplerConfig};
pub use trainer::{EvalReport, Mode, TrainConfig, TrainedModel};
