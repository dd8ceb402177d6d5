//! Two-tower encoder with an auxiliary concept-prediction head.
//!
//! ```text
//! video:  z_v = norm(tanh(x · W_v + b_v))
//! text:   z_t = norm(tanh(mean(token_table[caption]) · W_t + b_t))
//! head:   logits = tanh(z_v · W_skp1 + b_skp1) · W_skp2 + b_skp2
//! ```
//!
//! `norm(h) = h / (|h| + 1e-12)`. Every forward pass returns a cache that the
//! matching `*_backward` method consumes to accumulate exact gradients.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::knowledge::KnowledgeVocab;
use crate::rng::{stream_rng, Stream};

pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub feat_dim: usize,
    pub hidden: usize,
    pub vocab_tokens: usize,
    pub skp_hidden: usize,
    /// Size of the concept vocabulary predicted by the head.
    pub num_concepts: usize,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.feat_dim > 0 && self.hidden > 0 && self.vocab_tokens > 0 && self.skp_hidden > 0,
            Config,
            "encoder dimensions must be positive: {self:?}"
        );
        Ok(())
    }
}

/// All trainable parameters. The same layout doubles as a gradient buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
    pub token_table: Array2<f64>,
    pub w_t: Array2<f64>,
    pub b_t: Array1<f64>,
    pub w_skp1: Array2<f64>,
    pub b_skp1: Array1<f64>,
    pub w_skp2: Array2<f64>,
    pub b_skp2: Array1<f64>,
}

pub type Gradients = EncoderParams;

fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-s..=s))
}

impl EncoderParams {
    pub fn init(dims: EncoderDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let EncoderDims {
            feat_dim,
            hidden,
            vocab_tokens,
            skp_hidden,
            num_concepts,
        } = dims;
        Ok(Self {
            dims,
            w_v: glorot(&mut rng, feat_dim, hidden),
            b_v: Array1::zeros(hidden),
            token_table: glorot(&mut rng, vocab_tokens, hidden),
            w_t: glorot(&mut rng, hidden, hidden),
            b_t: Array1::zeros(hidden),
            w_skp1: glorot(&mut rng, hidden, skp_hidden),
            b_skp1: Array1::zeros(skp_hidden),
            w_skp2: glorot(&mut rng, skp_hidden, num_concepts),
            b_skp2: Array1::zeros(num_concepts),
        })
    }

    pub fn zeros(dims: EncoderDims) -> Self {
        let EncoderDims {
            feat_dim,
            hidden,
            vocab_tokens,
            skp_hidden,
            num_concepts,
        } = dims;
        Self {
            dims,
            w_v: Array2::zeros((feat_dim, hidden)),
            b_v: Array1::zeros(hidden),
            token_table: Array2::zeros((vocab_tokens, hidden)),
            w_t: Array2::zeros((hidden, hidden)),
            b_t: Array1::zeros(hidden),
            w_skp1: Array2::zeros((hidden, skp_hidden)),
            b_skp1: Array1::zeros(skp_hidden),
            w_skp2: Array2::zeros((skp_hidden, num_concepts)),
            b_skp2: Array1::zeros(num_concepts),
        }
    }

    /// Flattened views of every tensor, in a fixed order.
    pub fn tensors(&self) -> [&[f64]; 9] {
        [
            self.w_v.as_slice().expect("standard layout"),
            self.b_v.as_slice().expect("standard layout"),
            self.token_table.as_slice().expect("standard layout"),
            self.w_t.as_slice().expect("standard layout"),
            self.b_t.as_slice().expect("standard layout"),
            self.w_skp1.as_slice().expect("standard layout"),
            self.b_skp1.as_slice().expect("standard layout"),
            self.w_skp2.as_slice().expect("standard layout"),
            self.b_skp2.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.w_v.as_slice_mut().expect("standard layout"),
            self.b_v.as_slice_mut().expect("standard layout"),
            self.token_table.as_slice_mut().expect("standard layout"),
            self.w_t.as_slice_mut().expect("standard layout"),
            self.b_t.as_slice_mut().expect("standard layout"),
            self.w_skp1.as_slice_mut().expect("standard layout"),
            self.b_skp1.as_slice_mut().expect("standard layout"),
            self.w_skp2.as_slice_mut().expect("standard layout"),
            self.b_skp2.as_slice_mut().expect("standard layout"),
        ]
    }

    fn shapes(&self) -> [&[usize]; 9] {
        [
            self.w_v.shape(),
            self.b_v.shape(),
            self.token_table.shape(),
            self.w_t.shape(),
            self.b_t.shape(),
            self.w_skp1.shape(),
            self.b_skp1.shape(),
            self.w_skp2.shape(),
            self.b_skp2.shape(),
        ]
    }

    /// Checks that every tensor has the shape implied by `dims` and is finite.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let expected = Self::zeros(self.dims);
        ensure!(
            self.shapes() == expected.shapes(),
            Validation,
            "parameter tensor shapes do not match dimension header {:?}",
            self.dims
        );
        ensure!(
            self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())),
            Validation,
            "parameters contain non-finite values"
        );
        Ok(())
    }

    /// `params -= lr * grads`.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        ensure!(
            self.shapes() == grads.shapes(),
            Validation,
            "gradient shapes do not match parameter shapes"
        );
        for (p, g) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            for (p, g) in p.iter_mut().zip(g) {
                *p -= lr * g;
            }
        }
        Ok(())
    }

    /// Video tower.
    pub fn encode_video(&self, video_feat: &[f64]) -> Result<(Array1<f64>, TowerCache)> {
        ensure!(
            video_feat.len() == self.dims.feat_dim,
            Validation,
            "video feature has dimension {}, encoder expects {}",
            video_feat.len(),
            self.dims.feat_dim
        );
        let input = Array1::from(video_feat.to_vec());
        let pre = input.dot(&self.w_v) + &self.b_v;
        TowerCache::finish(input, pre)
    }

    /// Text tower over the bag of caption tokens.
    pub fn encode_text(&self, caption: &[u32]) -> Result<(Array1<f64>, TowerCache)> {
        ensure!(!caption.is_empty(), Validation, "caption is empty");
        let mut mean = Array1::<f64>::zeros(self.dims.hidden);
        for &tok in caption {
            ensure!(
                (tok as usize) < self.dims.vocab_tokens,
                Validation,
                "token id {tok} out of range (vocabulary has {} tokens)",
                self.dims.vocab_tokens
            );
            mean += &self.token_table.row(tok as usize);
        }
        mean /= caption.len() as f64;
        let pre = mean.dot(&self.w_t) + &self.b_t;
        let (z, mut cache) = TowerCache::finish(mean, pre)?;
        cache.tokens = caption.to_vec();
        Ok((z, cache))
    }

    pub fn skp_head(&self, z_v: ArrayView1<f64>) -> Result<(SkpLogits, SkpCache)> {
        ensure!(
            z_v.len() == self.dims.hidden,
            Validation,
            "head input has length {}, expected {}",
            z_v.len(),
            self.dims.hidden
        );
        let hidden = (z_v.dot(&self.w_skp1) + &self.b_skp1).mapv(f64::tanh);
        let logits = hidden.dot(&self.w_skp2) + &self.b_skp2;
        Ok((
            SkpLogits { logits },
            SkpCache {
                input: z_v.to_owned(),
                hidden,
            },
        ))
    }

    /// Accumulates video-tower gradients for upstream gradient `g_z`.
    pub fn video_backward(&self, cache: &TowerCache, g_z: ArrayView1<f64>, grads: &mut Gradients) {
        let g_pre = cache.pre_activation_grad(g_z);
        outer_add(&mut grads.w_v, cache.input.view(), g_pre.view());
        grads.b_v += &g_pre;
    }

    /// Accumulates text-tower gradients, including token-table rows.
    pub fn text_backward(&self, cache: &TowerCache, g_z: ArrayView1<f64>, grads: &mut Gradients) {
        let g_pre = cache.pre_activation_grad(g_z);
        outer_add(&mut grads.w_t, cache.input.view(), g_pre.view());
        grads.b_t += &g_pre;
        let g_mean = self.w_t.dot(&g_pre) / cache.tokens.len() as f64;
        for &tok in &cache.tokens {
            let mut row = grads.token_table.row_mut(tok as usize);
            row += &g_mean;
        }
    }

    /// Accumulates head gradients and returns the gradient w.r.t. `z_v`.
    pub fn skp_backward(
        &self,
        cache: &SkpCache,
        g_logits: ArrayView1<f64>,
        grads: &mut Gradients,
    ) -> Array1<f64> {
        outer_add(&mut grads.w_skp2, cache.hidden.view(), g_logits);
        grads.b_skp2 += &g_logits;
        let g_hidden = self.w_skp2.dot(&g_logits);
        let g_pre = &g_hidden * &cache.hidden.mapv(|h| 1.0 - h * h);
        outer_add(&mut grads.w_skp1, cache.input.view(), g_pre.view());
        grads.b_skp1 += &g_pre;
        self.w_skp1.dot(&g_pre)
    }

    pub fn save(&self, path: impl AsRef<Path>, vocab: Option<&KnowledgeVocab>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let ckpt = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            dims: self.dims,
            vocab,
            params: self,
        };
        serde_json::to_writer(BufWriter::new(file), &ckpt)?;
        Ok(())
    }

    /// Loads a checkpoint. When `expected` is given, the stored dimension
    /// header must equal it.
    pub fn load(path: impl AsRef<Path>, expected: Option<&EncoderDims>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        ensure!(
            ckpt.format == CHECKPOINT_FORMAT,
            Validation,
            "{}: unknown checkpoint format {:?}",
            path.display(),
            ckpt.format
        );
        ensure!(
            ckpt.dims == ckpt.params.dims,
            Validation,
            "{}: header dimensions disagree with parameter block",
            path.display()
        );
        if let Some(expected) = expected {
            ensure!(
                &ckpt.dims == expected,
                Validation,
                "{}: checkpoint dimensions {:?} do not match expected {:?}",
                path.display(),
                ckpt.dims,
                expected
            );
        }
        ckpt.params.validate()?;
        if let Some(vocab) = &ckpt.vocab {
            ensure!(
                vocab.len() == ckpt.dims.num_concepts,
                Validation,
                "{}: stored vocabulary has {} concepts, head predicts {}",
                path.display(),
                vocab.len(),
                ckpt.dims.num_concepts
            );
        }
        Ok(ckpt)
    }
}

const CHECKPOINT_FORMAT: &str = "kcl-checkpoint-v1";

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    dims: EncoderDims,
    vocab: Option<&'a KnowledgeVocab>,
    params: &'a EncoderParams,
}

#[derive(Clone, Debug, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub dims: EncoderDims,
    pub vocab: Option<KnowledgeVocab>,
    pub params: EncoderParams,
}

fn outer_add(target: &mut Array2<f64>, left: ArrayView1<f64>, right: ArrayView1<f64>) {
    for (mut row, &l) in target.rows_mut().into_iter().zip(left) {
        if l != 0.0 {
            row.scaled_add(l, &right);
        }
    }
}

/// Intermediates of one tower forward pass.
#[derive(Clone, Debug)]
pub struct TowerCache {
    /// Input to the dense layer (raw feature, or mean token embedding).
    pub input: Array1<f64>,
    /// Post-tanh activation before normalization.
    pub hidden: Array1<f64>,
    pub norm: f64,
    tokens: Vec<u32>,
}

impl TowerCache {
    fn finish(input: Array1<f64>, pre: Array1<f64>) -> Result<(Array1<f64>, Self)> {
        let hidden = pre.mapv(f64::tanh);
        let norm = hidden.dot(&hidden).sqrt();
        if !norm.is_finite() {
            return Err(Error::Degenerate("non-finite activation".into()));
        }
        let z = &hidden / (norm + NORM_EPS);
        Ok((
            z,
            Self {
                input,
                hidden,
                norm,
                tokens: Vec::new(),
            },
        ))
    }

    /// Maps an upstream gradient on the normalized output back through the
    /// normalization and the tanh.
    fn pre_activation_grad(&self, g_z: ArrayView1<f64>) -> Array1<f64> {
        let denom = self.norm + NORM_EPS;
        let mut g_h = &g_z / denom;
        if self.norm > 0.0 {
            let coeff = self.hidden.dot(&g_z) / (self.norm * denom * denom);
            g_h.scaled_add(-coeff, &self.hidden);
        }
        Zip::from(&mut g_h)
            .and(&self.hidden)
            .for_each(|g, &h| *g *= 1.0 - h * h);
        g_h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkpLogits {
    pub logits: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct SkpCache {
    input: Array1<f64>,
    hidden: Array1<f64>,
}
