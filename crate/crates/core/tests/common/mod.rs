//! Test-side oracles. Everything here is written independently of the crate's
//! own implementations: double loops, full sorts, and sequential simulations.
#![allow(dead_code)]

use kcl_core::corpus::generate_synthetic;
use kcl_core::encoder::EncoderDims;
use kcl_core::trainer::train;
use kcl_core::{ConceptAnnotation, CorpusConfig, EncoderParams, Mode, Sample, SampleId, TrainConfig};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error between analytic and numeric gradients.
pub const FD_REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let v = gaussian(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let flat: Vec<f64> = (0..rows).flat_map(|_| unit(rng, cols)).collect();
    Array2::from_shape_vec((rows, cols), flat).unwrap()
}

/// `|a - n| / max(|a|, |n|)` over whole vectors; zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

// ---------------------------------------------------------------------------
// Gradient checks. Each returns the worst relative error over `instances`.

#[derive(Clone, Copy, Debug)]
pub struct GradStats {
    pub instances: usize,
    pub worst: f64,
}

impl GradStats {
    fn new() -> Self {
        Self { instances: 0, worst: 0.0 }
    }

    fn record(&mut self, err: f64) {
        self.instances += 1;
        self.worst = self.worst.max(err);
    }

    pub fn ok(&self, min_instances: usize) -> bool {
        self.instances >= min_instances && self.worst < FD_REL_TOL
    }
}

fn small_dims(rng: &mut impl Rng) -> EncoderDims {
    EncoderDims {
        feat_dim: rng.random_range(2..7),
        hidden: rng.random_range(2..6),
        vocab_tokens: rng.random_range(3..9),
        skp_hidden: rng.random_range(2..5),
        num_concepts: rng.random_range(1..6),
    }
}

/// Random parameters with non-zero biases so every term is exercised.
fn random_params(rng: &mut ChaCha8Rng, dims: EncoderDims) -> EncoderParams {
    let mut p = EncoderParams::init(dims, rng.random()).unwrap();
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

/// Indices into `EncoderParams::tensors()`.
pub const VIDEO_TENSORS: [usize; 2] = [0, 1];
pub const TEXT_TENSORS: [usize; 3] = [2, 3, 4];
pub const HEAD_TENSORS: [usize; 4] = [5, 6, 7, 8];

/// Compares `grads` against central differences of `loss` over every entry of
/// the listed tensors.
fn param_fd_error(
    params: &EncoderParams,
    grads: &EncoderParams,
    tensors: &[usize],
    loss: impl Fn(&EncoderParams) -> f64,
) -> f64 {
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = params.clone();
    for &t in tensors {
        for i in 0..params.tensors()[t].len() {
            analytic.push(grads.tensors()[t][i]);
            let x0 = params.tensors()[t][i];
            numeric.push(central_diff(
                |x| {
                    probe.tensors_mut()[t][i] = x;
                    loss(&probe)
                },
                x0,
            ));
            probe.tensors_mut()[t][i] = x0;
        }
    }
    rel_err(&analytic, &numeric)
}

/// Loss `g · z_v` through the video tower.
pub fn check_video_tower(instances: usize, seed: u64) -> GradStats {
    let mut rng = rng(seed);
    let mut stats = GradStats::new();
    while stats.instances < instances {
        let dims = small_dims(&mut rng);
        let params = random_params(&mut rng, dims);
        let x = gaussian(&mut rng, dims.feat_dim);
        let g = Array1::from(gaussian(&mut rng, dims.hidden));
        let (_, cache) = params.encode_video(&x).unwrap();
        let mut grads = EncoderParams::zeros(dims);
        params.video_backward(&cache, g.view(), &mut grads);
        let loss = |p: &EncoderParams| p.encode_video(&x).unwrap().0.dot(&g);
        stats.record(param_fd_error(&params, &grads, &VIDEO_TENSORS, loss));
    }
    stats
}

/// Loss `g · z_t` through the text tower, including repeated tokens.
pub fn check_text_tower(instances: usize, seed: u64) -> GradStats {
    let mut rng = rng(seed);
    let mut stats = GradStats::new();
    while stats.instances < instances {
        let dims = small_dims(&mut rng);
        let params = random_params(&mut rng, dims);
        let len = rng.random_range(1..6);
        let caption: Vec<u32> = (0..len)
            .map(|_| rng.random_range(0..dims.vocab_tokens as u32))
            .collect();
        let g = Array1::from(gaussian(&mut rng, dims.hidden));
        let (_, cache) = params.encode_text(&caption).unwrap();
        let mut grads = EncoderParams::zeros(dims);
        params.text_backward(&cache, g.view(), &mut grads);
        let loss = |p: &EncoderParams| p.encode_text(&caption).unwrap().0.dot(&g);
        stats.record(param_fd_error(&params, &grads, &TEXT_TENSORS, loss));
    }
    stats
}

/// Loss `g · logits` through the head, checked on head parameters and on the
/// head input.
pub fn check_head(instances: usize, seed: u64) -> GradStats {
    let mut rng = rng(seed);
    let mut stats = GradStats::new();
    while stats.instances < instances {
        let dims = small_dims(&mut rng);
        let params = random_params(&mut rng, dims);
        let z = Array1::from(unit(&mut rng, dims.hidden));
        let g = Array1::from(gaussian(&mut rng, dims.num_concepts));
        let (_, cache) = params.skp_head(z.view()).unwrap();
        let mut grads = EncoderParams::zeros(dims);
        let g_z = params.skp_backward(&cache, g.view(), &mut grads);
        let head_loss = |p: &EncoderParams, z: &Array1<f64>| p.skp_head(z.view()).unwrap().0.logits.dot(&g);
        let e_params = param_fd_error(&params, &grads, &HEAD_TENSORS, |p| head_loss(p, &z));
        let mut probe = z.clone();
        let numeric: Vec<f64> = (0..z.len())
            .map(|i| {
                let d = central_diff(
                    |x| {
                        probe[i] = x;
                        head_loss(&params, &probe)
                    },
                    z[i],
                );
                probe[i] = z[i];
                d
            })
            .collect();
        let e_input = rel_err(g_z.as_slice().unwrap(), &numeric);
        stats.record(e_params.max(e_input));
    }
    stats
}

/// Gradient of the batch concept loss with respect to the logits.
pub fn check_skp_loss(instances: usize, seed: u64) -> GradStats {
    let mut rng = rng(seed);
    let mut stats = GradStats::new();
    while stats.instances < instances {
        let n = rng.random_range(1..6);
        let k = rng.random_range(1..8);
        let logits = Array2::from_shape_fn((n, k), |_| 3.0 * rng.sample::<f64, _>(StandardNormal));
        let labels = Array2::from_shape_fn((n, k), |_| f64::from(u8::from(rng.random_bool(0.4))));
        let (_, grad) = kcl_core::losses::skp_loss(logits.view(), labels.view()).unwrap();
        let mut probe = logits.clone();
        let mut numeric = Vec::new();
        for idx in 0..n * k {
            let (r, c) = (idx / k, idx % k);
            numeric.push(central_diff(
                |x| {
                    probe[[r, c]] = x;
                    kcl_core::losses::skp_loss(probe.view(), labels.view()).unwrap().0
                },
                logits[[r, c]],
            ));
            probe[[r, c]] = logits[[r, c]];
        }
        stats.record(rel_err(grad.as_slice().unwrap(), &numeric));
    }
    stats
}

fn normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut z = x.clone();
    for mut row in z.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    z
}

/// Backpropagates a gradient on `z = x / |x|` to `x`.
fn through_normalization(x: &Array2<f64>, g_z: &Array2<f64>) -> Array2<f64> {
    let z = normalize_rows(x);
    let mut g_x = g_z.clone();
    for ((mut gx, zr), xr) in g_x.rows_mut().into_iter().zip(z.rows()).zip(x.rows()) {
        let n = xr.dot(&xr).sqrt();
        let radial = zr.dot(&gx);
        gx.scaled_add(-radial, &zr);
        gx /= n;
    }
    g_x
}

/// Smallest distance of any hinge argument from its kink.
fn closest_kink(z_v: &Array2<f64>, z_t: &Array2<f64>, delta: f64) -> f64 {
    let n = z_v.nrows();
    let mut closest = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let t2v = delta + z_t.row(i).dot(&z_v.row(j)) - z_t.row(i).dot(&z_v.row(i));
            let v2t = delta + z_v.row(i).dot(&z_t.row(j)) - z_v.row(i).dot(&z_t.row(i));
            closest = closest.min(t2v.abs()).min(v2t.abs());
        }
    }
    closest
}

/// Triplet loss gradient, differentiated through the normalization of raw
/// inputs. Instances with a hinge within `1e-3` of its kink are redrawn, since
/// a central difference straddling the kink measures neither side.
pub fn check_triplet_loss(instances: usize, seed: u64) -> GradStats {
    let mut rng = rng(seed);
    let mut stats = GradStats::new();
    while stats.instances < instances {
        let n = rng.random_range(2..8);
        let h = rng.random_range(2..7);
        let delta = rng.random_range(0.05..1.0);
        let x_v = Array2::from_shape_fn((n, h), |_| rng.sample::<f64, _>(StandardNormal));
        let x_t = Array2::from_shape_fn((n, h), |_| rng.sample::<f64, _>(StandardNormal));
        let (z_v, z_t) = (normalize_rows(&x_v), normalize_rows(&x_t));
        if closest_kink(&z_v, &z_t, delta) < 1e-3 {
            continue;
        }
        let out = kcl_core::losses::kcl_triplet_loss(z_v.view(), z_t.view(), delta).unwrap();
        let mut analytic = through_normalization(&x_v, &out.grad_zv).into_raw_vec_and_offset().0;
        analytic.extend(through_normalization(&x_t, &out.grad_zt).into_raw_vec_and_offset().0);
        let loss = |xv: &Array2<f64>, xt: &Array2<f64>| {
            kcl_core::losses::kcl_triplet_loss(normalize_rows(xv).view(), normalize_rows(xt).view(), delta)
                .unwrap()
                .loss
        };
        let mut numeric = Vec::new();
        for side in 0..2 {
            let (mut pv, mut pt) = (x_v.clone(), x_t.clone());
            for idx in 0..n * h {
                let (r, c) = (idx / h, idx % h);
                let x0 = if side == 0 { x_v[[r, c]] } else { x_t[[r, c]] };
                numeric.push(central_diff(
                    |x| {
                        if side == 0 {
                            pv[[r, c]] = x;
                        } else {
                            pt[[r, c]] = x;
                        }
                        loss(&pv, &pt)
                    },
                    x0,
                ));
                pv.assign(&x_v);
                pt.assign(&x_t);
            }
        }
        stats.record(rel_err(&analytic, &numeric));
    }
    stats
}

// ---------------------------------------------------------------------------
// Direct formula oracles.

/// Double loop over pairs, straight from the hinge definitions.
pub fn naive_triplet(z_v: &Array2<f64>, z_t: &Array2<f64>, delta: f64) -> f64 {
    let n = z_v.nrows();
    let sim = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        let mut s = 0.0;
        for k in 0..a.len() {
            s += a[k] * b[k];
        }
        s
    };
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let t2v = delta + sim(z_t.row(i), z_v.row(j)) - sim(z_t.row(i), z_v.row(i));
            let v2t = delta + sim(z_v.row(i), z_t.row(j)) - sim(z_v.row(i), z_t.row(i));
            total += t2v.max(0.0) + v2t.max(0.0);
        }
    }
    total / n as f64
}

/// `-[y log σ(l) + (1 - y) log(1 - σ(l))]` summed per sample, averaged over
/// samples, with σ evaluated directly.
pub fn naive_skp(logits: &Array2<f64>, labels: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (l_row, y_row) in logits.rows().into_iter().zip(labels.rows()) {
        for (&l, &y) in l_row.iter().zip(y_row) {
            let p = 1.0 / (1.0 + (-l).exp());
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
    }
    total / logits.nrows() as f64
}

/// Rank of each query's true match by a full comparison count.
pub fn double_loop_ranks(queries: &Array2<f64>, candidates: &Array2<f64>) -> Vec<usize> {
    let m = queries.nrows();
    let score = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for k in 0..queries.ncols() {
            s += queries[[i, k]] * candidates[[j, k]];
        }
        s
    };
    (0..m)
        .map(|i| {
            let own = score(i, i);
            let mut rank = 1;
            for j in 0..m {
                let s = score(i, j);
                if s > own || (s == own && j < i) {
                    rank += 1;
                }
            }
            rank
        })
        .collect()
}

/// Log of the mean potential over ordered pairs `i != j`, computed directly.
pub fn double_loop_uniformity(z: &Array2<f64>, beta: f64) -> f64 {
    let m = z.nrows();
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let mut d2 = 0.0;
            for k in 0..z.ncols() {
                d2 += (z[[i, k]] - z[[j, k]]).powi(2);
            }
            sum += (-beta * d2).exp();
            count += 1.0;
        }
    }
    (sum / count).ln()
}

/// Every entry ranked by `(distance, id)`, then truncated to `k`.
pub fn brute_knn(entries: &[(SampleId, Vec<f64>)], query: &[f64], k: usize) -> Vec<(SampleId, f64)> {
    let mut all: Vec<(SampleId, f64)> = entries
        .iter()
        .map(|(id, v)| {
            let d2: f64 = v.iter().zip(query).map(|(a, b)| (b - a) * (b - a)).sum();
            (*id, d2.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Expected fraction of high-weight items among `draws` items taken one at a
/// time, each with probability proportional to weight among those remaining.
pub fn sequential_wor_fraction(n_hi: usize, n_lo: usize, w_hi: f64, w_lo: f64, draws: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        let (mut hi, mut lo) = (n_hi, n_lo);
        for _ in 0..draws {
            let total = hi as f64 * w_hi + lo as f64 * w_lo;
            if rng.random::<f64>() * total < hi as f64 * w_hi {
                hi -= 1;
                hits += 1;
            } else {
                lo -= 1;
            }
        }
    }
    hits as f64 / (trials * draws) as f64
}

// ---------------------------------------------------------------------------
// Fixtures.

/// A sample whose only content is its concepts. Action samples carry a
/// linked subject and verb.
pub fn concept_sample(id: SampleId, action: bool) -> Sample {
    let mut concepts = vec![ConceptAnnotation::noun(format!("thing{}", id % 7))];
    if action {
        concepts.push(ConceptAnnotation::verb("jump", Some(0)));
    }
    Sample {
        id,
        video_feat: vec![0.0, 0.0],
        caption: vec![0],
        concept_annotations: concepts,
        topic_id: None,
    }
}

/// Corpus size and per-seed configuration of the paired ablation.
pub const ABLATION_SAMPLES: usize = 2000;
pub const ABLATION_TOPICS: usize = 16;
pub const ABLATION_EPOCHS: usize = 30;
pub const ABLATION_SEEDS: u64 = 5;

#[derive(Clone, Debug)]
pub struct ModeResult {
    pub aver: f64,
    pub r1: f64,
    pub unif_txt: f64,
    pub unif_vis: f64,
}

/// Heldout metrics for each mode at final evaluation, one row per seed, in the
/// order base, skp_only, kcl_only, full.
pub fn run_ablation() -> Vec<[ModeResult; 4]> {
    (0..ABLATION_SEEDS)
        .map(|seed| {
            let corpus = generate_synthetic(&CorpusConfig {
                num_samples: ABLATION_SAMPLES,
                num_topics: ABLATION_TOPICS,
                seed,
                ..Default::default()
            })
            .unwrap();
            [Mode::Base, Mode::SkpOnly, Mode::KclOnly, Mode::Full].map(|mode| {
                let config = TrainConfig {
                    epochs: ABLATION_EPOCHS,
                    eval_every: ABLATION_EPOCHS,
                    seed,
                    mode,
                    ..Default::default()
                };
                let model = train(&corpus, &config).unwrap();
                let e = model.log.last_eval().unwrap();
                ModeResult {
                    aver: e.t2v.aver,
                    r1: e.t2v.r1,
                    unif_txt: e.space.unif_txt,
                    unif_vis: e.space.unif_vis,
                }
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Batch planning suites.

use kcl_core::knowledge::{build_vocab, label_vectors};
use kcl_core::sampler::{build_epoch_plan, sample_anchors};
use kcl_core::{BatchKind, BatchPlan, EmbeddingMemory, SamplerConfig};
use std::collections::{BTreeMap, HashSet};

pub fn memory_of(entries: &[(SampleId, Vec<f64>)], epoch: usize) -> EmbeddingMemory {
    let mut m = EmbeddingMemory::new();
    for (id, v) in entries {
        let a = Array1::from(v.clone());
        m.update(*id, a.view(), a.view(), epoch).unwrap();
    }
    m
}

/// Vectors on a coarse integer grid, so many distances coincide exactly.
pub fn grid_point(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-2i32..=2) as f64).collect()
}

fn check_plan_shape(plan: &BatchPlan, ids: &[SampleId], n: usize) -> Result<(), String> {
    let mut seen = HashSet::new();
    for (b, batch) in plan.batches.iter().enumerate() {
        if batch.sample_ids.len() != n {
            return Err(format!("batch {b} has {} ids, expected {n}", batch.sample_ids.len()));
        }
        let distinct: HashSet<_> = batch.sample_ids.iter().collect();
        if distinct.len() != n {
            return Err(format!("batch {b} repeats an id"));
        }
        if (batch.kind == BatchKind::Hard) != batch.anchor_id.is_some() {
            return Err(format!("batch {b}: anchor presence disagrees with kind"));
        }
        seen.extend(batch.sample_ids.iter().copied());
    }
    if let Some(missing) = ids.iter().find(|id| !seen.contains(id)) {
        return Err(format!("id {missing} is in no batch"));
    }
    if seen.len() != ids.len() {
        return Err("plan contains ids outside the corpus".into());
    }
    Ok(())
}

/// Plan invariants on `configs` randomized corpora, memories and sampler
/// settings: coverage, batch size, hard-batch locality against the brute-force
/// neighborhood, all-random first epoch, and repeatability.
pub fn check_epoch_plans(configs: usize, seed: u64) -> Result<usize, String> {
    let mut rng = rng(seed);
    for c in 0..configs {
        let size = rng.random_range(20..400);
        let n = rng.random_range(2..=16.min(size));
        let action_share = rng.random_range(0.0..0.5);
        let corpus: Vec<Sample> = (0..size as u64)
            .map(|i| concept_sample(i * 3 + 1, rng.random_bool(action_share)))
            .collect();
        let ids: Vec<SampleId> = corpus.iter().map(|s| s.id).collect();
        let vocab = build_vocab(&corpus, 64).unwrap();
        let labels = label_vectors(&corpus, &vocab).unwrap();
        let config = SamplerConfig {
            batch_size: n,
            num_hard_batches: rng.random_bool(0.5).then(|| rng.random_range(0..=size / n)),
            knn_k: None,
            action_weight: rng.random_range(1.0..6.0),
            base_weight: 1.0,
            desired_concepts: if rng.random_bool(0.7) { vec!["thing1#jump".into(), "jump".into()] } else { vec![] },
            seed: rng.random(),
        };
        let dim = rng.random_range(2..6);
        let grid = rng.random_bool(0.3);
        let entries: Vec<(SampleId, Vec<f64>)> = ids
            .iter()
            .map(|&id| (id, if grid { grid_point(&mut rng, dim) } else { gaussian(&mut rng, dim) }))
            .collect();
        let epoch = rng.random_range(1..20);
        let memory = memory_of(&entries, epoch - 1);

        let first = build_epoch_plan(&corpus, &EmbeddingMemory::new(), &labels, &vocab, &config, 0)
            .map_err(|e| format!("config {c}: {e}"))?;
        check_plan_shape(&first, &ids, n).map_err(|e| format!("config {c}, first epoch: {e}"))?;
        if first.batches.iter().any(|b| b.kind != BatchKind::Random) || first.batches.len() != size.div_ceil(n) {
            return Err(format!("config {c}: first epoch is not {} random batches", size.div_ceil(n)));
        }

        let plan = build_epoch_plan(&corpus, &memory, &labels, &vocab, &config, epoch)
            .map_err(|e| format!("config {c}: {e}"))?;
        check_plan_shape(&plan, &ids, n).map_err(|e| format!("config {c}: {e}"))?;
        let hard: Vec<_> = plan.hard_batches().collect();
        if hard.len() != config.hard_batches_for(size) {
            return Err(format!("config {c}: {} hard batches, expected {}", hard.len(), config.hard_batches_for(size)));
        }
        for b in hard {
            let anchor = b.anchor_id.unwrap();
            let query = &entries.iter().find(|(id, _)| *id == anchor).unwrap().1;
            let hood: HashSet<SampleId> = brute_knn(&entries, query, 2 * n).into_iter().map(|(id, _)| id).collect();
            if let Some(out) = b.sample_ids.iter().find(|id| !hood.contains(id)) {
                return Err(format!("config {c}: id {out} outside the 2N-neighborhood of anchor {anchor}"));
            }
        }
        let again = build_epoch_plan(&corpus, &memory.clone(), &labels, &vocab, &config, epoch)
            .map_err(|e| format!("config {c}: {e}"))?;
        if again != plan {
            return Err(format!("config {c}: repeated planning differs"));
        }
    }
    Ok(configs)
}

/// Memory of `size` points in `clusters` tight, far-apart clusters.
pub fn clustered_entries(rng: &mut impl Rng, ids: &[SampleId], clusters: usize, dim: usize) -> Vec<(SampleId, Vec<f64>)> {
    let centers: Vec<Vec<f64>> = (0..clusters).map(|_| gaussian(rng, dim).iter().map(|x| 100.0 * x).collect()).collect();
    ids.iter()
        .enumerate()
        .map(|(i, &id)| {
            let c = &centers[i % clusters];
            (id, c.iter().map(|x| x + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect())
        })
        .collect()
}

/// The 1000/50/15 plan, recounted: hard batches plus backfill whose non-padding
/// part is exactly the ids no hard batch visited.
pub fn recount_thousand(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let corpus: Vec<Sample> = (0..1000).map(|i| concept_sample(i, i % 10 == 0)).collect();
    let ids: Vec<SampleId> = corpus.iter().map(|s| s.id).collect();
    let vocab = build_vocab(&corpus, 64).unwrap();
    let labels = label_vectors(&corpus, &vocab).unwrap();
    let config = SamplerConfig {
        batch_size: 50,
        num_hard_batches: Some(15),
        seed,
        ..Default::default()
    };
    let entries = clustered_entries(&mut rng, &ids, 10, 8);
    let plan = build_epoch_plan(&corpus, &memory_of(&entries, 0), &labels, &vocab, &config, 1).map_err(|e| e.to_string())?;
    check_plan_shape(&plan, &ids, 50)?;

    let mut visited = HashSet::new();
    let mut hard = 0;
    for b in plan.hard_batches() {
        hard += 1;
        visited.extend(b.sample_ids.iter().copied());
    }
    if hard != 15 {
        return Err(format!("{hard} hard batches"));
    }
    let unvisited: Vec<SampleId> = ids.iter().copied().filter(|id| !visited.contains(id)).collect();
    if unvisited.len() < 250 {
        return Err(format!("only {} unvisited ids", unvisited.len()));
    }
    let mut counts: BTreeMap<SampleId, usize> = BTreeMap::new();
    let random: Vec<_> = plan.batches.iter().filter(|b| b.kind == BatchKind::Random).collect();
    for b in &random {
        for &id in &b.sample_ids {
            *counts.entry(id).or_default() += 1;
        }
    }
    if random.len() != unvisited.len().div_ceil(50) {
        return Err(format!("{} backfill batches for {} unvisited ids", random.len(), unvisited.len()));
    }
    for id in &unvisited {
        if counts.get(id) != Some(&1) {
            return Err(format!("unvisited id {id} appears {:?} times in backfill", counts.get(id)));
        }
    }
    let padding: Vec<SampleId> = counts.keys().copied().filter(|id| visited.contains(id)).collect();
    if padding.len() != random.len() * 50 - unvisited.len() {
        return Err(format!("{} padding ids, expected {}", padding.len(), random.len() * 50 - unvisited.len()));
    }
    Ok(())
}

/// Corpus of 1000 samples, 100 of them carrying the desired concept.
pub fn anchor_corpus() -> Vec<Sample> {
    (0..1000).map(|i| concept_sample(i, i % 10 == 3)).collect()
}

/// Fraction of action anchors over `trials` independent draws of 100 anchors
/// at weight ratio 5.
pub fn action_anchor_fraction(trials: usize) -> f64 {
    let corpus = anchor_corpus();
    let action: HashSet<SampleId> = corpus.iter().filter(|s| s.concept_annotations.len() == 2).map(|s| s.id).collect();
    let vocab = build_vocab(&corpus, 64).unwrap();
    let labels = label_vectors(&corpus, &vocab).unwrap();
    let mut hits = 0usize;
    for t in 0..trials as u64 {
        let config = SamplerConfig {
            batch_size: 5,
            num_hard_batches: Some(100),
            action_weight: 5.0,
            base_weight: 1.0,
            desired_concepts: vec!["jump".into()],
            seed: t,
            ..Default::default()
        };
        let anchors = sample_anchors(&corpus, &labels, &vocab, &config).unwrap();
        hits += anchors.iter().filter(|id| action.contains(id)).count();
    }
    hits as f64 / (trials * 100) as f64
}

// ---------------------------------------------------------------------------
// Knowledge pipeline.

use kcl_core::knowledge::{
    build_structural_knowledge, label_vector, refresh_pseudo_labels, transform_as_is, transform_subject_predicate,
};
use kcl_core::{KnowledgeVocab, PseudoLabelVector};
use std::collections::HashMap;

fn annotated(id: SampleId, concepts: Vec<ConceptAnnotation>) -> Sample {
    Sample {
        id,
        video_feat: vec![0.0],
        caption: vec![0],
        concept_annotations: concepts,
        topic_id: None,
    }
}

fn key_list<'a>(k: impl IntoIterator<Item = &'a kcl_core::StructuralConcept>) -> Vec<String> {
    k.into_iter().map(|c| c.key.clone()).collect()
}

fn vocab(keys: &[&str]) -> KnowledgeVocab {
    KnowledgeVocab::from_keys(keys.iter().map(|k| k.to_string()).collect()).unwrap()
}

/// The transform, vocabulary, label and refresh examples, each paired with
/// whether it holds.
pub fn knowledge_examples() -> Vec<(&'static str, bool)> {
    use ConceptAnnotation as A;
    let man_runs = vec![A::noun("man"), A::verb("run", Some(0))];
    let freq = vec![
        annotated(1, vec![A::noun("dog")]),
        annotated(2, vec![A::noun("dog"), A::noun("cat")]),
        annotated(3, vec![A::noun("dog")]),
    ];
    let tie = vec![
        annotated(1, vec![A::noun("b"), A::noun("a")]),
        annotated(2, vec![A::noun("a"), A::noun("b")]),
    ];
    let labels = |bits: Vec<bool>| vec![PseudoLabelVector { sample_id: 1, bits }];
    let refresh = |bits: Vec<bool>, probs: Vec<f64>| {
        refresh_pseudo_labels(&HashMap::from([(1, probs)]), &vocab(&["x", "y"]), 0.5, &labels(bits)).unwrap()[0]
            .bits
            .clone()
    };
    vec![
        ("as-is of nothing is empty", transform_as_is(&[]).is_empty()),
        ("as-is deduplicates", key_list(&transform_as_is(&[A::noun("dog"), A::noun("dog")])) == ["dog"]),
        ("as-is keeps noun and verb", key_list(&transform_as_is(&[A::noun("man"), A::verb("run", None)])) == ["man", "run"]),
        (
            "subject-predicate pairs a linked verb",
            key_list(&transform_subject_predicate(&man_runs).unwrap()) == ["man#run"],
        ),
        (
            "subject-predicate skips an unlinked verb",
            transform_subject_predicate(&[A::verb("run", None)]).unwrap().is_empty(),
        ),
        (
            "subject-predicate follows the link",
            key_list(&transform_subject_predicate(&[A::noun("man"), A::noun("dog"), A::verb("run", Some(1))]).unwrap())
                == ["dog#run"],
        ),
        (
            "subject-predicate rejects a dangling link",
            transform_subject_predicate(&[A::verb("run", Some(4))]).is_err(),
        ),
        (
            "knowledge is the union of both transforms",
            key_list(&build_structural_knowledge(&annotated(1, man_runs.clone())).unwrap()) == ["man", "man#run", "run"],
        ),
        (
            "visual object alone",
            key_list(&build_structural_knowledge(&annotated(1, vec![A::visual_object("guitar")])).unwrap()) == ["guitar"],
        ),
        ("no annotations, no knowledge", build_structural_knowledge(&annotated(1, vec![])).unwrap().is_empty()),
        ("vocab keeps the most frequent", build_vocab(&freq, 1).unwrap().concepts() == ["dog"]),
        ("vocab ties break lexicographically", build_vocab(&tie, 2).unwrap().concepts() == ["a", "b"]),
        ("vocab clamps to distinct concepts", build_vocab(&freq, 50).unwrap().concepts() == ["dog", "cat"]),
        ("empty corpus, empty vocab", build_vocab(&[], 5).unwrap().is_empty()),
        (
            "label marks present concepts",
            label_vector(&annotated(1, vec![A::noun("dog")]), &vocab(&["dog", "cat"])).unwrap().bits == [true, false],
        ),
        (
            "label of no knowledge is all zero",
            label_vector(&annotated(1, vec![]), &vocab(&["dog", "cat"])).unwrap().bits == [false, false],
        ),
        (
            "out-of-vocab concepts are dropped",
            label_vector(&annotated(1, vec![A::noun("zebra")]), &vocab(&["dog", "cat"])).unwrap().bits == [false, false],
        ),
        ("refresh with zero probabilities is a no-op", refresh(vec![true, false], vec![0.0, 0.0]) == [true, false]),
        ("refresh never clears a bit", refresh(vec![true, false], vec![0.0, 0.1]) == [true, false]),
        ("refresh sets a confident bit", refresh(vec![false, false], vec![0.9, 0.1]) == [true, false]),
        (
            "refresh rejects a length mismatch",
            refresh_pseudo_labels(&HashMap::from([(1, vec![0.5])]), &vocab(&["x", "y"]), 0.5, &labels(vec![false, false]))
                .is_err(),
        ),
    ]
}

/// Random labels, probabilities and thresholds: refreshing never clears a bit,
/// and sets exactly the bits whose probability reaches the threshold.
pub fn refresh_fuzz(cases: usize, seed: u64) -> Result<usize, String> {
    let mut rng = rng(seed);
    for c in 0..cases {
        let k = rng.random_range(1..40);
        let samples = rng.random_range(1..6);
        let v = KnowledgeVocab::from_keys((0..k).map(|i| format!("c{i}")).collect()).unwrap();
        let labels: Vec<PseudoLabelVector> = (0..samples as u64)
            .map(|id| PseudoLabelVector { sample_id: id, bits: (0..k).map(|_| rng.random_bool(0.3)).collect() })
            .collect();
        let mut probs: HashMap<SampleId, Vec<f64>> = HashMap::new();
        for id in 0..samples as u64 {
            if rng.random_bool(0.8) {
                probs.insert(id, (0..k).map(|_| rng.random::<f64>()).collect());
            }
        }
        let threshold = rng.random_range(0.001..0.999);
        let out = refresh_pseudo_labels(&probs, &v, threshold, &labels).map_err(|e| format!("case {c}: {e}"))?;
        for (before, after) in labels.iter().zip(&out) {
            if after.count_ones() < before.count_ones() {
                return Err(format!("case {c}: bit count fell"));
            }
            for i in 0..k {
                let p = probs.get(&before.sample_id).map_or(0.0, |p| p[i]);
                let want = before.bits[i] || (probs.contains_key(&before.sample_id) && p >= threshold);
                if after.bits[i] != want {
                    return Err(format!("case {c}: bit {i} is {}, expected {want}", after.bits[i]));
                }
            }
        }
    }
    Ok(cases)
}

// ---------------------------------------------------------------------------
// Metric reference values and chance level.

use kcl_core::metrics::{alignment, retrieval_eval, uniformity};
use kcl_core::trainer::{encoder_dims, evaluate};
use kcl_core::Direction;
use statrs::distribution::{Binomial, DiscreteCDF};

/// Closed-form metric values, each paired with whether it holds.
pub fn metric_reference_values() -> Vec<(&'static str, bool)> {
    let mut rng = rng(8);
    let z = unit_rows(&mut rng, 25, 6);
    let same = Array2::from_shape_fn((10, 3), |(_, c)| if c == 0 { 1.0 } else { 0.0 });
    let antipodal = ndarray::array![[0.0, 1.0], [0.0, -1.0]];
    let self_r1 = [Direction::T2v, Direction::V2t]
        .into_iter()
        .all(|d| retrieval_eval(z.view(), z.view(), d).unwrap().r1 == 1.0);
    vec![
        ("alignment of identical pairs is 0", alignment(z.view(), z.view(), 2.0).unwrap() == 0.0),
        ("uniformity of coincident points is 0", uniformity(same.view(), 2.0).unwrap() == 0.0),
        (
            "uniformity of an antipodal pair is -8",
            (uniformity(antipodal.view(), 2.0).unwrap() + 8.0).abs() < 1e-12,
        ),
        ("self-retrieval R@1 is 1", self_r1),
    ]
}

pub const CHANCE_SEEDS: u64 = 20;
pub const CHANCE_CONFIDENCE: f64 = 0.99;

/// Pooled top-1 hits of freshly initialized encoders over `CHANCE_SEEDS`
/// corpora, and the central `CHANCE_CONFIDENCE` binomial interval for hits at
/// rate 1/M.
pub fn untrained_hits() -> (u64, u64, u64) {
    let mut hits = 0;
    let mut trials = 0;
    let mut m = 0;
    for seed in 0..CHANCE_SEEDS {
        let corpus = generate_synthetic(&CorpusConfig { num_samples: 200, seed, ..Default::default() }).unwrap();
        let config = TrainConfig { seed, ..Default::default() };
        let vocab = build_vocab(&corpus, config.vocab_size).unwrap();
        let params = EncoderParams::init(encoder_dims(&corpus, &config, &vocab), seed).unwrap();
        let r = evaluate(&corpus, &params, 2.0, 2.0).unwrap();
        m = corpus.len() as u64;
        hits += (r.t2v.r1 * m as f64).round() as u64;
        trials += m;
    }
    let dist = Binomial::new(1.0 / m as f64, trials).unwrap();
    let tail = (1.0 - CHANCE_CONFIDENCE) / 2.0;
    (hits, dist.inverse_cdf(tail), dist.inverse_cdf(1.0 - tail))
}

// ---------------------------------------------------------------------------
// Oracle sweeps shared by the tests and the acceptance target.

use kcl_core::losses::{kcl_triplet_loss, skp_loss};

/// Largest gap between the triplet loss and the double loop, 20 random
/// batches for each size 2..=16.
pub fn triplet_oracle_gap(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for n in 2..=16 {
        for _ in 0..20 {
            let h = rng.random_range(2..10);
            let delta = rng.random_range(0.01..2.0);
            let z_v = unit_rows(&mut rng, n, h);
            let z_t = unit_rows(&mut rng, n, h);
            let got = kcl_triplet_loss(z_v.view(), z_t.view(), delta).unwrap().loss;
            worst = worst.max((got - naive_triplet(&z_v, &z_t, delta)).abs());
        }
    }
    worst
}

/// Largest gap between the concept loss and the direct formula over 200
/// random logit and label blocks.
pub fn skp_oracle_gap(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..8);
        let k = rng.random_range(1..20);
        let logits = Array2::from_shape_fn((n, k), |_| 4.0 * rng.sample::<f64, _>(StandardNormal));
        let labels = Array2::from_shape_fn((n, k), |_| f64::from(u8::from(rng.random_bool(0.3))));
        let got = skp_loss(logits.view(), labels.view()).unwrap().0;
        worst = worst.max((got - naive_skp(&logits, &labels)).abs());
    }
    worst
}

/// 200 queries against memories of 10 to 10,000 entries, half of them on a
/// tie-heavy grid. Returns the number of queries that matched the full sort.
pub fn knn_oracle_sweep(seed: u64) -> Result<usize, String> {
    let mut rng = rng(seed);
    let mut queries = 0;
    for (size, grid) in [(10, true), (300, false), (2_000, true), (10_000, false), (10_000, true)] {
        let dim = 4;
        let entries: Vec<(SampleId, Vec<f64>)> = (0..size as u64)
            .map(|i| (i * 7 % 10_007, if grid { grid_point(&mut rng, dim) } else { gaussian(&mut rng, dim) }))
            .collect();
        let memory = memory_of(&entries, 0);
        for q in 0..40 {
            let query = match q % 3 {
                0 => entries[rng.random_range(0..size)].1.clone(),
                1 => grid_point(&mut rng, dim),
                _ => gaussian(&mut rng, dim),
            };
            let k = rng.random_range(1..=size + 3);
            let got = memory.knn_search(&query, k).map_err(|e| e.to_string())?;
            if got != brute_knn(&entries, &query, k) {
                return Err(format!("size {size}, k {k}: result differs from the full sort"));
            }
            queries += 1;
        }
    }
    Ok(queries)
}
