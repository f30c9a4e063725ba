//! Toy face-embedding networks and cosine verification.
//!
//! Two small seed-deterministic architectures stand in for pretrained
//! recognition models: a stack of strided convolutions with tanh
//! nonlinearities, global average pooling, a linear head to a 128-d
//! embedding, and L2 normalization. Forward passes cache activations so
//! the exact reverse-mode image gradient is available to the attacks.
//! Verification declares two images the same identity when the embedding
//! cosine exceeds a threshold calibrated to maximize balanced accuracy.

mod io;

pub use io::{load_weights, save_weights};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, normal, seeded};
use crate::{Error, Result};

/// Embedding dimensionality shared by both architectures.
pub const EMBED_DIM: usize = 128;

/// Smallest accepted input side: four stride-2 stages need at least this
/// much to keep every feature map nonempty.
pub const MIN_INPUT_SIDE: usize = 8;

// ASCII tags "EMBARCHA" / "EMBARCHB" for the weight streams.
const STREAM_EMBED_A: u64 = 0x454d_4241_5243_4841;
const STREAM_EMBED_B: u64 = 0x454d_4241_5243_4842;

/// Architecture selector: two fixed conv stacks of different depth and
/// kernel mix, standing in for distinct recognition backbones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchId {
    A,
    B,
}

/// One convolution layer: square kernel, zero padding (kernel-1)/2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Fixed layer lists; these define the architectures exactly.
pub fn conv_layers(arch: ArchId) -> &'static [ConvSpec] {
    const A: [ConvSpec; 3] = [
        ConvSpec { in_ch: 3, out_ch: 8, kernel: 3, stride: 2 },
        ConvSpec { in_ch: 8, out_ch: 16, kernel: 3, stride: 2 },
        ConvSpec { in_ch: 16, out_ch: 32, kernel: 3, stride: 2 },
    ];
    const B: [ConvSpec; 4] = [
        ConvSpec { in_ch: 3, out_ch: 6, kernel: 5, stride: 2 },
        ConvSpec { in_ch: 6, out_ch: 12, kernel: 3, stride: 2 },
        ConvSpec { in_ch: 12, out_ch: 12, kernel: 3, stride: 1 },
        ConvSpec { in_ch: 12, out_ch: 24, kernel: 5, stride: 2 },
    ];
    match arch {
        ArchId::A => &A,
        ArchId::B => &B,
    }
}

fn conv_weight_len(s: &ConvSpec) -> usize {
    s.out_ch * s.in_ch * s.kernel * s.kernel
}

/// Total flat weight count: per-layer kernels and biases, then the linear
/// head's matrix and bias.
pub fn weight_count(arch: ArchId) -> usize {
    let specs = conv_layers(arch);
    let conv: usize = specs.iter().map(|s| conv_weight_len(s) + s.out_ch).sum();
    conv + EMBED_DIM * specs.last().unwrap().out_ch + EMBED_DIM
}

/// A frozen embedding network. Weights live in one flat array in layer
/// order: for each conv, kernels indexed [out][in][ky][kx] then biases;
/// finally the linear head's rows then its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub arch: ArchId,
    pub seed: u64,
    pub(crate) weights: Vec<f64>,
}

impl EmbeddingModel {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Builds a seed-deterministic model. Kernel entries are drawn
/// N(0, 1/sqrt(fan_in)) and biases N(0, 0.05), in flat-array order.
pub fn build_toy_model(arch: ArchId, seed: u64) -> EmbeddingModel {
    let tag = match arch {
        ArchId::A => STREAM_EMBED_A,
        ArchId::B => STREAM_EMBED_B,
    };
    let mut rng = seeded(derive_seed(seed, tag));
    let specs = conv_layers(arch);
    let mut weights = Vec::with_capacity(weight_count(arch));
    for s in specs {
        let scale = 1.0 / ((s.in_ch * s.kernel * s.kernel) as f64).sqrt();
        for _ in 0..conv_weight_len(s) {
            weights.push(normal(&mut rng) * scale);
        }
        for _ in 0..s.out_ch {
            weights.push(normal(&mut rng) * 0.05);
        }
    }
    let last = specs.last().unwrap().out_ch;
    let scale = 1.0 / (last as f64).sqrt();
    for _ in 0..EMBED_DIM * last {
        weights.push(normal(&mut rng) * scale);
    }
    for _ in 0..EMBED_DIM {
        weights.push(normal(&mut rng) * 0.05);
    }
    EmbeddingModel { arch, seed, weights }
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    arch: ArchId,
    seed: u64,
    input_hw: (usize, usize),
    /// Input scaled to [0, 1], channel-first.
    scaled: Array3<f64>,
    /// Post-tanh activations per conv layer, channel-first.
    activations: Vec<Array3<f64>>,
    /// Pre-normalization embedding and its norm.
    prenorm: Vec<f64>,
    norm: f64,
}

fn out_dim(n: usize, k: usize, s: usize) -> usize {
    let p = (k - 1) / 2;
    (n + 2 * p - k) / s + 1
}

/// Forward conv + tanh, channel-first input [c][y][x].
fn conv_forward(input: &Array3<f64>, s: &ConvSpec, kernels: &[f64], bias: &[f64]) -> Array3<f64> {
    let (_, h, w) = input.dim();
    let (ho, wo) = (out_dim(h, s.kernel, s.stride), out_dim(w, s.kernel, s.stride));
    let p = ((s.kernel - 1) / 2) as isize;
    let k = s.kernel;
    let mut out = Array3::zeros((s.out_ch, ho, wo));
    for oc in 0..s.out_ch {
        for oy in 0..ho {
            let iy0 = (oy * s.stride) as isize - p;
            for ox in 0..wo {
                let ix0 = (ox * s.stride) as isize - p;
                let mut acc = bias[oc];
                for ic in 0..s.in_ch {
                    let kbase = ((oc * s.in_ch) + ic) * k * k;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += kernels[kbase + ky * k + kx]
                                * input[[ic, iy as usize, ix as usize]];
                        }
                    }
                }
                out[[oc, oy, ox]] = acc.tanh();
            }
        }
    }
    out
}

/// Adjoint of [`conv_forward`]: scatters d(pre-tanh) back to the input.
fn conv_backward_input(
    dpre: &Array3<f64>,
    s: &ConvSpec,
    kernels: &[f64],
    input_hw: (usize, usize),
) -> Array3<f64> {
    let (h, w) = input_hw;
    let (_, ho, wo) = dpre.dim();
    let p = ((s.kernel - 1) / 2) as isize;
    let k = s.kernel;
    let mut dinput = Array3::zeros((s.in_ch, h, w));
    for oc in 0..s.out_ch {
        for oy in 0..ho {
            let iy0 = (oy * s.stride) as isize - p;
            for ox in 0..wo {
                let g = dpre[[oc, oy, ox]];
                if g == 0.0 {
                    continue;
                }
                let ix0 = (ox * s.stride) as isize - p;
                for ic in 0..s.in_ch {
                    let kbase = ((oc * s.in_ch) + ic) * k * k;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dinput[[ic, iy as usize, ix as usize]] +=
                                kernels[kbase + ky * k + kx] * g;
                        }
                    }
                }
            }
        }
    }
    dinput
}

fn check_input(image: &Array3<f64>) -> Result<(usize, usize)> {
    let (h, w, ch) = image.dim();
    if ch != 3 {
        return Err(Error::dim("image channels", 3usize, ch));
    }
    if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
        return Err(Error::dim(
            "image side",
            format!("at least {MIN_INPUT_SIDE}"),
            format!("{h}x{w}"),
        ));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("embed", "non-finite pixel value"));
    }
    Ok((h, w))
}

/// Runs the network on an H×W×3 image in [0, 255] color units. Returns the
/// unit-norm embedding and the activation cache for [`embed_backward`].
pub fn embed(model: &EmbeddingModel, image: &Array3<f64>) -> Result<(Vec<f64>, EmbedCache)> {
    let (h, w) = check_input(image)?;
    let specs = conv_layers(model.arch);
    let mut scaled = Array3::zeros((3, h, w));
    for r in 0..h {
        for c in 0..w {
            for k in 0..3 {
                scaled[[k, r, c]] = image[[r, c, k]] / 255.0;
            }
        }
    }

    let mut activations = Vec::with_capacity(specs.len());
    let mut offset = 0;
    {
        let mut cur = &scaled;
        for s in specs {
            let kn = conv_weight_len(s);
            let kernels = &model.weights[offset..offset + kn];
            let bias = &model.weights[offset + kn..offset + kn + s.out_ch];
            offset += kn + s.out_ch;
            activations.push(conv_forward(cur, s, kernels, bias));
            cur = activations.last().unwrap();
        }
    }

    let last = activations.last().unwrap();
    let (c_last, ho, wo) = last.dim();
    let inv_area = 1.0 / (ho * wo) as f64;
    let mut pooled = vec![0.0; c_last];
    for c in 0..c_last {
        let mut acc = 0.0;
        for y in 0..ho {
            for x in 0..wo {
                acc += last[[c, y, x]];
            }
        }
        pooled[c] = acc * inv_area;
    }

    let wmat = &model.weights[offset..offset + EMBED_DIM * c_last];
    let bias = &model.weights[offset + EMBED_DIM * c_last..];
    let mut prenorm = vec![0.0; EMBED_DIM];
    for d in 0..EMBED_DIM {
        let mut acc = bias[d];
        let row = &wmat[d * c_last..(d + 1) * c_last];
        for c in 0..c_last {
            acc += row[c] * pooled[c];
        }
        prenorm[d] = acc;
    }
    let norm = prenorm.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-15 {
        return Err(Error::ZeroVector);
    }
    let embedding = prenorm.iter().map(|v| v / norm).collect();
    Ok((
        embedding,
        EmbedCache {
            arch: model.arch,
            seed: model.seed,
            input_hw: (h, w),
            scaled,
            activations,
            prenorm,
            norm,
        },
    ))
}

/// Exact reverse-mode gradient of the embedding w.r.t. the input image, in
/// color units (the internal /255 scaling is folded back in).
pub fn embed_backward(
    model: &EmbeddingModel,
    cache: &EmbedCache,
    dl_dembedding: &[f64],
) -> Result<Array3<f64>> {
    if cache.arch != model.arch || cache.seed != model.seed {
        return Err(Error::validation(
            "embed_backward",
            "cache does not come from this model",
        ));
    }
    if dl_dembedding.len() != EMBED_DIM {
        return Err(Error::dim("embedding gradient", EMBED_DIM, dl_dembedding.len()));
    }
    let specs = conv_layers(model.arch);

    // Through L2 normalization: y = e/|e|, de = (g - y (y.g)) / |e|.
    let norm = cache.norm;
    let y: Vec<f64> = cache.prenorm.iter().map(|v| v / norm).collect();
    let ydotg: f64 = y.iter().zip(dl_dembedding).map(|(a, b)| a * b).sum();
    let dprenorm: Vec<f64> = dl_dembedding
        .iter()
        .zip(&y)
        .map(|(g, yi)| (g - yi * ydotg) / norm)
        .collect();

    // Linear head.
    let last = cache.activations.last().unwrap();
    let (c_last, ho, wo) = last.dim();
    let conv_total: usize = specs.iter().map(|s| conv_weight_len(s) + s.out_ch).sum();
    let wmat = &model.weights[conv_total..conv_total + EMBED_DIM * c_last];
    let mut dpooled = vec![0.0; c_last];
    for d in 0..EMBED_DIM {
        let g = dprenorm[d];
        let row = &wmat[d * c_last..(d + 1) * c_last];
        for c in 0..c_last {
            dpooled[c] += row[c] * g;
        }
    }

    // Global average pool spreads gradient uniformly.
    let inv_area = 1.0 / (ho * wo) as f64;
    let mut dpost = Array3::zeros((c_last, ho, wo));
    for c in 0..c_last {
        let g = dpooled[c] * inv_area;
        for yx in 0..ho {
            for x in 0..wo {
                dpost[[c, yx, x]] = g;
            }
        }
    }

    // Conv stack in reverse; tanh' = 1 - post^2.
    let mut offsets = Vec::with_capacity(specs.len());
    let mut off = 0;
    for s in specs {
        offsets.push(off);
        off += conv_weight_len(s) + s.out_ch;
    }
    for (li, s) in specs.iter().enumerate().rev() {
        let post = &cache.activations[li];
        let mut dpre = dpost;
        for (dp, a) in dpre.iter_mut().zip(post.iter()) {
            *dp *= 1.0 - a * a;
        }
        let input_hw = if li == 0 {
            cache.input_hw
        } else {
            let (_, hh, ww) = cache.activations[li - 1].dim();
            (hh, ww)
        };
        let kernels = &model.weights[offsets[li]..offsets[li] + conv_weight_len(s)];
        dpost = conv_backward_input(&dpre, s, kernels, input_hw);
    }

    // Undo channel-first layout and the /255 input scaling.
    let (h, w) = cache.input_hw;
    let mut dimage = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            for k in 0..3 {
                dimage[[r, c, k]] = dpost[[k, r, c]] / 255.0;
            }
        }
    }
    Ok(dimage)
}

/// Cosine similarity of two embeddings; errors on a zero vector.
pub fn cosine_similarity(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::dim("embedding length", e1.len(), e2.len()));
    }
    let n1 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = e2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = e1.iter().zip(e2).map(|(a, b)| a * b).sum();
    Ok(dot / (n1 * n2))
}

/// Same-identity decision: true iff the embedding cosine exceeds delta.
pub fn verify(
    model: &EmbeddingModel,
    x_a: &Array3<f64>,
    x_b: &Array3<f64>,
    delta: f64,
) -> Result<bool> {
    if !(-1.0 < delta && delta < 1.0) {
        return Err(Error::validation(
            "verify",
            format!("delta must lie in (-1, 1), got {delta}"),
        ));
    }
    let (ea, _) = embed(model, x_a)?;
    let (eb, _) = embed(model, x_b)?;
    Ok(cosine_similarity(&ea, &eb)? > delta)
}

/// Calibrated decision threshold plus the rates achieved on the
/// calibration set. `accuracy` is balanced accuracy, the quantity the
/// calibration maximizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationThreshold {
    pub delta: f64,
    pub accuracy: f64,
    pub false_accept_rate: f64,
    pub false_reject_rate: f64,
    pub n_same: usize,
    pub n_diff: usize,
}

const MIN_CALIBRATION_PAIRS: usize = 50;

/// Picks the threshold maximizing balanced accuracy over all midpoints of
/// the pooled sorted scores; ties go to the smallest candidate.
pub fn calibrate_from_scores(
    same_scores: &[f64],
    diff_scores: &[f64],
) -> Result<VerificationThreshold> {
    if same_scores.len() < MIN_CALIBRATION_PAIRS {
        return Err(Error::InsufficientPairs {
            kind: "same-identity".to_string(),
            required: MIN_CALIBRATION_PAIRS,
            got: same_scores.len(),
        });
    }
    if diff_scores.len() < MIN_CALIBRATION_PAIRS {
        return Err(Error::InsufficientPairs {
            kind: "different-identity".to_string(),
            required: MIN_CALIBRATION_PAIRS,
            got: diff_scores.len(),
        });
    }
    let mut same = same_scores.to_vec();
    let mut diff = diff_scores.to_vec();
    same.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    diff.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let mut pooled: Vec<f64> = same.iter().chain(diff.iter()).copied().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));

    let n_same = same.len() as f64;
    let n_diff = diff.len() as f64;
    let balanced = |m: f64| -> f64 {
        // Accept iff score > m; sorted arrays give the counts directly.
        let same_gt = same.len() - same.partition_point(|&s| s <= m);
        let diff_le = diff.partition_point(|&s| s <= m);
        0.5 * (same_gt as f64 / n_same + diff_le as f64 / n_diff)
    };
    let mut best_delta = f64::NAN;
    let mut best_acc = f64::NEG_INFINITY;
    for i in 0..pooled.len() - 1 {
        let m = 0.5 * (pooled[i] + pooled[i + 1]);
        let acc = balanced(m);
        if acc > best_acc {
            best_acc = acc;
            best_delta = m;
        }
    }
    // Degenerate corner: scores exactly at +/-1 would put the midpoint on
    // the closed boundary; nudge inside the open interval.
    let delta = best_delta.clamp(-1.0 + 1e-9, 1.0 - 1e-9);
    let far = diff.len() - diff.partition_point(|&s| s <= delta);
    let frr = same.partition_point(|&s| s <= delta);
    Ok(VerificationThreshold {
        delta,
        accuracy: balanced(delta),
        false_accept_rate: far as f64 / n_diff,
        false_reject_rate: frr as f64 / n_same,
        n_same: same.len(),
        n_diff: diff.len(),
    })
}

/// Embeds every pair and calibrates on the resulting cosines. Requires at
/// least 50 pairs of each kind.
pub fn calibrate_threshold(
    model: &EmbeddingModel,
    same_pairs: &[(Array3<f64>, Array3<f64>)],
    diff_pairs: &[(Array3<f64>, Array3<f64>)],
) -> Result<VerificationThreshold> {
    let score = |pairs: &[(Array3<f64>, Array3<f64>)]| -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|(a, b)| {
                let (ea, _) = embed(model, a)?;
                let (eb, _) = embed(model, b)?;
                cosine_similarity(&ea, &eb)
            })
            .collect()
    };
    calibrate_from_scores(&score(same_pairs)?, &score(diff_pairs)?)
}
