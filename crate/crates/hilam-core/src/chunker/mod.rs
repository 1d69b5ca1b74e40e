//! Two-stage dynamic-chunking hierarchy over latent-action sequences.
//!
//! The forward pass nests two encode-chunk-?-dechunk-decode stages around an
//! innermost main network. Boundary probabilities come from the cosine
//! dissimilarity of adjacent normalized query/key projections of the encoder
//! features; positions at or above probability 0.5 start a new chunk, and the
//! first position always does. Chunked tokens are the encoder features at
//! boundary indices. Dechunking repeats each processed chunk vector over its
//! segment, scaled by a straight-through confidence whose forward value is 1
//! and whose gradient flows through c_t = b_t p_t + (1-b_t)(1-p_t), which is
//! what lets the boundary predictor learn from the prediction losses.

pub mod train;
pub mod unfold;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::rng::{Rng, Stream};
use crate::tensor::{ParamSet, Tape, Tensor, TensorId, MASK_NEG};

use unfold::{boundary_indices, segment_ids};

/// Hidden width of the per-block MLP, as a multiple of d_model.
const MLP_MULT: usize = 2;

/// Number of chunking stages. The architecture is fixed at two; stage 1
/// chunks the input timeline, stage 2 chunks the stage-1 chunks.
pub const STAGES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkerConfig {
    pub d_model: usize,
    /// Causal blocks per encoder/main/decoder network.
    pub depth: usize,
    /// Target compression ratio per stage; the ratio regularizer steers the
    /// mean boundary rate toward 1/N_s.
    pub n_targets: [f64; STAGES],
    pub lambda_rec: f64,
    pub lambda_ratio: f64,
    pub max_seq_len: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ChunkerConfig {
    fn default() -> Self {
        ChunkerConfig {
            d_model: 64,
            depth: 2,
            n_targets: [4.0, 3.0],
            lambda_rec: 1.0,
            lambda_ratio: 0.03,
            max_seq_len: 128,
            steps: 2500,
            batch_size: 4,
            lr: 3e-4,
        }
    }
}

impl ChunkerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.depth == 0 {
            return Err(Error::Config("chunker: d_model and depth must be positive".into()));
        }
        if self.n_targets.iter().any(|&n| n <= 1.0) {
            return Err(Error::Config(format!(
                "chunker: compression targets must exceed 1, got {:?}",
                self.n_targets
            )));
        }
        if self.lambda_rec < 0.0 || self.lambda_ratio < 0.0 {
            return Err(Error::Config("chunker: loss weights must be non-negative".into()));
        }
        if self.max_seq_len < 4 {
            return Err(Error::Config("chunker: max_seq_len must be at least 4".into()));
        }
        Ok(())
    }
}

/// Trained hierarchy parameters plus the latent width they expect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkerModel {
    pub config: ChunkerConfig,
    pub d_latent: usize,
    pub params: ParamSet,
}

fn init_block(params: &mut ParamSet, prefix: &str, d: usize, rng: &mut Rng) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut mat = |name: &str, rows: usize, cols: usize, rng: &mut Rng| {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal() * scale).collect();
        params.insert(&format!("{prefix}.{name}"), Tensor::new(vec![rows, cols], data).with_grad());
    };
    mat("wq", d, d, rng);
    mat("wk", d, d, rng);
    mat("wv", d, d, rng);
    mat("wo", d, d, rng);
    mat("mlp.w1", d, MLP_MULT * d, rng);
    mat("mlp.w2", MLP_MULT * d, d, rng);
    params.insert(&format!("{prefix}.mlp.b1"), Tensor::zeros(vec![MLP_MULT * d]).with_grad());
    params.insert(&format!("{prefix}.mlp.b2"), Tensor::zeros(vec![d]).with_grad());
    params.insert(&format!("{prefix}.norm1.g"), Tensor::new(vec![d], vec![1.0; d]).with_grad());
    params.insert(&format!("{prefix}.norm2.g"), Tensor::new(vec![d], vec![1.0; d]).with_grad());
}

impl ChunkerModel {
    pub fn init(config: ChunkerConfig, d_latent: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = Rng::new(seed, Stream::Init, 0x43484e4b);
        let mut params = ParamSet::new();

        let pscale = 1.0 / (d_latent as f64).sqrt();
        let in_w: Vec<f64> = (0..d_latent * d).map(|_| rng.normal() * pscale).collect();
        params.insert("in_proj.w", Tensor::new(vec![d_latent, d], in_w).with_grad());
        params.insert("in_proj.b", Tensor::zeros(vec![d]).with_grad());

        for net in ["enc1", "enc2", "main", "dec2", "dec1"] {
            for layer in 0..config.depth {
                init_block(&mut params, &format!("{net}.{layer}"), d, &mut rng);
            }
        }
        for stage in ["bound1", "bound2"] {
            let scale = 1.0 / (d as f64).sqrt();
            for proj in ["wq", "wk"] {
                let data: Vec<f64> = (0..d * d).map(|_| rng.normal() * scale).collect();
                params.insert(&format!("{stage}.{proj}"), Tensor::new(vec![d, d], data).with_grad());
            }
        }

        let oscale = 1.0 / (d as f64).sqrt();
        let out_w: Vec<f64> = (0..d * d_latent).map(|_| rng.normal() * oscale).collect();
        params.insert("out_proj.w", Tensor::new(vec![d, d_latent], out_w).with_grad());
        params.insert("out_proj.b", Tensor::zeros(vec![d_latent]).with_grad());

        Ok(ChunkerModel { config, d_latent, params })
    }
}

fn causal_mask(tape: &mut Tape, len: usize) -> TensorId {
    let mut data = vec![0.0; len * len];
    for r in 0..len {
        for c in r + 1..len {
            data[r * len + c] = MASK_NEG;
        }
    }
    tape.constant(vec![len, len], data)
}

/// One pre-norm causal self-attention block (single head) with a GELU MLP.
fn block_forward(tape: &mut Tape, bound: &Bound, prefix: &str, x: TensorId, mask: TensorId, d: usize) -> TensorId {
    let g1 = bound.get(&format!("{prefix}.norm1.g"));
    let n1 = tape.rms_norm(x);
    let n1 = tape.mul(n1, g1);

    let wq = bound.get(&format!("{prefix}.wq"));
    let wk = bound.get(&format!("{prefix}.wk"));
    let wv = bound.get(&format!("{prefix}.wv"));
    let wo = bound.get(&format!("{prefix}.wo"));
    let q = tape.matmul(n1, wq);
    let k = tape.matmul(n1, wk);
    let v = tape.matmul(n1, wv);
    let scores = tape.matmul_nt(q, k);
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let scores = tape.add(scores, mask);
    let attn = tape.softmax(scores);
    let ctx = tape.matmul(attn, v);
    let proj = tape.matmul(ctx, wo);
    let x = tape.add(x, proj);

    let g2 = bound.get(&format!("{prefix}.norm2.g"));
    let n2 = tape.rms_norm(x);
    let n2 = tape.mul(n2, g2);
    let w1 = bound.get(&format!("{prefix}.mlp.w1"));
    let b1 = bound.get(&format!("{prefix}.mlp.b1"));
    let w2 = bound.get(&format!("{prefix}.mlp.w2"));
    let b2 = bound.get(&format!("{prefix}.mlp.b2"));
    let h = tape.matmul(n2, w1);
    let h = tape.add(h, b1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, w2);
    let h = tape.add(h, b2);
    tape.add(x, h)
}

fn network_forward(tape: &mut Tape, bound: &Bound, net: &str, depth: usize, x: TensorId, d: usize) -> TensorId {
    let len = tape.shape(x)[0];
    let mask = causal_mask(tape, len);
    let mut h = x;
    for layer in 0..depth {
        h = block_forward(tape, bound, &format!("{net}.{layer}"), h, mask, d);
    }
    h
}

/// Boundary probabilities and indicators for one stage.
///
/// p_1 = 1 and p_t = (1 - q̂_{t-1}·k̂_t)/2 for t > 1, where q̂/k̂ are
/// L2-normalized linear projections of the stage features. b_t = 1 iff
/// p_t >= 0.5 (inclusive threshold), so b_1 = 1 always.
pub fn boundary_probs(tape: &mut Tape, features: TensorId, wq: TensorId, wk: TensorId) -> (TensorId, Vec<u8>) {
    let len = tape.shape(features)[0];
    let q = tape.matmul(features, wq);
    let k = tape.matmul(features, wk);
    let qn = tape.l2_normalize(q);
    let kn = tape.l2_normalize(k);

    let one = tape.constant(vec![1, 1], vec![1.0]);
    let p = if len == 1 {
        one
    } else {
        let prev: Vec<usize> = (0..len - 1).collect();
        let next: Vec<usize> = (1..len).collect();
        let q_prev = tape.gather(qn, &prev);
        let k_next = tape.gather(kn, &next);
        let prod = tape.mul(q_prev, k_next);
        let cos = tape.sum_last(prod);
        let rest = tape.affine(cos, -0.5, 0.5);
        tape.concat_rows(&[one, rest])
    };
    let b: Vec<u8> = tape.data(p).iter().map(|&v| u8::from(v >= 0.5)).collect();
    (p, b)
}

/// Select encoder features at boundary indices: the chunked sequence.
pub fn chunk_select(tape: &mut Tape, features: TensorId, b: &[u8]) -> TensorId {
    assert_eq!(b.first(), Some(&1), "chunk_select: first boundary indicator must be 1");
    assert_eq!(tape.shape(features)[0], b.len(), "chunk_select: feature/boundary length mismatch");
    let idx = boundary_indices(b);
    tape.gather(features, &idx)
}

/// Confidence surrogate c_t = b_t p_t + (1-b_t)(1-p_t) as plain values.
pub fn confidence_values(b: &[u8], p: &[f64]) -> Vec<f64> {
    b.iter()
        .zip(p)
        .map(|(&bt, &pt)| if bt == 1 { pt } else { 1.0 - pt })
        .collect()
}

/// Expand a processed chunk sequence back to the stage timeline. Each output
/// row copies its chunk's row exactly (forward multiplier 1); gradients flow
/// through the straight-through confidence c_t = b_t p_t + (1-b_t)(1-p_t).
///
/// With `anchor = Some(c0)` the multiplier becomes the genuinely smooth
/// 1 + c - c0. Anchored at the unperturbed confidence values this function
/// is forward-identical to the straight-through one and its true derivative
/// equals the straight-through gradient, which is what the central
/// finite-difference oracle evaluates.
pub fn dechunk_expand(
    tape: &mut Tape,
    processed: TensorId,
    b: &[u8],
    p: TensorId,
    anchor: Option<&[f64]>,
) -> TensorId {
    let chunks = tape.shape(processed)[0];
    let selected = b.iter().filter(|&&v| v == 1).count();
    assert_eq!(
        chunks, selected,
        "dechunk_expand: {chunks} processed chunks but {selected} boundaries"
    );
    assert_eq!(tape.shape(p), &[b.len(), 1], "dechunk_expand: probability/boundary length mismatch");

    let seg = segment_ids(b);
    let expanded = tape.gather(processed, &seg);

    let b_f64: Vec<f64> = b.iter().map(|&v| f64::from(v)).collect();
    let not_b: Vec<f64> = b.iter().map(|&v| f64::from(1 - v)).collect();
    let b_const = tape.constant(vec![b.len(), 1], b_f64);
    let not_b_const = tape.constant(vec![b.len(), 1], not_b);
    let one_minus_p = tape.affine(p, -1.0, 1.0);
    let on = tape.mul(b_const, p);
    let off = tape.mul(not_b_const, one_minus_p);
    let confidence = tape.add(on, off);
    let ones = tape.constant(vec![b.len(), 1], vec![1.0; b.len()]);
    let multiplier = match anchor {
        None => tape.ste(ones, confidence),
        Some(c0) => {
            assert_eq!(c0.len(), b.len(), "dechunk_expand: anchor length mismatch");
            let c0 = tape.constant(vec![b.len(), 1], c0.to_vec());
            let shift = tape.sub(confidence, c0);
            tape.add(ones, shift)
        }
    };
    tape.mul(expanded, multiplier)
}

/// Frozen confidence values for gradient-check mode, one vector per
/// dechunk site.
#[derive(Clone, Debug)]
pub struct SteAnchor {
    /// Stage-1 confidences, on the input timeline.
    pub c1: Vec<f64>,
    /// Stage-2 confidences, on the stage-1 chunk timeline.
    pub c2: Vec<f64>,
}

/// Everything the forward pass produces, with tape ids for the loss and raw
/// indicator vectors for extraction.
pub struct ForwardTrace {
    /// Per-position boundary probabilities, stage 1 on the input timeline.
    pub p1: TensorId,
    pub b1: Vec<u8>,
    /// Stage 2 lives on the stage-1 chunk timeline.
    pub p2: TensorId,
    pub b2: Vec<u8>,
    /// Chunked tokens: stage-1 and stage-2 encoder features at boundaries.
    pub z1: TensorId,
    pub z2: TensorId,
    /// Next-latent predictions, one row per input position.
    pub predictions: TensorId,
    /// Confidence values at both dechunk sites, for anchored re-evaluation.
    pub anchor: SteAnchor,
}

impl ForwardTrace {
    pub fn lengths(&self) -> [usize; 3] {
        [self.b1.len(), self.b2.len(), self.b2.iter().filter(|&&v| v == 1).count()]
    }
}

/// Full encode-chunk-main-dechunk-decode pass over one latent sequence
/// (rows of `z0` are latent actions). Requires 4 <= len <= max_seq_len.
///
/// `ste_anchor` selects the dechunk confidence mode: `None` is the
/// straight-through production path; `Some` re-evaluates with the smooth
/// anchored multiplier for finite-difference checking.
pub fn forward_on_tape(
    model: &ChunkerModel,
    tape: &mut Tape,
    bound: &Bound,
    z0: TensorId,
    ste_anchor: Option<&SteAnchor>,
) -> Result<ForwardTrace> {
    let len = tape.shape(z0)[0];
    if len < 4 || len > model.config.max_seq_len {
        return Err(Error::Eval(format!(
            "chunker forward: sequence length {len} outside 4..={}",
            model.config.max_seq_len
        )));
    }
    let d = model.config.d_model;
    let depth = model.config.depth;

    let in_w = bound.get("in_proj.w");
    let in_b = bound.get("in_proj.b");
    let lifted = tape.matmul(z0, in_w);
    let x = tape.add(lifted, in_b);

    // Stage 1: encode, predict boundaries, chunk.
    let h1 = network_forward(tape, bound, "enc1", depth, x, d);
    let (p1, b1) = boundary_probs(tape, h1, bound.get("bound1.wq"), bound.get("bound1.wk"));
    let z1 = chunk_select(tape, h1, &b1);

    // Stage 2 nested inside stage 1's main position.
    let h2 = network_forward(tape, bound, "enc2", depth, z1, d);
    let (p2, b2) = boundary_probs(tape, h2, bound.get("bound2.wq"), bound.get("bound2.wk"));
    let z2 = chunk_select(tape, h2, &b2);

    let processed = network_forward(tape, bound, "main", depth, z2, d);

    let anchor = SteAnchor {
        c1: confidence_values(&b1, tape.data(p1)),
        c2: confidence_values(&b2, tape.data(p2)),
    };

    // Dechunk stage 2, residual from its encoder output, decode.
    let up2 = dechunk_expand(tape, processed, &b2, p2, ste_anchor.map(|a| a.c2.as_slice()));
    let up2 = tape.add(up2, h2);
    let zhat1 = network_forward(tape, bound, "dec2", depth, up2, d);

    // Dechunk stage 1, residual, decode, project back to latent width.
    let up1 = dechunk_expand(tape, zhat1, &b1, p1, ste_anchor.map(|a| a.c1.as_slice()));
    let up1 = tape.add(up1, h1);
    let zhat0 = network_forward(tape, bound, "dec1", depth, up1, d);

    let out_w = bound.get("out_proj.w");
    let out_b = bound.get("out_proj.b");
    let proj = tape.matmul(zhat0, out_w);
    let predictions = tape.add(proj, out_b);

    Ok(ForwardTrace { p1, b1, p2, b2, z1, z2, predictions, anchor })
}

#[cfg(test)]
pub(crate) mod tests;
