//! Chunker training objective, training loop, and post-training extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lam::{LatentModel, LatentSequence};
use crate::nn::Bound;
use crate::rng::{Rng, Stream};
use crate::tensor::{AdamState, Tape, TensorId};
use crate::world::{Episode, STATE_DIM};

use super::unfold::{expand_rows, segment_ids, unfold_boundaries};
use super::{forward_on_tape, ChunkerConfig, ChunkerModel, SteAnchor, STAGES};

/// Ratio regularizer value for boundary fraction F and mean probability G
/// against target compression N: N/(N-1) * ((N-1) F G + (1-F)(1-G)).
/// Minimized at F = G = 1/N with value 1 on the F = G diagonal.
pub fn ratio_loss_value(f: f64, g: f64, n: f64) -> f64 {
    n / (n - 1.0) * ((n - 1.0) * f * g + (1.0 - f) * (1.0 - g))
}

/// On-tape ratio loss. F (mean indicator) is a constant; the gradient flows
/// through G = mean(p) only, since the indicators are discrete.
fn ratio_loss_on_tape(tape: &mut Tape, p: TensorId, b: &[u8], n: f64) -> TensorId {
    let f = b.iter().map(|&v| f64::from(v)).sum::<f64>() / b.len() as f64;
    let g = tape.mean(p);
    // N/(N-1) * ((N-1) F G + (1-F)(1-G)) rearranged as an affine map of G.
    let coef = n / (n - 1.0);
    let scale = coef * ((n - 1.0) * f - (1.0 - f));
    let shift = coef * (1.0 - f);
    tape.affine(g, scale, shift)
}

/// Scalar components of one loss evaluation, for logging and evaluation.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub latent: f64,
    pub rec: f64,
    pub ratio: f64,
    /// Mean compression L0/L1 and L1/L2 across the batch.
    pub compression: [f64; STAGES],
}

/// One training-curve row.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub l_latent: f64,
    pub l_rec: f64,
    pub l_ratio: f64,
    pub comp1: f64,
    pub comp2: f64,
}

fn check_alignment(seq: &LatentSequence, episode: &Episode) -> Result<()> {
    if episode.len() != seq.len() + seq.k {
        return Err(Error::Eval(format!(
            "episode {} has {} frames but latent sequence implies {}",
            episode.id,
            episode.len(),
            seq.len() + seq.k
        )));
    }
    Ok(())
}

/// Build the full objective for a batch of latent sequences on one tape:
/// L = L_latent + lambda_rec * L_rec + lambda_ratio * L_ratio.
///
/// L_latent is the mean elementwise L1 between the prediction at position t
/// and the (constant) latent at t+1; the last position has no target and is
/// dropped. L_rec pushes each prediction through the frozen FDM from the
/// frame it would act on and scores the squared error against the true
/// future frame, so its gradient reaches the chunker only through the
/// predictions. L_ratio is summed over both stages.
///
/// Returns the loss node, its scalar components, and the per-sequence
/// confidence anchors; pass those anchors back in `ste_anchors` to evaluate
/// the smooth anchored objective for finite differencing.
pub fn compute_loss(
    model: &ChunkerModel,
    lam: &LatentModel,
    tape: &mut Tape,
    bound: &Bound,
    batch: &[(&LatentSequence, &Episode)],
    ste_anchors: Option<&[SteAnchor]>,
) -> Result<(TensorId, LossParts, Vec<SteAnchor>)> {
    assert!(!batch.is_empty(), "compute_loss: empty batch");
    if let Some(anchors) = ste_anchors {
        assert_eq!(anchors.len(), batch.len(), "compute_loss: anchor/batch length mismatch");
    }
    let lam_bound = Bound::frozen(tape, &lam.params);
    let k = lam.config.k;

    let mut per_seq = Vec::with_capacity(batch.len());
    let mut anchors_out = Vec::with_capacity(batch.len());
    let mut parts = LossParts::default();

    for (i, &(seq, episode)) in batch.iter().enumerate() {
        check_alignment(seq, episode)?;
        let m = seq.len();
        let z0 = tape.constant(vec![m, seq.d_latent], seq.latents.clone());
        let trace = forward_on_tape(model, tape, bound, z0, ste_anchors.map(|a| &a[i]))?;

        // Predictions at positions 0..m-1 target latents 1..m.
        let keep: Vec<usize> = (0..m - 1).collect();
        let preds = tape.gather(trace.predictions, &keep);
        let target_idx: Vec<usize> = (1..m).collect();
        let targets_const = tape.gather(z0, &target_idx);
        let targets = tape.detach(targets_const);
        let l_latent = tape.l1_mean(preds, targets);

        // Prediction at position t is the latent for the frame pair
        // (t+1, t+1+k); feed frame t+1 and score against frame t+1+k.
        let mut current = Vec::with_capacity((m - 1) * STATE_DIM);
        let mut future = Vec::with_capacity((m - 1) * STATE_DIM);
        for t in 0..m - 1 {
            current.extend_from_slice(&episode.states[t + 1]);
            future.extend_from_slice(&episode.states[t + 1 + k]);
        }
        let current = tape.constant(vec![m - 1, STATE_DIM], current);
        let future = tape.constant(vec![m - 1, STATE_DIM], future);
        let reconstructed = lam.fdm_on_tape(tape, &lam_bound, current, preds);
        let l_rec = tape.mse(reconstructed, future);

        let r1 = ratio_loss_on_tape(tape, trace.p1, &trace.b1, model.config.n_targets[0]);
        let r2 = ratio_loss_on_tape(tape, trace.p2, &trace.b2, model.config.n_targets[1]);
        let l_ratio = tape.add(r1, r2);

        let weighted_rec = tape.scale(l_rec, model.config.lambda_rec);
        let weighted_ratio = tape.scale(l_ratio, model.config.lambda_ratio);
        let partial = tape.add(l_latent, weighted_rec);
        let total = tape.add(partial, weighted_ratio);
        per_seq.push(total);

        let [l0, l1, l2] = trace.lengths();
        parts.latent += tape.scalar_value(l_latent);
        parts.rec += tape.scalar_value(l_rec);
        parts.ratio += tape.scalar_value(l_ratio);
        parts.compression[0] += l0 as f64 / l1 as f64;
        parts.compression[1] += l1 as f64 / l2 as f64;
        anchors_out.push(trace.anchor);
    }

    let stacked = tape.concat_rows(&per_seq);
    let loss = tape.mean(stacked);

    let b = batch.len() as f64;
    parts.latent /= b;
    parts.rec /= b;
    parts.ratio /= b;
    parts.compression[0] /= b;
    parts.compression[1] /= b;
    parts.total = tape.scalar_value(loss);
    Ok((loss, parts, anchors_out))
}

/// Pair each latent sequence with its source episode by id.
pub fn align<'a>(
    latents: &'a [LatentSequence],
    episodes: &'a [Episode],
) -> Result<Vec<(&'a LatentSequence, &'a Episode)>> {
    latents
        .iter()
        .map(|seq| {
            episodes
                .iter()
                .find(|e| e.id == seq.episode_id)
                .map(|e| (seq, e))
                .ok_or_else(|| Error::Eval(format!("no episode with id {}", seq.episode_id)))
        })
        .collect()
}

/// Adam on [`compute_loss`] over randomly sampled batches. The LAM stays
/// frozen throughout. Returns the trained model and the training curve.
pub fn train_chunker(
    latents: &[LatentSequence],
    episodes: &[Episode],
    lam: &LatentModel,
    config: ChunkerConfig,
    seed: u64,
) -> Result<(ChunkerModel, Vec<TrainRecord>)> {
    config.validate()?;
    let aligned = align(latents, episodes)?;
    let usable: Vec<&(&LatentSequence, &Episode)> = aligned
        .iter()
        .filter(|(seq, _)| seq.len() >= 4 && seq.len() <= config.max_seq_len)
        .collect();
    if usable.is_empty() {
        return Err(Error::Config("train_chunker: no usable latent sequences".into()));
    }

    let mut model = ChunkerModel::init(config.clone(), lam.config.d_latent, seed)?;
    let mut adam = AdamState::new(&model.params, config.lr);
    let mut data_rng = Rng::new(seed, Stream::Data, 0x43484e4b);
    let mut curve = Vec::with_capacity(config.steps as usize);

    for step in 0..config.steps {
        let batch: Vec<(&LatentSequence, &Episode)> = (0..config.batch_size)
            .map(|_| *usable[data_rng.below(usable.len())])
            .collect();

        let mut tape = Tape::new();
        let bound = Bound::trainable(&mut tape, &model.params);
        let (loss, parts, _) = compute_loss(&model, lam, &mut tape, &bound, &batch, None)?;
        if !parts.total.is_finite() {
            return Err(Error::Diverged { step, what: "chunker loss".into() });
        }
        curve.push(TrainRecord {
            step,
            loss: parts.total,
            l_latent: parts.latent,
            l_rec: parts.rec,
            l_ratio: parts.ratio,
            comp1: parts.compression[0],
            comp2: parts.compression[1],
        });

        let grads = tape.backward(loss);
        adam.step(&mut model.params, &grads.by_name(&tape));
    }

    Ok((model, curve))
}

// ── extraction ───────────────────────────────────────────────────────

/// Frozen-model outputs for one latent sequence: boundary patterns on both
/// timelines plus the chunk-level token matrices. Everything needed to
/// rebuild per-timestep skill sequences without re-running the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub episode_id: u64,
    pub d_model: usize,
    /// Stage-1 boundaries over the input timeline.
    pub b1: Vec<u8>,
    /// Stage-2 boundaries over the stage-1 chunk timeline.
    pub b2: Vec<u8>,
    /// Chunked tokens, flat [L1 x d_model] and [L2 x d_model].
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
}

/// Per-timestep skill sequence at one stage: segment ids from the unfolded
/// boundaries and the chunk vector repeated over each segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillSequence {
    pub stage: usize,
    pub d_model: usize,
    /// 0-based segment id per input position; non-decreasing, starts at 0,
    /// increments exactly where the unfolded boundary is 1.
    pub segment_ids: Vec<usize>,
    /// Flat [len x d_model]; row t equals the chunk vector of segment t.
    pub vectors: Vec<f64>,
}

impl SkillSequence {
    pub fn len(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_ids.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.vectors[t * self.d_model..(t + 1) * self.d_model]
    }
}

/// Run the frozen chunker over one latent sequence.
pub fn chunk_sequence(model: &ChunkerModel, seq: &LatentSequence) -> Result<ChunkRecord> {
    let mut tape = Tape::new();
    let bound = Bound::frozen(&mut tape, &model.params);
    let z0 = tape.constant(vec![seq.len(), seq.d_latent], seq.latents.clone());
    let trace = forward_on_tape(model, &mut tape, &bound, z0, None)?;
    Ok(ChunkRecord {
        episode_id: seq.episode_id,
        d_model: model.config.d_model,
        b1: trace.b1.clone(),
        b2: trace.b2.clone(),
        z1: tape.data(trace.z1).to_vec(),
        z2: tape.data(trace.z2).to_vec(),
    })
}

/// Frozen-model next-latent predictions for one sequence, flat [len x d_l].
pub fn predict_next_latents(model: &ChunkerModel, seq: &LatentSequence) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = Bound::frozen(&mut tape, &model.params);
    let z0 = tape.constant(vec![seq.len(), seq.d_latent], seq.latents.clone());
    let trace = forward_on_tape(model, &mut tape, &bound, z0, None)?;
    Ok(tape.data(trace.predictions).to_vec())
}

impl ChunkRecord {
    /// Boundary pattern of `stage` expressed on the input timeline.
    pub fn unfolded_boundaries(&self, stage: usize) -> Result<Vec<u8>> {
        match stage {
            1 => Ok(self.b1.clone()),
            2 => unfold_boundaries(&self.b1, &self.b2).map(|(_, u2)| u2),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {stage}"))),
        }
    }

    /// Expand chunk vectors of `stage` to the per-timestep skill sequence.
    pub fn skill_sequence(&self, stage: usize) -> Result<SkillSequence> {
        let unfolded = self.unfolded_boundaries(stage)?;
        let chunks = match stage {
            1 => &self.z1,
            _ => &self.z2,
        };
        let seg = segment_ids(&unfolded);
        let vectors = expand_rows(chunks, self.d_model, &seg);
        Ok(SkillSequence { stage, d_model: self.d_model, segment_ids: seg, vectors })
    }
}

/// Extract the per-timestep skill sequence for one latent sequence at the
/// requested stage (1 or 2).
pub fn extract_skill_sequence(model: &ChunkerModel, seq: &LatentSequence, stage: usize) -> Result<SkillSequence> {
    if !(1..=2).contains(&stage) {
        return Err(Error::Config(format!("extract_skill_sequence: stage must be 1 or 2, got {stage}")));
    }
    chunk_sequence(model, seq)?.skill_sequence(stage)
}
