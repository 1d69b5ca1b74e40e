//! Hierarchical policy (high level predicts a latent skill, low level
//! predicts a latent action, later a real action) pretrained on chunker
//! pseudo-labels, plus the flat single-network baseline used by the
//! ablations.
//!
//! Pretraining supervises the high level with L1 to the unfolded skill
//! vectors and the low level with L1 to the stage-chosen latent-action
//! vectors, conditioning the low level on the high level's detached
//! prediction. Fine-tuning freezes the high level, swaps in a fresh action
//! head on the warm low-level trunk, and minimizes MSE to demonstrated
//! actions.

use serde::{Deserialize, Serialize};

use crate::chunker::train::ChunkRecord;
use crate::error::{Error, Result};
use crate::lam::LatentSequence;
use crate::nn::Bound;
use crate::rng::{Rng, Stream};
use crate::tensor::{AdamState, ParamSet, Tape, Tensor, TensorId};
use crate::world::{Episode, Policy, WorldState, ACTION_DIM, STATE_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub task_embed_dim: usize,
    /// Hidden width of the flat baseline's two hidden layers, sized so its
    /// parameter count stays within 1.3x of the hierarchical pair.
    pub flat_hidden: usize,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Condition the low level on ground-truth pseudo-skills instead of the
    /// high level's detached prediction during pretraining.
    pub condition_on_gt_skills: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: 64,
            task_embed_dim: 16,
            flat_hidden: 88,
            pretrain_steps: 4000,
            finetune_steps: 4000,
            batch_size: 256,
            lr: 1e-3,
            condition_on_gt_skills: false,
        }
    }
}

/// Which chunker stages feed the two policies: skills from stage 1 or 2,
/// latent actions from stage 0 (the raw latents) or 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stages {
    pub skill: usize,
    pub action: usize,
}

impl Default for Stages {
    fn default() -> Self {
        Stages { skill: 2, action: 0 }
    }
}

impl Stages {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.skill) {
            return Err(Error::Config(format!("skill_stage must be 1 or 2, got {}", self.skill)));
        }
        if self.action > 1 {
            return Err(Error::Config(format!("action_stage must be 0 or 1, got {}", self.action)));
        }
        if self.skill <= self.action {
            return Err(Error::Config(format!(
                "skill_stage ({}) must exceed action_stage ({})",
                self.skill, self.action
            )));
        }
        Ok(())
    }
}

/// Flattened pseudo-label rows: one row per latent timestep of every
/// pretraining episode.
#[derive(Clone, Debug, Default)]
pub struct PolicyDataset {
    pub n_tasks: usize,
    pub skill_dim: usize,
    pub action_dim: usize,
    pub obs: Vec<f64>,
    pub task_ids: Vec<usize>,
    pub skills: Vec<f64>,
    pub action_latents: Vec<f64>,
}

impl PolicyDataset {
    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }

    /// Pair episodes with their latent sequences and chunk records and
    /// unfold the requested stages into per-timestep supervision rows.
    /// Observation at latent index t is the state at frame t.
    pub fn build(
        episodes: &[Episode],
        latents: &[LatentSequence],
        records: &[ChunkRecord],
        stages: Stages,
        n_tasks: usize,
    ) -> Result<Self> {
        stages.validate()?;
        let mut ds = PolicyDataset { n_tasks, ..PolicyDataset::default() };
        for (seq, record) in latents.iter().zip(records) {
            if seq.episode_id != record.episode_id {
                return Err(Error::Eval(format!(
                    "latents for episode {} paired with chunk record {}",
                    seq.episode_id, record.episode_id
                )));
            }
            let episode = episodes
                .iter()
                .find(|e| e.id == seq.episode_id)
                .ok_or_else(|| Error::Eval(format!("no episode with id {}", seq.episode_id)))?;

            let skill_seq = record.skill_sequence(stages.skill)?;
            if skill_seq.len() != seq.len() {
                return Err(Error::Eval(format!(
                    "episode {}: skill sequence length {} != latent length {}",
                    seq.episode_id,
                    skill_seq.len(),
                    seq.len()
                )));
            }
            let action_rows: Vec<f64> = match stages.action {
                0 => seq.latents.clone(),
                _ => record.skill_sequence(1)?.vectors,
            };
            let action_dim = action_rows.len() / seq.len();

            ds.skill_dim = skill_seq.d_model;
            ds.action_dim = action_dim;
            for t in 0..seq.len() {
                ds.obs.extend_from_slice(&episode.states[t]);
                ds.task_ids.push(episode.task_id);
                ds.skills.extend_from_slice(&skill_seq.vectors[t * skill_seq.d_model..(t + 1) * skill_seq.d_model]);
                ds.action_latents.extend_from_slice(&action_rows[t * action_dim..(t + 1) * action_dim]);
            }
        }
        if ds.is_empty() {
            return Err(Error::Config("policy dataset: no rows".into()));
        }
        Ok(ds)
    }
}

// ── high-level policy ────────────────────────────────────────────────

/// Maps [observation ; task embedding] to a latent skill vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighPolicy {
    pub n_tasks: usize,
    pub task_embed_dim: usize,
    pub hidden: usize,
    pub skill_dim: usize,
    pub params: ParamSet,
}

impl HighPolicy {
    pub fn init(n_tasks: usize, skill_dim: usize, config: &PolicyConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed, Stream::Init, 0x4849);
        let mut params = ParamSet::new();
        let ed = config.task_embed_dim;
        let emb: Vec<f64> = (0..n_tasks * ed).map(|_| rng.normal() * 0.1).collect();
        params.insert("task_embed", Tensor::new(vec![n_tasks, ed], emb).with_grad());
        let dims = [STATE_DIM + ed, config.hidden, skill_dim];
        for i in 0..2 {
            let scale = 1.0 / (dims[i] as f64).sqrt();
            let w: Vec<f64> = (0..dims[i] * dims[i + 1]).map(|_| rng.normal() * scale).collect();
            params.insert(&format!("high.w{i}"), Tensor::new(vec![dims[i], dims[i + 1]], w).with_grad());
            params.insert(&format!("high.b{i}"), Tensor::zeros(vec![dims[i + 1]]).with_grad());
        }
        HighPolicy { n_tasks, task_embed_dim: config.task_embed_dim, hidden: config.hidden, skill_dim, params }
    }

    /// Batched forward: obs [B, 4] + task ids -> skills [B, skill_dim].
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, obs: TensorId, task_ids: &[usize]) -> TensorId {
        let emb = tape.gather(bound.get("task_embed"), task_ids);
        let x = tape.concat_cols(&[obs, emb]);
        let h = tape.matmul(x, bound.get("high.w0"));
        let h = tape.add(h, bound.get("high.b0"));
        let h = tape.tanh(h);
        let out = tape.matmul(h, bound.get("high.w1"));
        tape.add(out, bound.get("high.b1"))
    }

    /// Single-state skill prediction.
    pub fn predict(&self, state: &WorldState, task_id: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = Bound::frozen(&mut tape, &self.params);
        let obs = tape.constant(vec![1, STATE_DIM], state.observation().to_vec());
        let z = self.forward(&mut tape, &bound, obs, &[task_id]);
        tape.data(z).to_vec()
    }
}

// ── low-level policy ─────────────────────────────────────────────────

/// Which output head is wired to the shared trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActiveHead {
    /// Pretraining: predict the latent action.
    Latent,
    /// Fine-tuned: predict the executable action.
    Action,
}

/// Maps [observation ; skill] through a shared trunk to either the latent
/// head (pretraining) or the action head (fine-tuning / execution).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowPolicy {
    pub skill_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub active_head: ActiveHead,
    pub params: ParamSet,
}

impl LowPolicy {
    pub fn init(skill_dim: usize, latent_dim: usize, config: &PolicyConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed, Stream::Init, 0x4c4f);
        let mut params = ParamSet::new();
        let in_dim = STATE_DIM + skill_dim;
        let h = config.hidden;
        let scale = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * h).map(|_| rng.normal() * scale).collect();
        params.insert("low.trunk.w", Tensor::new(vec![in_dim, h], w).with_grad());
        params.insert("low.trunk.b", Tensor::zeros(vec![h]).with_grad());
        let hscale = 1.0 / (h as f64).sqrt();
        let wl: Vec<f64> = (0..h * latent_dim).map(|_| rng.normal() * hscale).collect();
        params.insert("low.latent_head.w", Tensor::new(vec![h, latent_dim], wl).with_grad());
        params.insert("low.latent_head.b", Tensor::zeros(vec![latent_dim]).with_grad());
        let wa: Vec<f64> = (0..h * ACTION_DIM).map(|_| rng.normal() * hscale).collect();
        params.insert("low.action_head.w", Tensor::new(vec![h, ACTION_DIM], wa).with_grad());
        params.insert("low.action_head.b", Tensor::zeros(vec![ACTION_DIM]).with_grad());
        LowPolicy { skill_dim, latent_dim, hidden: h, active_head: ActiveHead::Latent, params }
    }

    /// Replace the action head with fresh weights (start of fine-tuning).
    pub fn reinit_action_head(&mut self, seed: u64) {
        let mut rng = Rng::new(seed, Stream::Init, 0x4654);
        let hscale = 1.0 / (self.hidden as f64).sqrt();
        let w = self.params.get_mut("low.action_head.w");
        for v in &mut w.data {
            *v = rng.normal() * hscale;
        }
        let b = self.params.get_mut("low.action_head.b");
        b.data.fill(0.0);
    }

    fn trunk(&self, tape: &mut Tape, bound: &Bound, obs: TensorId, skills: TensorId) -> TensorId {
        let x = tape.concat_cols(&[obs, skills]);
        let h = tape.matmul(x, bound.get("low.trunk.w"));
        let h = tape.add(h, bound.get("low.trunk.b"));
        tape.tanh(h)
    }

    pub fn forward_latent(&self, tape: &mut Tape, bound: &Bound, obs: TensorId, skills: TensorId) -> TensorId {
        let h = self.trunk(tape, bound, obs, skills);
        let out = tape.matmul(h, bound.get("low.latent_head.w"));
        tape.add(out, bound.get("low.latent_head.b"))
    }

    pub fn forward_action(&self, tape: &mut Tape, bound: &Bound, obs: TensorId, skills: TensorId) -> TensorId {
        let h = self.trunk(tape, bound, obs, skills);
        let out = tape.matmul(h, bound.get("low.action_head.w"));
        tape.add(out, bound.get("low.action_head.b"))
    }
}

/// Deterministic action for one state: a_t = low(o_t, high(o_t, task)).
/// The action head must be active.
pub fn act(high: &HighPolicy, low: &LowPolicy, state: &WorldState, task_id: usize) -> Result<[f64; ACTION_DIM]> {
    if low.active_head != ActiveHead::Action {
        return Err(Error::Config("act: low-level policy still has the latent head active".into()));
    }
    let mut tape = Tape::new();
    let high_bound = Bound::frozen(&mut tape, &high.params);
    let low_bound = Bound::frozen(&mut tape, &low.params);
    let obs = tape.constant(vec![1, STATE_DIM], state.observation().to_vec());
    let skill = high.forward(&mut tape, &high_bound, obs, &[task_id]);
    let a = low.forward_action(&mut tape, &low_bound, obs, skill);
    let d = tape.data(a);
    Ok([d[0], d[1]])
}

/// Hierarchical pair wrapped for rollouts.
pub struct HierarchicalPolicy<'a> {
    pub high: &'a HighPolicy,
    pub low: &'a LowPolicy,
}

impl Policy for HierarchicalPolicy<'_> {
    fn act(&mut self, state: &WorldState, task_id: usize) -> [f64; 2] {
        act(self.high, self.low, state, task_id).expect("hierarchical rollout: action head inactive")
    }
}

// ── flat baseline ────────────────────────────────────────────────────

/// Single network [observation ; task embedding] -> latent (pretraining) or
/// action (fine-tuning); no skill conditioning. Two hidden layers sized for
/// parameter parity with the hierarchical pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatPolicy {
    pub n_tasks: usize,
    pub task_embed_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub active_head: ActiveHead,
    pub params: ParamSet,
}

impl FlatPolicy {
    pub fn init(n_tasks: usize, latent_dim: usize, config: &PolicyConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed, Stream::Init, 0x464c);
        let mut params = ParamSet::new();
        let ed = config.task_embed_dim;
        let f = config.flat_hidden;
        let emb: Vec<f64> = (0..n_tasks * ed).map(|_| rng.normal() * 0.1).collect();
        params.insert("task_embed", Tensor::new(vec![n_tasks, ed], emb).with_grad());
        let dims = [STATE_DIM + ed, f, f];
        for i in 0..2 {
            let scale = 1.0 / (dims[i] as f64).sqrt();
            let w: Vec<f64> = (0..dims[i] * dims[i + 1]).map(|_| rng.normal() * scale).collect();
            params.insert(&format!("flat.w{i}"), Tensor::new(vec![dims[i], dims[i + 1]], w).with_grad());
            params.insert(&format!("flat.b{i}"), Tensor::zeros(vec![dims[i + 1]]).with_grad());
        }
        let hscale = 1.0 / (f as f64).sqrt();
        let wl: Vec<f64> = (0..f * latent_dim).map(|_| rng.normal() * hscale).collect();
        params.insert("flat.latent_head.w", Tensor::new(vec![f, latent_dim], wl).with_grad());
        params.insert("flat.latent_head.b", Tensor::zeros(vec![latent_dim]).with_grad());
        let wa: Vec<f64> = (0..f * ACTION_DIM).map(|_| rng.normal() * hscale).collect();
        params.insert("flat.action_head.w", Tensor::new(vec![f, ACTION_DIM], wa).with_grad());
        params.insert("flat.action_head.b", Tensor::zeros(vec![ACTION_DIM]).with_grad());
        FlatPolicy {
            n_tasks,
            task_embed_dim: ed,
            hidden: f,
            latent_dim,
            active_head: ActiveHead::Latent,
            params,
        }
    }

    pub fn reinit_action_head(&mut self, seed: u64) {
        let mut rng = Rng::new(seed, Stream::Init, 0x4655);
        let hscale = 1.0 / (self.hidden as f64).sqrt();
        let w = self.params.get_mut("flat.action_head.w");
        for v in &mut w.data {
            *v = rng.normal() * hscale;
        }
        let b = self.params.get_mut("flat.action_head.b");
        b.data.fill(0.0);
    }

    fn trunk(&self, tape: &mut Tape, bound: &Bound, obs: TensorId, task_ids: &[usize]) -> TensorId {
        let emb = tape.gather(bound.get("task_embed"), task_ids);
        let mut h = tape.concat_cols(&[obs, emb]);
        for i in 0..2 {
            let lin = tape.matmul(h, bound.get(&format!("flat.w{i}")));
            let lin = tape.add(lin, bound.get(&format!("flat.b{i}")));
            h = tape.tanh(lin);
        }
        h
    }

    pub fn forward_latent(&self, tape: &mut Tape, bound: &Bound, obs: TensorId, task_ids: &[usize]) -> TensorId {
        let h = self.trunk(tape, bound, obs, task_ids);
        let out = tape.matmul(h, bound.get("flat.latent_head.w"));
        tape.add(out, bound.get("flat.latent_head.b"))
    }

    pub fn forward_action(&self, tape: &mut Tape, bound: &Bound, obs: TensorId, task_ids: &[usize]) -> TensorId {
        let h = self.trunk(tape, bound, obs, task_ids);
        let out = tape.matmul(h, bound.get("flat.action_head.w"));
        tape.add(out, bound.get("flat.action_head.b"))
    }

    pub fn act(&self, state: &WorldState, task_id: usize) -> Result<[f64; ACTION_DIM]> {
        if self.active_head != ActiveHead::Action {
            return Err(Error::Config("flat act: latent head still active".into()));
        }
        let mut tape = Tape::new();
        let bound = Bound::frozen(&mut tape, &self.params);
        let obs = tape.constant(vec![1, STATE_DIM], state.observation().to_vec());
        let a = self.forward_action(&mut tape, &bound, obs, &[task_id]);
        let d = tape.data(a);
        Ok([d[0], d[1]])
    }
}

/// Flat policy wrapped for rollouts.
pub struct FlatRolloutPolicy<'a> {
    pub flat: &'a FlatPolicy,
}

impl Policy for FlatRolloutPolicy<'_> {
    fn act(&mut self, state: &WorldState, task_id: usize) -> [f64; 2] {
        self.flat.act(state, task_id).expect("flat rollout: action head inactive")
    }
}

// ── demo selection ───────────────────────────────────────────────────

/// Action-labeled fine-tuning demonstrations.
#[derive(Clone, Debug)]
pub struct DemoSet {
    pub fraction: f64,
    pub episodes: Vec<Episode>,
}

/// Seed-deterministic, id-stable subsampling: for a fixed seed the selected
/// id sets are nested across fractions (10% of the pool is a subset of 30%,
/// and so on). Takes ceil(fraction * pool size) episodes.
pub fn select_demos(pool: &[Episode], fraction: f64, seed: u64) -> Result<DemoSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("demo_fraction must be in (0, 1], got {fraction}")));
    }
    if pool.is_empty() {
        return Err(Error::Config("select_demos: empty demonstration pool".into()));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = Rng::new(seed, Stream::Data, 0x44454d4f);
    rng.shuffle(&mut order);
    let count = (fraction * pool.len() as f64).ceil() as usize;
    let episodes = order[..count].iter().map(|&i| pool[i].clone()).collect();
    Ok(DemoSet { fraction, episodes })
}

// ── training ─────────────────────────────────────────────────────────

fn batch_indices(rng: &mut Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.below(n)).collect()
}

fn gather_rows(src: &[f64], width: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&src[i * width..(i + 1) * width]);
    }
    out
}

/// Joint pretraining of the hierarchical pair on pseudo-labels. The high
/// level matches skill vectors; the low level matches latent-action vectors
/// conditioned on the high level's detached prediction (or the ground-truth
/// pseudo-skill when configured). Returns per-step (high, low) losses too.
pub fn pretrain_policies(
    data: &PolicyDataset,
    config: &PolicyConfig,
    seed: u64,
) -> Result<(HighPolicy, LowPolicy, Vec<(f64, f64)>)> {
    if data.is_empty() {
        return Err(Error::Config("pretrain_policies: empty dataset".into()));
    }
    let mut high = HighPolicy::init(data.n_tasks, data.skill_dim, config, seed);
    let mut low = LowPolicy::init(data.skill_dim, data.action_dim, config, seed);
    let mut adam_high = AdamState::new(&high.params, config.lr);
    let mut adam_low = AdamState::new(&low.params, config.lr);
    let mut rng = Rng::new(seed, Stream::Data, 0x505245);
    let mut curve = Vec::with_capacity(config.pretrain_steps as usize);

    for step in 0..config.pretrain_steps {
        let idx = batch_indices(&mut rng, data.len(), config.batch_size);
        let obs_rows = gather_rows(&data.obs, STATE_DIM, &idx);
        let skill_rows = gather_rows(&data.skills, data.skill_dim, &idx);
        let action_rows = gather_rows(&data.action_latents, data.action_dim, &idx);
        let tasks: Vec<usize> = idx.iter().map(|&i| data.task_ids[i]).collect();

        let mut tape = Tape::new();
        let high_bound = Bound::trainable(&mut tape, &high.params);
        let low_bound = Bound::trainable(&mut tape, &low.params);
        let obs = tape.constant(vec![idx.len(), STATE_DIM], obs_rows);
        let skill_targets = tape.constant(vec![idx.len(), data.skill_dim], skill_rows);
        let action_targets = tape.constant(vec![idx.len(), data.action_dim], action_rows);

        let skill_pred = high.forward(&mut tape, &high_bound, obs, &tasks);
        let high_loss = tape.l1_mean(skill_pred, skill_targets);

        let conditioning = if config.condition_on_gt_skills {
            skill_targets
        } else {
            tape.detach(skill_pred)
        };
        let latent_pred = low.forward_latent(&mut tape, &low_bound, obs, conditioning);
        let low_loss = tape.l1_mean(latent_pred, action_targets);

        let total = tape.add(high_loss, low_loss);
        let total_val = tape.scalar_value(total);
        if !total_val.is_finite() {
            return Err(Error::Diverged { step, what: "policy pretraining loss".into() });
        }
        curve.push((tape.scalar_value(high_loss), tape.scalar_value(low_loss)));

        let grads = tape.backward(total);
        let named = grads.by_name(&tape);
        adam_high.step(&mut high.params, &named);
        adam_low.step(&mut low.params, &named);
    }

    Ok((high, low, curve))
}

/// Flat-baseline pretraining: [obs ; task] -> latent action, L1 loss,
/// identical step budget to the hierarchical pipeline.
pub fn pretrain_flat(data: &PolicyDataset, config: &PolicyConfig, seed: u64) -> Result<(FlatPolicy, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Config("pretrain_flat: empty dataset".into()));
    }
    let mut flat = FlatPolicy::init(data.n_tasks, data.action_dim, config, seed);
    let mut adam = AdamState::new(&flat.params, config.lr);
    let mut rng = Rng::new(seed, Stream::Data, 0x505246);
    let mut curve = Vec::with_capacity(config.pretrain_steps as usize);

    for step in 0..config.pretrain_steps {
        let idx = batch_indices(&mut rng, data.len(), config.batch_size);
        let obs_rows = gather_rows(&data.obs, STATE_DIM, &idx);
        let action_rows = gather_rows(&data.action_latents, data.action_dim, &idx);
        let tasks: Vec<usize> = idx.iter().map(|&i| data.task_ids[i]).collect();

        let mut tape = Tape::new();
        let bound = Bound::trainable(&mut tape, &flat.params);
        let obs = tape.constant(vec![idx.len(), STATE_DIM], obs_rows);
        let targets = tape.constant(vec![idx.len(), data.action_dim], action_rows);
        let pred = flat.forward_latent(&mut tape, &bound, obs, &tasks);
        let loss = tape.l1_mean(pred, targets);

        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Diverged { step, what: "flat pretraining loss".into() });
        }
        curve.push(loss_val);

        let grads = tape.backward(loss);
        adam.step(&mut flat.params, &grads.by_name(&tape));
    }

    Ok((flat, curve))
}

/// Action-labeled (obs, task, action) rows drawn from demo episodes.
fn demo_rows(demos: &DemoSet) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
    let mut obs = Vec::new();
    let mut tasks = Vec::new();
    let mut actions = Vec::new();
    for ep in &demos.episodes {
        for t in 0..ep.actions.len() {
            obs.extend_from_slice(&ep.states[t]);
            tasks.push(ep.task_id);
            actions.extend_from_slice(&ep.actions[t]);
        }
    }
    (obs, tasks, actions)
}

/// Fine-tune the low level on demonstrated actions with the high level
/// frozen (bit-unchanged). The action head starts fresh; the trunk is
/// warm-started from pretraining.
pub fn finetune_low_level(
    high: &HighPolicy,
    low: &LowPolicy,
    demos: &DemoSet,
    config: &PolicyConfig,
    seed: u64,
) -> Result<(LowPolicy, Vec<f64>)> {
    if demos.episodes.is_empty() {
        return Err(Error::Config("finetune_low_level: empty demo set".into()));
    }
    let mut tuned = low.clone();
    tuned.reinit_action_head(seed);
    tuned.active_head = ActiveHead::Action;
    let mut adam = AdamState::new(&tuned.params, config.lr);
    let mut rng = Rng::new(seed, Stream::Data, 0x465455);
    let (obs_all, tasks_all, actions_all) = demo_rows(demos);
    let n = tasks_all.len();
    let mut curve = Vec::with_capacity(config.finetune_steps as usize);

    for step in 0..config.finetune_steps {
        let idx = batch_indices(&mut rng, n, config.batch_size);
        let obs_rows = gather_rows(&obs_all, STATE_DIM, &idx);
        let action_rows = gather_rows(&actions_all, ACTION_DIM, &idx);
        let tasks: Vec<usize> = idx.iter().map(|&i| tasks_all[i]).collect();

        let mut tape = Tape::new();
        let high_bound = Bound::frozen(&mut tape, &high.params);
        let low_bound = Bound::trainable(&mut tape, &tuned.params);
        let obs = tape.constant(vec![idx.len(), STATE_DIM], obs_rows);
        let targets = tape.constant(vec![idx.len(), ACTION_DIM], action_rows);
        let skill = high.forward(&mut tape, &high_bound, obs, &tasks);
        let pred = tuned.forward_action(&mut tape, &low_bound, obs, skill);
        let loss = tape.mse(pred, targets);

        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Diverged { step, what: "low-level fine-tuning loss".into() });
        }
        curve.push(loss_val);

        let grads = tape.backward(loss);
        adam.step(&mut tuned.params, &grads.by_name(&tape));
    }

    Ok((tuned, curve))
}

/// Fine-tune the flat baseline on demonstrated actions (fresh action head,
/// warm trunk when pretrained, identical budget to the hierarchical path).
pub fn finetune_flat(
    flat: &FlatPolicy,
    demos: &DemoSet,
    config: &PolicyConfig,
    seed: u64,
) -> Result<(FlatPolicy, Vec<f64>)> {
    if demos.episodes.is_empty() {
        return Err(Error::Config("finetune_flat: empty demo set".into()));
    }
    let mut tuned = flat.clone();
    tuned.reinit_action_head(seed);
    tuned.active_head = ActiveHead::Action;
    let mut adam = AdamState::new(&tuned.params, config.lr);
    let mut rng = Rng::new(seed, Stream::Data, 0x465456);
    let (obs_all, tasks_all, actions_all) = demo_rows(demos);
    let n = tasks_all.len();
    let mut curve = Vec::with_capacity(config.finetune_steps as usize);

    for step in 0..config.finetune_steps {
        let idx = batch_indices(&mut rng, n, config.batch_size);
        let obs_rows = gather_rows(&obs_all, STATE_DIM, &idx);
        let action_rows = gather_rows(&actions_all, ACTION_DIM, &idx);
        let tasks: Vec<usize> = idx.iter().map(|&i| tasks_all[i]).collect();

        let mut tape = Tape::new();
        let bound = Bound::trainable(&mut tape, &tuned.params);
        let obs = tape.constant(vec![idx.len(), STATE_DIM], obs_rows);
        let targets = tape.constant(vec![idx.len(), ACTION_DIM], action_rows);
        let pred = tuned.forward_action(&mut tape, &bound, obs, &tasks);
        let loss = tape.mse(pred, targets);

        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Diverged { step, what: "flat fine-tuning loss".into() });
        }
        curve.push(loss_val);

        let grads = tape.backward(loss);
        adam.step(&mut tuned.params, &grads.by_name(&tape));
    }

    Ok((tuned, curve))
}

// ── evaluation helpers ───────────────────────────────────────────────

/// Held-out skill-prediction L1 of the high level.
pub fn skill_l1(high: &HighPolicy, data: &PolicyDataset) -> f64 {
    let mut tape = Tape::new();
    let bound = Bound::frozen(&mut tape, &high.params);
    let obs = tape.constant(vec![data.len(), STATE_DIM], data.obs.clone());
    let targets = tape.constant(vec![data.len(), data.skill_dim], data.skills.clone());
    let pred = high.forward(&mut tape, &bound, obs, &data.task_ids);
    let loss = tape.l1_mean(pred, targets);
    tape.scalar_value(loss)
}

/// L1 of predicting the train-set mean skill vector everywhere.
pub fn mean_skill_baseline_l1(train: &PolicyDataset, eval: &PolicyDataset) -> f64 {
    let d = train.skill_dim;
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for row in train.skills.chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut total = 0.0;
    for row in eval.skills.chunks(d) {
        for (m, &v) in mean.iter().zip(row) {
            total += (v - m).abs();
        }
    }
    total / (eval.len() * d) as f64
}

/// Held-out action MSE of a fine-tuned pair against demo actions.
pub fn action_mse(high: &HighPolicy, low: &LowPolicy, demos: &DemoSet) -> f64 {
    let (obs_all, tasks_all, actions_all) = demo_rows(demos);
    let n = tasks_all.len();
    let mut tape = Tape::new();
    let high_bound = Bound::frozen(&mut tape, &high.params);
    let low_bound = Bound::frozen(&mut tape, &low.params);
    let obs = tape.constant(vec![n, STATE_DIM], obs_all);
    let targets = tape.constant(vec![n, ACTION_DIM], actions_all);
    let skill = high.forward(&mut tape, &high_bound, obs, &tasks_all);
    let pred = low.forward_action(&mut tape, &low_bound, obs, skill);
    let loss = tape.mse(pred, targets);
    tape.scalar_value(loss)
}

/// MSE of always acting zero, on the same demo pairs.
pub fn zero_action_mse(demos: &DemoSet) -> f64 {
    let (_, _, actions_all) = demo_rows(demos);
    actions_all.iter().map(|a| a * a).sum::<f64>() / actions_all.len() as f64
}

#[cfg(test)]
mod tests;
