//! Latent action model: inverse dynamics (IDM) and forward dynamics (FDM)
//! trained jointly on frame pairs, then frozen.
//!
//! The IDM maps a pair of states separated by `k` steps to a bounded latent
//! action; the FDM reconstructs the later state from the earlier state and
//! that latent. After training, the pair acts as the latent-action tokenizer
//! for the chunker and as the reconstruction pathway of its loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Mlp};
use crate::rng::{Rng, Stream};
use crate::tensor::{AdamState, ParamSet, Tape, Tensor, TensorId};
use crate::world::{Episode, WorldState, STATE_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LamConfig {
    /// Frame interval between the two states of a pair.
    pub k: usize,
    /// Latent-action dimension; must stay below 2 x state dim so the IDM
    /// cannot copy both endpoints verbatim.
    pub d_latent: usize,
    pub hidden: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for LamConfig {
    fn default() -> Self {
        LamConfig { k: 2, d_latent: 4, hidden: 64, steps: 3000, batch_size: 256, lr: 1e-3 }
    }
}

impl LamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.k) {
            return Err(Error::Config(format!("lam.k must be in 1..=5, got {}", self.k)));
        }
        if self.d_latent == 0 || self.d_latent >= 2 * STATE_DIM {
            return Err(Error::Config(format!(
                "lam.d_latent must be in 1..{}, got {}",
                2 * STATE_DIM,
                self.d_latent
            )));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("lam.steps and lam.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Trained (and thereafter frozen) IDM + FDM parameter pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    pub config: LamConfig,
    pub params: ParamSet,
}

fn idm_net(cfg: &LamConfig) -> Mlp {
    Mlp::new("idm", vec![2 * STATE_DIM, cfg.hidden, cfg.d_latent])
}

fn fdm_net(cfg: &LamConfig) -> Mlp {
    Mlp::new("fdm", vec![STATE_DIM + cfg.d_latent, cfg.hidden, STATE_DIM])
}

impl LatentModel {
    pub fn init(config: LamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed, Stream::Init, 0x4c414d);
        let mut params = ParamSet::new();
        idm_net(&config).init(&mut params, &mut rng);
        fdm_net(&config).init(&mut params, &mut rng);
        Ok(LatentModel { config, params })
    }

    /// IDM on the tape: [B, 2*ds] pair rows -> tanh-bounded [B, d_latent].
    pub fn idm_on_tape(&self, tape: &mut Tape, bound: &Bound, pairs: TensorId) -> TensorId {
        let raw = idm_net(&self.config).forward(tape, bound, pairs);
        tape.tanh(raw)
    }

    /// FDM on the tape: current states [B, ds] and latents [B, d_latent]
    /// -> predicted states [B, ds].
    pub fn fdm_on_tape(&self, tape: &mut Tape, bound: &Bound, states: TensorId, latents: TensorId) -> TensorId {
        let x = tape.concat_cols(&[states, latents]);
        fdm_net(&self.config).forward(tape, bound, x)
    }

    /// Latent action for one frame pair.
    pub fn idm_encode(&self, from: &WorldState, to: &WorldState) -> Vec<f64> {
        let mut row = [0.0; 2 * STATE_DIM];
        row[..STATE_DIM].copy_from_slice(&from.observation());
        row[STATE_DIM..].copy_from_slice(&to.observation());
        let mut tape = Tape::new();
        let bound = Bound::frozen(&mut tape, &self.params);
        let x = tape.constant(vec![1, 2 * STATE_DIM], row.to_vec());
        let z = self.idm_on_tape(&mut tape, &bound, x);
        tape.data(z).to_vec()
    }

    /// Predicted future state for one (state, latent) pair.
    pub fn fdm_predict(&self, from: &WorldState, latent: &[f64]) -> [f64; STATE_DIM] {
        assert_eq!(latent.len(), self.config.d_latent, "fdm_predict: latent dimension mismatch");
        let mut tape = Tape::new();
        let bound = Bound::frozen(&mut tape, &self.params);
        let s = tape.constant(vec![1, STATE_DIM], from.observation().to_vec());
        let z = tape.constant(vec![1, self.config.d_latent], latent.to_vec());
        let y = self.fdm_on_tape(&mut tape, &bound, s, z);
        let d = tape.data(y);
        [d[0], d[1], d[2], d[3]]
    }
}

/// Latent-action sequence of one episode: row t is the latent for the frame
/// pair (t, t+k), so a length-T episode yields exactly T-k rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSequence {
    pub episode_id: u64,
    pub k: usize,
    pub d_latent: usize,
    /// Flat row-major [len x d_latent].
    pub latents: Vec<f64>,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.latents.len() / self.d_latent
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.latents[t * self.d_latent..(t + 1) * self.d_latent]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.d_latent], self.latents.clone())
    }
}

/// Run the frozen IDM over every pair (t, t+k) of an episode.
pub fn extract_latent_sequence(model: &LatentModel, episode: &Episode) -> Result<LatentSequence> {
    let t_len = episode.len();
    let k = model.config.k;
    if t_len <= k {
        return Err(Error::World(format!(
            "episode {}: length {t_len} too short for frame interval k={k}",
            episode.id
        )));
    }
    let m = t_len - k;
    let mut rows = Vec::with_capacity(m * 2 * STATE_DIM);
    for t in 0..m {
        rows.extend_from_slice(&episode.states[t]);
        rows.extend_from_slice(&episode.states[t + k]);
    }
    let mut tape = Tape::new();
    let bound = Bound::frozen(&mut tape, &model.params);
    let x = tape.constant(vec![m, 2 * STATE_DIM], rows);
    let z = model.idm_on_tape(&mut tape, &bound, x);
    Ok(LatentSequence {
        episode_id: episode.id,
        k,
        d_latent: model.config.d_latent,
        latents: tape.data(z).to_vec(),
    })
}

/// Mean squared per-element error of FDM(I_t, IDM(I_t, I_{t+k})) against
/// I_{t+k}, over every pair of every episode.
pub fn reconstruction_mse(model: &LatentModel, episodes: &[Episode]) -> f64 {
    let k = model.config.k;
    let (mut sum, mut count) = (0.0, 0usize);
    for ep in episodes {
        if ep.len() <= k {
            continue;
        }
        let m = ep.len() - k;
        let mut pairs = Vec::with_capacity(m * 2 * STATE_DIM);
        let mut currents = Vec::with_capacity(m * STATE_DIM);
        for t in 0..m {
            pairs.extend_from_slice(&ep.states[t]);
            pairs.extend_from_slice(&ep.states[t + k]);
            currents.extend_from_slice(&ep.states[t]);
        }
        let mut tape = Tape::new();
        let bound = Bound::frozen(&mut tape, &model.params);
        let p = tape.constant(vec![m, 2 * STATE_DIM], pairs);
        let c = tape.constant(vec![m, STATE_DIM], currents);
        let z = model.idm_on_tape(&mut tape, &bound, p);
        let pred = model.fdm_on_tape(&mut tape, &bound, c, z);
        let data = tape.data(pred);
        for t in 0..m {
            for j in 0..STATE_DIM {
                let d = data[t * STATE_DIM + j] - ep.states[t + k][j];
                sum += d * d;
                count += 1;
            }
        }
    }
    sum / count.max(1) as f64
}

/// Baseline that predicts I_{t+k} = I_t; the trained model is judged
/// against this on the same split.
pub fn identity_baseline_mse(k: usize, episodes: &[Episode]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for ep in episodes {
        if ep.len() <= k {
            continue;
        }
        for t in 0..ep.len() - k {
            for j in 0..STATE_DIM {
                let d = ep.states[t + k][j] - ep.states[t][j];
                sum += d * d;
                count += 1;
            }
        }
    }
    sum / count.max(1) as f64
}

/// Joint IDM+FDM training by reconstruction. Returns the frozen model and
/// the per-step loss curve.
pub fn train_lam(episodes: &[Episode], config: LamConfig, seed: u64) -> Result<(LatentModel, Vec<f64>)> {
    config.validate()?;
    let k = config.k;
    let usable: Vec<&Episode> = episodes.iter().filter(|e| e.len() > k).collect();
    if usable.is_empty() {
        return Err(Error::Config("train_lam: no episodes longer than k".into()));
    }

    let mut model = LatentModel::init(config.clone(), seed)?;
    let mut adam = AdamState::new(&model.params, config.lr);
    let mut data_rng = Rng::new(seed, Stream::Data, 0x4c414d);
    let mut curve = Vec::with_capacity(config.steps as usize);

    for step in 0..config.steps {
        let mut pair_rows = Vec::with_capacity(config.batch_size * 2 * STATE_DIM);
        let mut current_rows = Vec::with_capacity(config.batch_size * STATE_DIM);
        let mut target_rows = Vec::with_capacity(config.batch_size * STATE_DIM);
        for _ in 0..config.batch_size {
            let ep = usable[data_rng.below(usable.len())];
            let t = data_rng.below(ep.len() - k);
            pair_rows.extend_from_slice(&ep.states[t]);
            pair_rows.extend_from_slice(&ep.states[t + k]);
            current_rows.extend_from_slice(&ep.states[t]);
            target_rows.extend_from_slice(&ep.states[t + k]);
        }

        let mut tape = Tape::new();
        let bound = Bound::trainable(&mut tape, &model.params);
        let pairs = tape.constant(vec![config.batch_size, 2 * STATE_DIM], pair_rows);
        let currents = tape.constant(vec![config.batch_size, STATE_DIM], current_rows);
        let targets = tape.constant(vec![config.batch_size, STATE_DIM], target_rows);
        let z = model.idm_on_tape(&mut tape, &bound, pairs);
        let pred = model.fdm_on_tape(&mut tape, &bound, currents, z);
        let loss = tape.mse(pred, targets);

        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Diverged { step, what: "lam reconstruction loss".into() });
        }
        curve.push(loss_val);

        let grads = tape.backward(loss);
        adam.step(&mut model.params, &grads.by_name(&tape));
    }

    Ok((model, curve))
}
