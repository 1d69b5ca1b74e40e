//! Quantitative evaluation: boundary precision/recall against simulator
//! ground truth, segment purity, next-latent prediction quality against
//! baselines, and rollout success rates. All reports are pure functions of
//! their inputs.

use serde::{Deserialize, Serialize};

use crate::chunker::train::{chunk_sequence, predict_next_latents};
use crate::chunker::unfold::segment_ids;
use crate::chunker::ChunkerModel;
use crate::error::{Error, Result};
use crate::lam::{extract_latent_sequence, LatentModel, LatentSequence};
use crate::world::{rollout, Episode, Policy, TaskScript, WorldConfig, WorldState, STATE_DIM};

/// Segmentation quality at one stage, aggregated over a split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub stage: usize,
    pub tolerance: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean L0/L1 and L1/L2 over episodes.
    pub compression: [f64; 2],
    pub purity: f64,
    pub episodes: usize,
}

/// Greedy one-to-one boundary matching within +-tol steps. Index 0 is
/// excluded from both sides (it is forced to 1 by construction). Empty
/// sides score 1.0 vacuously; F1 is 0 when P + R = 0.
pub fn boundary_prf(pred: &[u8], gt: &[u8], tol: usize) -> Result<(f64, f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::Eval(format!(
            "boundary_prf: length mismatch {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let counts = boundary_match_counts(pred, gt, tol);
    Ok(prf_from_counts(counts))
}

/// (matched, predicted, ground-truth) boundary counts for one sequence.
pub fn boundary_match_counts(pred: &[u8], gt: &[u8], tol: usize) -> (usize, usize, usize) {
    let positions = |b: &[u8]| -> Vec<usize> {
        b.iter()
            .enumerate()
            .skip(1)
            .filter_map(|(t, &v)| (v == 1).then_some(t))
            .collect()
    };
    let preds = positions(pred);
    let gts = positions(gt);
    let mut taken = vec![false; gts.len()];
    let mut matched = 0;
    for &p in &preds {
        // Leftmost unmatched ground-truth boundary within tolerance.
        for (j, &g) in gts.iter().enumerate() {
            if taken[j] || p.abs_diff(g) > tol {
                continue;
            }
            taken[j] = true;
            matched += 1;
            break;
        }
    }
    (matched, preds.len(), gts.len())
}

pub fn prf_from_counts((matched, n_pred, n_gt): (usize, usize, usize)) -> (f64, f64, f64) {
    let p = if n_pred == 0 { 1.0 } else { matched as f64 / n_pred as f64 };
    let r = if n_gt == 0 { 1.0 } else { matched as f64 / n_gt as f64 };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

/// Length-weighted mean purity: for each predicted segment, the fraction of
/// steps carrying its majority ground-truth skill id.
pub fn segment_purity(pred_segments: &[usize], gt_ids: &[usize]) -> Result<f64> {
    if pred_segments.len() != gt_ids.len() {
        return Err(Error::Eval(format!(
            "segment_purity: length mismatch {} vs {}",
            pred_segments.len(),
            gt_ids.len()
        )));
    }
    if pred_segments.is_empty() {
        return Err(Error::Eval("segment_purity: empty sequence".into()));
    }
    let (majority_total, len) = purity_counts(pred_segments, gt_ids);
    Ok(majority_total as f64 / len as f64)
}

/// (sum of per-segment majority counts, total length).
pub fn purity_counts(pred_segments: &[usize], gt_ids: &[usize]) -> (usize, usize) {
    let n_segments = pred_segments.iter().max().map_or(0, |&m| m + 1);
    let mut majority_total = 0;
    for seg in 0..n_segments {
        let mut counts = std::collections::HashMap::new();
        for (s, &g) in pred_segments.iter().zip(gt_ids) {
            if *s == seg {
                *counts.entry(g).or_insert(0usize) += 1;
            }
        }
        majority_total += counts.values().max().copied().unwrap_or(0);
    }
    (majority_total, pred_segments.len())
}

/// Ground-truth labels restricted to the latent timeline (the first T-k
/// frames; every skill lasts more than k frames, so no boundary is lost).
pub fn gt_on_latent_timeline(episode: &Episode, latent_len: usize) -> (Vec<u8>, Vec<usize>) {
    (
        episode.gt_boundaries[..latent_len].to_vec(),
        episode.skill_ids[..latent_len].to_vec(),
    )
}

/// Run the frozen LAM + chunker over a split and score the stage's unfolded
/// boundaries against ground truth (micro-aggregated over episodes).
pub fn evaluate_segmentation(
    chunker: &ChunkerModel,
    lam: &LatentModel,
    episodes: &[Episode],
    stage: usize,
    tolerance: usize,
) -> Result<SegmentationReport> {
    let mut matched = 0;
    let mut n_pred = 0;
    let mut n_gt = 0;
    let mut majority = 0;
    let mut total_len = 0;
    let mut comp = [0.0; 2];
    let mut counted = 0usize;

    for episode in episodes {
        let seq = extract_latent_sequence(lam, episode)?;
        if seq.len() < 4 || seq.len() > chunker.config.max_seq_len {
            continue;
        }
        let record = chunk_sequence(chunker, &seq)?;
        let unfolded = record.unfolded_boundaries(stage)?;
        let (gt_bounds, gt_ids) = gt_on_latent_timeline(episode, seq.len());

        let (m, p, g) = boundary_match_counts(&unfolded, &gt_bounds, tolerance);
        matched += m;
        n_pred += p;
        n_gt += g;

        let seg = segment_ids(&unfolded);
        let (maj, len) = purity_counts(&seg, &gt_ids);
        majority += maj;
        total_len += len;

        let l0 = record.b1.len() as f64;
        let l1 = record.b2.len() as f64;
        let l2 = record.b2.iter().filter(|&&v| v == 1).count() as f64;
        comp[0] += l0 / l1;
        comp[1] += l1 / l2;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Eval("evaluate_segmentation: no usable episodes".into()));
    }

    let (precision, recall, f1) = prf_from_counts((matched, n_pred, n_gt));
    Ok(SegmentationReport {
        stage,
        tolerance,
        precision,
        recall,
        f1,
        compression: [comp[0] / counted as f64, comp[1] / counted as f64],
        purity: majority as f64 / total_len as f64,
        episodes: counted,
    })
}

// ── rollout success ──────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSuccess {
    pub task_id: usize,
    pub successes: usize,
    pub rollouts: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyReport {
    /// Macro-averaged over tasks.
    pub success_rate: f64,
    /// Binomial standard error over all rollouts.
    pub std_err: f64,
    pub episodes_per_task: usize,
    pub seeds: Vec<u64>,
    pub per_task: Vec<TaskSuccess>,
}

/// Deterministic per-rollout seed, independent of execution order.
pub fn rollout_seed(eval_seed: u64, task_idx: usize, episode_idx: usize) -> u64 {
    eval_seed
        ^ ((task_idx as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        ^ ((episode_idx as u64 + 1).wrapping_mul(0xc2b2_ae3d_27d4_eb4f))
}

/// Mean success over `episodes_per_task` rollouts per task per seed, then
/// macro-averaged over tasks. `make_policy` builds a fresh policy per
/// worker; rollouts are distributed over `threads` with per-rollout seeds,
/// so the report does not depend on the thread count.
pub fn success_rate<'a, F>(
    make_policy: F,
    tasks: &[TaskScript],
    world: &WorldConfig,
    episodes_per_task: usize,
    seeds: &[u64],
    threads: usize,
) -> Result<PolicyReport>
where
    F: Fn() -> Box<dyn Policy + 'a> + Sync,
{
    if episodes_per_task == 0 || seeds.is_empty() || tasks.is_empty() {
        return Err(Error::Eval("success_rate: need tasks, seeds, and E >= 1".into()));
    }

    // One work item per (task, seed, episode); results indexed, not pushed.
    let mut jobs = Vec::new();
    for (ti, task) in tasks.iter().enumerate() {
        for &seed in seeds {
            for e in 0..episodes_per_task {
                jobs.push((ti, task, rollout_seed(seed, ti, e)));
            }
        }
    }
    let threads = threads.max(1).min(jobs.len());
    let mut outcomes = vec![false; jobs.len()];
    let chunk = jobs.len().div_ceil(threads);

    std::thread::scope(|scope| {
        for (slot, work) in outcomes.chunks_mut(chunk).zip(jobs.chunks(chunk)) {
            let make_policy = &make_policy;
            scope.spawn(move || {
                let mut policy = make_policy();
                for (out, (_, task, seed)) in slot.iter_mut().zip(work) {
                    *out = rollout(policy.as_mut(), task, world, *seed, None).success;
                }
            });
        }
    });

    let mut per_task: Vec<TaskSuccess> = tasks
        .iter()
        .map(|t| TaskSuccess { task_id: t.task_id, successes: 0, rollouts: 0 })
        .collect();
    for ((ti, _, _), &ok) in jobs.iter().zip(&outcomes) {
        per_task[*ti].rollouts += 1;
        per_task[*ti].successes += usize::from(ok);
    }

    let success_rate = per_task
        .iter()
        .map(|t| t.successes as f64 / t.rollouts as f64)
        .sum::<f64>()
        / per_task.len() as f64;
    let n_total: usize = per_task.iter().map(|t| t.rollouts).sum();
    let std_err = (success_rate * (1.0 - success_rate) / n_total as f64).sqrt();

    Ok(PolicyReport {
        success_rate,
        std_err,
        episodes_per_task,
        seeds: seeds.to_vec(),
        per_task,
    })
}

// ── next-latent prediction quality ───────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentPredReport {
    pub model_l1: f64,
    pub copy_last_l1: f64,
    /// model_l1 / copy_last_l1.
    pub ratio: f64,
    /// FDM frame-prediction MSE from model-predicted latents.
    pub roundtrip_model_mse: f64,
    /// Same, from IDM-extracted latents.
    pub roundtrip_extracted_mse: f64,
    /// roundtrip_model_mse / roundtrip_extracted_mse.
    pub roundtrip_ratio: f64,
}

/// Score arbitrary next-latent predictions (one flat [len x d] matrix per
/// sequence) against targets and the copy-last baseline, including the
/// frame-prediction round trip through the frozen FDM.
pub fn score_predictions(
    lam: &LatentModel,
    pairs: &[(&LatentSequence, &Episode)],
    predictions: &[Vec<f64>],
) -> Result<LatentPredReport> {
    if pairs.len() != predictions.len() {
        return Err(Error::Eval("score_predictions: prediction count mismatch".into()));
    }
    let k = lam.config.k;
    let d = lam.config.d_latent;
    let mut l1_model = 0.0;
    let mut l1_copy = 0.0;
    let mut l1_count = 0usize;
    let mut rt_model = 0.0;
    let mut rt_extracted = 0.0;
    let mut rt_count = 0usize;

    for ((seq, episode), preds) in pairs.iter().zip(predictions) {
        let m = seq.len();
        if preds.len() != m * d {
            return Err(Error::Eval(format!(
                "score_predictions: episode {} prediction shape mismatch",
                seq.episode_id
            )));
        }
        for t in 0..m - 1 {
            let target = seq.row(t + 1);
            let prev = seq.row(t);
            let pred = &preds[t * d..(t + 1) * d];
            for j in 0..d {
                l1_model += (pred[j] - target[j]).abs();
                l1_copy += (prev[j] - target[j]).abs();
            }
            l1_count += d;

            let from = WorldState::from_observation(&episode.states[t + 1]);
            let future = &episode.states[t + 1 + k];
            let via_pred = lam.fdm_predict(&from, pred);
            let via_extracted = lam.fdm_predict(&from, target);
            for j in 0..STATE_DIM {
                let dm = via_pred[j] - future[j];
                let de = via_extracted[j] - future[j];
                rt_model += dm * dm;
                rt_extracted += de * de;
            }
            rt_count += STATE_DIM;
        }
    }
    if l1_count == 0 {
        return Err(Error::Eval("score_predictions: no scored positions".into()));
    }

    let model_l1 = l1_model / l1_count as f64;
    let copy_last_l1 = l1_copy / l1_count as f64;
    let roundtrip_model_mse = rt_model / rt_count as f64;
    let roundtrip_extracted_mse = rt_extracted / rt_count as f64;
    Ok(LatentPredReport {
        model_l1,
        copy_last_l1,
        ratio: model_l1 / copy_last_l1,
        roundtrip_model_mse,
        roundtrip_extracted_mse,
        roundtrip_ratio: roundtrip_model_mse / roundtrip_extracted_mse,
    })
}

/// Next-latent prediction quality of the trained chunker on held-out pairs.
pub fn latent_pred_error(
    chunker: &ChunkerModel,
    lam: &LatentModel,
    pairs: &[(&LatentSequence, &Episode)],
) -> Result<LatentPredReport> {
    let mut predictions = Vec::with_capacity(pairs.len());
    for (seq, _) in pairs {
        predictions.push(predict_next_latents(chunker, seq)?);
    }
    score_predictions(lam, pairs, &predictions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lam::LamConfig;
    use crate::rng::{Rng, Stream};
    use crate::world::{generate_task_library, OraclePolicy};

    #[test]
    fn identical_boundaries_score_perfectly() {
        let b = [1u8, 0, 1, 0, 0, 1];
        assert_eq!(boundary_prf(&b, &b, 0).unwrap(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn missing_predictions_zero_recall_and_f1() {
        let pred = [1u8, 0, 0, 0, 0, 0];
        let gt = [1u8, 0, 1, 0, 1, 0];
        let (p, r, f1) = boundary_prf(&pred, &gt, 1).unwrap();
        assert_eq!(p, 1.0);
        assert_eq!(r, 0.0);
        assert_eq!(f1, 0.0);
    }

    #[test]
    fn tolerance_window_decides_the_hand_traced_example() {
        let pred = [1u8, 0, 1, 0, 0, 0];
        let gt = [1u8, 0, 0, 1, 0, 0];
        assert_eq!(boundary_prf(&pred, &gt, 1).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(boundary_prf(&pred, &gt, 0).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(boundary_prf(&[1, 0], &[1, 0, 0], 0).is_err());
        assert!(segment_purity(&[0, 0], &[0, 0, 1]).is_err());
    }

    #[test]
    fn prf_swaps_precision_and_recall() {
        let mut rng = Rng::new(3, Stream::Data, 0);
        for _ in 0..300 {
            let len = rng.int_range(2, 40);
            let mut a: Vec<u8> = (0..len).map(|_| (rng.below(4) == 0) as u8).collect();
            let mut b: Vec<u8> = (0..len).map(|_| (rng.below(4) == 0) as u8).collect();
            a[0] = 1;
            b[0] = 1;
            let tol = rng.below(3);
            let (pa, ra, _) = boundary_prf(&a, &b, tol).unwrap();
            let (pb, rb, _) = boundary_prf(&b, &a, tol).unwrap();
            assert!(
                (pa - rb).abs() < 1e-12 && (ra - pb).abs() < 1e-12,
                "a={a:?} b={b:?} tol={tol}"
            );
        }
    }

    #[test]
    fn perfect_segmentation_has_unit_purity() {
        let gt = [0usize, 0, 0, 1, 1, 2, 2, 2];
        assert_eq!(segment_purity(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn one_segment_over_two_equal_skills_has_half_purity() {
        let pred = [0usize; 8];
        let gt = [0usize, 0, 0, 0, 1, 1, 1, 1];
        assert_eq!(segment_purity(&pred, &gt).unwrap(), 0.5);
    }

    #[test]
    fn purity_matches_brute_force_on_random_cases() {
        // Independent oracle: sort each segment's labels and count the
        // longest run instead of hash-counting.
        fn oracle(pred: &[usize], gt: &[usize]) -> f64 {
            let max_seg = pred.iter().max().unwrap() + 1;
            let mut majority = 0usize;
            for seg in 0..max_seg {
                let mut labels: Vec<usize> = pred
                    .iter()
                    .zip(gt)
                    .filter(|(s, _)| **s == seg)
                    .map(|(_, &g)| g)
                    .collect();
                labels.sort_unstable();
                let mut best = 0;
                let mut run = 0;
                let mut prev = usize::MAX;
                for l in labels {
                    if l == prev {
                        run += 1;
                    } else {
                        run = 1;
                        prev = l;
                    }
                    best = best.max(run);
                }
                majority += best;
            }
            majority as f64 / pred.len() as f64
        }

        let mut rng = Rng::new(5, Stream::Data, 0);
        for _ in 0..200 {
            let len = rng.int_range(3, 50);
            let mut pred = Vec::with_capacity(len);
            let mut seg = 0usize;
            for t in 0..len {
                if t > 0 && rng.below(4) == 0 {
                    seg += 1;
                }
                pred.push(seg);
            }
            let gt: Vec<usize> = (0..len).map(|_| rng.below(3)).collect();
            let got = segment_purity(&pred, &gt).unwrap();
            let want = oracle(&pred, &gt);
            assert!((got - want).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn oracle_policy_scores_perfect_success() {
        let world = WorldConfig { noise_sigma: 0.0, task_library_size: 6, ..WorldConfig::default() };
        let tasks = generate_task_library(&world, 3);
        let report = success_rate(
            || Box::new(OraclePolicy::new(&tasks[0], &world)) as Box<dyn Policy>,
            &tasks[..1],
            &world,
            10,
            &[0, 1],
            2,
        )
        .unwrap();
        assert_eq!(report.success_rate, 1.0);
        assert_eq!(report.per_task[0].rollouts, 20);
    }

    #[test]
    fn zero_policy_scores_zero_on_move_to_tasks() {
        use crate::world::{SkillSpec, TaskScript};
        struct Zero;
        impl Policy for Zero {
            fn act(&mut self, _: &WorldState, _: usize) -> [f64; 2] {
                [0.0, 0.0]
            }
        }
        let world = WorldConfig { noise_sigma: 0.0, ..WorldConfig::default() };
        let tasks = vec![TaskScript {
            task_id: 0,
            skills: vec![
                SkillSpec::MoveTo { waypoint: [0.85, 0.85], duration: 10 },
                SkillSpec::MoveTo { waypoint: [0.15, 0.15], duration: 10 },
            ],
        }];
        let report =
            success_rate(|| Box::new(Zero) as Box<dyn Policy>, &tasks, &world, 5, &[7], 1).unwrap();
        assert_eq!(report.success_rate, 0.0);
    }

    #[test]
    fn success_report_is_independent_of_thread_count() {
        let world = WorldConfig { task_library_size: 4, ..WorldConfig::default() };
        let tasks = generate_task_library(&world, 11);
        let run = |threads: usize| {
            success_rate(
                || Box::new(OraclePolicy::new(&tasks[2], &world)) as Box<dyn Policy>,
                &tasks[2..3],
                &world,
                8,
                &[3, 4],
                threads,
            )
            .unwrap()
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.success_rate, b.success_rate);
        assert_eq!(a.std_err, b.std_err);
    }

    #[test]
    fn copy_last_stub_scores_ratio_one_and_truth_scores_zero() {
        let lam = LatentModel::init(LamConfig::default(), 0).unwrap();
        let episode = crate::chunker::tests::synthetic_episode(20, 3);
        let seq = extract_latent_sequence(&lam, &episode).unwrap();
        let m = seq.len();

        // Stub that copies the previous latent forward.
        let copy_preds: Vec<f64> = (0..m).flat_map(|t| seq.row(t).to_vec()).collect();
        let report =
            score_predictions(&lam, &[(&seq, &episode)], std::slice::from_ref(&copy_preds)).unwrap();
        assert!((report.ratio - 1.0).abs() < 1e-12);

        // Stub that outputs the true next latent.
        let perfect: Vec<f64> = (0..m).flat_map(|t| seq.row((t + 1).min(m - 1)).to_vec()).collect();
        let report =
            score_predictions(&lam, &[(&seq, &episode)], std::slice::from_ref(&perfect)).unwrap();
        assert_eq!(report.model_l1, 0.0);
        assert!((report.roundtrip_ratio - 1.0).abs() < 1e-12);
    }
}
