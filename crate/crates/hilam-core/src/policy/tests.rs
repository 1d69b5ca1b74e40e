use super::*;
use crate::tensor::gradcheck;
use crate::world::{generate_dataset, WorldConfig};

fn tiny_config() -> PolicyConfig {
    PolicyConfig {
        hidden: 32,
        flat_hidden: 40,
        pretrain_steps: 1500,
        finetune_steps: 1500,
        batch_size: 64,
        lr: 3e-3,
        ..PolicyConfig::default()
    }
}

/// Learnable synthetic pseudo-labels: skills depend on (task, observation),
/// latent actions on the observation alone. The per-task patterns come from
/// a fixed seed so separately drawn splits share the same target function.
fn synthetic_policy_data(n_tasks: usize, skill_dim: usize, action_dim: usize, rows: usize, seed: u64) -> PolicyDataset {
    let mut pattern_rng = Rng::new(0xBA5E, Stream::Data, n_tasks as u64);
    let task_patterns: Vec<Vec<f64>> = (0..n_tasks)
        .map(|_| (0..skill_dim).map(|_| pattern_rng.normal()).collect())
        .collect();
    let mut rng = Rng::new(seed, Stream::Data, 0x50AA);
    let mut ds = PolicyDataset {
        n_tasks,
        skill_dim,
        action_dim,
        ..PolicyDataset::default()
    };
    for _ in 0..rows {
        let task = rng.below(n_tasks);
        let obs = [rng.uniform(), rng.uniform(), rng.range(-0.05, 0.05), rng.range(-0.05, 0.05)];
        ds.obs.extend_from_slice(&obs);
        ds.task_ids.push(task);
        for j in 0..skill_dim {
            ds.skills.push(task_patterns[task][j] + 0.3 * obs[j % 4]);
        }
        for j in 0..action_dim {
            ds.action_latents.push((obs[j % 4] - 0.5) * 0.8);
        }
    }
    ds
}

#[test]
fn stage_constraints_are_enforced() {
    assert!(Stages { skill: 2, action: 0 }.validate().is_ok());
    assert!(Stages { skill: 1, action: 0 }.validate().is_ok());
    assert!(Stages { skill: 2, action: 1 }.validate().is_ok());
    assert!(Stages { skill: 0, action: 0 }.validate().is_err());
    assert!(Stages { skill: 1, action: 1 }.validate().is_err());
    assert!(Stages { skill: 2, action: 2 }.validate().is_err());
    assert!(Stages { skill: 3, action: 0 }.validate().is_err());
}

#[test]
fn demo_subsets_are_nested_and_sized() {
    let world = WorldConfig {
        train_episodes: 50,
        val_episodes: 5,
        test_episodes: 5,
        task_library_size: 5,
        ..WorldConfig::default()
    };
    let ds = generate_dataset(&world, 3).unwrap();
    let small = select_demos(&ds.train, 0.1, 7).unwrap();
    let medium = select_demos(&ds.train, 0.3, 7).unwrap();
    let full = select_demos(&ds.train, 1.0, 7).unwrap();
    assert_eq!(small.episodes.len(), 5); // ceil(0.1 * 50)
    assert_eq!(medium.episodes.len(), 15);
    assert_eq!(full.episodes.len(), 50);

    let ids = |d: &DemoSet| d.episodes.iter().map(|e| e.id).collect::<std::collections::BTreeSet<_>>();
    assert!(ids(&small).is_subset(&ids(&medium)));
    assert!(ids(&medium).is_subset(&ids(&full)));

    assert!(select_demos(&ds.train, 0.0, 7).is_err());
    assert!(select_demos(&ds.train, 1.5, 7).is_err());
    assert!(select_demos(&[], 0.5, 7).is_err());
}

#[test]
fn pretraining_is_deterministic_and_beats_mean_baseline() {
    let train = synthetic_policy_data(5, 8, 4, 2000, 1);
    let eval = synthetic_policy_data(5, 8, 4, 400, 2);
    let cfg = tiny_config();
    let (high_a, low_a, _) = pretrain_policies(&train, &cfg, 11).unwrap();
    let (high_b, low_b, _) = pretrain_policies(&train, &cfg, 11).unwrap();
    assert_eq!(high_a, high_b);
    assert_eq!(low_a, low_b);

    let model_l1 = skill_l1(&high_a, &eval);
    let baseline = mean_skill_baseline_l1(&train, &eval);
    assert!(
        model_l1 <= 0.7 * baseline,
        "skill L1 {model_l1} vs mean baseline {baseline}"
    );
}

#[test]
fn finetuning_freezes_the_high_level_and_beats_zero_baseline() {
    use crate::world::{generate_episode, SkillSpec, TaskScript};

    // Single-waypoint tasks make the action an unambiguous function of
    // (observation, task), so a short fine-tune must clearly beat acting
    // zero everywhere.
    let world = WorldConfig { noise_sigma: 0.0, ..WorldConfig::default() };
    let waypoints = [[0.2, 0.2], [0.8, 0.3], [0.3, 0.8], [0.7, 0.7]];
    let scripts: Vec<TaskScript> = waypoints
        .iter()
        .enumerate()
        .map(|(task_id, &w)| TaskScript {
            task_id,
            skills: vec![
                SkillSpec::MoveTo { waypoint: w, duration: 20 },
                SkillSpec::Dwell { duration: 10 },
            ],
        })
        .collect();
    let pool: Vec<Episode> = (0..60u64)
        .map(|i| {
            let mut ep = generate_episode(&scripts[(i % 4) as usize], &world, 1000 + i);
            ep.id = i;
            ep
        })
        .collect();
    let held_pool: Vec<Episode> = (0..12u64)
        .map(|i| {
            let mut ep = generate_episode(&scripts[(i % 4) as usize], &world, 5000 + i);
            ep.id = 100 + i;
            ep
        })
        .collect();

    let train = synthetic_policy_data(4, 8, 4, 1500, 1);
    let cfg = tiny_config();
    let (high, low, _) = pretrain_policies(&train, &cfg, 3).unwrap();

    let demos = select_demos(&pool, 1.0, 5).unwrap();
    let high_before = high.params.clone();
    let (tuned, curve) = finetune_low_level(&high, &low, &demos, &cfg, 5).unwrap();
    assert_eq!(high.params, high_before, "fine-tuning must not touch the high level");
    assert_eq!(tuned.active_head, ActiveHead::Action);
    assert!(curve.iter().all(|l| l.is_finite()));

    let held_out = select_demos(&held_pool, 1.0, 5).unwrap();
    let mse = action_mse(&high, &tuned, &held_out);
    let zero = zero_action_mse(&held_out);
    assert!(mse <= 0.5 * zero, "action MSE {mse} vs zero baseline {zero}");
}

#[test]
fn demo_fraction_uses_exact_ceiling() {
    let world = WorldConfig {
        train_episodes: 23,
        val_episodes: 2,
        test_episodes: 2,
        task_library_size: 4,
        ..WorldConfig::default()
    };
    let ds = generate_dataset(&world, 1).unwrap();
    let demos = select_demos(&ds.train, 0.1, 0).unwrap();
    assert_eq!(demos.episodes.len(), 3); // ceil(0.1 * 23)
}

#[test]
fn act_requires_the_action_head() {
    let cfg = tiny_config();
    let high = HighPolicy::init(4, 8, &cfg, 0);
    let low = LowPolicy::init(8, 4, &cfg, 0);
    let state = WorldState::at([0.5, 0.5]);
    assert!(act(&high, &low, &state, 0).is_err());

    let mut armed = low;
    armed.active_head = ActiveHead::Action;
    let a1 = act(&high, &armed, &state, 0).unwrap();
    let a2 = act(&high, &armed, &state, 0).unwrap();
    assert_eq!(a1, a2, "actions must be deterministic");
    assert!(a1.iter().all(|v| v.is_finite()));
}

#[test]
fn low_level_is_sensitive_to_the_skill_input() {
    // Feeding the ground-truth pseudo-skill instead of the predicted one
    // must change the action on average.
    let train = synthetic_policy_data(5, 8, 4, 1500, 1);
    let eval = synthetic_policy_data(5, 8, 4, 100, 4);
    let cfg = tiny_config();
    let (high, low, _) = pretrain_policies(&train, &cfg, 3).unwrap();
    let mut tuned = low.clone();
    tuned.active_head = ActiveHead::Action;

    let mut total = 0.0;
    for i in 0..eval.len() {
        let obs = &eval.obs[i * STATE_DIM..(i + 1) * STATE_DIM];
        let state = WorldState::from_observation(obs);
        let gt_skill = &eval.skills[i * eval.skill_dim..(i + 1) * eval.skill_dim];

        let with_pred = act(&high, &tuned, &state, eval.task_ids[i]).unwrap();
        let with_gt = {
            let mut tape = Tape::new();
            let bound = Bound::frozen(&mut tape, &tuned.params);
            let o = tape.constant(vec![1, STATE_DIM], obs.to_vec());
            let z = tape.constant(vec![1, eval.skill_dim], gt_skill.to_vec());
            let a = tuned.forward_action(&mut tape, &bound, o, z);
            let d = tape.data(a);
            [d[0], d[1]]
        };
        total += (with_pred[0] - with_gt[0]).abs() + (with_pred[1] - with_gt[1]).abs();
    }
    assert!(total / eval.len() as f64 > 0.0, "skill conditioning has no effect");
}

#[test]
fn flat_baseline_parameter_count_is_comparable() {
    // Fairness control for the ablations: flat within 1.3x of the pair,
    // with the default stage choice (skills from stage 2, actions from
    // stage 0) and default dims.
    let cfg = PolicyConfig::default();
    let high = HighPolicy::init(40, 64, &cfg, 0);
    let low = LowPolicy::init(64, 4, &cfg, 0);
    let flat = FlatPolicy::init(40, 4, &cfg, 0);
    let hier = (high.params.numel() + low.params.numel()) as f64;
    let ratio = flat.params.numel() as f64 / hier;
    assert!(
        (1.0 / 1.3..=1.3).contains(&ratio),
        "flat/hier parameter ratio {ratio} ({} vs {hier})",
        flat.params.numel()
    );
}

#[test]
fn flat_training_is_deterministic() {
    let train = synthetic_policy_data(5, 8, 4, 800, 1);
    let cfg = tiny_config();
    let (a, _) = pretrain_flat(&train, &cfg, 2).unwrap();
    let (b, _) = pretrain_flat(&train, &cfg, 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn both_policy_losses_match_finite_differences() {
    let cfg = PolicyConfig { hidden: 6, task_embed_dim: 4, ..tiny_config() };
    let data = synthetic_policy_data(3, 5, 3, 8, 2);
    let high = HighPolicy::init(3, 5, &cfg, 1);
    let low = LowPolicy::init(5, 3, &cfg, 1);

    // Pretraining loss: L1 on skills plus L1 on latent actions through the
    // detached conditioning. The conditioning is held at its base values for
    // the oracle, which is exactly what detaching means; the production
    // detach path must then produce the identical analytic gradient.
    let mut joint = ParamSet::new();
    for (name, t) in high.params.iter().chain(low.params.iter()) {
        joint.insert(name, t.clone());
    }
    let base_conditioning = {
        let mut tape = Tape::new();
        let bound = Bound::frozen(&mut tape, &high.params);
        let obs = tape.constant(vec![data.len(), STATE_DIM], data.obs.clone());
        let pred = high.forward(&mut tape, &bound, obs, &data.task_ids);
        tape.data(pred).to_vec()
    };
    let anchored = |tape: &mut Tape, params: &ParamSet| {
        let bound = Bound::trainable(tape, params);
        let obs = tape.constant(vec![data.len(), STATE_DIM], data.obs.clone());
        let skill_t = tape.constant(vec![data.len(), 5], data.skills.clone());
        let action_t = tape.constant(vec![data.len(), 3], data.action_latents.clone());
        let skill_pred = high.forward(tape, &bound, obs, &data.task_ids);
        let high_loss = tape.l1_mean(skill_pred, skill_t);
        let cond = tape.constant(vec![data.len(), 5], base_conditioning.clone());
        let latent_pred = low.forward_latent(tape, &bound, obs, cond);
        let low_loss = tape.l1_mean(latent_pred, action_t);
        tape.add(high_loss, low_loss)
    };
    let worst = gradcheck::check(&joint, anchored);
    assert!(worst <= 1e-5, "pretraining loss worst relative error {worst}");

    let production_grads = {
        let mut tape = Tape::new();
        let bound = Bound::trainable(&mut tape, &joint);
        let obs = tape.constant(vec![data.len(), STATE_DIM], data.obs.clone());
        let skill_t = tape.constant(vec![data.len(), 5], data.skills.clone());
        let action_t = tape.constant(vec![data.len(), 3], data.action_latents.clone());
        let skill_pred = high.forward(&mut tape, &bound, obs, &data.task_ids);
        let high_loss = tape.l1_mean(skill_pred, skill_t);
        let cond = tape.detach(skill_pred);
        let latent_pred = low.forward_latent(&mut tape, &bound, obs, cond);
        let low_loss = tape.l1_mean(latent_pred, action_t);
        let total = tape.add(high_loss, low_loss);
        tape.backward(total).by_name(&tape)
    };
    let anchored_grads = {
        let mut tape = Tape::new();
        let loss = anchored(&mut tape, &joint);
        tape.backward(loss).by_name(&tape)
    };
    assert_eq!(production_grads, anchored_grads);

    // Fine-tuning loss: MSE on executable actions with the high level frozen.
    let actions: Vec<f64> = (0..data.len() * ACTION_DIM).map(|i| (i as f64 * 0.13).sin() * 0.04).collect();
    let worst = gradcheck::check(&low.params, |tape, params| {
        let high_bound = Bound::frozen(tape, &high.params);
        let low_bound = Bound::trainable(tape, params);
        let obs = tape.constant(vec![data.len(), STATE_DIM], data.obs.clone());
        let targets = tape.constant(vec![data.len(), ACTION_DIM], actions.clone());
        let skill = high.forward(tape, &high_bound, obs, &data.task_ids);
        let pred = low.forward_action(tape, &low_bound, obs, skill);
        tape.mse(pred, targets)
    });
    assert!(worst <= 1e-5, "fine-tuning loss worst relative error {worst}");
}

#[test]
fn dataset_build_unfolds_stages_consistently() {
    use crate::chunker::train::ChunkRecord;
    use crate::lam::{extract_latent_sequence, LamConfig, LatentModel};

    let lam = LatentModel::init(LamConfig::default(), 0).unwrap();
    let episode = crate::chunker::tests::synthetic_episode(14, 5);
    let seq = extract_latent_sequence(&lam, &episode).unwrap();
    let m = seq.len();
    let record = ChunkRecord {
        episode_id: episode.id,
        d_model: 2,
        b1: {
            let mut b = vec![0u8; m];
            b[0] = 1;
            b[4] = 1;
            b[8] = 1;
            b
        },
        b2: vec![1, 0, 1],
        z1: (0..3 * 2).map(f64::from).collect(),
        z2: (0..2 * 2).map(|v| f64::from(v) + 10.0).collect(),
    };
    let ds = PolicyDataset::build(
        std::slice::from_ref(&episode),
        std::slice::from_ref(&seq),
        std::slice::from_ref(&record),
        Stages { skill: 2, action: 0 },
        1,
    )
    .unwrap();
    assert_eq!(ds.len(), m);
    assert_eq!(ds.skill_dim, 2);
    assert_eq!(ds.action_dim, seq.d_latent);
    // Stage-2 unfold of b1=[1,0,0,0,1,0,0,0,1,...], b2=[1,0,1]: segments
    // switch at position 8.
    assert_eq!(&ds.skills[0..2], &[10.0, 11.0]);
    assert_eq!(&ds.skills[8 * 2..8 * 2 + 2], &[12.0, 13.0]);
    assert_eq!(&ds.action_latents[..seq.d_latent], seq.row(0));
}
