//! Pipeline orchestration: the full workflow as idempotent stages over an
//! artifact directory.
//!
//! Every stage hashes its resolved config scope and its input artifacts.
//! Re-running a completed stage with unchanged inputs is a no-op unless
//! forced; running a stage whose inputs are missing, modified out-of-band,
//! or produced by an incomplete run is refused. Each stage writes a
//! `.meta.json` sidecar recording the exact config, seed, and input/output
//! content hashes that produced its artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chunker::train::{chunk_sequence, train_chunker, ChunkRecord, TrainRecord};
use crate::chunker::{ChunkerConfig, ChunkerModel};
use crate::error::{Error, Result};
use crate::lam::{extract_latent_sequence, train_lam, LamConfig, LatentModel, LatentSequence};
use crate::metrics::{
    evaluate_segmentation, latent_pred_error, success_rate, LatentPredReport, PolicyReport,
    SegmentationReport,
};
use crate::policy::{
    finetune_flat, finetune_low_level, pretrain_flat, pretrain_policies, select_demos, FlatPolicy,
    FlatRolloutPolicy, HierarchicalPolicy, HighPolicy, LowPolicy, PolicyConfig, PolicyDataset,
    Stages,
};
use crate::rng::{Rng, Stream};
use crate::store::{
    self, load_model, read_dataset, read_jsonl, save_model, sha256_file, sha256_hex, write_dataset,
    write_jsonl, RngStreamState, Series,
};
use crate::world::{Dataset, Policy, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Rollouts per task per seed (E).
    pub episodes_per_task: usize,
    pub seeds: Vec<u64>,
    /// Boundary-matching tolerance in latent steps.
    pub boundary_tolerance: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes_per_task: 50, seeds: vec![0, 1, 2], boundary_tolerance: 1 }
    }
}

/// The single JSON config driving every subcommand.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    pub lam: LamConfig,
    pub chunker: ChunkerConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
    pub skill_stage: usize,
    pub action_stage: usize,
    pub demo_fractions: Vec<f64>,
}

impl PipelineConfig {
    pub fn stages(&self) -> Stages {
        Stages { skill: self.skill_stage, action: self.action_stage }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.lam.validate()?;
        self.chunker.validate()?;
        self.stages().validate()?;
        if self.demo_fractions.is_empty()
            || self.demo_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0))
        {
            return Err(Error::Config("demo_fractions must be within (0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.into(), line: 0, what: e.to_string() })?;
        config.validate()?;
        Ok(config)
    }
}

fn pipeline_defaults() -> PipelineConfig {
    PipelineConfig {
        world: WorldConfig::default(),
        lam: LamConfig::default(),
        chunker: ChunkerConfig::default(),
        policy: PolicyConfig::default(),
        eval: EvalConfig::default(),
        skill_stage: 2,
        action_stage: 0,
        demo_fractions: vec![0.1, 0.3, 0.5, 1.0],
    }
}

impl PipelineConfig {
    pub fn standard() -> Self {
        pipeline_defaults()
    }
}

// ── stage bookkeeping ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StageMeta {
    stage: String,
    seed: u64,
    /// Hash of the stage-scoped resolved config.
    config_hash: String,
    /// The exact scoped config for provenance.
    config: serde_json::Value,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
}

/// File-format records.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentsManifest {
    pub version: u32,
    pub k: usize,
    pub d_latent: usize,
    pub lam_checksum: String,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkillsManifest {
    pub version: u32,
    pub d_model: usize,
    pub chunker_checksum: String,
    pub count: usize,
}

/// Rollout evaluation of one demo fraction: the hierarchical pretrained
/// pipeline against the from-scratch flat baseline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FractionEval {
    pub fraction: f64,
    pub hierarchical: PolicyReport,
    pub flat_scratch: PolicyReport,
}

/// One ablation table row. `skill_stage`/`action_stage` are None where the
/// axis does not apply (flat architecture, or no pretraining).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub pretrain: bool,
    pub hierarchical: bool,
    pub skill_stage: Option<usize>,
    pub action_stage: Option<usize>,
    pub success_rate: f64,
    pub std_err: f64,
}

pub const ABLATION_HEADER: &str = "pretrain,skill_stage,action_stage,success_rate,std_err";

pub struct Pipeline {
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub threads: usize,
}

fn frac_label(fraction: f64) -> String {
    format!("{:04}", (fraction * 1000.0).round() as u64)
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out_dir: impl Into<PathBuf>, seed: u64, threads: usize) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline { config, out_dir: out_dir.into(), seed, threads: threads.max(1) })
    }

    // Artifact paths.
    pub fn dataset_path(&self) -> PathBuf {
        self.out_dir.join("dataset.jsonl")
    }
    pub fn lam_path(&self) -> PathBuf {
        self.out_dir.join("lam.ckpt")
    }
    pub fn latents_path(&self) -> PathBuf {
        self.out_dir.join("latents.jsonl")
    }
    pub fn chunker_path(&self) -> PathBuf {
        self.out_dir.join("chunker.ckpt")
    }
    pub fn curve_path(&self) -> PathBuf {
        self.out_dir.join("chunker_curve.csv")
    }
    pub fn skills_path(&self) -> PathBuf {
        self.out_dir.join("skills.jsonl")
    }
    pub fn high_policy_path(&self) -> PathBuf {
        self.out_dir.join("policy_high.ckpt")
    }
    pub fn low_policy_path(&self) -> PathBuf {
        self.out_dir.join("policy_low.ckpt")
    }
    pub fn flat_pretrained_path(&self) -> PathBuf {
        self.out_dir.join("flat_pretrained.ckpt")
    }
    pub fn finetuned_low_path(&self, fraction: f64) -> PathBuf {
        self.out_dir.join("finetune").join(format!("frac_{}", frac_label(fraction))).join("low.ckpt")
    }
    pub fn flat_scratch_path(&self, fraction: f64) -> PathBuf {
        self.out_dir
            .join("finetune")
            .join(format!("frac_{}", frac_label(fraction)))
            .join("flat_scratch.ckpt")
    }
    pub fn policy_eval_path(&self, fraction: f64) -> PathBuf {
        self.out_dir.join("eval").join(format!("policy_frac_{}.json", frac_label(fraction)))
    }
    pub fn segmentation_path(&self) -> PathBuf {
        self.out_dir.join("eval").join("segmentation.json")
    }
    pub fn latent_pred_path(&self) -> PathBuf {
        self.out_dir.join("eval").join("latent_pred.json")
    }
    pub fn ablation_path(&self) -> PathBuf {
        self.out_dir.join("ablate.csv")
    }
    pub fn plots_dir(&self) -> PathBuf {
        self.out_dir.join("plots")
    }

    fn meta_path(&self, stage: &str) -> PathBuf {
        self.out_dir.join(format!("{stage}.meta.json"))
    }

    fn scoped_config(&self, stage: &str) -> serde_json::Value {
        let c = &self.config;
        match stage {
            "gen-data" => serde_json::json!({ "world": c.world }),
            "train-lam" => serde_json::json!({ "world": c.world, "lam": c.lam }),
            "extract-latents" => serde_json::json!({ "world": c.world, "lam": c.lam }),
            "train-chunker" | "extract-skills" => {
                serde_json::json!({ "world": c.world, "lam": c.lam, "chunker": c.chunker })
            }
            "pretrain-policy" => serde_json::json!({
                "world": c.world, "lam": c.lam, "chunker": c.chunker,
                "policy": c.policy, "skill_stage": c.skill_stage, "action_stage": c.action_stage,
            }),
            s if s.starts_with("finetune-policy") => serde_json::json!({
                "policy": c.policy, "skill_stage": c.skill_stage, "action_stage": c.action_stage,
            }),
            s if s.starts_with("eval-policy") => serde_json::json!({ "eval": c.eval }),
            "eval-segmentation" => {
                serde_json::json!({ "eval": c.eval, "skill_stage": c.skill_stage })
            }
            "ablate" => serde_json::json!({ "policy": c.policy, "eval": c.eval }),
            "plot" => serde_json::json!({}),
            _ => serde_json::json!({ "config": c }),
        }
    }

    /// Record the fully resolved config next to the artifacts.
    fn write_resolved_config(&self) -> Result<()> {
        let path = self.out_dir.join("config.resolved.json");
        store::write_json(&path, &serde_json::json!({ "seed": self.seed, "config": self.config }))
    }

    /// Check inputs, decide idempotence, run the stage body, record meta.
    fn run_stage(
        &self,
        stage: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        force: bool,
        body: impl FnOnce() -> Result<()>,
    ) -> Result<StageOutcome> {
        // Inputs must exist and match the hash their producing stage recorded.
        let mut input_hashes = Vec::new();
        for input in inputs {
            if !input.exists() {
                return Err(Error::Stale {
                    path: input.clone(),
                    what: "missing input artifact; run the producing stage first".into(),
                });
            }
            let current = sha256_file(input)?;
            if let Some(recorded) = self.recorded_output_hash(input)? {
                if recorded != current {
                    return Err(Error::Stale {
                        path: input.clone(),
                        what: "input artifact does not match its producing stage (stale or modified)"
                            .into(),
                    });
                }
            }
            input_hashes.push((rel_display(&self.out_dir, input), current));
        }

        let scoped = self.scoped_config(stage);
        let config_hash = sha256_hex(serde_json::to_string(&scoped).unwrap().as_bytes());

        if !force {
            if let Ok(text) = std::fs::read_to_string(self.meta_path(stage)) {
                if let Ok(meta) = serde_json::from_str::<StageMeta>(&text) {
                    let outputs_fresh = meta.outputs.iter().all(|(rel, hash)| {
                        let path = self.out_dir.join(rel);
                        path.exists() && sha256_file(&path).map(|h| &h == hash).unwrap_or(false)
                    });
                    if meta.config_hash == config_hash
                        && meta.seed == self.seed
                        && meta.inputs == input_hashes
                        && outputs_fresh
                    {
                        return Ok(StageOutcome::UpToDate);
                    }
                }
            }
        }

        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        self.write_resolved_config()?;
        body()?;

        let output_hashes = outputs
            .iter()
            .map(|p| Ok((rel_display(&self.out_dir, p), sha256_file(p)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta = StageMeta {
            stage: stage.to_string(),
            seed: self.seed,
            config_hash,
            config: scoped,
            inputs: input_hashes,
            outputs: output_hashes,
        };
        store::write_json(&self.meta_path(stage), &meta)?;
        Ok(StageOutcome::Ran)
    }

    /// The producing stage's recorded hash for an artifact, if any stage
    /// meta in this directory lists it as an output.
    fn recorded_output_hash(&self, path: &Path) -> Result<Option<String>> {
        let rel = rel_display(&self.out_dir, path);
        let Ok(entries) = std::fs::read_dir(&self.out_dir) else {
            return Ok(None);
        };
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.ends_with(".meta.json") {
                continue;
            }
            if let Ok(text) = std::fs::read_to_string(entry.path()) {
                if let Ok(meta) = serde_json::from_str::<StageMeta>(&text) {
                    if let Some((_, hash)) = meta.outputs.iter().find(|(r, _)| r == &rel) {
                        return Ok(Some(hash.clone()));
                    }
                }
            }
        }
        Ok(None)
    }

    // ── loaders ──────────────────────────────────────────────────────

    pub fn load_dataset(&self) -> Result<Dataset> {
        Ok(read_dataset(&self.dataset_path())?.1)
    }

    pub fn load_lam(&self) -> Result<LatentModel> {
        load_model(&self.lam_path())
    }

    pub fn load_chunker(&self) -> Result<ChunkerModel> {
        load_model(&self.chunker_path())
    }

    pub fn load_latents(&self) -> Result<(LatentsManifest, Vec<LatentSequence>)> {
        read_jsonl(&self.latents_path())
    }

    pub fn load_skills(&self) -> Result<(SkillsManifest, Vec<ChunkRecord>)> {
        read_jsonl(&self.skills_path())
    }

    pub fn load_policies(&self) -> Result<(HighPolicy, LowPolicy)> {
        Ok((load_model(&self.high_policy_path())?, load_model(&self.low_policy_path())?))
    }

    pub fn load_curve(&self) -> Result<Vec<TrainRecord>> {
        store::read_json(&self.curve_path().with_extension("json"))
    }

    // ── stages ───────────────────────────────────────────────────────

    pub fn gen_data(&self, force: bool) -> Result<StageOutcome> {
        self.run_stage("gen-data", &[], &[self.dataset_path()], force, || {
            let dataset = crate::world::generate_dataset(&self.config.world, self.seed)?;
            write_dataset(&self.dataset_path(), &dataset, &self.config.world, self.seed)
        })
    }

    pub fn train_lam(&self, force: bool) -> Result<StageOutcome> {
        self.run_stage("train-lam", &[self.dataset_path()], &[self.lam_path()], force, || {
            let dataset = self.load_dataset()?;
            let (model, _curve) = train_lam(&dataset.train, self.config.lam.clone(), self.seed)?;
            save_model(&self.lam_path(), &model, self.stream_states())
        })
    }

    pub fn extract_latents(&self, force: bool) -> Result<StageOutcome> {
        let inputs = [self.dataset_path(), self.lam_path()];
        self.run_stage("extract-latents", &inputs, &[self.latents_path()], force, || {
            let dataset = self.load_dataset()?;
            let lam = self.load_lam()?;
            let mut records = Vec::new();
            for (_, episodes) in dataset.splits() {
                for ep in episodes {
                    records.push(extract_latent_sequence(&lam, ep)?);
                }
            }
            let manifest = LatentsManifest {
                version: 1,
                k: lam.config.k,
                d_latent: lam.config.d_latent,
                lam_checksum: store::to_checkpoint(&lam, vec![]).params_checksum(),
                count: records.len(),
            };
            write_jsonl(&self.latents_path(), &manifest, &records)
        })
    }

    pub fn train_chunker(&self, force: bool) -> Result<StageOutcome> {
        let inputs = [self.dataset_path(), self.latents_path(), self.lam_path()];
        let outputs = [self.chunker_path(), self.curve_path()];
        self.run_stage("train-chunker", &inputs, &outputs, force, || {
            let dataset = self.load_dataset()?;
            let lam = self.load_lam()?;
            let (_, latents) = self.load_latents()?;
            let train_ids: std::collections::BTreeSet<u64> =
                dataset.train.iter().map(|e| e.id).collect();
            let train_latents: Vec<LatentSequence> =
                latents.into_iter().filter(|s| train_ids.contains(&s.episode_id)).collect();
            let (model, curve) =
                train_chunker(&train_latents, &dataset.train, &lam, self.config.chunker.clone(), self.seed)?;
            save_model(&self.chunker_path(), &model, self.stream_states())?;
            store::write_training_curve(&self.curve_path(), &curve)
        })
    }

    pub fn extract_skills(&self, force: bool) -> Result<StageOutcome> {
        let inputs = [self.latents_path(), self.chunker_path()];
        self.run_stage("extract-skills", &inputs, &[self.skills_path()], force, || {
            let chunker = self.load_chunker()?;
            let (_, latents) = self.load_latents()?;
            let mut records = Vec::new();
            for seq in &latents {
                if seq.len() < 4 || seq.len() > chunker.config.max_seq_len {
                    continue;
                }
                records.push(chunk_sequence(&chunker, seq)?);
            }
            let manifest = SkillsManifest {
                version: 1,
                d_model: chunker.config.d_model,
                chunker_checksum: store::to_checkpoint(&chunker, vec![]).params_checksum(),
                count: records.len(),
            };
            write_jsonl(&self.skills_path(), &manifest, &records)
        })
    }

    /// Pseudo-label rows for the pretraining split at the given stages.
    fn policy_dataset(&self, dataset: &Dataset, stages: Stages) -> Result<PolicyDataset> {
        let (_, latents) = self.load_latents()?;
        let (_, records) = self.load_skills()?;
        let train_ids: std::collections::BTreeSet<u64> = dataset.train.iter().map(|e| e.id).collect();
        let by_id: std::collections::BTreeMap<u64, &ChunkRecord> =
            records.iter().map(|r| (r.episode_id, r)).collect();
        let mut pairs_lat = Vec::new();
        let mut pairs_rec = Vec::new();
        for seq in &latents {
            if !train_ids.contains(&seq.episode_id) {
                continue;
            }
            let Some(record) = by_id.get(&seq.episode_id) else {
                continue; // sequence was out of the chunker's length range
            };
            pairs_lat.push(seq.clone());
            pairs_rec.push((*record).clone());
        }
        PolicyDataset::build(
            &dataset.train,
            &pairs_lat,
            &pairs_rec,
            stages,
            self.config.world.task_library_size,
        )
    }

    pub fn pretrain_policy(&self, force: bool) -> Result<StageOutcome> {
        let inputs = [self.dataset_path(), self.latents_path(), self.skills_path()];
        let outputs = [self.high_policy_path(), self.low_policy_path(), self.flat_pretrained_path()];
        self.run_stage("pretrain-policy", &inputs, &outputs, force, || {
            let dataset = self.load_dataset()?;
            let data = self.policy_dataset(&dataset, self.config.stages())?;
            let (high, low, _) = pretrain_policies(&data, &self.config.policy, self.seed)?;
            let (flat, _) = pretrain_flat(&data, &self.config.policy, self.seed)?;
            save_model(&self.high_policy_path(), &high, self.stream_states())?;
            save_model(&self.low_policy_path(), &low, self.stream_states())?;
            save_model(&self.flat_pretrained_path(), &flat, self.stream_states())
        })
    }

    pub fn finetune_policy(&self, fraction: f64, force: bool) -> Result<StageOutcome> {
        let stage = format!("finetune-policy-{}", frac_label(fraction));
        let inputs = [
            self.dataset_path(),
            self.high_policy_path(),
            self.low_policy_path(),
            self.flat_pretrained_path(),
        ];
        let outputs = [self.finetuned_low_path(fraction), self.flat_scratch_path(fraction)];
        self.run_stage(&stage, &inputs, &outputs, force, || {
            let dataset = self.load_dataset()?;
            let demos = select_demos(&dataset.train, fraction, self.seed)?;
            let (high, low) = self.load_policies()?;
            let (tuned, _) = finetune_low_level(&high, &low, &demos, &self.config.policy, self.seed)?;
            save_model(&self.finetuned_low_path(fraction), &tuned, self.stream_states())?;

            // Fig.-style baseline: flat policy trained on the demos alone.
            let scratch = FlatPolicy::init(
                self.config.world.task_library_size,
                low.latent_dim,
                &self.config.policy,
                self.seed,
            );
            let (flat_tuned, _) = finetune_flat(&scratch, &demos, &self.config.policy, self.seed)?;
            save_model(&self.flat_scratch_path(fraction), &flat_tuned, self.stream_states())
        })
    }

    pub fn eval_policy(&self, fraction: f64, force: bool) -> Result<StageOutcome> {
        let stage = format!("eval-policy-{}", frac_label(fraction));
        let inputs = [
            self.dataset_path(),
            self.high_policy_path(),
            self.finetuned_low_path(fraction),
            self.flat_scratch_path(fraction),
        ];
        let out_json = self.policy_eval_path(fraction);
        let out_csv = out_json.with_extension("csv");
        self.run_stage(&stage, &inputs, &[out_json.clone(), out_csv.clone()], force, || {
            let dataset = self.load_dataset()?;
            let high: HighPolicy = load_model(&self.high_policy_path())?;
            let low: LowPolicy = load_model(&self.finetuned_low_path(fraction))?;
            let flat: FlatPolicy = load_model(&self.flat_scratch_path(fraction))?;
            let eval = &self.config.eval;

            let hier = success_rate(
                || Box::new(HierarchicalPolicy { high: &high, low: &low }) as Box<dyn Policy>,
                &dataset.library,
                &self.config.world,
                eval.episodes_per_task,
                &eval.seeds,
                self.threads,
            )?;
            let flat_report = success_rate(
                || Box::new(FlatRolloutPolicy { flat: &flat }) as Box<dyn Policy>,
                &dataset.library,
                &self.config.world,
                eval.episodes_per_task,
                &eval.seeds,
                self.threads,
            )?;
            let report = FractionEval { fraction, hierarchical: hier, flat_scratch: flat_report };
            store::write_json(&out_json, &report)?;

            let mut csv = String::from("policy,task_id,successes,rollouts,success_rate\n");
            for (name, r) in [("hierarchical", &report.hierarchical), ("flat_scratch", &report.flat_scratch)] {
                for t in &r.per_task {
                    csv.push_str(&format!(
                        "{name},{},{},{},{}\n",
                        t.task_id,
                        t.successes,
                        t.rollouts,
                        t.successes as f64 / t.rollouts as f64
                    ));
                }
            }
            store::write_atomic(&out_csv, csv.as_bytes())
        })
    }

    pub fn eval_segmentation(&self, force: bool) -> Result<StageOutcome> {
        let inputs = [self.dataset_path(), self.lam_path(), self.chunker_path()];
        let seg_json = self.segmentation_path();
        let seg_csv = seg_json.with_extension("csv");
        let pred_json = self.latent_pred_path();
        let outputs = [seg_json.clone(), seg_csv.clone(), pred_json.clone()];
        self.run_stage("eval-segmentation", &inputs, &outputs, force, || {
            let dataset = self.load_dataset()?;
            let lam = self.load_lam()?;
            let chunker = self.load_chunker()?;
            let report = evaluate_segmentation(
                &chunker,
                &lam,
                &dataset.val,
                self.config.skill_stage,
                self.config.eval.boundary_tolerance,
            )?;
            store::write_json(&seg_json, &report)?;
            let csv = format!(
                "stage,tolerance,precision,recall,f1,comp1,comp2,purity,episodes\n{},{},{},{},{},{},{},{},{}\n",
                report.stage,
                report.tolerance,
                report.precision,
                report.recall,
                report.f1,
                report.compression[0],
                report.compression[1],
                report.purity,
                report.episodes
            );
            store::write_atomic(&seg_csv, csv.as_bytes())?;

            let pairs = held_out_pairs(&lam, &chunker, &dataset)?;
            let borrowed: Vec<(&LatentSequence, &crate::world::Episode)> =
                pairs.iter().map(|(s, e)| (s, *e)).collect();
            let pred = latent_pred_error(&chunker, &lam, &borrowed)?;
            store::write_json(&pred_json, &pred)
        })
    }

    pub fn ablate(&self, force: bool) -> Result<StageOutcome> {
        let inputs = [self.dataset_path(), self.latents_path(), self.skills_path()];
        let out_csv = self.ablation_path();
        let out_json = out_csv.with_extension("json");
        self.run_stage("ablate", &inputs, &[out_csv.clone(), out_json.clone()], force, || {
            let rows = self.run_ablation_rows()?;
            store::write_json(&out_json, &rows)?;
            let mut csv = String::from(ABLATION_HEADER);
            csv.push('\n');
            for r in &rows {
                let opt = |v: Option<usize>| v.map_or("-".to_string(), |s| s.to_string());
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    if r.pretrain { "yes" } else { "no" },
                    opt(r.skill_stage),
                    opt(r.action_stage),
                    r.success_rate,
                    r.std_err
                ));
            }
            store::write_atomic(&out_csv, csv.as_bytes())
        })
    }

    /// The ablation grid: flat vs hierarchical, with and without
    /// pretraining, sweeping the stage choices. All rows share the same
    /// gradient-step budgets and fine-tune on the full demo pool.
    fn run_ablation_rows(&self) -> Result<Vec<AblationRow>> {
        let dataset = self.load_dataset()?;
        let demos = select_demos(&dataset.train, 1.0, self.seed)?;
        let cfg = &self.config.policy;
        let eval = &self.config.eval;
        let n_tasks = self.config.world.task_library_size;
        let mut rows = Vec::new();

        let evaluate_flat = |flat: &FlatPolicy| -> Result<PolicyReport> {
            success_rate(
                || Box::new(FlatRolloutPolicy { flat }) as Box<dyn Policy>,
                &dataset.library,
                &self.config.world,
                eval.episodes_per_task,
                &eval.seeds,
                self.threads,
            )
        };
        let evaluate_hier = |high: &HighPolicy, low: &LowPolicy| -> Result<PolicyReport> {
            success_rate(
                || Box::new(HierarchicalPolicy { high, low }) as Box<dyn Policy>,
                &dataset.library,
                &self.config.world,
                eval.episodes_per_task,
                &eval.seeds,
                self.threads,
            )
        };

        // Flat, no pretraining (the architecture alone).
        {
            let scratch = FlatPolicy::init(n_tasks, self.config.lam.d_latent, cfg, self.seed);
            let (tuned, _) = finetune_flat(&scratch, &demos, cfg, self.seed)?;
            let report = evaluate_flat(&tuned)?;
            rows.push(AblationRow {
                pretrain: false,
                hierarchical: false,
                skill_stage: None,
                action_stage: None,
                success_rate: report.success_rate,
                std_err: report.std_err,
            });
        }

        // Flat, pretrained on stage-0 latent actions.
        {
            let data = self.policy_dataset(&dataset, Stages { skill: 2, action: 0 })?;
            let (flat, _) = pretrain_flat(&data, cfg, self.seed)?;
            let (tuned, _) = finetune_flat(&flat, &demos, cfg, self.seed)?;
            let report = evaluate_flat(&tuned)?;
            rows.push(AblationRow {
                pretrain: true,
                hierarchical: false,
                skill_stage: None,
                action_stage: Some(0),
                success_rate: report.success_rate,
                std_err: report.std_err,
            });
        }

        // Hierarchical, no pretraining: fine-tune only, random frozen skills.
        {
            let data = self.policy_dataset(&dataset, self.config.stages())?;
            let high = HighPolicy::init(n_tasks, data.skill_dim, cfg, self.seed);
            let low = LowPolicy::init(data.skill_dim, data.action_dim, cfg, self.seed);
            let (tuned, _) = finetune_low_level(&high, &low, &demos, cfg, self.seed)?;
            let report = evaluate_hier(&high, &tuned)?;
            rows.push(AblationRow {
                pretrain: false,
                hierarchical: true,
                skill_stage: Some(self.config.skill_stage),
                action_stage: Some(self.config.action_stage),
                success_rate: report.success_rate,
                std_err: report.std_err,
            });
        }

        // Hierarchical, pretrained, over the stage grid.
        for stages in [
            Stages { skill: 1, action: 0 },
            Stages { skill: 2, action: 0 },
            Stages { skill: 2, action: 1 },
        ] {
            let data = self.policy_dataset(&dataset, stages)?;
            let (high, low, _) = pretrain_policies(&data, cfg, self.seed)?;
            let (tuned, _) = finetune_low_level(&high, &low, &demos, cfg, self.seed)?;
            let report = evaluate_hier(&high, &tuned)?;
            rows.push(AblationRow {
                pretrain: true,
                hierarchical: true,
                skill_stage: Some(stages.skill),
                action_stage: Some(stages.action),
                success_rate: report.success_rate,
                std_err: report.std_err,
            });
        }

        Ok(rows)
    }

    pub fn plot(&self, force: bool) -> Result<StageOutcome> {
        let curve_json = self.curve_path().with_extension("json");
        let plots = self.plots_dir();
        let mut outputs = vec![plots.join("training_curve.svg")];
        let have_evals: Vec<f64> = self
            .config
            .demo_fractions
            .iter()
            .copied()
            .filter(|&f| self.policy_eval_path(f).exists())
            .collect();
        if !have_evals.is_empty() {
            outputs.push(plots.join("data_efficiency.svg"));
        }
        self.run_stage("plot", &[curve_json.clone()], &outputs, force, || {
            let curve: Vec<TrainRecord> = store::read_json(&curve_json)?;
            let pick = |f: fn(&TrainRecord) -> f64| -> Vec<(f64, f64)> {
                curve.iter().map(|r| (r.step as f64, f(r))).collect()
            };
            store::write_line_chart(
                &plots.join("training_curve.svg"),
                "Chunker training",
                "step",
                "loss",
                &[
                    Series { name: "total", points: pick(|r| r.loss) },
                    Series { name: "latent", points: pick(|r| r.l_latent) },
                    Series { name: "reconstruction", points: pick(|r| r.l_rec) },
                    Series { name: "ratio", points: pick(|r| r.l_ratio) },
                ],
            )?;

            if !have_evals.is_empty() {
                let mut hier = Vec::new();
                let mut flat = Vec::new();
                for &f in &have_evals {
                    let eval: FractionEval = store::read_json(&self.policy_eval_path(f))?;
                    hier.push((f, eval.hierarchical.success_rate));
                    flat.push((f, eval.flat_scratch.success_rate));
                }
                store::write_line_chart(
                    &plots.join("data_efficiency.svg"),
                    "Success rate vs demo fraction",
                    "demo fraction",
                    "success rate",
                    &[
                        Series { name: "hierarchical (pretrained)", points: hier },
                        Series { name: "flat (scratch)", points: flat },
                    ],
                )?;
            }
            Ok(())
        })
    }

    fn stream_states(&self) -> Vec<RngStreamState> {
        vec![
            RngStreamState { stream: "init".into(), state: Rng::new(self.seed, Stream::Init, 0).state() },
            RngStreamState { stream: "data".into(), state: Rng::new(self.seed, Stream::Data, 0).state() },
            RngStreamState {
                stream: "rollout".into(),
                state: Rng::new(self.seed, Stream::Rollout, 0).state(),
            },
        ]
    }
}

/// Validation-split (sequence, episode) pairs usable by the chunker.
pub fn held_out_pairs<'a>(
    lam: &LatentModel,
    chunker: &ChunkerModel,
    dataset: &'a Dataset,
) -> Result<Vec<(LatentSequence, &'a crate::world::Episode)>> {
    let mut pairs = Vec::new();
    for ep in &dataset.val {
        let seq = extract_latent_sequence(lam, ep)?;
        if seq.len() >= 4 && seq.len() <= chunker.config.max_seq_len {
            pairs.push((seq, ep));
        }
    }
    Ok(pairs)
}

fn rel_display(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned()
}

/// All segmentation/prediction reports produced by a pipeline run, for
/// consumers that want one-stop access.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub segmentation: SegmentationReport,
    pub latent_pred: LatentPredReport,
}
