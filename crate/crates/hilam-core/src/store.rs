//! Persistence: bit-exact, versioned file formats.
//!
//! Checkpoints are a JSON manifest (format version, model kind, config
//! snapshot, parameter names with shapes and byte offsets, RNG stream
//! states, payload checksum) followed by one binary blob of all parameter
//! values as little-endian IEEE-754 f64 in manifest order. Datasets and
//! other record files are JSON Lines with a manifest on the first line.
//! Every writer goes through write-temp-then-rename, so readers never
//! observe partial files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chunker::{ChunkerConfig, ChunkerModel};
use crate::error::{Error, Result};
use crate::lam::{LamConfig, LatentModel};
use crate::policy::{ActiveHead, FlatPolicy, HighPolicy, LowPolicy};
use crate::tensor::{ParamSet, Tensor};
use crate::world::{Dataset, Episode, TaskScript, WorldConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DATASET_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"HLCK";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Write via a temp file in the same directory, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ── checkpoints ──────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngStreamState {
    pub stream: String,
    pub state: [u64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    pub rng_streams: Vec<RngStreamState>,
    /// SHA-256 of the payload blob.
    pub checksum: String,
}

/// In-memory checkpoint: everything needed to rebuild a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamSet,
    pub rng_streams: Vec<RngStreamState>,
}

impl Checkpoint {
    /// Payload checksum; constant for a frozen model, so the freeze
    /// contract can be asserted across pipeline stages.
    pub fn params_checksum(&self) -> String {
        sha256_hex(&payload_bytes(&self.params))
    }
}

fn payload_bytes(params: &ParamSet) -> Vec<u8> {
    let mut blob = Vec::with_capacity(params.numel() * 8);
    for (_, tensor) in params.iter() {
        for v in &tensor.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    blob
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let blob = payload_bytes(&ckpt.params);
    let mut entries = Vec::with_capacity(ckpt.params.len());
    let mut offset = 0u64;
    for (name, tensor) in ckpt.params.iter() {
        entries.push(ParamEntry { name: name.to_string(), shape: tensor.shape.clone(), offset });
        offset += (tensor.numel() * 8) as u64;
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        kind: ckpt.kind.clone(),
        config: ckpt.config.clone(),
        params: entries,
        rng_streams: ckpt.rng_streams.clone(),
        checksum: sha256_hex(&blob),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Corrupt { path: path.into(), what: format!("manifest encode: {e}") })?;

    let mut out = Vec::with_capacity(12 + manifest_bytes.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&blob);
    write_atomic(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |what: &str| Error::Corrupt { path: path.into(), what: what.to_string() };
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let manifest_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + manifest_len {
        return Err(corrupt("truncated manifest"));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[12..12 + manifest_len])
        .map_err(|e| corrupt(&format!("manifest parse: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let blob = &bytes[12 + manifest_len..];
    if sha256_hex(blob) != manifest.checksum {
        return Err(corrupt("payload checksum mismatch"));
    }

    let mut params = ParamSet::new();
    let mut expected_offset = 0u64;
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        if entry.offset != expected_offset {
            return Err(corrupt(&format!(
                "parameter {:?}: offset {} inconsistent with shapes (expected {})",
                entry.name, entry.offset, expected_offset
            )));
        }
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if end > blob.len() {
            return Err(corrupt(&format!("parameter {:?}: payload overrun", entry.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(&entry.name, Tensor::new(entry.shape.clone(), data).with_grad());
        expected_offset = end as u64;
    }
    if expected_offset as usize != blob.len() {
        return Err(corrupt("payload has trailing bytes"));
    }

    Ok(Checkpoint {
        kind: manifest.kind,
        config: manifest.config,
        params,
        rng_streams: manifest.rng_streams,
    })
}

// ── model <-> checkpoint conversions ─────────────────────────────────

/// A model type with a stable checkpoint representation.
pub trait Persistable: Sized {
    const KIND: &'static str;
    fn meta(&self) -> serde_json::Value;
    fn params(&self) -> &ParamSet;
    fn from_parts(meta: serde_json::Value, params: ParamSet) -> Result<Self>;
}

pub fn to_checkpoint<M: Persistable>(model: &M, rng_streams: Vec<RngStreamState>) -> Checkpoint {
    Checkpoint {
        kind: M::KIND.to_string(),
        config: model.meta(),
        params: model.params().clone(),
        rng_streams,
    }
}

pub fn from_checkpoint<M: Persistable>(ckpt: Checkpoint) -> Result<M> {
    if ckpt.kind != M::KIND {
        return Err(Error::Config(format!(
            "checkpoint holds a {:?} model, expected {:?}",
            ckpt.kind,
            M::KIND
        )));
    }
    M::from_parts(ckpt.config, ckpt.params)
}

pub fn save_model<M: Persistable>(path: &Path, model: &M, rng_streams: Vec<RngStreamState>) -> Result<()> {
    save_checkpoint(path, &to_checkpoint(model, rng_streams))
}

pub fn load_model<M: Persistable>(path: &Path) -> Result<M> {
    from_checkpoint(load_checkpoint(path)?)
}

fn meta_error<E: std::fmt::Display>(kind: &str) -> impl FnOnce(E) -> Error + '_ {
    move |e| Error::Config(format!("{kind} checkpoint config: {e}"))
}

impl Persistable for LatentModel {
    const KIND: &'static str = "lam";

    fn meta(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("lam config serializes")
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn from_parts(meta: serde_json::Value, params: ParamSet) -> Result<Self> {
        let config: LamConfig = serde_json::from_value(meta).map_err(meta_error("lam"))?;
        Ok(LatentModel { config, params })
    }
}

#[derive(Serialize, Deserialize)]
struct ChunkerMeta {
    config: ChunkerConfig,
    d_latent: usize,
}

impl Persistable for ChunkerModel {
    const KIND: &'static str = "chunker";

    fn meta(&self) -> serde_json::Value {
        serde_json::to_value(ChunkerMeta { config: self.config.clone(), d_latent: self.d_latent })
            .expect("chunker config serializes")
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn from_parts(meta: serde_json::Value, params: ParamSet) -> Result<Self> {
        let meta: ChunkerMeta = serde_json::from_value(meta).map_err(meta_error("chunker"))?;
        Ok(ChunkerModel { config: meta.config, d_latent: meta.d_latent, params })
    }
}

#[derive(Serialize, Deserialize)]
struct HighPolicyMeta {
    n_tasks: usize,
    task_embed_dim: usize,
    hidden: usize,
    skill_dim: usize,
}

impl Persistable for HighPolicy {
    const KIND: &'static str = "policy_high";

    fn meta(&self) -> serde_json::Value {
        serde_json::to_value(HighPolicyMeta {
            n_tasks: self.n_tasks,
            task_embed_dim: self.task_embed_dim,
            hidden: self.hidden,
            skill_dim: self.skill_dim,
        })
        .expect("high-policy config serializes")
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn from_parts(meta: serde_json::Value, params: ParamSet) -> Result<Self> {
        let m: HighPolicyMeta = serde_json::from_value(meta).map_err(meta_error("policy_high"))?;
        Ok(HighPolicy {
            n_tasks: m.n_tasks,
            task_embed_dim: m.task_embed_dim,
            hidden: m.hidden,
            skill_dim: m.skill_dim,
            params,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct LowPolicyMeta {
    skill_dim: usize,
    latent_dim: usize,
    hidden: usize,
    active_head: ActiveHead,
}

impl Persistable for LowPolicy {
    const KIND: &'static str = "policy_low";

    fn meta(&self) -> serde_json::Value {
        serde_json::to_value(LowPolicyMeta {
            skill_dim: self.skill_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            active_head: self.active_head,
        })
        .expect("low-policy config serializes")
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn from_parts(meta: serde_json::Value, params: ParamSet) -> Result<Self> {
        let m: LowPolicyMeta = serde_json::from_value(meta).map_err(meta_error("policy_low"))?;
        Ok(LowPolicy {
            skill_dim: m.skill_dim,
            latent_dim: m.latent_dim,
            hidden: m.hidden,
            active_head: m.active_head,
            params,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FlatPolicyMeta {
    n_tasks: usize,
    task_embed_dim: usize,
    hidden: usize,
    latent_dim: usize,
    active_head: ActiveHead,
}

impl Persistable for FlatPolicy {
    const KIND: &'static str = "policy_flat";

    fn meta(&self) -> serde_json::Value {
        serde_json::to_value(FlatPolicyMeta {
            n_tasks: self.n_tasks,
            task_embed_dim: self.task_embed_dim,
            hidden: self.hidden,
            latent_dim: self.latent_dim,
            active_head: self.active_head,
        })
        .expect("flat-policy config serializes")
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn from_parts(meta: serde_json::Value, params: ParamSet) -> Result<Self> {
        let m: FlatPolicyMeta = serde_json::from_value(meta).map_err(meta_error("policy_flat"))?;
        Ok(FlatPolicy {
            n_tasks: m.n_tasks,
            task_embed_dim: m.task_embed_dim,
            hidden: m.hidden,
            latent_dim: m.latent_dim,
            active_head: m.active_head,
            params,
        })
    }
}

// ── JSON Lines files ─────────────────────────────────────────────────

/// First line: manifest. Remaining lines: one record each.
pub fn write_jsonl<M: Serialize, R: Serialize>(path: &Path, manifest: &M, records: &[R]) -> Result<()> {
    let mut out = String::new();
    out.push_str(
        &serde_json::to_string(manifest)
            .map_err(|e| Error::Corrupt { path: path.into(), what: format!("manifest encode: {e}") })?,
    );
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Corrupt {
            path: path.into(),
            what: format!("record encode: {e}"),
        })?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Read a JSONL file written by [`write_jsonl`]; parse failures name the
/// 1-based line number.
pub fn read_jsonl<M: DeserializeOwned, R: DeserializeOwned>(path: &Path) -> Result<(M, Vec<R>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Parse { path: path.into(), line: 1, what: "empty file".into() })?;
    let manifest: M = serde_json::from_str(first)
        .map_err(|e| Error::Parse { path: path.into(), line: 1, what: e.to_string() })?;
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let record: R = serde_json::from_str(line)
            .map_err(|e| Error::Parse { path: path.into(), line: idx + 1, what: e.to_string() })?;
        records.push(record);
    }
    Ok((manifest, records))
}

// ── dataset files ────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub world: WorldConfig,
    pub library: Vec<TaskScript>,
    pub train_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
}

pub fn write_dataset(path: &Path, dataset: &Dataset, world: &WorldConfig, seed: u64) -> Result<()> {
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        seed,
        world: world.clone(),
        library: dataset.library.clone(),
        train_ids: dataset.train.iter().map(|e| e.id).collect(),
        val_ids: dataset.val.iter().map(|e| e.id).collect(),
        test_ids: dataset.test.iter().map(|e| e.id).collect(),
    };
    let episodes: Vec<&Episode> =
        dataset.train.iter().chain(&dataset.val).chain(&dataset.test).collect();
    write_jsonl(path, &manifest, &episodes)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetManifest, Dataset)> {
    let (manifest, episodes): (DatasetManifest, Vec<Episode>) = read_jsonl(path)?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            found: manifest.version,
            expected: DATASET_VERSION,
        });
    }
    let expected = manifest.train_ids.len() + manifest.val_ids.len() + manifest.test_ids.len();
    if episodes.len() != expected {
        return Err(Error::Corrupt {
            path: path.into(),
            what: format!("manifest lists {expected} episodes, file has {}", episodes.len()),
        });
    }
    let mut all_ids: Vec<u64> = manifest
        .train_ids
        .iter()
        .chain(&manifest.val_ids)
        .chain(&manifest.test_ids)
        .copied()
        .collect();
    all_ids.sort_unstable();
    all_ids.dedup();
    if all_ids.len() != expected {
        return Err(Error::Corrupt { path: path.into(), what: "split id sets overlap".into() });
    }

    let by_id = |ids: &[u64]| -> Result<Vec<Episode>> {
        ids.iter()
            .map(|id| {
                episodes
                    .iter()
                    .find(|e| e.id == *id)
                    .cloned()
                    .ok_or_else(|| Error::Corrupt {
                        path: path.into(),
                        what: format!("episode {id} listed in manifest but missing"),
                    })
            })
            .collect()
    };
    let dataset = Dataset {
        library: manifest.library.clone(),
        train: by_id(&manifest.train_ids)?,
        val: by_id(&manifest.val_ids)?,
        test: by_id(&manifest.test_ids)?,
    };
    for (_, eps) in dataset.splits() {
        for ep in eps {
            ep.validate()?;
        }
    }
    Ok((manifest, dataset))
}

// ── metrics files ────────────────────────────────────────────────────

pub const TRAINING_CURVE_HEADER: &str = "step,loss,l_latent,l_rec,l_ratio,comp1,comp2";

/// CSV with the fixed curve header plus a JSON twin at `.json`.
pub fn write_training_curve(csv_path: &Path, records: &[crate::chunker::train::TrainRecord]) -> Result<()> {
    let mut csv = String::from(TRAINING_CURVE_HEADER);
    csv.push('\n');
    for r in records {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.loss, r.l_latent, r.l_rec, r.l_ratio, r.comp1, r.comp2
        ));
    }
    write_atomic(csv_path, csv.as_bytes())?;
    let twin = csv_path.with_extension("json");
    let json = serde_json::to_string_pretty(records)
        .map_err(|e| Error::Corrupt { path: twin.clone(), what: e.to_string() })?;
    write_atomic(&twin, json.as_bytes())
}

/// Serialize any report as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Corrupt { path: path.into(), what: e.to_string() })?;
    write_atomic(path, json.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: path.into(), line: 0, what: e.to_string() })
}

// ── SVG line charts ──────────────────────────────────────────────────

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Standalone SVG line chart with labeled axes and a small legend.
pub fn write_line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
) -> Result<()> {
    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const ML: f64 = 70.0;
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 55.0;
    const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.0), hi.max(p.0))
    });
    let (mut y0, mut y1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.1), hi.max(p.1))
    });
    if !x0.is_finite() || x0 == x1 {
        x0 -= 0.5;
        x1 = x0 + 1.0;
    }
    if !y0.is_finite() || y0 == y1 {
        y0 -= 0.5;
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    ));

    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    svg.push_str(&format!("<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n", H - MB));
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            sx(fx),
            H - MB + 18.0,
            format_tick(fx)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            ML - 6.0,
            sy(fy) + 4.0,
            format_tick(fy)
        ));
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>\n",
            sy(fy),
            W - MR,
            sy(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
        (ML + W - MR) / 2.0,
        H - 12.0,
        xml_escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0,
        xml_escape(y_label)
    ));

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{},{}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            pts.join(" ")
        ));
        let ly = MT + 16.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"3\" fill=\"{color}\"/>\n",
            W - MR - 150.0,
            ly - 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            W - MR - 132.0,
            ly,
            xml_escape(s.name)
        ));
    }
    svg.push_str("</svg>\n");
    write_atomic(path, svg.as_bytes())
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
