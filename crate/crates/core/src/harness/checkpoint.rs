//! Checkpoint directories: a `manifest.txt` of `key=value` lines and a
//! `weights.bin` of little-endian binary32 values.
//!
//! Every tensor listed in the manifest contributes its values, then its first
//! and second Adam moments, in manifest order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::encoder::{GroupId, ModuleKind, Param, ParameterGroup, PartitionedEncoder};
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::tensor::{Init, Tensor};

pub const FORMAT_VERSION: &str = "dmao-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// Scalar training-loop state stored next to the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainState {
    /// Number of completed steps; the next step to run.
    pub step: usize,
    /// Adam update count.
    pub adam_t: u64,
    /// Steps since the last score refresh.
    pub steps_since_update: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupEntry {
    pub id: GroupId,
    pub param_count: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parsed `manifest.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    pub config: TrainConfig,
    pub state: TrainState,
    pub growth_counter: u32,
    pub groups: Vec<GroupEntry>,
    pub tensors: Vec<TensorEntry>,
    pub weights_bytes: usize,
    pub weights_sha256: String,
}

/// A model with the run configuration and loop state it was saved with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: PartitionedEncoder<f32>,
    pub state: TrainState,
}

/// Names of [`PartitionedEncoder::params`] in the same order.
pub fn param_names<F>(model: &PartitionedEncoder<F>) -> Vec<String> {
    let mut out = vec!["frontend.w".to_string(), "frontend.b".to_string()];
    for (l, layer) in model.layers.iter().enumerate() {
        for m in &layer.modules {
            out.push(format!("L{l}.{}.norm.gamma", m.kind));
            out.push(format!("L{l}.{}.norm.beta", m.kind));
            for g in &m.groups {
                out.extend(g.slices.iter().map(|p| format!("{}.{}", g.id, p.name)));
                out.push(format!("{}.scale", g.id));
            }
        }
    }
    out.extend(["final.gamma", "final.beta", "head.w", "head.b"].map(String::from));
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn flatten_toml(table: &toml::Table, prefix: &str, out: &mut Vec<(String, String)>) {
    for (k, v) in table {
        let key = format!("{prefix}{k}");
        match v {
            toml::Value::Table(t) => flatten_toml(t, &format!("{key}."), out),
            other => out.push((key, other.to_string())),
        }
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Writes `model` and loop state into directory `dir` (created if missing).
pub fn save_checkpoint(
    model: &PartitionedEncoder<f32>,
    config: &TrainConfig,
    state: &TrainState,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = model.params();
    let names = param_names(model);
    let mut bytes = Vec::with_capacity(12 * model.count_params(crate::encoder::ParamScope::All));
    for p in &params {
        for buf in [p.value.data(), &p.m, &p.v] {
            for x in buf {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    let mut m = String::new();
    let mut kv = |k: &str, v: &dyn std::fmt::Display| {
        let _ = writeln!(m, "{k}={v}");
    };
    kv("version", &FORMAT_VERSION);
    let table = toml::Table::try_from(config).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut flat = Vec::new();
    flatten_toml(&table, "", &mut flat);
    for (k, v) in &flat {
        kv(&format!("config.{k}"), v);
    }
    kv("state.step", &state.step);
    kv("state.adam_t", &state.adam_t);
    kv("state.steps_since_update", &state.steps_since_update);
    kv("growth_counter", &model.growth_counter);
    let groups = model.enumerate_groups();
    kv("group_count", &groups.len());
    for (i, g) in groups.iter().enumerate() {
        kv(&format!("group.{i}"), &format_args!("{} {} {:016x}", g.id, g.param_count, g.score.to_bits()));
    }
    kv("tensor_count", &params.len());
    for (i, (name, p)) in names.iter().zip(&params).enumerate() {
        kv(&format!("tensor.{i}"), &format_args!("{name} {}", shape_text(p.value.shape())));
    }
    kv("weights_bytes", &bytes.len());
    kv("weights_sha256", &hex(&Sha256::digest(&bytes)));

    fs::write(dir.join(WEIGHTS_FILE), &bytes)?;
    fs::write(dir.join(MANIFEST_FILE), m)?;
    Ok(())
}

struct Fields {
    path: PathBuf,
    map: HashMap<String, String>,
    config_lines: Vec<String>,
}

impl Fields {
    fn get(&self, key: &str) -> Result<&str> {
        self.map.get(key).map(String::as_str).ok_or_else(|| Error::corrupt(&self.path, format!("missing key {key}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.parse().map_err(|_| Error::corrupt(&self.path, format!("bad value for {key}")))
    }
}

/// Reads and validates `dir/manifest.txt` without touching the weights.
pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    let bad = |reason: String| Error::corrupt(&path, reason);
    let mut fields = Fields { path: path.clone(), map: HashMap::new(), config_lines: Vec::new() };
    for (n, line) in text.lines().enumerate() {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {} is not key=value", n + 1)))?;
        if let Some(ck) = k.strip_prefix("config.") {
            fields.config_lines.push(format!("{ck} = {v}"));
        }
        if fields.map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(bad(format!("duplicate key {k}")));
        }
    }
    let version = fields.get("version")?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("version {version:?}, expected {FORMAT_VERSION:?}")));
    }
    let config =
        TrainConfig::from_toml(&fields.config_lines.join("\n")).map_err(|e| bad(format!("embedded config: {e}")))?;
    let state = TrainState {
        step: fields.parse("state.step")?,
        adam_t: fields.parse("state.adam_t")?,
        steps_since_update: fields.parse("state.steps_since_update")?,
    };

    let group_count: usize = fields.parse("group_count")?;
    let mut groups = Vec::with_capacity(group_count);
    for i in 0..group_count {
        let raw = fields.get(&format!("group.{i}"))?;
        let parts: Vec<&str> = raw.split(' ').collect();
        let [id, count, score] = parts[..] else { return Err(bad(format!("malformed group.{i}"))) };
        groups.push(GroupEntry {
            id: id.parse().map_err(|_| bad(format!("bad group id {id}")))?,
            param_count: count.parse().map_err(|_| bad(format!("bad size in group.{i}")))?,
            score: f64::from_bits(u64::from_str_radix(score, 16).map_err(|_| bad(format!("bad score in group.{i}")))?),
        });
    }

    let tensor_count: usize = fields.parse("tensor_count")?;
    let mut tensors = Vec::with_capacity(tensor_count);
    for i in 0..tensor_count {
        let raw = fields.get(&format!("tensor.{i}"))?;
        let (name, shape) = raw.split_once(' ').ok_or_else(|| bad(format!("malformed tensor.{i}")))?;
        let shape = shape
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("bad shape in tensor.{i}")))?;
        tensors.push(TensorEntry { name: name.to_string(), shape });
    }
    let weights_bytes: usize = fields.parse("weights_bytes")?;
    let expected: usize = tensors.iter().map(|t| 12 * t.len()).sum();
    if weights_bytes != expected {
        return Err(bad(format!("weights_bytes {weights_bytes} disagrees with tensor list ({expected})")));
    }
    Ok(CheckpointManifest {
        config,
        state,
        growth_counter: fields.parse("growth_counter")?,
        groups,
        tensors,
        weights_bytes,
        weights_sha256: fields.get("weights_sha256")?.to_string(),
    })
}

/// Rebuilds the group layout recorded in `manifest` on a freshly built model.
fn restore_layout(model: &mut PartitionedEncoder<f32>, manifest: &CheckpointManifest, path: &Path) -> Result<()> {
    let dims = *model.dims();
    for (l, layer) in model.layers.iter_mut().enumerate() {
        for module in &mut layer.modules {
            let kind: ModuleKind = module.kind;
            module.groups = manifest
                .groups
                .iter()
                .filter(|g| g.id.layer == l && g.id.kind == kind)
                .enumerate()
                .map(|(slot, g)| {
                    if g.id.slot != slot {
                        return Err(Error::corrupt(path, format!("group {} out of order", g.id)));
                    }
                    let slices = dims
                        .slice_shapes(kind)
                        .iter()
                        .zip(kind.slice_names())
                        .map(|((shape, _), name)| Ok(Param::new(name, Tensor::alloc(shape, Init::Zeros)?)))
                        .collect::<Result<Vec<_>>>()?;
                    let mut group = ParameterGroup::new(g.id, slices);
                    group.score = g.score;
                    Ok(group)
                })
                .collect::<Result<Vec<_>>>()?;
        }
    }
    if manifest.groups.iter().any(|g| model.group(g.id).is_none()) {
        return Err(Error::corrupt(path, "group list names a module the config does not have"));
    }
    model.growth_counter = manifest.growth_counter;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath)?;
    let bad = |reason: String| Error::corrupt(&wpath, reason);
    if bytes.len() != manifest.weights_bytes {
        return Err(bad(format!("{} bytes, manifest expects {}", bytes.len(), manifest.weights_bytes)));
    }
    if hex(&Sha256::digest(&bytes)) != manifest.weights_sha256 {
        return Err(bad("checksum mismatch".into()));
    }

    let mut model = PartitionedEncoder::<f32>::build(&manifest.config.model)?;
    restore_layout(&mut model, &manifest, &dir.join(MANIFEST_FILE))?;
    let names = param_names(&model);
    let mut params = model.params_mut();
    if params.len() != manifest.tensors.len() {
        return Err(bad(format!("{} tensors listed, model has {}", manifest.tensors.len(), params.len())));
    }
    let mut floats = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for ((p, name), entry) in params.iter_mut().zip(&names).zip(&manifest.tensors) {
        if *name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(bad(format!("tensor {} {:?} does not match model slot {name}", entry.name, entry.shape)));
        }
        p.value.data_mut().iter_mut().for_each(|x| *x = floats.next().expect("length checked"));
        p.m.iter_mut().for_each(|x| *x = floats.next().expect("length checked"));
        p.v.iter_mut().for_each(|x| *x = floats.next().expect("length checked"));
    }
    drop(params);
    Ok(Checkpoint { config: manifest.config, model, state: manifest.state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ParamScope;
    use crate::surgery::{drop_group, grow_group, InitStrategy};

    fn sample() -> (PartitionedEncoder<f32>, TrainConfig) {
        let cfg = TrainConfig::default();
        let mut model = PartitionedEncoder::<f32>::build(&cfg.model).unwrap();
        let ffn = model.module(0, ModuleKind::Ffn1).unwrap().groups[1].id;
        grow_group(&mut model, ffn, InitStrategy::Copy, 0.0, 0).unwrap();
        let head = model.module(1, ModuleKind::Mhsa).unwrap().groups[0].id;
        drop_group(&mut model, head).unwrap();
        for (i, g) in model.groups_mut().enumerate() {
            g.score = 0.1 * i as f64 + 1.0 / 3.0;
        }
        for p in model.params_mut() {
            p.m.iter_mut().enumerate().for_each(|(i, x)| *x = i as f32 * 1e-3);
            p.v.iter_mut().for_each(|x| *x = 0.25);
        }
        (model, cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, cfg) = sample();
        let dir = tempfile::tempdir().unwrap();
        let state = TrainState { step: 42, adam_t: 41, steps_since_update: 3 };
        save_checkpoint(&model, &cfg, &state, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.state, state);
        assert_eq!(back.config, cfg);
        assert_eq!(back.model.growth_counter, model.growth_counter);
        assert_eq!(back.model.enumerate_groups(), model.enumerate_groups());
        for (a, b) in back.model.params().iter().zip(model.params()) {
            assert_eq!(a.value.data(), b.value.data());
            assert_eq!((&a.m, &a.v), (&b.m, &b.v));
        }
        assert_eq!(back.model.count_params(ParamScope::All), model.count_params(ParamScope::All));
        let x = Tensor::alloc(&[32, 16], Init::Normal { mean: 0.0, std: 1.0, seed: 5 }).unwrap();
        let (ya, yb) = (model.forward(&x).unwrap(), back.model.forward(&x).unwrap());
        assert!(ya.data().iter().zip(yb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn saving_is_byte_stable() {
        let (model, cfg) = sample();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_checkpoint(&model, &cfg, &TrainState::default(), a.path()).unwrap();
        let back = load_checkpoint(a.path()).unwrap();
        save_checkpoint(&back.model, &back.config, &back.state, b.path()).unwrap();
        for f in [MANIFEST_FILE, WEIGHTS_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    fn corrupted(edit: impl FnOnce(&Path)) -> Error {
        let (model, cfg) = sample();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &cfg, &TrainState::default(), dir.path()).unwrap();
        edit(dir.path());
        load_checkpoint(dir.path()).unwrap_err()
    }

    #[test]
    fn damage_is_detected() {
        let flip = |d: &Path| {
            let mut w = fs::read(d.join(WEIGHTS_FILE)).unwrap();
            w[100] ^= 1;
            fs::write(d.join(WEIGHTS_FILE), w).unwrap();
        };
        let truncate = |d: &Path| {
            let w = fs::read(d.join(WEIGHTS_FILE)).unwrap();
            fs::write(d.join(WEIGHTS_FILE), &w[..w.len() - 4]).unwrap();
        };
        let edit_manifest = |from: &'static str, to: &'static str| {
            move |d: &Path| {
                let m = fs::read_to_string(d.join(MANIFEST_FILE)).unwrap();
                assert!(m.contains(from));
                fs::write(d.join(MANIFEST_FILE), m.replacen(from, to, 1)).unwrap();
            }
        };
        assert!(matches!(corrupted(flip), Error::CorruptCheckpoint { .. }));
        assert!(matches!(corrupted(truncate), Error::CorruptCheckpoint { .. }));
        assert!(matches!(
            corrupted(edit_manifest("version=dmao-checkpoint/1", "version=dmao-checkpoint/0")),
            Error::CorruptCheckpoint { .. }
        ));
        assert!(matches!(
            corrupted(edit_manifest("frontend.w 64x64", "frontend.w 64x65")),
            Error::CorruptCheckpoint { .. }
        ));
        assert!(matches!(corrupted(edit_manifest("L0.FFN1.4.g1", "L0.FFN1.5.g1")), Error::CorruptCheckpoint { .. }));
    }
}
