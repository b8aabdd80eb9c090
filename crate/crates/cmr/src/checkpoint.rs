//! Checkpoint format: a human-readable JSON manifest line followed by raw
//! little-endian 32-bit float arrays, one per named parameter, in manifest
//! order. Parameter names are sorted lexicographically. A load-save round
//! trip is bitwise identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TaskKind};
use crate::error::{CmrError, Result};
use crate::model::CmrModel;

const MAGIC: &str = "CMRCKPT 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub epochs_trained: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initialized_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: TaskKind,
    pub model: ModelConfig,
    pub provenance: Provenance,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub manifest: Manifest,
    pub values: BTreeMap<String, Vec<f64>>,
}

/// What a checkpoint application touched.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Parameters kept at their fresh initialization (the task head when
    /// transferring across tasks).
    pub reinitialized: Vec<String>,
    /// Checkpoint parameters with no counterpart in the model.
    pub ignored: Vec<String>,
}

pub fn save(path: &Path, model: &CmrModel, provenance: &Provenance) -> Result<()> {
    let params: Vec<ParamEntry> = model
        .params
        .iter()
        .map(|(name, p)| ParamEntry { name: name.clone(), shape: p.shape.clone(), frozen: p.frozen })
        .collect();
    let manifest = Manifest {
        task: model.task,
        model: model.cfg.clone(),
        provenance: provenance.clone(),
        params,
    };
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    for (_, p) in model.params.iter() {
        for &v in &p.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;

    let take_line = |from: usize| -> Result<(usize, &str)> {
        let rel = bytes[from..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CmrError::CheckpointMismatch("truncated header".into()))?;
        let line = std::str::from_utf8(&bytes[from..from + rel])
            .map_err(|_| CmrError::CheckpointMismatch("non-utf8 header".into()))?;
        Ok((from + rel + 1, line))
    };
    let (after_magic, magic) = take_line(0)?;
    if magic != MAGIC {
        return Err(CmrError::CheckpointMismatch(format!("bad magic line '{magic}'")));
    }
    let (mut offset, manifest_line) = take_line(after_magic)?;
    let manifest: Manifest = serde_json::from_str(manifest_line)?;

    let mut values = BTreeMap::new();
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let need = n * 4;
        if offset + need > bytes.len() {
            return Err(CmrError::CheckpointMismatch(format!(
                "truncated parameter data at '{}'",
                entry.name
            )));
        }
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            let b: [u8; 4] = bytes[offset + 4 * i..offset + 4 * i + 4].try_into().expect("4 bytes");
            vals.push(f64::from(f32::from_le_bytes(b)));
        }
        offset += need;
        values.insert(entry.name.clone(), vals);
    }
    if offset != bytes.len() {
        return Err(CmrError::CheckpointMismatch(format!(
            "{} trailing bytes after parameter data",
            bytes.len() - offset
        )));
    }
    Ok(LoadedCheckpoint { manifest, values })
}

fn config_matches_except_head(a: &ModelConfig, b: &ModelConfig) -> bool {
    let mut x = a.clone();
    let mut y = b.clone();
    x.n_classes = 0;
    y.n_classes = 0;
    x == y
}

/// Copies checkpoint values into a model. Same-task loads require the
/// parameter sets to match exactly. Cross-task loads keep the freshly
/// initialized task head and require everything else to be present; the
/// structural diff is reported on any mismatch.
pub fn apply(model: &mut CmrModel, ckpt: &LoadedCheckpoint) -> Result<LoadReport> {
    let transfer = ckpt.manifest.task != model.task;
    if transfer {
        if !config_matches_except_head(&ckpt.manifest.model, &model.cfg) {
            return Err(CmrError::CheckpointMismatch(
                "architecture config differs beyond the task head".into(),
            ));
        }
    } else if ckpt.manifest.model != model.cfg {
        return Err(CmrError::CheckpointMismatch("model config differs".into()));
    }

    let ckpt_entries: BTreeMap<&String, &ParamEntry> =
        ckpt.manifest.params.iter().map(|e| (&e.name, e)).collect();

    let mut missing = Vec::new();
    let mut shape_diff = Vec::new();
    let mut report = LoadReport::default();

    let model_names: Vec<String> = model.params.names().cloned().collect();
    for name in &model_names {
        let is_head = name.starts_with("head.");
        if transfer && is_head {
            report.reinitialized.push(name.clone());
            continue;
        }
        match ckpt_entries.get(name) {
            None => missing.push(name.clone()),
            Some(entry) => {
                let p = model.params.get(name)?;
                if entry.shape != p.shape {
                    shape_diff.push(format!("{name}: {:?} vs {:?}", entry.shape, p.shape));
                }
            }
        }
    }
    for entry in &ckpt.manifest.params {
        if !model.params.contains(&entry.name) {
            if transfer {
                report.ignored.push(entry.name.clone());
            } else {
                missing.push(format!("{} (checkpoint only)", entry.name));
            }
        }
    }
    if !missing.is_empty() || !shape_diff.is_empty() {
        return Err(CmrError::CheckpointMismatch(format!(
            "structural diff; missing: [{}]; shape mismatches: [{}]",
            missing.join(", "),
            shape_diff.join(", ")
        )));
    }

    for name in &model_names {
        if transfer && name.starts_with("head.") {
            continue;
        }
        let vals = &ckpt.values[name];
        model.params.get_mut(name)?.values.clone_from(vals);
        report.loaded.push(name.clone());
    }
    Ok(report)
}

/// Rebuilds the checkpoint's own model: same task, config, and seed, with
/// every parameter overwritten from the file.
pub fn restore_model(ckpt: &LoadedCheckpoint) -> Result<CmrModel> {
    let mut model = CmrModel::new(
        ckpt.manifest.task,
        ckpt.manifest.model.clone(),
        ckpt.manifest.provenance.seed,
    )?;
    apply(&mut model, ckpt)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn prov() -> Provenance {
        Provenance { seed: 3, epochs_trained: 0, dataset: None, initialized_from: None }
    }

    #[test]
    fn save_load_save_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = CmrModel::new(TaskKind::Nlvr, ModelConfig::tiny(), 3).unwrap();
        let a = dir.path().join("a.cmr");
        let b = dir.path().join("b.cmr");
        save(&a, &model, &prov()).unwrap();
        let loaded = load(&a).unwrap();
        let restored = restore_model(&loaded).unwrap();
        save(&b, &restored, &loaded.manifest.provenance).unwrap();
        let bytes_a = std::fs::read(&a).unwrap();
        let bytes_b = std::fs::read(&b).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn manifest_names_are_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let model = CmrModel::new(TaskKind::Vqa, ModelConfig::tiny(), 1).unwrap();
        let path = dir.path().join("m.cmr");
        save(&path, &model, &prov()).unwrap();
        let loaded = load(&path).unwrap();
        let names: Vec<&String> = loaded.manifest.params.iter().map(|e| &e.name).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn same_task_load_requires_identical_structure() {
        let dir = tempfile::tempdir().unwrap();
        let model = CmrModel::new(TaskKind::Nlvr, ModelConfig::tiny(), 1).unwrap();
        let path = dir.path().join("m.cmr");
        save(&path, &model, &prov()).unwrap();
        let loaded = load(&path).unwrap();

        let other_cfg = ModelConfig { d: 16, d_raw_t: 16, d_raw_v: 16, ..ModelConfig::tiny() };
        let mut other = CmrModel::new(TaskKind::Nlvr, other_cfg, 1).unwrap();
        let err = apply(&mut other, &loaded).unwrap_err();
        assert!(matches!(err, CmrError::CheckpointMismatch(_)));
    }

    #[test]
    fn cross_task_load_reinitializes_exactly_the_head() {
        let dir = tempfile::tempdir().unwrap();
        let nlvr = CmrModel::new(TaskKind::Nlvr, ModelConfig::tiny(), 1).unwrap();
        let path = dir.path().join("nlvr.cmr");
        save(&path, &nlvr, &prov()).unwrap();
        let loaded = load(&path).unwrap();

        let mut vqa = CmrModel::new(TaskKind::Vqa, ModelConfig::tiny(), 99).unwrap();
        let fresh_head: Vec<f64> = vqa.params.get("head.fc1.w").unwrap().values.clone();
        let report = apply(&mut vqa, &loaded).unwrap();

        // every reinitialized name is a head parameter and all heads are there
        assert!(report.reinitialized.iter().all(|n| n.starts_with("head.")));
        let head_count = vqa.params.names().filter(|n| n.starts_with("head.")).count();
        assert_eq!(report.reinitialized.len(), head_count);
        // non-head values match the checkpoint, head kept its fresh values
        assert_eq!(vqa.params.get("head.fc1.w").unwrap().values, fresh_head);
        assert_eq!(
            vqa.params.get("enc.vis.proj.w").unwrap().values,
            loaded.values["enc.vis.proj.w"]
        );
        // the NLVR-only pair CNNs are ignored
        assert!(report.ignored.iter().any(|n| n.starts_with("ent_cnn.v1_v2")));
    }

    #[test]
    fn truncated_file_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = CmrModel::new(TaskKind::Nlvr, ModelConfig::tiny(), 1).unwrap();
        let path = dir.path().join("m.cmr");
        save(&path, &model, &prov()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load(&path), Err(CmrError::CheckpointMismatch(_))));
    }
}
