//! Scene files (JSONL) and checkpoints (JSON manifest + f64 blob).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraCalib;
use crate::head::GtBox;
use crate::nn::ParamStore;
use crate::radar::{RadarPoints, RADAR_CHANNELS};
use crate::sim::Scene;
use crate::tensor::Tensor;

pub const SCENE_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64(s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Format(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("payload of {} bytes is not f64-aligned", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ArrayRecord {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    version: u32,
    frame_index: usize,
    objects: Vec<GtBox>,
    calibrations: Vec<CameraCalib>,
    radar: ArrayRecord,
    images: ArrayRecord,
}

/// One scene as a single JSON line.
pub fn scene_to_json(scene: &Scene) -> Result<String> {
    let radar: Vec<f64> = scene.radar.rows.iter().flatten().copied().collect();
    let rec = SceneRecord {
        version: SCENE_FORMAT_VERSION,
        frame_index: scene.frame_index,
        objects: scene.objects.clone(),
        calibrations: scene.calibrations.clone(),
        radar: ArrayRecord {
            shape: vec![scene.radar.len(), RADAR_CHANNELS],
            data: encode_f64(&radar),
        },
        images: ArrayRecord {
            shape: scene.images.shape().to_vec(),
            data: encode_f64(scene.images.data()),
        },
    };
    Ok(serde_json::to_string(&rec)?)
}

pub fn scene_from_json(line: &str) -> Result<Scene> {
    let rec: SceneRecord = serde_json::from_str(line)?;
    if rec.version != SCENE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "scene format version {} (expected {SCENE_FORMAT_VERSION})",
            rec.version
        )));
    }
    for c in &rec.calibrations {
        c.validate()?;
    }
    let radar = decode_f64(&rec.radar.data)?;
    if rec.radar.shape.len() != 2
        || rec.radar.shape[1] != RADAR_CHANNELS
        || rec.radar.shape[0] * RADAR_CHANNELS != radar.len()
    {
        return Err(Error::Format(format!("radar shape {:?} does not match payload", rec.radar.shape)));
    }
    let rows = radar
        .chunks_exact(RADAR_CHANNELS)
        .map(|c| c.try_into().expect("channel count"))
        .collect();
    let images = Tensor::new(rec.images.shape, decode_f64(&rec.images.data)?)
        .map_err(|e| Error::Format(format!("image payload: {e}")))?;
    Ok(Scene {
        frame_index: rec.frame_index,
        objects: rec.objects,
        calibrations: rec.calibrations,
        radar: RadarPoints { rows },
        images,
    })
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in scenes {
        w.write_all(scene_to_json(s)?.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(scene_from_json(&line).map_err(|e| match e {
            Error::Io(e) => Error::Io(e),
            other => Error::Format(format!("line {}: {other}", i + 1)),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (model config, training summary).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` (little-endian f64 blob).
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let blob = blob_path(path);
    let mut tensors = Vec::with_capacity(store.len());
    let mut bytes = Vec::with_capacity(store.num_scalars() * 8);
    for id in store.ids() {
        let t = store.get(id);
        tensors.push(TensorEntry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_FORMAT_VERSION,
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Format(format!("unusable checkpoint path {}", path.display())))?
            .to_string(),
        tensors,
        meta,
    };
    fs::write(&blob, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if m.version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!("checkpoint format version {}", m.version)));
    }
    Ok(m)
}

/// Loads a checkpoint into `store`. Every parameter must be present with
/// an identical shape and no extra tensors may exist; otherwise all
/// mismatches are reported and `store` is left untouched.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<CheckpointManifest> {
    let manifest = read_manifest(path)?;
    let blob_file = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob_file)?;
    let mut problems = Vec::new();
    let mut seen = vec![false; store.len()];
    let mut loads = Vec::new();
    for e in &manifest.tensors {
        let Some(id) = store.by_name(&e.name) else {
            problems.push(format!("unexpected tensor {} {:?}", e.name, e.shape));
            continue;
        };
        seen[id.index()] = true;
        let want = store.get(id).shape();
        if want != e.shape.as_slice() {
            problems.push(format!("{}: checkpoint {:?} vs model {want:?}", e.name, e.shape));
            continue;
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 8 * n;
        if end > bytes.len() {
            return Err(Error::Format(format!("{} extends past the end of the blob", e.name)));
        }
        loads.push((id, e.offset, n));
    }
    for id in store.ids() {
        if !seen[id.index()] {
            problems.push(format!("missing tensor {} {:?}", store.name(id), store.get(id).shape()));
        }
    }
    if !problems.is_empty() {
        return Err(Error::CheckpointMismatch(problems));
    }
    for (id, offset, n) in loads {
        let data = store.get_mut(id).data_mut();
        for (k, v) in data.iter_mut().enumerate().take(n) {
            let o = offset + 8 * k;
            *v = f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{gen_scene, SimConfig};

    #[test]
    fn scene_round_trip() {
        let s = gen_scene(4, &SimConfig::default()).unwrap();
        let back = scene_from_json(&scene_to_json(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn wrong_version_rejected() {
        let s = gen_scene(4, &SimConfig::default()).unwrap();
        let line = scene_to_json(&s).unwrap().replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(scene_from_json(&line), Err(Error::Format(_))));
    }
}
