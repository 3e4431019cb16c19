//! Portable on-disk volume format.
//!
//! A volume is a directory holding `meta.json`, `pixels.bin`
//! (`n_slices * H * W` little-endian f32) and optionally `labels.bin`
//! (`n_slices * H * W` u8). `meta.json` carries a SHA-256 per array.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, VolumeRecord};
use crate::segcore::{LabelMap, SliceImage};

pub const META_FILE: &str = "meta.json";
pub const PIXELS_FILE: &str = "pixels.bin";
pub const LABELS_FILE: &str = "labels.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeMeta {
    pub patient_id: String,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub n_slices: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub dtype: String,
    pub domain_tag: String,
    /// Keyed by array name (`pixels`, `labels`).
    pub sha256: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_volume(volume: &VolumeRecord, dir: &Path) -> Result<(), DataError> {
    volume.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let pixels: Vec<u8> = volume
        .slices
        .iter()
        .flat_map(|s| s.pixels().iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    let mut sha = BTreeMap::new();
    sha.insert("pixels".to_string(), digest(&pixels));
    let pixels_path = dir.join(PIXELS_FILE);
    fs::write(&pixels_path, &pixels).map_err(io_err(&pixels_path))?;
    let labels_path = dir.join(LABELS_FILE);
    match &volume.truth {
        Some(truth) => {
            let labels: Vec<u8> = truth.iter().flat_map(|t| t.labels.iter().copied()).collect();
            sha.insert("labels".to_string(), digest(&labels));
            fs::write(&labels_path, &labels).map_err(io_err(&labels_path))?;
        }
        None => {
            if labels_path.exists() {
                fs::remove_file(&labels_path).map_err(io_err(&labels_path))?;
            }
        }
    }
    let meta = VolumeMeta {
        patient_id: volume.patient_id.clone(),
        height: volume.height(),
        width: volume.width(),
        n_slices: volume.slices.len(),
        classes: volume.classes,
        dtype: "f32le".into(),
        domain_tag: volume.domain_tag.clone(),
        sha256: sha,
    };
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text).map_err(io_err(&meta_path))
}

fn read_array(dir: &Path, file: &str, name: &str, expected_len: usize, meta: &VolumeMeta) -> Result<Vec<u8>, DataError> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() != expected_len {
        return Err(DataError::Truncated {
            array: name.into(),
            expected: expected_len,
            found: bytes.len(),
        });
    }
    let expected = meta
        .sha256
        .get(name)
        .ok_or_else(|| DataError::Schema(format!("sha256 missing for {name}")))?;
    let found = digest(&bytes);
    if &found != expected {
        return Err(DataError::Digest {
            array: name.into(),
            expected: expected.clone(),
            found,
        });
    }
    Ok(bytes)
}

pub fn load_volume(dir: &Path) -> Result<VolumeRecord, DataError> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: VolumeMeta =
        serde_json::from_str(&text).map_err(|e| DataError::Schema(e.to_string()))?;
    if meta.dtype != "f32le" {
        return Err(DataError::Schema(format!("unsupported dtype {}", meta.dtype)));
    }
    if meta.height == 0 || meta.width == 0 || meta.n_slices == 0 {
        return Err(DataError::Schema("empty volume dimensions".into()));
    }
    let plane = meta.height * meta.width;
    let pixels = read_array(dir, PIXELS_FILE, "pixels", 4 * plane * meta.n_slices, &meta)?;
    let has_labels = meta.sha256.contains_key("labels");
    let labels = if has_labels {
        Some(read_array(dir, LABELS_FILE, "labels", plane * meta.n_slices, &meta)?)
    } else {
        None
    };
    let slices = pixels
        .chunks_exact(4 * plane)
        .enumerate()
        .map(|(k, chunk)| {
            let px = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            SliceImage::new(meta.height, meta.width, px, meta.patient_id.clone(), k)
                .map_err(|e| DataError::Schema(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let truth = labels
        .map(|l| {
            l.chunks_exact(plane)
                .map(|c| LabelMap::new(meta.height, meta.width, c.to_vec()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| DataError::Schema(e.to_string()))
        })
        .transpose()?;
    let volume = VolumeRecord {
        patient_id: meta.patient_id,
        slices,
        truth,
        domain_tag: meta.domain_tag,
        classes: meta.classes,
    };
    volume
        .validate()
        .map_err(|e| DataError::Schema(e.to_string()))?;
    Ok(volume)
}
