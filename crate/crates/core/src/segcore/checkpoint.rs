//! Checkpoint: one binary blob plus a JSON sidecar at `<blob>.json`.
//!
//! Blob layout (little-endian): magic `ODESCKPT`, u32 format version,
//! u8 trained flag, then per BN block the conv weights (f32), gamma, beta
//! (f32), running mean and variance (f64), then head weights and bias
//! (f32). Every array is prefixed by its u64 element count.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{ArchConfig, Model};
use super::SegError;

pub const CHECKPOINT_FORMAT: u32 = 1;
const MAGIC: &[u8; 8] = b"ODESCKPT";

/// The sidecar document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch_config: ArchConfig,
    pub class_names: Vec<String>,
    pub source_stats_digest: String,
    pub seed: u64,
    #[serde(default)]
    pub format_version: u32,
    #[serde(default)]
    pub blob_sha256: String,
}

fn sidecar_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

struct Writer(Vec<u8>);

impl Writer {
    fn f32s(&mut self, v: &[f32]) {
        self.0.extend((v.len() as u64).to_le_bytes());
        v.iter().for_each(|x| self.0.extend(x.to_le_bytes()));
    }

    fn f64s(&mut self, v: &[f64]) {
        self.0.extend((v.len() as u64).to_le_bytes());
        v.iter().for_each(|x| self.0.extend(x.to_le_bytes()));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], SegError> {
        if self.pos + n > self.buf.len() {
            return Err(SegError::Checkpoint("blob truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn len(&mut self, expected: usize) -> Result<(), SegError> {
        let b = self.take(8)?;
        let n = u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
        if n != expected {
            return Err(SegError::Checkpoint(format!(
                "array has {n} entries, architecture expects {expected}"
            )));
        }
        Ok(())
    }

    fn f32s(&mut self, out: &mut [f32]) -> Result<(), SegError> {
        self.len(out.len())?;
        for v in out.iter_mut() {
            *v = f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes"));
        }
        Ok(())
    }

    fn f64s(&mut self, out: &mut [f64]) -> Result<(), SegError> {
        self.len(out.len())?;
        for v in out.iter_mut() {
            *v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    model: &Model<f32>,
    path: &Path,
    class_names: &[String],
    seed: u64,
) -> Result<CheckpointMeta, SegError> {
    let mut w = Writer(Vec::new());
    w.0.extend(MAGIC);
    w.0.extend(CHECKPOINT_FORMAT.to_le_bytes());
    w.0.push(model.is_trained() as u8);
    for b in model.blocks() {
        w.f32s(&b.conv.weight);
        w.f32s(&b.bn.gamma);
        w.f32s(&b.bn.beta);
        w.f64s(&b.bn.running_mean);
        w.f64s(&b.bn.running_var);
    }
    w.f32s(&model.head().weight);
    w.f32s(model.head().bias.as_deref().unwrap_or(&[]));
    let meta = CheckpointMeta {
        arch_config: model.arch().clone(),
        class_names: class_names.to_vec(),
        source_stats_digest: model.source_stats().digest(),
        seed,
        format_version: CHECKPOINT_FORMAT,
        blob_sha256: hex::encode(Sha256::digest(&w.0)),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, &w.0)?;
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;
    Ok(meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta), SegError> {
    let text = fs::read_to_string(sidecar_path(path))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| SegError::Checkpoint(format!("sidecar: {e}")))?;
    let blob = fs::read(path)?;
    if !meta.blob_sha256.is_empty() && meta.blob_sha256 != hex::encode(Sha256::digest(&blob)) {
        return Err(SegError::Checkpoint("blob digest mismatch".into()));
    }
    let mut model = Model::<f32>::build(&meta.arch_config, meta.seed)?;
    let mut r = Reader { buf: &blob, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(SegError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_FORMAT {
        return Err(SegError::Checkpoint(format!("unsupported format {version}")));
    }
    let trained = r.take(1)?[0] != 0;
    for b in model.blocks_mut() {
        r.f32s(&mut b.conv.weight)?;
        r.f32s(&mut b.bn.gamma)?;
        r.f32s(&mut b.bn.beta)?;
        r.f64s(&mut b.bn.running_mean)?;
        r.f64s(&mut b.bn.running_var)?;
    }
    let head = model.head_mut();
    r.f32s(&mut head.weight)?;
    if let Some(bias) = head.bias.as_mut() {
        r.f32s(bias)?;
    }
    if r.pos != blob.len() {
        return Err(SegError::Checkpoint("trailing bytes in blob".into()));
    }
    model.set_trained(trained);
    if model.source_stats().digest() != meta.source_stats_digest {
        return Err(SegError::Checkpoint("source statistics digest mismatch".into()));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let arch = ArchConfig {
            widths: vec![4, 8],
            ..ArchConfig::default()
        };
        let mut m = Model::<f32>::build(&arch, 3).unwrap();
        m.blocks_mut()[0].bn.running_mean[1] = 0.25;
        m.mark_trained();
        let path = dir.path().join("m.ckpt");
        let names: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let meta = save_checkpoint(&m, &path, &names, 3).unwrap();
        let (back, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(m, back);
        assert_eq!(meta, meta2);
        let sidecar: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        for key in ["arch_config", "class_names", "source_stats_digest", "seed"] {
            assert!(sidecar.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn corrupted_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::build(&ArchConfig::default(), 1).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path, &[], 1).unwrap();
        let mut blob = fs::read(&path).unwrap();
        let last = blob.len() - 1;
        blob[last] ^= 1;
        fs::write(&path, blob).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
