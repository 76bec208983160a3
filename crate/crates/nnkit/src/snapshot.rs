//! Parameter snapshots.
//!
//! File layout: the 8-byte magic `UNFSNAP1`, a little-endian `u64` header
//! length, a JSON header, then every parameter and buffer value of the three
//! segments as little-endian `f64`, in segment order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchId;
use crate::model::{PartitionedModel, Segment};
use crate::{NnError, Result};

const MAGIC: &[u8; 8] = b"UNFSNAP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentState {
    pub param_shapes: Vec<Vec<usize>>,
    pub buffer_shapes: Vec<Vec<usize>>,
    #[serde(skip)]
    pub params: Vec<f64>,
    #[serde(skip)]
    pub buffers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub arch: ArchId,
    pub cuts: (usize, usize),
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub segments: [SegmentState; 3],
    pub checksum: String,
}

impl Snapshot {
    pub fn take(model: &PartitionedModel) -> Self {
        let segments = Segment::ALL.map(|seg| {
            let s = model.segment(seg);
            let params = s.params();
            let buffers = s.buffers();
            SegmentState {
                param_shapes: params.iter().map(|p| p.value.shape().to_vec()).collect(),
                buffer_shapes: buffers.iter().map(|b| b.shape().to_vec()).collect(),
                params: params.iter().flat_map(|p| p.value.iter().copied()).collect(),
                buffers: buffers.iter().flat_map(|b| b.iter().copied()).collect(),
            }
        });
        let mut snap = Self {
            arch: model.arch,
            cuts: model.cuts,
            input_shape: model.input_shape.clone(),
            class_count: model.class_count,
            segments,
            checksum: String::new(),
        };
        snap.checksum = snap.compute_checksum();
        snap
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.segments
            .iter()
            .flat_map(|s| s.params.iter().chain(&s.buffers).copied())
    }

    fn compute_checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.values() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Restore every segment.
    pub fn restore(&self, model: &mut PartitionedModel) -> Result<()> {
        for seg in Segment::ALL {
            self.restore_segment(model, seg)?;
        }
        Ok(())
    }

    /// Restore one segment's parameters and buffers.
    pub fn restore_segment(&self, model: &mut PartitionedModel, seg: Segment) -> Result<()> {
        if model.arch != self.arch {
            return Err(NnError::Snapshot(format!(
                "snapshot of {} cannot be restored onto {}",
                self.arch.as_str(),
                model.arch.as_str()
            )));
        }
        let state = &self.segments[seg.index()];
        let target = model.segment_mut(seg);
        let shapes: Vec<Vec<usize>> = target.params().iter().map(|p| p.value.shape().to_vec()).collect();
        let bshapes: Vec<Vec<usize>> = target.buffers().iter().map(|b| b.shape().to_vec()).collect();
        if shapes != state.param_shapes || bshapes != state.buffer_shapes {
            return Err(NnError::Snapshot(format!(
                "{} segment layout differs from snapshot",
                seg.name()
            )));
        }
        let mut off = 0;
        for p in target.params_mut() {
            for v in p.value.iter_mut() {
                *v = state.params[off];
                off += 1;
            }
        }
        let mut off = 0;
        for b in target.buffers_mut() {
            for v in b.iter_mut() {
                *v = state.buffers[off];
                off += 1;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = serde_json::to_vec(self)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        for v in self.values() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Snapshot("not a snapshot file".into()));
        }
        let mut len = [0u8; 8];
        f.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        f.read_exact(&mut header)?;
        let mut snap: Snapshot = serde_json::from_slice(&header)?;
        let mut buf = [0u8; 8];
        let mut read = |count: usize| -> Result<Vec<f64>> {
            (0..count)
                .map(|_| {
                    f.read_exact(&mut buf)?;
                    Ok(f64::from_le_bytes(buf))
                })
                .collect()
        };
        for s in &mut snap.segments {
            let np: usize = s.param_shapes.iter().map(|d| d.iter().product::<usize>()).sum();
            let nb: usize = s.buffer_shapes.iter().map(|d| d.iter().product::<usize>()).sum();
            s.params = read(np)?;
            s.buffers = read(nb)?;
        }
        if snap.compute_checksum() != snap.checksum {
            return Err(NnError::Snapshot("checksum mismatch".into()));
        }
        Ok(snap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_model, ArchSpec};

    #[test]
    fn checksum_tracks_parameter_changes() {
        let mut m = build_model(&ArchSpec::mlp(4), &[1, 2, 2], 2, None, 0).unwrap();
        let a = Snapshot::take(&m);
        assert_eq!(a.checksum, Snapshot::take(&m).checksum);
        m.params_mut()[0].value[[0, 0]] += 1e-12;
        assert_ne!(a.checksum, Snapshot::take(&m).checksum);
    }

    #[test]
    fn file_round_trip_preserves_everything() {
        let m = build_model(&ArchSpec::cnn(2, 4), &[1, 4, 4], 3, None, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.snap");
        let a = Snapshot::take(&m);
        a.save(&path).unwrap();
        assert_eq!(Snapshot::load(&path).unwrap(), a);
    }

    #[test]
    fn corrupted_file_is_rejected() {
        let m = build_model(&ArchSpec::mlp(4), &[1, 2, 2], 2, None, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.snap");
        Snapshot::take(&m).save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Snapshot::load(&path), Err(NnError::Snapshot(_))));
    }
}
