//! Named parameter walks, counting, and checkpoint save/load.
//!
//! Every layer and model implements [`ParamSet`], yielding its tensors in a
//! fixed order under dotted path names. Learnable weights and running-stat
//! buffers are distinguished by [`ParamKind`]: counts include only weights,
//! checkpoints include both.
//!
//! Checkpoints are a pair of files: `<stem>.json` (manifest: ordered entries
//! with name, kind, shape, element offset) and `<stem>.bin` (all elements as
//! little-endian f32 in manifest order).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Learnable parameter; included in parameter counts.
    Weight,
    /// Running statistic (e.g. batch-norm mean/var); saved, never counted.
    Buffer,
}

pub type ParamVisitor<'a> = dyn FnMut(&str, ParamKind, &Tensor) + 'a;
pub type ParamVisitorMut<'a> = dyn FnMut(&str, ParamKind, &mut Tensor) + 'a;

/// A collection of named tensors that can be walked immutably or mutably.
pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor);
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut);
}

/// Total element count of learnable weights (buffers excluded).
pub fn count_weights<P: ParamSet + ?Sized>(p: &P) -> u64 {
    let mut total = 0u64;
    p.visit("m", &mut |_, kind, t| {
        if kind == ParamKind::Weight {
            total += t.numel() as u64;
        }
    });
    total
}

/// Per-tensor breakdown of a walk: `(name, kind, shape, numel)` in walk order.
pub fn manifest_entries<P: ParamSet + ?Sized>(p: &P) -> Vec<(String, ParamKind, Vec<usize>, usize)> {
    let mut rows = Vec::new();
    p.visit("m", &mut |name, kind, t| {
        rows.push((name.to_string(), kind, t.shape().to_vec(), t.numel()));
    });
    rows
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    entries: Vec<ManifestEntry>,
    total_elements: u64,
}

/// Writes `<stem>.json` + `<stem>.bin` for the full walk of `p`.
pub fn save<P: ParamSet + ?Sized>(p: &P, stem: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0u64;
    p.visit("m", &mut |name, kind, t| {
        entries.push(ManifestEntry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let manifest = Manifest {
        format: "f32-le".to_string(),
        entries,
        total_elements: offset,
    };
    std::fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::write(stem.with_extension("bin"), blob)?;
    Ok(())
}

/// Loads a checkpoint written by [`save`] into `p`. The manifest must match
/// the model's walk exactly — same names, kinds, and shapes in order.
pub fn load<P: ParamSet + ?Sized>(p: &mut P, stem: &Path) -> Result<()> {
    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
    if manifest.format != "f32-le" {
        return Err(Error::input(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    let blob = std::fs::read(stem.with_extension("bin"))?;
    if blob.len() as u64 != manifest.total_elements * 4 {
        return Err(Error::input(format!(
            "checkpoint blob is {} bytes, manifest expects {}",
            blob.len(),
            manifest.total_elements * 4
        )));
    }
    let mut idx = 0usize;
    let mut err: Option<Error> = None;
    p.visit_mut("m", &mut |name, kind, t| {
        if err.is_some() {
            return;
        }
        let Some(entry) = manifest.entries.get(idx) else {
            err = Some(Error::input(format!("checkpoint ends before tensor {name}")));
            return;
        };
        if entry.name != name || entry.kind != kind || entry.shape != t.shape() {
            err = Some(Error::input(format!(
                "checkpoint mismatch at index {idx}: file has {} {:?} {:?}, model has {name} {kind:?} {:?}",
                entry.name, entry.kind, entry.shape, t.shape()
            )));
            return;
        }
        let start = entry.offset as usize * 4;
        let end = start + t.numel() * 4;
        if end > blob.len() {
            err = Some(Error::input(format!("checkpoint blob too short for {name}")));
            return;
        }
        let dst = t.data_mut();
        for (i, chunk) in blob[start..end].chunks_exact(4).enumerate() {
            dst[i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != manifest.entries.len() {
        return Err(Error::input(format!(
            "checkpoint has {} tensors, model consumed {idx}",
            manifest.entries.len()
        )));
    }
    Ok(())
}
