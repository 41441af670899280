//! Versioned checkpoint container.
//!
//! Binary layout (all integers little-endian u32, all floats little-endian
//! f64): magic `PROBTTE1`, then `p`, `r_L`, `r_H`, `|V|`, flags (bit 0 =
//! diagonal override present), the target scale (shift, scale), then per
//! bucket `L`, `H`, `w_mu`, `w_d` row-major and optionally the diagonal
//! override. A JSON manifest with the shapes and a SHA-256 content hash is
//! written alongside as `<file>.manifest.json`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{BucketParams, ModelParams, TargetScale};

const MAGIC: &[u8; 8] = b"PROBTTE1";
const FLAG_DIAG_OVERRIDE: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub format: String,
    pub p: usize,
    pub r_l: usize,
    pub r_h: usize,
    pub n_links: usize,
    pub has_diag_override: bool,
    pub synthetic: bool,
    pub scale: TargetScale,
    pub sha256: String,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

fn push_f64s(buf: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn serialize(params: &ModelParams) -> Vec<u8> {
    let has_override = params.buckets()[0].diag_override.is_some();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [
        params.bucket_count() as u32,
        params.r_l() as u32,
        params.r_h() as u32,
        params.link_count() as u32,
        if has_override { FLAG_DIAG_OVERRIDE } else { 0 },
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    push_f64s(&mut buf, [params.scale().shift, params.scale().scale].into_iter());
    for b in params.buckets() {
        // nalgebra stores column-major; emit row-major for a stable format.
        push_f64s(&mut buf, b.l.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()));
        push_f64s(&mut buf, b.h.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()));
        push_f64s(&mut buf, b.w_mu.iter().copied());
        push_f64s(&mut buf, b.w_d.iter().copied());
        if let Some(d) = &b.diag_override {
            push_f64s(&mut buf, d.iter().copied());
        }
    }
    buf
}

/// Write the checkpoint and its manifest; returns the manifest.
pub fn save_checkpoint(
    params: &ModelParams,
    path: &Path,
    synthetic: bool,
) -> Result<CheckpointManifest> {
    let bytes = serialize(params);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;

    let manifest = CheckpointManifest {
        format: String::from_utf8_lossy(MAGIC).into_owned(),
        p: params.bucket_count(),
        r_l: params.r_l(),
        r_h: params.r_h(),
        n_links: params.link_count(),
        has_diag_override: params.buckets()[0].diag_override.is_some(),
        synthetic,
        scale: params.scale(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse(e.to_string()))?;
    std::fs::write(manifest_path(path), json + "\n")?;
    Ok(manifest)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse("checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Load a checkpoint; verifies the magic, shapes, and (when the manifest is
/// present) the content hash.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<CheckpointManifest>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::parse(format!(
            "{}: not a PROBTTE1 checkpoint",
            path.display()
        )));
    }
    let p = cur.u32()? as usize;
    let r_l = cur.u32()? as usize;
    let r_h = cur.u32()? as usize;
    let n = cur.u32()? as usize;
    let flags = cur.u32()?;
    let has_override = flags & FLAG_DIAG_OVERRIDE != 0;
    let scale = TargetScale { shift: cur.f64()?, scale: cur.f64()? };

    let mut buckets = Vec::with_capacity(p);
    for _ in 0..p {
        let l = DMatrix::from_row_slice(n, r_l, &cur.f64s(n * r_l)?);
        let h = DMatrix::from_row_slice(n, r_h, &cur.f64s(n * r_h)?);
        let w_mu = DVector::from_vec(cur.f64s(r_l)?);
        let w_d = DVector::from_vec(cur.f64s(r_h)?);
        let diag_override = if has_override {
            Some(DVector::from_vec(cur.f64s(n)?))
        } else {
            None
        };
        buckets.push(BucketParams { l, h, w_mu, w_d, diag_override });
    }
    if cur.pos != bytes.len() {
        return Err(Error::parse("checkpoint has trailing bytes"));
    }
    let params = ModelParams::new(n, r_l, r_h, scale, buckets)?;

    let mpath = manifest_path(path);
    let manifest = if mpath.exists() {
        let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(&mpath)?)
            .map_err(|e| Error::parse(format!("{}: {e}", mpath.display())))?;
        let hash = hex::encode(Sha256::digest(&bytes));
        if manifest.sha256 != hash {
            return Err(Error::validation(format!(
                "{}: content hash mismatch (manifest {}, file {})",
                path.display(),
                manifest.sha256,
                hash
            )));
        }
        Some(manifest)
    } else {
        None
    };
    Ok((params, manifest))
}
