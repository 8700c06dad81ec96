//! `SPLATV01` point-cloud files.
//!
//! ```text
//! offset  size      field
//! 0       8         magic "SPLATV01"
//! 8       8         u64 LE count N
//! 16      N × 56    records: 14 × f32 LE = μ(3) s(3) q(4, w first) c(3) o(1)
//! [optional trailer]
//!         8         magic "VIEWTAGS"
//!         N × 4     u32 LE source-view index per Gaussian
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::render::GaussianSet;

pub const SPLAT_MAGIC: &[u8; 8] = b"SPLATV01";
const TAG_MAGIC: &[u8; 8] = b"VIEWTAGS";

/// Writes `set`; source-view tags are appended only when `with_tags` is set
/// and the set carries them.
pub fn write_splats<W: Write>(set: &GaussianSet, with_tags: bool, mut out: W) -> Result<()> {
    set.validate()?;
    out.write_all(SPLAT_MAGIC)?;
    out.write_all(&(set.len() as u64).to_le_bytes())?;
    let mut rec = Vec::with_capacity(56);
    for i in 0..set.len() {
        rec.clear();
        let fields = set.positions[i]
            .iter()
            .chain(&set.scales[i])
            .chain(&set.rotations[i])
            .chain(&set.colors[i])
            .chain(std::iter::once(&set.opacities[i]));
        for v in fields {
            rec.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.write_all(&rec)?;
    }
    if let (true, Some(tags)) = (with_tags, &set.source_view) {
        out.write_all(TAG_MAGIC)?;
        for t in tags {
            out.write_all(&t.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a `SPLATV01` file. Values are the stored float32 numbers widened to f64.
pub fn read_splats<R: Read>(mut input: R) -> Result<GaussianSet> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != SPLAT_MAGIC {
        return Err(Error::corrupt("splat file", "missing SPLATV01 magic"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = n.checked_mul(56).ok_or_else(|| Error::corrupt("splat file", "count overflow"))?;
    if bytes.len() < 16 + body {
        return Err(Error::corrupt("splat file", format!("truncated: {n} records need {body} bytes")));
    }
    let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let mut set = GaussianSet::default();
    for i in 0..n {
        let o = 16 + i * 56;
        let v: Vec<f64> = (0..14).map(|k| f(o + 4 * k)).collect();
        set.positions.push([v[0], v[1], v[2]]);
        set.scales.push([v[3], v[4], v[5]]);
        set.rotations.push([v[6], v[7], v[8], v[9]]);
        set.colors.push([v[10], v[11], v[12]]);
        set.opacities.push(v[13]);
    }
    let rest = &bytes[16 + body..];
    if !rest.is_empty() {
        if rest.len() != 8 + 4 * n || &rest[..8] != TAG_MAGIC {
            return Err(Error::corrupt("splat file", "malformed view-tag trailer"));
        }
        set.source_view = Some(rest[8..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect());
    }
    Ok(set)
}
