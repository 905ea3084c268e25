//! On-disk database layout (little-endian, inside the shared frame of
//! [`crate::binfmt`]).
//!
//! Header fields: `d₁, d₂, m` (u64), `γ` (f64), `layer, next_id` (u64).
//! Payload blocks, in order: unit keys `d₁×m` column-major, key norms `m`,
//! residuals `d₂×m` column-major, fact ids `m` (u64), then per-entry
//! metadata as `u32` length + UTF-8 bytes (`u32::MAX` marks "none").

use crate::binfmt::{self, ByteReader, ByteWriter};
use crate::error::FormatError;

use super::{FactId, NeuralKVDatabase};

pub const DB_MAGIC: &[u8; 8] = b"NEURALDB";
pub const DB_VERSION: u32 = 1;

const NO_META: u32 = u32::MAX;

pub(super) fn encode(db: &NeuralKVDatabase) -> Vec<u8> {
    let m = db.len();
    let mut header = ByteWriter::with_capacity(48);
    header
        .u64(db.d1 as u64)
        .u64(db.d2 as u64)
        .u64(m as u64)
        .f64(db.gamma)
        .u64(db.layer as u64)
        .u64(db.next_id);

    let mut payload = ByteWriter::with_capacity((db.d1 + db.d2 + 2) * m * 8 + 4 * m);
    payload.f64s(&db.unit_keys).f64s(&db.key_norms).f64s(&db.residuals);
    for id in &db.ids {
        payload.u64(id.0);
    }
    for meta in &db.meta {
        match meta {
            Some(s) => {
                payload.u32(s.len() as u32).bytes(s.as_bytes());
            }
            None => {
                payload.u32(NO_META);
            }
        }
    }
    binfmt::encode(DB_MAGIC, DB_VERSION, &header.into_inner(), &payload.into_inner())
}

fn usize_field(x: u64, name: &str) -> Result<usize, FormatError> {
    usize::try_from(x).map_err(|_| FormatError::Malformed(format!("{name} out of range: {x}")))
}

pub(super) fn decode(bytes: &[u8]) -> Result<NeuralKVDatabase, FormatError> {
    let (header, payload) = binfmt::decode(bytes, DB_MAGIC, DB_VERSION)?;
    let mut h = ByteReader::new(header);
    let d1 = usize_field(h.u64()?, "d1")?;
    let d2 = usize_field(h.u64()?, "d2")?;
    let m = usize_field(h.u64()?, "m")?;
    let gamma = h.f64()?;
    let layer = usize_field(h.u64()?, "layer")?;
    let next_id = h.u64()?;
    h.finish()?;
    if d1 == 0 || d2 == 0 || !(gamma > 0.0 && gamma < 1.0) {
        return Err(FormatError::Malformed(format!("invalid header: d1={d1} d2={d2} gamma={gamma}")));
    }

    let mut p = ByteReader::new(payload);
    let unit_keys = p.f64s(d1.saturating_mul(m))?;
    let key_norms = p.f64s(m)?;
    let residuals = p.f64s(d2.saturating_mul(m))?;
    let mut ids = Vec::with_capacity(m);
    for _ in 0..m {
        let id = p.u64()?;
        if id >= next_id {
            return Err(FormatError::Malformed(format!("fact id {id} not below next_id {next_id}")));
        }
        ids.push(FactId(id));
    }
    let mut sorted = ids.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(FormatError::Malformed("duplicate fact ids".into()));
    }
    let mut meta = Vec::with_capacity(m);
    for _ in 0..m {
        let len = p.u32()?;
        if len == NO_META {
            meta.push(None);
        } else {
            let raw = p.bytes(len as usize)?;
            let s = std::str::from_utf8(raw).map_err(|e| FormatError::Malformed(format!("metadata: {e}")))?;
            meta.push(Some(s.to_owned()));
        }
    }
    p.finish()?;
    if unit_keys.iter().chain(&key_norms).chain(&residuals).any(|x| !x.is_finite()) {
        return Err(FormatError::Malformed("non-finite scalar".into()));
    }

    Ok(NeuralKVDatabase {
        d1,
        d2,
        gamma,
        layer,
        unit_keys,
        key_norms,
        residuals,
        ids,
        meta,
        next_id,
    })
}
