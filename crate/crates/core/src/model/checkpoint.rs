//! Model checkpoints in the shared binary frame.
//!
//! Header: `vocab, d_model, d_ffn, n_layers, max_seq, seed` (u64). Payload:
//! token embeddings, position embeddings, then per block `attn, ln_gain,
//! ln_bias, w_in, b_in, w_out`, then `lnf_gain, lnf_bias, head`; every matrix
//! column-major.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{Block, ToyConfig, ToyModel};
use crate::binfmt::{self, ByteReader, ByteWriter};
use crate::error::{FormatError, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"NDBTOYLM";
pub const MODEL_VERSION: u32 = 1;

fn read_matrix(r: &mut ByteReader<'_>, rows: usize, cols: usize) -> std::result::Result<DMatrix<f64>, FormatError> {
    let data = r.f64s(rows * cols)?;
    if data.iter().any(|x| !x.is_finite()) {
        return Err(FormatError::Malformed("non-finite weight".into()));
    }
    Ok(DMatrix::from_vec(rows, cols, data))
}

fn read_vector(r: &mut ByteReader<'_>, n: usize) -> std::result::Result<DVector<f64>, FormatError> {
    Ok(DVector::from_iterator(n, read_matrix(r, n, 1)?.iter().copied()))
}

impl ToyModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.cfg;
        let mut header = ByteWriter::with_capacity(48);
        for x in [c.vocab, c.d_model, c.d_ffn, c.n_layers, c.max_seq] {
            header.u64(x as u64);
        }
        header.u64(c.seed);

        let mut p = ByteWriter::new();
        p.f64s(self.tok_emb.as_slice()).f64s(self.pos_emb.as_slice());
        for b in &self.blocks {
            p.f64s(b.attn.as_slice())
                .f64s(b.ln_gain.as_slice())
                .f64s(b.ln_bias.as_slice())
                .f64s(b.w_in.as_slice())
                .f64s(b.b_in.as_slice())
                .f64s(b.w_out.as_slice());
        }
        p.f64s(self.lnf_gain.as_slice())
            .f64s(self.lnf_bias.as_slice())
            .f64s(self.head.as_slice());
        binfmt::encode(MODEL_MAGIC, MODEL_VERSION, &header.into_inner(), &p.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = binfmt::decode(bytes, MODEL_MAGIC, MODEL_VERSION)?;
        let mut h = ByteReader::new(header);
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = usize::try_from(h.u64()?).map_err(|_| FormatError::Malformed("dimension out of range".into()))?;
        }
        let cfg = ToyConfig {
            vocab: dims[0],
            d_model: dims[1],
            d_ffn: dims[2],
            n_layers: dims[3],
            max_seq: dims[4],
            seed: h.u64()?,
        };
        h.finish()?;
        cfg.validate()?;
        let per_block = cfg.d_model * cfg.d_model + 2 * cfg.d_model + 2 * cfg.d_ffn * cfg.d_model + cfg.d_ffn;
        let expected = cfg.d_model * (cfg.vocab + cfg.max_seq)
            + cfg.n_layers * per_block
            + 2 * cfg.d_model
            + cfg.vocab * cfg.d_model;
        if payload.len() != expected * 8 {
            return Err(FormatError::Malformed(format!(
                "payload holds {} bytes, config needs {}",
                payload.len(),
                expected * 8
            ))
            .into());
        }

        let (d, f) = (cfg.d_model, cfg.d_ffn);
        let mut r = ByteReader::new(payload);
        let tok_emb = read_matrix(&mut r, d, cfg.vocab)?;
        let pos_emb = read_matrix(&mut r, d, cfg.max_seq)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(Block {
                attn: read_matrix(&mut r, d, d)?,
                ln_gain: read_vector(&mut r, d)?,
                ln_bias: read_vector(&mut r, d)?,
                w_in: read_matrix(&mut r, f, d)?,
                b_in: read_vector(&mut r, f)?,
                w_out: read_matrix(&mut r, d, f)?,
            });
        }
        let lnf_gain = read_vector(&mut r, d)?;
        let lnf_bias = read_vector(&mut r, d)?;
        let head = read_matrix(&mut r, cfg.vocab, d)?;
        r.finish()?;
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain,
            lnf_bias,
            head,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binfmt::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binfmt::read_file(path)?)
    }
}
