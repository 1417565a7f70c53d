//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CSLM" | u32 version = 1 | u32 header_len | header (UTF-8 key=value lines)
//! then for E, W_ih, W_hh, b_ih, b_hh, W_out, b_out:
//!     u32 rows | u32 cols | rows*cols f32
//! ```
//!
//! Header keys: `vocab`, `emb`, `hidden`, `gate_order`, `vocab_hash`, `seed`,
//! `regime`, `epoch`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{LstmLmParams, ModelDims, GATE_ORDER, PARAM_NAMES};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"CSLM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub dims: ModelDims,
    pub vocab_hash: String,
    pub seed: u64,
    /// CLI regime name.
    pub regime: String,
    /// Number of completed epochs.
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: LstmLmParams<f32>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(
        params: &LstmLmParams<T>,
        vocab: &Vocabulary,
        seed: u64,
        regime: &str,
        epoch: usize,
    ) -> Self {
        Self {
            meta: CheckpointMeta {
                dims: params.dims(),
                vocab_hash: vocab.content_hash(),
                seed,
                regime: regime.to_owned(),
                epoch,
            },
            params: params.cast(),
        }
    }

    fn header_text(&self) -> String {
        let m = &self.meta;
        format!(
            "vocab={}\nemb={}\nhidden={}\ngate_order={}\nvocab_hash={}\nseed={}\nregime={}\nepoch={}\n",
            m.dims.vocab, m.dims.emb, m.dims.hidden, GATE_ORDER, m.vocab_hash, m.seed, m.regime, m.epoch
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for m in self.params.arrays() {
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for x in m.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Byte offset where the parameter payload starts.
    pub fn payload_offset(bytes: &[u8]) -> Result<usize> {
        let mut r = Reader { bytes, pos: 0 };
        r.header()?;
        Ok(r.pos)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let meta = r.header()?;
        let mut arrays = Vec::with_capacity(7);
        for (name, want) in PARAM_NAMES.iter().zip(meta.dims.shapes()) {
            let at = r.pos;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if (rows, cols) != want {
                return Err(r.corrupt_at(
                    at,
                    format!(
                        "{name} has shape {rows}x{cols}, header implies {}x{}",
                        want.0, want.1
                    ),
                ));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")));
            }
            arrays.push(Matrix::from_vec(rows, cols, data)?);
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let params = LstmLmParams::from_arrays(arrays)?;
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn verify_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let found = vocab.content_hash();
        if found != self.meta.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.meta.vocab_hash.clone(),
                found,
            });
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        self.corrupt_at(self.pos, reason)
    }

    fn corrupt_at(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!(
                "unexpected end of file (need {n} bytes, {} left)",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn header(&mut self) -> Result<CheckpointMeta> {
        if self.take(4)? != MAGIC {
            return Err(self.corrupt_at(0, "bad magic (not a CSLM checkpoint)"));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(self.corrupt_at(4, format!("unsupported version {version}")));
        }
        let len = self.u32()? as usize;
        let start = self.pos;
        let text = std::str::from_utf8(self.take(len)?)
            .map_err(|e| self.corrupt_at(start + e.valid_up_to(), "header is not UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| self.corrupt_at(start, format!("bad header line {line:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| self.corrupt_at(start, format!("header missing {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| self.corrupt_at(start, format!("header field {k} is not a number")))
        };
        if get("gate_order")? != GATE_ORDER {
            return Err(self.corrupt_at(
                start,
                format!("unsupported gate order {}", get("gate_order")?),
            ));
        }
        let dims = ModelDims::new(
            num("vocab")? as usize,
            num("emb")? as usize,
            num("hidden")? as usize,
        )
        .map_err(|e| self.corrupt_at(start, e.to_string()))?;
        Ok(CheckpointMeta {
            dims,
            vocab_hash: get("vocab_hash")?.to_owned(),
            seed: num("seed")?,
            regime: get("regime")?.to_owned(),
            epoch: num("epoch")? as usize,
        })
    }
}
