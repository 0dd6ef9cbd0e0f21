//! Binary checkpoint container, all integers little-endian:
//!
//! ```text
//! magic    b"SQCP"
//! version  u32 = 1
//! tag      u8   (1 = tabular n-gram)
//! order    u32
//! vocab    u32  (V)
//! index    u8   (0 = dense, 1 = hashed) then u64 row count
//! theta    u64 length, then that many f64
//! tokens   u32 count, then per token u32 byte length + UTF-8 bytes
//! ```

use std::fs;
use std::path::Path;

use super::model::{ContextIndex, TabularPolicy};
use super::vocab::Vocabulary;
use super::PolicyError;

const MAGIC: &[u8; 4] = b"SQCP";
pub const FORMAT_VERSION: u32 = 1;
const TAG_TABULAR: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TabularPolicy,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut out = Vec::with_capacity(64 + m.theta().len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(TAG_TABULAR);
        out.extend_from_slice(&(m.order() as u32).to_le_bytes());
        out.extend_from_slice(&(m.vocab_size() as u32).to_le_bytes());
        out.push(match m.index() {
            ContextIndex::Dense => 0,
            ContextIndex::Hashed { .. } => 1,
        });
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.theta().len() as u64).to_le_bytes());
        for x in m.theta() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for t in self.vocab.tokens() {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            out.extend_from_slice(t.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(PolicyError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported format version {version}")));
        }
        let tag = r.u8()?;
        if tag != TAG_TABULAR {
            return Err(PolicyError::Checkpoint(format!("unknown parameterization tag {tag}")));
        }
        let order = r.u32()? as usize;
        let vocab_size = r.u32()? as usize;
        let kind = r.u8()?;
        let rows = r.u64()? as usize;
        let index = match kind {
            0 => ContextIndex::Dense,
            1 => ContextIndex::Hashed { buckets: rows },
            k => return Err(PolicyError::Checkpoint(format!("unknown context index kind {k}"))),
        };
        let n = r.u64()? as usize;
        if n.checked_mul(8).is_none_or(|b| b > bytes.len()) {
            return Err(PolicyError::Checkpoint("parameter count exceeds file size".into()));
        }
        let mut theta = Vec::with_capacity(n);
        for _ in 0..n {
            theta.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
        }
        let model = TabularPolicy::from_parts(order, vocab_size, index, theta)?;
        if model.rows() != rows {
            return Err(PolicyError::Checkpoint(format!("row count {rows} does not match the shape")));
        }
        let count = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(count.min(bytes.len()));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(len)?)
                .map_err(|e| PolicyError::Checkpoint(format!("token is not UTF-8: {e}")))?;
            tokens.push(s.to_string());
        }
        if r.pos != bytes.len() {
            return Err(PolicyError::Checkpoint("trailing bytes".into()));
        }
        let mut vocab = Vocabulary::from_tokens(Vec::<String>::new());
        if tokens.len() < vocab.len() || tokens[..vocab.len()] != vocab.tokens()[..] {
            return Err(PolicyError::Checkpoint("vocabulary does not start with the special tokens".into()));
        }
        vocab = Vocabulary::from_tokens(tokens.into_iter().skip(vocab.len()));
        Ok(Self { model, vocab })
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        fs::write(path, self.to_bytes()).map_err(|source| PolicyError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let bytes = fs::read(path).map_err(|source| PolicyError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PolicyError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PolicyError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, PolicyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PolicyError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
