//! Value copies of network state and their flat binary encoding.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "ALRS"                      4 bytes magic
//! version                     u32 (currently 1)
//! layer count L               u32 (blocks + head)
//! L times:
//!   input_dim, output_dim     u32, u32
//!   lr                        f64
//!   params                    f64 x (input_dim * output_dim + output_dim)
//!   velocity                  f64 x same length
//! rng seed                    32 bytes
//! rng stream                  u64
//! rng word position           u128
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ALRS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub input_dim: usize,
    pub output_dim: usize,
    pub params: Vec<f64>,
    pub velocity: Vec<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub(crate) fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub(crate) fn rebuild(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Full copy of parameters, momentum buffers, learning rates and RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSnapshot {
    /// Backbone blocks in forward order, head last.
    pub layers: Vec<BlockState>,
    pub rng: RngState,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::InvalidInput(format!(
                "snapshot truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

impl NetSnapshot {
    pub fn depth(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.input_dim as u32).to_le_bytes());
            out.extend_from_slice(&(l.output_dim as u32).to_le_bytes());
            out.extend_from_slice(&l.lr.to_le_bytes());
            for v in l.params.iter().chain(&l.velocity) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::InvalidInput("bad snapshot magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported snapshot version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let input_dim = r.u32()? as usize;
            let output_dim = r.u32()? as usize;
            let lr = r.f64()?;
            let n = input_dim * output_dim + output_dim;
            let params = r.f64s(n)?;
            let velocity = r.f64s(n)?;
            layers.push(BlockState {
                input_dim,
                output_dim,
                params,
                velocity,
                lr,
            });
        }
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        if r.pos != buf.len() {
            return Err(Error::InvalidInput(format!(
                "{} trailing bytes after snapshot",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            layers,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// SHA-256 of the binary encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    /// SHA-256 over the parameter values of the lowest `depth` blocks only.
    pub fn backbone_hash(&self, depth: usize) -> String {
        let mut hasher = Sha256::new();
        for l in self.layers.iter().take(depth) {
            for v in &l.params {
                hasher.update(v.to_le_bytes());
            }
        }
        to_hex(&hasher.finalize())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
