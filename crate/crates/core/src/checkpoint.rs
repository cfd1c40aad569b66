//! Self-describing tensor container.
//!
//! Layout (little-endian): magic `NGKT`, `u32` format version, `u64` header
//! length, UTF-8 JSON header, then the raw `f64` payload. The header lists
//! every tensor with its shape and byte offset into the payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NGKT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64-le";

/// Resume point of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal (exceeds the JSON integer range).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        RngState { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| Error::Checkpoint(format!("rng state: {m}"));
        if self.seed.len() != 64 {
            return Err(bad("seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed is not hex"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad("word_pos is not an integer"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
    step: u64,
    rng: Option<RngState>,
    config: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Free-form configuration snapshot.
    pub config: Value,
    pub tensors: BTreeMap<String, Array2<f64>>,
    pub step: u64,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn new(config: Value, tensors: BTreeMap<String, Array2<f64>>, step: u64, rng: Option<RngState>) -> Self {
        Checkpoint { version: FORMAT_VERSION, config, tensors, step, rng }
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Array2<f64>> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest.to_owned(), t.clone())))
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: [t.nrows(), t.ncols()], offset });
            offset += (t.len() * 8) as u64;
        }
        let header = Header {
            dtype: DTYPE.into(),
            tensors: entries,
            payload_bytes: offset,
            step: self.step,
            rng: self.rng.clone(),
            config: self.config.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        let mut buf = Vec::with_capacity(offset as usize);
        for t in self.tensors.values() {
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        out.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read<R: Read>(mut source: R) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut magic = [0u8; 4];
        source.read_exact(&mut magic).map_err(|_| bad("truncated before magic".into()))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        source.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version == 0 || version > FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut long = [0u8; 8];
        source.read_exact(&mut long)?;
        let header_len = u64::from_le_bytes(long);
        if header_len > 1 << 32 {
            return Err(bad("implausible header length".into()));
        }
        let mut header = vec![0u8; header_len as usize];
        source.read_exact(&mut header).map_err(|_| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&header)?;
        if header.dtype != DTYPE {
            return Err(bad(format!("unsupported dtype `{}`", header.dtype)));
        }
        let mut payload = Vec::new();
        source.read_to_end(&mut payload)?;
        if payload.len() as u64 != header.payload_bytes {
            return Err(bad(format!("payload is {} bytes, header says {}", payload.len(), header.payload_bytes)));
        }
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let [rows, cols] = entry.shape;
            let start = entry.offset as usize;
            let end = start + rows * cols * 8;
            if end > payload.len() {
                return Err(bad(format!("tensor `{}` runs past the payload", entry.name)));
            }
            let values = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Array2::from_shape_vec((rows, cols), values).map_err(|e| bad(e.to_string()))?;
            if tensors.insert(entry.name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor `{}`", entry.name)));
            }
        }
        Ok(Checkpoint { version, config: header.config, tensors, step: header.step, rng: header.rng })
    }
}
