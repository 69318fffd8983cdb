//! Versioned binary checkpoints with an embedded config fingerprint.
//!
//! Layout (little-endian): magic, format version, fingerprint, stage tag,
//! step, rng state (seed / word position / stream), then named parameter
//! sections, each a list of named f64 tensors. Loading verifies the magic,
//! version and fingerprint before touching any tensor data.

use std::io::{Read, Write};
use std::path::Path;

use portray_grad::nn::ParamStore;
use portray_grad::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PTRY";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        Self { seed: rng.get_seed(), word_pos: rng.get_word_pos(), stream: rng.get_stream() }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub fingerprint: String,
    pub stage: String,
    pub step: u64,
    pub rng: RngState,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub sections: Vec<(String, ParamStore)>,
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint("invalid string in checkpoint".into()))
    }
}

pub fn save(path: &Path, meta: &CheckpointMeta, sections: &[(&str, &ParamStore)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    write_str(&mut buf, &meta.fingerprint);
    write_str(&mut buf, &meta.stage);
    buf.extend_from_slice(&meta.step.to_le_bytes());
    buf.extend_from_slice(&meta.rng.seed);
    buf.extend_from_slice(&meta.rng.word_pos.to_le_bytes());
    buf.extend_from_slice(&meta.rng.stream.to_le_bytes());
    buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, store) in sections {
        write_str(&mut buf, name);
        buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
        for (tname, tensor) in store.names().iter().zip(store.tensors()) {
            write_str(&mut buf, tname);
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    // write via a temp file so a crash never leaves a partial checkpoint
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path, expected_fingerprint: &str) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let fingerprint = r.string()?;
    if fingerprint != expected_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: expected_fingerprint.to_string(),
            got: fingerprint,
        });
    }
    let stage = r.string()?;
    let step = r.u64()?;
    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.take(32)?);
    let word_pos = r.u128()?;
    let stream = r.u64()?;
    let n_sections = r.u32()? as usize;
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let sname = r.string()?;
        let n_tensors = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n_tensors {
            let tname = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(8 * n)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(&tname, Tensor::new(&shape, data));
        }
        sections.push((sname, store));
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            fingerprint,
            stage,
            step,
            rng: RngState { seed, word_pos, stream },
        },
        sections,
    })
}

/// Copy loaded tensors into an existing store, checking names and shapes.
pub fn copy_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            dst.len(),
            src.len()
        )));
    }
    for i in 0..dst.len() {
        if dst.names()[i] != src.names()[i] {
            return Err(Error::Checkpoint(format!(
                "parameter name mismatch at {i}: model '{}' vs checkpoint '{}'",
                dst.names()[i],
                src.names()[i]
            )));
        }
        if dst.tensors()[i].shape() != src.tensors()[i].shape() {
            return Err(Error::Checkpoint(format!(
                "parameter shape mismatch for '{}': {:?} vs {:?}",
                dst.names()[i],
                dst.tensors()[i].shape(),
                src.tensors()[i].shape()
            )));
        }
    }
    for (d, s) in dst.tensors_mut().iter_mut().zip(src.tensors()) {
        *d = s.clone();
    }
    Ok(())
}

/// Section lookup by name.
pub fn section<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<&'a ParamStore> {
    ckpt.sections
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, s)| s)
        .ok_or_else(|| Error::Checkpoint(format!("missing checkpoint section '{name}'")))
}
