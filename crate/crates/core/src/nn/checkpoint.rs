//! Versioned binary checkpoints.
//!
//! Layout: magic `RELGRAPH`, `u32` version, hyperparameters, step, seed,
//! freeze flags, tensor shapes, then little-endian `f64` blocks for the
//! parameters followed by the Adam first and second moments, all in
//! declared tensor order. A SHA-256 of everything before it closes the
//! file.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::gcn::Activation;
use super::model::{ModelConfig, ModelState};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RELGRAPH";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("invalid flag byte {b}"))),
        }
    }
}

pub fn to_bytes(state: &ModelState) -> Vec<u8> {
    let c = &state.config;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    for v in [
        state.vocab_size,
        c.d_model,
        c.d_ff,
        c.n_enc_layers,
        c.max_seq_len,
        c.gcn_layers,
        c.max_decode_len,
    ] {
        w.u64(v as u64);
    }
    w.u8(c.residual as u8);
    w.u8(match c.activation {
        Activation::Relu => 0,
        Activation::Identity => 1,
    });
    w.u8(c.stats_enabled as u8);
    w.f64(c.init_scale);
    w.u64(state.step);
    w.u64(state.seed);
    w.u8(state.params.encoder.frozen as u8);
    w.u8(state.params.decoder.frozen as u8);
    let tensors = state.params.tensors();
    w.u32(tensors.len() as u32);
    for (_, t) in &tensors {
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
    }
    for block in [
        tensors.iter().map(|(_, t)| *t).collect::<Vec<_>>(),
        state.adam_m.iter().collect(),
        state.adam_v.iter().collect(),
    ] {
        for t in block {
            for &x in t.data() {
                w.f64(x);
            }
        }
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

pub fn from_bytes(buf: &[u8], label: &str) -> Result<ModelState> {
    if buf.len() < MAGIC.len() + DIGEST_LEN {
        return Err(Error::Checksum(label.to_string()));
    }
    let (body, digest) = buf.split_at(buf.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum(label.to_string()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let vocab_size = r.usize()?;
    let d_model = r.usize()?;
    let d_ff = r.usize()?;
    let n_enc_layers = r.usize()?;
    let max_seq_len = r.usize()?;
    let gcn_layers = r.usize()?;
    let max_decode_len = r.usize()?;
    let residual = r.bool()?;
    let activation = match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::Identity,
        b => return Err(Error::Checkpoint(format!("unknown activation {b}"))),
    };
    let stats_enabled = r.bool()?;
    let init_scale = r.f64()?;
    let config = ModelConfig {
        d_model,
        d_ff,
        n_enc_layers,
        max_seq_len,
        gcn_layers,
        residual,
        activation,
        max_decode_len,
        stats_enabled,
        init_scale,
    };
    let step = r.u64()?;
    let seed = r.u64()?;
    let encoder_frozen = r.bool()?;
    let decoder_frozen = r.bool()?;

    // Shapes are fixed by the hyperparameters; build a template and check.
    let mut state = ModelState::init(config, vocab_size, seed)?;
    state.step = step;
    state.params.encoder.frozen = encoder_frozen;
    state.params.decoder.frozen = decoder_frozen;
    let n = r.u32()? as usize;
    let expected: Vec<Vec<usize>> = state.params.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
    if n != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {n}",
            expected.len()
        )));
    }
    for shape in &expected {
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::Checkpoint(format!("shape {dims:?} != expected {shape:?}")));
        }
    }
    let read_block = |r: &mut Reader, dst: &mut Tensor| -> Result<()> {
        for x in dst.data_mut() {
            *x = r.f64()?;
        }
        Ok(())
    };
    for (_, t) in state.params.tensors_mut() {
        read_block(&mut r, t)?;
    }
    for t in state.adam_m.iter_mut() {
        read_block(&mut r, t)?;
    }
    for t in state.adam_v.iter_mut() {
        read_block(&mut r, t)?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(state)
}

pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf, &path.display().to_string())
}
