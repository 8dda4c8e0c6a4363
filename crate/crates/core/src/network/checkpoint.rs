//! Versioned binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "AUNETMDL"
//! format       u32       FORMAT_VERSION
//! toolkit      str       crate version that wrote the file
//! config       str       ModelConfig as JSON
//! params       u32 count, then per parameter:
//!                str name, 4 × u32 shape, f64 × numel values
//! stats        u32 count, then per batch-norm layer:
//!                str name, u32 channels, f64 × channels mean, f64 × channels var
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::substrate::Tensor4;

use super::{Model, ModelConfig};

pub const MODEL_MAGIC: &[u8; 8] = b"AUNETMDL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
pub(crate) struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    pub fn new(magic: &[u8; 8]) -> Self {
        let mut w = BinWriter::default();
        w.buf.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        w.str(env!("CARGO_PKG_VERSION"));
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn tensor(&mut self, t: &Tensor4) {
        for d in t.shape().0 {
            self.u32(d as u32);
        }
        self.f64s(t.data());
    }

    pub fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

pub(crate) struct BinReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    /// Verifies checksum, magic and format version.
    pub fn open(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 32 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if &body[..8] != magic {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&body[..8]),
                String::from_utf8_lossy(magic)
            )));
        }
        let mut r = BinReader { data: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Checkpoint("checksum mismatch (corrupt file)".into()));
        }
        let _toolkit = r.str()?;
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("truncated record".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn tensor(&mut self) -> Result<Tensor4> {
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = self.u32()? as usize;
        }
        let n = shape.iter().product();
        Tensor4::from_vec(shape, self.f64s(n)?).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(())
    }
}

pub(super) fn encode_model(model: &Model) -> Vec<u8> {
    let mut w = BinWriter::new(MODEL_MAGIC);
    write_model_body(&mut w, model);
    w.finish()
}

pub(crate) fn write_model_body(w: &mut BinWriter, model: &Model) {
    w.str(&serde_json::to_string(&model.config).expect("config serialises"));
    let params = model.store.params();
    w.u32(params.len() as u32);
    for p in params {
        w.str(&p.name);
        w.tensor(&p.value);
    }
    let stats = model.store.stats();
    w.u32(stats.len() as u32);
    for s in stats {
        w.str(&s.name);
        w.u32(s.stats.channels() as u32);
        w.f64s(&s.stats.mean);
        w.f64s(&s.stats.var);
    }
}

pub(super) fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = BinReader::open(bytes, MODEL_MAGIC)?;
    let model = read_model_body(&mut r)?;
    r.expect_end()?;
    Ok(model)
}

pub(crate) fn read_model_body(r: &mut BinReader<'_>) -> Result<Model> {
    let config: ModelConfig = serde_json::from_str(&r.str()?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut model = Model::build(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = r.u32()? as usize;
    if n != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{n} parameters stored, architecture has {}",
            model.store.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..n {
        let name = r.str()?;
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("parameter {name} stored twice")));
        }
        let t = r.tensor()?;
        model
            .store
            .set(&name, t)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    let ns = r.u32()? as usize;
    if ns != model.store.stats().len() {
        return Err(Error::Checkpoint(format!(
            "{ns} norm layers stored, architecture has {}",
            model.store.stats().len()
        )));
    }
    for slot in model.store.stats_mut() {
        let name = r.str()?;
        if name != slot.name {
            return Err(Error::Checkpoint(format!("norm layer {name}, expected {}", slot.name)));
        }
        let c = r.u32()? as usize;
        if c != slot.stats.channels() {
            return Err(Error::Checkpoint(format!(
                "{name}: {c} channels, expected {}",
                slot.stats.channels()
            )));
        }
        slot.stats.mean = r.f64s(c)?;
        slot.stats.var = r.f64s(c)?;
    }
    Ok(model)
}
