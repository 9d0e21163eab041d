//! Binary model format.
//!
//! ```text
//! "ONTXMODL" u32:version u32:len config-json
//! u32:n_params { u32:len name u32:ndim u64*ndim:dims f64*numel:values }
//! ```
//! All integers and floats are little-endian. Trailing sections (optimizer
//! state in checkpoints) follow the parameter block.

use std::path::Path;

use super::{EncoderModel, ModelConfig, ModelError, ParameterStore};
use crate::fsutil::write_atomic;

pub const MODEL_MAGIC: &[u8; 8] = b"ONTXMODL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
}

pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        ByteReader { data, pos: 0 }
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.data.len() - self.pos < n {
            return Err(ModelError::Format(format!("unexpected end of data at byte {}", self.pos)));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String, ModelError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| ModelError::Format("invalid utf-8 string".into()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| ModelError::Format("array too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn write_model(w: &mut ByteWriter, model: &EncoderModel) {
    w.bytes(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.str(&serde_json::to_string(model.config()).expect("config serializes"));
    let params = model.params();
    w.u32(params.len() as u32);
    for slot in 0..params.len() {
        let info = params.info(slot);
        w.str(&info.name);
        w.u32(info.shape.len() as u32);
        for &dim in &info.shape {
            w.u64(dim as u64);
        }
        w.f64s(params.value(slot));
    }
}

pub fn read_model(r: &mut ByteReader<'_>) -> Result<EncoderModel, ModelError> {
    if r.bytes(8).map_err(|_| ModelError::Format("not a model file".into()))? != MODEL_MAGIC {
        return Err(ModelError::Format("not a model file".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: MODEL_VERSION });
    }
    let config: ModelConfig =
        serde_json::from_str(&r.str()?).map_err(|e| ModelError::Format(format!("config: {e}")))?;
    config.validate()?;
    let reference = super::declarations(&config);
    let n = r.u32()? as usize;
    if n != reference.len() {
        return Err(ModelError::Format(format!("expected {} parameters, found {n}", reference.len())));
    }
    let mut store = ParameterStore::new();
    for (name_expected, shape_expected, _, decay) in reference {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if name != name_expected || shape != shape_expected {
            return Err(ModelError::Format(format!(
                "parameter {name} {shape:?} does not match {name_expected} {shape_expected:?}"
            )));
        }
        let values = r.f64s(shape.iter().product())?;
        store.push(name, shape, values, decay);
    }
    EncoderModel::from_parts(config, store)
}

impl EncoderModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        write_model(&mut w, self);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = ByteReader::new(bytes);
        let model = read_model(&mut r)?;
        if !r.is_at_end() {
            return Err(ModelError::Format("trailing bytes after parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    /// Loads a model file, or the model section of a checkpoint.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path)?;
        read_model(&mut ByteReader::new(&bytes))
    }
}
