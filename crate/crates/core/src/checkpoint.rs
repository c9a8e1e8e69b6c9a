//! Sectioned binary checkpoint files.
//!
//! ```text
//! "CSCM" | version u32 | section_count u32 | sections...
//! section: name_len u32 | name | meta_len u32 | meta (UTF-8 TOML) |
//!          tensor_count u32 | tensors... | crc32 u32
//! tensor:  name_len u32 | name | ndim u32 | dims u32... |
//!          payload_len u64 | f32 little-endian payload
//! ```
//!
//! All integers are little-endian. The CRC covers the section bytes from
//! `name_len` up to the CRC itself. Weights are stored as 32-bit floats, so a
//! save/load cycle rounds every value to `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CSCM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Section {
    pub fn new(name: impl Into<String>, meta: impl Into<String>) -> Self {
        Section {
            name: name.into(),
            meta: meta.into(),
            tensors: Vec::new(),
        }
    }

    pub fn from_params(name: impl Into<String>, meta: impl Into<String>, params: &ParamSet) -> Self {
        let mut s = Section::new(name, meta);
        s.tensors = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        s
    }

    /// Copies stored tensors into `params`; names, order and shapes must match.
    pub fn load_params(&self, params: &mut ParamSet) -> Result<()> {
        let mut stored = ParamSet::new();
        for (n, t) in &self.tensors {
            stored.add(n.clone(), t.clone());
        }
        params
            .load_from(&stored)
            .map_err(|e| Error::Checkpoint(format!("section `{}`: {e}", self.name)))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let start = out.len();
        put_str(out, &self.name);
        put_str(out, &self.meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&((t.numel() * 4) as u64).to_le_bytes());
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }

    fn section(&mut self) -> Result<Section> {
        let start = self.pos;
        let name = self.string()?;
        let meta = self.string()?;
        let count = self.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let tname = self.string()?;
            let ndim = self.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(self.u32()? as usize);
            }
            let len = self.u64()? as usize;
            let numel: usize = shape.iter().product();
            if len != numel * 4 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{tname}` in `{name}`: payload {len} bytes for shape {shape:?}"
                )));
            }
            let data = self
                .take(len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push((tname, Tensor::new(shape, data)?));
        }
        let computed = crc32fast::hash(&self.bytes[start..self.pos]);
        let stored = self.u32()?;
        if computed != stored {
            return Err(Error::Checkpoint(format!("checksum mismatch in section `{name}`")));
        }
        Ok(Section { name, meta, tensors })
    }
}

/// Ordered collection of named sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Section `name`, or an error naming the command that produces it.
    pub fn require(&self, name: &str, command: &'static str) -> Result<&Section> {
        self.get(name).ok_or_else(|| Error::MissingPrerequisite {
            section: name.to_string(),
            command,
        })
    }

    /// Inserts `section`, replacing any existing section of the same name.
    pub fn put(&mut self, section: Section) {
        match self.sections.iter_mut().find(|s| s.name == section.name) {
            Some(s) => *s = section,
            None => self.sections.push(section),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            s.encode(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            sections.push(r.section()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("cscm.tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Loads `path`, or starts empty when it does not exist.
    pub fn load_or_new(path: &Path) -> Result<Self> {
        if path.exists() {
            Checkpoint::load(path)
        } else {
            Ok(Checkpoint::new())
        }
    }
}

/// Rounds every parameter to the nearest `f32`, the precision checkpoints keep.
pub fn round_to_storage(params: &mut ParamSet) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}
