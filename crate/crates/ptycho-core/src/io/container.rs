//! Bit-exact "P4DS" container: magic, version, a length-prefixed JSON
//! metadata block, then named binary sections.
//!
//! Layout (all integers little-endian, all arrays row-major):
//!
//! ```text
//! magic    4 bytes  "P4DS"
//! version  u32
//! meta     u64 length + JSON bytes (kept verbatim on rewrite)
//! section* name (u32 length + UTF-8)
//!          dtype tag u8 (1=f32 2=f64 3=c64 4=c128; complex interleaved)
//!          ndim u32, shape u64 x ndim
//!          payload u64 byte length + bytes
//! ```
//!
//! Unknown sections survive a read/rewrite cycle untouched, and the raw
//! metadata string is preserved rather than re-serialized.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{FormatError, PtychoError, Result};
use crate::tensor::{Data, Dtype, Precision, Tensor};

pub const MAGIC: &[u8; 4] = b"P4DS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub version: u32,
    pub meta_json: String,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new<M: Serialize>(meta: &M) -> Result<Self> {
        let meta_json = serde_json::to_string(meta)
            .map_err(|e| PtychoError::data(format!("metadata serialization: {e}")))?;
        Ok(Container { version: VERSION, meta_json, sections: Vec::new() })
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_str(&self.meta_json)
            .map_err(|e| FormatError::Malformed(format!("metadata: {e}")).into())
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Append a tensor section in its natural dtype for precision P.
    pub fn add_tensor<P: Precision>(&mut self, name: &str, t: &Tensor<P>) {
        self.add_tensor_as(name, t, t.dtype())
    }

    /// Append a tensor section converted to an explicit dtype (realness
    /// must match).
    pub fn add_tensor_as<P: Precision>(&mut self, name: &str, t: &Tensor<P>, dtype: Dtype) {
        assert_eq!(t.is_complex(), dtype.is_complex(), "dtype realness mismatch");
        let mut payload = Vec::with_capacity(t.numel() * dtype.byte_size());
        match (t.data(), dtype) {
            (Data::Real(v), Dtype::Real32) => {
                for &x in v {
                    payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
                }
            }
            (Data::Real(v), Dtype::Real64) => {
                for &x in v {
                    payload.extend_from_slice(&x.as_f64().to_le_bytes());
                }
            }
            (Data::Complex(v), Dtype::Complex64) => {
                for z in v {
                    payload.extend_from_slice(&(z.re.as_f64() as f32).to_le_bytes());
                    payload.extend_from_slice(&(z.im.as_f64() as f32).to_le_bytes());
                }
            }
            (Data::Complex(v), Dtype::Complex128) => {
                for z in v {
                    payload.extend_from_slice(&z.re.as_f64().to_le_bytes());
                    payload.extend_from_slice(&z.im.as_f64().to_le_bytes());
                }
            }
            _ => unreachable!(),
        }
        self.sections.push(Section {
            name: name.to_string(),
            dtype,
            shape: t.shape().iter().map(|&d| d as u64).collect(),
            payload,
        });
    }

    /// Decode a section into a tensor at precision P, converting between
    /// storage widths as needed.
    pub fn tensor<P: Precision>(&self, name: &str) -> Result<Tensor<P>> {
        let s = self
            .section(name)
            .ok_or_else(|| FormatError::Malformed(format!("missing section '{name}'")))?;
        let shape: Vec<usize> = s.shape.iter().map(|&d| d as usize).collect();
        let n: usize = shape.iter().product();
        let esz = s.dtype.byte_size();
        if s.payload.len() != n * esz {
            return Err(FormatError::Malformed(format!(
                "section '{name}' payload {} bytes, expected {}",
                s.payload.len(),
                n * esz
            ))
            .into());
        }
        let read_f = |i: usize, wide: bool, base: usize| -> f64 {
            if wide {
                f64::from_le_bytes(s.payload[base + i * 8..base + i * 8 + 8].try_into().unwrap())
            } else {
                f32::from_le_bytes(s.payload[base + i * 4..base + i * 4 + 4].try_into().unwrap())
                    as f64
            }
        };
        match s.dtype {
            Dtype::Real32 | Dtype::Real64 => {
                let wide = s.dtype == Dtype::Real64;
                let v: Vec<P> = (0..n).map(|i| P::of_f64(read_f(i, wide, 0))).collect();
                Ok(Tensor::from_real(shape, v)?)
            }
            Dtype::Complex64 | Dtype::Complex128 => {
                let wide = s.dtype == Dtype::Complex128;
                let v: Vec<Complex<P>> = (0..n)
                    .map(|i| {
                        Complex::new(
                            P::of_f64(read_f(2 * i, wide, 0)),
                            P::of_f64(read_f(2 * i + 1, wide, 0)),
                        )
                    })
                    .collect();
                Ok(Tensor::from_complex(shape, v)?)
            }
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        let meta = self.meta_json.as_bytes();
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(meta)?;
        for s in &self.sections {
            let name = s.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[s.dtype.tag()])?;
            w.write_all(&(s.shape.len() as u32).to_le_bytes())?;
            for &d in &s.shape {
                w.write_all(&d.to_le_bytes())?;
            }
            w.write_all(&(s.payload.len() as u64).to_le_bytes())?;
            w.write_all(&s.payload)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| FormatError::BadMagic)?;
        if &magic != MAGIC {
            return Err(FormatError::BadMagic.into());
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)
            .map_err(|_| FormatError::Truncated("version".into()))?;
        let version = u32::from_le_bytes(u32b);
        if version > VERSION {
            return Err(FormatError::VersionTooNew { found: version, supported: VERSION }.into());
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)
            .map_err(|_| FormatError::Truncated("metadata length".into()))?;
        let meta_len = u64::from_le_bytes(u64b) as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)
            .map_err(|_| FormatError::Truncated("metadata".into()))?;
        let meta_json = String::from_utf8(meta)
            .map_err(|_| FormatError::Malformed("metadata is not UTF-8".into()))?;
        serde_json::from_str::<serde_json::Value>(&meta_json)
            .map_err(|e| FormatError::Malformed(format!("metadata is not JSON: {e}")))?;

        let mut sections = Vec::new();
        loop {
            match r.read_exact(&mut u32b) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(u32b) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| FormatError::Truncated("section name".into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| FormatError::Malformed("section name is not UTF-8".into()))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)
                .map_err(|_| FormatError::Truncated(name.clone()))?;
            let dtype = Dtype::from_tag(tag[0])
                .ok_or_else(|| FormatError::Malformed(format!("bad dtype tag {} in '{name}'", tag[0])))?;
            r.read_exact(&mut u32b)
                .map_err(|_| FormatError::Truncated(name.clone()))?;
            let ndim = u32::from_le_bytes(u32b) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                r.read_exact(&mut u64b)
                    .map_err(|_| FormatError::Truncated(name.clone()))?;
                shape.push(u64::from_le_bytes(u64b));
            }
            r.read_exact(&mut u64b)
                .map_err(|_| FormatError::Truncated(name.clone()))?;
            let payload_len = u64::from_le_bytes(u64b) as usize;
            let numel: u64 = shape.iter().product();
            if payload_len as u64 != numel * dtype.byte_size() as u64 {
                return Err(FormatError::Malformed(format!(
                    "section '{name}' declares {payload_len} bytes for {numel} x {dtype:?}"
                ))
                .into());
            }
            let mut payload = vec![0u8; payload_len];
            r.read_exact(&mut payload)
                .map_err(|_| FormatError::Truncated(name.clone()))?;
            sections.push(Section { name, dtype, shape, payload });
        }
        Ok(Container { version, meta_json, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Serialized byte image, for bitwise comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write cannot fail");
        buf
    }
}

/// FNV-1a 64-bit hash used for config provenance.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
