//! Binary container for fitted models.
//!
//! Layout, all integers little-endian:
//!
//! | field            | encoding                                          |
//! |------------------|---------------------------------------------------|
//! | magic            | `b"FFCN"`                                         |
//! | version          | `u32`                                             |
//! | meta             | `u64` length, then UTF-8 JSON                     |
//! | section table    | `u32` count, then per section: `u32` name length, |
//! |                  | name bytes, `u32` rank, `u64` per dimension       |
//! | data             | every section's `f64` values in table order       |
//! | checksum         | CRC-32 of all preceding bytes, `u32`              |

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"FFCN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelFile {
    pub meta: String,
    sections: Vec<Section>,
    index: HashMap<String, usize>,
}

impl ModelFile {
    pub fn new(meta: String) -> Self {
        Self { meta, ..Self::default() }
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "section {name}: shape does not match data");
        assert!(!self.index.contains_key(&name), "duplicate section {name}");
        self.index.insert(name.clone(), self.sections.len());
        self.sections.push(Section { name, shape, data });
    }

    pub fn push_array<D: ndarray::Dimension>(&mut self, name: impl Into<String>, a: &ndarray::Array<f64, D>) {
        self.push(name, a.shape().to_vec(), a.iter().copied().collect());
    }

    pub fn push_scalars(&mut self, name: impl Into<String>, values: &[f64]) {
        self.push(name, vec![values.len()], values.to_vec());
    }

    pub fn push_indices(&mut self, name: impl Into<String>, values: &[usize]) {
        self.push(name, vec![values.len()], values.iter().map(|&v| v as f64).collect());
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.index.get(name).map(|&i| &self.sections[i])
    }

    fn section(&self, name: &str) -> CliResult<&Section> {
        self.get(name).ok_or_else(|| missing(name))
    }

    pub fn array(&self, name: &str) -> CliResult<ArrayD<f64>> {
        let s = self.section(name)?;
        Ok(ArrayD::from_shape_vec(IxDyn(&s.shape), s.data.clone()).expect("validated on read"))
    }

    pub fn array1(&self, name: &str) -> CliResult<Array1<f64>> {
        self.array(name)?.into_dimensionality().map_err(|_| rank_error(name, 1))
    }

    pub fn array2(&self, name: &str) -> CliResult<Array2<f64>> {
        self.array(name)?.into_dimensionality().map_err(|_| rank_error(name, 2))
    }

    pub fn scalars(&self, name: &str) -> CliResult<Vec<f64>> {
        Ok(self.section(name)?.data.clone())
    }

    pub fn indices(&self, name: &str) -> CliResult<Vec<usize>> {
        self.section(name)?
            .data
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
                    Ok(v as usize)
                } else {
                    Err(CliError::ModelFile { path: PathBuf::new(), msg: format!("section {name} holds non-index value {v}") })
                }
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
            for &d in &s.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for s in &self.sections {
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> CliResult<Self> {
        let fail = |msg: String| CliError::ModelFile { path: path.to_path_buf(), msg };
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(fail("not a model file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(fail("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4, path: path.to_path_buf() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(fail(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let meta_len = r.u64()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| fail("meta is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| fail("section name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<CliResult<Vec<_>>>()?;
            table.push((name, shape));
        }
        let mut file = ModelFile::new(meta);
        for (name, shape) in table {
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fail(format!("section {name} too large")))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| fail(format!("section {name} too large")))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if file.get(&name).is_some() {
                return Err(fail(format!("duplicate section {name}")));
            }
            file.push(name, shape, data);
        }
        if r.pos != body.len() {
            return Err(fail(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CliError::ModelFile { path: self.path.clone(), msg: "truncated".into() })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn missing(name: &str) -> CliError {
    CliError::ModelFile { path: PathBuf::new(), msg: format!("missing section {name}") }
}

fn rank_error(name: &str, rank: usize) -> CliError {
    CliError::ModelFile { path: PathBuf::new(), msg: format!("section {name} is not rank {rank}") }
}
