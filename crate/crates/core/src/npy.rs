//! Minimal NPY v1.0 reader and writer.
//!
//! Only little-endian, C-order arrays of `f4`, `f8` and the common integer
//! types are handled. See <https://numpy.org/doc/stable/reference/generated/numpy.lib.format.html>.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{KcdError, Result};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Descr {
    Float(Dtype),
    Int { bytes: usize, signed: bool },
}

impl Descr {
    fn parse(s: &str) -> Result<Self> {
        let (endian, rest) = s.split_at(1.min(s.len()));
        match endian {
            "<" | "|" => {}
            ">" => {
                return Err(KcdError::UnsupportedLayout(format!("big-endian dtype '{s}'")));
            }
            _ => return Err(KcdError::Format(format!("unrecognized dtype '{s}'"))),
        }
        Ok(match rest {
            "f4" => Descr::Float(Dtype::F32),
            "f8" => Descr::Float(Dtype::F64),
            "i1" => Descr::Int { bytes: 1, signed: true },
            "i2" => Descr::Int { bytes: 2, signed: true },
            "i4" => Descr::Int { bytes: 4, signed: true },
            "i8" => Descr::Int { bytes: 8, signed: true },
            "u1" => Descr::Int { bytes: 1, signed: false },
            "u2" => Descr::Int { bytes: 2, signed: false },
            "u4" => Descr::Int { bytes: 4, signed: false },
            "u8" => Descr::Int { bytes: 8, signed: false },
            _ => return Err(KcdError::Format(format!("unsupported dtype '{s}'"))),
        })
    }

    fn width(self) -> usize {
        match self {
            Descr::Float(Dtype::F32) => 4,
            Descr::Float(Dtype::F64) => 8,
            Descr::Int { bytes, .. } => bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Header {
    descr: Descr,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Raw decoded array payload.
#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    Float { dtype: Dtype, values: Vec<f64> },
    Int(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

fn format_header(descr: &str, shape: &[usize]) -> Vec<u8> {
    let shape_str = match shape {
        [n] => format!("({n},)"),
        _ => format!(
            "({})",
            shape.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_str}, }}");
    // magic(6) + version(2) + len(2) + dict + '\n' must be a multiple of 64
    let unpadded = 10 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(10 + dict.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

/// Serialize a float array. Values are narrowed to `f32` when `dtype` asks for it.
pub fn encode_float(shape: &[usize], dtype: Dtype, values: &[f64]) -> Vec<u8> {
    let mut out = format_header(dtype.descr(), shape);
    match dtype {
        Dtype::F32 => values.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn encode_i64(shape: &[usize], values: &[i64]) -> Vec<u8> {
    let mut out = format_header("<i8", shape);
    values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out
}

pub fn write_float(path: &Path, shape: &[usize], dtype: Dtype, values: &[f64]) -> Result<()> {
    write_bytes(path, &encode_float(shape, dtype, values))
}

pub fn write_i64(path: &Path, shape: &[usize], values: &[i64]) -> Result<()> {
    write_bytes(path, &encode_i64(shape, values))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<NpyArray> {
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn decode(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(KcdError::Format("missing NPY magic".into()));
    }
    if bytes[6] != 1 {
        return Err(KcdError::Format(format!(
            "NPY version {}.{} not supported, only 1.0",
            bytes[6], bytes[7]
        )));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let body_start = 10 + hlen;
    if bytes.len() < body_start {
        return Err(KcdError::Format("header extends past end of file".into()));
    }
    let text = std::str::from_utf8(&bytes[10..body_start])
        .map_err(|_| KcdError::Format("header is not ASCII".into()))?;
    let header = parse_header(text)?;
    if header.fortran_order {
        return Err(KcdError::UnsupportedLayout("fortran_order=True".into()));
    }

    let count: usize = header.shape.iter().product();
    let width = header.descr.width();
    let payload = &bytes[body_start..];
    if payload.len() != count * width {
        return Err(KcdError::Format(format!(
            "payload holds {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            count * width
        )));
    }
    let chunks = payload.chunks_exact(width);
    let data = match header.descr {
        Descr::Float(Dtype::F32) => NpyData::Float {
            dtype: Dtype::F32,
            values: chunks
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        },
        Descr::Float(Dtype::F64) => NpyData::Float {
            dtype: Dtype::F64,
            values: chunks.map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        },
        Descr::Int { bytes: w, signed } => NpyData::Int(
            chunks
                .map(|c| {
                    let mut b = [0u8; 8];
                    b[..w].copy_from_slice(c);
                    if signed && c[w - 1] & 0x80 != 0 {
                        b[w..].fill(0xff);
                    }
                    i64::from_le_bytes(b)
                })
                .collect(),
        ),
    };
    Ok(NpyArray { shape: header.shape, data })
}

/// Parse the Python dict literal of an NPY header.
fn parse_header(text: &str) -> Result<Header> {
    let t = text.trim_end_matches(['\n', ' ', '\0']).trim();
    let inner = t
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| KcdError::Format("header is not a dict literal".into()))?;

    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let (key, after) = take_quoted(rest)?;
        let after = after
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| KcdError::Format(format!("expected ':' after key '{key}'")))?
            .trim_start();
        let remaining = match key {
            "descr" => {
                let (v, r) = take_quoted(after)?;
                descr = Some(Descr::parse(v)?);
                r
            }
            "fortran_order" => {
                if let Some(r) = after.strip_prefix("True") {
                    fortran = Some(true);
                    r
                } else if let Some(r) = after.strip_prefix("False") {
                    fortran = Some(false);
                    r
                } else {
                    return Err(KcdError::Format("fortran_order must be True or False".into()));
                }
            }
            "shape" => {
                let close = after
                    .find(')')
                    .filter(|_| after.starts_with('('))
                    .ok_or_else(|| KcdError::Format("shape must be a tuple".into()))?;
                let dims = after[1..close]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.trim_end_matches('L')
                            .parse::<usize>()
                            .map_err(|_| KcdError::Format(format!("bad shape entry '{s}'")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                shape = Some(dims);
                &after[close + 1..]
            }
            other => return Err(KcdError::Format(format!("unexpected header key '{other}'"))),
        };
        rest = remaining.trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }

    match (descr, fortran, shape) {
        (Some(descr), Some(fortran_order), Some(shape)) => Ok(Header { descr, fortran_order, shape }),
        _ => Err(KcdError::Format("header lacks descr, fortran_order or shape".into())),
    }
}

fn take_quoted(s: &str) -> Result<(&str, &str)> {
    let q = s
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| KcdError::Format(format!("expected quoted string at '{s}'")))?;
    let end = s[1..]
        .find(q)
        .ok_or_else(|| KcdError::Format("unterminated string in header".into()))?;
    Ok((&s[1..1 + end], &s[end + 2..]))
}
