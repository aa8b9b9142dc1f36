//! Binary container shared by datasets and checkpoints.
//!
//! ```text
//! magic   "MXL1"
//! version u16 LE
//! count   u32 LE
//! record* name_len u16 | name utf8 | elem u8 | ndims u8 | dims u32* | checksum u64 | payload
//! ```
//!
//! Element type 1 is interleaved re/im `f32`, element type 2 is `f64`. All
//! numbers are little-endian and payloads are row-major. The checksum is
//! FNV-1a over the payload bytes.

use std::fs;
use std::path::Path;

use ndarray::{Array5, IxDyn};

use crate::error::{Error, Result};
use crate::sim::ChannelTrace;
use crate::C64;

pub const MAGIC: &[u8; 4] = b"MXL1";
pub const VERSION: u16 = 1;

const ELEM_C32: u8 = 1;
const ELEM_F64: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Stored as interleaved 32-bit floats.
    Complex(Vec<C64>),
    Real(Vec<f64>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::Complex(v) => v.len(),
            Payload::Real(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Payload,
}

impl Record {
    pub fn complex(name: impl Into<String>, dims: Vec<usize>, data: Vec<C64>) -> Self {
        Record {
            name: name.into(),
            dims,
            data: Payload::Complex(data),
        }
    }

    pub fn real(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        Record {
            name: name.into(),
            dims,
            data: Payload::Real(data),
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        let n: usize = rec.dims.iter().product();
        if n != rec.data.len() {
            return Err(Error::Container(format!(
                "record `{}`: dims {:?} hold {n} elements, payload has {}",
                rec.name,
                rec.dims,
                rec.data.len()
            )));
        }
        if rec.name.len() > u16::MAX as usize || rec.dims.len() > u8::MAX as usize {
            return Err(Error::Container(format!("record `{}` header too large", rec.name)));
        }
        let mut payload = Vec::new();
        let elem = match &rec.data {
            Payload::Complex(v) => {
                for z in v {
                    payload.extend_from_slice(&(z.re as f32).to_le_bytes());
                    payload.extend_from_slice(&(z.im as f32).to_le_bytes());
                }
                ELEM_C32
            }
            Payload::Real(v) => {
                for x in v {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
                ELEM_F64
            }
        };
        out.extend_from_slice(&(rec.name.len() as u16).to_le_bytes());
        out.extend_from_slice(rec.name.as_bytes());
        out.push(elem);
        out.push(rec.dims.len() as u8);
        for &d in &rec.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Container(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Container(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Record>> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Container("record name is not utf-8".into()))?;
        let elem = cur.u8()?;
        let ndims = cur.u8()? as usize;
        let dims = (0..ndims)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let expected = cur.u64()?;
        let n: usize = dims.iter().product();
        let width = match elem {
            ELEM_C32 | ELEM_F64 => 8,
            other => return Err(Error::Container(format!("unknown element type {other}"))),
        };
        let payload = cur.take(n * width)?;
        let actual = fnv1a64(payload);
        if actual != expected {
            return Err(Error::Checksum {
                record: name,
                expected,
                actual,
            });
        }
        let data = if elem == ELEM_C32 {
            Payload::Complex(
                payload
                    .chunks_exact(8)
                    .map(|c| {
                        let re = f32::from_le_bytes(c[..4].try_into().unwrap());
                        let im = f32::from_le_bytes(c[4..].try_into().unwrap());
                        C64::new(re as f64, im as f64)
                    })
                    .collect(),
            )
        } else {
            Payload::Real(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        };
        records.push(Record { name, dims, data });
    }
    if cur.pos != buf.len() {
        return Err(Error::Container(format!(
            "{} trailing bytes",
            buf.len() - cur.pos
        )));
    }
    Ok(records)
}

pub fn write_container(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, encode(records)?)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<Record>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

pub fn save_trace(path: &Path, trace: &ChannelTrace) -> Result<()> {
    let ul = Record::complex(
        "uplink",
        trace.uplink.shape().to_vec(),
        trace.uplink.iter().copied().collect(),
    );
    let dl = Record::complex(
        "downlink",
        trace.downlink.shape().to_vec(),
        trace.downlink.iter().copied().collect(),
    );
    let fd = Record::real("doppler_hz", vec![1], vec![trace.doppler_hz]);
    write_container(path, &[ul, dl, fd])
}

fn complex5(records: &[Record], name: &str) -> Result<Array5<C64>> {
    let rec = records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::Container(format!("missing record `{name}`")))?;
    let Payload::Complex(data) = &rec.data else {
        return Err(Error::Container(format!("record `{name}` is not complex")));
    };
    if rec.dims.len() != 5 {
        return Err(Error::Container(format!("record `{name}` must be 5-D")));
    }
    ndarray::ArrayD::from_shape_vec(IxDyn(&rec.dims), data.clone())
        .and_then(|a| a.into_dimensionality())
        .map_err(|e| Error::Container(e.to_string()))
}

/// Loads a trace written by [`save_trace`]. Values come back at 32-bit precision.
pub fn load_trace(path: &Path) -> Result<ChannelTrace> {
    let records = read_container(path)?;
    let doppler_hz = match records.iter().find(|r| r.name == "doppler_hz") {
        Some(Record {
            data: Payload::Real(v),
            ..
        }) if v.len() == 1 => v[0],
        _ => return Err(Error::Container("missing record `doppler_hz`".into())),
    };
    Ok(ChannelTrace {
        uplink: complex5(&records, "uplink")?,
        downlink: complex5(&records, "downlink")?,
        doppler_hz,
    })
}
