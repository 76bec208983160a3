//! Minimal reader for little-endian MATLAB level-5 files holding real
//! numeric matrices, enough for the SVHN distribution files.

use std::io::Read;

use crate::{Error, Result};

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

#[derive(Debug, Clone, PartialEq)]
pub enum MatValues {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl MatValues {
    pub fn len(&self) -> usize {
        match self {
            MatValues::U8(v) => v.len(),
            MatValues::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl MatValues {
    pub fn get(&self, i: usize) -> f64 {
        match self {
            MatValues::U8(v) => v[i] as f64,
            MatValues::F64(v) => v[i],
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            MatValues::U8(v) => Box::new(v.iter().map(|&b| b as f64)),
            MatValues::F64(v) => Box::new(v.iter().copied()),
        }
    }
}

/// One named matrix. `values` are in column-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatVar {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: MatValues,
}

fn bad(msg: &str) -> Error {
    Error::Dataset(format!("MAT file: {msg}"))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    /// Read one element, returning `(type, payload)`.
    fn element(&mut self, pad: bool) -> Result<(u32, &'a [u8])> {
        let first = self.u32()?;
        if first >> 16 != 0 {
            // small data element packed into the tag
            let ty = first & 0xffff;
            let n = (first >> 16) as usize;
            let data = self.take(4)?;
            return Ok((ty, &data[..n.min(4)]));
        }
        let n = self.u32()? as usize;
        let data = self.take(n)?;
        if pad {
            let rem = n % 8;
            if rem != 0 {
                let skip = (8 - rem).min(self.buf.len() - self.pos);
                self.pos += skip;
            }
        }
        Ok((first, data))
    }
}

fn numeric(ty: u32, data: &[u8]) -> Result<MatValues> {
    fn conv<const N: usize>(data: &[u8], f: impl Fn([u8; N]) -> f64) -> Vec<f64> {
        data.chunks_exact(N).map(|c| f(c.try_into().unwrap())).collect()
    }
    Ok(match ty {
        MI_UINT8 => MatValues::U8(data.to_vec()),
        MI_INT8 => MatValues::F64(data.iter().map(|&b| b as i8 as f64).collect()),
        MI_INT16 => MatValues::F64(conv::<2>(data, |b| i16::from_le_bytes(b) as f64)),
        MI_UINT16 => MatValues::F64(conv::<2>(data, |b| u16::from_le_bytes(b) as f64)),
        MI_INT32 => MatValues::F64(conv::<4>(data, |b| i32::from_le_bytes(b) as f64)),
        MI_UINT32 => MatValues::F64(conv::<4>(data, |b| u32::from_le_bytes(b) as f64)),
        MI_SINGLE => MatValues::F64(conv::<4>(data, |b| f32::from_le_bytes(b) as f64)),
        MI_DOUBLE => MatValues::F64(conv::<8>(data, f64::from_le_bytes)),
        MI_INT64 => MatValues::F64(conv::<8>(data, |b| i64::from_le_bytes(b) as f64)),
        MI_UINT64 => MatValues::F64(conv::<8>(data, |b| u64::from_le_bytes(b) as f64)),
        other => return Err(bad(&format!("unsupported numeric type {other}"))),
    })
}

fn matrix(data: &[u8]) -> Result<Option<MatVar>> {
    let mut c = Cursor { buf: data, pos: 0 };
    let (_, flags) = c.element(true)?;
    if flags.len() < 4 {
        return Err(bad("short array flags"));
    }
    let class = flags[0];
    let complex = flags[1] & 0x08 != 0;
    // 6..=15 are the numeric classes
    if !(6..=15).contains(&class) || complex {
        return Ok(None);
    }
    let (_, dims) = c.element(true)?;
    let dims: Vec<usize> = dims
        .chunks_exact(4)
        .map(|b| i32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    let (_, name) = c.element(true)?;
    let name = String::from_utf8_lossy(name).into_owned();
    let (ty, real) = c.element(true)?;
    let values = numeric(ty, real)?;
    if values.len() != dims.iter().product::<usize>() {
        return Err(bad(&format!("{name}: value count does not match dims")));
    }
    Ok(Some(MatVar { name, dims, values }))
}

/// Parse every real numeric matrix in a level-5 MAT file.
pub fn read_mat(bytes: &[u8]) -> Result<Vec<MatVar>> {
    if bytes.len() < 128 {
        return Err(bad("missing header"));
    }
    if &bytes[126..128] != b"IM" {
        return Err(bad("only little-endian level-5 files are supported"));
    }
    let mut c = Cursor {
        buf: &bytes[128..],
        pos: 0,
    };
    let mut vars = Vec::new();
    while !c.done() {
        let (ty, data) = c.element(true)?;
        match ty {
            MI_MATRIX => vars.extend(matrix(data)?),
            MI_COMPRESSED => {
                let mut inflated = Vec::new();
                flate2::read::ZlibDecoder::new(data)
                    .read_to_end(&mut inflated)
                    .map_err(|e| bad(&format!("inflate failed: {e}")))?;
                let mut inner = Cursor {
                    buf: &inflated,
                    pos: 0,
                };
                while !inner.done() {
                    let (ty, d) = inner.element(true)?;
                    if ty == MI_MATRIX {
                        vars.extend(matrix(d)?);
                    }
                }
            }
            _ => {}
        }
    }
    Ok(vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tagged(ty: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = ty.to_le_bytes().to_vec();
        v.extend((payload.len() as u32).to_le_bytes());
        v.extend(payload);
        while v.len() % 8 != 0 {
            v.push(0);
        }
        v
    }

    fn matrix_element(name: &str, dims: &[i32], ty: u32, values: &[u8]) -> Vec<u8> {
        let mut body = tagged(MI_UINT32, &[9, 0, 0, 0, 0, 0, 0, 0]);
        let d: Vec<u8> = dims.iter().flat_map(|x| x.to_le_bytes()).collect();
        body.extend(tagged(MI_INT32, &d));
        body.extend(tagged(MI_INT8, name.as_bytes()));
        body.extend(tagged(ty, values));
        tagged(MI_MATRIX, &body)
    }

    fn header() -> Vec<u8> {
        let mut h = vec![b' '; 116];
        h.extend([0u8; 8]);
        h.extend([0, 1]);
        h.extend(b"IM");
        h
    }

    #[test]
    fn reads_plain_and_compressed_matrices() {
        let doubles: Vec<u8> = [1.0f64, 2.0, 10.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let y = matrix_element("y", &[3, 1], MI_DOUBLE, &doubles);
        let x = matrix_element("X", &[2, 2], MI_UINT8, &[1, 2, 3, 4]);
        let mut z = flate2::write::ZlibEncoder::new(Vec::new(), flate2::Compression::default());
        z.write_all(&x).unwrap();
        let packed = z.finish().unwrap();
        let mut file = header();
        file.extend(y);
        file.extend(15u32.to_le_bytes());
        file.extend((packed.len() as u32).to_le_bytes());
        file.extend(&packed);
        let vars = read_mat(&file).unwrap();
        assert_eq!(vars.len(), 2);
        assert_eq!(vars[0].name, "y");
        assert_eq!(vars[0].values, MatValues::F64(vec![1.0, 2.0, 10.0]));
        assert_eq!(vars[1].dims, vec![2, 2]);
        assert_eq!(vars[1].values, MatValues::U8(vec![1, 2, 3, 4]));
    }

    #[test]
    fn rejects_big_endian() {
        let mut h = header();
        h[126] = b'M';
        h[127] = b'I';
        assert!(read_mat(&h).is_err());
    }
}
