//! Binary formats: 8-bit PGM (P5) images, the UDT1 tensor record, and
//! UDCK checkpoints.
//!
//! UDT1: `b"UDT1"`, dtype `u8` (1 = f64, 2 = u8), rank `u8`, rank x dim
//! `u32` LE, row-major LE payload.
//!
//! UDCK: `b"UDCK"`, `u32` LE config length, config JSON (UTF-8), `u32`
//! tensor count, then per tensor `u32` name length, name, UDT1 record.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!("{width}x{height} image given {} pixels", pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    /// Intensities scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
    }
}

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Parse { offset, message: message.into() })
}

pub fn write_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    /// Skip whitespace and `#` comments.
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return parse_err(start, format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .or_else(|_| parse_err(start, format!("{what} out of range")))
    }
}

pub fn read_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if !bytes.starts_with(b"P5") {
        return parse_err(0, "missing P5 magic");
    }
    let mut c = Cursor { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(u8::is_ascii_whitespace) {
        return parse_err(2, "expected whitespace after magic");
    }
    let width = c.number("width")?;
    let height = c.number("height")?;
    c.skip_space();
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return parse_err(maxval_at, format!("maxval {maxval} unsupported, expected 255"));
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return parse_err(c.pos, "expected a single whitespace byte before the payload");
    }
    let start = c.pos + 1;
    let expected = width.checked_mul(height).ok_or_else(|| Error::Parse { offset: 3, message: "image too large".into() })?;
    let actual = bytes.len() - start;
    if actual < expected {
        return parse_err(start, format!("truncated payload: expected {expected} bytes, found {actual}"));
    }
    if actual > expected {
        return parse_err(start + expected, format!("{} trailing bytes after payload", actual - expected));
    }
    GrayImage::new(width, height, bytes[start..].to_vec())
}

pub fn save_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    Ok(fs::write(path, write_pgm(img))?)
}

pub fn load_pgm(path: &Path) -> Result<GrayImage> {
    read_pgm(&fs::read(path)?)
}

const F64_CODE: u8 = 1;
const U8_CODE: u8 = 2;

/// Decoded UDT1 payload.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Tensor),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

fn header(out: &mut Vec<u8>, code: u8, shape: &[usize]) -> Result<()> {
    if shape.len() > usize::from(u8::MAX) {
        return Err(Error::Shape(format!("rank {} too large", shape.len())));
    }
    out.extend_from_slice(b"UDT1");
    out.push(code);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    header(out, F64_CODE, t.shape())?;
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_u8(shape: &[usize], data: &[u8], out: &mut Vec<u8>) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::Shape(format!("u8 tensor {shape:?} given {} bytes", data.len())));
    }
    header(out, U8_CODE, shape)?;
    out.extend_from_slice(data);
    Ok(())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let have = bytes.len().saturating_sub(*pos);
    if have < n {
        return parse_err(*pos, format!("truncated {what}: expected {n} bytes, found {have}"));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4, what)?.try_into().expect("4 bytes")))
}

/// Decode one UDT1 record starting at `*pos`, advancing past it.
pub fn decode_tensor(bytes: &[u8], pos: &mut usize) -> Result<TensorData> {
    let start = *pos;
    if take(bytes, pos, 4, "magic")? != b"UDT1" {
        return parse_err(start, "missing UDT1 magic");
    }
    let code_at = *pos;
    let code = take(bytes, pos, 1, "dtype")?[0];
    let rank = usize::from(take(bytes, pos, 1, "rank")?[0]);
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(bytes, pos, "dims")? as usize);
    }
    let n: usize = shape.iter().product();
    match code {
        F64_CODE => {
            if rank > MAX_RANK {
                return parse_err(code_at + 1, format!("f64 tensor rank {rank} exceeds {MAX_RANK}"));
            }
            let payload = take(bytes, pos, n * 8, "f64 payload")?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Ok(TensorData::F64(Tensor::new(&shape, data)?))
        }
        U8_CODE => Ok(TensorData::U8 { data: take(bytes, pos, n, "u8 payload")?.to_vec(), shape }),
        other => parse_err(code_at, format!("unknown dtype code {other}")),
    }
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = Vec::new();
    encode_tensor(t, &mut out)?;
    Ok(fs::write(path, out)?)
}

pub fn read_tensor_file(path: &Path) -> Result<TensorData> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let t = decode_tensor(&bytes, &mut pos)?;
    if pos != bytes.len() {
        return parse_err(pos, "trailing bytes after tensor record");
    }
    Ok(t)
}

/// Named parameter tensors plus the JSON configuration that built them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let too_big = |what: &str| Error::Data(format!("{what} exceeds u32 length"));
        let mut out = b"UDCK".to_vec();
        let cfg = self.config_json.as_bytes();
        out.extend_from_slice(&u32::try_from(cfg.len()).map_err(|_| too_big("config"))?.to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(|_| too_big("tensor count"))?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&u32::try_from(name.len()).map_err(|_| too_big("name"))?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, &mut out)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        if take(bytes, &mut pos, 4, "magic")? != b"UDCK" {
            return parse_err(0, "missing UDCK magic");
        }
        let len = read_u32(bytes, &mut pos, "config length")? as usize;
        let cfg_at = pos;
        let config_json = String::from_utf8(take(bytes, &mut pos, len, "config")?.to_vec())
            .or_else(|_| parse_err(cfg_at, "config is not UTF-8"))?;
        let count = read_u32(bytes, &mut pos, "tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let n = read_u32(bytes, &mut pos, "name length")? as usize;
            let at = pos;
            let name = String::from_utf8(take(bytes, &mut pos, n, "name")?.to_vec()).or_else(|_| parse_err(at, "name is not UTF-8"))?;
            let tensor_at = pos;
            match decode_tensor(bytes, &mut pos)? {
                TensorData::F64(t) => tensors.push((name, t)),
                TensorData::U8 { .. } => return parse_err(tensor_at, format!("parameter `{name}` is not f64")),
            }
        }
        if pos != bytes.len() {
            return parse_err(pos, "trailing bytes after checkpoint");
        }
        Ok(Self { config_json, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.encode()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
