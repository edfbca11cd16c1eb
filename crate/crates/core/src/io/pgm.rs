//! Binary PGM (P5) for masks (maxval 255) and probability fields (maxval
//! 65535, big-endian samples as the PGM format requires).

use std::path::Path;

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::maskops::{BinaryMask, ProbabilityField};

pub const MASK_MAXVAL: u32 = 255;
pub const PROBABILITY_MAXVAL: u32 = 65535;

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn header_bytes(width: usize, height: usize, maxval: u32) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::format(0, "truncated PGM magic"));
    }
    if &bytes[..2] != b"P5" {
        return Err(Error::format(0, "bad magic, expected binary PGM `P5`"));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments before each field
        let ws_start = pos;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if pos == ws_start {
            return Err(Error::format(pos as u64, format!("expected whitespace before {name}")));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if pos == start {
            let what = if pos >= bytes.len() { "truncated header" } else { "expected a decimal number" };
            return Err(Error::format(pos as u64, format!("{what} for {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields[k] = text
            .parse()
            .ok()
            .filter(|&v| v > 0 && v <= u32::MAX as u64)
            .ok_or_else(|| Error::format(start as u64, format!("{name} out of range: {text}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(Error::format(pos as u64, "expected one whitespace byte after maxval")),
        None => return Err(Error::format(pos as u64, "truncated header after maxval")),
    }
    Ok(Header {
        width: fields[0] as usize,
        height: fields[1] as usize,
        maxval: fields[2] as u32,
        data_start: pos,
    })
}

fn raster<'a>(bytes: &'a [u8], h: &Header, bytes_per_sample: usize) -> Result<&'a [u8]> {
    let need = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(bytes_per_sample))
        .ok_or_else(|| Error::format(h.data_start as u64, "image dims overflow"))?;
    let have = bytes.len() - h.data_start;
    if have < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated raster: need {need} bytes, {have} present"),
        ));
    }
    if have > need {
        return Err(Error::format((h.data_start + need) as u64, format!("{} trailing bytes", have - need)));
    }
    Ok(&bytes[h.data_start..])
}

pub fn encode_mask_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = header_bytes(mask.width(), mask.height(), MASK_MAXVAL);
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Samples must be exactly 0 or 255.
pub fn decode_mask_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let h = parse_header(bytes)?;
    if h.maxval != MASK_MAXVAL {
        return Err(Error::format(0, format!("mask maxval must be 255, got {}", h.maxval)));
    }
    let data = raster(bytes, &h, 1)?;
    let mut bits = Vec::with_capacity(data.len());
    for (i, &v) in data.iter().enumerate() {
        match v {
            0 => bits.push(false),
            255 => bits.push(true),
            _ => {
                return Err(Error::format(
                    (h.data_start + i) as u64,
                    format!("mask sample {v} is neither 0 nor 255"),
                ))
            }
        }
    }
    BinaryMask::new(h.width, h.height, bits)
}

/// Probabilities quantized to `round(p * 65535)`.
pub fn encode_probability_pgm(field: &ProbabilityField) -> Vec<u8> {
    let c = field.canvas();
    let mut out = header_bytes(c.width, c.height, PROBABILITY_MAXVAL);
    for &p in field.values() {
        let q = (p * PROBABILITY_MAXVAL as f64).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn decode_probability_pgm(bytes: &[u8]) -> Result<ProbabilityField> {
    let h = parse_header(bytes)?;
    if h.maxval != PROBABILITY_MAXVAL {
        return Err(Error::format(0, format!("probability maxval must be 65535, got {}", h.maxval)));
    }
    let data = raster(bytes, &h, 2)?;
    let values = data
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / PROBABILITY_MAXVAL as f64)
        .collect();
    ProbabilityField::new(h.width, h.height, values)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    decode_mask_pgm(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_mask_pgm(mask))
}

pub fn read_probability(path: impl AsRef<Path>) -> Result<ProbabilityField> {
    let path = path.as_ref();
    decode_probability_pgm(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_probability(field: &ProbabilityField, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_probability_pgm(field))
}
