//! Binary PPM (P6) and PGM (P5) files.
//!
//! Writers emit the minimal header `P6\n<w> <h>\n<maxval>\n`. Readers accept
//! any whitespace and `#` comments in the header, and report problems with the
//! byte offset where they were found.

use std::fs;
use std::path::Path;

use super::RgbImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    /// 255 stores one byte per sample, anything above two big-endian bytes.
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, maxval: u16, data: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || maxval == 0 {
            return Err(Error::invalid("gray image needs positive size and maxval"));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "expected {} samples, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| v > maxval) {
            return Err(Error::invalid(format!("sample {v} exceeds maxval {maxval}")));
        }
        Ok(Self {
            height,
            width,
            maxval,
            data,
        })
    }
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    body: usize,
}

fn header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::parse(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments before each field
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
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(start, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields[k] = text
            .parse()
            .map_err(|_| Error::parse(start, format!("{name} `{text}` is out of range")))?;
        if fields[k] == 0 {
            return Err(Error::parse(start, format!("{name} must be positive")));
        }
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::parse(pos, "expected one whitespace byte after maxval")),
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        body: pos,
    })
}

fn body<'a>(bytes: &'a [u8], h: &Header, need: usize) -> Result<&'a [u8]> {
    let have = bytes.len() - h.body;
    if have < need {
        return Err(Error::parse(
            bytes.len(),
            format!("raster truncated: need {need} bytes, found {have}"),
        ));
    }
    if have > need {
        return Err(Error::parse(h.body + need, "trailing bytes after raster"));
    }
    Ok(&bytes[h.body..])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = header(bytes, b"P6")?;
    if h.maxval != 255 {
        let at = h.body - 1 - h.maxval.to_string().len();
        return Err(Error::parse(at, format!("maxval {} unsupported, expected 255", h.maxval)));
    }
    let need = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::parse(0, "image dimensions overflow"))?;
    let raster = body(bytes, &h, need)?;
    RgbImage::new(h.height, h.width, raster.to_vec())
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.data());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let h = header(bytes, b"P5")?;
    if h.maxval > 65535 {
        return Err(Error::parse(h.body - 1, format!("maxval {} above 65535", h.maxval)));
    }
    let wide = h.maxval > 255;
    let n = h
        .width
        .checked_mul(h.height)
        .ok_or_else(|| Error::parse(0, "image dimensions overflow"))?;
    let raster = body(bytes, &h, if wide { n * 2 } else { n })?;
    let data: Vec<u16> = if wide {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    if let Some(i) = data.iter().position(|&v| v as usize > h.maxval) {
        let at = h.body + if wide { 2 * i } else { i };
        return Err(Error::parse(at, format!("sample exceeds maxval {}", h.maxval)));
    }
    GrayImage::new(h.height, h.width, h.maxval as u16, data)
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", image.width, image.height, image.maxval).into_bytes();
    if image.maxval > 255 {
        for v in &image.data {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(image.data.iter().map(|&v| v as u8));
    }
    out
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_ppm(image: &RgbImage, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(image: &GrayImage, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}
