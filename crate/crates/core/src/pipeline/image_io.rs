//! Binary Netpbm I/O: P6 colour images and P5 grey maps (8 or 16 bit).

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::eval::{InstanceMap, LabelMap};
use crate::net::Tensor;

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; 3 * width * height],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `1 × 3 × H × W` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = self.data[3 * p + c] as f64 / 255.0;
            }
        }
        Tensor::from_vec([1, 3, self.height, self.width], data).expect("sized")
    }
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::format("netpbm", "truncated header"));
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(b as char);
        if tok.len() > 16 {
            return Err(Error::format("netpbm", "header token too long"));
        }
    }
}

fn header_number<R: BufRead>(r: &mut R, what: &str) -> Result<usize> {
    let tok = header_token(r)?;
    tok.parse()
        .map_err(|_| Error::format("netpbm", format!("bad {what} `{tok}`")))
}

struct Header {
    magic: String,
    width: usize,
    height: usize,
    maxval: usize,
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let magic = header_token(r)?;
    let width = header_number(r, "width")?;
    let height = header_number(r, "height")?;
    let maxval = header_number(r, "maxval")?;
    if width == 0 || height == 0 || width.saturating_mul(height) > 1 << 28 {
        return Err(Error::format("netpbm", format!("bad size {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format("netpbm", format!("bad maxval {maxval}")));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
    })
}

fn read_exact_body<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format("netpbm", "truncated pixel data"))?;
    Ok(buf)
}

pub fn read_ppm<R: BufRead>(mut r: R) -> Result<RgbImage> {
    let h = read_header(&mut r)?;
    if h.magic != "P6" || h.maxval != 255 {
        return Err(Error::format(
            "ppm",
            format!("expected 8-bit P6, got {} maxval {}", h.magic, h.maxval),
        ));
    }
    let data = read_exact_body(&mut r, 3 * h.width * h.height)?;
    Ok(RgbImage {
        width: h.width,
        height: h.height,
        data,
    })
}

pub fn write_ppm<W: Write>(mut w: W, img: &RgbImage) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

/// Reads an 8-bit P5 map.
pub fn read_label_pgm<R: BufRead>(mut r: R) -> Result<LabelMap> {
    let h = read_header(&mut r)?;
    if h.magic != "P5" || h.maxval > 255 {
        return Err(Error::format(
            "pgm",
            format!("expected 8-bit P5, got {} maxval {}", h.magic, h.maxval),
        ));
    }
    let data = read_exact_body(&mut r, h.width * h.height)?;
    LabelMap::new(h.width, h.height, data)
}

pub fn write_label_pgm<W: Write>(mut w: W, map: &LabelMap) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", map.width(), map.height())?;
    w.write_all(map.data())?;
    Ok(())
}

/// Reads a 16-bit (big-endian) P5 instance map; 8-bit maps are accepted too.
pub fn read_instance_pgm<R: BufRead>(mut r: R) -> Result<InstanceMap> {
    let h = read_header(&mut r)?;
    if h.magic != "P5" {
        return Err(Error::format("pgm", format!("expected P5, got {}", h.magic)));
    }
    let n = h.width * h.height;
    let data = if h.maxval > 255 {
        read_exact_body(&mut r, 2 * n)?
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        read_exact_body(&mut r, n)?.into_iter().map(u16::from).collect()
    };
    InstanceMap::new(h.width, h.height, data)
}

pub fn write_instance_pgm<W: Write>(mut w: W, map: &InstanceMap) -> Result<()> {
    write!(w, "P5\n{} {}\n65535\n", map.width(), map.height())?;
    let mut buf = Vec::with_capacity(2 * map.data().len());
    for v in map.data() {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}
