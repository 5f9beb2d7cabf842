//! Binary PPM (P6) / PGM (P5) files and raw `f64` grid dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level, as a PPM roundtrip would.
pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| to_byte(v) as f64 / 255.0)
}

/// Encodes a `3 × H × W` image with values in `[0, 1]`.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::Invalid(format!("PPM needs a 3 x H x W image, got {:?}", img.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(d[c * h * w + p]));
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = encode_ppm(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, values: &[u8], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape("pgm", &[values.len()], &[height, width]));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    if bytes.len() < 2 {
        return Err("file too short".into());
    }
    let magic = [bytes[0], bytes[1]];
    pos += 2;
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header".into());
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?;
        fields.push(text.parse::<usize>().map_err(|e| e.to_string())?);
    }
    if fields[2] != 255 {
        return Err(format!("unsupported maxval {}", fields[2]));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        data_start: pos,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a P6 file into a `3 × H × W` tensor scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let h = parse_header(&bytes).map_err(|r| format_err(path, r))?;
    if &h.magic != b"P6" {
        return Err(format_err(path, "not a binary PPM (P6)"));
    }
    let n = h.width * h.height;
    let raster = bytes
        .get(h.data_start..h.data_start + 3 * n)
        .ok_or_else(|| format_err(path, "truncated raster"))?;
    let mut data = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            data[c * n + p] = raster[3 * p + c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h.height, h.width], data)
}

/// Reads a P5 file, returning `(values, width, height)`.
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = read(path)?;
    let h = parse_header(&bytes).map_err(|r| format_err(path, r))?;
    if &h.magic != b"P5" {
        return Err(format_err(path, "not a binary PGM (P5)"));
    }
    let n = h.width * h.height;
    let raster = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| format_err(path, "truncated raster"))?;
    Ok((raster.to_vec(), h.width, h.height))
}

const RAW_MAGIC: &str = "EAF64";

/// Writes a tensor as an ASCII header line (`EAF64 <dims...>`) followed by
/// little-endian `f64` values.
pub fn write_raw(path: &Path, t: &Tensor) -> Result<()> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let mut out = format!("{RAW_MAGIC} {}\n", dims.join(" ")).into_bytes();
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err(path, "missing header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| format_err(path, e.to_string()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(RAW_MAGIC) {
        return Err(format_err(path, "bad magic"));
    }
    let shape = parts
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format_err(path, e.to_string()))?;
    let body = &bytes[nl + 1..];
    let n: usize = shape.iter().product();
    if body.len() != 8 * n {
        return Err(format_err(path, format!("expected {n} values, found {} bytes", body.len())));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let img = Tensor::new(&[3, 2, 3], (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back, quantize(&img));
        assert!(read_pgm(&p).is_err());
    }

    #[test]
    fn pgm_and_raw_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.pgm");
        write_pgm(&p, &[0, 1, 2, 3, 250, 9], 3, 2).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (vec![0, 1, 2, 3, 250, 9], 3, 2));
        let r = dir.path().join("g.f64");
        let t = Tensor::new(&[2, 1, 2], vec![0.1, -2.0, 1e-300, 7.0]).unwrap();
        write_raw(&r, &t).unwrap();
        assert_eq!(read_raw(&r).unwrap(), t);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        fs::write(&p, b"P5\n# made by hand\n2 1\n255\n\x07\x08").unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (vec![7, 8], 2, 1));
    }
}
