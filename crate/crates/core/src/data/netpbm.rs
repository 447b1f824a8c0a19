//! Binary Netpbm formats: colour images as PPM (`P6`), masks as PGM (`P5`)
//! and probability maps as greyscale PFM (`Pf`).
//!
//! PPM samples are quantized as `floor(255 v + 0.5)`, so a roundtrip moves
//! a value by at most half a step. PFM stores `f32` little-endian (scale
//! `-1.0`) with the bottom row first; big-endian files (positive scale) are
//! also read.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::ensemble::{BinaryMask, ProbabilityMap};
use crate::tensor::Tensor;

/// Largest accepted `width * height`.
pub const MAX_PIXELS: usize = 1 << 28;

#[derive(Debug, Error)]
pub enum NetpbmError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("dimensions {width}x{height} overflow the {MAX_PIXELS}-pixel limit")]
    Overflow { width: u64, height: u64 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid sample: {0}")]
    Value(String),
}

pub type Result<T> = std::result::Result<T, NetpbmError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NetpbmError + '_ {
    move |source| NetpbmError::Io { path: path.display().to_string(), source }
}

fn write_file(path: &Path, header: String, payload: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    f.write_all(header.as_bytes()).map_err(io_err(path))?;
    f.write_all(payload).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

/// Header tokens after the two-byte magic; comments run from `#` to the
/// end of the line.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8], magic: &str) -> Result<Self> {
        if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
            let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
            return Err(NetpbmError::Header(format!("expected magic {magic}, found {found:?}")));
        }
        Ok(Self { bytes, pos: 2 })
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(NetpbmError::Header(format!("missing {what}"))),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| NetpbmError::Header(format!("non-ASCII {what}")))
    }

    fn number(&mut self, what: &str) -> Result<u64> {
        let tok = self.token(what)?;
        if !tok.bytes().all(|b| b.is_ascii_digit()) {
            return Err(NetpbmError::Header(format!("{what} `{tok}` is not a number")));
        }
        tok.parse::<u64>().map_err(|_| NetpbmError::Overflow { width: u64::MAX, height: u64::MAX })
    }

    fn dims(&mut self) -> Result<(usize, usize)> {
        let width = self.number("width")?;
        let height = self.number("height")?;
        if width == 0 || height == 0 {
            return Err(NetpbmError::Header(format!("zero dimension {width}x{height}")));
        }
        match width.checked_mul(height) {
            Some(n) if n <= MAX_PIXELS as u64 => Ok((width as usize, height as usize)),
            _ => Err(NetpbmError::Overflow { width, height }),
        }
    }

    /// Consumes the single whitespace byte that ends the header and
    /// returns the raster.
    fn payload(self, expected: usize) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {}
            _ => return Err(NetpbmError::Header("header not terminated by whitespace".into())),
        }
        let data = &self.bytes[self.pos + 1..];
        if data.len() < expected {
            return Err(NetpbmError::Truncated { expected, found: data.len() });
        }
        Ok(&data[..expected])
    }
}

fn read_maxval(h: &mut Header<'_>, required: Option<u64>) -> Result<()> {
    let maxval = h.number("maxval")?;
    let ok = match required {
        Some(r) => maxval == r,
        None => maxval == 255,
    };
    if !ok {
        return Err(NetpbmError::Header(format!("unsupported maxval {maxval} (only 255)")));
    }
    Ok(())
}

pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes a `[3,H,W]` tensor with values in `[0,1]`.
pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match image.chw() {
        Some((3, h, w)) => (h, w),
        _ => return Err(NetpbmError::Value(format!("PPM needs a [3,H,W] image, got {:?}", image.shape()))),
    };
    let plane = h * w;
    let d = image.data();
    let mut payload = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = d[c * plane + i];
            if !v.is_finite() {
                return Err(NetpbmError::Value(format!("non-finite sample {v}")));
            }
            payload.push(quantize(v));
        }
    }
    write_file(path, format!("P6\n{w} {h}\n255\n"), &payload)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut h = Header::new(&bytes, "P6")?;
    let (width, height) = h.dims()?;
    read_maxval(&mut h, None)?;
    let plane = width * height;
    let raw = h.payload(3 * plane)?;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, height, width], data).expect("consistent dims"))
}

pub fn write_pgm(mask: &BinaryMask, path: &Path) -> Result<()> {
    let payload: Vec<u8> = mask.values().iter().map(|&v| v * 255).collect();
    write_file(path, format!("P5\n{} {}\n255\n", mask.width(), mask.height()), &payload)
}

/// Reads a mask; samples must be 0 or 255.
pub fn read_pgm(path: &Path) -> Result<BinaryMask> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut h = Header::new(&bytes, "P5")?;
    let (width, height) = h.dims()?;
    read_maxval(&mut h, Some(255))?;
    let raw = h.payload(width * height)?;
    let values = raw
        .iter()
        .map(|&b| match b {
            0 => Ok(0),
            255 => Ok(1),
            _ => Err(NetpbmError::Value(format!("mask sample {b} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(BinaryMask::new(width, height, values).expect("consistent dims"))
}

/// Values are narrowed to `f32`.
pub fn write_pfm(map: &ProbabilityMap, path: &Path) -> Result<()> {
    let (w, h) = map.dims();
    let mut payload = Vec::with_capacity(4 * w * h);
    for row in map.values().chunks_exact(w).rev() {
        for &v in row {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_file(path, format!("Pf\n{w} {h}\n-1.0\n"), &payload)
}

pub fn read_pfm(path: &Path) -> Result<ProbabilityMap> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut h = Header::new(&bytes, "Pf")?;
    let (width, height) = h.dims()?;
    let scale_tok = h.token("scale")?;
    let scale: f64 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| NetpbmError::Header(format!("bad scale `{scale_tok}`")))?;
    let little = scale < 0.0;
    let raw = h.payload(4 * width * height)?;
    let mut values = vec![0.0; width * height];
    for (r, row) in raw.chunks_exact(4 * width).enumerate() {
        let y = height - 1 - r;
        for (x, b) in row.chunks_exact(4).enumerate() {
            let b: [u8; 4] = b.try_into().expect("4 bytes");
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            values[y * width + x] = v as f64;
        }
    }
    ProbabilityMap::new(width, height, values).map_err(|e| NetpbmError::Value(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn pfm_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pfm");
        let mut rng = Rng::new(4);
        let values: Vec<f64> = (0..35).map(|_| rng.uniform() as f32 as f64).collect();
        let map = ProbabilityMap::new(7, 5, values).unwrap();
        write_pfm(&map, &path).unwrap();
        assert_eq!(read_pfm(&path).unwrap(), map);

        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"Pf\n7 5\n-1.0\n"));
        // First stored sample is the bottom-left pixel.
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first as f64, map.get(0, 4));
    }

    #[test]
    fn pfm_big_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.25f32.to_be_bytes());
        bytes.extend_from_slice(&0.75f32.to_be_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert_eq!(read_pfm(&path).unwrap().values(), &[0.25, 0.75]);
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = BinaryMask::from_fn(6, 3, |x, y| (x + y) % 3 == 0);
        write_pgm(&mask, &path).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), mask);
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes[bytes.len() - 18..].iter().all(|&b| b == 0 || b == 255));
    }

    #[test]
    fn ppm_roundtrip_within_half_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.ppm");
        let mut rng = Rng::new(9);
        let img = Tensor::new(vec![3, 4, 5], (0..60).map(|_| rng.uniform()).collect()).unwrap();
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-15);
        }
        // Interleaved RGB: the first pixel's three channels come first.
        let bytes = std::fs::read(&path).unwrap();
        let off = b"P6\n5 4\n255\n".len();
        assert_eq!(bytes[off + 1], quantize(img.data()[20]));
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(1.5), 255);
    }

    #[test]
    fn comments_in_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5 # mask\n2 # w\n1\n255\n\x00\xff").unwrap();
        assert_eq!(read_pgm(&path).unwrap().values(), &[0, 1]);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        let cases: [(&[u8], fn(&NetpbmError) -> bool); 6] = [
            (b"P2\n1 1\n255\n\x00", |e| matches!(e, NetpbmError::Header(_))),
            (b"P5\nx 1\n255\n\x00", |e| matches!(e, NetpbmError::Header(_))),
            (b"P5\n1 1\n65535\n\x00\x00", |e| matches!(e, NetpbmError::Header(_))),
            (b"P5\n99999999 99999999\n255\n", |e| matches!(e, NetpbmError::Overflow { .. })),
            (b"P5\n99999999999999999999999 1\n255\n", |e| matches!(e, NetpbmError::Overflow { .. })),
            (b"P5\n3 2\n255\n\x00\x00", |e| matches!(e, NetpbmError::Truncated { expected: 6, found: 2 })),
        ];
        for (bytes, check) in cases {
            std::fs::write(&path, bytes).unwrap();
            let err = read_pgm(&path).unwrap_err();
            assert!(check(&err), "{err}");
        }
        std::fs::write(&path, b"P5\n1 1\n255\n\x07").unwrap();
        assert!(matches!(read_pgm(&path).unwrap_err(), NetpbmError::Value(_)));
        std::fs::write(&path, b"Pf\n1 1\n0\n\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_pfm(&path).unwrap_err(), NetpbmError::Header(_)));
        assert!(matches!(read_ppm(&dir.path().join("missing.ppm")).unwrap_err(), NetpbmError::Io { .. }));
    }
}
