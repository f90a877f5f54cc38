//! Image ingestion: binary PPM and a raw float-tensor container.

use std::path::Path;

use crate::arch::Resolution;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 8-bit RGB image in height/width/channel order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn pixel(&self, i: usize, j: usize) -> [u8; 3] {
        let o = (i * self.width + j) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

/// Maps `v ↦ (v − 127.5) / 128` into a `1×3×H×W` tensor.
pub fn preprocess<T: Scalar>(img: &RawImage, expected: Resolution) -> Result<Tensor<T>> {
    preprocess_batch(&[img], expected)
}

pub fn preprocess_batch<T: Scalar>(imgs: &[&RawImage], expected: Resolution) -> Result<Tensor<T>> {
    if imgs.is_empty() {
        return Err(Error::InvalidArgument("empty image batch".into()));
    }
    let (h, w) = (expected.height, expected.width);
    let plane = h * w;
    let mut data = vec![T::zero(); imgs.len() * 3 * plane];
    let lut: Vec<T> = (0..=255u8).map(|v| T::of((v as f64 - 127.5) / 128.0)).collect();
    for (n, img) in imgs.iter().enumerate() {
        if (img.height, img.width) != (h, w) {
            return Err(shape_err(
                "preprocess",
                format!("image is {}x{}, model expects {h}x{w}", img.height, img.width),
            ));
        }
        let out = &mut data[n * 3 * plane..][..3 * plane];
        for (p, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = lut[px[c] as usize];
            }
        }
    }
    Tensor::from_vec(&[imgs.len(), 3, h, w], data)
}

/// Encodes a binary (P6) PPM with maxval 255.
pub fn encode_ppm(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn parse_ppm(bytes: &[u8]) -> Result<RawImage> {
    let bad = |m: &str| Error::Format(format!("ppm: {m}"));
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad("missing P6 signature"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Truncated("ppm header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("expected a number in the header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("header must end with whitespace"));
    }
    pos += 1;
    let need = width * height * 3;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(Error::Truncated(format!("ppm pixel data: {} of {need} bytes", body.len())));
    }
    RawImage::new(height, width, body[..need].to_vec())
}

pub fn read_ppm(path: &Path) -> Result<RawImage> {
    parse_ppm(&std::fs::read(path)?)
}

pub fn write_ppm(path: &Path, img: &RawImage) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(img))?)
}

const TENSOR_MAGIC: &[u8; 4] = b"MFT1";

/// Raw tensor container: magic `MFT1`, u8 rank, u32 dims, little-endian f32 data.
pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = TENSOR_MAGIC.to_vec();
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 5 {
        return Err(Error::Truncated("tensor header".into()));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic {
            expected: *TENSOR_MAGIC,
            found,
        });
    }
    let rank = bytes[4] as usize;
    let mut pos = 5;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes.get(pos..pos + 4).ok_or_else(|| Error::Truncated("tensor dims".into()))?;
        shape.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let body = &bytes[pos..];
    if body.len() != n * 4 {
        return Err(Error::Truncated(format!("tensor data: {} of {} bytes", body.len(), n * 4)));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data)
}

/// An input file: either an image to preprocess or an already preprocessed tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Image(RawImage),
    Tensor(Tensor<f32>),
}

impl Input {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(TENSOR_MAGIC) {
            Ok(Input::Tensor(parse_tensor(&bytes)?))
        } else {
            Ok(Input::Image(parse_ppm(&bytes)?))
        }
    }

    /// Model-ready `1×3×H×W` tensor.
    pub fn to_tensor(&self, expected: Resolution) -> Result<Tensor<f32>> {
        match self {
            Input::Image(img) => preprocess(img, expected),
            Input::Tensor(t) => {
                let want = [3, expected.height, expected.width];
                match t.shape() {
                    s if s == want => t.clone().reshape(&[1, 3, expected.height, expected.width]),
                    [1, rest @ ..] if rest == want => Ok(t.clone()),
                    s => Err(shape_err(
                        "preprocess",
                        format!("tensor input {s:?} does not match model input 1×3×{}×{}", want[1], want[2]),
                    )),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_values() {
        let mut img = RawImage::filled(2, 2, 128);
        img.data[0] = 0;
        img.data[1] = 255;
        let t: Tensor<f64> = preprocess(&img, Resolution::new(2, 2)).unwrap();
        assert_eq!(t.get(&[0, 0, 0, 0]), -0.99609375);
        assert_eq!(t.get(&[0, 1, 0, 0]), 0.99609375);
        assert_eq!(t.get(&[0, 2, 0, 0]), 0.00390625);
        assert_eq!(t.get(&[0, 0, 1, 1]), 0.00390625);
    }

    #[test]
    fn wrong_resolution_rejected() {
        let img = RawImage::filled(4, 4, 0);
        assert!(matches!(
            preprocess::<f32>(&img, Resolution::new(4, 5)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn ppm_round_trip() {
        let img = RawImage::new(2, 3, (0..18).collect()).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(parse_ppm(&bytes).unwrap(), img);
        let commented = b"P6\n# note\n3 2\n255\n".iter().chain(&img.data).copied().collect::<Vec<_>>();
        assert_eq!(parse_ppm(&commented).unwrap(), img);
        assert!(matches!(parse_ppm(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        assert!(parse_ppm(b"P3\n1 1\n255\n000").is_err());
    }

    #[test]
    fn tensor_container_round_trip() {
        let t = Tensor::from_vec(&[3, 1, 2], vec![0.5, -1.0, 2.0, 3.5, 0.0, -0.25]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(parse_tensor(&bytes).unwrap(), t);
        let input = Input::Tensor(t);
        assert_eq!(input.to_tensor(Resolution::new(1, 2)).unwrap().shape(), &[1, 3, 1, 2]);
        assert!(input.to_tensor(Resolution::new(2, 1)).is_err());
    }
}
