//! 8-bit RGB images and their conversion to `[-1, 1]` tensors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimension { what: "rgb buffer", expected: width * height * 3, got: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = vec![0; width * height * 3];
        for px in data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Stacks same-sized images into `[B, 3, H, W]` with values in `[-1, 1]`.
pub fn images_to_tensor<T: Scalar>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Ok(Tensor::zeros(&[0, 3, 0, 0]));
    };
    let (h, w) = (first.height, first.width);
    let plane = h * w;
    let mut out = vec![T::zero(); images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        if img.height != h || img.width != w {
            return Err(Error::Shape { expected: vec![h, w], got: vec![img.height, img.width] });
        }
        for (p, px) in img.data.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                out[(b * 3 + ch) * plane + p] = T::of(px[ch] as f64 / 127.5 - 1.0);
            }
        }
    }
    Ok(Tensor::from_vec(&[images.len(), 3, h, w], out))
}

/// Sample `b` of a `[B, 3, H, W]` tensor back to 8-bit, clamping to range.
pub fn tensor_to_image<T: Scalar>(t: &Tensor<T>, b: usize) -> RgbImage {
    let s = t.shape();
    assert!(s.len() == 4 && s[1] == 3, "expected [B, 3, H, W], got {s:?}");
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let mut data = vec![0u8; plane * 3];
    for p in 0..plane {
        for ch in 0..3 {
            let v = t.data()[(b * 3 + ch) * plane + p].as_f64();
            data[p * 3 + ch] = libm::round(((v + 1.0) * 127.5).clamp(0.0, 255.0)) as u8;
        }
    }
    RgbImage { width: w, height: h, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let data: Vec<u8> = (0..48).map(|i| (i * 37 % 256) as u8).collect();
        let img = RgbImage::new(4, 4, data).unwrap();
        let t = images_to_tensor::<f32>(&[&img, &img]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 4, 4]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(tensor_to_image(&t, 1), img);
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let a = RgbImage::filled(2, 2, [0; 3]);
        let b = RgbImage::filled(3, 2, [0; 3]);
        assert!(images_to_tensor::<f64>(&[&a, &b]).is_err());
        assert!(RgbImage::new(2, 2, vec![0; 5]).is_err());
    }
}
