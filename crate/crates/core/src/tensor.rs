use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Dense channel-major `(c, h, w)` array of `f64`.
///
/// Diffusion runs directly in pixel space, so this doubles as the latent
/// representation: a clean latent is an image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub type LatentArray = Tensor3;

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(invalid!(
                "tensor data has {} elements, shape ({channels}, {height}, {width}) needs {}",
                data.len(),
                channels * height * width
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_same_shape(&self, other: &Tensor3, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(invalid!(
                "{what}: shape {:?} does not match {:?}",
                other.shape(),
                self.shape()
            ));
        }
        Ok(())
    }

    /// `a * x + b * y`, elementwise.
    pub fn lincomb(a: f64, x: &Tensor3, b: f64, y: &Tensor3) -> Result<Tensor3> {
        x.ensure_same_shape(y, "linear combination")?;
        let data = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(&u, &v)| a * u + b * v)
            .collect();
        Ok(Tensor3 {
            channels: x.channels,
            height: x.height,
            width: x.width,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor3 {
        self.map(|v| v * s)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor3 {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> Tensor3 {
        let w = self.width;
        Tensor3::from_fn(self.channels, self.height, w, |c, y, x| {
            self.get(c, y, w - 1 - x)
        })
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor3]) -> Result<Tensor3> {
        let first = parts
            .first()
            .ok_or_else(|| invalid!("concat of zero tensors"))?;
        let (h, w) = (first.height, first.width);
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.height != h || p.width != w {
                return Err(invalid!(
                    "concat: spatial shape ({}, {}) does not match ({h}, {w})",
                    p.height,
                    p.width
                ));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor3 {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    /// Split off channel ranges; inverse of [`Tensor3::concat_channels`].
    pub fn split_channels(&self, counts: &[usize]) -> Vec<Tensor3> {
        let plane = self.plane_len();
        let mut out = Vec::with_capacity(counts.len());
        let mut start = 0;
        for &c in counts {
            out.push(Tensor3 {
                channels: c,
                height: self.height,
                width: self.width,
                data: self.data[start * plane..(start + c) * plane].to_vec(),
            });
            start += c;
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
