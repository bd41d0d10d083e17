//! Rank-4 tensors in (N, C, H, W) row-major layout, plus the integer label
//! maps that ride along with them through losses and metrics.

mod kernels;
mod tape;

pub use tape::{Mode, Tape, Val};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Shape of a rank-4 tensor: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// True when this shape is (N, C, 1, 1) and matches `other` in N and C.
    pub fn broadcasts_over(&self, other: &Shape) -> bool {
        self.h == 1 && self.w == 1 && self.n == other.n && self.c == other.c
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor of f64 values. Data is shared behind an `Arc` so that
/// recording a tensor on a tape or cloning it into a checkpoint is cheap.
#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.numel(),
            "tensor data length {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor { shape, data: Arc::new(vec![value; shape.numel()]) }
    }

    /// Scalar tensor of shape (1,1,1,1).
    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![value])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; clones the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "scalar_value on tensor of shape {}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Elementwise addition into self (shapes must match exactly).
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> Tensor {
        let s = self.shape;
        let mut out = vec![0.0; s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        out[s.index(n, c, h, w)] = self.at(n, c, h, s.w - 1 - w);
                    }
                }
            }
        }
        Tensor::from_vec(s, out)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{}", self.shape)
    }
}

/// Bilinear resize outside the tape (augmentation, test-time rescaling).
/// Same align-corners-false convention as the differentiable operator.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    kernels::bilinear_forward(x, out_h, out_w)
}

/// Channel-wise softmax, used to turn logits into probabilities at
/// evaluation time.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let s = x.shape();
    let plane = s.h * s.w;
    let mut out = vec![0.0; s.numel()];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for c in 0..s.c {
                max = max.max(x.data()[base + c * plane + p]);
            }
            let mut denom = 0.0;
            for c in 0..s.c {
                let e = (x.data()[base + c * plane + p] - max).exp();
                out[base + c * plane + p] = e;
                denom += e;
            }
            for c in 0..s.c {
                out[base + c * plane + p] /= denom;
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// Channel argmax: (N,K,H,W) scores to a (N,H,W) class map.
pub fn argmax_channels(x: &Tensor) -> LabelMap {
    let s = x.shape();
    let plane = s.h * s.w;
    let mut out = vec![0u8; s.n * plane];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = x.data()[base + p];
            for c in 1..s.c {
                let v = x.data()[base + c * plane + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[n * plane + p] = best as u8;
        }
    }
    LabelMap::from_vec(s.n, s.h, s.w, out)
}

/// Integer class-id map of shape (N, H, W). Values are class ids below the
/// class count, or the ignore value (conventionally 255).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn from_vec(n: usize, h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), n * h * w, "label data length mismatch");
        LabelMap { n, h, w, data }
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        LabelMap { n, h, w, data: vec![value; n * h * w] }
    }

    #[inline]
    pub fn index(&self, n: usize, h: usize, w: usize) -> usize {
        (n * self.h + h) * self.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, h: usize, w: usize) -> u8 {
        self.data[self.index(n, h, w)]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Nearest-neighbor resize; labels must never be interpolated.
    pub fn nearest_resized(&self, out_h: usize, out_w: usize) -> LabelMap {
        let mut out = vec![0u8; self.n * out_h * out_w];
        for n in 0..self.n {
            for oy in 0..out_h {
                let sy = (((oy as f64 + 0.5) * self.h as f64 / out_h as f64) as usize).min(self.h - 1);
                for ox in 0..out_w {
                    let sx = (((ox as f64 + 0.5) * self.w as f64 / out_w as f64) as usize).min(self.w - 1);
                    out[(n * out_h + oy) * out_w + ox] = self.at(n, sy, sx);
                }
            }
        }
        LabelMap::from_vec(self.n, out_h, out_w, out)
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> LabelMap {
        let mut out = vec![0u8; self.data.len()];
        for n in 0..self.n {
            for h in 0..self.h {
                for w in 0..self.w {
                    out[self.index(n, h, w)] = self.at(n, h, self.w - 1 - w);
                }
            }
        }
        LabelMap::from_vec(self.n, self.h, self.w, out)
    }

    /// Validates that every value is `< num_classes` or equal to `ignore`.
    pub fn check_range(&self, num_classes: usize, ignore: u8, op: &'static str) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if v != ignore && (v as usize) >= num_classes {
                return Err(Error::invalid(
                    op,
                    format!("label {v} at flat index {i} is outside [0,{num_classes}) and is not the ignore value {ignore}"),
                ));
            }
        }
        Ok(())
    }
}
