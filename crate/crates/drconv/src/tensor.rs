//! Dense rank-4 tensors in `[batch][height][width][channel]` order.
//!
//! Everything in this crate flows through [`Tensor4`]: activations, guide
//! features, gradients. The layout is row-major with the channel axis
//! innermost, so a dot product across channels at a fixed pixel touches
//! contiguous memory — that is the hot loop of every convolution here.
//! Values are always `f64`; there is no broadcasting anywhere. Two tensors
//! combine only if their shapes are identical, and anything batch-shaped is
//! materialized per sample explicitly.

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape4 {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape4 {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Shape4 {
        Shape4 { n, h, w, c }
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat offset of `[n][h][w][c]`. Debug-checked; hot paths compute
    /// offsets incrementally instead of calling this per element.
    #[inline]
    pub fn at(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        debug_assert!(
            n < self.n && h < self.h && w < self.w && c < self.c,
            "index [{},{},{},{}] out of bounds for {:?}",
            n,
            h,
            w,
            c,
            self
        );
        ((n * self.h + h) * self.w + w) * self.c + c
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{},{},{}]", self.n, self.h, self.w, self.c)
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    /// All-zero tensor. Every dimension must be at least 1.
    pub fn zeros(shape: Shape4) -> Result<Tensor4> {
        if shape.n == 0 || shape.h == 0 || shape.w == 0 || shape.c == 0 {
            return Err(Error::Size(format!(
                "tensor dimensions must all be >= 1, got {shape}"
            )));
        }
        Ok(Tensor4 {
            shape,
            data: vec![0.0; shape.len()],
        })
    }

    /// Tensor with every element set to `value`.
    pub fn filled(shape: Shape4, value: f64) -> Result<Tensor4> {
        let mut t = Tensor4::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    /// Wrap an existing buffer; `data.len()` must equal `shape.len()`.
    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Tensor4> {
        if shape.n == 0 || shape.h == 0 || shape.w == 0 || shape.c == 0 {
            return Err(Error::Size(format!(
                "tensor dimensions must all be >= 1, got {shape}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "buffer of {} elements cannot back a {shape} tensor ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Build by evaluating `f(n, h, w, c)` at every position.
    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Tensor4> {
        let mut t = Tensor4::zeros(shape)?;
        let mut i = 0;
        for n in 0..shape.n {
            for h in 0..shape.h {
                for w in 0..shape.w {
                    for c in 0..shape.c {
                        t.data[i] = f(n, h, w, c);
                        i += 1;
                    }
                }
            }
        }
        Ok(t)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, n: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.shape.at(n, h, w, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, h: usize, w: usize, c: usize, value: f64) {
        let i = self.shape.at(n, h, w, c);
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn zip(&self, rhs: &Tensor4, op: impl Fn(f64, f64) -> f64, what: &str) -> Result<Tensor4> {
        if self.shape != rhs.shape {
            return Err(Error::Shape(format!(
                "{what}: {} vs {}",
                self.shape, rhs.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| op(a, b))
            .collect();
        Ok(Tensor4 {
            shape: self.shape,
            data,
        })
    }

    pub fn add(&self, rhs: &Tensor4) -> Result<Tensor4> {
        self.zip(rhs, |a, b| a + b, "add")
    }

    pub fn sub(&self, rhs: &Tensor4) -> Result<Tensor4> {
        self.zip(rhs, |a, b| a - b, "sub")
    }

    /// Hadamard (element-by-element) product.
    pub fn mul(&self, rhs: &Tensor4) -> Result<Tensor4> {
        self.zip(rhs, |a, b| a * b, "mul")
    }

    pub fn scale(&self, s: f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// Logistic function, evaluated branch-wise so neither branch ever
    /// exponentiates a positive argument. Output is strictly inside (0,1)
    /// for |x| <= 700; beyond that the saturated end rounds to 0 or 1.
    pub fn sigmoid(&self) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| sigmoid(v)).collect(),
        }
    }

    /// max(x, 0). Not part of the core contract; the training stack needs a
    /// cheap nonlinearity between blocks.
    pub fn relu(&self) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Index of the largest channel at every `[n][h][w]` position, row-major
    /// over (n, h, w). Ties resolve to the smallest channel index, always —
    /// this is what makes region assignment reproducible.
    pub fn argmax_c(&self) -> Vec<usize> {
        let Shape4 { n, h, w, c } = self.shape;
        let mut out = Vec::with_capacity(n * h * w);
        for base in (0..n * h * w).map(|p| p * c) {
            let px = &self.data[base..base + c];
            let mut best = 0;
            for (j, &v) in px.iter().enumerate().skip(1) {
                if v > px[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        out
    }

    /// Zero-pad by `ph` rows on top and bottom and `pw` columns on each side.
    pub fn pad_zero(&self, ph: usize, pw: usize) -> Tensor4 {
        let Shape4 { n, h, w, c } = self.shape;
        let shape = Shape4::new(n, h + 2 * ph, w + 2 * pw, c);
        let mut out = Tensor4 {
            shape,
            data: vec![0.0; shape.len()],
        };
        for ni in 0..n {
            for hi in 0..h {
                let src = self.shape.at(ni, hi, 0, 0);
                let dst = shape.at(ni, hi + ph, pw, 0);
                out.data[dst..dst + w * c].copy_from_slice(&self.data[src..src + w * c]);
            }
        }
        out
    }

    /// Translate by `(dy, dx)` with wrap-around:
    /// `out[n][u][v][c] = in[n][(u - dy) mod h][(v - dx) mod w][c]`.
    /// Shifting by `(dy, dx)` and then `(-dy, -dx)` is the identity, exactly.
    pub fn circular_shift(&self, dy: isize, dx: isize) -> Tensor4 {
        let Shape4 { n, h, w, c } = self.shape;
        let mut out = Tensor4 {
            shape: self.shape,
            data: vec![0.0; self.data.len()],
        };
        for ni in 0..n {
            for u in 0..h {
                let su = (u as isize - dy).rem_euclid(h as isize) as usize;
                for v in 0..w {
                    let sv = (v as isize - dx).rem_euclid(w as isize) as usize;
                    let src = self.shape.at(ni, su, sv, 0);
                    let dst = self.shape.at(ni, u, v, 0);
                    out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
                }
            }
        }
        out
    }

    /// Squared L2 norm of the whole tensor.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
