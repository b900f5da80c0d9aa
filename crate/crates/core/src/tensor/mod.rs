//! Rank-4 tensors in `(batch, channel, height, width)` layout and a
//! reverse-mode tape over the handful of operators the network needs.
//!
//! Values are stored as `f32`, row-major with width fastest. Reductions
//! accumulate in `f64` and always run in a fixed order, so a forward pass
//! with the same inputs is bit-identical between runs.

pub mod kernels;
mod tape;

use std::fmt;

use crate::error::{Error, Result};

pub use tape::{concat_channels, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

/// Dense rank-4 tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor4 {
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Shape>, value: f32) -> Self {
        let shape = shape.into();
        Tensor4 {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "from_vec",
                format!("{} elements for {shape}", shape.numel()),
                data.len(),
            ));
        }
        Ok(Tensor4 {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4 {
            shape,
            data,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor4 {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(n, c, y, x)]
    }

    pub fn item(&self) -> Result<f32> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape("item", "a single element", self.shape)),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Turns gradient tracking on (allocating a zeroed buffer) or off.
    pub fn set_requires_grad(&mut self, on: bool) {
        match (on, self.grad.is_some()) {
            (true, false) => self.grad = Some(vec![0.0; self.data.len()]),
            (false, true) => self.grad = None,
            _ => {}
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    /// Adds `g` into the gradient buffer; a no-op when the tensor does not
    /// require gradients.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        let Some(buf) = &mut self.grad else {
            return Ok(());
        };
        if g.len() != buf.len() {
            return Err(Error::shape("accumulate_grad", buf.len(), g.len()));
        }
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    /// Value and gradient views together, for optimizer updates.
    pub fn data_and_grad_mut(&mut self) -> (&mut [f32], Option<&[f32]>) {
        (&mut self.data, self.grad.as_deref())
    }

    /// Copy without the gradient buffer.
    pub fn detached(&self) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.clone(),
            grad: None,
        }
    }

    /// Channels `start..start + len` of every batch item.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor4> {
        let s = self.shape;
        if start + len > s.c {
            return Err(Error::shape(
                "narrow_channels",
                format!("channels {start}..{} within {}", start + len, s.c),
                s,
            ));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor4::from_vec(Shape::new(s.n, len, s.h, s.w), data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Inverse of [`kernels::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor4> {
        kernels::pixel_unshuffle(self, r)
    }
}
