//! Forward and backward kernels on raw tensors. The tape in
//! [`super::Tape`] wires these together; they are public so that inference
//! code can call them without recording anything.

use matrixmultiply::sgemm;

use super::{Shape, Tensor4};
use crate::error::{Error, Result};

/// Upper bound on scratch buffer sizes, in floats.
const SCRATCH_BUDGET: usize = 1 << 22;

fn check_conv(x: Shape, weight: Shape, bias: Shape) -> Result<usize> {
    let k = weight.h;
    if weight.w != k || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d: kernel must be square with odd size, got {}x{}",
            weight.h, weight.w
        )));
    }
    if x.c != weight.c {
        return Err(Error::ChannelMismatch {
            op: "conv2d",
            expected: weight.c,
            actual: x.c,
        });
    }
    if bias.numel() != weight.n {
        return Err(Error::shape("conv2d bias", weight.n, bias.numel()));
    }
    Ok(k)
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover every (row, col)
    // addressed through the given strides.
    unsafe {
        sgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc,
        );
    }
}

/// Rows `y0..y1` of image `n`.
#[derive(Clone, Copy, Debug)]
struct Segment {
    n: usize,
    y0: usize,
    y1: usize,
}

/// Groups image rows into column blocks of at most `SCRATCH_BUDGET / rows`
/// columns (never less than one image row), spanning images when they are
/// small.
fn plan_chunks(n: usize, h: usize, w: usize, col_rows: usize) -> Vec<Vec<Segment>> {
    let max_rows = (SCRATCH_BUDGET / col_rows.max(1) / w.max(1)).max(1);
    let mut chunks = Vec::new();
    let mut cur: Vec<Segment> = Vec::new();
    let mut used = 0;
    for img in 0..n {
        let mut y = 0;
        while y < h {
            if used == max_rows {
                chunks.push(std::mem::take(&mut cur));
                used = 0;
            }
            let take = (max_rows - used).min(h - y);
            cur.push(Segment { n: img, y0: y, y1: y + take });
            used += take;
            y += take;
        }
    }
    if !cur.is_empty() {
        chunks.push(cur);
    }
    chunks
}

/// Unrolls rows `y0..y1` of one image (`cin` planes of `h x w`) into the
/// columns starting at `off` of a `(cin*k*k) x ld` matrix, with zero
/// padding `(k-1)/2`.
#[allow(clippy::too_many_arguments)]
fn im2col(src: &[f32], cin: usize, h: usize, w: usize, k: usize, seg: Segment, col: &mut [f32], ld: usize, off: usize) {
    let pad = k / 2;
    for ci in 0..cin {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * ld + off..row * ld + off + (seg.y1 - seg.y0) * w];
                // Output x reads input x + kx - pad; valid for x in lo..hi.
                let lo = pad.saturating_sub(kx).min(w);
                let hi = (w + pad).saturating_sub(kx).min(w).max(lo);
                for y in seg.y0..seg.y1 {
                    let out = &mut dst[(y - seg.y0) * w..(y - seg.y0 + 1) * w];
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        out.fill(0.0);
                        continue;
                    }
                    let line = &plane[(sy - pad) * w..(sy - pad + 1) * w];
                    out[..lo].fill(0.0);
                    if lo < hi {
                        out[lo..hi].copy_from_slice(&line[lo + kx - pad..hi + kx - pad]);
                    }
                    out[hi..].fill(0.0);
                }
            }
        }
    }
}

fn seg_cols(chunk: &[Segment], w: usize) -> usize {
    chunk.iter().map(|s| (s.y1 - s.y0) * w).sum()
}

/// A group of row segments copied, zero-padded by `p` on every side, into
/// one buffer of `cin` planes with `stride` floats each.
///
/// Output pixel `(y, x)` of a segment sits at grid position
/// `base + y * wp + x`; tap `(ky, kx)` of its receptive field is the padded
/// value at that position plus `ky * wp + kx`. Grid positions with
/// `x >= w` or inside the halo rows are discarded.
struct Padded {
    segs: Vec<(Segment, usize)>,
    wp: usize,
    /// Grid positions computed per channel.
    len: usize,
    stride: usize,
}

impl Padded {
    fn plan(n: usize, h: usize, w: usize, cin: usize, k: usize) -> Vec<Padded> {
        let p = k / 2;
        let wp = w + 2 * p;
        let max_rows = (SCRATCH_BUDGET / (cin.max(1) * wp)).max(1 + 2 * p);
        let mut out = Vec::new();
        let mut cur: Vec<(Segment, usize)> = Vec::new();
        let mut used = 0;
        let finish = |segs: Vec<(Segment, usize)>, used: usize, out: &mut Vec<Padded>| {
            let len = used * wp;
            out.push(Padded {
                segs,
                wp,
                len,
                stride: len + (k - 1) * (wp + 1),
            });
        };
        for img in 0..n {
            let mut y = 0;
            while y < h {
                if used + 2 * p >= max_rows {
                    finish(std::mem::take(&mut cur), used, &mut out);
                    used = 0;
                }
                let take = (max_rows - used - 2 * p).min(h - y);
                cur.push((Segment { n: img, y0: y, y1: y + take }, used * wp));
                used += take + 2 * p;
                y += take;
            }
        }
        if !cur.is_empty() {
            finish(cur, used, &mut out);
        }
        out
    }

    /// Copies the segments of `src` (`n x c x h x w`) into `buf`.
    fn fill(&self, src: &[f32], c: usize, h: usize, w: usize, p: usize, buf: &mut Vec<f32>) {
        buf.clear();
        buf.resize(c * self.stride, 0.0);
        let plane = h * w;
        for &(seg, base) in &self.segs {
            let ylo = seg.y0.saturating_sub(p);
            let yhi = (seg.y1 + p).min(h);
            for ci in 0..c {
                let img = &src[(seg.n * c + ci) * plane..(seg.n * c + ci + 1) * plane];
                let dst = &mut buf[ci * self.stride + base..];
                for y in ylo..yhi {
                    let row = y + p - seg.y0;
                    dst[row * self.wp + p..row * self.wp + p + w].copy_from_slice(&img[y * w..(y + 1) * w]);
                }
            }
        }
    }
}

/// Zero-padded stride-1 convolution of `x` (`xs`) by a `(cout, cin, k, k)`
/// kernel; `bias` may be empty.
fn conv_forward(x: &[f32], xs: Shape, wd: &[f32], cout: usize, k: usize, bias: &[f32]) -> Vec<f32> {
    let (cin, h, w) = (xs.c, xs.h, xs.w);
    let plane = h * w;
    let mut out = vec![0.0f32; xs.n * cout * plane];
    if !bias.is_empty() {
        for n in 0..xs.n {
            for (o, &b) in bias.iter().enumerate() {
                out[(n * cout + o) * plane..(n * cout + o + 1) * plane].fill(b);
            }
        }
    }
    if k == 1 {
        for n in 0..xs.n {
            let src = &x[n * cin * plane..(n + 1) * cin * plane];
            let dst = &mut out[n * cout * plane..(n + 1) * cout * plane];
            gemm(cout, cin, plane, wd, (cin as isize, 1), src, (plane as isize, 1), 1.0, dst, (plane as isize, 1));
        }
        return out;
    }
    // Per-tap products on a padded copy update the output once per tap;
    // unrolled columns copy the input once per tap. Pick the smaller side.
    if cout <= cin {
        shift_conv(x, xs, wd, cout, k, &mut out);
    } else {
        im2col_conv(x, xs, wd, cout, k, &mut out);
    }
    out
}

fn shift_conv(x: &[f32], xs: Shape, wd: &[f32], cout: usize, k: usize, out: &mut [f32]) {
    let (cin, h, w) = (xs.c, xs.h, xs.w);
    let plane = h * w;
    let kk = k * k;
    let p = k / 2;
    let mut buf = Vec::new();
    let mut res = Vec::new();
    for block in Padded::plan(xs.n, h, w, cin, k) {
        block.fill(x, cin, h, w, p, &mut buf);
        res.clear();
        res.resize(cout * block.len, 0.0);
        for ky in 0..k {
            for kx in 0..k {
                let tap = ky * k + kx;
                let shift = ky * block.wp + kx;
                gemm(
                    cout,
                    cin,
                    block.len,
                    &wd[tap..],
                    ((cin * kk) as isize, kk as isize),
                    &buf[shift..],
                    (block.stride as isize, 1),
                    1.0,
                    &mut res,
                    (block.len as isize, 1),
                );
            }
        }
        for &(seg, base) in &block.segs {
            for o in 0..cout {
                for y in seg.y0..seg.y1 {
                    let src = &res[o * block.len + base + (y - seg.y0) * block.wp..][..w];
                    let dst = &mut out[(seg.n * cout + o) * plane + y * w..][..w];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}

fn im2col_conv(x: &[f32], xs: Shape, wd: &[f32], cout: usize, k: usize, out: &mut [f32]) {
    let (cin, h, w) = (xs.c, xs.h, xs.w);
    let plane = h * w;
    let ckk = cin * k * k;
    let chunks = plan_chunks(xs.n, h, w, ckk);
    let max_cols = chunks.iter().map(|c| seg_cols(c, w)).max().unwrap_or(0);
    let mut col = vec![0.0f32; ckk * max_cols];
    let mut res = vec![0.0f32; cout * max_cols];
    for chunk in &chunks {
        let cols = seg_cols(chunk, w);
        let mut off = 0;
        for &seg in chunk {
            im2col(&x[seg.n * cin * plane..], cin, h, w, k, seg, &mut col, cols, off);
            off += (seg.y1 - seg.y0) * w;
        }
        gemm(cout, ckk, cols, wd, (ckk as isize, 1), &col, (cols as isize, 1), 0.0, &mut res, (cols as isize, 1));
        let mut off = 0;
        for &seg in chunk {
            let len = (seg.y1 - seg.y0) * w;
            for o in 0..cout {
                let base = (seg.n * cout + o) * plane + seg.y0 * w;
                let dst = &mut out[base..base + len];
                let src = &res[o * cols + off..o * cols + off + len];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            off += len;
        }
    }
}

/// Zero-padded stride-1 convolution. `weight` is `(C_out, C_in, k, k)`,
/// `bias` holds `C_out` values in any rank-4 arrangement.
pub fn conv2d(x: &Tensor4, weight: &Tensor4, bias: &Tensor4) -> Result<Tensor4> {
    let xs = x.shape();
    let k = check_conv(xs, weight.shape(), bias.shape())?;
    let cout = weight.shape().n;
    let data = conv_forward(x.data(), xs, weight.data(), cout, k, bias.data());
    Tensor4::from_vec(Shape::new(xs.n, cout, xs.h, xs.w), data)
}

/// `(C_in, C_out, k, k)` kernel whose convolution is the adjoint of the
/// convolution by `weight`.
fn adjoint_kernel(weight: &Tensor4) -> Vec<f32> {
    let s = weight.shape();
    let (cout, cin, k) = (s.n, s.c, s.h);
    let wd = weight.data();
    let mut out = vec![0.0f32; wd.len()];
    for o in 0..cout {
        for i in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    out[((i * cout + o) * k + (k - 1 - ky)) * k + (k - 1 - kx)] = wd[((o * cin + i) * k + ky) * k + kx];
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, weight and bias. Each
/// requested output is freshly allocated.
pub fn conv2d_backward(
    x: &Tensor4,
    weight: &Tensor4,
    grad_out: &Tensor4,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let xs = x.shape();
    let ws = weight.shape();
    let (cin, cout, h, w, k) = (xs.c, ws.n, xs.h, xs.w, ws.h);
    let plane = h * w;
    let ckk = cin * k * k;
    let go = grad_out.data();

    let gb = want_b.then(|| {
        let mut acc = vec![0.0f64; cout];
        for n in 0..xs.n {
            for (o, a) in acc.iter_mut().enumerate() {
                let base = (n * cout + o) * plane;
                *a += go[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    });

    // The input gradient is the full correlation of the upstream gradient
    // with the flipped kernel, i.e. a same-padded convolution.
    let gx = want_x.then(|| conv_forward(go, Shape::new(xs.n, cout, h, w), &adjoint_kernel(weight), cin, k, &[]));

    let gw = want_w.then(|| {
        let mut gw = vec![0.0f32; ws.numel()];
        if k == 1 {
            for n in 0..xs.n {
                let src = &x.data()[n * cin * plane..(n + 1) * cin * plane];
                let g = &go[n * cout * plane..(n + 1) * cout * plane];
                // dW[o, i] += sum_p g[o, p] * x[i, p]
                gemm(cout, plane, cin, g, (plane as isize, 1), src, (1, plane as isize), 1.0, &mut gw, (cin as isize, 1));
            }
            return gw;
        }
        let chunks = plan_chunks(xs.n, h, w, ckk + cout);
        let max_cols = chunks.iter().map(|c| seg_cols(c, w)).max().unwrap_or(0);
        let mut col = vec![0.0f32; ckk * max_cols];
        let mut gcol = vec![0.0f32; cout * max_cols];
        for chunk in &chunks {
            let cols = seg_cols(chunk, w);
            let mut off = 0;
            for &seg in chunk {
                im2col(&x.data()[seg.n * cin * plane..], cin, h, w, k, seg, &mut col, cols, off);
                let len = (seg.y1 - seg.y0) * w;
                for o in 0..cout {
                    let base = (seg.n * cout + o) * plane + seg.y0 * w;
                    gcol[o * cols + off..o * cols + off + len].copy_from_slice(&go[base..base + len]);
                }
                off += len;
            }
            gemm(cout, cols, ckk, &gcol, (cols as isize, 1), &col, (1, cols as isize), 1.0, &mut gw, (ckk as isize, 1));
        }
        gw
    });
    (gx, gw, gb)
}


pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(x: &Tensor4, grad_out: &[f32]) -> Vec<f32> {
    x.data()
        .iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor4::from_vec(a.shape(), data)
}

pub fn concat_channels(xs: &[&Tensor4]) -> Result<Tensor4> {
    let Some(first) = xs.first() else {
        return Err(Error::InvalidArgument("concat_channels: no inputs".into()));
    };
    let s0 = first.shape();
    for t in xs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(Error::shape("concat_channels", s0, s));
        }
    }
    let c: usize = xs.iter().map(|t| t.shape().c).sum();
    let plane = s0.plane();
    let mut data = Vec::with_capacity(s0.n * c * plane);
    for n in 0..s0.n {
        for t in xs {
            let tc = t.shape().c;
            data.extend_from_slice(&t.data()[n * tc * plane..(n + 1) * tc * plane]);
        }
    }
    Tensor4::from_vec(Shape::new(s0.n, c, s0.h, s0.w), data)
}

/// Slices an upstream gradient of a channel concatenation back into one
/// buffer per input, given the input channel counts.
pub fn concat_backward(out: Shape, channels: &[usize], grad_out: &[f32]) -> Vec<Vec<f32>> {
    let plane = out.plane();
    let mut parts: Vec<Vec<f32>> = channels
        .iter()
        .map(|&c| Vec::with_capacity(out.n * c * plane))
        .collect();
    for n in 0..out.n {
        let mut off = n * out.c * plane;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&grad_out[off..off + c * plane]);
            off += c * plane;
        }
    }
    parts
}

/// `out(n, c, y*r+dy, x*r+dx) = in(n, c*r*r + dy*r + dx, y, x)`.
pub fn pixel_shuffle(x: &Tensor4, r: usize) -> Result<Tensor4> {
    let s = x.shape();
    if r == 0 || s.c % (r * r) != 0 {
        return Err(Error::InvalidArgument(format!(
            "pixel_shuffle: {} channels not divisible by {r}^2",
            s.c
        )));
    }
    let oc = s.c / (r * r);
    let os = Shape::new(s.n, oc, s.h * r, s.w * r);
    let mut out = vec![0.0f32; s.numel()];
    let src = x.data();
    for n in 0..s.n {
        for c in 0..oc {
            for dy in 0..r {
                for dx in 0..r {
                    let ic = c * r * r + dy * r + dx;
                    for y in 0..s.h {
                        let irow = s.index(n, ic, y, 0);
                        let orow = os.index(n, c, y * r + dy, 0);
                        for xx in 0..s.w {
                            out[orow + xx * r + dx] = src[irow + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor4::from_vec(os, out)
}

/// Inverse permutation of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor4, r: usize) -> Result<Tensor4> {
    let s = x.shape();
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::InvalidArgument(format!(
            "pixel_unshuffle: spatial size {}x{} not divisible by {r}",
            s.h, s.w
        )));
    }
    let os = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut out = vec![0.0f32; s.numel()];
    let src = x.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = c * r * r + dy * r + dx;
                    for y in 0..os.h {
                        let irow = s.index(n, c, y * r + dy, 0);
                        let orow = os.index(n, oc, y, 0);
                        for xx in 0..os.w {
                            out[orow + xx] = src[irow + xx * r + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor4::from_vec(os, out)
}

/// Mean absolute error, accumulated in `f64`.
pub fn l1_loss(pred: &Tensor4, target: &Tensor4) -> Result<f32> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("l1_loss", target.shape(), pred.shape()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs() as f64)
        .sum();
    Ok((sum / pred.numel() as f64) as f32)
}

pub fn l1_loss_backward(pred: &Tensor4, target: &Tensor4, upstream: f32) -> Vec<f32> {
    let scale = upstream / pred.numel() as f32;
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            }
        })
        .collect()
}
