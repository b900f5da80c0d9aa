//! Independent double-precision oracles: nested-loop tensor ops, a
//! reference network forward pass, and central finite differences.

#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdnsr::model::{ModelConfig, RdnModel};
use rdnsr::{Shape, Tensor4};

/// Dense `n x c x h x w` array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Arr {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Arr { n, c, h, w, d: vec![0.0; n * c * h * w] }
    }

    pub fn from_tensor(t: &Tensor4) -> Self {
        let s = t.shape();
        Arr {
            n: s.n,
            c: s.c,
            h: s.h,
            w: s.w,
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::from_vec(Shape::new(self.n, self.c, self.h, self.w), self.d.iter().map(|&v| v as f32).collect()).unwrap()
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.d[((n * self.c + c) * self.h + y) * self.w + x]
    }
}

/// Values uniform in `[-1, 1)`.
pub fn random_tensor(shape: Shape, rng: &mut impl Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Values uniform in `[-1, 1)` but at least `margin` away from zero.
pub fn random_away_from_zero(shape: Shape, margin: f32, rng: &mut impl Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| {
        let v: f32 = rng.gen_range(margin..1.0);
        if rng.gen::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Direct definition: `out[n,o,y,x] = b[o] + sum w[o,i,ky,kx] * x[n,i,y+ky-p,x+kx-p]`
/// with zeros outside the image.
pub fn conv(x: &Arr, w: &Arr, b: &[f64]) -> Arr {
    let (cout, k) = (w.n, w.h);
    let p = (k / 2) as isize;
    let mut out = Arr::zeros(x.n, cout, x.h, x.w);
    for n in 0..x.n {
        for o in 0..cout {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut acc = b[o];
                    for i in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - p;
                                let sx = xx as isize + kx as isize - p;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                acc += w.at(o, i, ky, kx) * x.at(n, i, sy as usize, sx as usize);
                            }
                        }
                    }
                    *out.at_mut(n, o, y, xx) = acc;
                }
            }
        }
    }
    out
}

pub fn relu(x: &Arr) -> Arr {
    Arr { d: x.d.iter().map(|&v| v.max(0.0)).collect(), ..x.clone() }
}

/// ReLU whose active set is fixed by `mask` (recorded at the base point),
/// so finite differences never straddle a kink.
pub fn masked_relu(x: &Arr, masks: &mut MaskTape) -> Arr {
    let mask = masks.next(x);
    Arr {
        d: x.d.iter().zip(mask).map(|(&v, on)| if on { v } else { 0.0 }).collect(),
        ..x.clone()
    }
}

pub fn add(a: &Arr, b: &Arr) -> Arr {
    assert_eq!((a.n, a.c, a.h, a.w), (b.n, b.c, b.h, b.w));
    Arr { d: a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect(), ..a.clone() }
}

pub fn concat(parts: &[&Arr]) -> Arr {
    let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
    let c = parts.iter().map(|p| p.c).sum();
    let mut out = Arr::zeros(n, c, h, w);
    for b in 0..n {
        let mut off = 0;
        for p in parts {
            for ch in 0..p.c {
                for y in 0..h {
                    for x in 0..w {
                        *out.at_mut(b, off + ch, y, x) = p.at(b, ch, y, x);
                    }
                }
            }
            off += p.c;
        }
    }
    out
}

/// `out[n, c, y*r+dy, x*r+dx] = in[n, c*r*r + dy*r + dx, y, x]`.
pub fn shuffle(x: &Arr, r: usize) -> Arr {
    let c = x.c / (r * r);
    let mut out = Arr::zeros(x.n, c, x.h * r, x.w * r);
    for n in 0..x.n {
        for ch in 0..c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    for dy in 0..r {
                        for dx in 0..r {
                            *out.at_mut(n, ch, y * r + dy, xx * r + dx) = x.at(n, ch * r * r + dy * r + dx, y, xx);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn l1(pred: &Arr, target: &Arr) -> f64 {
    pred.d.iter().zip(&target.d).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.d.len() as f64
}

pub fn dot(x: &Arr, weights: &Arr) -> f64 {
    x.d.iter().zip(&weights.d).map(|(a, b)| a * b).sum()
}

/// ReLU activity masks recorded on the first pass and replayed after.
#[derive(Default)]
pub struct MaskTape {
    masks: Vec<Vec<bool>>,
    pos: usize,
    replay: bool,
}

impl MaskTape {
    pub fn rewind_for_replay(&mut self) {
        self.replay = true;
        self.pos = 0;
    }

    fn next(&mut self, x: &Arr) -> Vec<bool> {
        if self.replay {
            let m = self.masks[self.pos].clone();
            self.pos += 1;
            m
        } else {
            let m: Vec<bool> = x.d.iter().map(|&v| v > 0.0).collect();
            self.masks.push(m.clone());
            m
        }
    }
}

/// One convolution's parameters by canonical name prefix.
pub struct RefConv {
    pub w: Arr,
    pub b: Vec<f64>,
}

/// Double-precision copy of a model's parameters, in canonical order.
pub struct RefNet {
    pub cfg: ModelConfig,
    pub params: Vec<(String, Arr)>,
}

impl RefNet {
    pub fn from_model(model: &RdnModel) -> Self {
        RefNet {
            cfg: *model.config(),
            params: model.named_params().into_iter().map(|(n, t)| (n, Arr::from_tensor(t))).collect(),
        }
    }

    fn conv(&self, name: &str) -> RefConv {
        let find = |suffix: &str| {
            let key = format!("{name}.{suffix}");
            &self.params.iter().find(|(n, _)| *n == key).unwrap_or_else(|| panic!("no parameter {key}")).1
        };
        RefConv { w: find("w").clone(), b: find("b").d.clone() }
    }

    fn apply(&self, name: &str, x: &Arr) -> Arr {
        let c = self.conv(name);
        conv(x, &c.w, &c.b)
    }

    /// Wiring written out from the architecture description.
    pub fn forward(&self, lr: &Arr, masks: &mut MaskTape) -> Arr {
        let cfg = self.cfg;
        let f_minus1 = self.apply("sfe1", lr);
        let mut f = self.apply("sfe2", &f_minus1);
        let mut block_outputs = Vec::new();
        for d in 0..cfg.blocks {
            let prev = f.clone();
            let mut layers: Vec<Arr> = Vec::new();
            for c in 0..cfg.layers {
                let input = if cfg.cm || c == 0 {
                    let mut parts = vec![&prev];
                    parts.extend(layers.iter());
                    concat(&parts)
                } else {
                    concat(&layers.iter().collect::<Vec<_>>())
                };
                let pre = self.apply(&format!("rdb{d}.dense{c}"), &input);
                layers.push(masked_relu(&pre, masks));
            }
            let fused_in = if cfg.cm {
                let mut parts = vec![&prev];
                parts.extend(layers.iter());
                concat(&parts)
            } else {
                concat(&layers.iter().collect::<Vec<_>>())
            };
            let local = self.apply(&format!("rdb{d}.lff"), &fused_in);
            f = if cfg.lrl { add(&prev, &local) } else { local };
            block_outputs.push(f.clone());
        }
        let global = if cfg.gff {
            let all = concat(&block_outputs.iter().collect::<Vec<_>>());
            self.apply("gff2", &self.apply("gff1", &all))
        } else {
            f
        };
        let mut y = add(&f_minus1, &global);
        for (s, r) in cfg.upsample_stages().into_iter().enumerate() {
            y = shuffle(&self.apply(&format!("up{s}.conv"), &y), r);
        }
        self.apply("final", &y)
    }
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &mut Arr, h: f64, mut f: impl FnMut(&Arr) -> f64) -> Vec<f64> {
    (0..x.d.len())
        .map(|i| {
            let orig = x.d[i];
            x.d[i] = orig + h;
            let up = f(x);
            x.d[i] = orig - h;
            let down = f(x);
            x.d[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - n| / max |n|`.
pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (&a, &n)| m.max((a as f64 - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Step for central differences in the double-precision oracles.
pub const FD_STEP: f64 = 1e-3;

/// Relative error bound for gradient checks.
pub const GRAD_TOL: f64 = 1e-3;

/// Number of random seeds per gradient check.
pub const GRAD_SEEDS: u64 = 50;

/// Parameter count from the layer list of the architecture description,
/// written independently of the library.
pub fn layer_list_count(cfg: &ModelConfig) -> usize {
    let (d, c, g, g0) = (cfg.blocks, cfg.layers, cfg.growth, cfg.features);
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let mut layers = vec![conv(3, g0, 3), conv(g0, g0, 3)];
    for _ in 0..d {
        for i in 0..c {
            let cin = match (cfg.cm, i) {
                (_, 0) => g0,
                (true, i) => g0 + i * g,
                (false, i) => i * g,
            };
            layers.push(conv(cin, g, 3));
        }
        layers.push(conv(if cfg.cm { g0 + c * g } else { c * g }, g0, 1));
    }
    if cfg.gff {
        layers.push(conv(d * g0, g0, 1));
        layers.push(conv(g0, g0, 3));
    }
    let stages: &[usize] = match cfg.scale {
        1 => &[],
        2 => &[2],
        3 => &[3],
        _ => &[2, 2],
    };
    for &r in stages {
        layers.push(conv(g0, g0 * r * r, 3));
    }
    layers.push(conv(g0, 3, 3));
    layers.iter().sum()
}
