//! Analytic gradients from the tape against central differences of the
//! double-precision oracles. Every check returns the worst relative error.

use rand::Rng;
use rdnsr::model::{ModelConfig, RdnModel};
use rdnsr::tensor::concat_channels;
use rdnsr::{Shape, Tape, Tensor4, Var};

use super::*;

fn small_shape(rng: &mut impl Rng, c: usize) -> Shape {
    Shape::new(rng.gen_range(1..=2), c, rng.gen_range(1..=5), rng.gen_range(1..=5))
}

/// Worst error of `d/dx_i <f(x), r>` over every input.
fn check<F, G>(inputs: Vec<Tensor4>, forward: F, oracle: G) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    G: Fn(&[Arr]) -> f64,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = forward(&tape, &vars);
    tape.backward(&loss).unwrap();
    let mut arrs: Vec<Arr> = inputs.iter().map(Arr::from_tensor).collect();
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(var).expect("leaf gradient");
        let mut target = arrs[i].clone();
        let numeric = numeric_grad(&mut target, FD_STEP, |x| {
            let saved = std::mem::replace(&mut arrs[i], x.clone());
            let v = oracle(&arrs);
            arrs[i] = saved;
            v
        });
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

pub fn conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let k = [1, 3, 5][seed as usize % 3];
    let (cin, cout) = (r.gen_range(1..=3), r.gen_range(1..=3));
    let xs = small_shape(&mut r, cin);
    let x = random_tensor(xs, &mut r);
    let w = random_tensor(Shape::new(cout, cin, k, k), &mut r);
    let b = random_tensor(Shape::new(1, cout, 1, 1), &mut r);
    let proj = random_tensor(Shape::new(xs.n, cout, xs.h, xs.w), &mut r);
    let pa = Arr::from_tensor(&proj);
    check(
        vec![x, w, b],
        |_, v| v[0].conv2d(&v[1], &v[2]).unwrap().weighted_sum(&proj).unwrap(),
        |a| dot(&conv(&a[0], &a[1], &a[2].d), &pa),
    )
}

pub fn relu_op(seed: u64) -> f64 {
    let mut r = rng(100 + seed);
    let c = r.gen_range(1..=3);
    let xs = small_shape(&mut r, c);
    // Farther from the kink than the difference step.
    let x = random_away_from_zero(xs, 10.0 * FD_STEP as f32, &mut r);
    let proj = random_tensor(xs, &mut r);
    let pa = Arr::from_tensor(&proj);
    check(vec![x], |_, v| v[0].relu().weighted_sum(&proj).unwrap(), |a| dot(&relu(&a[0]), &pa))
}

pub fn add_op(seed: u64) -> f64 {
    let mut r = rng(200 + seed);
    let c = r.gen_range(1..=3);
    let xs = small_shape(&mut r, c);
    let (a, b) = (random_tensor(xs, &mut r), random_tensor(xs, &mut r));
    let proj = random_tensor(xs, &mut r);
    let pa = Arr::from_tensor(&proj);
    check(
        vec![a, b],
        |_, v| v[0].add(&v[1]).unwrap().weighted_sum(&proj).unwrap(),
        |a| dot(&add(&a[0], &a[1]), &pa),
    )
}

pub fn concat_op(seed: u64) -> f64 {
    let mut r = rng(300 + seed);
    let base = small_shape(&mut r, 1);
    let count = r.gen_range(1..=3);
    let parts: Vec<Tensor4> = (0..count)
        .map(|_| {
            let c = r.gen_range(1..=3);
            random_tensor(Shape::new(base.n, c, base.h, base.w), &mut r)
        })
        .collect();
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let proj = random_tensor(Shape::new(base.n, c, base.h, base.w), &mut r);
    let pa = Arr::from_tensor(&proj);
    check(
        parts,
        |_, v| concat_channels(&v.iter().collect::<Vec<_>>()).unwrap().weighted_sum(&proj).unwrap(),
        |a| dot(&concat(&a.iter().collect::<Vec<_>>()), &pa),
    )
}

pub fn pixel_shuffle_op(seed: u64) -> f64 {
    let mut r = rng(400 + seed);
    let f = r.gen_range(1..=3);
    let c = r.gen_range(1..=2);
    let xs = small_shape(&mut r, c * f * f);
    let x = random_tensor(xs, &mut r);
    let proj = random_tensor(Shape::new(xs.n, c, xs.h * f, xs.w * f), &mut r);
    let pa = Arr::from_tensor(&proj);
    check(vec![x], |_, v| v[0].pixel_shuffle(f).unwrap().weighted_sum(&proj).unwrap(), |a| dot(&shuffle(&a[0], f), &pa))
}

pub fn l1_loss_op(seed: u64) -> f64 {
    let mut r = rng(500 + seed);
    let c = r.gen_range(1..=3);
    let xs = small_shape(&mut r, c);
    let pred = random_tensor(xs, &mut r);
    // Residuals clear of the kink at zero.
    let offset = random_away_from_zero(xs, 10.0 * FD_STEP as f32, &mut r);
    let target = Tensor4::from_vec(xs, pred.data().iter().zip(offset.data()).map(|(p, o)| p + o).collect()).unwrap();
    check(vec![pred, target], |_, v| v[0].l1_loss(&v[1]).unwrap(), |a| l1(&a[0], &a[1]))
}

pub fn sum_ops(seed: u64) -> f64 {
    let mut r = rng(600 + seed);
    let c = r.gen_range(1..=3);
    let xs = small_shape(&mut r, c);
    let x = random_tensor(xs, &mut r);
    let proj = random_tensor(xs, &mut r);
    let pa = Arr::from_tensor(&proj);
    let plain = check(vec![x.clone()], |_, v| v[0].sum(), |a| a[0].d.iter().sum());
    let weighted = check(vec![x], |_, v| v[0].weighted_sum(&proj).unwrap(), |a| dot(&a[0], &pa));
    plain.max(weighted)
}

/// Every differentiable op with its seeded check.
pub const OPS: &[(&str, fn(u64) -> f64)] = &[
    ("conv2d", conv2d),
    ("relu", relu_op),
    ("add", add_op),
    ("concat", concat_op),
    ("pixel_shuffle", pixel_shuffle_op),
    ("l1_loss", l1_loss_op),
    ("sum", sum_ops),
];

/// Worst relative error over every parameter and the input image, with the
/// name of the worst tensor. Panics if the forward pass disagrees with the
/// reference wiring.
pub fn model(cfg: ModelConfig, seed: u64, input: Shape) -> (f64, String) {
    let model = {
        let mut m = RdnModel::build(cfg, seed).unwrap();
        // Nonzero biases so every bias path is exercised.
        let mut r = rng(seed ^ 0xb1a5);
        for (name, p) in m.named_params_mut() {
            if name.ends_with(".b") {
                p.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.1..0.1));
            }
        }
        m
    };
    let mut r = rng(seed ^ 0x1234);
    let lr = random_tensor(input, &mut r);
    let proj = random_tensor(Shape::new(input.n, 3, input.h * cfg.scale, input.w * cfg.scale), &mut r);
    let pa = Arr::from_tensor(&proj);

    let mut trained = model.clone();
    trained.set_requires_grad(true);
    let tape = Tape::new();
    let bound = trained.bind(&tape);
    let x = tape.variable(lr.clone());
    let out = bound.forward(&x).unwrap();
    tape.backward(&out.weighted_sum(&proj).unwrap()).unwrap();
    let input_grad = tape.grad(&x).unwrap();
    trained.accumulate_grads(&tape, &bound).unwrap();
    drop(bound);

    let mut net = RefNet::from_model(&model);
    let input_arr = Arr::from_tensor(&lr);
    let mut masks = MaskTape::default();
    let base = net.forward(&input_arr, &mut masks);
    let dev = out.value().data().iter().zip(&base.d).fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b).abs()));
    assert!(dev < 1e-4, "{cfg}: forward deviates from the reference wiring by {dev}");

    let eval = |net: &RefNet, input: &Arr, masks: &mut MaskTape| {
        masks.rewind_for_replay();
        dot(&net.forward(input, masks), &pa)
    };
    let grads: Vec<(String, Vec<f32>)> =
        trained.named_params().into_iter().map(|(n, t)| (n, t.grad().unwrap().to_vec())).collect();
    let mut worst = (0.0f64, String::new());
    for (idx, (name, analytic)) in grads.iter().enumerate() {
        let mut values = net.params[idx].1.clone();
        let numeric = numeric_grad(&mut values, FD_STEP, |v| {
            let saved = std::mem::replace(&mut net.params[idx].1, v.clone());
            let out = eval(&net, &input_arr, &mut masks);
            net.params[idx].1 = saved;
            out
        });
        let err = relative_error(analytic, &numeric);
        if err >= worst.0 {
            worst = (err, name.clone());
        }
    }
    let mut probe = input_arr.clone();
    let numeric = numeric_grad(&mut probe, FD_STEP, |v| eval(&net, v, &mut masks));
    let err = relative_error(input_grad.data(), &numeric);
    if err >= worst.0 {
        worst = (err, "input".into());
    }
    worst
}

/// The micro network used for the end-to-end check.
pub fn micro_config() -> ModelConfig {
    ModelConfig::new(2, 2, 4, 4, 2)
}

pub const MICRO_INPUT: Shape = Shape { n: 1, c: 3, h: 6, w: 6 };
