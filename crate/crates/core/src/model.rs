//! Residual dense network: shallow feature extraction, a chain of residual
//! dense blocks, global feature fusion with a global residual, and a
//! sub-pixel upsampling tail.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{concat_channels, Shape, Tape, Tensor4, Var};

pub const IMAGE_CHANNELS: usize = 3;

/// Architecture hyperparameters and ablation toggles. Local feature fusion
/// is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    /// Number of residual dense blocks (D).
    pub blocks: usize,
    /// Dense conv layers per block (C).
    pub layers: usize,
    /// Growth rate (G).
    pub growth: usize,
    /// Base feature width (G0).
    pub features: usize,
    pub scale: usize,
    /// Contiguous memory: the block input feeds every dense layer and LFF.
    pub cm: bool,
    /// Local residual learning.
    pub lrl: bool,
    /// Global feature fusion over all block outputs.
    pub gff: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 16,
            layers: 8,
            growth: 64,
            features: 64,
            scale: 2,
            cm: true,
            lrl: true,
            gff: true,
        }
    }
}

impl ModelConfig {
    pub fn new(blocks: usize, layers: usize, growth: usize, features: usize, scale: usize) -> Self {
        ModelConfig {
            blocks,
            layers,
            growth,
            features,
            scale,
            ..Default::default()
        }
    }

    pub fn with_toggles(mut self, cm: bool, lrl: bool, gff: bool) -> Self {
        self.cm = cm;
        self.lrl = lrl;
        self.gff = gff;
        self
    }

    /// Collects every problem with the configuration.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("blocks", self.blocks),
            ("layers", self.layers),
            ("growth", self.growth),
            ("features", self.features),
        ] {
            if v == 0 {
                out.push(format!("{name} must be at least 1"));
            }
        }
        if !(1..=4).contains(&self.scale) {
            out.push(format!("scale must be 1, 2, 3 or 4, got {}", self.scale));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.scale) {
            return Err(Error::UnsupportedScale(self.scale));
        }
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// Input width of dense layer `c` (0-based) in every block.
    pub fn dense_input_width(&self, c: usize) -> usize {
        if self.cm {
            self.features + c * self.growth
        } else if c == 0 {
            self.features
        } else {
            c * self.growth
        }
    }

    pub fn lff_input_width(&self) -> usize {
        if self.cm {
            self.features + self.layers * self.growth
        } else {
            self.layers * self.growth
        }
    }

    /// Pixel-shuffle factor of each upsampling stage.
    pub fn upsample_stages(&self) -> Vec<usize> {
        match self.scale {
            1 => vec![],
            4 => vec![2, 2],
            r => vec![r],
        }
    }

    /// Ablation tag in the `CM1LRL0GFF1` style.
    pub fn toggle_tag(&self) -> String {
        format!(
            "CM{}LRL{}GFF{}",
            self.cm as u8, self.lrl as u8, self.gff as u8
        )
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "D={} C={} G={} G0={} x{} {}",
            self.blocks,
            self.layers,
            self.growth,
            self.features,
            self.scale,
            self.toggle_tag()
        )
    }
}

/// Closed-form number of weights and biases in `build(cfg)`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let g0 = cfg.features;
    let mut total = conv(IMAGE_CHANNELS, g0, 3) + conv(g0, g0, 3);
    let block: usize = (0..cfg.layers)
        .map(|c| conv(cfg.dense_input_width(c), cfg.growth, 3))
        .sum::<usize>()
        + conv(cfg.lff_input_width(), g0, 1);
    total += cfg.blocks * block;
    if cfg.gff {
        total += conv(cfg.blocks * g0, g0, 1) + conv(g0, g0, 3);
    }
    total += cfg
        .upsample_stages()
        .iter()
        .map(|r| conv(g0, g0 * r * r, 3))
        .sum::<usize>();
    total + conv(g0, IMAGE_CHANNELS, 3)
}

/// Receptive field, in LR pixels, of a feature at the input of the
/// upsampling net.
pub fn receptive_field(cfg: &ModelConfig) -> usize {
    receptive_field_of_depth(deepest_3x3_path(cfg))
}

pub fn receptive_field_of_depth(convs_3x3: usize) -> usize {
    1 + 2 * convs_3x3
}

/// 3x3 convolutions on the longest path from the image to the fused deep
/// features: both shallow convs, every dense layer, and the second fusion
/// conv when global fusion is on.
pub fn deepest_3x3_path(cfg: &ModelConfig) -> usize {
    2 + cfg.blocks * cfg.layers + cfg.gff as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor4,
    pub bias: Tensor4,
}

impl ConvParams {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        ConvParams {
            weight: Tensor4::zeros(Shape::new(cout, cin, k, k)),
            bias: Tensor4::zeros(Shape::new(1, cout, 1, 1)),
        }
    }

    /// Fan-in scaled uniform weights (He), zero bias.
    fn init(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (cin * k * k) as f64).sqrt() as f32;
        let mut p = Self::zeros(cin, cout, k);
        for v in p.weight.data_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
        p
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        crate::tensor::kernels::conv2d(x, &self.weight, &self.bias)
    }

    fn bind<'t>(&self, tape: &'t Tape) -> BoundConv<'t> {
        BoundConv {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdbParams {
    pub dense: Vec<ConvParams>,
    pub lff: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdnModel {
    cfg: ModelConfig,
    pub sfe1: ConvParams,
    pub sfe2: ConvParams,
    pub blocks: Vec<RdbParams>,
    pub gff1: Option<ConvParams>,
    pub gff2: Option<ConvParams>,
    pub up: Vec<ConvParams>,
    pub final_conv: ConvParams,
}

impl RdnModel {
    /// Allocates and initializes every parameter from `seed`.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::assemble(cfg, |cin, cout, k| ConvParams::init(cin, cout, k, &mut rng));
        model.check_bookkeeping()?;
        Ok(model)
    }

    /// Same layout as [`RdnModel::build`], every parameter zero.
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::assemble(cfg, ConvParams::zeros))
    }

    fn assemble(cfg: ModelConfig, mut conv: impl FnMut(usize, usize, usize) -> ConvParams) -> Self {
        let g0 = cfg.features;
        let sfe1 = conv(IMAGE_CHANNELS, g0, 3);
        let sfe2 = conv(g0, g0, 3);
        let blocks = (0..cfg.blocks)
            .map(|_| RdbParams {
                dense: (0..cfg.layers)
                    .map(|c| conv(cfg.dense_input_width(c), cfg.growth, 3))
                    .collect(),
                lff: conv(cfg.lff_input_width(), g0, 1),
            })
            .collect();
        let (gff1, gff2) = if cfg.gff {
            (Some(conv(cfg.blocks * g0, g0, 1)), Some(conv(g0, g0, 3)))
        } else {
            (None, None)
        };
        let up = cfg
            .upsample_stages()
            .iter()
            .map(|r| conv(g0, g0 * r * r, 3))
            .collect();
        let final_conv = conv(g0, IMAGE_CHANNELS, 3);
        RdnModel {
            cfg,
            sfe1,
            sfe2,
            blocks,
            gff1,
            gff2,
            up,
            final_conv,
        }
    }

    fn check_bookkeeping(&self) -> Result<()> {
        for block in &self.blocks {
            for (c, layer) in block.dense.iter().enumerate() {
                let want = self.cfg.dense_input_width(c);
                if layer.in_channels() != want {
                    return Err(Error::ChannelMismatch {
                        op: "dense layer",
                        expected: want,
                        actual: layer.in_channels(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Parameters under their canonical checkpoint names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor4)> {
        let mut out = Vec::new();
        self.visit_convs(|name, p| {
            out.push((format!("{name}.w"), &p.weight));
            out.push((format!("{name}.b"), &p.bias));
        });
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor4)> {
        fn push<'a>(out: &mut Vec<(String, &'a mut Tensor4)>, name: String, p: &'a mut ConvParams) {
            out.push((format!("{name}.w"), &mut p.weight));
            out.push((format!("{name}.b"), &mut p.bias));
        }
        let RdnModel {
            sfe1,
            sfe2,
            blocks,
            gff1,
            gff2,
            up,
            final_conv,
            ..
        } = self;
        let mut out = Vec::new();
        push(&mut out, "sfe1".into(), sfe1);
        push(&mut out, "sfe2".into(), sfe2);
        for (d, block) in blocks.iter_mut().enumerate() {
            for (c, layer) in block.dense.iter_mut().enumerate() {
                push(&mut out, format!("rdb{d}.dense{c}"), layer);
            }
            push(&mut out, format!("rdb{d}.lff"), &mut block.lff);
        }
        if let Some(p) = gff1 {
            push(&mut out, "gff1".into(), p);
        }
        if let Some(p) = gff2 {
            push(&mut out, "gff2".into(), p);
        }
        for (s, p) in up.iter_mut().enumerate() {
            push(&mut out, format!("up{s}.conv"), p);
        }
        push(&mut out, "final".into(), final_conv);
        out
    }

    fn visit_convs<'a>(&'a self, mut f: impl FnMut(String, &'a ConvParams)) {
        f("sfe1".into(), &self.sfe1);
        f("sfe2".into(), &self.sfe2);
        for (d, block) in self.blocks.iter().enumerate() {
            for (c, layer) in block.dense.iter().enumerate() {
                f(format!("rdb{d}.dense{c}"), layer);
            }
            f(format!("rdb{d}.lff"), &block.lff);
        }
        if let Some(p) = &self.gff1 {
            f("gff1".into(), p);
        }
        if let Some(p) = &self.gff2 {
            f("gff2".into(), p);
        }
        for (s, p) in self.up.iter().enumerate() {
            f(format!("up{s}.conv"), p);
        }
        f("final".into(), &self.final_conv);
    }

    /// Number of scalar parameters, by enumeration.
    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for (_, p) in self.named_params_mut() {
            p.set_requires_grad(on);
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundRdn<'t> {
        BoundRdn {
            cfg: self.cfg,
            sfe1: self.sfe1.bind(tape),
            sfe2: self.sfe2.bind(tape),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundRdb {
                    dense: b.dense.iter().map(|p| p.bind(tape)).collect(),
                    lff: b.lff.bind(tape),
                })
                .collect(),
            gff1: self.gff1.as_ref().map(|p| p.bind(tape)),
            gff2: self.gff2.as_ref().map(|p| p.bind(tape)),
            up: self.up.iter().map(|p| p.bind(tape)).collect(),
            final_conv: self.final_conv.bind(tape),
        }
    }

    /// Adds the gradients accumulated on `tape` into each parameter's
    /// gradient buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundRdn<'_>) -> Result<()> {
        let vars = bound.param_vars();
        let params = self.named_params_mut();
        debug_assert_eq!(vars.len(), params.len());
        for (var, (_, p)) in vars.into_iter().zip(params) {
            tape.accumulate_into(var, p)?;
        }
        Ok(())
    }

    /// Forward pass without recording gradients.
    pub fn infer(&self, lr: &Tensor4) -> Result<Tensor4> {
        let tape = Tape::no_grad();
        let bound = self.bind(&tape);
        let x = tape.constant(lr.detached());
        Ok(bound.forward(&x)?.to_tensor())
    }
}

#[derive(Clone, Debug)]
pub struct BoundConv<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> BoundConv<'t> {
    pub fn apply(&self, x: &Var<'t>) -> Result<Var<'t>> {
        x.conv2d(&self.weight, &self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct BoundRdb<'t> {
    pub dense: Vec<BoundConv<'t>>,
    pub lff: BoundConv<'t>,
}

/// Intermediate feature maps of one forward pass.
#[derive(Clone, Debug)]
pub struct Features<'t> {
    /// Output of the first shallow conv, carried by the global residual.
    pub shallow: Var<'t>,
    /// Output of each residual dense block.
    pub blocks: Vec<Var<'t>>,
    /// Deep features entering the upsampling net.
    pub dense: Var<'t>,
    pub output: Var<'t>,
}

/// A model whose parameters have been recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundRdn<'t> {
    cfg: ModelConfig,
    pub sfe1: BoundConv<'t>,
    pub sfe2: BoundConv<'t>,
    pub blocks: Vec<BoundRdb<'t>>,
    pub gff1: Option<BoundConv<'t>>,
    pub gff2: Option<BoundConv<'t>>,
    pub up: Vec<BoundConv<'t>>,
    pub final_conv: BoundConv<'t>,
}

impl<'t> BoundRdn<'t> {
    /// Parameter variables in canonical order.
    pub fn param_vars(&self) -> Vec<&Var<'t>> {
        let mut convs: Vec<&BoundConv<'t>> = vec![&self.sfe1, &self.sfe2];
        for b in &self.blocks {
            convs.extend(&b.dense);
            convs.push(&b.lff);
        }
        convs.extend(self.gff1.iter());
        convs.extend(self.gff2.iter());
        convs.extend(&self.up);
        convs.push(&self.final_conv);
        convs.into_iter().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    /// One residual dense block applied to `prev` (G0 channels).
    pub fn forward_rdb(&self, d: usize, prev: &Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.cfg;
        let block = self.blocks.get(d).ok_or_else(|| {
            Error::InvalidArgument(format!("block index {d} out of range for {} blocks", cfg.blocks))
        })?;
        if prev.shape().c != cfg.features {
            return Err(Error::ChannelMismatch {
                op: "residual dense block",
                expected: cfg.features,
                actual: prev.shape().c,
            });
        }
        let mut produced: Vec<Var<'t>> = Vec::with_capacity(cfg.layers);
        for (c, layer) in block.dense.iter().enumerate() {
            let input = if cfg.cm || c == 0 {
                let mut parts = vec![prev];
                parts.extend(&produced);
                concat(&parts)?
            } else {
                concat(&produced.iter().collect::<Vec<_>>())?
            };
            produced.push(layer.apply(&input)?.relu());
        }
        let fused_in = if cfg.cm {
            let mut parts = vec![prev];
            parts.extend(&produced);
            concat(&parts)?
        } else {
            concat(&produced.iter().collect::<Vec<_>>())?
        };
        let local = block.lff.apply(&fused_in)?;
        if cfg.lrl {
            prev.add(&local)
        } else {
            Ok(local)
        }
    }

    pub fn forward_features(&self, lr: &Var<'t>) -> Result<Features<'t>> {
        if lr.shape().c != IMAGE_CHANNELS {
            return Err(Error::ChannelMismatch {
                op: "rdn input",
                expected: IMAGE_CHANNELS,
                actual: lr.shape().c,
            });
        }
        let shallow = self.sfe1.apply(lr)?;
        let mut x = self.sfe2.apply(&shallow)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for d in 0..self.blocks.len() {
            x = self.forward_rdb(d, &x)?;
            outs.push(x.clone());
        }
        let global = match (&self.gff1, &self.gff2) {
            (Some(g1), Some(g2)) => {
                let all = concat(&outs.iter().collect::<Vec<_>>())?;
                g2.apply(&g1.apply(&all)?)?
            }
            _ => x,
        };
        let dense = shallow.add(&global)?;
        let mut y = dense.clone();
        for (stage, r) in self.up.iter().zip(self.cfg.upsample_stages()) {
            y = stage.apply(&y)?.pixel_shuffle(r)?;
        }
        let output = self.final_conv.apply(&y)?;
        Ok(Features {
            shallow,
            blocks: outs,
            dense,
            output,
        })
    }

    pub fn forward(&self, lr: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_features(lr)?.output)
    }
}

fn concat<'t>(parts: &[&Var<'t>]) -> Result<Var<'t>> {
    match parts {
        [single] => Ok((*single).clone()),
        _ => concat_channels(parts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ModelConfig {
        ModelConfig::new(2, 2, 4, 4, 2)
    }

    #[test]
    fn degenerate_config_param_count_by_hand() {
        // D=C=G=G0=1, no upsampling:
        // sfe1 3*1*9+1=28, sfe2 9+1=10, dense0 9+1=10, lff 2*1+1=3,
        // gff1 1+1=2, gff2 9+1=10, final 1*3*9+3=30.
        let cfg = ModelConfig::new(1, 1, 1, 1, 1);
        assert_eq!(param_count(&cfg), 28 + 10 + 10 + 3 + 2 + 10 + 30);
        let model = RdnModel::build(cfg, 0).unwrap();
        assert_eq!(model.num_params(), 93);
    }

    #[test]
    fn published_configurations_build() {
        for cfg in [ModelConfig::new(20, 6, 32, 64, 2), ModelConfig::new(16, 8, 64, 64, 2)] {
            let model = RdnModel::build(cfg, 1).unwrap();
            assert_eq!(model.num_params(), param_count(&cfg));
        }
    }

    #[test]
    fn unsupported_scale_is_rejected() {
        let cfg = ModelConfig::new(1, 1, 1, 1, 5);
        assert!(matches!(RdnModel::build(cfg, 0), Err(Error::UnsupportedScale(5))));
    }

    #[test]
    fn canonical_names() {
        let model = RdnModel::build(ModelConfig::new(2, 2, 4, 4, 4), 0).unwrap();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let expected = [
            "sfe1.w", "sfe1.b", "sfe2.w", "sfe2.b", "rdb0.dense0.w", "rdb0.dense0.b", "rdb0.dense1.w",
            "rdb0.dense1.b", "rdb0.lff.w", "rdb0.lff.b", "rdb1.dense0.w", "rdb1.dense0.b",
            "rdb1.dense1.w", "rdb1.dense1.b", "rdb1.lff.w", "rdb1.lff.b", "gff1.w", "gff1.b", "gff2.w",
            "gff2.b", "up0.conv.w", "up0.conv.b", "up1.conv.w", "up1.conv.b", "final.w", "final.b",
        ];
        assert_eq!(names, expected);
        let mut m = model.clone();
        let mut_names: Vec<String> = m.named_params_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(mut_names, expected);
    }

    #[test]
    fn param_count_monotone_in_each_dimension() {
        let base = ModelConfig::new(3, 3, 8, 16, 2);
        let p = param_count(&base);
        assert!(param_count(&ModelConfig { blocks: 4, ..base }) > p);
        assert!(param_count(&ModelConfig { layers: 4, ..base }) > p);
        assert!(param_count(&ModelConfig { growth: 9, ..base }) > p);
    }

    #[test]
    fn receptive_field_basics() {
        assert_eq!(receptive_field_of_depth(0), 1);
        assert_eq!(receptive_field_of_depth(1), 3);
        assert_eq!(receptive_field(&ModelConfig::new(2, 2, 4, 4, 2)), 1 + 2 * 7);
    }

    #[test]
    fn output_shape() {
        let model = RdnModel::build(micro(), 3).unwrap();
        let x = Tensor4::full(Shape::new(1, 3, 16, 16), 0.5);
        assert_eq!(model.infer(&x).unwrap().shape(), Shape::new(1, 3, 32, 32));
        let model = RdnModel::build(ModelConfig { scale: 3, ..micro() }, 3).unwrap();
        assert_eq!(model.infer(&x).unwrap().shape(), Shape::new(1, 3, 48, 48));
    }

    #[test]
    fn wrong_input_channels() {
        let model = RdnModel::build(micro(), 3).unwrap();
        let x = Tensor4::zeros(Shape::new(1, 1, 4, 4));
        assert!(matches!(model.infer(&x), Err(Error::ChannelMismatch { expected: 3, actual: 1, .. })));
    }

    #[test]
    fn zeroed_block_is_identity_with_lrl() {
        let mut model = RdnModel::build(micro(), 5).unwrap();
        model.blocks[1] = RdnModel::zeros(micro()).unwrap().blocks[1].clone();
        let tape = Tape::no_grad();
        let bound = model.bind(&tape);
        let prev = tape.constant(Tensor4::from_fn(Shape::new(1, 4, 5, 5), |_, c, y, x| {
            (c * 7 + y * 3 + x) as f32 * 0.1 - 1.0
        }));
        let out = bound.forward_rdb(1, &prev).unwrap();
        assert_eq!(out.value().max_abs_diff(prev.value()).unwrap(), 0.0);

        let cfg = ModelConfig { lrl: false, ..micro() };
        let model = RdnModel::zeros(cfg).unwrap();
        let bound = model.bind(&tape);
        let out = bound.forward_rdb(0, &prev).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rdb_rejects_wrong_width() {
        let model = RdnModel::build(micro(), 5).unwrap();
        let tape = Tape::no_grad();
        let bound = model.bind(&tape);
        let prev = tape.constant(Tensor4::zeros(Shape::new(1, 3, 4, 4)));
        assert!(bound.forward_rdb(0, &prev).is_err());
    }
}
