//! The detection network: a three-level U-structure over dense
//! convolutional stages, with an independent head per feature scale.
//!
//! Layout per level (stride 4, 8, 16): head output channels are `5K`, with
//! channel `5a` the score logit of anchor slot `a` and channels
//! `5a+1..5a+5` its `[dx, dy, dz, dd]` offsets.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use optim::{OptimConfig, Sgd};
pub use tensor::Tensor5;

use crate::error::{Error, Result};
use crate::Real;
use layers::{ChannelNorm, Conv3d, ConvTranspose3d, Init, Param, Relu};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const STRIDES: [usize; 3] = [4, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub blocks_per_stage: usize,
    pub growth: usize,
    pub head_channels: usize,
    /// Anchor slots per cell; derived from the run mode, not read from
    /// config files.
    #[serde(skip)]
    pub k_per_point: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 16,
            blocks_per_stage: 2,
            growth: 8,
            head_channels: 32,
            k_per_point: 1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0
            || self.blocks_per_stage == 0
            || self.growth == 0
            || self.head_channels == 0
        {
            return Err(Error::Config(
                "network channel counts must all be >= 1".into(),
            ));
        }
        if self.k_per_point != 1 && self.k_per_point != 3 {
            return Err(Error::Config(format!(
                "k_per_point must be 1 or 3, got {}",
                self.k_per_point
            )));
        }
        Ok(())
    }

    /// Encoder output channels per stage.
    pub fn stage_channels(&self) -> [usize; 3] {
        let g = self.blocks_per_stage * self.growth;
        let c1 = self.base_channels + g;
        let c2 = c1 + g;
        [c1, c2, c2 + g]
    }

    /// Fused decoder width feeding each head.
    pub fn fused_channels(&self) -> usize {
        2 * self.base_channels
    }

    pub fn head_out_channels(&self) -> usize {
        5 * self.k_per_point
    }
}

/// conv k3, per-channel norm, relu.
#[derive(Debug, Clone)]
struct ConvBlock<T: Real> {
    conv: Conv3d<T>,
    norm: ChannelNorm<T>,
    relu: Relu<T>,
}

impl<T: Real> ConvBlock<T> {
    fn new(name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv: Conv3d::new(&format!("{name}.conv"), c_in, c_out, 3, stride, Init::Kaiming, rng),
            norm: ChannelNorm::new(&format!("{name}.norm"), c_out),
            relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let y = self.conv.forward(x)?;
        let y = self.norm.forward(&y)?;
        Ok(self.relu.forward(&y))
    }

    fn backward(&mut self, g: &Tensor5<T>) -> Result<Tensor5<T>> {
        let g = self.relu.backward(g)?;
        let g = self.norm.backward(&g)?;
        self.conv.backward(&g)
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.conv.w);
        f(&mut self.conv.b);
        f(&mut self.norm.gamma);
        f(&mut self.norm.beta);
    }

    fn visit_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.conv.w);
        f(&self.conv.b);
        f(&self.norm.gamma);
        f(&self.norm.beta);
    }
}

/// Stride-2 downsampling block followed by densely concatenated growth
/// units.
#[derive(Debug, Clone)]
struct DenseStage<T: Real> {
    down: ConvBlock<T>,
    units: Vec<ConvBlock<T>>,
    c_base: usize,
    growth: usize,
}

impl<T: Real> DenseStage<T> {
    fn new(name: &str, c_in: usize, blocks: usize, growth: usize, rng: &mut ChaCha8Rng) -> Self {
        let down = ConvBlock::new(&format!("{name}.down"), c_in, c_in, 2, rng);
        let units = (0..blocks)
            .map(|u| {
                ConvBlock::new(&format!("{name}.unit{u}"), c_in + u * growth, growth, 1, rng)
            })
            .collect();
        DenseStage {
            down,
            units,
            c_base: c_in,
            growth,
        }
    }

    fn forward(&mut self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let mut cur = self.down.forward(x)?;
        for u in &mut self.units {
            let fresh = u.forward(&cur)?;
            cur = Tensor5::concat_channels(&cur, &fresh)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, g: &Tensor5<T>) -> Result<Tensor5<T>> {
        let mut g = g.clone();
        for (u, unit) in self.units.iter_mut().enumerate().rev() {
            let c_pre = self.c_base + u * self.growth;
            let (mut g_pre, g_new) = g.split_channels(c_pre)?;
            g_pre.add_assign(&unit.backward(&g_new)?)?;
            g = g_pre;
        }
        self.down.backward(&g)
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.down.visit(f);
        for u in &mut self.units {
            u.visit(f);
        }
    }

    fn visit_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.down.visit_ref(f);
        for u in &self.units {
            u.visit_ref(f);
        }
    }
}

/// Per-scale detection head; the final 1x1x1 conv starts at zero so an
/// untrained network emits logit 0 (score 0.5) everywhere.
#[derive(Debug, Clone)]
struct Head<T: Real> {
    block: ConvBlock<T>,
    out: Conv3d<T>,
}

impl<T: Real> Head<T> {
    fn new(name: &str, c_in: usize, hidden: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Head {
            block: ConvBlock::new(&format!("{name}.block"), c_in, hidden, 1, rng),
            out: Conv3d::new(&format!("{name}.out"), hidden, c_out, 1, 1, Init::Zero, rng),
        }
    }

    fn forward(&mut self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let y = self.block.forward(x)?;
        self.out.forward(&y)
    }

    fn backward(&mut self, g: &Tensor5<T>) -> Result<Tensor5<T>> {
        let g = self.out.backward(g)?;
        self.block.backward(&g)
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.block.visit(f);
        f(&mut self.out.w);
        f(&mut self.out.b);
    }

    fn visit_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.block.visit_ref(f);
        f(&self.out.w);
        f(&self.out.b);
    }
}

#[derive(Debug, Clone)]
pub struct Network<T: Real> {
    pub cfg: NetworkConfig,
    stem: ConvBlock<T>,
    stage1: DenseStage<T>,
    stage2: DenseStage<T>,
    stage3: DenseStage<T>,
    lat16: ConvBlock<T>,
    up8: ConvTranspose3d<T>,
    fuse8: ConvBlock<T>,
    up4: ConvTranspose3d<T>,
    fuse4: ConvBlock<T>,
    heads: Vec<Head<T>>,
}

/// Deterministically initialized network from a seed.
pub fn build_network<T: Real>(cfg: &NetworkConfig, rng_seed: u64) -> Result<Network<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let b = cfg.base_channels;
    let [c1, c2, c3] = cfg.stage_channels();
    let fch = cfg.fused_channels();
    let heads = (0..3)
        .map(|l| {
            Head::new(
                &format!("head{l}"),
                fch,
                cfg.head_channels,
                cfg.head_out_channels(),
                &mut rng,
            )
        })
        .collect();
    Ok(Network {
        cfg: *cfg,
        stem: ConvBlock::new("stem", 1, b, 2, &mut rng),
        stage1: DenseStage::new("enc1", b, cfg.blocks_per_stage, cfg.growth, &mut rng),
        stage2: DenseStage::new("enc2", c1, cfg.blocks_per_stage, cfg.growth, &mut rng),
        stage3: DenseStage::new("enc3", c2, cfg.blocks_per_stage, cfg.growth, &mut rng),
        lat16: ConvBlock::new("dec.lat16", c3, fch, 1, &mut rng),
        up8: ConvTranspose3d::new("dec.up8", fch, fch, &mut rng),
        fuse8: ConvBlock::new("dec.fuse8", fch + c2, fch, 1, &mut rng),
        up4: ConvTranspose3d::new("dec.up4", fch, fch, &mut rng),
        fuse4: ConvBlock::new("dec.fuse4", fch + c1, fch, 1, &mut rng),
        heads,
    })
}

impl<T: Real> Network<T> {
    /// Head outputs per level (stride 4, 8, 16). Input must be
    /// single-channel with spatial dims divisible by 16.
    pub fn forward(&mut self, x: &Tensor5<T>) -> Result<Vec<Tensor5<T>>> {
        if x.shape[1] != 1 {
            return Err(Error::Shape(format!(
                "network expects 1 input channel, got {}",
                x.shape[1]
            )));
        }
        for &d in &x.shape[2..] {
            if d == 0 || d % 16 != 0 {
                return Err(Error::Shape(format!(
                    "input spatial dims must be positive multiples of 16, got {:?}",
                    x.spatial()
                )));
            }
        }
        let s = self.stem.forward(x)?;
        let e1 = self.stage1.forward(&s)?;
        let e2 = self.stage2.forward(&e1)?;
        let e3 = self.stage3.forward(&e2)?;
        let f16 = self.lat16.forward(&e3)?;
        let u8t = self.up8.forward(&f16)?;
        let f8 = self.fuse8.forward(&Tensor5::concat_channels(&u8t, &e2)?)?;
        let u4t = self.up4.forward(&f8)?;
        let f4 = self.fuse4.forward(&Tensor5::concat_channels(&u4t, &e1)?)?;
        let h0 = self.heads[0].forward(&f4)?;
        let h1 = self.heads[1].forward(&f8)?;
        let h2 = self.heads[2].forward(&f16)?;
        Ok(vec![h0, h1, h2])
    }

    /// Accumulates parameter gradients from per-head output gradients and
    /// returns the gradient with respect to the input.
    pub fn backward(&mut self, head_grads: &[Tensor5<T>]) -> Result<Tensor5<T>> {
        if head_grads.len() != 3 {
            return Err(Error::Shape(format!(
                "expected 3 head gradients, got {}",
                head_grads.len()
            )));
        }
        let fch = self.cfg.fused_channels();
        let g_f4 = self.heads[0].backward(&head_grads[0])?;
        let g_c4 = self.fuse4.backward(&g_f4)?;
        let (g_u4, g_e1_skip) = g_c4.split_channels(fch)?;
        let mut g_f8 = self.up4.backward(&g_u4)?;
        g_f8.add_assign(&self.heads[1].backward(&head_grads[1])?)?;
        let g_c8 = self.fuse8.backward(&g_f8)?;
        let (g_u8, g_e2_skip) = g_c8.split_channels(fch)?;
        let mut g_f16 = self.up8.backward(&g_u8)?;
        g_f16.add_assign(&self.heads[2].backward(&head_grads[2])?)?;
        let g_e3 = self.lat16.backward(&g_f16)?;
        let mut g_e2 = self.stage3.backward(&g_e3)?;
        g_e2.add_assign(&g_e2_skip)?;
        let mut g_e1 = self.stage2.backward(&g_e2)?;
        g_e1.add_assign(&g_e1_skip)?;
        let g_s = self.stage1.backward(&g_e1)?;
        self.stem.backward(&g_s)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit(f);
        self.stage1.visit(f);
        self.stage2.visit(f);
        self.stage3.visit(f);
        self.lat16.visit(f);
        f(&mut self.up8.w);
        f(&mut self.up8.b);
        self.fuse8.visit(f);
        f(&mut self.up4.w);
        f(&mut self.up4.b);
        self.fuse4.visit(f);
        for h in &mut self.heads {
            h.visit(f);
        }
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem.visit_ref(f);
        self.stage1.visit_ref(f);
        self.stage2.visit_ref(f);
        self.stage3.visit_ref(f);
        self.lat16.visit_ref(f);
        f(&self.up8.w);
        f(&self.up8.b);
        self.fuse8.visit_ref(f);
        f(&self.up4.w);
        f(&self.up4.b);
        self.fuse4.visit_ref(f);
        for h in &self.heads {
            h.visit_ref(f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params_ref(&mut |p| n += p.data.len());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    pub fn scale_grads(&mut self, s: T) {
        self.visit_params(&mut |p| p.grad.iter_mut().for_each(|g| *g *= s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            base_channels: 2,
            blocks_per_stage: 1,
            growth: 2,
            head_channels: 3,
            k_per_point: 1,
        }
    }

    #[test]
    fn shape_contract_per_level() {
        let mut net = build_network::<f32>(&tiny_cfg(), 1).unwrap();
        let x = Tensor5::zeros([1, 1, 32, 16, 48]);
        let heads = net.forward(&x).unwrap();
        assert_eq!(heads[0].shape, [1, 5, 8, 4, 12]);
        assert_eq!(heads[1].shape, [1, 5, 4, 2, 6]);
        assert_eq!(heads[2].shape, [1, 5, 2, 1, 3]);
    }

    #[test]
    fn k3_heads_emit_15_channels() {
        let mut cfg = tiny_cfg();
        cfg.k_per_point = 3;
        let mut net = build_network::<f32>(&cfg, 1).unwrap();
        let heads = net.forward(&Tensor5::zeros([1, 1, 16, 16, 16])).unwrap();
        for h in &heads {
            assert_eq!(h.shape[1], 15);
        }
    }

    #[test]
    fn untrained_logits_are_exactly_zero() {
        let mut net = build_network::<f32>(&tiny_cfg(), 3).unwrap();
        let mut x = Tensor5::zeros([1, 1, 16, 16, 16]);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 13) % 17) as f32 * 0.05;
        }
        let heads = net.forward(&x).unwrap();
        for h in &heads {
            assert!(h.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_network::<f32>(&tiny_cfg(), 42).unwrap();
        let b = build_network::<f32>(&tiny_cfg(), 42).unwrap();
        let c = build_network::<f32>(&tiny_cfg(), 43).unwrap();
        let dump = |n: &Network<f32>| {
            let mut v = Vec::new();
            n.visit_params_ref(&mut |p| v.extend_from_slice(&p.data));
            v
        };
        assert_eq!(dump(&a), dump(&b));
        assert_ne!(dump(&a), dump(&c));
    }

    #[test]
    fn param_names_unique() {
        let net = build_network::<f32>(&tiny_cfg(), 1).unwrap();
        let mut names = Vec::new();
        net.visit_params_ref(&mut |p| names.push(p.name.clone()));
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }

    #[test]
    fn param_count_matches_formula() {
        let cfg = NetworkConfig::default();
        let net = build_network::<f32>(&cfg, 1).unwrap();
        let b = cfg.base_channels;
        let g = cfg.growth;
        let r = cfg.blocks_per_stage;
        let h = cfg.head_channels;
        let f = cfg.fused_channels();
        let [c1, c2, c3] = cfg.stage_channels();
        let conv = |ci: usize, co: usize, k: usize| k * k * k * ci * co + co;
        let block = |ci: usize, co: usize| conv(ci, co, 3) + 2 * co;
        let stage = |cin: usize| -> usize {
            let mut n = block(cin, cin);
            for u in 0..r {
                n += block(cin + u * g, g);
            }
            n
        };
        let head = block(f, h) + conv(h, 5, 1);
        let tconv = 8 * f * f + f;
        let expected = block(1, b)
            + stage(b)
            + stage(c1)
            + stage(c2)
            + block(c3, f)
            + 2 * tconv
            + block(f + c2, f)
            + block(f + c1, f)
            + 3 * head;
        assert_eq!(net.param_count(), expected);
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = build_network::<f32>(&tiny_cfg(), 1).unwrap();
        let g = vec![
            Tensor5::zeros([1, 5, 4, 4, 4]),
            Tensor5::zeros([1, 5, 2, 2, 2]),
            Tensor5::zeros([1, 5, 1, 1, 1]),
        ];
        assert!(net.backward(&g).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_param_grads() {
        let mut net = build_network::<f32>(&tiny_cfg(), 1).unwrap();
        let x = Tensor5::zeros([1, 1, 16, 16, 16]);
        let heads = net.forward(&x).unwrap();
        let grads: Vec<_> = heads.iter().map(|h| Tensor5::zeros(h.shape)).collect();
        net.backward(&grads).unwrap();
        net.visit_params_ref(&mut |p| {
            assert!(p.grad.iter().all(|&v| v == 0.0), "nonzero grad in {}", p.name);
        });
    }

    #[test]
    fn repeated_backward_doubles_grads() {
        let mut net = build_network::<f64>(&tiny_cfg(), 9).unwrap();
        let mut x = Tensor5::zeros([1, 1, 16, 16, 16]);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 7) % 23) as f64 * 0.04;
        }
        let run = |net: &mut Network<f64>, x: &Tensor5<f64>| {
            let heads = net.forward(x).unwrap();
            let grads: Vec<_> = heads
                .iter()
                .map(|h| {
                    let mut g = Tensor5::zeros(h.shape);
                    for (i, v) in g.data.iter_mut().enumerate() {
                        *v = ((i % 5) as f64 - 2.0) * 0.1;
                    }
                    g
                })
                .collect();
            net.backward(&grads).unwrap();
        };
        run(&mut net, &x);
        let mut once = Vec::new();
        net.visit_params_ref(&mut |p| once.extend_from_slice(&p.grad));
        run(&mut net, &x);
        let mut twice = Vec::new();
        net.visit_params_ref(&mut |p| twice.extend_from_slice(&p.grad));
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }
}
