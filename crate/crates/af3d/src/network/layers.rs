//! Network building blocks with explicit reverse-mode gradients.
//!
//! Every layer caches its forward input and releases it on backward. Work
//! is decomposed so each parallel task owns a disjoint output slice and
//! accumulates in a fixed order, making results bit-identical across thread
//! counts and identical to the sequential build.

use crate::error::{Error, Result};
use crate::network::tensor::Tensor5;
use crate::parallel;
use crate::Real;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A named learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            data: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    pub fn kaiming(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut p = Param::zeros(name, shape);
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in &mut p.data {
            *v = T::cast(rng.gen_range(-bound..bound));
        }
        p
    }

    pub fn fill(name: impl Into<String>, shape: Vec<usize>, value: T) -> Self {
        let mut p = Param::zeros(name, shape);
        p.data.iter_mut().for_each(|v| *v = value);
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Kaiming,
    Zero,
}

/// Valid output range `[lo, hi)` such that `o*stride + k_off` stays inside
/// `[0, in_dim)`.
#[inline]
fn out_range(k_off: i64, stride: i64, in_dim: i64, out_dim: i64) -> (usize, usize) {
    let lo = (-k_off + stride - 1).div_euclid(stride).max(0);
    let hi = ((in_dim - 1 - k_off).div_euclid(stride) + 1).min(out_dim);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// 3D convolution with cubic kernel, same-padding for k=3, none for k=1.
#[derive(Debug, Clone)]
pub struct Conv3d<T: Real> {
    pub w: Param<T>,
    pub b: Param<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Tensor5<T>>,
}

impl<T: Real> Conv3d<T> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let pad = if k == 3 { 1 } else { 0 };
        let fan_in = c_in * k * k * k;
        let shape = vec![c_out, c_in, k, k, k];
        let w = match init {
            Init::Kaiming => Param::kaiming(format!("{name}.w"), shape, fan_in, rng),
            Init::Zero => Param::zeros(format!("{name}.w"), shape),
        };
        Conv3d {
            w,
            b: Param::zeros(format!("{name}.b"), vec![c_out]),
            c_in,
            c_out,
            k,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_spatial(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0usize; 3];
        for a in 0..3 {
            out[a] = (input[a] + 2 * self.pad - self.k) / self.stride + 1;
        }
        out
    }

    #[inline]
    fn w_at(&self, co: usize, ci: usize, kz: usize, ky: usize, kx: usize) -> T {
        self.w.data[(((co * self.c_in + ci) * self.k + kz) * self.k + ky) * self.k + kx]
    }

    pub fn forward(&mut self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        if x.shape[1] != self.c_in {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.c_in, x.shape[1]
            )));
        }
        let [zi, yi, xi] = x.spatial();
        let [zo, yo, xo] = self.out_spatial([zi, yi, xi]);
        let n = x.shape[0];
        let mut out = Tensor5::zeros([n, self.c_out, zo, yo, xo]);
        let plane = zo * yo * xo;
        let (s, p, k) = (self.stride as i64, self.pad as i64, self.k);
        let this = &*self;
        parallel::for_each_chunk_mut(&mut out.data, plane, |pi, chunk| {
            let (ni, co) = (pi / this.c_out, pi % this.c_out);
            chunk.iter_mut().for_each(|v| *v = this.b.data[co]);
            for ci in 0..this.c_in {
                let xin = x.plane(ni, ci);
                for kz in 0..k {
                    let (zl, zh) = out_range(kz as i64 - p, s, zi as i64, zo as i64);
                    for ky in 0..k {
                        let (yl, yh) = out_range(ky as i64 - p, s, yi as i64, yo as i64);
                        for kx in 0..k {
                            let (xl, xh) = out_range(kx as i64 - p, s, xi as i64, xo as i64);
                            let ws = this.w_at(co, ci, kz, ky, kx);
                            if ws == T::zero() {
                                continue;
                            }
                            for oz in zl..zh {
                                let iz = (oz as i64 * s + kz as i64 - p) as usize;
                                for oy in yl..yh {
                                    let iy = (oy as i64 * s + ky as i64 - p) as usize;
                                    let irow = &xin[(iz * yi + iy) * xi..(iz * yi + iy + 1) * xi];
                                    let orow = &mut chunk[(oz * yo + oy) * xo..(oz * yo + oy + 1) * xo];
                                    let base = kx as i64 - p;
                                    for (ox, ov) in
                                        orow.iter_mut().enumerate().take(xh).skip(xl)
                                    {
                                        let ix = (ox as i64 * s + base) as usize;
                                        *ov += ws * irow[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, gout: &Tensor5<T>) -> Result<Tensor5<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Train("conv backward without forward".into()))?;
        let [zi, yi, xi] = x.spatial();
        let [zo, yo, xo] = gout.spatial();
        let n = x.shape[0];
        if gout.shape[0] != n || gout.shape[1] != self.c_out {
            return Err(Error::Shape("conv backward shape mismatch".into()));
        }
        let (s, p, k) = (self.stride as i64, self.pad as i64, self.k);

        let mut gin = Tensor5::zeros(x.shape);
        let in_plane = zi * yi * xi;
        let this = &*self;
        parallel::for_each_chunk_mut(&mut gin.data, in_plane, |pi, chunk| {
            let (ni, ci) = (pi / this.c_in, pi % this.c_in);
            for co in 0..this.c_out {
                let gplane = gout.plane(ni, co);
                for kz in 0..k {
                    let (zl, zh) = out_range(kz as i64 - p, s, zi as i64, zo as i64);
                    for ky in 0..k {
                        let (yl, yh) = out_range(ky as i64 - p, s, yi as i64, yo as i64);
                        for kx in 0..k {
                            let (xl, xh) = out_range(kx as i64 - p, s, xi as i64, xo as i64);
                            let ws = this.w_at(co, ci, kz, ky, kx);
                            if ws == T::zero() {
                                continue;
                            }
                            for oz in zl..zh {
                                let iz = (oz as i64 * s + kz as i64 - p) as usize;
                                for oy in yl..yh {
                                    let iy = (oy as i64 * s + ky as i64 - p) as usize;
                                    let grow = &gplane[(oz * yo + oy) * xo..(oz * yo + oy + 1) * xo];
                                    let base = kx as i64 - p;
                                    for (ox, &gv) in
                                        grow.iter().enumerate().take(xh).skip(xl)
                                    {
                                        let ix = (iz * yi + iy) * xi
                                            + (ox as i64 * s + base) as usize;
                                        chunk[ix] += ws * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

        let wslice = self.c_in * k * k * k;
        let c_in = self.c_in;
        parallel::for_each_chunk_mut(&mut self.w.grad, wslice, |co, wg| {
            for ni in 0..n {
                let gplane = gout.plane(ni, co);
                for ci in 0..c_in {
                    let xin = x.plane(ni, ci);
                    for kz in 0..k {
                        let (zl, zh) = out_range(kz as i64 - p, s, zi as i64, zo as i64);
                        for ky in 0..k {
                            let (yl, yh) = out_range(ky as i64 - p, s, yi as i64, yo as i64);
                            for kx in 0..k {
                                let (xl, xh) = out_range(kx as i64 - p, s, xi as i64, xo as i64);
                                let mut acc = T::zero();
                                for oz in zl..zh {
                                    let iz = (oz as i64 * s + kz as i64 - p) as usize;
                                    for oy in yl..yh {
                                        let iy = (oy as i64 * s + ky as i64 - p) as usize;
                                        let irow =
                                            &xin[(iz * yi + iy) * xi..(iz * yi + iy + 1) * xi];
                                        let grow = &gplane
                                            [(oz * yo + oy) * xo..(oz * yo + oy + 1) * xo];
                                        let base = kx as i64 - p;
                                        for (ox, &gv) in
                                            grow.iter().enumerate().take(xh).skip(xl)
                                        {
                                            let ix = (ox as i64 * s + base) as usize;
                                            acc += irow[ix] * gv;
                                        }
                                    }
                                }
                                wg[((ci * k + kz) * k + ky) * k + kx] += acc;
                            }
                        }
                    }
                }
            }
        });

        for co in 0..self.c_out {
            let mut acc = T::zero();
            for ni in 0..n {
                for &gv in gout.plane(ni, co) {
                    acc += gv;
                }
            }
            self.b.grad[co] += acc;
        }
        Ok(gin)
    }
}

/// Transposed 3D convolution, kernel 2, stride 2: exact 2x upsampling.
///
/// With these sizes every output voxel has exactly one contributing input
/// voxel per channel, so forward and backward are plain gathers.
#[derive(Debug, Clone)]
pub struct ConvTranspose3d<T: Real> {
    /// Layout `[c_in, c_out, 2, 2, 2]`.
    pub w: Param<T>,
    pub b: Param<T>,
    pub c_in: usize,
    pub c_out: usize,
    cache: Option<Tensor5<T>>,
}

impl<T: Real> ConvTranspose3d<T> {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = c_in * 8;
        ConvTranspose3d {
            w: Param::kaiming(format!("{name}.w"), vec![c_in, c_out, 2, 2, 2], fan_in, rng),
            b: Param::zeros(format!("{name}.b"), vec![c_out]),
            c_in,
            c_out,
            cache: None,
        }
    }

    #[inline]
    fn w_at(&self, ci: usize, co: usize, az: usize, ay: usize, ax: usize) -> T {
        self.w.data[(((ci * self.c_out + co) * 2 + az) * 2 + ay) * 2 + ax]
    }

    pub fn forward(&mut self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        if x.shape[1] != self.c_in {
            return Err(Error::Shape(format!(
                "tconv expects {} input channels, got {}",
                self.c_in, x.shape[1]
            )));
        }
        let [zi, yi, xi] = x.spatial();
        let (zo, yo, xo) = (zi * 2, yi * 2, xi * 2);
        let n = x.shape[0];
        let mut out = Tensor5::zeros([n, self.c_out, zo, yo, xo]);
        let plane = zo * yo * xo;
        let this = &*self;
        parallel::for_each_chunk_mut(&mut out.data, plane, |pi, chunk| {
            let (ni, co) = (pi / this.c_out, pi % this.c_out);
            for oz in 0..zo {
                let (iz, az) = (oz / 2, oz % 2);
                for oy in 0..yo {
                    let (iy, ay) = (oy / 2, oy % 2);
                    for ox in 0..xo {
                        let (ix, ax) = (ox / 2, ox % 2);
                        let mut acc = this.b.data[co];
                        for ci in 0..this.c_in {
                            acc += x.at(ni, ci, iz, iy, ix) * this.w_at(ci, co, az, ay, ax);
                        }
                        chunk[(oz * yo + oy) * xo + ox] = acc;
                    }
                }
            }
        });
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, gout: &Tensor5<T>) -> Result<Tensor5<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Train("tconv backward without forward".into()))?;
        let [zi, yi, xi] = x.spatial();
        let n = x.shape[0];
        if gout.spatial() != [zi * 2, yi * 2, xi * 2] || gout.shape[1] != self.c_out {
            return Err(Error::Shape("tconv backward shape mismatch".into()));
        }

        let mut gin = Tensor5::zeros(x.shape);
        let in_plane = zi * yi * xi;
        let this = &*self;
        parallel::for_each_chunk_mut(&mut gin.data, in_plane, |pi, chunk| {
            let (ni, ci) = (pi / this.c_in, pi % this.c_in);
            for iz in 0..zi {
                for iy in 0..yi {
                    for ix in 0..xi {
                        let mut acc = T::zero();
                        for co in 0..this.c_out {
                            for az in 0..2 {
                                for ay in 0..2 {
                                    for ax in 0..2 {
                                        acc += gout.at(ni, co, iz * 2 + az, iy * 2 + ay, ix * 2 + ax)
                                            * this.w_at(ci, co, az, ay, ax);
                                    }
                                }
                            }
                        }
                        chunk[(iz * yi + iy) * xi + ix] = acc;
                    }
                }
            }
        });

        let wslice = self.c_out * 8;
        let c_out = self.c_out;
        parallel::for_each_chunk_mut(&mut self.w.grad, wslice, |ci, wg| {
            for ni in 0..n {
                let xin = x.plane(ni, ci);
                for co in 0..c_out {
                    for az in 0..2 {
                        for ay in 0..2 {
                            for ax in 0..2 {
                                let mut acc = T::zero();
                                for iz in 0..zi {
                                    for iy in 0..yi {
                                        for ix in 0..xi {
                                            acc += xin[(iz * yi + iy) * xi + ix]
                                                * gout.at(
                                                    ni,
                                                    co,
                                                    iz * 2 + az,
                                                    iy * 2 + ay,
                                                    ix * 2 + ax,
                                                );
                                        }
                                    }
                                }
                                wg[((co * 2 + az) * 2 + ay) * 2 + ax] += acc;
                            }
                        }
                    }
                }
            }
        });

        for co in 0..self.c_out {
            let mut acc = T::zero();
            for ni in 0..n {
                for &gv in gout.plane(ni, co) {
                    acc += gv;
                }
            }
            self.b.grad[co] += acc;
        }
        Ok(gin)
    }
}

/// Per-channel normalization over the spatial extent of each sample.
///
/// Statistics are computed per `(sample, channel)`, so behavior does not
/// depend on batch composition. With `fixed_stats` the layer skips the
/// statistics and applies only the learned affine map.
#[derive(Debug, Clone)]
pub struct ChannelNorm<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
    pub fixed_stats: bool,
    cache: Option<NormCache<T>>,
}

#[derive(Debug, Clone)]
struct NormCache<T> {
    xhat: Tensor5<T>,
    inv: Vec<T>,
    fixed_input: Option<Tensor5<T>>,
}

impl<T: Real> ChannelNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        ChannelNorm {
            gamma: Param::fill(format!("{name}.gamma"), vec![channels], T::one()),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            eps: 1e-5,
            fixed_stats: false,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let c = self.gamma.data.len();
        if x.shape[1] != c {
            return Err(Error::Shape(format!(
                "norm expects {} channels, got {}",
                c,
                x.shape[1]
            )));
        }
        let n = x.shape[0];
        let plane = x.plane_len();
        let mut out = Tensor5::zeros(x.shape);
        if self.fixed_stats {
            for ni in 0..n {
                for ci in 0..c {
                    let xin = x.plane(ni, ci);
                    let dst = (ni * c + ci) * plane;
                    for (i, &v) in xin.iter().enumerate() {
                        out.data[dst + i] = self.gamma.data[ci] * v + self.beta.data[ci];
                    }
                }
            }
            self.cache = Some(NormCache {
                xhat: Tensor5::zeros([0, 0, 0, 0, 0]),
                inv: Vec::new(),
                fixed_input: Some(x.clone()),
            });
            return Ok(out);
        }
        let mut xhat = Tensor5::zeros(x.shape);
        let mut inv = vec![T::zero(); n * c];
        let m = T::cast(plane as f64);
        let eps = T::cast(self.eps);
        {
            let gamma = &self.gamma.data;
            let beta = &self.beta.data;
            for ni in 0..n {
                for ci in 0..c {
                    let xin = x.plane(ni, ci);
                    let mut mean = T::zero();
                    for &v in xin {
                        mean += v;
                    }
                    mean = mean / m;
                    let mut var = T::zero();
                    for &v in xin {
                        let d = v - mean;
                        var += d * d;
                    }
                    var = var / m;
                    let iv = T::one() / (var + eps).sqrt();
                    inv[ni * c + ci] = iv;
                    let dst = (ni * c + ci) * plane;
                    for (i, &v) in xin.iter().enumerate() {
                        let h = (v - mean) * iv;
                        xhat.data[dst + i] = h;
                        out.data[dst + i] = gamma[ci] * h + beta[ci];
                    }
                }
            }
        }
        self.cache = Some(NormCache {
            xhat,
            inv,
            fixed_input: None,
        });
        Ok(out)
    }

    pub fn backward(&mut self, gout: &Tensor5<T>) -> Result<Tensor5<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Train("norm backward without forward".into()))?;
        let c = self.gamma.data.len();
        let n = gout.shape[0];
        let plane = gout.plane_len();
        let mut gin = Tensor5::zeros(gout.shape);
        if let Some(xin) = cache.fixed_input {
            for ni in 0..n {
                for ci in 0..c {
                    let g = gout.plane(ni, ci);
                    let xv = xin.plane(ni, ci);
                    let dst = (ni * c + ci) * plane;
                    let mut gg = T::zero();
                    let mut gb = T::zero();
                    for i in 0..plane {
                        gg += g[i] * xv[i];
                        gb += g[i];
                        gin.data[dst + i] = self.gamma.data[ci] * g[i];
                    }
                    self.gamma.grad[ci] += gg;
                    self.beta.grad[ci] += gb;
                }
            }
            return Ok(gin);
        }
        let m = T::cast(plane as f64);
        for ni in 0..n {
            for ci in 0..c {
                let g = gout.plane(ni, ci);
                let h = cache.xhat.plane(ni, ci);
                let iv = cache.inv[ni * c + ci];
                let mut sum_g = T::zero();
                let mut sum_gh = T::zero();
                for i in 0..plane {
                    sum_g += g[i];
                    sum_gh += g[i] * h[i];
                }
                self.gamma.grad[ci] += sum_gh;
                self.beta.grad[ci] += sum_g;
                let mean_g = sum_g / m;
                let mean_gh = sum_gh / m;
                let scale = self.gamma.data[ci] * iv;
                let dst = (ni * c + ci) * plane;
                for i in 0..plane {
                    gin.data[dst + i] = scale * (g[i] - mean_g - h[i] * mean_gh);
                }
            }
        }
        Ok(gin)
    }
}

/// Rectified linear activation.
#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    cache: Option<Vec<T>>,
}

impl<T: Real> Relu<T> {
    pub fn new() -> Self {
        Relu { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor5<T>) -> Tensor5<T> {
        let mut out = x.clone();
        for v in &mut out.data {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        self.cache = Some(x.data.clone());
        out
    }

    pub fn backward(&mut self, gout: &Tensor5<T>) -> Result<Tensor5<T>> {
        let xin = self
            .cache
            .take()
            .ok_or_else(|| Error::Train("relu backward without forward".into()))?;
        let mut gin = gout.clone();
        for (g, &v) in gin.data.iter_mut().zip(&xin) {
            if v <= T::zero() {
                *g = T::zero();
            }
        }
        Ok(gin)
    }
}
