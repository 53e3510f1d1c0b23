//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Every layer follows the same contract: `forward` stores whatever the
//! backward pass needs, `backward` consumes the cache, accumulates parameter
//! gradients and returns the gradient with respect to the layer input.

use rand_chacha::ChaCha8Rng;

use super::param::{join, Param, Parameterized};
use super::tensor::{gemm, Tensor};

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Square-kernel convolution, stride 1, "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(
            kernel % 2 == 1,
            "only odd kernels keep 'same' padding symmetric"
        );
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::fan_in_uniform(
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            6.0,
            rng,
        );
        let bias = bias.then(|| Param::zeros(&[out_channels]));
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
            cache: None,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, col: &mut [f32]) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        for ci in 0..self.in_channels {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    let dx = kx as isize - pad;
                    let dy = ky as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        let out_row = &mut dst[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                        out_row[..x_lo].fill(0.0);
                        let s0 = (x_lo as isize + dx) as usize;
                        out_row[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                        out_row[x_hi..].fill(0.0);
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], h: usize, w: usize, x: &mut [f32]) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        for ci in 0..self.in_channels {
            let plane = &mut x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * hw..(row + 1) * hw];
                    let dx = kx as isize - pad;
                    let dy = ky as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s0 = (x_lo as isize + dx) as usize;
                        let dst =
                            &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                        for (d, s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels, "conv input channels");
        let hw = h * w;
        let kk = self.patch_len();
        let mut out = Tensor::zeros(&[n, self.out_channels, h, w]);
        let mut col = if self.kernel == 1 {
            Vec::new()
        } else {
            vec![0.0; kk * hw]
        };
        for i in 0..n {
            let xi = x.item(i);
            let src: &[f32] = if self.kernel == 1 {
                xi
            } else {
                self.im2col(xi, h, w, &mut col);
                &col
            };
            let yi = out.item_mut(i);
            gemm(
                self.out_channels,
                kk,
                hw,
                &self.weight.value,
                false,
                src,
                false,
                yi,
                0.0,
            );
            if let Some(b) = &self.bias {
                for (co, bv) in b.value.iter().enumerate() {
                    for v in &mut yi[co * hw..(co + 1) * hw] {
                        *v += *bv;
                    }
                }
            }
        }
        if train {
            self.cache = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self
            .cache
            .take()
            .expect("conv backward without cached forward");
        let (n, _, h, w) = x.dims4();
        let hw = h * w;
        let kk = self.patch_len();
        let mut dx = Tensor::zeros(&x.shape);
        let mut col = if self.kernel == 1 {
            Vec::new()
        } else {
            vec![0.0; kk * hw]
        };
        let mut dcol = vec![0.0; kk * hw];
        for i in 0..n {
            let dyi = dy.item(i);
            let src: &[f32] = if self.kernel == 1 {
                x.item(i)
            } else {
                self.im2col(x.item(i), h, w, &mut col);
                &col
            };
            gemm(
                self.out_channels,
                hw,
                kk,
                dyi,
                false,
                src,
                true,
                &mut self.weight.grad,
                1.0,
            );
            if let Some(b) = &mut self.bias {
                for co in 0..self.out_channels {
                    b.grad[co] += dyi[co * hw..(co + 1) * hw].iter().sum::<f32>();
                }
            }
            if self.kernel == 1 {
                gemm(
                    kk,
                    self.out_channels,
                    hw,
                    &self.weight.value,
                    true,
                    dyi,
                    false,
                    dx.item_mut(i),
                    0.0,
                );
            } else {
                gemm(
                    kk,
                    self.out_channels,
                    hw,
                    &self.weight.value,
                    true,
                    dyi,
                    false,
                    &mut dcol,
                    0.0,
                );
                self.col2im(&dcol, h, w, dx.item_mut(i));
            }
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Group normalization with a per-channel affine transform. Statistics are
/// per sample, so train and inference behave identically.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub eps: f32,
    pub gamma: Param,
    pub beta: Param,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(
            groups > 0 && channels.is_multiple_of(groups),
            "channels must divide into groups"
        );
        Self {
            groups,
            channels,
            eps: 1e-5,
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels);
        let hw = h * w;
        let per = c / self.groups * hw;
        let mut xhat = Tensor::zeros(&x.shape);
        let mut inv_stds = Vec::with_capacity(n * self.groups);
        for i in 0..n {
            let xi = x.item(i);
            let oi = xhat.item_mut(i);
            for g in 0..self.groups {
                let seg = &xi[g * per..(g + 1) * per];
                let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
                let var = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
                let inv = 1.0 / (var + self.eps as f64).sqrt();
                for (o, &v) in oi[g * per..(g + 1) * per].iter_mut().zip(seg) {
                    *o = ((v as f64 - mean) * inv) as f32;
                }
                inv_stds.push(inv as f32);
            }
        }
        let mut out = xhat.clone();
        for i in 0..n {
            let oi = out.item_mut(i);
            for ch in 0..c {
                let (gm, bt) = (self.gamma.value[ch], self.beta.value[ch]);
                for v in &mut oi[ch * hw..(ch + 1) * hw] {
                    *v = *v * gm + bt;
                }
            }
        }
        if train {
            self.cache = Some((xhat, inv_stds));
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, inv_stds) = self.cache.take().expect("groupnorm backward without cache");
        let (n, c, h, w) = xhat.dims4();
        let hw = h * w;
        let cpg = c / self.groups;
        let per = cpg * hw;
        let mut dx = Tensor::zeros(&xhat.shape);
        let mut dxhat = vec![0.0f32; per];
        for i in 0..n {
            let dyi = dy.item(i);
            let xi = xhat.item(i);
            for ch in 0..c {
                let (d, xh) = (&dyi[ch * hw..(ch + 1) * hw], &xi[ch * hw..(ch + 1) * hw]);
                self.gamma.grad[ch] += d.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>();
                self.beta.grad[ch] += d.iter().sum::<f32>();
            }
            let dxi = dx.item_mut(i);
            for g in 0..self.groups {
                let inv = inv_stds[i * self.groups + g] as f64;
                for (j, slot) in dxhat.iter_mut().enumerate() {
                    let ch = g * cpg + j / hw;
                    *slot = dyi[g * per + j] * self.gamma.value[ch];
                }
                let xh = &xi[g * per..(g + 1) * per];
                let sum_d: f64 = dxhat.iter().map(|&v| v as f64).sum();
                let sum_dx: f64 = dxhat
                    .iter()
                    .zip(xh)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                let m = per as f64;
                for (j, o) in dxi[g * per..(g + 1) * per].iter_mut().enumerate() {
                    *o = (inv / m * (m * dxhat[j] as f64 - sum_d - xh[j] as f64 * sum_dx)) as f32;
                }
            }
        }
        dx
    }
}

impl Parameterized for GroupNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut out = x.clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if train {
            self.cache = Some(out.clone());
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let out = self.cache.take().expect("relu backward without cache");
        let mut dx = dy.clone();
        for (d, o) in dx.data.iter_mut().zip(&out.data) {
            if *o <= 0.0 {
                *d = 0.0;
            }
        }
        dx
    }
}

/// 2×2 average pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct AvgPool2;

impl AvgPool2 {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "avg pool needs even spatial size, got {h}x{w}"
        );
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        for (plane_in, plane_out) in x.data.chunks(h * w).zip(out.data.chunks_mut(ho * wo)) {
            for y in 0..ho {
                for xx in 0..wo {
                    let a = plane_in[2 * y * w + 2 * xx];
                    let b = plane_in[2 * y * w + 2 * xx + 1];
                    let cc = plane_in[(2 * y + 1) * w + 2 * xx];
                    let d = plane_in[(2 * y + 1) * w + 2 * xx + 1];
                    plane_out[y * wo + xx] = 0.25 * (a + b + cc + d);
                }
            }
        }
        out
    }

    pub fn backward(&self, dy: &Tensor) -> Tensor {
        let (n, c, ho, wo) = dy.dims4();
        let (h, w) = (ho * 2, wo * 2);
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        for (plane_out, plane_in) in dy.data.chunks(ho * wo).zip(dx.data.chunks_mut(h * w)) {
            for y in 0..ho {
                for xx in 0..wo {
                    let g = 0.25 * plane_out[y * wo + xx];
                    plane_in[2 * y * w + 2 * xx] = g;
                    plane_in[2 * y * w + 2 * xx + 1] = g;
                    plane_in[(2 * y + 1) * w + 2 * xx] = g;
                    plane_in[(2 * y + 1) * w + 2 * xx + 1] = g;
                }
            }
        }
        dx
    }
}

/// Mean over spatial positions: (N,C,H,W) -> (N,C).
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = (h * w) as f32;
    let data = x
        .data
        .chunks(h * w)
        .map(|p| p.iter().sum::<f32>() / hw)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c) = dy.dims2();
    let hw = (h * w) as f32;
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for (g, plane) in dy.data.iter().zip(dx.data.chunks_mut(h * w)) {
        plane.fill(g / hw);
    }
    dx
}

/// Fully connected layer: y = x Wᵀ + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::fan_in_uniform(&[out_features, in_features], in_features, 1.0, rng),
            bias: Param::zeros(&[out_features]),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, f) = x.dims2();
        assert_eq!(f, self.in_features, "linear input features");
        let mut out = Tensor::zeros(&[n, self.out_features]);
        gemm(
            n,
            f,
            self.out_features,
            &x.data,
            false,
            &self.weight.value,
            true,
            &mut out.data,
            0.0,
        );
        for row in out.data.chunks_mut(self.out_features) {
            for (v, b) in row.iter_mut().zip(&self.bias.value) {
                *v += *b;
            }
        }
        if train {
            self.cache = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("linear backward without cache");
        let (n, f) = x.dims2();
        gemm(
            self.out_features,
            n,
            f,
            &dy.data,
            true,
            &x.data,
            false,
            &mut self.weight.grad,
            1.0,
        );
        for row in dy.data.chunks(self.out_features) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += *d;
            }
        }
        let mut dx = Tensor::zeros(&[n, f]);
        gemm(
            n,
            self.out_features,
            f,
            &dy.data,
            false,
            &self.weight.value,
            false,
            &mut dx.data,
            0.0,
        );
        dx
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Bilinear 2× upsampling of every plane.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for (src, dst) in x.data.chunks(h * w).zip(out.data.chunks_mut(4 * h * w)) {
        dst.copy_from_slice(&super::resize::resize_plane_f32(src, h, w, 2 * h, 2 * w));
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (n, c, h2, w2) = dy.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for (g, dst) in dy.data.chunks(h2 * w2).zip(dx.data.chunks_mut(h * w)) {
        super::resize::resize_plane_adjoint_f32(g, h, w, h2, w2, dst);
    }
    dx
}
