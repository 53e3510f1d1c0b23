//! Optional mechanism blocks.
//!
//! * [`Dpe`]: teacher-side spatial reweighting. A 1×1 convolution reduces the
//!   channels to a single logit map, a sigmoid turns it into a mask, and the
//!   input is multiplied by the mask broadcast over channels.
//! * [`Mhra`]: teacher-side attention with a retain gate. Spatial sites are
//!   tokens; one multi-head self-attention layer produces an attended map and
//!   a per-channel sigmoid gate mixes it with the unchanged input.
//! * [`Dfpn`]: student-side three-scale top-down fusion. Each scale is
//!   projected to a common width, coarse maps are upsampled 2× and added to
//!   the next finer map, and one 3×3 convolution smooths the result.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{sigmoid, upsample2, upsample2_backward};
use crate::nn::param::{join, Param, Parameterized};
use crate::nn::{Conv2d, Linear, Tensor};

#[derive(Debug, Clone)]
pub struct Dpe {
    pub proj: Conv2d,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl Dpe {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            proj: Conv2d::new(channels, 1, 1, true, rng),
            cache: None,
        }
    }

    /// The sigmoid mask, shape (N, 1, H, W).
    pub fn mask(&mut self, x: &Tensor) -> Tensor {
        let mut m = self.proj.forward(x, false);
        for v in &mut m.data {
            *v = sigmoid(*v);
        }
        m
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut logits = self.proj.forward(x, train);
        for v in &mut logits.data {
            *v = sigmoid(*v);
        }
        let mask = logits.data;
        let mut out = x.clone();
        for i in 0..n {
            let m = &mask[i * hw..(i + 1) * hw];
            let oi = out.item_mut(i);
            for ch in 0..c {
                for (v, mv) in oi[ch * hw..(ch + 1) * hw].iter_mut().zip(m) {
                    *v *= *mv;
                }
            }
        }
        if train {
            self.cache = Some((x.clone(), mask));
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (x, mask) = self.cache.take().expect("dpe backward without cache");
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut dx = dy.clone();
        let mut dlogit = Tensor::zeros(&[n, 1, h, w]);
        for i in 0..n {
            let m = &mask[i * hw..(i + 1) * hw];
            let (xi, dyi) = (x.item(i), dy.item(i));
            let dl = dlogit.item_mut(i);
            for ch in 0..c {
                for s in 0..hw {
                    dl[s] += dyi[ch * hw + s] * xi[ch * hw + s];
                }
            }
            for s in 0..hw {
                dl[s] *= m[s] * (1.0 - m[s]);
            }
            let dxi = dx.item_mut(i);
            for ch in 0..c {
                for (d, mv) in dxi[ch * hw..(ch + 1) * hw].iter_mut().zip(m) {
                    *d *= *mv;
                }
            }
        }
        dx.add_assign(&self.proj.backward(&dlogit));
        dx
    }
}

impl Parameterized for Dpe {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

struct MhraCache {
    x: Tensor,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    attn: Vec<f32>,
    y: Vec<f32>,
}

pub struct Mhra {
    pub channels: usize,
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    /// Per-channel retain-gate logits; g = sigmoid(gate).
    pub gate: Param,
    cache: Option<MhraCache>,
}

impl std::fmt::Debug for Mhra {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mhra")
            .field("channels", &self.channels)
            .field("heads", &self.heads)
            .finish()
    }
}

/// (N,C,H,W) -> (N·H·W, C) token rows.
fn to_tokens(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let l = h * w;
    let mut t = Tensor::zeros(&[n * l, c]);
    for i in 0..n {
        let xi = x.item(i);
        for ch in 0..c {
            for s in 0..l {
                t.data[(i * l + s) * c + ch] = xi[ch * l + s];
            }
        }
    }
    t
}

impl Mhra {
    pub fn new(channels: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(
            channels.is_multiple_of(heads),
            "channels must split evenly across heads"
        );
        Self {
            channels,
            heads,
            query: Linear::new(channels, channels, rng),
            key: Linear::new(channels, channels, rng),
            value: Linear::new(channels, channels, rng),
            output: Linear::new(channels, channels, rng),
            gate: Param::zeros(&[channels]),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels, "mhra channels");
        let l = h * w;
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let tokens = to_tokens(x);
        let q = self.query.forward(&tokens, train).data;
        let k = self.key.forward(&tokens, train).data;
        let v = self.value.forward(&tokens, train).data;

        let mut attn = vec![0.0f32; n * self.heads * l * l];
        let mut mixed = Tensor::zeros(&[n * l, c]);
        for i in 0..n {
            for hd in 0..self.heads {
                let a = &mut attn[(i * self.heads + hd) * l * l..(i * self.heads + hd + 1) * l * l];
                for r in 0..l {
                    let qr = &q[(i * l + r) * c + hd * dh..(i * l + r) * c + (hd + 1) * dh];
                    let row = &mut a[r * l..(r + 1) * l];
                    let mut max = f32::NEG_INFINITY;
                    for (m, slot) in row.iter_mut().enumerate() {
                        let km = &k[(i * l + m) * c + hd * dh..(i * l + m) * c + (hd + 1) * dh];
                        let s = qr.iter().zip(km).map(|(a, b)| a * b).sum::<f32>() * scale;
                        *slot = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for slot in row.iter_mut() {
                        *slot = (*slot - max).exp();
                        z += *slot;
                    }
                    for slot in row.iter_mut() {
                        *slot /= z;
                    }
                    let out =
                        &mut mixed.data[(i * l + r) * c + hd * dh..(i * l + r) * c + (hd + 1) * dh];
                    for (m, &p) in row.iter().enumerate() {
                        let vm = &v[(i * l + m) * c + hd * dh..(i * l + m) * c + (hd + 1) * dh];
                        for (o, vv) in out.iter_mut().zip(vm) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let y = self.output.forward(&mixed, train).data;
        let g: Vec<f32> = self.gate.value.iter().map(|&z| sigmoid(z)).collect();
        let mut out = Tensor::zeros(&x.shape);
        for i in 0..n {
            let xi = x.item(i);
            let oi = out.item_mut(i);
            for ch in 0..c {
                for s in 0..l {
                    let yv = y[(i * l + s) * c + ch];
                    oi[ch * l + s] = g[ch] * yv + (1.0 - g[ch]) * xi[ch * l + s];
                }
            }
        }
        if train {
            self.cache = Some(MhraCache {
                x: x.clone(),
                q,
                k,
                v,
                attn,
                y,
            });
        }
        out
    }

    pub fn backward(&mut self, dout: &Tensor) -> Tensor {
        let MhraCache {
            x,
            q,
            k,
            v,
            attn,
            y,
        } = self.cache.take().expect("mhra backward without cache");
        let (n, c, h, w) = x.dims4();
        let l = h * w;
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let g: Vec<f32> = self.gate.value.iter().map(|&z| sigmoid(z)).collect();

        let mut dx = Tensor::zeros(&x.shape);
        let mut dy = Tensor::zeros(&[n * l, c]);
        for i in 0..n {
            let (xi, di) = (x.item(i), dout.item(i));
            let dxi = dx.item_mut(i);
            for ch in 0..c {
                let mut dgate = 0.0;
                for s in 0..l {
                    let d = di[ch * l + s];
                    let yv = y[(i * l + s) * c + ch];
                    dy.data[(i * l + s) * c + ch] = g[ch] * d;
                    dxi[ch * l + s] = (1.0 - g[ch]) * d;
                    dgate += d * (yv - xi[ch * l + s]);
                }
                self.gate.grad[ch] += dgate * g[ch] * (1.0 - g[ch]);
            }
        }
        let dmixed = self.output.backward(&dy).data;

        let mut dq = Tensor::zeros(&[n * l, c]);
        let mut dk = Tensor::zeros(&[n * l, c]);
        let mut dv = Tensor::zeros(&[n * l, c]);
        let mut da = vec![0.0f32; l];
        for i in 0..n {
            for hd in 0..self.heads {
                let a = &attn[(i * self.heads + hd) * l * l..(i * self.heads + hd + 1) * l * l];
                let span =
                    |row: usize| (i * l + row) * c + hd * dh..(i * l + row) * c + (hd + 1) * dh;
                for r in 0..l {
                    let dor = &dmixed[span(r)];
                    let arow = &a[r * l..(r + 1) * l];
                    for m in 0..l {
                        let vm = &v[span(m)];
                        da[m] = dor.iter().zip(vm).map(|(p, q)| p * q).sum();
                        let dvm = &mut dv.data[span(m)];
                        for (o, d) in dvm.iter_mut().zip(dor) {
                            *o += arow[m] * d;
                        }
                    }
                    let dot: f32 = da.iter().zip(arow).map(|(p, q)| p * q).sum();
                    for m in 0..l {
                        let ds = arow[m] * (da[m] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let km = &k[span(m)];
                        let qr = &q[span(r)];
                        let dqr = &mut dq.data[span(r)];
                        for (o, kv) in dqr.iter_mut().zip(km) {
                            *o += ds * kv;
                        }
                        let dkm = &mut dk.data[span(m)];
                        for (o, qv) in dkm.iter_mut().zip(qr) {
                            *o += ds * qv;
                        }
                    }
                }
            }
        }
        let mut dtok = self.query.backward(&dq);
        dtok.add_assign(&self.key.backward(&dk));
        dtok.add_assign(&self.value.backward(&dv));
        for i in 0..n {
            let dxi = dx.item_mut(i);
            for ch in 0..c {
                for s in 0..l {
                    dxi[ch * l + s] += dtok.data[(i * l + s) * c + ch];
                }
            }
        }
        dx
    }
}

impl Parameterized for Mhra {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
        f(&join(prefix, "gate"), &self.gate);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
        f(&join(prefix, "gate"), &mut self.gate);
    }
}

/// Three-scale top-down fusion. All convolutions are bias-free.
#[derive(Debug, Clone)]
pub struct Dfpn {
    pub width: usize,
    pub proj_coarse: Conv2d,
    pub proj_mid: Conv2d,
    pub proj_fine: Conv2d,
    pub smooth: Conv2d,
}

impl Dfpn {
    pub fn new(coarse: usize, mid: usize, fine: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            width,
            proj_coarse: Conv2d::new(coarse, width, 1, false, rng),
            proj_mid: Conv2d::new(mid, width, 1, false, rng),
            proj_fine: Conv2d::new(fine, width, 1, false, rng),
            smooth: Conv2d::new(width, width, 3, false, rng),
        }
    }

    pub fn forward(
        &mut self,
        coarse: &Tensor,
        mid: &Tensor,
        fine: &Tensor,
        train: bool,
    ) -> Result<Tensor> {
        let (_, _, hc, wc) = coarse.dims4();
        let (_, _, hm, wm) = mid.dims4();
        let (_, _, hf, wf) = fine.dims4();
        if hm != 2 * hc || wm != 2 * wc || hf != 2 * hm || wf != 2 * wm {
            return Err(Error::Shape(format!(
                "fusion scales must double: got {hc}x{wc}, {hm}x{wm}, {hf}x{wf}"
            )));
        }
        let pc = self.proj_coarse.forward(coarse, train);
        let mut t1 = upsample2(&pc);
        t1.add_assign(&self.proj_mid.forward(mid, train));
        let mut t2 = upsample2(&t1);
        t2.add_assign(&self.proj_fine.forward(fine, train));
        Ok(self.smooth.forward(&t2, train))
    }

    /// Returns gradients for (coarse, mid, fine).
    pub fn backward(&mut self, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
        let dt2 = self.smooth.backward(dout);
        let dfine = self.proj_fine.backward(&dt2);
        let dt1 = upsample2_backward(&dt2);
        let dmid = self.proj_mid.backward(&dt1);
        let dpc = upsample2_backward(&dt1);
        let dcoarse = self.proj_coarse.backward(&dpc);
        (dcoarse, dmid, dfine)
    }
}

impl Parameterized for Dfpn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.proj_coarse.visit(&join(prefix, "proj_coarse"), f);
        self.proj_mid.visit(&join(prefix, "proj_mid"), f);
        self.proj_fine.visit(&join(prefix, "proj_fine"), f);
        self.smooth.visit(&join(prefix, "smooth"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.proj_coarse.visit_mut(&join(prefix, "proj_coarse"), f);
        self.proj_mid.visit_mut(&join(prefix, "proj_mid"), f);
        self.proj_fine.visit_mut(&join(prefix, "proj_fine"), f);
        self.smooth.visit_mut(&join(prefix, "smooth"), f);
    }
}
