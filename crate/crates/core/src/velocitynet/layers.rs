//! Operators of the velocity network with hand-written adjoints.
//!
//! Every `forward` returns what its `backward` needs; every `backward`
//! accumulates parameter gradients into a flat buffer laid out like the
//! [`ParamStore`] and returns the gradient with respect to its input.

use super::params::{Init, ParamId, ParamStore};

/// Activation tensor `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Channel-wise concatenation.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial dims");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::from_vec(a.c + b.c, a.h, a.w, data)
    }

    /// Inverse of [`Tensor::concat`] for gradients.
    pub fn split(self, first: usize) -> (Tensor, Tensor) {
        let n = first * self.plane_len();
        let (h, w, c) = (self.h, self.w, self.c);
        let mut data = self.data;
        let tail = data.split_off(n);
        (Tensor::from_vec(first, h, w, data), Tensor::from_vec(c - first, h, w, tail))
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len(), "tensor add");
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| silu(v)).collect()
}

/// `gy * silu'(x)` elementwise.
pub fn silu_backward(x: &[f64], gy: &[f64]) -> Vec<f64> {
    x.iter().zip(gy).map(|(&a, &g)| g * silu_grad(a)).collect()
}

fn add_into(grads: &mut [f64], store: &ParamStore, id: ParamId, values: &[f64]) {
    let r = store.range(id);
    grads[r].iter_mut().zip(values).for_each(|(g, v)| *g += v);
}

/// Dense layer `y = W x (+ b)` with `W` stored `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Self {
        Self::with_init(store, name, input, output, bias, Init::FanIn(input))
    }

    pub fn with_init(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, init: Init) -> Self {
        let weight = store.register(format!("{name}.weight"), &[output, input], init);
        let bias = bias.then(|| store.register(format!("{name}.bias"), &[output], Init::Zeros));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input);
        let w = p.get(self.weight);
        let mut y = match self.bias {
            Some(b) => p.get(b).to_vec(),
            None => vec![0.0; self.output],
        };
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * self.input..(o + 1) * self.input];
            *yo += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        y
    }

    pub fn backward(&self, p: &ParamStore, x: &[f64], gy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let w = p.get(self.weight);
        let wr = p.range(self.weight);
        let gw = &mut grads[wr];
        let mut gx = vec![0.0; self.input];
        for (o, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * self.input..(o + 1) * self.input];
            let grow = &mut gw[o * self.input..(o + 1) * self.input];
            for i in 0..self.input {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
        }
        if let Some(b) = self.bias {
            add_into(grads, p, b, gy);
        }
        gx
    }
}

/// 2-D convolution with circular padding; kernel 1 or 3, stride 1 or 2.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self::with_init(store, name, cin, cout, k, stride, Init::FanIn(cin * k * k))
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        assert!(k == 1 || k == 3, "kernel size {k}");
        assert!(stride == 1 || stride == 2, "stride {stride}");
        let weight = store.register(format!("{name}.weight"), &[cout, cin, k, k], init);
        let bias = store.register(format!("{name}.bias"), &[cout], Init::Zeros);
        Self {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
        }
    }

    fn pad(&self) -> usize {
        self.k / 2
    }

    /// Circularly padded copy of every input plane.
    fn padded(&self, x: &Tensor) -> Vec<f64> {
        let p = self.pad();
        if p == 0 {
            return x.data.clone();
        }
        let (h, w) = (x.h, x.w);
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut out = vec![0.0; x.c * ph * pw];
        for c in 0..x.c {
            let src = x.plane(c);
            let dst = &mut out[c * ph * pw..(c + 1) * ph * pw];
            for py in 0..ph {
                let sy = (py + h - p) % h;
                let row = &src[sy * w..(sy + 1) * w];
                let drow = &mut dst[py * pw..(py + 1) * pw];
                for px in 0..pw {
                    drow[px] = row[(px + w - p) % w];
                }
            }
        }
        out
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.stride, w / self.stride)
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = self.out_dims(x.h, x.w);
        let pad = self.pad();
        let (ph, pw) = (x.h + 2 * pad, x.w + 2 * pad);
        let xp = self.padded(x);
        let w = p.get(self.weight);
        let b = p.get(self.bias);
        let k = self.k;
        let s = self.stride;
        let mut y = Tensor::zeros(self.cout, oh, ow);
        for o in 0..self.cout {
            let yo = &mut y.data[o * oh * ow..(o + 1) * oh * ow];
            yo.fill(b[o]);
            for i in 0..self.cin {
                let xi = &xp[i * ph * pw..(i + 1) * ph * pw];
                let wk = &w[(o * self.cin + i) * k * k..(o * self.cin + i + 1) * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wk[ky * k + kx];
                        for yy in 0..oh {
                            let src = &xi[(s * yy + ky) * pw + kx..];
                            let dst = &mut yo[yy * ow..(yy + 1) * ow];
                            if s == 1 {
                                for (d, v) in dst.iter_mut().zip(&src[..ow]) {
                                    *d += wv * v;
                                }
                            } else {
                                for (xx, d) in dst.iter_mut().enumerate() {
                                    *d += wv * src[s * xx];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, p: &ParamStore, x: &Tensor, gy: &Tensor, grads: &mut [f64]) -> Tensor {
        let (oh, ow) = (gy.h, gy.w);
        let pad = self.pad();
        let (ph, pw) = (x.h + 2 * pad, x.w + 2 * pad);
        let xp = self.padded(x);
        let w = p.get(self.weight);
        let k = self.k;
        let s = self.stride;
        let mut gxp = vec![0.0; self.cin * ph * pw];
        let wr = p.range(self.weight);
        let br = p.range(self.bias);
        for o in 0..self.cout {
            let go = &gy.data[o * oh * ow..(o + 1) * oh * ow];
            grads[br.start + o] += go.iter().sum::<f64>();
            for i in 0..self.cin {
                let xi = &xp[i * ph * pw..(i + 1) * ph * pw];
                let gxi = &mut gxp[i * ph * pw..(i + 1) * ph * pw];
                let base = (o * self.cin + i) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[base + ky * k + kx];
                        let mut acc = 0.0;
                        for yy in 0..oh {
                            let off = (s * yy + ky) * pw + kx;
                            let grow = &go[yy * ow..(yy + 1) * ow];
                            if s == 1 {
                                let src = &xi[off..off + ow];
                                let dst = &mut gxi[off..off + ow];
                                for ((d, g), v) in dst.iter_mut().zip(grow).zip(src) {
                                    acc += g * v;
                                    *d += wv * g;
                                }
                            } else {
                                for (xx, g) in grow.iter().enumerate() {
                                    acc += g * xi[off + s * xx];
                                    gxi[off + s * xx] += wv * g;
                                }
                            }
                        }
                        grads[wr.start + base + ky * k + kx] += acc;
                    }
                }
            }
        }
        // Fold the padded gradient back onto the torus.
        if pad == 0 {
            return Tensor::from_vec(self.cin, x.h, x.w, gxp);
        }
        let (h, wd) = (x.h, x.w);
        let mut gx = Tensor::zeros(self.cin, h, wd);
        for c in 0..self.cin {
            let src = &gxp[c * ph * pw..(c + 1) * ph * pw];
            let dst = &mut gx.data[c * h * wd..(c + 1) * h * wd];
            for py in 0..ph {
                let sy = (py + h - pad) % h;
                for px in 0..pw {
                    dst[sy * wd + (px + wd - pad) % wd] += src[py * pw + px];
                }
            }
        }
        gx
    }
}

pub const GN_EPS: f64 = 1e-5;

/// Group normalisation with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "{channels} channels into {groups} groups");
        let gamma = store.register(format!("{name}.gamma"), &[channels], Init::Ones);
        let beta = store.register(format!("{name}.beta"), &[channels], Init::Zeros);
        Self {
            gamma,
            beta,
            channels,
            groups,
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> (Tensor, GroupNormCache) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let cpg = self.channels / self.groups;
        let len = cpg * x.plane_len();
        let gamma = p.get(self.gamma);
        let beta = p.get(self.beta);
        let mut xhat = x.clone();
        let mut y = Tensor::zeros(x.c, x.h, x.w);
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let r = g * len..(g + 1) * len;
            let seg = &x.data[r.clone()];
            let n = len as f64;
            let mean = seg.iter().sum::<f64>() / n;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + GN_EPS).sqrt();
            inv_std.push(inv);
            xhat.data[r.clone()].iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        let plane = x.plane_len();
        for c in 0..x.c {
            let (gm, bt) = (gamma[c], beta[c]);
            for (o, v) in y.data[c * plane..(c + 1) * plane].iter_mut().zip(xhat.plane(c)) {
                *o = gm * v + bt;
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParamStore, cache: &GroupNormCache, gy: &Tensor, grads: &mut [f64]) -> Tensor {
        let plane = gy.plane_len();
        let gamma = p.get(self.gamma);
        let (gr, br) = (p.range(self.gamma), p.range(self.beta));
        let mut gxhat = Tensor::zeros(gy.c, gy.h, gy.w);
        for c in 0..gy.c {
            let go = gy.plane(c);
            let xh = cache.xhat.plane(c);
            grads[br.start + c] += go.iter().sum::<f64>();
            grads[gr.start + c] += go.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
            for (d, g) in gxhat.data[c * plane..(c + 1) * plane].iter_mut().zip(go) {
                *d = g * gamma[c];
            }
        }
        let cpg = self.channels / self.groups;
        let len = cpg * plane;
        let n = len as f64;
        let mut gx = gxhat;
        for g in 0..self.groups {
            let r = g * len..(g + 1) * len;
            let xh = &cache.xhat.data[r.clone()];
            let seg = &mut gx.data[r];
            let sum: f64 = seg.iter().sum();
            let dot: f64 = seg.iter().zip(xh).map(|(a, b)| a * b).sum();
            let inv = cache.inv_std[g];
            for (v, x) in seg.iter_mut().zip(xh) {
                *v = inv * (*v - sum / n - x * dot / n);
            }
        }
        gx
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (2 * x.h, 2 * x.w);
    let mut y = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = &mut y.data[c * h * w..(c + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                dst[yy * w + xx] = src[(yy / 2) * x.w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(gy: &Tensor) -> Tensor {
    let (h, w) = (gy.h / 2, gy.w / 2);
    let mut gx = Tensor::zeros(gy.c, h, w);
    for c in 0..gy.c {
        let src = gy.plane(c);
        let dst = &mut gx.data[c * h * w..(c + 1) * h * w];
        for yy in 0..gy.h {
            for xx in 0..gy.w {
                dst[(yy / 2) * w + xx / 2] += src[yy * gy.w + xx];
            }
        }
    }
    gx
}

/// Pre-activation residual block with FiLM modulation after the second norm.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub gn1: GroupNorm,
    pub conv1: Conv2d,
    pub gn2: GroupNorm,
    pub film_scale: Linear,
    pub film_shift: Linear,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
    pub cout: usize,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache {
    x: Tensor,
    gn1: GroupNormCache,
    a1: Tensor,
    s1: Tensor,
    gn2: GroupNormCache,
    n2: Tensor,
    film: Vec<f64>,
    m: Tensor,
    s2: Tensor,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, embed: usize, groups: usize) -> Self {
        let gn1 = GroupNorm::new(store, &format!("{name}.gn1"), cin, groups);
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1);
        let gn2 = GroupNorm::new(store, &format!("{name}.gn2"), cout, groups);
        let film_scale = Linear::new(store, &format!("{name}.film_scale"), embed, cout, true);
        let film_shift = Linear::with_init(store, &format!("{name}.film_shift"), embed, cout, true, Init::Zeros);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1);
        let skip = (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1));
        Self {
            gn1,
            conv1,
            gn2,
            film_scale,
            film_shift,
            conv2,
            skip,
            cout,
        }
    }

    /// `cond_act` is `silu(c)`.
    pub fn forward(&self, p: &ParamStore, x: &Tensor, cond_act: &[f64]) -> (Tensor, ResBlockCache) {
        let (a1, gn1) = self.gn1.forward(p, x);
        let s1 = Tensor::from_vec(a1.c, a1.h, a1.w, silu_vec(&a1.data));
        let h1 = self.conv1.forward(p, &s1);
        let (n2, gn2) = self.gn2.forward(p, &h1);
        let mut film = self.film_scale.forward(p, cond_act);
        film.extend(self.film_shift.forward(p, cond_act));
        let plane = n2.plane_len();
        let mut m = n2.clone();
        for c in 0..self.cout {
            let (scale, shift) = (1.0 + film[c], film[self.cout + c]);
            m.data[c * plane..(c + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = *v * scale + shift);
        }
        let s2 = Tensor::from_vec(m.c, m.h, m.w, silu_vec(&m.data));
        let mut out = self.conv2.forward(p, &s2);
        match &self.skip {
            Some(skip) => out.add_assign(&skip.forward(p, x)),
            None => out.add_assign(x),
        }
        let cache = ResBlockCache {
            x: x.clone(),
            gn1,
            a1,
            s1,
            gn2,
            n2,
            film,
            m,
            s2,
        };
        (out, cache)
    }

    /// Returns the input gradient and the gradient with respect to `silu(c)`.
    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &ResBlockCache,
        cond_act: &[f64],
        gy: &Tensor,
        grads: &mut [f64],
    ) -> (Tensor, Vec<f64>) {
        let mut gx = match &self.skip {
            Some(skip) => skip.backward(p, &cache.x, gy, grads),
            None => gy.clone(),
        };
        let gs2 = self.conv2.backward(p, &cache.s2, gy, grads);
        let gm = Tensor::from_vec(gs2.c, gs2.h, gs2.w, silu_backward(&cache.m.data, &gs2.data));
        let plane = gm.plane_len();
        let mut gfilm = vec![0.0; 2 * self.cout];
        let mut gn2 = gm.clone();
        for c in 0..self.cout {
            let go = gm.plane(c);
            let n2 = cache.n2.plane(c);
            gfilm[c] = go.iter().zip(n2).map(|(a, b)| a * b).sum();
            gfilm[self.cout + c] = go.iter().sum();
            let scale = 1.0 + cache.film[c];
            gn2.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v *= scale);
        }
        let mut gcond = self.film_scale.backward(p, cond_act, &gfilm[..self.cout], grads);
        let gshift = self.film_shift.backward(p, cond_act, &gfilm[self.cout..], grads);
        gcond.iter_mut().zip(&gshift).for_each(|(a, b)| *a += b);
        let gh1 = self.gn2.backward(p, &cache.gn2, &gn2, grads);
        let gs1 = self.conv1.backward(p, &cache.s1, &gh1, grads);
        let ga1 = Tensor::from_vec(gs1.c, gs1.h, gs1.w, silu_backward(&cache.a1.data, &gs1.data));
        gx.add_assign(&self.gn1.backward(p, &cache.gn1, &ga1, grads));
        (gx, gcond)
    }
}
