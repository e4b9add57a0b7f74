//! Minimal layer library with hand-written backward passes.
//!
//! Models own one flat parameter vector; layers hold ranges into it. Each
//! forward returns whatever the matching backward needs, and backward
//! accumulates into a gradient vector shaped like the parameters.

use std::ops::Range;

use rand::Rng as _;

use crate::rng::{standard_normal, Rng};
use crate::tensor::Tensor3;

/// Hands out consecutive ranges of a flat parameter vector.
#[derive(Debug, Default)]
pub struct ParamAllocator {
    len: usize,
}

impl ParamAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, n: usize) -> Range<usize> {
        let r = self.len..self.len + n;
        self.len += n;
        r
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// `c = a · b + beta · c` where `a` is `m × k` and `b` is `k × n`, all row-major.
/// `a_t` / `b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D convolution with square kernel and "same"-style padding `kernel / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Range<usize>,
    pub bias: Option<Range<usize>>,
}

/// Saved state for [`Conv2d::backward`].
#[derive(Clone, Debug)]
pub struct ConvTape {
    input_shape: (usize, usize, usize),
    cols: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        alloc: &mut ParamAllocator,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = alloc.alloc(out_channels * in_channels * kernel * kernel);
        let bias = bias.then(|| alloc.alloc(out_channels));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight,
            bias,
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let oh = (height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn init(&self, params: &mut [f64], rng: &mut Rng, gain: f64) {
        let std = gain * (2.0 / self.fan_in() as f64).sqrt();
        for p in &mut params[self.weight.clone()] {
            *p = std * standard_normal(rng);
        }
        if let Some(b) = &self.bias {
            params[b.clone()].fill(0.0);
        }
    }

    fn im2col(&self, x: &Tensor3) -> (Vec<f64>, usize, usize) {
        let (c, h, w) = x.shape();
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let n = oh * ow;
        let mut cols = vec![0.0; c * k * k * n];
        let xd = x.data();
        for ci in 0..c {
            let plane = &xd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    fn col2im(&self, cols: &[f64], shape: (usize, usize, usize)) -> Tensor3 {
        let (c, h, w) = shape;
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let n = oh * ow;
        let mut out = Tensor3::zeros(c, h, w);
        let od = out.data_mut();
        for ci in 0..c {
            let plane = &mut od[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, params: &[f64], x: &Tensor3) -> (Tensor3, ConvTape) {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let (cols, oh, ow) = self.im2col(x);
        let n = oh * ow;
        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        if let Some(b) = &self.bias {
            for (co, &bv) in params[b.clone()].iter().enumerate() {
                out.channel_mut(co).fill(bv);
            }
        }
        gemm(
            self.out_channels,
            self.fan_in(),
            n,
            &params[self.weight.clone()],
            false,
            &cols,
            false,
            1.0,
            out.data_mut(),
        );
        (
            out,
            ConvTape {
                input_shape: x.shape(),
                cols,
            },
        )
    }

    /// Inference-only forward.
    pub fn apply(&self, params: &[f64], x: &Tensor3) -> Tensor3 {
        self.forward(params, x).0
    }

    pub fn backward(
        &self,
        params: &[f64],
        tape: &ConvTape,
        grad_out: &Tensor3,
        grads: &mut [f64],
    ) -> Tensor3 {
        let n = grad_out.plane_len();
        let kk = self.fan_in();
        // dW += dY · colsᵀ
        gemm(
            self.out_channels,
            n,
            kk,
            grad_out.data(),
            false,
            &tape.cols,
            true,
            1.0,
            &mut grads[self.weight.clone()],
        );
        if let Some(b) = &self.bias {
            for (co, g) in grads[b.clone()].iter_mut().enumerate() {
                *g += grad_out.channel(co).iter().sum::<f64>();
            }
        }
        // dcols = Wᵀ · dY
        let mut dcols = vec![0.0; kk * n];
        gemm(
            kk,
            self.out_channels,
            n,
            &params[self.weight.clone()],
            true,
            grad_out.data(),
            false,
            0.0,
            &mut dcols,
        );
        self.col2im(&dcols, tape.input_shape)
    }
}

/// Fully connected layer `y = W x + b` with `W` stored `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Linear {
    pub fn new(alloc: &mut ParamAllocator, inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: alloc.alloc(inputs * outputs),
            bias: alloc.alloc(outputs),
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut Rng, gain: f64) {
        let std = gain * (1.0 / self.inputs as f64).sqrt();
        for p in &mut params[self.weight.clone()] {
            *p = std * standard_normal(rng);
        }
        params[self.bias.clone()].fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = &params[self.weight.clone()];
        let b = &params[self.bias.clone()];
        (0..self.outputs)
            .map(|o| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                b[o] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let w = &params[self.weight.clone()];
        let mut grad_in = vec![0.0; self.inputs];
        {
            let gw = &mut grads[self.weight.clone()];
            for (o, &go) in grad_out.iter().enumerate() {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                let grow = &mut gw[o * self.inputs..(o + 1) * self.inputs];
                for i in 0..self.inputs {
                    grow[i] += go * x[i];
                    grad_in[i] += go * row[i];
                }
            }
        }
        for (g, go) in grads[self.bias.clone()].iter_mut().zip(grad_out) {
            *g += go;
        }
        grad_in
    }
}

pub fn relu(x: &Tensor3) -> Tensor3 {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward(output: &Tensor3, grad_out: &Tensor3) -> Tensor3 {
    let mut g = grad_out.clone();
    for (gv, &o) in g.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

pub fn relu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// `y_c = x_c · (1 + scale_c) + shift_c`, per channel.
pub fn film(x: &Tensor3, scale: &[f64], shift: &[f64]) -> Tensor3 {
    let mut y = x.clone();
    for c in 0..x.channels() {
        let (s, b) = (1.0 + scale[c], shift[c]);
        for v in y.channel_mut(c) {
            *v = *v * s + b;
        }
    }
    y
}

/// Returns `(grad_x, grad_scale, grad_shift)`.
pub fn film_backward(x: &Tensor3, scale: &[f64], grad_out: &Tensor3) -> (Tensor3, Vec<f64>, Vec<f64>) {
    let mut gx = grad_out.clone();
    let mut gs = vec![0.0; x.channels()];
    let mut gb = vec![0.0; x.channels()];
    for c in 0..x.channels() {
        let s = 1.0 + scale[c];
        let go = grad_out.channel(c);
        gs[c] = go.iter().zip(x.channel(c)).map(|(g, v)| g * v).sum();
        gb[c] = go.iter().sum();
        for v in gx.channel_mut(c) {
            *v *= s;
        }
    }
    (gx, gs, gb)
}

pub fn upsample_nearest2(x: &Tensor3) -> Tensor3 {
    let (c, h, w) = x.shape();
    Tensor3::from_fn(c, 2 * h, 2 * w, |ci, y, xx| x.get(ci, y / 2, xx / 2))
}

pub fn upsample_nearest2_backward(grad_out: &Tensor3) -> Tensor3 {
    let (c, h2, w2) = grad_out.shape();
    let mut g = Tensor3::zeros(c, h2 / 2, w2 / 2);
    for ci in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let i = g.index(ci, y / 2, x / 2);
                g.data_mut()[i] += grad_out.get(ci, y, x);
            }
        }
    }
    g
}

/// Source taps for bilinear resampling along one axis (half-pixel centres,
/// edge-clamped).
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = pos - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor3, height: usize, width: usize) -> Tensor3 {
    let (c, h, w) = x.shape();
    let ty = bilinear_taps(h, height);
    let tx = bilinear_taps(w, width);
    Tensor3::from_fn(c, height, width, |ci, y, xx| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[xx];
        let top = x.get(ci, y0, x0) * (1.0 - fx) + x.get(ci, y0, x1) * fx;
        let bot = x.get(ci, y1, x0) * (1.0 - fx) + x.get(ci, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

pub fn upsample_bilinear_backward(grad_out: &Tensor3, height: usize, width: usize) -> Tensor3 {
    let (c, oh, ow) = grad_out.shape();
    let ty = bilinear_taps(height, oh);
    let tx = bilinear_taps(width, ow);
    let mut g = Tensor3::zeros(c, height, width);
    for ci in 0..c {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let go = grad_out.get(ci, y, xx);
                let d = g.data_mut();
                let base = ci * height * width;
                d[base + y0 * width + x0] += go * (1.0 - fy) * (1.0 - fx);
                d[base + y0 * width + x1] += go * (1.0 - fy) * fx;
                d[base + y1 * width + x0] += go * fy * (1.0 - fx);
                d[base + y1 * width + x1] += go * fy * fx;
            }
        }
    }
    g
}

pub fn global_average_pool(x: &Tensor3) -> Vec<f64> {
    let n = x.plane_len() as f64;
    (0..x.channels())
        .map(|c| x.channel(c).iter().sum::<f64>() / n)
        .collect()
}

pub fn global_average_pool_backward(grad: &[f64], height: usize, width: usize) -> Tensor3 {
    let n = (height * width) as f64;
    Tensor3::from_fn(grad.len(), height, width, |c, _, _| grad[c] / n)
}

/// Adam over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// SGD with heavy-ball momentum and coupled L2 weight decay.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(num_params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.velocity[i] = self.momentum * self.velocity[i] + g;
            params[i] -= lr * self.velocity[i];
        }
    }
}

/// `base · (1 − iter / max_iter)^power`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return base;
    }
    let frac = 1.0 - (iter as f64 / max_iter as f64).min(1.0);
    base * frac.powf(power)
}

/// Fisher–Yates shuffle of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_tensor, rng_from_seed};

    /// Direct-loop convolution used as an oracle for the im2col path.
    fn naive_conv(conv: &Conv2d, p: &[f64], x: &Tensor3) -> Tensor3 {
        let (c, h, w) = x.shape();
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel;
        let wts = &p[conv.weight.clone()];
        Tensor3::from_fn(conv.out_channels, oh, ow, |co, oy, ox| {
            let mut acc = conv.bias.as_ref().map_or(0.0, |b| p[b.start + co]);
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wts[((co * c + ci) * k + ky) * k + kx]
                                * x.get(ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let mut alloc = ParamAllocator::new();
            let conv = Conv2d::new(&mut alloc, 3, 4, k, s, true);
            let mut rng = rng_from_seed(1);
            let p: Vec<f64> = (0..alloc.len()).map(|_| standard_normal(&mut rng)).collect();
            let x = gaussian_tensor(&mut rng, 3, 6, 10);
            let fast = conv.apply(&p, &x);
            let slow = naive_conv(&conv, &p, &x);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut alloc = ParamAllocator::new();
        let conv = Conv2d::new(&mut alloc, 2, 3, 3, 2, true);
        let mut rng = rng_from_seed(2);
        let p: Vec<f64> = (0..alloc.len()).map(|_| standard_normal(&mut rng)).collect();
        let x = gaussian_tensor(&mut rng, 2, 5, 7);
        let (y, tape) = conv.forward(&p, &x);
        let r = gaussian_tensor(&mut rng, y.channels(), y.height(), y.width());
        // loss = <r, y>
        let loss = |p: &[f64], x: &Tensor3| -> f64 {
            conv.apply(p, x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let mut grads = vec![0.0; p.len()];
        let gx = conv.backward(&p, &tape, &r, &mut grads);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-6, "param {i}: {fd} vs {}", grads[i]);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let mut rng = rng_from_seed(4);
        let x = gaussian_tensor(&mut rng, 2, 3, 5);
        let g = gaussian_tensor(&mut rng, 2, 12, 20);
        let y = upsample_bilinear(&x, 12, 20);
        let gx = upsample_bilinear_backward(&g, 3, 5);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Tensor3::filled(1, 4, 8, 0.37);
        let y = upsample_bilinear(&x, 32, 64);
        assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn nearest_backward_is_adjoint() {
        let mut rng = rng_from_seed(5);
        let x = gaussian_tensor(&mut rng, 2, 3, 4);
        let g = gaussian_tensor(&mut rng, 2, 6, 8);
        let lhs: f64 = upsample_nearest2(&x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(upsample_nearest2_backward(&g).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn poly_lr_decays_to_zero() {
        assert_eq!(poly_lr(0.01, 0, 100, 0.9), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100, 0.9), 0.0);
        assert!(poly_lr(0.01, 50, 100, 0.9) < 0.01);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut idx = shuffled_indices(50, &mut rng_from_seed(9));
        idx.sort_unstable();
        assert_eq!(idx, (0..50).collect::<Vec<_>>());
    }
}
