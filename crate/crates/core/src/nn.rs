//! Minimal CPU building blocks: 2-D convolution with hand-written backward,
//! and an Adam optimizer over flat parameter slices.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Dense channel-major activation `c × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor3 {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// `C = A·B + beta·C` with optional transposes; all matrices row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the slices checked above.
    unsafe {
        matrixmultiply::sgemm(
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    /// `out_channels × (in_channels · kernel²)`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        ConvGrad {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }

    pub fn clear(&mut self) {
        self.weight.iter_mut().for_each(|g| *g = 0.0);
        self.bias.iter_mut().for_each(|g| *g = 0.0);
    }
}

impl Conv2d {
    /// He-normal weights, zero bias; padding keeps `ceil(n / stride)` outputs.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let weight = (0..out_channels * fan_in)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let p = self.pad();
        (
            (h + 2 * p - span) / self.stride + 1,
            (w + 2 * p - span) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &Tensor3, ho: usize, wo: usize) -> Vec<f32> {
        let n = ho * wo;
        let mut cols = vec![0.0f32; self.patch_len() * n];
        let (k, s, d, p) = (self.kernel, self.stride, self.dilation, self.pad() as isize);
        for ci in 0..self.in_channels {
            let plane = &x.data[ci * x.h * x.w..(ci + 1) * x.h * x.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * s) as isize - p + (ky * d) as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * s) as isize - p + (kx * d) as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, ho: usize, wo: usize) -> Tensor3 {
        let n = ho * wo;
        let mut dx = Tensor3::zeros(self.in_channels, h, w);
        let (k, s, d, p) = (self.kernel, self.stride, self.dilation, self.pad() as isize);
        for ci in 0..self.in_channels {
            let plane = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * s) as isize - p + (ky * d) as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s) as isize - p + (kx * d) as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the column buffer needed by [`Conv2d::backward`].
    pub fn forward(&self, x: &Tensor3) -> (Tensor3, Vec<f32>) {
        assert_eq!(x.c, self.in_channels);
        let (ho, wo) = self.out_size(x.h, x.w);
        let n = ho * wo;
        let cols = self.im2col(x, ho, wo);
        let mut out = Tensor3::zeros(self.out_channels, ho, wo);
        for (o, b) in self.bias.iter().enumerate() {
            out.data[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = *b);
        }
        gemm(
            self.out_channels,
            self.patch_len(),
            n,
            &self.weight,
            false,
            &cols,
            false,
            1.0,
            &mut out.data,
        );
        (out, cols)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        input_hw: (usize, usize),
        cols: &[f32],
        grad_out: &Tensor3,
        grad: &mut ConvGrad,
        need_input_grad: bool,
    ) -> Option<Tensor3> {
        let (ho, wo) = (grad_out.h, grad_out.w);
        let n = ho * wo;
        let kk = self.patch_len();
        gemm(
            self.out_channels,
            n,
            kk,
            &grad_out.data,
            false,
            cols,
            true,
            1.0,
            &mut grad.weight,
        );
        for o in 0..self.out_channels {
            grad.bias[o] += grad_out.data[o * n..(o + 1) * n].iter().sum::<f32>();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![0.0f32; kk * n];
        gemm(
            kk,
            self.out_channels,
            n,
            &self.weight,
            true,
            &grad_out.data,
            false,
            0.0,
            &mut dcols,
        );
        Some(self.col2im(&dcols, input_hw.0, input_hw.1, ho, wo))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with one moment buffer per registered parameter slice. Slices must be
/// passed in the same order on every step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    slot: usize,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            slot: 0,
            moments: Vec::new(),
        }
    }

    /// Starts a new step; call before the `update_*` calls of that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
        self.slot = 0;
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    fn next_slot(&mut self, len: usize) -> usize {
        let s = self.slot;
        self.slot += 1;
        if s == self.moments.len() {
            self.moments.push((vec![0.0; len], vec![0.0; len]));
        }
        assert_eq!(self.moments[s].0.len(), len, "parameter order changed");
        s
    }

    fn delta(&self, m: &mut f64, v: &mut f64, g: f64, p: f64) -> f64 {
        let c = &self.config;
        let g = g + c.weight_decay * p;
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let mh = *m / (1.0 - c.beta1.powi(self.t as i32));
        let vh = *v / (1.0 - c.beta2.powi(self.t as i32));
        c.lr * mh / (vh.sqrt() + c.eps)
    }

    pub fn update_f32(&mut self, params: &mut [f32], grads: &[f32], scale: f64) {
        let s = self.next_slot(params.len());
        let (mut ms, mut vs) = std::mem::take(&mut self.moments[s]);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(ms.iter_mut().zip(vs.iter_mut()))
        {
            *p -= self.delta(m, v, *g as f64 * scale, *p as f64) as f32;
        }
        self.moments[s] = (ms, vs);
    }

    pub fn update_f64(&mut self, params: &mut [f64], grads: &[f64], scale: f64) {
        let s = self.next_slot(params.len());
        let (mut ms, mut vs) = std::mem::take(&mut self.moments[s]);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(ms.iter_mut().zip(vs.iter_mut()))
        {
            *p -= self.delta(m, v, *g * scale, *p);
        }
        self.moments[s] = (ms, vs);
    }
}
