//! NCHW tensor kernels with their backward passes.

use ndarray::{Array4, Axis};
use rayon::prelude::*;

/// Below this many multiply-adds a GEMM runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 18;
/// Column block handed to each worker when a GEMM is split.
const COL_BLOCK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn out_size(&self, size: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = size + 2 * self.pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Act {
    Identity,
    Relu,
    LeakyRelu(f32),
    Sigmoid,
}

impl Act {
    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Act::Identity => v,
            Act::Relu => v.max(0.0),
            Act::LeakyRelu(slope) => {
                if v > 0.0 {
                    v
                } else {
                    slope * v
                }
            }
            Act::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn grad_from_output(self, y: f32) -> f32 {
        match self {
            Act::Identity => 1.0,
            Act::Relu => (y > 0.0) as u8 as f32,
            Act::LeakyRelu(slope) => {
                if y > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Act::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy)]
struct SendPtr(*mut f32);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

/// `C (m×n) = A (m×k) · B (k×n) + beta·C` with arbitrary strides, split across
/// threads along `n` when large. Each output element is always produced by a
/// single call, so results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
    rsc: isize,
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    let cptr = SendPtr(c.as_mut_ptr());
    let run = |col0: usize, cols: usize| {
        // Rebinding makes the closure capture the `Send` wrapper, not its raw field.
        #[allow(clippy::redundant_locals)]
        let cptr = cptr;
        // SAFETY: the callers size `a`, `b` and `c` for the full m×k, k×n and
        // m×n extents at the given strides; column blocks of `c` are disjoint.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                cols,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr().offset(col0 as isize * csb),
                rsb,
                csb,
                beta,
                cptr.0.add(col0),
                rsc,
                1,
            );
        }
    };
    if m * n * k < PAR_THRESHOLD || n <= COL_BLOCK {
        run(0, n);
    } else {
        let blocks: Vec<usize> = (0..n).step_by(COL_BLOCK).collect();
        blocks.into_par_iter().for_each(|c0| run(c0, COL_BLOCK.min(n - c0)));
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], c: usize, h: usize, w: usize, spec: ConvSpec, ho: usize, wo: usize, col: &mut [f32]) {
    let k = spec.kernel;
    let p = ho * wo;
    let fill = |(ci, block): (usize, &mut [f32])| {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut block[(ky * k + kx) * p..(ky * k + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        *d = if ix >= 0 && ix < w as isize { src[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    };
    if c * k * k * p > PAR_THRESHOLD {
        col.par_chunks_mut(k * k * p).enumerate().for_each(fill);
    } else {
        col.chunks_mut(k * k * p).enumerate().for_each(fill);
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(col: &[f32], c: usize, h: usize, w: usize, spec: ConvSpec, ho: usize, wo: usize, dx: &mut [f32]) {
    let k = spec.kernel;
    let p = ho * wo;
    let scatter = |(ci, plane): (usize, &mut [f32])| {
        let block = &col[ci * k * k * p..(ci + 1) * k * k * p];
        for ky in 0..k {
            for kx in 0..k {
                let row = &block[(ky * k + kx) * p..(ky * k + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    };
    if c * k * k * p > PAR_THRESHOLD {
        dx.par_chunks_mut(h * w).enumerate().for_each(scatter);
    } else {
        dx.chunks_mut(h * w).enumerate().for_each(scatter);
    }
}

/// Convolution followed by an optional residual add and an activation:
/// `y = act(conv(x) + bias + skip)`.
pub fn conv_forward(
    x: &Array4<f32>,
    weight: &Array4<f32>,
    bias: &[f32],
    spec: ConvSpec,
    skip: Option<&Array4<f32>>,
    act: Act,
) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let (co, ci, kh, kw) = weight.dim();
    assert_eq!(ci, c, "conv input channels");
    assert!(kh == spec.kernel && kw == spec.kernel);
    let ho = spec.out_size(h).expect("input smaller than kernel span");
    let wo = spec.out_size(w).expect("input smaller than kernel span");
    let (kk, p) = (c * kh * kw, ho * wo);
    let x = x.as_standard_layout();
    let wmat = weight.as_slice().expect("weights are contiguous");
    let mut y = Array4::<f32>::zeros((n, co, ho, wo));
    let mut col = vec![0.0f32; kk * p];
    for s in 0..n {
        let xs = &x.as_slice().unwrap()[s * c * h * w..(s + 1) * c * h * w];
        im2col(xs, c, h, w, spec, ho, wo, &mut col);
        let ys = &mut y.as_slice_mut().unwrap()[s * co * p..(s + 1) * co * p];
        gemm(co, kk, p, wmat, kk as isize, 1, &col, p as isize, 1, ys, p as isize, 0.0);
    }
    let skip = skip.map(|s| s.as_standard_layout().into_owned());
    if let Some(s) = &skip {
        assert_eq!(s.dim(), y.dim(), "residual shape");
    }
    let ys = y.as_slice_mut().unwrap();
    let add_bias = |(i, chunk): (usize, &mut [f32])| {
        let b = bias[i % co];
        let off = i * p;
        for (j, v) in chunk.iter_mut().enumerate() {
            let r = skip.as_ref().map_or(0.0, |s| s.as_slice().unwrap()[off + j]);
            *v = act.apply(*v + b + r);
        }
    };
    if ys.len() > PAR_THRESHOLD {
        ys.par_chunks_mut(p).enumerate().for_each(add_bias);
    } else {
        ys.chunks_mut(p).enumerate().for_each(add_bias);
    }
    y
}

pub struct ConvGrads {
    pub input: Option<Array4<f32>>,
    pub weight: Array4<f32>,
    pub bias: Vec<f32>,
}

/// Backward pass of a convolution given the gradient w.r.t. its
/// pre-activation output.
pub fn conv_backward(
    x: &Array4<f32>,
    weight: &Array4<f32>,
    spec: ConvSpec,
    dpre: &Array4<f32>,
    need_input: bool,
) -> ConvGrads {
    let (n, c, h, w) = x.dim();
    let (co, _, kh, kw) = weight.dim();
    let (_, _, ho, wo) = dpre.dim();
    let (kk, p) = (c * kh * kw, ho * wo);
    let x = x.as_standard_layout();
    let dpre = dpre.as_standard_layout();
    let wmat = weight.as_slice().expect("weights are contiguous");
    let mut dw = Array4::<f32>::zeros((co, c, kh, kw));
    let mut db = vec![0.0f32; co];
    let mut dx = need_input.then(|| Array4::<f32>::zeros((n, c, h, w)));
    let mut col = vec![0.0f32; kk * p];
    let mut dcol = vec![0.0f32; if need_input { kk * p } else { 0 }];
    for s in 0..n {
        let xs = &x.as_slice().unwrap()[s * c * h * w..(s + 1) * c * h * w];
        let dys = &dpre.as_slice().unwrap()[s * co * p..(s + 1) * co * p];
        for (o, b) in db.iter_mut().enumerate() {
            *b += dys[o * p..(o + 1) * p].iter().sum::<f32>();
        }
        im2col(xs, c, h, w, spec, ho, wo, &mut col);
        // dW (co×kk) += dY (co×p) · colᵀ (p×kk)
        gemm(co, p, kk, dys, p as isize, 1, &col, 1, p as isize, dw.as_slice_mut().unwrap(), kk as isize, 1.0);
        if let Some(dx) = dx.as_mut() {
            // dcol (kk×p) = Wᵀ (kk×co) · dY (co×p)
            gemm(kk, co, p, wmat, 1, kk as isize, dys, p as isize, 1, &mut dcol, p as isize, 0.0);
            let dxs = &mut dx.as_slice_mut().unwrap()[s * c * h * w..(s + 1) * c * h * w];
            col2im(&dcol, c, h, w, spec, ho, wo, dxs);
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

/// 2×2 max-pool with stride 2; returns the pooled map and the winning offset
/// (0..4) inside each window.
pub fn maxpool2_forward(x: &Array4<f32>) -> (Array4<f32>, Vec<u8>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::<f32>::zeros((n, c, ho, wo));
    let mut arg = vec![0u8; n * c * ho * wo];
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    y.as_slice_mut().unwrap().par_chunks_mut(ho * wo).zip(arg.par_chunks_mut(ho * wo)).enumerate().for_each(
        |(plane, (ys, args))| {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = 2 * oy * w + 2 * ox;
                    let cands = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                    let mut best = 0;
                    for k in 1..4 {
                        if cands[k] > cands[best] {
                            best = k;
                        }
                    }
                    ys[oy * wo + ox] = cands[best];
                    args[oy * wo + ox] = best as u8;
                }
            }
        },
    );
    (y, arg)
}

pub fn maxpool2_backward(dy: &Array4<f32>, arg: &[u8], h: usize, w: usize) -> Array4<f32> {
    let (n, c, ho, wo) = dy.dim();
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().unwrap();
    dx.as_slice_mut().unwrap().par_chunks_mut(h * w).enumerate().for_each(|(plane, dst)| {
        for oy in 0..ho {
            for ox in 0..wo {
                let i = plane * ho * wo + oy * wo + ox;
                let k = arg[i] as usize;
                dst[(2 * oy + k / 2) * w + 2 * ox + k % 2] += dys[i];
            }
        }
    });
    dx
}

pub fn upsample2_forward(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(s, ch, y, xx)| x[[s, ch, y / 2, xx / 2]])
}

pub fn upsample2_backward(dy: &Array4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = dy.dim();
    Array4::from_shape_fn((n, c, h2 / 2, w2 / 2), |(s, ch, y, x)| {
        dy[[s, ch, 2 * y, 2 * x]]
            + dy[[s, ch, 2 * y, 2 * x + 1]]
            + dy[[s, ch, 2 * y + 1, 2 * x]]
            + dy[[s, ch, 2 * y + 1, 2 * x + 1]]
    })
}

pub fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()])
        .expect("concat of matching spatial shapes")
        .as_standard_layout()
        .into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;
    use rand::Rng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut r = rng(seed);
        Array4::from_shape_simple_fn(shape, || r.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution used as a reference.
    fn naive_conv(x: &Array4<f32>, w: &Array4<f32>, b: &[f32], spec: ConvSpec) -> Array4<f32> {
        let (n, c, h, wd) = x.dim();
        let (co, _, k, _) = w.dim();
        let ho = spec.out_size(h).unwrap();
        let wo = spec.out_size(wd).unwrap();
        Array4::from_shape_fn((n, co, ho, wo), |(s, o, oy, ox)| {
            let mut acc = b[o] as f64;
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += (x[[s, ci, iy as usize, ix as usize]] * w[[o, ci, ky, kx]]) as f64;
                        }
                    }
                }
            }
            acc as f32
        })
    }

    #[test]
    fn conv_matches_naive_reference() {
        for spec in [
            ConvSpec { kernel: 3, stride: 1, pad: 1, dilation: 1 },
            ConvSpec { kernel: 3, stride: 1, pad: 2, dilation: 2 },
            ConvSpec { kernel: 4, stride: 2, pad: 1, dilation: 1 },
            ConvSpec { kernel: 4, stride: 1, pad: 1, dilation: 1 },
        ] {
            let x = random((2, 3, 9, 8), 1);
            let w = random((4, 3, spec.kernel, spec.kernel), 2);
            let b = [0.1, -0.2, 0.3, 0.0];
            let fast = conv_forward(&x, &w, &b, spec, None, Act::Identity);
            let slow = naive_conv(&x, &w, &b, spec);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b} for {spec:?}");
            }
        }
    }

    #[test]
    fn large_conv_parallel_path_matches_reference() {
        let spec = ConvSpec { kernel: 3, stride: 1, pad: 1, dilation: 1 };
        let x = random((1, 16, 40, 40), 3);
        let w = random((24, 16, 3, 3), 4);
        let b = vec![0.0; 24];
        let fast = conv_forward(&x, &w, &b, spec, None, Act::Identity);
        let slow = naive_conv(&x, &w, &b, spec);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    /// Central finite differences of `sum(g ⊙ conv(x))` against the analytic
    /// input, weight and bias gradients.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let spec = ConvSpec { kernel: 3, stride: 2, pad: 2, dilation: 2 };
        let x = random((2, 2, 7, 6), 5);
        let w = random((3, 2, 3, 3), 6);
        let b = vec![0.05, -0.1, 0.2];
        let y = conv_forward(&x, &w, &b, spec, None, Act::Identity);
        let g = random(y.dim(), 7);
        let objective = |x: &Array4<f32>, w: &Array4<f32>, b: &[f32]| -> f64 {
            let y = conv_forward(x, w, b, spec, None, Act::Identity);
            y.iter().zip(g.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let grads = conv_backward(&x, &w, spec, &g, true);
        let eps = 1e-2f32;
        let dx = grads.input.unwrap();
        for idx in [(0, 0, 0, 0), (1, 1, 3, 2), (0, 1, 6, 5), (1, 0, 2, 4)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (objective(&xp, &w, &b) - objective(&xm, &w, &b)) / (2.0 * eps as f64);
            assert!((fd - dx[idx] as f64).abs() < 1e-3 * (1.0 + fd.abs()), "dx {idx:?}: {fd} vs {}", dx[idx]);
        }
        for idx in [(0, 0, 0, 0), (2, 1, 2, 1), (1, 0, 1, 2)] {
            let mut wp = w.clone();
            wp[idx] += eps;
            let mut wm = w.clone();
            wm[idx] -= eps;
            let fd = (objective(&x, &wp, &b) - objective(&x, &wm, &b)) / (2.0 * eps as f64);
            assert!((fd - grads.weight[idx] as f64).abs() < 1e-3 * (1.0 + fd.abs()));
        }
        let sum_g: Vec<f32> = (0..3).map(|o| g.index_axis(Axis(1), o).sum()).collect();
        for (a, b) in sum_g.iter().zip(&grads.bias) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn pooling_and_upsampling_adjoint() {
        let x = random((1, 2, 4, 6), 8);
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.dim(), (1, 2, 2, 3));
        assert_eq!(
            y[[0, 1, 1, 2]],
            [x[[0, 1, 2, 4]], x[[0, 1, 2, 5]], x[[0, 1, 3, 4]], x[[0, 1, 3, 5]]].into_iter().fold(f32::MIN, f32::max)
        );
        let dy = random(y.dim(), 9);
        let dx = maxpool2_backward(&dy, &arg, 4, 6);
        assert!((dx.sum() - dy.sum()).abs() < 1e-5);

        // <up(a), b> == <a, up_backward(b)>
        let a = random((1, 2, 3, 3), 10);
        let b = random((1, 2, 6, 6), 11);
        let lhs: f32 = upsample2_forward(&a).iter().zip(b.iter()).map(|(p, q)| p * q).sum();
        let rhs: f32 = a.iter().zip(upsample2_backward(&b).iter()).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-100.0) >= 0.0 && sigmoid(100.0) <= 1.0);
        assert_eq!(Act::LeakyRelu(0.2).apply(-1.0), -0.2);
        assert_eq!(Act::Relu.grad_from_output(0.0), 0.0);
    }
}
