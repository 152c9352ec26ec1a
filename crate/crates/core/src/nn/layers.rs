//! Network layers with explicit forward caches and backward passes.
//!
//! Convolutions run as one GEMM per batch over an im2col buffer; the backward pass
//! produces parameter gradients and, when requested, input gradients (the vector-Jacobian
//! product needed by the measurement-gradient correction step).

use super::scalar::Scalar;
use super::tensor::Tensor;

/// `c = alpha * op(a) @ op(b) + beta * c` with optional transposes, row-major storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        if beta.to_f64() == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = T::ZERO);
        }
        return;
    }
    T::gemm_strided(m, k, n, alpha, a, ta, b, tb, beta, c);
}

pub struct ConvShape {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// im2col over a whole batch: columns ordered `(image, y, x)`, rows `(ci, ky, kx)`.
/// `cols` must be zero-initialized; only in-bounds samples are written.
fn im2col<T: Scalar>(input: &Tensor<T>, cs: &ConvShape, cols: &mut [T]) {
    let (n, ci, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (ho, wo) = cs.out_hw(h, w);
    let howo = ho * wo;
    let k = cs.kernel;
    let cols_n = n * howo;
    let stride1 = cs.stride == 1 && wo == w && ho == h;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let row = &mut cols[r * cols_n..(r + 1) * cols_n];
                let off = kx as isize - cs.pad as isize;
                for img in 0..n {
                    let plane = &input.data[(img * ci + c) * h * w..(img * ci + c + 1) * h * w];
                    let seg = &mut row[img * howo..(img + 1) * howo];
                    for y in 0..ho {
                        let sy = (y * cs.stride + ky) as isize - cs.pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        if stride1 {
                            // Row copy shifted by kx - pad, edges stay zero.
                            let lo = 0.max(-off) as usize;
                            let hi = (wo as isize).min(w as isize - off) as usize;
                            if lo < hi {
                                seg[y * wo + lo..y * wo + hi]
                                    .copy_from_slice(&src[(lo as isize + off) as usize..(hi as isize + off) as usize]);
                            }
                        } else {
                            for x in 0..wo {
                                let sx = (x * cs.stride) as isize + off;
                                if sx >= 0 && sx < w as isize {
                                    seg[y * wo + x] = src[sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transpose scatter-add of [`im2col`].
fn col2im<T: Scalar>(cols: &[T], cs: &ConvShape, dinput: &mut Tensor<T>) {
    let (n, ci, h, w) = (dinput.dim(0), dinput.dim(1), dinput.dim(2), dinput.dim(3));
    let (ho, wo) = cs.out_hw(h, w);
    let howo = ho * wo;
    let k = cs.kernel;
    let cols_n = n * howo;
    let stride1 = cs.stride == 1 && wo == w && ho == h;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let row = &cols[r * cols_n..(r + 1) * cols_n];
                let off = kx as isize - cs.pad as isize;
                for img in 0..n {
                    let plane_off = (img * ci + c) * h * w;
                    let seg = &row[img * howo..(img + 1) * howo];
                    for y in 0..ho {
                        let sy = (y * cs.stride + ky) as isize - cs.pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst_off = plane_off + sy as usize * w;
                        if stride1 {
                            let lo = 0.max(-off) as usize;
                            let hi = (wo as isize).min(w as isize - off) as usize;
                            let dst = &mut dinput.data[dst_off + (lo as isize + off) as usize
                                ..dst_off + (hi as isize + off) as usize];
                            for (d, s) in dst.iter_mut().zip(&seg[y * wo + lo..y * wo + hi]) {
                                *d += *s;
                            }
                        } else {
                            for x in 0..wo {
                                let sx = (x * cs.stride) as isize + off;
                                if sx >= 0 && sx < w as isize {
                                    dinput.data[dst_off + sx as usize] += seg[y * wo + x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: Vec<usize>,
}

/// 2D convolution, weight `[co, ci, k, k]`, bias `[co]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    cs: &ConvShape,
) -> (Tensor<T>, ConvCache<T>) {
    let (n, ci, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let co = weight.dim(0);
    debug_assert_eq!(weight.dim(1), ci);
    let (ho, wo) = cs.out_hw(h, w);
    let howo = ho * wo;
    let kk = ci * cs.kernel * cs.kernel;
    let cols_n = n * howo;

    let mut cols = vec![T::ZERO; kk * cols_n];
    im2col(input, cs, &mut cols);

    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    if n == 1 {
        // Single image: the GEMM output layout is already [co, ho, wo].
        for c in 0..co {
            out.data[c * howo..(c + 1) * howo].iter_mut().for_each(|v| *v = bias.data[c]);
        }
        gemm(co, kk, cols_n, T::ONE, &weight.data, false, &cols, false, T::ONE, &mut out.data);
    } else {
        // outg[co, (n, y, x)] = W @ cols, then scatter per image.
        let mut outg = vec![T::ZERO; co * cols_n];
        gemm(co, kk, cols_n, T::ONE, &weight.data, false, &cols, false, T::ZERO, &mut outg);
        for c in 0..co {
            let b = bias.data[c];
            for img in 0..n {
                let src = &outg[c * cols_n + img * howo..c * cols_n + (img + 1) * howo];
                let dst = &mut out.data[(img * co + c) * howo..(img * co + c + 1) * howo];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + b;
                }
            }
        }
    }
    (out, ConvCache { cols, in_shape: input.shape.clone() })
}

/// Backward pass of [`conv2d`]. Accumulates into `dweight`/`dbias`; returns the input
/// gradient when `want_dinput` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    dout: &Tensor<T>,
    weight: &Tensor<T>,
    cache: &ConvCache<T>,
    cs: &ConvShape,
    dweight: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
    want_dinput: bool,
) -> Option<Tensor<T>> {
    let (n, co, ho, wo) = (dout.dim(0), dout.dim(1), dout.dim(2), dout.dim(3));
    let howo = ho * wo;
    let cols_n = n * howo;
    let kk = weight.dim(1) * cs.kernel * cs.kernel;

    // Gather dout to [co, (n, y, x)]; at batch 1 the layouts coincide.
    let dog: std::borrow::Cow<[T]> = if n == 1 {
        std::borrow::Cow::Borrowed(&dout.data)
    } else {
        let mut dog = vec![T::ZERO; co * cols_n];
        for img in 0..n {
            for c in 0..co {
                let src = &dout.data[(img * co + c) * howo..(img * co + c + 1) * howo];
                dog[c * cols_n + img * howo..c * cols_n + (img + 1) * howo].copy_from_slice(src);
            }
        }
        std::borrow::Cow::Owned(dog)
    };

    for c in 0..co {
        let mut acc = T::ZERO;
        for v in &dog[c * cols_n..(c + 1) * cols_n] {
            acc += *v;
        }
        dbias.data[c] += acc;
    }

    // dW += dog @ cols^T
    gemm(co, cols_n, kk, T::ONE, &dog, false, &cache.cols, true, T::ONE, &mut dweight.data);

    if !want_dinput {
        return None;
    }
    // dcols = W^T @ dog
    let mut dcols = vec![T::ZERO; kk * cols_n];
    gemm(kk, co, cols_n, T::ONE, &weight.data, true, &dog, false, T::ZERO, &mut dcols);
    let mut dinput = Tensor::zeros(&cache.in_shape);
    col2im(&dcols, cs, &mut dinput);
    Some(dinput)
}

pub struct NormCache<T> {
    xhat: Tensor<T>,
    invstd: Vec<T>,
}

pub const NORM_EPS: f64 = 1e-5;

/// Group normalization over `[n, c, h, w]`, per-channel affine.
pub fn group_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> (Tensor<T>, NormCache<T>) {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    debug_assert_eq!(c % groups, 0);
    let cg = c / groups;
    let m = cg * h * w;
    let mut xhat = Tensor::zeros(&input.shape);
    let mut out = Tensor::zeros(&input.shape);
    let mut invstd = vec![T::ZERO; n * groups];

    let hw = h * w;
    for img in 0..n {
        for g in 0..groups {
            let off = (img * c + g * cg) * hw;
            let x = &input.data[off..off + m];
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for v in x {
                let f = v.to_f64();
                sum += f;
                sumsq += f * f;
            }
            let mean = sum / m as f64;
            let var = (sumsq / m as f64 - mean * mean).max(0.0);
            let istd = T::from_f64(1.0 / (var + NORM_EPS).sqrt());
            invstd[img * groups + g] = istd;
            let mean_t = T::from_f64(mean);
            for ci in 0..cg {
                let ch = g * cg + ci;
                let (ga, be) = (gamma.data[ch], beta.data[ch]);
                let base = off + ci * hw;
                for i in 0..hw {
                    let xh = (input.data[base + i] - mean_t) * istd;
                    xhat.data[base + i] = xh;
                    out.data[base + i] = ga * xh + be;
                }
            }
        }
    }
    (out, NormCache { xhat, invstd })
}

pub fn group_norm_backward<T: Scalar>(
    dout: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    groups: usize,
    dgamma: &mut Tensor<T>,
    dbeta: &mut Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = (dout.dim(0), dout.dim(1), dout.dim(2), dout.dim(3));
    let cg = c / groups;
    let hw = h * w;
    let m = cg * hw;
    let mut dinput = Tensor::zeros(&dout.shape);

    for img in 0..n {
        for ch in 0..c {
            let off = (img * c + ch) * hw;
            let mut dg = T::ZERO;
            let mut db = T::ZERO;
            for i in 0..hw {
                dg += dout.data[off + i] * cache.xhat.data[off + i];
                db += dout.data[off + i];
            }
            dgamma.data[ch] += dg;
            dbeta.data[ch] += db;
        }
        for g in 0..groups {
            let off = (img * c + g * cg) * hw;
            let istd = cache.invstd[img * groups + g];
            // dxhat = dout * gamma, then the standard normalization backward.
            let mut sum_dxhat = T::ZERO;
            let mut sum_dxhat_xhat = T::ZERO;
            for ci in 0..cg {
                let ga = gamma.data[g * cg + ci];
                let base = off + ci * hw;
                for i in 0..hw {
                    let dxh = dout.data[base + i] * ga;
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * cache.xhat.data[base + i];
                }
            }
            let inv_m = T::from_f64(1.0 / m as f64);
            let c1 = inv_m * sum_dxhat;
            let c2 = inv_m * sum_dxhat_xhat;
            for ci in 0..cg {
                let ga = gamma.data[g * cg + ci];
                let base = off + ci * hw;
                for i in 0..hw {
                    let dxh = dout.data[base + i] * ga;
                    dinput.data[base + i] = istd * (dxh - c1 - cache.xhat.data[base + i] * c2);
                }
            }
        }
    }
    dinput
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

/// SiLU activation `x * sigmoid(x)`; returns the input as cache.
pub fn silu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data.iter_mut() {
        *v = *v * sigmoid(*v);
    }
    out
}

pub fn silu_backward<T: Scalar>(dout: &Tensor<T>, input: &Tensor<T>) -> Tensor<T> {
    let mut din = dout.clone();
    for (d, x) in din.data.iter_mut().zip(&input.data) {
        let s = sigmoid(*x);
        *d = *d * s * (T::ONE + *x * (T::ONE - s));
    }
    din
}

/// Fully connected layer, input `[n, di]`, weight `[do, di]`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (n, di) = (input.dim(0), input.dim(1));
    let dout = weight.dim(0);
    let mut out = Tensor::zeros(&[n, dout]);
    gemm(n, di, dout, T::ONE, &input.data, false, &weight.data, true, T::ZERO, &mut out.data);
    for img in 0..n {
        for j in 0..dout {
            out.data[img * dout + j] += bias.data[j];
        }
    }
    out
}

pub fn linear_backward<T: Scalar>(
    dout: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dweight: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
) -> Tensor<T> {
    let (n, di) = (input.dim(0), input.dim(1));
    let do_ = weight.dim(0);
    // dW += dout^T @ input
    gemm(do_, n, di, T::ONE, &dout.data, true, &input.data, false, T::ONE, &mut dweight.data);
    for img in 0..n {
        for j in 0..do_ {
            dbias.data[j] += dout.data[img * do_ + j];
        }
    }
    let mut dinput = Tensor::zeros(&input.shape);
    gemm(n, do_, di, T::ONE, &dout.data, false, &weight.data, false, T::ZERO, &mut dinput.data);
    dinput
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for plane in 0..n * c {
        let src = &input.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                let o = 2 * y * 2 * w + 2 * x;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + 2 * w] = v;
                dst[o + 2 * w + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(dout: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = (dout.dim(0), dout.dim(1), dout.dim(2), dout.dim(3));
    let (h, w) = (h2 / 2, w2 / 2);
    let mut din = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        let src = &dout.data[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut din.data[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let o = 2 * y * w2 + 2 * x;
                dst[y * w + x] = src[o] + src[o + 1] + src[o + w2] + src[o + w2 + 1];
            }
        }
    }
    din
}

/// Broadcast-add a per-(image, channel) embedding over the spatial grid.
pub fn add_channel_embed<T: Scalar>(input: &mut Tensor<T>, emb: &Tensor<T>) {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    debug_assert_eq!(emb.shape, vec![n, c]);
    for img in 0..n {
        for ch in 0..c {
            let v = emb.data[img * c + ch];
            for p in input.data[(img * c + ch) * h * w..(img * c + ch + 1) * h * w].iter_mut() {
                *p += v;
            }
        }
    }
}

pub fn channel_embed_backward<T: Scalar>(dout: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (dout.dim(0), dout.dim(1), dout.dim(2), dout.dim(3));
    let mut demb = Tensor::zeros(&[n, c]);
    for img in 0..n {
        for ch in 0..c {
            let mut acc = T::ZERO;
            for p in &dout.data[(img * c + ch) * h * w..(img * c + ch + 1) * h * w] {
                acc += *p;
            }
            demb.data[img * c + ch] = acc;
        }
    }
    demb
}

/// Sinusoidal embedding of integer steps: `dim/2` log-spaced frequencies, sin then cos.
pub fn sinusoidal_embed<T: Scalar>(steps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[steps.len(), dim]);
    for (i, &t) in steps.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out.data[i * dim + j] = T::from_f64(arg.sin());
            out.data[i * dim + half + j] = T::from_f64(arg.cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_tensor(shape: &[usize]) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i * 37 % 19) as f64 - 9.0) * 0.11).collect())
    }

    /// Direct convolution reference.
    fn conv_ref(input: &Tensor<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>, cs: &ConvShape) -> Tensor<f64> {
        let (n, ci, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
        let co = weight.dim(0);
        let (ho, wo) = cs.out_hw(h, w);
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for img in 0..n {
            for oc in 0..co {
                for y in 0..ho {
                    for x in 0..wo {
                        let mut acc = bias.data[oc];
                        for ic in 0..ci {
                            for ky in 0..cs.kernel {
                                for kx in 0..cs.kernel {
                                    let sy = (y * cs.stride + ky) as isize - cs.pad as isize;
                                    let sx = (x * cs.stride + kx) as isize - cs.pad as isize;
                                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                        acc += input.data[((img * ci + ic) * h + sy as usize) * w + sx as usize]
                                            * weight.data[((oc * ci + ic) * cs.kernel + ky) * cs.kernel + kx];
                                    }
                                }
                            }
                        }
                        out.data[((img * co + oc) * ho + y) * wo + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_reference() {
        for stride in [1, 2] {
            let cs = ConvShape { kernel: 3, stride, pad: 1 };
            let input = seq_tensor(&[2, 3, 8, 8]);
            let weight = seq_tensor(&[4, 3, 3, 3]);
            let bias = seq_tensor(&[4]);
            let (out, _) = conv2d(&input, &weight, &bias, &cs);
            let reference = conv_ref(&input, &weight, &bias, &cs);
            assert_eq!(out.shape, reference.shape);
            for (a, b) in out.data.iter().zip(&reference.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let cs = ConvShape { kernel: 3, stride: 1, pad: 1 };
        let input = seq_tensor(&[1, 2, 5, 5]);
        let weight = seq_tensor(&[3, 2, 3, 3]);
        let bias = seq_tensor(&[3]);
        // Scalar loss: weighted sum of outputs.
        let loss = |inp: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let (out, _) = conv2d(inp, w, b, &cs);
            out.data.iter().enumerate().map(|(i, v)| v * ((i % 7) as f64 - 3.0)).sum()
        };
        let (out, cache) = conv2d(&input, &weight, &bias, &cs);
        let dout = Tensor::from_vec(
            &out.shape,
            (0..out.len()).map(|i| (i % 7) as f64 - 3.0).collect(),
        );
        let mut dw = Tensor::zeros(&weight.shape);
        let mut db = Tensor::zeros(&bias.shape);
        let din = conv2d_backward(&dout, &weight, &cache, &cs, &mut dw, &mut db, true).unwrap();

        let h = 1e-6;
        for idx in [0usize, 7, 23, 49] {
            let mut wp = weight.clone();
            wp.data[idx] += h;
            let mut wm = weight.clone();
            wm.data[idx] -= h;
            let fd = (loss(&input, &wp, &bias) - loss(&input, &wm, &bias)) / (2.0 * h);
            assert!((fd - dw.data[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "dw[{idx}]: {fd} vs {}", dw.data[idx]);
        }
        for idx in [0usize, 11, 31] {
            let mut ip = input.clone();
            ip.data[idx] += h;
            let mut im = input.clone();
            im.data[idx] -= h;
            let fd = (loss(&ip, &weight, &bias) - loss(&im, &weight, &bias)) / (2.0 * h);
            assert!((fd - din.data[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn group_norm_backward_matches_finite_differences() {
        let input = seq_tensor(&[2, 4, 3, 3]);
        let gamma = Tensor::from_vec(&[4], vec![1.1, 0.9, 1.3, 0.7]);
        let beta = Tensor::from_vec(&[4], vec![0.1, -0.2, 0.0, 0.3]);
        let groups = 2;
        let loss = |inp: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let (out, _) = group_norm(inp, g, b, groups);
            out.data.iter().enumerate().map(|(i, v)| v * ((i % 5) as f64 - 2.0)).sum()
        };
        let (out, cache) = group_norm(&input, &gamma, &beta, groups);
        let dout = Tensor::from_vec(&out.shape, (0..out.len()).map(|i| (i % 5) as f64 - 2.0).collect());
        let mut dg = Tensor::zeros(&gamma.shape);
        let mut db = Tensor::zeros(&beta.shape);
        let din = group_norm_backward(&dout, &gamma, &cache, groups, &mut dg, &mut db);

        let h = 1e-6;
        for idx in [0usize, 5, 17, 35] {
            let mut ip = input.clone();
            ip.data[idx] += h;
            let mut im = input.clone();
            im.data[idx] -= h;
            let fd = (loss(&ip, &gamma, &beta) - loss(&im, &gamma, &beta)) / (2.0 * h);
            assert!((fd - din.data[idx]).abs() < 1e-5 * (1.0 + fd.abs()), "din[{idx}]: {fd} vs {}", din.data[idx]);
        }
        for idx in 0..4 {
            let mut gp = gamma.clone();
            gp.data[idx] += h;
            let mut gm = gamma.clone();
            gm.data[idx] -= h;
            let fd = (loss(&input, &gp, &beta) - loss(&input, &gm, &beta)) / (2.0 * h);
            assert!((fd - dg.data[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        // <up(x), y> == <x, up_backward(y)>
        let x = seq_tensor(&[1, 2, 4, 4]);
        let y = seq_tensor(&[1, 2, 8, 8]);
        let up = upsample2x(&x);
        let down = upsample2x_backward(&y);
        let lhs: f64 = up.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&down.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn sinusoidal_embed_is_bounded_and_distinct() {
        let e = sinusoidal_embed::<f64>(&[1, 500, 1000], 16);
        assert!(e.data.iter().all(|v| v.abs() <= 1.0));
        let rows: Vec<&[f64]> = e.data.chunks(16).collect();
        assert_ne!(rows[0], rows[1]);
        assert_ne!(rows[1], rows[2]);
    }
}
