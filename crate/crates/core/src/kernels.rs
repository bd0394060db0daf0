//! Forward and backward kernels for the spatial operators.
//!
//! Convolutions are lowered to im2col + GEMM. All heavy loops are split into
//! fixed-size blocks through [`crate::par`].

use ndarray::{s, ArrayView2, ArrayViewMut2, Axis};

use crate::par;
use crate::tensor::Tensor;

const ROW_BLOCK: usize = 16;
const COL_BLOCK: usize = 512;
const IM2COL_ROWS: usize = 8;

/// Geometry of a convolution over one C×H×W plane stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// `None` when the kernel does not fit the padded input.
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output spatial size of a convolution, or `None` if it would be empty.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if size + 2 * pad < k || stride == 0 {
        None
    } else {
        Some((size + 2 * pad - k) / stride + 1)
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let mut cols = vec![0.0; g.rows() * ncols];
    par::chunks_mut(&mut cols, IM2COL_ROWS * ncols, |chunk_idx, chunk| {
        for (local, row) in chunk.chunks_mut(ncols).enumerate() {
            let r = chunk_idx * IM2COL_ROWS + local;
            let kj = r % g.kw;
            let ki = (r / g.kw) % g.kh;
            let ci = r / (g.kw * g.kh);
            let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for oy in 0..g.oh {
                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                for (ox, d) in dst.iter_mut().enumerate() {
                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                    if ix >= 0 && ix < g.w as isize {
                        *d = src[ix as usize];
                    }
                }
            }
        }
    });
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let mut out = vec![0.0; g.c * g.h * g.w];
    par::chunks_mut(&mut out, g.h * g.w, |ci, plane| {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    });
    out
}

/// `out[m×n] = a·b`, or `out += a·b` when `accumulate` is set.
fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>, out: &mut [f64], accumulate: bool) {
    let (m, k) = a.dim();
    let n = b.ncols();
    assert_eq!(b.nrows(), k);
    assert_eq!(out.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m >= 2 * ROW_BLOCK {
        par::chunks_mut(out, ROW_BLOCK * n, |ci, chunk| {
            let r0 = ci * ROW_BLOCK;
            let rows = chunk.len() / n;
            let a_blk = a.slice(s![r0..r0 + rows, ..]);
            let mut c_blk = ArrayViewMut2::from_shape((rows, n), chunk).expect("row block");
            ndarray::linalg::general_mat_mul(1.0, &a_blk, &b, beta, &mut c_blk);
        });
    } else {
        let mut c = ArrayViewMut2::from_shape((m, n), out).expect("matmul output");
        let blocks: Vec<(usize, ArrayViewMut2<f64>)> = c
            .axis_chunks_iter_mut(Axis(1), COL_BLOCK)
            .enumerate()
            .collect();
        par::for_each(blocks, |(bi, mut c_blk)| {
            let j0 = bi * COL_BLOCK;
            let cols = c_blk.ncols();
            let b_blk = b.slice(s![.., j0..j0 + cols]);
            ndarray::linalg::general_mat_mul(1.0, &a, &b_blk, beta, &mut c_blk);
        });
    }
}

fn view2(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("2-D view")
}

/// Plain convolution. `w` is O×C×kh×kw; zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (o, wc, kh, kw) = w.dims4();
    assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
    let g = ConvGeom::new(c, h, wd, kh, kw, stride, pad)
        .unwrap_or_else(|| panic!("conv2d: kernel {kh}×{kw} does not fit {h}×{wd} (pad {pad})"));
    let plane_in = c * h * wd;
    let plane_out = o * g.cols();
    let mut out = vec![0.0; n * plane_out];
    let wmat = view2(w.data(), o, g.rows());
    for i in 0..n {
        let cols = im2col(&x.data()[i * plane_in..(i + 1) * plane_in], &g);
        let dst = &mut out[i * plane_out..(i + 1) * plane_out];
        matmul(wmat, view2(&cols, g.rows(), g.cols()), dst, false);
        if let Some(b) = b {
            add_channel_bias(dst, b.data(), g.cols());
        }
    }
    Tensor::new(vec![n, o, g.oh, g.ow], out)
}

fn add_channel_bias(dst: &mut [f64], bias: &[f64], plane: usize) {
    for (ch, bv) in dst.chunks_mut(plane).zip(bias) {
        for v in ch {
            *v += bv;
        }
    }
}

fn channel_sums(g: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = g.dims4();
    let mut sums = vec![0.0; c];
    for i in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            let off = (i * c + ch) * h * w;
            *s += g.data()[off..off + h * w].iter().sum::<f64>();
        }
    }
    sums
}

/// Which gradients a convolution backward pass should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wanted {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

impl Wanted {
    pub const ALL: Wanted = Wanted {
        input: true,
        weight: true,
        bias: true,
    };
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    wanted: Wanted,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, c, h, wd) = x.dims4();
    let (o, _, kh, kw) = w.dims4();
    let g = ConvGeom::new(c, h, wd, kh, kw, stride, pad).expect("conv geometry");
    let plane_in = c * h * wd;
    let plane_out = o * g.cols();
    let wmat = view2(w.data(), o, g.rows());
    let mut dx = wanted.input.then(|| vec![0.0; n * plane_in]);
    let mut dw = wanted.weight.then(|| vec![0.0; w.numel()]);
    for i in 0..n {
        let gmat = view2(&gout.data()[i * plane_out..(i + 1) * plane_out], o, g.cols());
        if let Some(dw) = dw.as_mut() {
            let cols = im2col(&x.data()[i * plane_in..(i + 1) * plane_in], &g);
            let cols_t = view2(&cols, g.rows(), g.cols()).reversed_axes();
            matmul(gmat, cols_t, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcols = vec![0.0; g.rows() * g.cols()];
            matmul(wmat.t(), gmat, &mut dcols, false);
            let img = col2im(&dcols, &g);
            dx[i * plane_in..(i + 1) * plane_in].copy_from_slice(&img);
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::new(w.shape().to_vec(), d)),
        wanted.bias.then(|| Tensor::new(vec![o], channel_sums(gout))),
    )
}

/// Geometry of the convolution whose adjoint is the transposed convolution.
#[allow(clippy::too_many_arguments)]
fn transposed_geom(
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> ConvGeom {
    assert!(out_pad < stride.max(1), "output padding must be below stride");
    let oh = (h - 1) * stride + kh + out_pad;
    let ow = (w - 1) * stride + kw + out_pad;
    assert!(oh > 2 * pad && ow > 2 * pad, "transposed conv output is empty");
    let g = ConvGeom::new(cout, oh - 2 * pad, ow - 2 * pad, kh, kw, stride, pad)
        .expect("transposed geometry");
    debug_assert_eq!((g.oh, g.ow), (h, w));
    g
}

/// Transposed convolution. `w` is Cin×Cout×kh×kw (the PyTorch layout).
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (wcin, cout, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "conv_transpose2d: channel mismatch");
    let g = transposed_geom(cout, h, wd, kh, kw, stride, pad, out_pad);
    let plane_in = cin * h * wd;
    let plane_out = cout * g.h * g.w;
    let wmat = view2(w.data(), cin, g.rows());
    let mut out = vec![0.0; n * plane_out];
    for i in 0..n {
        let xin = view2(&x.data()[i * plane_in..(i + 1) * plane_in], cin, h * wd);
        let mut cols = vec![0.0; g.rows() * g.cols()];
        matmul(wmat.t(), xin, &mut cols, false);
        let img = col2im(&cols, &g);
        let dst = &mut out[i * plane_out..(i + 1) * plane_out];
        dst.copy_from_slice(&img);
        if let Some(b) = b {
            add_channel_bias(dst, b.data(), g.h * g.w);
        }
    }
    Tensor::new(vec![n, cout, g.h, g.w], out)
}

/// Gradients of [`conv_transpose2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    out_pad: usize,
    wanted: Wanted,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, wd) = x.dims4();
    let (_, cout, kh, kw) = w.dims4();
    let g = transposed_geom(cout, h, wd, kh, kw, stride, pad, out_pad);
    let plane_in = cin * h * wd;
    let plane_out = cout * g.h * g.w;
    let wmat = view2(w.data(), cin, g.rows());
    let mut dx = wanted.input.then(|| vec![0.0; n * plane_in]);
    let mut dw = wanted.weight.then(|| vec![0.0; w.numel()]);
    for i in 0..n {
        let gcols = im2col(&gout.data()[i * plane_out..(i + 1) * plane_out], &g);
        let gmat = view2(&gcols, g.rows(), g.cols());
        if let Some(dx) = dx.as_mut() {
            matmul(wmat, gmat, &mut dx[i * plane_in..(i + 1) * plane_in], false);
        }
        if let Some(dw) = dw.as_mut() {
            let xin = view2(&x.data()[i * plane_in..(i + 1) * plane_in], cin, h * wd);
            matmul(xin, gmat.reversed_axes(), dw, true);
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::new(w.shape().to_vec(), d)),
        wanted.bias.then(|| Tensor::new(vec![cout], channel_sums(gout))),
    )
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Reflection padding of every plane by `pad` pixels. Requires `pad < min(h, w)`.
pub fn reflect_pad(x: &Tensor, pad: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(
        pad < h && pad < w,
        "reflection pad {pad} needs spatial size above {pad}, got {h}×{w}"
    );
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; n * c * ph * pw];
    par::chunks_mut(&mut out, ph * pw, |p, plane| {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ph {
            let sy = reflect_index(y as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = reflect_index(xx as isize - pad as isize, w);
                plane[y * pw + xx] = src[sy * w + sx];
            }
        }
    });
    Tensor::new(vec![n, c, ph, pw], out)
}

pub fn reflect_pad_backward(gout: &Tensor, pad: usize, h: usize, w: usize) -> Tensor {
    let (n, c, ph, pw) = gout.dims4();
    let mut out = vec![0.0; n * c * h * w];
    par::chunks_mut(&mut out, h * w, |p, plane| {
        let src = &gout.data()[p * ph * pw..(p + 1) * ph * pw];
        for y in 0..ph {
            let sy = reflect_index(y as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = reflect_index(xx as isize - pad as isize, w);
                plane[sy * w + sx] += src[y * pw + xx];
            }
        }
    });
    Tensor::new(vec![n, c, h, w], out)
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-sample, per-channel normalization. Returns `(output, x_hat, inv_std)`.
pub fn instance_norm(
    x: &Tensor,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
) -> (Tensor, Tensor, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    let m = h * w;
    let mut xhat = vec![0.0; x.numel()];
    let inv: Vec<f64> = par::map_range(n * c, |p| {
        let src = &x.data()[p * m..(p + 1) * m];
        let mean = src.iter().sum::<f64>() / m as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        1.0 / (var + NORM_EPS).sqrt()
    });
    par::chunks_mut(&mut xhat, m, |p, plane| {
        let src = &x.data()[p * m..(p + 1) * m];
        let mean = src.iter().sum::<f64>() / m as f64;
        for (d, s) in plane.iter_mut().zip(src) {
            *d = (s - mean) * inv[p];
        }
    });
    let mut out = xhat.clone();
    for (p, plane) in out.chunks_mut(m).enumerate() {
        let ch = p % c;
        let gm = gamma.map_or(1.0, |g| g.data()[ch]);
        let bt = beta.map_or(0.0, |b| b.data()[ch]);
        if gm != 1.0 || bt != 0.0 {
            for v in plane {
                *v = gm * *v + bt;
            }
        }
    }
    let shape = x.shape().to_vec();
    (
        Tensor::new(shape.clone(), out),
        Tensor::new(shape, xhat),
        inv,
    )
}

/// Gradients of [`instance_norm`]: `(d_input, d_gamma, d_beta)`.
pub fn instance_norm_backward(
    gout: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: Option<&Tensor>,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = gout.dims4();
    let m = h * w;
    let mut dx = vec![0.0; gout.numel()];
    par::chunks_mut(&mut dx, m, |p, plane| {
        let ch = p % c;
        let gm = gamma.map_or(1.0, |g| g.data()[ch]);
        let go = &gout.data()[p * m..(p + 1) * m];
        let xh = &xhat.data()[p * m..(p + 1) * m];
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for (g, xv) in go.iter().zip(xh) {
            let d = g * gm;
            s1 += d;
            s2 += d * xv;
        }
        let scale = inv_std[p] / m as f64;
        for ((d, g), xv) in plane.iter_mut().zip(go).zip(xh) {
            *d = scale * (m as f64 * g * gm - s1 - xv * s2);
        }
    });
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * m;
            let go = &gout.data()[off..off + m];
            let xh = &xhat.data()[off..off + m];
            dgamma[ch] += go.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
            dbeta[ch] += go.iter().sum::<f64>();
        }
    }
    (
        Tensor::new(gout.shape().to_vec(), dx),
        Tensor::new(vec![c], dgamma),
        Tensor::new(vec![c], dbeta),
    )
}

/// Max pooling with implicit −∞ padding. Returns the output and the flat
/// input index chosen for every output element.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, pad: usize) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    let oh = conv_out(h, k, stride, pad).expect("max_pool2d: window larger than input");
    let ow = conv_out(w, k, stride, pad).expect("max_pool2d: window larger than input");
    let planes: Vec<(Vec<f64>, Vec<usize>)> = par::map_range(n * c, |p| {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let mut vals = vec![f64::NEG_INFINITY; oh * ow];
        let mut idx = vec![0usize; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = oy * ow + ox;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let flat = iy as usize * w + ix as usize;
                        if src[flat] > vals[o] {
                            vals[o] = src[flat];
                            idx[o] = p * h * w + flat;
                        }
                    }
                }
            }
        }
        (vals, idx)
    });
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for (v, i) in planes {
        out.extend(v);
        arg.extend(i);
    }
    (Tensor::new(vec![n, c, oh, ow], out), arg)
}

pub fn max_pool2d_backward(gout: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (g, &i) in gout.data().iter().zip(argmax) {
        d[i] += g;
    }
    dx
}

pub const UNIT_NORM_EPS: f64 = 1e-10;

/// Scales every channel vector (fixed n, y, x) to unit length:
/// `x / (‖x‖ + eps)`. Returns the output and the per-position norms.
pub fn unit_normalize_channels(x: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    let m = h * w;
    let mut norms = vec![0.0; n * m];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * m;
            for (p, v) in x.data()[off..off + m].iter().enumerate() {
                norms[i * m + p] += v * v;
            }
        }
    }
    for v in norms.iter_mut() {
        *v = v.sqrt();
    }
    let mut out = x.data().to_vec();
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * m;
            for (p, v) in out[off..off + m].iter_mut().enumerate() {
                *v /= norms[i * m + p] + UNIT_NORM_EPS;
            }
        }
    }
    (Tensor::new(x.shape().to_vec(), out), norms)
}

pub fn unit_normalize_channels_backward(x: &Tensor, norms: &[f64], gout: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let m = h * w;
    let mut dots = vec![0.0; n * m];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * m;
            for p in 0..m {
                dots[i * m + p] += gout.data()[off + p] * x.data()[off + p];
            }
        }
    }
    let mut dx = vec![0.0; x.numel()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * m;
            for p in 0..m {
                let nrm = norms[i * m + p];
                let d = nrm + UNIT_NORM_EPS;
                let mut g = gout.data()[off + p] / d;
                if nrm > 0.0 {
                    g -= x.data()[off + p] * dots[i * m + p] / (d * d * nrm);
                }
                dx[off + p] = g;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}
