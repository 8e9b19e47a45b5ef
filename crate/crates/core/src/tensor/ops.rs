//! Differentiable operations recorded on a [`Graph`].

use super::element::{gemm, Layout};
use super::{Element, Graph, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::exec::Exec;

fn same_shape<T: Element>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(dim_err(
            op,
            format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

fn sign<T: Element>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn add<T: Element>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, "add", a, b)?;
    let out = g.value(a).zip_map(g.value(b), |x, y| x + y)?;
    g.push(
        "add",
        &[a, b],
        out,
        Box::new(|grad, _| Ok(vec![Some(grad.clone()), Some(grad.clone())])),
    )
}

pub fn sub<T: Element>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, "sub", a, b)?;
    let out = g.value(a).zip_map(g.value(b), |x, y| x - y)?;
    g.push(
        "sub",
        &[a, b],
        out,
        Box::new(|grad, _| Ok(vec![Some(grad.clone()), Some(grad.map(|v| -v))])),
    )
}

/// Elementwise product.
pub fn mul<T: Element>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, "mul", a, b)?;
    let (av, bv) = (g.value(a).clone(), g.value(b).clone());
    let out = av.zip_map(&bv, |x, y| x * y)?;
    g.push(
        "mul",
        &[a, b],
        out,
        Box::new(move |grad, need| {
            let da = if need[0] { Some(grad.zip_map(&bv, |d, y| d * y)?) } else { None };
            let db = if need[1] { Some(grad.zip_map(&av, |d, x| d * x)?) } else { None };
            Ok(vec![da, db])
        }),
    )
}

pub fn scale<T: Element>(g: &mut Graph<T>, a: Var, factor: T) -> Result<Var> {
    let out = g.value(a).map(|v| v * factor);
    g.push(
        "scale",
        &[a],
        out,
        Box::new(move |grad, _| Ok(vec![Some(grad.map(|d| d * factor))])),
    )
}

/// Sum of all elements as a scalar. Accumulates in f64.
pub fn sum<T: Element>(g: &mut Graph<T>, a: Var) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    let out = Tensor::scalar(g.value(a).sum());
    g.push(
        "sum",
        &[a],
        out,
        Box::new(move |grad, _| Ok(vec![Some(Tensor::full(shape, grad.data()[0]))])),
    )
}

pub fn mean<T: Element>(g: &mut Graph<T>, a: Var) -> Result<Var> {
    let n = g.value(a).len().max(1);
    let s = sum(g, a)?;
    scale(g, s, T::of_f64(1.0 / n as f64))
}

pub fn relu<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let xv = g.value(x).clone();
    g.note_kinks(xv.data().iter().copied());
    let out = xv.map(|v| if v > T::zero() { v } else { T::zero() });
    g.push(
        "relu",
        &[x],
        out,
        Box::new(move |grad, _| {
            Ok(vec![Some(grad.zip_map(&xv, |d, v| {
                if v > T::zero() {
                    d
                } else {
                    T::zero()
                }
            })?)])
        }),
    )
}

/// `Σ |a − b|`, with the subgradient of `|·|` at zero taken as zero.
pub fn l1_diff<T: Element>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, "l1_diff", a, b)?;
    let diff = g.value(a).zip_map(g.value(b), |x, y| x - y)?;
    g.note_kinks(diff.data().iter().copied());
    let total: f64 = diff.data().iter().map(|v| v.as_f64().abs()).sum();
    g.push(
        "l1_diff",
        &[a, b],
        Tensor::scalar(T::of_f64(total)),
        Box::new(move |grad, _| {
            let s = grad.data()[0];
            let da = diff.map(|d| sign(d) * s);
            let db = da.map(|v| -v);
            Ok(vec![Some(da), Some(db)])
        }),
    )
}

pub fn reshape<T: Element>(g: &mut Graph<T>, a: Var, shape: &[usize]) -> Result<Var> {
    let old = g.shape(a).to_vec();
    let out = g.value(a).reshape(shape.to_vec())?;
    g.push(
        "reshape",
        &[a],
        out,
        Box::new(move |grad, _| Ok(vec![Some(grad.reshape(old)?)])),
    )
}

/// Concatenate along the leading axis.
pub fn concat_rows<T: Element>(g: &mut Graph<T>, parts: &[Var]) -> Result<Var> {
    let values: Vec<Tensor<T>> = parts.iter().map(|&p| g.value(p).clone()).collect();
    let rows: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
    let out = Tensor::concat_rows(&values)?;
    g.push(
        "concat_rows",
        parts,
        out,
        Box::new(move |grad, need| {
            let mut start = 0;
            let mut res = Vec::with_capacity(rows.len());
            for (&r, &n) in rows.iter().zip(need) {
                res.push(if n { Some(grad.slice_rows(start, start + r)?) } else { None });
                start += r;
            }
            Ok(res)
        }),
    )
}

pub fn slice_rows<T: Element>(g: &mut Graph<T>, a: Var, start: usize, end: usize) -> Result<Var> {
    let full = g.shape(a).to_vec();
    let out = g.value(a).slice_rows(start, end)?;
    g.push(
        "slice_rows",
        &[a],
        out,
        Box::new(move |grad, _| {
            let stride: usize = full[1..].iter().product();
            let mut data = vec![T::zero(); full.iter().product()];
            data[start * stride..end * stride].copy_from_slice(grad.data());
            Ok(vec![Some(Tensor::new(full, data)?)])
        }),
    )
}

/// Average `groups` consecutive blocks of rows: `[G·B, ...] -> [B, ...]`,
/// output row `b` is the mean of input rows `g·B + b`.
pub fn mean_groups<T: Element>(g: &mut Graph<T>, a: Var, groups: usize) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    if groups == 0 || shape.is_empty() || !shape[0].is_multiple_of(groups) {
        return Err(dim_err(
            "mean_groups",
            format!("{shape:?} not divisible into {groups} groups"),
        ));
    }
    let block = g.value(a).len() / groups;
    let inv = T::of_f64(1.0 / groups as f64);
    let src = g.value(a).data();
    let mut out = vec![T::zero(); block];
    for gi in 0..groups {
        for (o, &v) in out.iter_mut().zip(&src[gi * block..(gi + 1) * block]) {
            *o = *o + v;
        }
    }
    out.iter_mut().for_each(|v| *v = *v * inv);
    let mut out_shape = shape.clone();
    out_shape[0] /= groups;
    g.push(
        "mean_groups",
        &[a],
        Tensor::new(out_shape, out)?,
        Box::new(move |grad, _| {
            let mut data = Vec::with_capacity(block * groups);
            for _ in 0..groups {
                data.extend(grad.data().iter().map(|&d| d * inv));
            }
            Ok(vec![Some(Tensor::new(shape, data)?)])
        }),
    )
}

fn matrix_dims<T: Element>(g: &Graph<T>, op: &'static str, a: Var) -> Result<(usize, usize)> {
    match g.shape(a) {
        [r, c] => Ok((*r, *c)),
        s => Err(dim_err(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul<T: Element>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (m, k) = matrix_dims(g, "matmul", a)?;
    let (k2, n) = matrix_dims(g, "matmul", b)?;
    if k != k2 {
        return Err(dim_err("matmul", format!("inner dims {k} vs {k2}")));
    }
    let (av, bv) = (g.value(a).clone(), g.value(b).clone());
    let mut out = vec![T::zero(); m * n];
    gemm(
        m, k, n, T::one(),
        av.data(), Layout::row_major(k),
        bv.data(), Layout::row_major(n),
        T::zero(), &mut out, Layout::row_major(n),
    );
    g.push(
        "matmul",
        &[a, b],
        Tensor::new(vec![m, n], out)?,
        Box::new(move |grad, need| {
            let dc = grad.data();
            let da = if need[0] {
                let mut d = vec![T::zero(); m * k];
                gemm(
                    m, n, k, T::one(),
                    dc, Layout::row_major(n),
                    bv.data(), Layout::transposed(n),
                    T::zero(), &mut d, Layout::row_major(k),
                );
                Some(Tensor::new(vec![m, k], d)?)
            } else {
                None
            };
            let db = if need[1] {
                let mut d = vec![T::zero(); k * n];
                gemm(
                    k, m, n, T::one(),
                    av.data(), Layout::transposed(k),
                    dc, Layout::row_major(n),
                    T::zero(), &mut d, Layout::row_major(n),
                );
                Some(Tensor::new(vec![k, n], d)?)
            } else {
                None
            };
            Ok(vec![da, db])
        }),
    )
}

/// Affine map `x[B×D] · wᵀ + b` with `w[K×D]`, `b[K]`.
pub fn linear<T: Element>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let (rows, d) = matrix_dims(g, "linear", x)?;
    let (k, d2) = matrix_dims(g, "linear", w)?;
    if d != d2 || g.shape(b) != [k] {
        return Err(dim_err(
            "linear",
            format!("x {:?}, w {:?}, b {:?}", g.shape(x), g.shape(w), g.shape(b)),
        ));
    }
    let (xv, wv) = (g.value(x).clone(), g.value(w).clone());
    let bias = g.value(b).data();
    let mut out: Vec<T> = (0..rows).flat_map(|_| bias.iter().copied()).collect();
    gemm(
        rows, d, k, T::one(),
        xv.data(), Layout::row_major(d),
        wv.data(), Layout::transposed(d),
        T::one(), &mut out, Layout::row_major(k),
    );
    g.push(
        "linear",
        &[x, w, b],
        Tensor::new(vec![rows, k], out)?,
        Box::new(move |grad, need| {
            let dy = grad.data();
            let dx = if need[0] {
                let mut v = vec![T::zero(); rows * d];
                gemm(
                    rows, k, d, T::one(),
                    dy, Layout::row_major(k),
                    wv.data(), Layout::row_major(d),
                    T::zero(), &mut v, Layout::row_major(d),
                );
                Some(Tensor::new(vec![rows, d], v)?)
            } else {
                None
            };
            let dw = if need[1] {
                let mut v = vec![T::zero(); k * d];
                gemm(
                    k, rows, d, T::one(),
                    dy, Layout::transposed(k),
                    xv.data(), Layout::row_major(d),
                    T::zero(), &mut v, Layout::row_major(d),
                );
                Some(Tensor::new(vec![k, d], v)?)
            } else {
                None
            };
            let db = if need[2] {
                let mut v = vec![T::zero(); k];
                for row in dy.chunks(k) {
                    for (a, &b) in v.iter_mut().zip(row) {
                        *a = *a + b;
                    }
                }
                Some(Tensor::new(vec![k], v)?)
            } else {
                None
            };
            Ok(vec![dx, dw, db])
        }),
    )
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }
    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }
    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }
    fn out_area(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Range of output columns `ox` whose input column `ox·s + kj − p` lies
    /// inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let ow = self.out_width();
        let (s, p) = (self.stride, self.padding);
        // ox·s + kj ≥ p  and  ox·s + kj − p < w
        let lo = p.saturating_sub(kj).div_ceil(s);
        let hi = if self.width + p > kj {
            ((self.width + p - kj - 1) / s + 1).min(ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Unfold one image `[C,H,W]` into columns `col[r][offset + p]` where
    /// `r` indexes (c, ki, kj) and `p` the output position; `ld` is the row
    /// length of `col`. Positions outside the image must already be zero in
    /// `col`.
    fn im2col<T: Element>(&self, img: &[T], col: &mut [T], ld: usize, offset: usize) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (s, p, w) = (self.stride, self.padding, self.width);
        let plane_len = self.height * w;
        assert!(img.len() >= self.channels * plane_len);
        for kj in 0..self.kw {
            let (lo, hi) = self.valid_cols(kj);
            if lo >= hi {
                continue;
            }
            let count = hi - lo;
            let first = lo * s + kj - p;
            // last source index touched in a row must be inside it
            assert!(first + (count - 1) * s < w);
            for ki in 0..self.kh {
                let oy_lo = p.saturating_sub(ki).div_ceil(s);
                let oy_hi = if self.height + p > ki {
                    ((self.height + p - ki - 1) / s + 1).min(oh)
                } else {
                    0
                };
                for c in 0..self.channels {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let row = &mut col[r * ld + offset..r * ld + offset + oh * ow];
                    let plane = &img[c * plane_len..(c + 1) * plane_len];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ki - p;
                        let src = &plane[iy * w + first..];
                        let dst = &mut row[oy * ow + lo..oy * ow + hi];
                        if s == 1 {
                            dst.copy_from_slice(&src[..count]);
                        } else {
                            let src = &src[..(count - 1) * s + 1];
                            for (j, d) in dst.iter_mut().enumerate() {
                                // SAFETY: j·s ≤ (count−1)·s < src.len()
                                *d = unsafe { *src.get_unchecked(j * s) };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatter-add columns into `img`.
    fn col2im<T: Element>(&self, col: &[T], ld: usize, offset: usize, img: &mut [T]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (s, p, w) = (self.stride, self.padding, self.width);
        let plane_len = self.height * w;
        assert!(img.len() >= self.channels * plane_len);
        for c in 0..self.channels {
            let plane = &mut img[c * plane_len..(c + 1) * plane_len];
            for ki in 0..self.kh {
                let oy_lo = p.saturating_sub(ki).div_ceil(s);
                let oy_hi = if self.height + p > ki {
                    ((self.height + p - ki - 1) / s + 1).min(oh)
                } else {
                    0
                };
                for kj in 0..self.kw {
                    let (lo, hi) = self.valid_cols(kj);
                    if lo >= hi {
                        continue;
                    }
                    let count = hi - lo;
                    let first = lo * s + kj - p;
                    assert!(first + (count - 1) * s < w);
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let row = &col[r * ld + offset..r * ld + offset + oh * ow];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ki - p;
                        let dst = &mut plane[iy * w + first..iy * w + first + (count - 1) * s + 1];
                        let src = &row[oy * ow + lo..oy * ow + hi];
                        for (j, &v) in src.iter().enumerate() {
                            // SAFETY: j·s ≤ (count−1)·s < dst.len()
                            unsafe {
                                let d = dst.get_unchecked_mut(j * s);
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-worker buffers reused across the chunks of one convolution.
struct ConvScratch<T> {
    cols: ColBuf<T>,
    mat: Vec<T>,
    dcol: Vec<T>,
}

struct ColBuf<T> {
    col: Vec<T>,
    /// Row length the zero padding in `col` was laid out for.
    col_ld: usize,
}

impl<T> Default for ConvScratch<T> {
    fn default() -> Self {
        Self {
            cols: ColBuf { col: Vec::new(), col_ld: usize::MAX },
            mat: Vec::new(),
            dcol: Vec::new(),
        }
    }
}

impl<T: Element> ConvScratch<T> {
    /// `buf` resized to `len`; contents are unspecified.
    fn sized(buf: &mut Vec<T>, len: usize) -> &mut [T] {
        buf.resize(len, T::zero());
        &mut buf[..len]
    }
}

impl<T: Element> ColBuf<T> {
    /// Unfold `cn` consecutive images into the column buffer. Entries that
    /// map to padding are never written by `im2col`, so the buffer only
    /// needs re-zeroing when the layout changes.
    fn unfold(&mut self, geo: &ConvGeometry, imgs: &[T], cn: usize) -> &[T] {
        let (patch, area) = (geo.patch(), geo.out_area());
        let ld = cn * area;
        if self.col_ld != ld {
            self.col.clear();
            self.col.resize(patch * ld, T::zero());
            self.col_ld = ld;
        }
        let img_len = imgs.len() / cn.max(1);
        for i in 0..cn {
            geo.im2col(&imgs[i * img_len..(i + 1) * img_len], &mut self.col, ld, i * area);
        }
        &self.col
    }
}

/// Columns per chunk are capped so one chunk's unfolded patch matrix stays
/// around 2^22 elements.
const COL_BUDGET: usize = 1 << 18;

/// Cross-correlation of `x[N×C×H×W]` with `kernel[F×C×kh×kw]`, zero padding.
pub fn conv2d<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    kernel: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    conv_impl(g, x, kernel, None, stride, padding, false)
}

/// Fused `relu(conv2d(x, kernel) + bias)`; the building block of the
/// classifier backbone. Numerically identical to composing the three ops.
pub fn conv2d_bias_relu<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    conv_impl(g, x, kernel, Some(bias), stride, padding, true)
}

fn conv_impl<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    fuse_relu: bool,
) -> Result<Var> {
    let (n, c, h, w) = match g.shape(x) {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => return Err(dim_err("conv2d", format!("input must be NCHW, got {s:?}"))),
    };
    let (f, kc, kh, kw) = match g.shape(kernel) {
        [f, kc, kh, kw] => (*f, *kc, *kh, *kw),
        s => return Err(dim_err("conv2d", format!("kernel must be FCkk, got {s:?}"))),
    };
    if kc != c {
        return Err(dim_err("conv2d", format!("kernel channels {kc} vs input {c}")));
    }
    if let Some(b) = bias {
        if g.shape(b) != [f] {
            return Err(dim_err("conv2d", format!("bias {:?} for {f} filters", g.shape(b))));
        }
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::Config(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let geo = ConvGeometry {
        channels: c,
        height: h,
        width: w,
        filters: f,
        kh,
        kw,
        stride,
        padding,
    };
    let (patch, area) = (geo.patch(), geo.out_area());
    let per_chunk = (COL_BUDGET / (patch * area).max(1)).clamp(1, n.max(1));
    let chunks = n.div_ceil(per_chunk).max(1);
    let xv = g.value(x).clone();
    let kv = g.value(kernel).clone();
    let bv: Option<Vec<T>> = bias.map(|b| g.value(b).data().to_vec());
    let img_len = c * h * w;

    // kink tracking needs the pre-activation values, so relu runs late then
    let relu_in_body = fuse_relu && g.kink_trace().is_none();
    let mut out = vec![T::zero(); n * f * area];
    let mut marks = vec![(); chunks];
    Exec::ambient().for_each_chunk_zip_scratch(
        &mut out,
        per_chunk * f * area,
        &mut marks,
        ConvScratch::default,
        |sc, ci, y, _| {
            let start = ci * per_chunk;
            let cn = y.len() / (f * area);
            let ld = cn * area;
            let col = sc.cols.unfold(&geo, &xv.data()[start * img_len..(start + cn) * img_len], cn);
            let mat = ConvScratch::sized(&mut sc.mat, f * ld);
            gemm(
                f, patch, ld, T::one(),
                kv.data(), Layout::row_major(patch),
                col, Layout::row_major(ld),
                T::zero(), mat, Layout::row_major(ld),
            );
            // [F, cn·area] -> [cn, F, area]
            for fi in 0..f {
                let b = bv.as_ref().map_or(T::zero(), |b| b[fi]);
                for i in 0..cn {
                    let dst = &mut y[(i * f + fi) * area..(i * f + fi + 1) * area];
                    let src = &mat[fi * ld + i * area..fi * ld + (i + 1) * area];
                    if relu_in_body {
                        for (d, &s) in dst.iter_mut().zip(src) {
                            let v = s + b;
                            *d = if v > T::zero() { v } else { T::zero() };
                        }
                    } else {
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s + b;
                        }
                    }
                }
            }
        },
    );
    if fuse_relu && !relu_in_body {
        g.note_kinks(out.iter().copied());
        out.iter_mut().for_each(|v| {
            if *v <= T::zero() {
                *v = T::zero()
            }
        });
    }
    let out = Tensor::new(vec![n, f, geo.out_height(), geo.out_width()], out)?;
    // relu output is positive exactly where the pre-activation was
    let activ = fuse_relu.then(|| out.clone());
    let mut parents = vec![x, kernel];
    parents.extend(bias);
    let need_db = bias.is_some();

    g.push(
        if fuse_relu { "conv2d_bias_relu" } else { "conv2d" },
        &parents,
        out,
        Box::new(move |grad, need| {
            let dy = grad.data();
            let want_db = need_db && need[2];
            let mut dx = if need[0] { vec![T::zero(); n * img_len] } else { Vec::new() };
            let mut partial: Vec<(Vec<T>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); chunks];
            let dx_chunk = if need[0] { per_chunk * img_len } else { 0 };
            let body = |sc: &mut ConvScratch<T>, ci: usize, dx: &mut [T], slot: &mut (Vec<T>, Vec<f64>)| {
                let start = ci * per_chunk;
                let cn = per_chunk.min(n - start);
                let ld = cn * area;
                let dmat = ConvScratch::sized(&mut sc.mat, f * ld);
                let mut db = vec![0f64; if want_db { f } else { 0 }];
                for fi in 0..f {
                    for i in 0..cn {
                        let at = ((start + i) * f + fi) * area;
                        let dst = &mut dmat[fi * ld + i * area..fi * ld + (i + 1) * area];
                        let src = &dy[at..at + area];
                        if let Some(a) = &activ {
                            let act = &a.data()[at..at + area];
                            for ((d, &s), &y) in dst.iter_mut().zip(src).zip(act) {
                                *d = if y > T::zero() { s } else { T::zero() };
                            }
                        } else {
                            dst.copy_from_slice(src);
                        }
                        if want_db {
                            db[fi] += dst.iter().map(|v| v.as_f64()).sum::<f64>();
                        }
                    }
                }
                slot.1 = db;
                if need[1] {
                    let mut dk = vec![T::zero(); f * patch];
                    let col = sc.cols.unfold(&geo, &xv.data()[start * img_len..(start + cn) * img_len], cn);
                    gemm(
                        f, ld, patch, T::one(),
                        &sc.mat, Layout::row_major(ld),
                        col, Layout::transposed(ld),
                        T::zero(), &mut dk, Layout::row_major(patch),
                    );
                    slot.0 = dk;
                }
                if need[0] {
                    let dcol = ConvScratch::sized(&mut sc.dcol, patch * ld);
                    gemm(
                        patch, f, ld, T::one(),
                        kv.data(), Layout::transposed(patch),
                        &sc.mat, Layout::row_major(ld),
                        T::zero(), dcol, Layout::row_major(ld),
                    );
                    for i in 0..cn {
                        geo.col2im(dcol, ld, i * area, &mut dx[i * img_len..(i + 1) * img_len]);
                    }
                }
            };
            if need[0] {
                Exec::ambient().for_each_chunk_zip_scratch(
                    &mut dx,
                    dx_chunk,
                    &mut partial,
                    ConvScratch::default,
                    body,
                );
            } else {
                let mut empty = vec![(); chunks];
                Exec::ambient().for_each_chunk_zip_scratch(
                    &mut empty,
                    1,
                    &mut partial,
                    ConvScratch::default,
                    |sc, ci, _, slot| body(sc, ci, &mut [], slot),
                );
            }
            let dk = need[1].then(|| {
                let mut acc = vec![T::zero(); f * patch];
                for (part, _) in &partial {
                    acc.iter_mut().zip(part).for_each(|(a, &b)| *a = *a + b);
                }
                acc
            });
            let db = want_db.then(|| {
                let mut acc = vec![0f64; f];
                for (_, part) in &partial {
                    acc.iter_mut().zip(part).for_each(|(a, &b)| *a += b);
                }
                acc.into_iter().map(T::of_f64).collect::<Vec<T>>()
            });
            let mut res = vec![
                need[0].then(|| Tensor::new(vec![n, c, h, w], dx)).transpose()?,
                dk.map(|d| Tensor::new(vec![f, c, kh, kw], d)).transpose()?,
            ];
            if need.len() > 2 {
                res.push(db.map(|d| Tensor::new(vec![f], d)).transpose()?);
            }
            Ok(res)
        }),
    )
}

/// Add a per-channel bias `b[C]` to `x[N×C×...]`.
pub fn add_channel_bias<T: Element>(g: &mut Graph<T>, x: Var, b: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 || g.shape(b) != [shape[1]] {
        return Err(dim_err(
            "add_channel_bias",
            format!("x {:?}, b {:?}", shape, g.shape(b)),
        ));
    }
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let bias = g.value(b).data().to_vec();
    let mut out = g.value(x).data().to_vec();
    for (i, chunk) in out.chunks_mut(inner).enumerate() {
        let bv = bias[i % c];
        chunk.iter_mut().for_each(|v| *v = *v + bv);
    }
    g.push(
        "add_channel_bias",
        &[x, b],
        Tensor::new(shape, out)?,
        Box::new(move |grad, need| {
            let db = if need[1] {
                let mut db = vec![0f64; c];
                for (i, chunk) in grad.data().chunks(inner).enumerate() {
                    db[i % c] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                Some(Tensor::new(vec![c], db.into_iter().map(T::of_f64).collect())?)
            } else {
                None
            };
            Ok(vec![Some(grad.clone()), db])
        }),
    )
}

/// Mean over spatial positions: `[N×C×H×W] -> [N×C]`.
pub fn global_avg_pool<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(dim_err("global_avg_pool", format!("{shape:?}")));
    };
    let area = h * w;
    let inv = 1.0 / area as f64;
    let out: Vec<T> = g
        .value(x)
        .data()
        .chunks(area)
        .map(|p| T::of_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
        .collect();
    g.push(
        "global_avg_pool",
        &[x],
        Tensor::new(vec![n, c], out)?,
        Box::new(move |grad, _| {
            let s = T::of_f64(inv);
            let mut d = Vec::with_capacity(n * c * area);
            for &v in grad.data() {
                d.extend(std::iter::repeat_n(v * s, area));
            }
            Ok(vec![Some(Tensor::new(shape, d)?)])
        }),
    )
}

/// Per-row cross-entropy `−log softmax(logits)[label]` computed in f64.
pub fn cross_entropy_rows<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<f64>> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        s => return Err(dim_err("cross_entropy", format!("logits must be N×K, got {s:?}"))),
    };
    if labels.len() != n {
        return Err(dim_err("cross_entropy", format!("{} labels for {n} rows", labels.len())));
    }
    let mut out = Vec::with_capacity(n);
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        if y >= k {
            return Err(Error::Index {
                op: "cross_entropy",
                index: y,
                bound: k,
            });
        }
        let top = row.iter().enumerate().fold(0, |b, (i, v)| if v.as_f64() > row[b].as_f64() { i } else { b });
        let m = row[top].as_f64();
        // ln(1 + rest) so confident rows keep their tiny loss
        let rest: f64 = row.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, v)| (v.as_f64() - m).exp()).sum();
        out.push(m + rest.ln_1p() - row[y].as_f64());
    }
    Ok(out)
}

/// Row-wise softmax in f64.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let k = match logits.shape() {
        [_, k] => *k,
        s => return Err(dim_err("softmax", format!("logits must be N×K, got {s:?}"))),
    };
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect())
}

/// `Σ_b weight_b · CE(logits_b, label_b)`.
pub fn weighted_cross_entropy<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    weights: &[f64],
) -> Result<Var> {
    let lv = g.value(logits).clone();
    let rows = cross_entropy_rows(&lv, labels)?;
    if weights.len() != rows.len() {
        return Err(dim_err("weighted_cross_entropy", "one weight per row required"));
    }
    let total: f64 = rows.iter().zip(weights).map(|(l, w)| l * w).sum();
    let labels = labels.to_vec();
    let weights = weights.to_vec();
    g.push(
        "cross_entropy",
        &[logits],
        Tensor::scalar(T::of_f64(total)),
        Box::new(move |grad, _| {
            let up = grad.data()[0].as_f64();
            let k = lv.shape()[1];
            let probs = softmax_rows(&lv)?;
            let mut d = Vec::with_capacity(lv.len());
            for ((p, &y), &w) in probs.iter().zip(&labels).zip(&weights) {
                // p_y − 1 as −Σ_{j≠y} p_j keeps precision when p_y ≈ 1
                let rest: f64 = p.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, v)| v).sum();
                for (j, &pj) in p.iter().enumerate() {
                    let dj = if j == y { -rest } else { pj };
                    d.push(T::of_f64(up * w * dj));
                }
            }
            debug_assert_eq!(d.len(), labels.len() * k);
            Ok(vec![Some(Tensor::new(lv.shape().to_vec(), d)?)])
        }),
    )
}

/// Same value as [`weighted_cross_entropy`], but row `b` backpropagates
/// `weight_b · ∂CE_b/∂logits / r_b` with `r_b = Σ_{j≠y} p_j = ‖∂CE_b/∂logits_y‖`.
/// Returns `ln r_b` per row so callers can undo the scale. The rescaled seed
/// is computed in log space and never underflows, while the plain gradient of
/// a row with a logit gap past ~100 is exactly zero in f32.
pub fn cross_entropy_direction<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    weights: &[f64],
) -> Result<(Var, Vec<f64>)> {
    let lv = g.value(logits).clone();
    let rows = cross_entropy_rows(&lv, labels)?;
    if weights.len() != rows.len() {
        return Err(dim_err("cross_entropy_direction", "one weight per row required"));
    }
    let k = lv.shape()[1];
    if k < 2 {
        return Err(dim_err("cross_entropy_direction", "needs at least two classes"));
    }
    let lse = |row: &[T], skip: Option<usize>| {
        let it = || row.iter().enumerate().filter(move |&(j, _)| Some(j) != skip).map(|(_, v)| v.as_f64());
        let m = it().fold(f64::NEG_INFINITY, f64::max);
        m + it().map(|v| (v - m).exp()).sum::<f64>().ln()
    };
    let mut seed = Vec::with_capacity(lv.len());
    let mut log_scale = Vec::with_capacity(rows.len());
    for ((row, &y), &w) in lv.data().chunks(k).zip(labels).zip(weights) {
        let rest = lse(row, Some(y));
        log_scale.push(rest - lse(row, None));
        for (j, v) in row.iter().enumerate() {
            seed.push(w * if j == y { -1.0 } else { (v.as_f64() - rest).exp() });
        }
    }
    let total: f64 = rows.iter().zip(weights).map(|(l, w)| l * w).sum();
    let out = g.push(
        "cross_entropy_direction",
        &[logits],
        Tensor::scalar(T::of_f64(total)),
        Box::new(move |grad, _| {
            let up = grad.data()[0].as_f64();
            let d = seed.iter().map(|&s| T::of_f64(up * s)).collect();
            Ok(vec![Some(Tensor::new(lv.shape().to_vec(), d)?)])
        }),
    )?;
    Ok((out, log_scale))
}

/// Mean cross-entropy over the batch, stabilized by max-subtraction.
pub fn softmax_cross_entropy<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
) -> Result<Var> {
    let n = labels.len().max(1);
    weighted_cross_entropy(g, logits, labels, &vec![1.0 / n as f64; labels.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn eval2(
        a: Tensor<f64>,
        b: Tensor<f64>,
        op: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
    ) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(a), g.constant(b));
        let out = op(&mut g, a, b)?;
        Ok(g.value(out).clone())
    }

    #[test]
    fn matmul_identity_and_projector() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(eval2(eye, m.clone(), matmul).unwrap().data(), m.data());
        let proj = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(eval2(proj, b, matmul).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let c = eval2(a.clone(), b.clone(), matmul).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let err = eval2(Tensor::zeros(vec![2, 3]), Tensor::zeros(vec![2, 3]), matmul);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    fn conv_eval(x: Tensor<f64>, k: Tensor<f64>, stride: usize, pad: usize) -> Result<Tensor<f64>> {
        eval2(x, k, |g, a, b| conv2d(g, a, b, stride, pad))
    }

    /// Direct sliding-window cross-correlation.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let [n, c, h, w] = x.shape()[..] else { unreachable!() };
        let [f, _, kh, kw] = k.shape()[..] else { unreachable!() };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Vec::new();
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += x.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((fi * c + ci) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar_and_zero_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[1, 1, 4, 4]);
        let two = conv_eval(x.clone(), t(&[1, 1, 1, 1], &[2.0]), 1, 0).unwrap();
        for (o, i) in two.data().iter().zip(x.data()) {
            assert_eq!(*o, 2.0 * i);
        }
        let zero = conv_eval(x, Tensor::zeros(vec![1, 1, 3, 3]), 1, 1).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[1, 1, 5, 5]);
        let k = rand_tensor(&mut rng, &[1, 1, 3, 3]);
        let got = conv_eval(x.clone(), k.clone(), 1, 0).unwrap();
        for (a, b) in got.data().iter().zip(conv_oracle(&x, &k, 1, 0)) {
            assert!((a - b).abs() < 1e-12);
        }
        for (stride, pad) in [(2, 1), (1, 1), (3, 2)] {
            let x = rand_tensor(&mut rng, &[2, 3, 7, 6]);
            let k = rand_tensor(&mut rng, &[4, 3, 3, 3]);
            let got = conv_eval(x.clone(), k.clone(), stride, pad).unwrap();
            for (a, b) in got.data().iter().zip(conv_oracle(&x, &k, stride, pad)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fused_block_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[2, 3, 6, 6]);
        let k = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        let run = |fused: bool| {
            let mut g = Graph::<f64>::new();
            let (xv, kv, bv) = (g.variable(x.clone()), g.variable(k.clone()), g.variable(b.clone()));
            let y = if fused {
                conv2d_bias_relu(&mut g, xv, kv, bv, 2, 1).unwrap()
            } else {
                let y = conv2d(&mut g, xv, kv, 2, 1).unwrap();
                let y = add_channel_bias(&mut g, y, bv).unwrap();
                relu(&mut g, y).unwrap()
            };
            let out = g.value(y).clone();
            let s = sum(&mut g, y).unwrap();
            let mut gr = g.backward(s).unwrap();
            (out, gr.take(xv).unwrap(), gr.take(kv).unwrap(), gr.take(bv).unwrap())
        };
        let (a, b_) = (run(true), run(false));
        for (p, q) in [(&a.0, &b_.0), (&a.1, &b_.1), (&a.2, &b_.2), (&a.3, &b_.3)] {
            for (u, v) in p.data().iter().zip(q.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_config_errors() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        assert!(matches!(
            conv_eval(x.clone(), Tensor::zeros(vec![1, 1, 3, 3]), 1, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            conv_eval(x, Tensor::zeros(vec![1, 1, 1, 1]), 0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = relu(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[-1.0, 3.0]));
        let y = relu(&mut g, x).unwrap();
        let s = sum(&mut g, y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    fn ce(logits: &[f64], labels: &[usize]) -> Result<f64> {
        let k = logits.len() / labels.len();
        let mut g = Graph::<f64>::new();
        let l = g.constant(t(&[labels.len(), k], logits));
        let loss = softmax_cross_entropy(&mut g, l, labels)?;
        g.value(loss).item()
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((ce(&[0.0, 0.0, 0.0], &[1]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(ce(&[100.0, 0.0, 0.0], &[0]).unwrap() < 1e-40);
        // −log(e³ / (e¹ + e² + e³)) = log(1 + e⁻¹ + e⁻²) evaluated directly
        let expected = (1.0 + (-1f64).exp() + (-2f64).exp()).ln();
        assert!((ce(&[1.0, 2.0, 3.0], &[2]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.407_605_964_444_380_1).abs() < 1e-15);
        assert!(matches!(ce(&[0.0, 0.0], &[2]), Err(Error::Index { .. })));
    }

    #[test]
    fn cross_entropy_direction_rescales_rows() {
        let logits = [1.0, 2.0, 3.0, -0.5, 0.1, 0.4];
        let (labels, w) = ([2, 0], [0.5, -1.0]);
        let mut g = Graph::<f64>::new();
        let l = g.variable(t(&[2, 3], &logits));
        let loss = weighted_cross_entropy(&mut g, l, &labels, &w).unwrap();
        let value = g.value(loss).item().unwrap();
        let plain = g.backward(loss).unwrap().take(l).unwrap();
        let mut g = Graph::<f64>::new();
        let l = g.variable(t(&[2, 3], &logits));
        let (loss2, ls) = cross_entropy_direction(&mut g, l, &labels, &w).unwrap();
        assert_eq!(g.value(loss2).item().unwrap(), value);
        let dir = g.backward(loss2).unwrap().take(l).unwrap();
        for (i, (a, b)) in plain.data().iter().zip(dir.data()).enumerate() {
            assert!((a - b * ls[i / 3].exp()).abs() < 1e-12, "{i}: {a} vs {b}");
        }

        // a gap no f32 softmax survives still yields a unit-size seed
        let mut g = Graph::<f32>::new();
        let l = g.variable(Tensor::new(vec![1, 3], vec![300.0f32, 0.0, -10.0]).unwrap());
        let (loss, ls) = cross_entropy_direction(&mut g, l, &[0], &[1.0]).unwrap();
        let d = g.backward(loss).unwrap().take(l).unwrap();
        assert_eq!(d.data()[0], -1.0);
        assert!(d.data()[1] > 0.99 && d.data()[2] > 0.0);
        assert!((ls[0] + 300.0).abs() < 1e-3);
    }

    #[test]
    fn l1_diff_cases() {
        let v = eval2(t(&[2], &[1.0, 0.0]), t(&[2], &[0.5, 1.0]), l1_diff).unwrap();
        assert_eq!(v.item().unwrap(), 1.5);
        let same = eval2(t(&[2], &[1.0, 3.0]), t(&[2], &[1.0, 3.0]), l1_diff).unwrap();
        assert_eq!(same.item().unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[6]);
        let b = rand_tensor(&mut rng, &[6]);
        let ab = eval2(a.clone(), b.clone(), l1_diff).unwrap().item().unwrap();
        let ba = eval2(b, a, l1_diff).unwrap().item().unwrap();
        assert_eq!(ab, ba);
        assert!(matches!(
            eval2(t(&[2], &[1.0, 0.0]), t(&[1], &[1.0]), l1_diff),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[0.3, -2.0, 5.0]));
        let s = sum(&mut g, x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[1.0; 3]);

        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, -2.0]));
        let sq = mul(&mut g, x, x).unwrap();
        let s = sum(&mut g, sq).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_state_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let s = sum(&mut g, x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let a = scale(&mut g, x, 2.0).unwrap();
        let b = mul(&mut g, a, x).unwrap();
        let c = add(&mut g, a, b).unwrap();
        let s = sum(&mut g, c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.visited(), g.len());
        // d/dx Σ(2x + 2x²) = 2 + 4x
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, 10.0]);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(scale(&mut g, x, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let (x0, k0) = (x.data().to_vec(), k.data().to_vec());
        let mut g = Graph::<f64>::new();
        let xv = g.variable(x.clone());
        let kv = g.variable(k.clone());
        let y = conv2d(&mut g, xv, kv, 1, 1).unwrap();
        let y = relu(&mut g, y).unwrap();
        let s = sum(&mut g, y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(x.data(), &x0[..]);
        assert_eq!(k.data(), &k0[..]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Tensor<f32> = rand_tensor(&mut rng, &[3, 3, 9, 9]).cast();
        let k: Tensor<f32> = rand_tensor(&mut rng, &[5, 3, 3, 3]).cast();
        let run = || {
            let mut g = Graph::<f32>::new();
            let (a, b) = (g.constant(x.clone()), g.constant(k.clone()));
            let y = conv2d(&mut g, a, b, 2, 1).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn linear_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3]);
        let x = rand_tensor(&mut rng, &[2, 4, 3, 3]);
        let err = grad_check(
            |g, x| {
                let p = global_avg_pool(g, x)?;
                let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
                let y = linear(g, p, w, b)?;
                softmax_cross_entropy(g, y, &[0, 2])
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn chain_rule_composition() {
        // g(f(x)) with f = scale by 3, g = x ⊙ x: d/dx Σ 9x² = 18x
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[0.5, -1.5]));
        let f = scale(&mut g, x, 3.0).unwrap();
        let sq = mul(&mut g, f, f).unwrap();
        let s = sum(&mut g, sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[9.0, -27.0]);
    }

    #[test]
    fn mean_groups_and_slices() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let m = mean_groups(&mut g, x, 2).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 4.0, 5.0, 6.0]);
        let top = slice_rows(&mut g, x, 0, 1).unwrap();
        let cat = concat_rows(&mut g, &[top, m]).unwrap();
        assert_eq!(g.shape(cat), &[3, 2]);
        let s = sum(&mut g, cat).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.5, 1.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
    }
}
