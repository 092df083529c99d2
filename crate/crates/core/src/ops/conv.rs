//! Differentiable 2-D convolutions backed by im2col + gemm.
//!
//! Forward, input-gradient and kernel-gradient all reduce to one matrix
//! product per batch item, so the backward pass costs about as much as the
//! forward pass. Reflection padding is folded into the im2col gather (and the
//! matching col2im scatter), which keeps padded convolutions a single op in
//! the autograd graph.

use std::borrow::Cow;

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

/// How out-of-range taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub mode: PadMode,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, mode: PadMode) -> Self {
        Self { stride, padding, mode }
    }

    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

/// Scalar types the kernels run on.
trait Elem: Copy + Default + std::ops::AddAssign + Send + Sync + 'static {
    fn one() -> Self;
}

impl Elem for f32 {
    fn one() -> Self {
        1.0
    }
}

impl Elem for f64 {
    fn one() -> Self {
        1.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl Dims {
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

/// For every output coordinate along one axis and every kernel offset, the
/// source index in the unpadded input (or `None` for a zero tap).
fn axis_map(
    input: usize,
    kernel: usize,
    out: usize,
    geom: ConvGeometry,
) -> candle_core::Result<Vec<Option<usize>>> {
    if geom.mode == PadMode::Reflect && geom.padding >= input {
        candle_core::bail!(
            "reflection padding {} requires an input extent larger than the padding, got {}",
            geom.padding,
            input
        );
    }
    let mut map = Vec::with_capacity(kernel * out);
    for k in 0..kernel {
        for o in 0..out {
            let i = (o * geom.stride + k) as isize - geom.padding as isize;
            let n = input as isize;
            let src = match geom.mode {
                PadMode::Zero => (0..n).contains(&i).then_some(i as usize),
                PadMode::Reflect => {
                    let r = if i < 0 {
                        -i
                    } else if i >= n {
                        2 * (n - 1) - i
                    } else {
                        i
                    };
                    Some(r as usize)
                }
            };
            map.push(src);
        }
    }
    Ok(map)
}

struct Maps {
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
    /// Per column offset: `(lo, hi, src)` such that outputs `lo..hi` read the
    /// contiguous inputs `src..src + hi - lo`. Only set for stride 1.
    runs: Vec<Option<(usize, usize, usize)>>,
}

impl Maps {
    fn new(d: &Dims, geom: ConvGeometry) -> candle_core::Result<Self> {
        let cols = axis_map(d.w, d.kw, d.ow, geom)?;
        let runs = (0..d.kw)
            .map(|kj| {
                if geom.stride != 1 {
                    return None;
                }
                let cmap = &cols[kj * d.ow..(kj + 1) * d.ow];
                let lo = (geom.padding.saturating_sub(kj)).min(d.ow);
                let hi = (d.w + geom.padding).saturating_sub(kj).min(d.ow).max(lo);
                let src = (lo + kj).checked_sub(geom.padding)?;
                (hi > lo && cmap[lo] == Some(src)).then_some((lo, hi, src))
            })
            .collect();
        Ok(Self { rows: axis_map(d.h, d.kh, d.oh, geom)?, cols, runs })
    }
}

fn im2col<T: Elem>(x: &[T], d: &Dims, maps: &Maps, col: &mut [T]) {
    let p = d.p();
    for ci in 0..d.c_in {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            let rmap = &maps.rows[ki * d.oh..(ki + 1) * d.oh];
            for kj in 0..d.kw {
                let cmap = &maps.cols[kj * d.ow..(kj + 1) * d.ow];
                let row = (ci * d.kh + ki) * d.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for (oy, src_y) in rmap.iter().enumerate() {
                    let out = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    match src_y {
                        None => out.fill(T::default()),
                        Some(iy) => {
                            let line = &plane[iy * d.w..(iy + 1) * d.w];
                            let (lo, hi) = match maps.runs[kj] {
                                Some((lo, hi, src)) => {
                                    out[lo..hi].copy_from_slice(&line[src..src + hi - lo]);
                                    (lo, hi)
                                }
                                None => (0, 0),
                            };
                            for (i, (o, src_x)) in out.iter_mut().zip(cmap).enumerate() {
                                if i >= lo && i < hi {
                                    continue;
                                }
                                *o = match src_x {
                                    Some(ix) => line[*ix],
                                    None => T::default(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Elem>(col: &[T], d: &Dims, maps: &Maps, x: &mut [T]) {
    let p = d.p();
    for ci in 0..d.c_in {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            let rmap = &maps.rows[ki * d.oh..(ki + 1) * d.oh];
            for kj in 0..d.kw {
                let cmap = &maps.cols[kj * d.ow..(kj + 1) * d.ow];
                let row = (ci * d.kh + ki) * d.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for (oy, dst_y) in rmap.iter().enumerate() {
                    let Some(iy) = dst_y else { continue };
                    let vals = &src[oy * d.ow..(oy + 1) * d.ow];
                    let line = &mut plane[iy * d.w..(iy + 1) * d.w];
                    let (lo, hi) = match maps.runs[kj] {
                        Some((lo, hi, src)) => {
                            for (dst, v) in line[src..src + hi - lo].iter_mut().zip(&vals[lo..hi]) {
                                *dst += *v;
                            }
                            (lo, hi)
                        }
                        None => (0, 0),
                    };
                    for (i, (v, dst_x)) in vals.iter().zip(cmap).enumerate() {
                        if i >= lo && i < hi {
                            continue;
                        }
                        if let Some(ix) = dst_x {
                            line[*ix] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matrix operand: `(data, row_stride, col_stride)`.
type Operand<'a, T> = (&'a [T], isize, isize);

/// `dst (m×n) = [dst +] lhs (m×k) · rhs (k×n)`, all row-major views.
fn matmul<T: Elem>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    lhs: Operand<'_, T>,
    rhs: Operand<'_, T>,
) {
    assert!(dst.len() >= m * n);
    let (lhs, lhs_rs, lhs_cs) = lhs;
    let (rhs, rhs_rs, rhs_cs) = rhs;
    let max_index = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs
        }
    };
    assert!(max_index(m, k, lhs_rs, lhs_cs) < lhs.len() as isize || m * k == 0);
    assert!(max_index(k, n, rhs_rs, rhs_cs) < rhs.len() as isize || k * n == 0);
    // SAFETY: every index reached by the strides was bounds-checked above and
    // `dst` does not alias either operand.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs,
            lhs_rs,
            rhs.as_ptr(),
            rhs_cs,
            rhs_rs,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

fn conv_forward<T: Elem>(x: &[T], w: &[T], n: usize, d: &Dims, geom: ConvGeometry) -> candle_core::Result<Vec<T>> {
    let maps = Maps::new(d, geom)?;
    let (k, p) = (d.k(), d.p());
    let mut col = vec![T::default(); k * p];
    let mut out = vec![T::default(); n * d.c_out * p];
    for b in 0..n {
        im2col(&x[b * d.c_in * d.h * d.w..(b + 1) * d.c_in * d.h * d.w], d, &maps, &mut col);
        let dst = &mut out[b * d.c_out * p..(b + 1) * d.c_out * p];
        matmul(d.c_out, p, k, dst, false, (w, k as isize, 1), (&col, p as isize, 1));
    }
    Ok(out)
}

fn conv_input_grad<T: Elem>(g: &[T], w: &[T], n: usize, d: &Dims, geom: ConvGeometry) -> candle_core::Result<Vec<T>> {
    let maps = Maps::new(d, geom)?;
    let (k, p) = (d.k(), d.p());
    let mut col = vec![T::default(); k * p];
    let mut out = vec![T::default(); n * d.c_in * d.h * d.w];
    for b in 0..n {
        let gb = &g[b * d.c_out * p..(b + 1) * d.c_out * p];
        // dcol (k×p) = wᵀ (k×c_out) · g (c_out×p)
        matmul(k, p, d.c_out, &mut col, false, (w, 1, k as isize), (gb, p as isize, 1));
        col2im(&col, d, &maps, &mut out[b * d.c_in * d.h * d.w..(b + 1) * d.c_in * d.h * d.w]);
    }
    Ok(out)
}

fn conv_kernel_grad<T: Elem>(x: &[T], g: &[T], n: usize, d: &Dims, geom: ConvGeometry) -> candle_core::Result<Vec<T>> {
    let maps = Maps::new(d, geom)?;
    let (k, p) = (d.k(), d.p());
    let mut col = vec![T::default(); k * p];
    let mut out = vec![T::default(); d.c_out * k];
    for b in 0..n {
        im2col(&x[b * d.c_in * d.h * d.w..(b + 1) * d.c_in * d.h * d.w], d, &maps, &mut col);
        let gb = &g[b * d.c_out * p..(b + 1) * d.c_out * p];
        // dw (c_out×k) += g (c_out×p) · colᵀ (p×k)
        matmul(d.c_out, k, p, &mut out, b > 0, (gb, p as isize, 1), (&col, 1, p as isize));
    }
    Ok(out)
}

fn slice_of<'a, T>(data: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv kernels expect contiguous operands"),
    }
}

/// Which of the three kernels a [`ConvKernel`] op runs.
#[derive(Clone, Copy, Debug)]
enum Pass {
    /// `(x, w) -> y`
    Forward,
    /// `(grad_y, w) -> grad_x`, with the spatial size of `x`
    InputGrad { h: usize, w: usize },
    /// `(x, grad_y) -> grad_w`, with the kernel size
    KernelGrad { kh: usize, kw: usize },
}

#[derive(Clone, Copy, Debug)]
struct ConvKernel {
    geom: ConvGeometry,
    pass: Pass,
}

impl ConvKernel {
    fn dims_and_shape(&self, l1: &Layout, l2: &Layout) -> candle_core::Result<(usize, Dims, Shape)> {
        let geom = self.geom;
        let fit = |input: usize, kernel: usize| {
            geom.out_len(input, kernel)
                .ok_or_else(|| candle_core::Error::Msg(format!("kernel {kernel} does not fit input {input}")))
        };
        match self.pass {
            Pass::Forward => {
                let (n, c_in, h, w) = l1.shape().dims4()?;
                let (c_out, c_in_k, kh, kw) = l2.shape().dims4()?;
                if c_in != c_in_k {
                    candle_core::bail!("conv channel mismatch: input has {c_in}, kernel expects {c_in_k}");
                }
                let (oh, ow) = (fit(h, kh)?, fit(w, kw)?);
                let d = Dims { c_in, h, w, c_out, kh, kw, oh, ow };
                Ok((n, d, Shape::from((n, c_out, oh, ow))))
            }
            Pass::InputGrad { h, w } => {
                let (n, c_out, oh, ow) = l1.shape().dims4()?;
                let (c_out_k, c_in, kh, kw) = l2.shape().dims4()?;
                if c_out != c_out_k {
                    candle_core::bail!("conv channel mismatch: gradient has {c_out}, kernel produces {c_out_k}");
                }
                if fit(h, kh)? != oh || fit(w, kw)? != ow {
                    candle_core::bail!("conv input size {h}x{w} does not map onto output {oh}x{ow}");
                }
                let d = Dims { c_in, h, w, c_out, kh, kw, oh, ow };
                Ok((n, d, Shape::from((n, c_in, h, w))))
            }
            Pass::KernelGrad { kh, kw } => {
                let (n, c_in, h, w) = l1.shape().dims4()?;
                let (n_g, c_out, oh, ow) = l2.shape().dims4()?;
                if n != n_g || fit(h, kh)? != oh || fit(w, kw)? != ow {
                    candle_core::bail!("conv kernel-gradient operands disagree");
                }
                let d = Dims { c_in, h, w, c_out, kh, kw, oh, ow };
                Ok((n, d, Shape::from((c_out, c_in, kh, kw))))
            }
        }
    }

    fn run<T: Elem>(&self, a: &[T], b: &[T], n: usize, d: &Dims) -> candle_core::Result<Vec<T>> {
        match self.pass {
            Pass::Forward => conv_forward(a, b, n, d, self.geom),
            Pass::InputGrad { .. } => conv_input_grad(a, b, n, d, self.geom),
            Pass::KernelGrad { .. } => conv_kernel_grad(a, b, n, d, self.geom),
        }
    }
}

impl CustomOp2 for ConvKernel {
    fn name(&self) -> &'static str {
        match self.pass {
            Pass::Forward => "im2col-conv2d",
            Pass::InputGrad { .. } => "im2col-conv2d-input-grad",
            Pass::KernelGrad { .. } => "im2col-conv2d-kernel-grad",
        }
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, d, shape) = self.dims_and_shape(l1, l2)?;
        let storage = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32(self.run(slice_of(a, l1)?, slice_of(b, l2)?, n, &d)?)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64(self.run(slice_of(a, l1)?, slice_of(b, l2)?, n, &d)?)
            }
            _ => candle_core::bail!("conv kernels support matching f32 or f64 operands only"),
        };
        Ok((storage, shape))
    }

    fn bwd(
        &self,
        a: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let geom = self.geom;
        match self.pass {
            Pass::Forward => {
                let (x, w) = (a, b);
                let (_, _, h, wd) = x.dims4()?;
                let (_, _, kh, kw) = w.dims4()?;
                let gx = x
                    .track_op()
                    .then(|| grad.apply_op2_no_bwd(w, &ConvKernel { geom, pass: Pass::InputGrad { h, w: wd } }))
                    .transpose()?;
                let gw = w
                    .track_op()
                    .then(|| x.apply_op2_no_bwd(&grad, &ConvKernel { geom, pass: Pass::KernelGrad { kh, kw } }))
                    .transpose()?;
                Ok((gx, gw))
            }
            // Only reached through `conv_transpose2d`, where `a` is the
            // transposed-conv input and `b` its kernel.
            Pass::InputGrad { .. } => {
                let (x, w) = (a, b);
                let (_, _, kh, kw) = w.dims4()?;
                let gx = x
                    .track_op()
                    .then(|| grad.apply_op2_no_bwd(w, &ConvKernel { geom, pass: Pass::Forward }))
                    .transpose()?;
                let gw = w
                    .track_op()
                    .then(|| grad.apply_op2_no_bwd(x, &ConvKernel { geom, pass: Pass::KernelGrad { kh, kw } }))
                    .transpose()?;
                Ok((gx, gw))
            }
            Pass::KernelGrad { .. } => Err(candle_core::Error::BackwardNotSupported { op: self.name() }),
        }
    }
}

fn contiguous(t: &Tensor) -> candle_core::Result<Cow<'_, Tensor>> {
    if t.is_contiguous() {
        Ok(Cow::Borrowed(t))
    } else {
        Ok(Cow::Owned(t.contiguous()?))
    }
}

/// `x: (n, c_in, h, w)`, `kernel: (c_out, c_in, kh, kw)` → `(n, c_out, oh, ow)`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, geom: ConvGeometry) -> candle_core::Result<Tensor> {
    let x = contiguous(x)?;
    let kernel = contiguous(kernel)?;
    x.apply_op2(&kernel, ConvKernel { geom, pass: Pass::Forward })
}

/// Transposed convolution with a PyTorch-layout kernel `(c_in, c_out, kh, kw)`.
///
/// The output extent is `(in - 1) * stride - 2 * padding + k + output_padding`.
pub fn conv_transpose2d(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> candle_core::Result<Tensor> {
    if output_padding >= stride.max(1) {
        candle_core::bail!("output padding {output_padding} must be smaller than stride {stride}");
    }
    let (_, _, h, w) = x.dims4()?;
    let (_, _, kh, kw) = kernel.dims4()?;
    let extent = |i: usize, k: usize| ((i - 1) * stride + k + output_padding).checked_sub(2 * padding);
    let (Some(oh), Some(ow)) = (extent(h, kh), extent(w, kw)) else {
        candle_core::bail!("transposed conv padding {padding} too large for a {kh}x{kw} kernel");
    };
    let geom = ConvGeometry::new(stride, padding, PadMode::Zero);
    let x = contiguous(x)?;
    let kernel = contiguous(kernel)?;
    x.apply_op2(&kernel, ConvKernel { geom, pass: Pass::InputGrad { h: oh, w: ow } })
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device, Var};

    use super::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    /// Direct nested-loop reference, independent of im2col.
    fn reference_conv(x: &Tensor, w: &Tensor, geom: ConvGeometry) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (co, _, kh, kw) = w.dims4().unwrap();
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let wv = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let oh = geom.out_len(h, kh).unwrap();
        let ow = geom.out_len(wd, kw).unwrap();
        let fetch = |i: isize, len: usize| -> Option<usize> {
            let l = len as isize;
            match geom.mode {
                PadMode::Zero => (0..l).contains(&i).then_some(i as usize),
                PadMode::Reflect => Some(if i < 0 { -i } else if i >= l { 2 * (l - 1) - i } else { i } as usize),
            }
        };
        let mut out = vec![0.0; n * co * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (y * geom.stride + ki) as isize - geom.padding as isize;
                                    let ix = (xx * geom.stride + kj) as isize - geom.padding as isize;
                                    if let (Some(iy), Some(ix)) = (fetch(iy, h), fetch(ix, wd)) {
                                        acc += xv[((b * c + ci) * h + iy) * wd + ix]
                                            * wv[((o * c + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(out, (n, co, oh, ow), &Device::Cpu).unwrap()
    }

    #[test]
    fn forward_matches_direct_loops() {
        for (stride, padding, mode, size) in [
            (1, 0, PadMode::Zero, 6),
            (1, 1, PadMode::Zero, 5),
            (2, 1, PadMode::Zero, 8),
            (2, 1, PadMode::Zero, 7),
            (1, 1, PadMode::Reflect, 5),
            (1, 3, PadMode::Reflect, 6),
        ] {
            let geom = ConvGeometry::new(stride, padding, mode);
            let x = randn(&[2, 3, size, size], 1);
            let w = randn(&[4, 3, 3, 3], 2);
            let got = conv2d(&x, &w, geom).unwrap();
            let want = reference_conv(&x, &w, geom);
            assert!(max_diff(&got, &want) < 1e-12, "{geom:?}");
        }
    }

    #[test]
    fn forward_matches_candle_conv() {
        let x = randn(&[1, 5, 9, 9], 3);
        let w = randn(&[2, 5, 4, 4], 4);
        let got = conv2d(&x, &w, ConvGeometry::new(2, 1, PadMode::Zero)).unwrap();
        let want = x.conv2d(&w, 1, 2, 1, 1).unwrap();
        assert!(max_diff(&got, &want) < 1e-12);
    }

    #[test]
    fn transposed_matches_candle() {
        let x = randn(&[2, 4, 5, 5], 5);
        let w = randn(&[4, 3, 3, 3], 6);
        let got = conv_transpose2d(&x, &w, 2, 1, 1).unwrap();
        assert_eq!(got.dims4().unwrap(), (2, 3, 10, 10));
        let want = x.conv_transpose2d(&w, 1, 1, 2, 1).unwrap();
        assert!(max_diff(&got, &want) < 1e-12);
    }

    /// Gradients against the directional derivative of the loss
    /// `sum(conv(x, w) * probe)` estimated by central differences.
    fn check_grads(geom: Option<ConvGeometry>, x_shape: &[usize], w_shape: &[usize]) {
        let x = Var::from_tensor(&randn(x_shape, 7)).unwrap();
        let w = Var::from_tensor(&randn(w_shape, 8)).unwrap();
        let apply = |x: &Tensor, w: &Tensor| match geom {
            Some(g) => conv2d(x, w, g).unwrap(),
            None => conv_transpose2d(x, w, 2, 1, 1).unwrap(),
        };
        let y = apply(x.as_tensor(), w.as_tensor());
        let probe = randn(y.dims(), 9);
        let loss = |x: &Tensor, w: &Tensor| (apply(x, w) * &probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let grads = (y * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for (var, other, is_x) in [(&x, &w, true), (&w, &x, false)] {
            let analytic = grads.get(var).unwrap();
            let dir = randn(var.dims(), 10);
            let step = 1e-4;
            let plus = (var.as_tensor() + (&dir * step).unwrap()).unwrap();
            let minus = (var.as_tensor() - (&dir * step).unwrap()).unwrap();
            let (lp, lm) = if is_x {
                (loss(&plus, other.as_tensor()), loss(&minus, other.as_tensor()))
            } else {
                (loss(other.as_tensor(), &plus), loss(other.as_tensor(), &minus))
            };
            let numeric = (lp - lm) / (2.0 * step);
            let exact = (analytic * &dir).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            assert!((numeric - exact).abs() <= 1e-6 * (1.0 + exact.abs()), "{numeric} vs {exact} ({geom:?}, x={is_x})");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_grads(Some(ConvGeometry::new(1, 1, PadMode::Zero)), &[2, 3, 6, 6], &[4, 3, 3, 3]);
        check_grads(Some(ConvGeometry::new(2, 1, PadMode::Zero)), &[1, 3, 9, 9], &[2, 3, 4, 4]);
        check_grads(Some(ConvGeometry::new(1, 2, PadMode::Reflect)), &[1, 2, 6, 6], &[3, 2, 5, 5]);
        check_grads(None, &[1, 3, 4, 4], &[3, 2, 3, 3]);
    }

    #[test]
    fn f32_path_runs() {
        let x = randn(&[1, 3, 8, 8], 1).to_dtype(DType::F32).unwrap();
        let w = randn(&[2, 3, 3, 3], 2).to_dtype(DType::F32).unwrap();
        let y = conv2d(&x, &w, ConvGeometry::new(1, 1, PadMode::Reflect)).unwrap();
        assert_eq!(y.dims4().unwrap(), (1, 2, 8, 8));
        assert_eq!(y.dtype(), DType::F32);
    }

    #[test]
    fn reflection_wider_than_input_is_rejected() {
        let x = randn(&[1, 1, 2, 2], 1);
        let w = randn(&[1, 1, 3, 3], 2);
        assert!(conv2d(&x, &w, ConvGeometry::new(1, 2, PadMode::Reflect)).is_err());
    }
}
