//! Dilated 2-D convolution (im2col + GEMM) and the 2×2 stride-2 transposed
//! convolution used for upsampling.

use serde::{Deserialize, Serialize};

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution padded so spatial dims are preserved.
    pub fn same(in_channels: usize, out_channels: usize, k: usize, dilation: usize, has_bias: bool) -> Self {
        Self {
            kernel: (k, k),
            stride: 1,
            dilation,
            padding: dilation * (k - 1) / 2,
            in_channels,
            out_channels,
            has_bias,
        }
    }

    /// Extent in cells covered by the dilated kernel: `k + (k-1)(r-1)`.
    pub fn effective_extent(&self) -> (usize, usize) {
        let r = self.dilation;
        (
            self.kernel.0 + (self.kernel.0 - 1) * (r - 1),
            self.kernel.1 + (self.kernel.1 - 1) * (r - 1),
        )
    }

    /// Independent of the dilation rate.
    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel.0 * self.kernel.1
            + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn weight_dims(&self) -> Dims {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    pub fn bias_dims(&self) -> Dims {
        [1, self.out_channels, 1, 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel, stride and dilation must be positive: {self:?}"
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument(format!("zero channels: {self:?}")));
        }
        Ok(())
    }

    /// Output spatial dims for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (eh, ew) = self.effective_extent();
        let dim = |len: usize, ext: usize| -> Result<usize> {
            let padded = len + 2 * self.padding;
            if padded < ext || (padded - ext) % self.stride != 0 {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "input extent {len} with padding {} does not tile kernel extent {ext} at stride {}",
                        self.padding, self.stride
                    ),
                ));
            }
            Ok((padded - ext) / self.stride + 1)
        };
        Ok((dim(h, eh)?, dim(w, ew)?))
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source coordinate for output position `o` and kernel tap `k`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.src(oy, ki, g.h) {
                        None => seg.fill(T::zero()),
                        Some(iy) => {
                            let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, d) in seg.iter_mut().enumerate() {
                                *d = g.src(ox, kj, g.w).map_or(T::zero(), |ix| src_row[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: Dims, spec: &ConvSpec) -> Result<Geometry> {
    let (oh, ow) = spec.output_hw(x[2], x[3])?;
    Ok(Geometry {
        c: x[1],
        h: x[2],
        w: x[3],
        oh,
        ow,
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        stride: spec.stride,
        dilation: spec.dilation,
        pad: spec.padding,
    })
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: Option<&Tensor4<T>>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    spec.validate()?;
    if x.channels() != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, spec expects {}", x.channels(), spec.in_channels),
        ));
    }
    if w.dims() != spec.weight_dims() {
        return Err(Error::shape(
            "conv2d",
            format!("weight dims {:?}, spec expects {:?}", w.dims(), spec.weight_dims()),
        ));
    }
    if let Some(b) = b {
        if b.dims() != spec.bias_dims() {
            return Err(Error::shape("conv2d", format!("bias dims {:?}", b.dims())));
        }
    }
    let g = geometry(x.dims(), spec)?;
    let n = x.batch();
    let oc = spec.out_channels;
    let (rows, p) = (g.rows(), g.cols());
    let mut out = Tensor4::zeros([n, oc, g.oh, g.ow]);
    let mut cols = vec![T::zero(); rows * p];
    let in_len = g.c * g.h * g.w;
    for i in 0..n {
        im2col(&x.data()[i * in_len..(i + 1) * in_len], &g, &mut cols);
        let dst = &mut out.data_mut()[i * oc * p..(i + 1) * oc * p];
        T::gemm(oc, rows, p, w.data(), false, &cols, false, dst, false);
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                let bias = b.data()[o];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    spec: &ConvSpec,
    gout: &Tensor4<T>,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor4<T>>, Option<Tensor4<T>>, Option<Tensor4<T>>) {
    let g = geometry(x.dims(), spec).expect("geometry validated in forward");
    let n = x.batch();
    let oc = spec.out_channels;
    let (rows, p) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;

    let mut dx = need_x.then(|| Tensor4::zeros(x.dims()));
    let mut dw = need_w.then(|| Tensor4::zeros(w.dims()));
    let db = need_b.then(|| {
        let mut db = Tensor4::zeros(spec.bias_dims());
        for i in 0..n {
            for o in 0..oc {
                let s: T = gout.plane(i, o).iter().copied().sum();
                db.data_mut()[o] += s;
            }
        }
        db
    });

    let mut cols = vec![T::zero(); rows * p];
    for i in 0..n {
        let go = &gout.data()[i * oc * p..(i + 1) * oc * p];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[i * in_len..(i + 1) * in_len], &g, &mut cols);
            T::gemm(oc, p, rows, go, false, &cols, true, dw.data_mut(), true);
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(rows, oc, p, w.data(), true, go, false, &mut cols, false);
            col2im(&cols, &g, &mut dx.data_mut()[i * in_len..(i + 1) * in_len]);
        }
    }
    (dx, dw, db)
}

fn check_transpose_dims<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, b: Option<&Tensor4<T>>) -> Result<()> {
    let [ic, oc, kh, kw] = w.dims();
    if kh != 2 || kw != 2 {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("kernel must be 2x2, weight dims {:?}", w.dims()),
        ));
    }
    if x.channels() != ic {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input has {} channels, weights expect {ic}", x.channels()),
        ));
    }
    if let Some(b) = b {
        if b.dims() != [1, oc, 1, 1] {
            return Err(Error::shape("conv_transpose2d", format!("bias dims {:?}", b.dims())));
        }
    }
    Ok(())
}

/// Weights are `[in_c, out_c, 2, 2]`.
pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: Option<&Tensor4<T>>,
) -> Result<Tensor4<T>> {
    check_transpose_dims(x, w, b)?;
    let [n, ic, h, wd] = x.dims();
    let oc = w.dims()[1];
    let hw = h * wd;
    let rows = oc * 4;
    let mut out = Tensor4::zeros([n, oc, 2 * h, 2 * wd]);
    let mut cols = vec![T::zero(); rows * hw];
    for i in 0..n {
        let xi = &x.data()[i * ic * hw..(i + 1) * ic * hw];
        T::gemm(rows, ic, hw, w.data(), true, xi, false, &mut cols, false);
        for o in 0..oc {
            let bias = b.map_or(T::zero(), |b| b.data()[o]);
            for a in 0..2 {
                for c in 0..2 {
                    let row = &cols[((o * 2 + a) * 2 + c) * hw..][..hw];
                    for y in 0..h {
                        for xx in 0..wd {
                            out.set([i, o, 2 * y + a, 2 * xx + c], row[y * wd + xx] + bias);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    gout: &Tensor4<T>,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor4<T>>, Option<Tensor4<T>>, Option<Tensor4<T>>) {
    let [n, ic, h, wd] = x.dims();
    let oc = w.dims()[1];
    let hw = h * wd;
    let rows = oc * 4;
    let mut dx = need_x.then(|| Tensor4::zeros(x.dims()));
    let mut dw = need_w.then(|| Tensor4::zeros(w.dims()));
    let mut db = need_b.then(|| Tensor4::zeros([1, oc, 1, 1]));
    let mut dcols = vec![T::zero(); rows * hw];
    for i in 0..n {
        for o in 0..oc {
            for a in 0..2 {
                for c in 0..2 {
                    let row = &mut dcols[((o * 2 + a) * 2 + c) * hw..][..hw];
                    for y in 0..h {
                        for xx in 0..wd {
                            row[y * wd + xx] = gout.at([i, o, 2 * y + a, 2 * xx + c]);
                        }
                    }
                }
            }
            if let Some(db) = db.as_mut() {
                let s: T = gout.plane(i, o).iter().copied().sum();
                db.data_mut()[o] += s;
            }
        }
        let xi = &x.data()[i * ic * hw..(i + 1) * ic * hw];
        if let Some(dw) = dw.as_mut() {
            T::gemm(ic, hw, rows, xi, false, &dcols, true, dw.data_mut(), true);
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[i * ic * hw..(i + 1) * ic * hw];
            T::gemm(ic, rows, hw, w.data(), false, &dcols, false, dst, false);
        }
    }
    (dx, dw, db)
}

impl<T: Scalar> Tape<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.check_live()?;
        if b.is_some() != spec.has_bias {
            return Err(Error::InvalidArgument(format!(
                "bias presence ({}) disagrees with spec.has_bias ({})",
                b.is_some(),
                spec.has_bias
            )));
        }
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        self.push("conv2d", out, Op::Conv2d { x, w, b, spec })
    }

    /// 2×2 kernel, stride 2: doubles height and width.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_live()?;
        let out = conv_transpose2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push("conv_transpose2d", out, Op::ConvTranspose2d { x, w, b })
    }
}
