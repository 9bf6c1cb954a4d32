use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// 2×2 max pooling, stride 2. Returns the pooled tensor and, per output
/// element, the flat input index of its window maximum. Ties resolve to the
/// first element in row-major order.
pub(crate) fn maxpool_forward<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("spatial dims must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                out.data_mut()[argmax.len()] = data[best];
                argmax.push(best);
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn maxpool_backward<T: Scalar>(x_dims: Dims, argmax: &[usize], g: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(x_dims);
    for (&src, &gv) in argmax.iter().zip(g.data()) {
        dx.data_mut()[src] += gv;
    }
    dx
}

impl<T: Scalar> Tape<T> {
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let (out, argmax) = maxpool_forward(self.value(x))?;
        self.push("maxpool2d", out, Op::MaxPool { x, argmax })
    }
}
