use rand::Rng;

use super::{Mode, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

pub(crate) fn relu_backward<T: Scalar>(x: &Tensor4<T>, g: &Tensor4<T>) -> Tensor4<T> {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
        .collect();
    Tensor4::from_vec(x.dims(), data).expect("same dims")
}

pub(crate) fn dropout_backward<T: Scalar>(mask: &[T], g: &Tensor4<T>) -> Tensor4<T> {
    let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
    Tensor4::from_vec(g.dims(), data).expect("same dims")
}

/// `y` is the softmax output; for each pixel `dx_k = y_k (g_k - Σ_j g_j y_j)`.
pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor4<T>, g: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = y.dims();
    let hw = h * w;
    let mut dx = Tensor4::zeros(y.dims());
    for i in 0..n {
        let base = i * c * hw;
        for p in 0..hw {
            let mut dot = T::zero();
            for k in 0..c {
                let idx = base + k * hw + p;
                dot += g.data()[idx] * y.data()[idx];
            }
            for k in 0..c {
                let idx = base + k * hw + p;
                dx.data_mut()[idx] = y.data()[idx] * (g.data()[idx] - dot);
            }
        }
    }
    dx
}

pub(crate) fn softmax_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut y = Tensor4::zeros(x.dims());
    for i in 0..n {
        let base = i * c * hw;
        for p in 0..hw {
            let mut max = T::neg_infinity();
            for k in 0..c {
                max = max.max(x.data()[base + k * hw + p]);
            }
            let mut total = T::zero();
            for k in 0..c {
                let e = (x.data()[base + k * hw + p] - max).exp();
                y.data_mut()[base + k * hw + p] = e;
                total += e;
            }
            for k in 0..c {
                y.data_mut()[base + k * hw + p] /= total;
            }
        }
    }
    y
}

impl<T: Scalar> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", out, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.dims(), vb.dims()),
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        self.push("add", out, Op::Add { a, b })
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`. Eval mode
    /// is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        self.check_live()?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor4::from_vec(src.dims(), data)?;
        self.push("dropout", out, Op::Dropout { x, mask })
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let out = softmax_forward(self.value(x));
        self.push("softmax_channel", out, Op::Softmax { x })
    }

    /// Sum of all elements as a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.value(x).sum();
        self.push("sum", Tensor4::scalar(s), Op::Sum { x })
    }

    /// Attach a scalar computed outside the tape, given its value and its
    /// gradient with respect to `x`. Losses enter the tape this way.
    pub fn scalar_head(&mut self, x: Var, value: T, grad: Tensor4<T>) -> Result<Var> {
        self.check_live()?;
        if grad.dims() != self.value(x).dims() {
            return Err(Error::shape(
                "scalar_head",
                format!("gradient dims {:?} vs input {:?}", grad.dims(), self.value(x).dims()),
            ));
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite { op: "scalar_head" });
        }
        self.push("scalar_head", Tensor4::scalar(value), Op::ScalarHead { x, grad })
    }

    /// `Σ weights ⊙ x`, a fixed linear functional. Handy for reducing a
    /// tensor-valued op to a scalar with a non-trivial upstream gradient.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor4<T>) -> Result<Var> {
        let value = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        self.scalar_head(x, value, weights.clone())
    }
}
