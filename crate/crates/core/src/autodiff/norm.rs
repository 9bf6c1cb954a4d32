use super::{Mode, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

pub const BN_EPS: f64 = 1e-5;

/// Per-channel statistics of one training batch: biased mean and the
/// unbiased variance used to update running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub enum BnMode<'a, T> {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with the given running mean and variance.
    Eval { mean: &'a [T], var: &'a [T] },
}

impl<T> BnMode<'_, T> {
    pub fn mode(&self) -> Mode {
        match self {
            BnMode::Train => Mode::Train,
            BnMode::Eval { .. } => Mode::Eval,
        }
    }
}

type BnForward<T> = (Tensor4<T>, Vec<T>, Vec<T>, Option<BatchStats<T>>);

pub(crate) fn batchnorm_forward<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    beta: &Tensor4<T>,
    mode: &BnMode<'_, T>,
) -> Result<BnForward<T>> {
    let [n, c, h, w] = x.dims();
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if p.dims() != [1, c, 1, 1] {
            return Err(Error::shape(
                "batchnorm2d",
                format!("{name} dims {:?} for {c} channels", p.dims()),
            ));
        }
    }
    let hw = h * w;
    let m = n * hw;
    let mut inv_std = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = Tensor4::zeros(x.dims());
    let mut stats = None;

    let mut means = vec![T::zero(); c];
    match mode {
        BnMode::Train => {
            if m < 2 {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("training needs at least 2 values per channel, got {m}"),
                ));
            }
            let mut vars = vec![T::zero(); c];
            let mut unbiased = vec![T::zero(); c];
            for ch in 0..c {
                let mut sum = 0.0;
                for i in 0..n {
                    sum += x.plane(i, ch).iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut ss = 0.0;
                for i in 0..n {
                    ss += x.plane(i, ch).iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
                }
                means[ch] = T::of(mean);
                vars[ch] = T::of(ss / m as f64);
                unbiased[ch] = T::of(ss / (m - 1) as f64);
            }
            for ch in 0..c {
                inv_std[ch] = T::one() / (vars[ch] + T::of(BN_EPS)).sqrt();
            }
            stats = Some(BatchStats {
                mean: means.clone(),
                var: unbiased,
            });
        }
        BnMode::Eval { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("running stats length {} for {c} channels", mean.len()),
                ));
            }
            means.copy_from_slice(mean);
            for ch in 0..c {
                inv_std[ch] = T::one() / (var[ch] + T::of(BN_EPS)).sqrt();
            }
        }
    }

    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for k in base..base + hw {
                let xh = (x.data()[k] - means[ch]) * inv_std[ch];
                xhat[k] = xh;
                out.data_mut()[k] = g * xh + b;
            }
        }
    }
    Ok((out, xhat, inv_std, stats))
}

#[allow(clippy::type_complexity)]
pub(crate) fn batchnorm_backward<T: Scalar>(
    gamma: &Tensor4<T>,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    g: &Tensor4<T>,
    need_x: bool,
) -> (Option<Tensor4<T>>, Tensor4<T>, Tensor4<T>) {
    let [n, c, h, w] = g.dims();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dgamma = Tensor4::zeros([1, c, 1, 1]);
    let mut dbeta = Tensor4::zeros([1, c, 1, 1]);
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for k in base..base + hw {
                let gv = g.data()[k].as_f64();
                sum_g[ch] += gv;
                sum_gx[ch] += gv * xhat[k].as_f64();
            }
        }
    }
    for ch in 0..c {
        dgamma.data_mut()[ch] = T::of(sum_gx[ch]);
        dbeta.data_mut()[ch] = T::of(sum_g[ch]);
    }
    let dx = need_x.then(|| {
        let mut dx = Tensor4::zeros(g.dims());
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let scale = gamma.data()[ch] * inv_std[ch];
                if train {
                    let mean_g = T::of(sum_g[ch] / m);
                    let mean_gx = T::of(sum_gx[ch] / m);
                    for k in base..base + hw {
                        dx.data_mut()[k] = scale * (g.data()[k] - mean_g - xhat[k] * mean_gx);
                    }
                } else {
                    for k in base..base + hw {
                        dx.data_mut()[k] = scale * g.data()[k];
                    }
                }
            }
        }
        dx
    });
    (dx, dgamma, dbeta)
}

impl<T: Scalar> Tape<T> {
    /// Per-channel batch normalisation over `(n, h, w)`. In train mode the
    /// batch statistics are returned so the caller can update its running
    /// estimates.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        self.check_live()?;
        let (out, xhat, inv_std, stats) =
            batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), &mode)?;
        let train = matches!(mode, BnMode::Train);
        let v = self.push(
            "batchnorm2d",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        Ok((v, stats))
    }
}
