//! Cross-entropy, soft dice, their combination `ce - ln(1 - DL)`, and
//! pixel-level classification metrics.
//!
//! Predictions are per-pixel class probabilities `(n, 3, h, w)`. Ground truth
//! is a flat `n*h*w` array of class indices: 0 background, 1 anticyclonic,
//! 2 cyclonic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

pub const NUM_CLASSES: usize = 3;
/// Probabilities are clamped to at least this before taking logs.
pub const PROB_FLOOR: f64 = 1e-7;
/// Dice smoothing term added to numerator and denominator.
pub const DICE_EPS: f64 = 1e-7;
/// Upper clamp on the dice loss inside `ln(1 - DL)`.
pub const DICE_LOSS_CLAMP: f64 = 1.0 - 1e-7;

pub const BACKGROUND: u8 = 0;
pub const ANTICYCLONIC: u8 = 1;
pub const CYCLONIC: u8 = 2;

/// Map a raw label (-1 cyclonic, 0 background, +1 anticyclonic) to a class.
pub fn class_of_label(label: i8) -> Result<u8> {
    match label {
        0 => Ok(BACKGROUND),
        1 => Ok(ANTICYCLONIC),
        -1 => Ok(CYCLONIC),
        other => Err(Error::InvalidLabel(other)),
    }
}

pub fn label_of_class(class: u8) -> Result<i8> {
    match class {
        BACKGROUND => Ok(0),
        ANTICYCLONIC => Ok(1),
        CYCLONIC => Ok(-1),
        other => Err(Error::InvalidClass(other)),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Combined,
    CeOnly,
    DiceOnly,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(LossKind::Combined),
            "ce" | "ce_only" => Ok(LossKind::CeOnly),
            "dice" | "dice_only" => Ok(LossKind::DiceOnly),
            other => Err(Error::InvalidArgument(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub dice_loss: f64,
    pub combined: f64,
    pub per_class_dice: [f64; NUM_CLASSES],
}

impl LossReport {
    pub fn new(ce: f64, per_class_dice: [f64; NUM_CLASSES]) -> Self {
        let dice_loss = 1.0 - per_class_dice.iter().sum::<f64>() / NUM_CLASSES as f64;
        Self {
            ce,
            dice_loss,
            combined: combine(ce, dice_loss),
            per_class_dice,
        }
    }

    /// Value of the training objective for `kind`.
    pub fn objective(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Combined => self.combined,
            LossKind::CeOnly => self.ce,
            LossKind::DiceOnly => self.dice_loss,
        }
    }
}

/// `ce - ln(1 - min(DL, 1 - 1e-7))`
pub fn combine(ce: f64, dice_loss: f64) -> f64 {
    ce - (1.0 - dice_loss.min(DICE_LOSS_CLAMP)).ln()
}

fn check_inputs<T: Scalar>(probs: &Tensor4<T>, classes: &[u8]) -> Result<()> {
    let [n, c, h, w] = probs.dims();
    if c != NUM_CLASSES {
        return Err(Error::shape("loss", format!("expected {NUM_CLASSES} channels, got {c}")));
    }
    if classes.len() != n * h * w {
        return Err(Error::shape(
            "loss",
            format!("{} labels for {n}x{h}x{w} pixels", classes.len()),
        ));
    }
    if let Some(&bad) = classes.iter().find(|&&k| k as usize >= NUM_CLASSES) {
        return Err(Error::InvalidClass(bad));
    }
    Ok(())
}

/// Iterate `(probability of class k at pixel, true class of pixel)` with the
/// pixel's flat `(n, h, w)` index.
fn for_each_pixel<T: Scalar>(probs: &Tensor4<T>, mut f: impl FnMut(usize, usize, usize)) {
    let [n, c, h, w] = probs.dims();
    let hw = h * w;
    for i in 0..n {
        for k in 0..c {
            for p in 0..hw {
                f((i * c + k) * hw + p, i * hw + p, k);
            }
        }
    }
}

/// Mean negative log-likelihood of the true class, natural log.
pub fn cross_entropy<T: Scalar>(probs: &Tensor4<T>, classes: &[u8]) -> Result<f64> {
    check_inputs(probs, classes)?;
    Ok(CeSum::of(probs, classes).mean())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CeSum {
    pub total: f64,
    pub pixels: usize,
}

impl CeSum {
    fn of<T: Scalar>(probs: &Tensor4<T>, classes: &[u8]) -> Self {
        let mut s = CeSum::default();
        s.add(probs, classes);
        s
    }

    pub fn add<T: Scalar>(&mut self, probs: &Tensor4<T>, classes: &[u8]) {
        for_each_pixel(probs, |idx, pix, k| {
            if classes[pix] as usize == k {
                self.total -= probs.data()[idx].as_f64().max(PROB_FLOOR).ln();
            }
        });
        self.pixels += classes.len();
    }

    pub fn mean(&self) -> f64 {
        if self.pixels == 0 {
            0.0
        } else {
            self.total / self.pixels as f64
        }
    }
}

/// Running sums for soft dice: `Σ P_c G_c`, `Σ P_c`, `Σ G_c` per class.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiceSums {
    pub intersection: [f64; NUM_CLASSES],
    pub predicted: [f64; NUM_CLASSES],
    pub truth: [f64; NUM_CLASSES],
}

impl DiceSums {
    pub fn add<T: Scalar>(&mut self, probs: &Tensor4<T>, classes: &[u8]) {
        for_each_pixel(probs, |idx, pix, k| {
            let p = probs.data()[idx].as_f64();
            self.predicted[k] += p;
            if classes[pix] as usize == k {
                self.intersection[k] += p;
                self.truth[k] += 1.0;
            }
        });
    }

    /// `(2 Σ P_c G_c + ε) / (Σ P_c + Σ G_c + ε)` for each class.
    pub fn per_class(&self) -> [f64; NUM_CLASSES] {
        std::array::from_fn(|c| {
            (2.0 * self.intersection[c] + DICE_EPS) / (self.predicted[c] + self.truth[c] + DICE_EPS)
        })
    }
}

/// Per-class soft dice and their macro average.
pub fn dice<T: Scalar>(probs: &Tensor4<T>, classes: &[u8]) -> Result<([f64; NUM_CLASSES], f64)> {
    check_inputs(probs, classes)?;
    let mut sums = DiceSums::default();
    sums.add(probs, classes);
    let per = sums.per_class();
    Ok((per, per.iter().sum::<f64>() / NUM_CLASSES as f64))
}

pub fn combined_loss<T: Scalar>(probs: &Tensor4<T>, classes: &[u8]) -> Result<LossReport> {
    check_inputs(probs, classes)?;
    let mut sums = DiceSums::default();
    sums.add(probs, classes);
    Ok(LossReport::new(CeSum::of(probs, classes).mean(), sums.per_class()))
}

/// Loss report, the objective selected by `kind`, and the objective's
/// gradient with respect to the probabilities.
pub fn loss_and_grad<T: Scalar>(
    probs: &Tensor4<T>,
    classes: &[u8],
    kind: LossKind,
) -> Result<(LossReport, f64, Tensor4<T>)> {
    check_inputs(probs, classes)?;
    let mut sums = DiceSums::default();
    sums.add(probs, classes);
    let report = LossReport::new(CeSum::of(probs, classes).mean(), sums.per_class());

    let n_pix = classes.len() as f64;
    let (ce_w, dice_w) = match kind {
        LossKind::Combined => {
            let w = if report.dice_loss < DICE_LOSS_CLAMP {
                1.0 / (1.0 - report.dice_loss)
            } else {
                0.0
            };
            (1.0, w)
        }
        LossKind::CeOnly => (1.0, 0.0),
        LossKind::DiceOnly => (0.0, 1.0),
    };
    // d(DL)/dP_c(i) = -(1/3) (2 G_c(i) S_c - (2 I_c + ε)) / S_c²,  S_c = ΣP_c + ΣG_c + ε
    let denom: [f64; NUM_CLASSES] =
        std::array::from_fn(|c| sums.predicted[c] + sums.truth[c] + DICE_EPS);
    let numer: [f64; NUM_CLASSES] = std::array::from_fn(|c| 2.0 * sums.intersection[c] + DICE_EPS);

    let mut grad = Tensor4::zeros(probs.dims());
    for_each_pixel(probs, |idx, pix, k| {
        let p = probs.data()[idx].as_f64();
        let is_true = classes[pix] as usize == k;
        let mut g = 0.0;
        if is_true && p >= PROB_FLOOR {
            g -= ce_w / (n_pix * p);
        }
        if dice_w != 0.0 {
            let gt = if is_true { 1.0 } else { 0.0 };
            let dd = (2.0 * gt * denom[k] - numer[k]) / (denom[k] * denom[k]);
            g -= dice_w * dd / NUM_CLASSES as f64;
        }
        grad.data_mut()[idx] = T::of(g);
    });
    let objective = report.objective(kind);
    Ok((report, objective, grad))
}

/// Per-pixel argmax over classes, ties to the lowest class index.
pub fn argmax_classes<T: Scalar>(probs: &Tensor4<T>) -> Vec<u8> {
    let [n, c, h, w] = probs.dims();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if probs.data()[(i * c + k) * hw + p] > probs.data()[(i * c + best) * hw + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pixel_accuracy: f64,
    /// Rows are the true class, columns the predicted class.
    pub confusion: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub precision: [f64; NUM_CLASSES],
    pub recall: [f64; NUM_CLASSES],
}

impl Metrics {
    pub fn from_confusion(confusion: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..NUM_CLASSES).map(|k| confusion[k][k]).sum();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            pixel_accuracy: ratio(trace, total),
            confusion,
            precision: std::array::from_fn(|k| {
                ratio(confusion[k][k], (0..NUM_CLASSES).map(|t| confusion[t][k]).sum())
            }),
            recall: std::array::from_fn(|k| ratio(confusion[k][k], confusion[k].iter().sum())),
        }
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<[[u64; NUM_CLASSES]; NUM_CLASSES]> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "pixel_accuracy",
            format!("{} predictions vs {} labels", pred.len(), truth.len()),
        ));
    }
    let mut m = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &t) in pred.iter().zip(truth) {
        if p as usize >= NUM_CLASSES {
            return Err(Error::InvalidClass(p));
        }
        if t as usize >= NUM_CLASSES {
            return Err(Error::InvalidClass(t));
        }
        m[t as usize][p as usize] += 1;
    }
    Ok(m)
}

pub fn pixel_accuracy(pred: &[u8], truth: &[u8]) -> Result<Metrics> {
    Ok(Metrics::from_confusion(confusion(pred, truth)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(classes: &[u8], dims: [usize; 4]) -> Tensor4<f64> {
        Tensor4::from_fn(dims, |[n, k, y, x]| {
            let pix = (n * dims[2] + y) * dims[3] + x;
            if classes[pix] as usize == k {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn uniform_prediction_gives_ln3() {
        let p = Tensor4::<f64>::full([2, 3, 4, 4], 1.0 / 3.0);
        let g: Vec<u8> = (0..32).map(|i| (i % 3) as u8).collect();
        assert!((cross_entropy(&p, &g).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_pixel_cross_entropy() {
        let p = Tensor4::<f64>::from_vec([1, 3, 1, 2], vec![0.5, 0.25, 0.25, 0.5, 0.25, 0.25]).unwrap();
        let ce = cross_entropy(&p, &[0, 0]).unwrap();
        assert!((ce - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!((ce - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn exact_one_hot_is_near_zero() {
        let g: Vec<u8> = (0..16).map(|i| (i * 7 % 3) as u8).collect();
        let p = one_hot(&g, [1, 3, 4, 4]);
        let r = combined_loss(&p, &g).unwrap();
        assert!(r.ce <= 1e-6);
        assert!(r.dice_loss.abs() < 1e-12);
        assert!(r.per_class_dice.iter().all(|&d| (d - 1.0).abs() < 1e-12));
        assert!(r.combined <= 2e-6);
    }

    #[test]
    fn hard_mask_dice_arithmetic() {
        // class 1 predicted on 100 pixels, true on 100, overlapping on 80
        let mut truth = vec![0u8; 400];
        let mut pred = vec![0u8; 400];
        truth[..100].fill(1);
        pred[20..120].fill(1);
        let p = one_hot(&pred, [1, 3, 20, 20]);
        let (per, _) = dice(&p, &truth).unwrap();
        assert!((per[1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn absent_class_dice_is_one() {
        let g = vec![0u8; 9];
        let p = one_hot(&[0; 9], [1, 3, 3, 3]);
        let (per, _) = dice(&p, &g).unwrap();
        assert_eq!(per[1], 1.0);
        assert_eq!(per[2], 1.0);
    }

    #[test]
    fn table_rows_reproduce() {
        assert!((combine(0.0763, 0.1076) - 0.190141).abs() < 1e-6);
        assert!((combine(0.0935, 0.1314) - 0.234373).abs() < 1e-6);
    }

    #[test]
    fn dice_loss_is_clamped() {
        assert!(combine(0.0, 1.0).is_finite());
        assert!((combine(0.0, 1.0) - 1e7f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn invalid_inputs_rejected() {
        let p = Tensor4::<f64>::full([1, 3, 2, 2], 1.0 / 3.0);
        assert!(matches!(cross_entropy(&p, &[0, 1, 3, 0]), Err(Error::InvalidClass(3))));
        assert!(matches!(cross_entropy(&p, &[0, 1, 2]), Err(Error::Shape { .. })));
        let p2 = Tensor4::<f64>::full([1, 2, 2, 2], 0.5);
        assert!(dice(&p2, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn accuracy_of_constant_background() {
        let mut truth = vec![0u8; 100];
        truth[..20].fill(1);
        truth[20..30].fill(2);
        let m = pixel_accuracy(&[0u8; 100], &truth).unwrap();
        assert!((m.pixel_accuracy - 0.7).abs() < 1e-12);
        assert_eq!(m.confusion[1][0], 20);
        assert_eq!(m.confusion[2][0], 10);
        assert_eq!(m.total(), 100);
        assert_eq!(m.recall[1], 0.0);
        assert!((m.precision[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let truth: Vec<u8> = (0..50).map(|i| (i % 3) as u8).collect();
        let m = pixel_accuracy(&truth, &truth).unwrap();
        assert_eq!(m.pixel_accuracy, 1.0);
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(m.confusion[t][p] > 0, t == p);
            }
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let p = Tensor4::<f64>::from_vec([1, 3, 1, 2], vec![0.4, 0.2, 0.4, 0.2, 0.2, 0.6]).unwrap();
        assert_eq!(argmax_classes(&p), vec![0, 2]);
    }

    #[test]
    fn label_mapping_round_trips() {
        for l in [-1i8, 0, 1] {
            assert_eq!(label_of_class(class_of_label(l).unwrap()).unwrap(), l);
        }
        assert!(matches!(class_of_label(2), Err(Error::InvalidLabel(2))));
    }

    #[test]
    fn objective_gradient_matches_finite_differences_in_probs() {
        let dims = [1, 3, 3, 3];
        let probs = Tensor4::<f64>::from_fn(dims, |[_, k, y, x]| {
            0.1 + ((k * 9 + y * 3 + x) as f64 * 0.61).sin().abs() * 0.8
        });
        let g: Vec<u8> = (0..9).map(|i| (i * 5 % 3) as u8).collect();
        for kind in [LossKind::Combined, LossKind::CeOnly, LossKind::DiceOnly] {
            let (_, _, grad) = loss_and_grad(&probs, &g, kind).unwrap();
            for i in 0..probs.len() {
                let h = 1e-6;
                let mut pp = probs.clone();
                pp.data_mut()[i] += h;
                let mut pm = probs.clone();
                pm.data_mut()[i] -= h;
                let fp = loss_and_grad(&pp, &g, kind).unwrap().1;
                let fm = loss_and_grad(&pm, &g, kind).unwrap().1;
                let num = (fp - fm) / (2.0 * h);
                let err = (num - grad.data()[i]).abs() / num.abs().max(grad.data()[i].abs()).max(1e-8);
                assert!(err < 1e-5, "{kind:?} element {i}: {num} vs {}", grad.data()[i]);
            }
        }
    }
}
