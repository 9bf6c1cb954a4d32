//! Central finite-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor4;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many input elements, sampled uniformly across all
    /// inputs. `None` checks every element.
    pub max_checks: Option<usize>,
    pub seed: u64,
    /// Multiplier applied to analytic gradients before comparison. Anything
    /// other than 1.0 simulates a faulty backward pass.
    pub analytic_scale: f64,
    /// Skip elements whose `x ± step` evaluations cross a ReLU or max-pool
    /// kink, where central differences are not a valid oracle, and draw
    /// another element instead.
    pub skip_kinks: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_checks: None,
            seed: 0,
            analytic_scale: 1.0,
            skip_kinks: false,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Elements passed over because a kink lay within the step.
    pub skipped: usize,
    /// `(input index, element index)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub pass: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the tape gradient of the scalar built by `f` against central
/// differences `(f(x+δ) - f(x-δ)) / 2δ`, for every element of every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor4<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor4<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).data()[0], tape.kink_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    let signature = tape.kink_signature();
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor4<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get_or_zeros(v, x.dims()))
        .collect();

    let total: usize = inputs.iter().map(Tensor4::len).sum();
    let mut candidates: Vec<usize> = (0..total).collect();
    let wanted = match opts.max_checks {
        Some(k) if k < total => {
            candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
            k
        }
        _ => total,
    };

    let mut values = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
        pass: true,
    };
    for flat in candidates {
        if report.checked == wanted {
            break;
        }
        let (mut input, mut elem) = (0, flat);
        while elem >= inputs[input].len() {
            elem -= inputs[input].len();
            input += 1;
        }
        let orig = values[input].data()[elem];
        values[input].data_mut()[elem] = orig + opts.step;
        let (plus, sig_plus) = eval(&values)?;
        values[input].data_mut()[elem] = orig - opts.step;
        let (minus, sig_minus) = eval(&values)?;
        values[input].data_mut()[elem] = orig;
        if opts.skip_kinks && (sig_plus != signature || sig_minus != signature) {
            report.skipped += 1;
            continue;
        }

        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[input].data()[elem] * opts.analytic_scale;
        let err = rel_err(a, numeric);
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((input, elem));
        }
        report.checked += 1;
    }
    report.pass = report.checked > 0 && report.max_rel_err <= opts.tol;
    Ok(report)
}
