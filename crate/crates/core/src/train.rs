//! Adam, the reduce-on-plateau learning-rate schedule, and the
//! training/evaluation loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::checkpoint::InputPipeline;
use crate::data::{normalize, Manifest, NormStats, Sample, Split, CHANNELS, CHANNEL_NAMES};
use crate::error::{Error, Result};
use crate::loss::{self, class_of_label, combine, CeSum, DiceSums, LossKind, LossReport, Metrics, NUM_CLASSES};
use crate::net::{Named, Network, NetworkSpec};
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub min_lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub plateau_factor: f64,
    pub patience: usize,
    /// Minimum decrease in validation loss that counts as improvement.
    pub min_delta: f64,
    pub seed: u64,
    /// Indices into the sample channel order (SSH, SST, U, V).
    pub channels: Vec<usize>,
    pub dilation: bool,
    pub base_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            min_lr: 1e-30,
            batch: 8,
            epochs: 50,
            loss: LossKind::Combined,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            plateau_factor: 0.1,
            patience: 5,
            min_delta: 1e-4,
            seed: 0,
            channels: (0..CHANNELS).collect(),
            dilation: true,
            base_channels: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.min_lr > 0.0 && self.min_lr <= self.lr0) {
            return bad(format!("need 0 < min_lr <= lr0, got {} and {}", self.min_lr, self.lr0));
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be at least 1".into());
        }
        if self.channels.is_empty() {
            return bad("channel subset is empty".into());
        }
        if self.channels.iter().any(|&c| c >= CHANNELS) {
            return bad(format!("channel index out of range in {:?}", self.channels));
        }
        Ok(())
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            in_channels: self.channels.len(),
            base_channels: self.base_channels,
            dilation: if self.dilation { 4 } else { 1 },
            ..NetworkSpec::default()
        }
    }
}

/// Parse a channel selector such as `ssh,sst,uv` or `u,v`. `uv` expands to
/// both velocity components.
pub fn parse_channels(spec: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let idx: Vec<usize> = match part {
            "uv" | "velocity" => vec![2, 3],
            "all" => (0..CHANNELS).collect(),
            name => vec![CHANNEL_NAMES
                .iter()
                .position(|&n| n == name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown channel {name:?}")))?],
        };
        for i in idx {
            if !out.contains(&i) {
                out.push(i);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("channel subset is empty".into()));
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor4<T>>,
    pub v: Vec<Tensor4<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Named<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor4::zeros(p.tensor.dims())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`. Non-finite
/// gradients abort before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut [Named<T>],
    grads: &[Tensor4<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.tensor.dims() != g.dims() {
            return Err(Error::shape("adam_step", format!("{}: {:?} vs {:?}", p.name, p.tensor.dims(), g.dims())));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { name: p.name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let it = p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((x, &gv), (mv, vv)) in it {
            let gv = gv.as_f64();
            let m_new = b1 * mv.as_f64() + (1.0 - b1) * gv;
            let v_new = b2 * vv.as_f64() + (1.0 - b2) * gv * gv;
            *mv = T::of(m_new);
            *vv = T::of(v_new);
            let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + cfg.adam_eps);
            *x = T::of(x.as_f64() - update);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub lr: f64,
    pub best: f64,
    pub since_improvement: usize,
}

impl PlateauState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr0,
            best: f64::INFINITY,
            since_improvement: 0,
        }
    }
}

/// Called once per epoch: after `patience` epochs without a decrease of more
/// than `min_delta`, multiply the learning rate by `plateau_factor`, never
/// going below `min_lr`.
pub fn lr_on_plateau(state: &mut PlateauState, val_loss: f64, cfg: &TrainConfig) {
    if val_loss < state.best - cfg.min_delta {
        state.best = val_loss;
        state.since_improvement = 0;
        return;
    }
    state.since_improvement += 1;
    if state.since_improvement >= cfg.patience {
        state.lr = (state.lr * cfg.plateau_factor).max(cfg.min_lr);
        state.since_improvement = 0;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub dice_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,loss,ce,dice_loss,train_acc,val_acc,lr";

pub fn write_history_csv<W: Write>(rows: &[HistoryRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:e}",
            r.epoch, r.loss, r.ce, r.dice_loss, r.train_acc, r.val_acc, r.lr
        )?;
    }
    Ok(())
}

/// Normalised, channel-selected samples ready for batching.
#[derive(Clone, Debug)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    inputs: Vec<Vec<f32>>,
    classes: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn new(samples: &[Sample], stats: &NormStats, channels: &[usize]) -> Result<Self> {
        let (height, width) = samples.first().map_or((0, 0), |s| (s.height(), s.width()));
        let mut inputs = Vec::with_capacity(samples.len());
        let mut classes = Vec::with_capacity(samples.len());
        for s in samples {
            if (s.height(), s.width()) != (height, width) {
                return Err(Error::shape(
                    "dataset",
                    format!("mixed sample sizes {}x{} and {height}x{width}", s.height(), s.width()),
                ));
            }
            let n = normalize(s, stats);
            inputs.push(channels.iter().flat_map(|&c| n.channel(c).iter().copied()).collect());
            classes.push(s.labels().iter().map(|&l| class_of_label(l)).collect::<Result<_>>()?);
        }
        Ok(Self {
            channels: channels.len(),
            height,
            width,
            inputs,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn classes(&self, i: usize) -> &[u8] {
        &self.classes[i]
    }

    /// Stack the given samples into an `(n, c, h, w)` tensor and flat class
    /// labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4<f32>, Vec<u8>) {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.height * self.width);
        let mut classes = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            data.extend_from_slice(&self.inputs[i]);
            classes.extend_from_slice(&self.classes[i]);
        }
        let dims = [indices.len(), self.channels, self.height, self.width];
        (Tensor4::from_vec(dims, data).expect("consistent sample sizes"), classes)
    }

    /// Fraction of pixels belonging to the most common class.
    pub fn majority_fraction(&self) -> f64 {
        let mut counts = [0usize; NUM_CLASSES];
        for c in self.classes.iter().flatten() {
            counts[*c as usize] += 1;
        }
        let total: usize = counts.iter().sum();
        *counts.iter().max().unwrap() as f64 / total.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub loss: LossReport,
    /// Predicted class per pixel, samples in dataset order.
    #[serde(skip)]
    pub predictions: Vec<u8>,
}

/// Eval-mode pass over the whole dataset. Cross-entropy is the mean over all
/// pixels and dice is computed from split-wide sums, so the result does not
/// depend on `batch`.
pub fn evaluate(net: &Network<f32>, data: &Dataset, batch: usize, split: &str) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptySplit(split.to_owned()));
    }
    let mut ce = CeSum::default();
    let mut dice = DiceSums::default();
    let mut confusion = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    let mut predictions = Vec::new();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (x, classes) = data.batch(chunk);
        let probs = net.predict(&x)?;
        ce.add(&probs, &classes);
        dice.add(&probs, &classes);
        let pred = loss::argmax_classes(&probs);
        let m = loss::confusion(&pred, &classes)?;
        for t in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                confusion[t][p] += m[t][p];
            }
        }
        predictions.extend(pred);
    }
    Ok(Evaluation {
        metrics: Metrics::from_confusion(confusion),
        loss: LossReport::new(ce.mean(), dice.per_class()),
        predictions,
    })
}

/// Result of one optimisation step.
pub struct StepOutput {
    pub report: LossReport,
    pub confusion: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

/// Forward in train mode, backward through the selected loss, Adam update,
/// and running-statistic update.
pub fn train_step(
    net: &mut Network<f32>,
    adam: &mut AdamState<f32>,
    x: Tensor4<f32>,
    classes: &[u8],
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, true);
    let input = tape.constant(x);
    let out = net.forward(&mut tape, &params, input, Mode::Train, rng)?;
    let probs = tape.value(out.probs);
    let (report, objective, grad) = loss::loss_and_grad(probs, classes, cfg.loss)?;
    if !objective.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let confusion = loss::confusion(&loss::argmax_classes(probs), classes)?;
    let root = tape.scalar_head(out.probs, objective as f32, grad)?;
    let mut grads = tape.backward(root)?;
    let grads: Vec<Tensor4<f32>> = params
        .iter()
        .zip(net.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor4::zeros(p.tensor.dims())))
        .collect();
    adam_step(net.params_mut(), &grads, adam, lr, cfg)?;
    net.apply_bn_updates(out.bn_updates);
    Ok(StepOutput { report, confusion })
}

pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Network<f32>,
    pub best_val_loss: f64,
    pub last: Network<f32>,
    pub adam: AdamState<f32>,
    pub plateau: PlateauState,
}

/// Train from scratch. Validation runs on `val` after every epoch; it drives
/// both the plateau schedule and best-checkpoint selection.
pub fn train(cfg: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, train, val, |_| {})
}

/// [`train`], calling `on_epoch` with each history row as it is produced.
pub fn train_with(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation".into()));
    }
    let stream = |id: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(id);
        r
    };
    let (mut init_rng, mut shuffle_rng, mut dropout_rng) = (stream(0), stream(1), stream(2));
    let mut net = Network::<f32>::build(cfg.network_spec(), &mut init_rng)?;
    let mut adam = AdamState::new(net.params());
    let mut plateau = PlateauState::new(cfg);
    let mut best = net.clone();
    let mut best_val = f64::INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut ce, mut dl, mut batches) = (0.0, 0.0, 0usize);
        let mut confusion = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            let (x, classes) = train.batch(chunk);
            let step = train_step(&mut net, &mut adam, x, &classes, plateau.lr, cfg, &mut dropout_rng)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch: bi },
                    other => other,
                })?;
            ce += step.report.ce;
            dl += step.report.dice_loss;
            batches += 1;
            for t in 0..NUM_CLASSES {
                for p in 0..NUM_CLASSES {
                    confusion[t][p] += step.confusion[t][p];
                }
            }
        }
        let (ce, dl) = (ce / batches as f64, dl / batches as f64);
        let eval = evaluate(&net, val, cfg.batch, "validation")?;
        let val_loss = eval.loss.objective(cfg.loss);
        if val_loss < best_val {
            best_val = val_loss;
            best = net.clone();
        }
        let row = HistoryRow {
            epoch,
            loss: combine(ce, dl),
            ce,
            dice_loss: dl,
            train_acc: Metrics::from_confusion(confusion).pixel_accuracy,
            val_acc: eval.metrics.pixel_accuracy,
            lr: plateau.lr,
        };
        on_epoch(&row);
        history.push(row);
        lr_on_plateau(&mut plateau, val_loss, cfg);
    }
    Ok(TrainOutcome {
        history,
        best,
        best_val_loss: best_val,
        last: net,
        adam,
        plateau,
    })
}

/// Load both splits of a dataset for the configured channel subset.
pub fn load_datasets(manifest_path: &Path, channels: &[usize]) -> Result<(Manifest, Dataset, Dataset)> {
    let manifest = Manifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let train = Dataset::new(&manifest.read_split(dir, Split::Train)?, &manifest.stats, channels)?;
    let test = Dataset::new(&manifest.read_split(dir, Split::Test)?, &manifest.stats, channels)?;
    Ok((manifest, train, test))
}

/// Train on the train split of a manifest, validating on its test split.
pub fn train_from_manifest(
    cfg: &TrainConfig,
    manifest_path: &Path,
    on_epoch: impl FnMut(&HistoryRow),
) -> Result<(TrainOutcome, InputPipeline)> {
    cfg.validate()?;
    let (manifest, train_set, test_set) = load_datasets(manifest_path, &cfg.channels)?;
    let outcome = train_with(cfg, &train_set, &test_set, on_epoch)?;
    Ok((
        outcome,
        InputPipeline {
            channels: cfg.channels.clone(),
            stats: manifest.stats,
        },
    ))
}
