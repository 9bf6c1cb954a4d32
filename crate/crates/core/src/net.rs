//! The symmetric encoder/decoder.
//!
//! Four down blocks (two 3×3 conv+BN+ReLU, 2×2 max-pool; dropout after the
//! fourth), a transition block (two 3×3 conv+BN+ReLU, dropout), four up
//! blocks (2×2 stride-2 deconvolution, lateral merge with the matching
//! down-block feature map, dilated 3×3 conv+BN+ReLU), and a 1×1 conv head
//! followed by a channel softmax.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnMode, ConvSpec, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

pub const NUM_CLASSES: usize = crate::loss::NUM_CLASSES;
pub const DEPTH: usize = 4;
/// Input height and width must be multiples of this.
pub const SIZE_MULTIPLE: usize = 1 << DEPTH;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Rate of the up-path dilated convolutions. 1 disables dilation.
    pub dilation: usize,
    pub down_dropout: f64,
    pub transition_dropout: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            in_channels: 4,
            base_channels: 8,
            dilation: 4,
            down_dropout: 0.3,
            transition_dropout: 0.5,
        }
    }
}

impl NetworkSpec {
    pub fn down_channels(&self) -> [usize; DEPTH] {
        std::array::from_fn(|i| self.base_channels << i)
    }

    pub fn transition_channels(&self) -> usize {
        self.base_channels << DEPTH
    }

    pub fn up_channels(&self) -> [usize; DEPTH] {
        let mut c = self.down_channels();
        c.reverse();
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::InvalidSpec("channel counts must be positive".into()));
        }
        if self.dilation == 0 {
            return Err(Error::InvalidSpec("dilation rate must be at least 1".into()));
        }
        for (name, r) in [("down", self.down_dropout), ("transition", self.transition_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidSpec(format!("{name} dropout {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn check_input(&self, dims: Dims) -> Result<()> {
        let [_, c, h, w] = dims;
        if c != self.in_channels {
            return Err(Error::shape(
                "forward",
                format!("input has {c} channels, network expects {}", self.in_channels),
            ));
        }
        check_spatial(h, w)
    }
}

fn check_spatial(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(Error::shape(
            "forward",
            format!("spatial dims {h}x{w} must be positive multiples of {SIZE_MULTIPLE}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapeRow {
    pub stage: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ShapeRow {
    fn new(stage: impl Into<String>, channels: usize, height: usize, width: usize) -> Self {
        Self {
            stage: stage.into(),
            channels,
            height,
            width,
        }
    }
}

/// Per-stage output shapes for an `h×w` input: the down blocks after
/// pooling, the transition block, the up blocks and the head.
pub fn shape_trace(spec: &NetworkSpec, h: usize, w: usize) -> Result<Vec<ShapeRow>> {
    spec.validate()?;
    check_spatial(h, w)?;
    let mut rows = vec![ShapeRow::new("input", spec.in_channels, h, w)];
    let (mut ch, mut cw) = (h, w);
    for (i, c) in spec.down_channels().into_iter().enumerate() {
        ch /= 2;
        cw /= 2;
        rows.push(ShapeRow::new(format!("down{}", i + 1), c, ch, cw));
    }
    rows.push(ShapeRow::new("transition", spec.transition_channels(), ch, cw));
    for (i, c) in spec.up_channels().into_iter().enumerate() {
        ch *= 2;
        cw *= 2;
        rows.push(ShapeRow::new(format!("up{}", i + 1), c, ch, cw));
    }
    rows.push(ShapeRow::new("head", NUM_CLASSES, ch, cw));
    Ok(rows)
}

/// For each up level, the `(channels, h, w)` of the deconvolution output and
/// of the down-block feature map it is merged with.
pub fn lateral_pairs(spec: &NetworkSpec, h: usize, w: usize) -> Result<Vec<([usize; 3], [usize; 3])>> {
    spec.validate()?;
    check_spatial(h, w)?;
    let down = spec.down_channels();
    let skips: Vec<[usize; 3]> = (0..DEPTH).map(|i| [down[i], h >> i, w >> i]).collect();
    let mut pairs = Vec::with_capacity(DEPTH);
    let (mut c, mut ch, mut cw) = (spec.transition_channels(), h >> DEPTH, w >> DEPTH);
    for level in 0..DEPTH {
        c /= 2;
        ch *= 2;
        cw *= 2;
        pairs.push(([c, ch, cw], skips[DEPTH - 1 - level]));
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Named<T> {
    pub name: String,
    pub tensor: Tensor4<T>,
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: Option<usize>,
    spec: ConvSpec,
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv,
    bn: Bn,
}

#[derive(Clone, Debug)]
struct DownBlock {
    first: ConvBnRelu,
    second: ConvBnRelu,
    dropout: f64,
}

#[derive(Clone, Debug)]
struct UpBlock {
    deconv_w: usize,
    deconv_b: usize,
    skip: Conv,
    merge: ConvBnRelu,
}

#[derive(Clone, Debug)]
struct Layout {
    down: Vec<DownBlock>,
    transition: DownBlock,
    up: Vec<UpBlock>,
    head: Conv,
}

/// Running-statistic updates produced by a train-mode forward pass.
pub struct BnUpdate<T> {
    mean: usize,
    var: usize,
    stats: BatchStats<T>,
}

pub struct ForwardOutput<T> {
    pub logits: Var,
    pub probs: Var,
    pub bn_updates: Vec<BnUpdate<T>>,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: NetworkSpec,
    params: Vec<Named<T>>,
    buffers: Vec<Named<T>>,
    layout: Layout,
}

struct Builder<'r, T, R: ?Sized> {
    params: Vec<Named<T>>,
    buffers: Vec<Named<T>>,
    rng: &'r mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn param(&mut self, name: String, tensor: Tensor4<T>) -> usize {
        self.params.push(Named { name, tensor });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, tensor: Tensor4<T>) -> usize {
        self.buffers.push(Named { name, tensor });
        self.buffers.len() - 1
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    fn he_uniform(&mut self, dims: Dims, fan_in: usize) -> Tensor4<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor4::from_fn(dims, |_| T::of(self.rng.random_range(-bound..bound)))
    }

    fn conv(&mut self, name: &str, spec: ConvSpec) -> Conv {
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let w = self.he_uniform(spec.weight_dims(), fan_in);
        let w = self.param(format!("{name}.w"), w);
        let b = spec
            .has_bias
            .then(|| self.param(format!("{name}.b"), Tensor4::zeros(spec.bias_dims())));
        Conv { w, b, spec }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        let dims = [1, c, 1, 1];
        Bn {
            gamma: self.param(format!("{name}.gamma"), Tensor4::full(dims, T::one())),
            beta: self.param(format!("{name}.beta"), Tensor4::zeros(dims)),
            mean: self.buffer(format!("{name}.running_mean"), Tensor4::zeros(dims)),
            var: self.buffer(format!("{name}.running_var"), Tensor4::full(dims, T::one())),
        }
    }

    fn conv_bn_relu(&mut self, prefix: &str, idx: &str, spec: ConvSpec) -> ConvBnRelu {
        ConvBnRelu {
            conv: self.conv(&format!("{prefix}.conv{idx}"), spec),
            bn: self.bn(&format!("{prefix}.bn{idx}"), spec.out_channels),
        }
    }

    fn double_conv(&mut self, prefix: &str, cin: usize, cout: usize, dropout: f64) -> DownBlock {
        DownBlock {
            first: self.conv_bn_relu(prefix, "1", ConvSpec::same(cin, cout, 3, 1, false)),
            second: self.conv_bn_relu(prefix, "2", ConvSpec::same(cout, cout, 3, 1, false)),
            dropout,
        }
    }
}

impl<T: Scalar> Network<T> {
    pub fn build<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            rng,
        };
        let down_c = spec.down_channels();
        let mut down = Vec::with_capacity(DEPTH);
        let mut cin = spec.in_channels;
        for (i, &c) in down_c.iter().enumerate() {
            let dropout = if i == DEPTH - 1 { spec.down_dropout } else { 0.0 };
            down.push(b.double_conv(&format!("down{}", i + 1), cin, c, dropout));
            cin = c;
        }
        let transition = b.double_conv("transition", cin, spec.transition_channels(), spec.transition_dropout);
        cin = spec.transition_channels();

        let mut up = Vec::with_capacity(DEPTH);
        for (i, c) in spec.up_channels().into_iter().enumerate() {
            let name = format!("up{}", i + 1);
            let w = b.he_uniform([cin, c, 2, 2], cin);
            let deconv_w = b.param(format!("{name}.deconv.w"), w);
            let deconv_b = b.param(format!("{name}.deconv.b"), Tensor4::zeros([1, c, 1, 1]));
            let skip = b.conv(&format!("{name}.skip"), ConvSpec::same(c, c, 3, spec.dilation, true));
            let merge = ConvBnRelu {
                conv: b.conv(&format!("{name}.conv"), ConvSpec::same(c, c, 3, spec.dilation, false)),
                bn: b.bn(&format!("{name}.bn"), c),
            };
            up.push(UpBlock {
                deconv_w,
                deconv_b,
                skip,
                merge,
            });
            cin = c;
        }
        let head = b.conv("head", ConvSpec::same(cin, NUM_CLASSES, 1, 1, true));

        Ok(Self {
            spec,
            params: b.params,
            buffers: b.buffers,
            layout: Layout {
                down,
                transition,
                up,
                head,
            },
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Trainable tensors in their fixed enumeration order.
    pub fn params(&self) -> &[Named<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Named<T>] {
        &mut self.params
    }

    /// Batch-norm running statistics in their fixed enumeration order.
    pub fn buffers(&self) -> &[Named<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Named<T>] {
        &mut self.buffers
    }

    /// Parameters followed by buffers: the checkpoint order.
    pub fn named_tensors(&self) -> impl Iterator<Item = &Named<T>> {
        self.params.iter().chain(&self.buffers)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Record every parameter as a tape leaf, in enumeration order.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), requires_grad))
            .collect()
    }

    fn conv(&self, tape: &mut Tape<T>, p: &[Var], x: Var, c: &Conv) -> Result<Var> {
        tape.conv2d(x, p[c.w], c.b.map(|b| p[b]), c.spec)
    }

    fn conv_bn_relu(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        layer: &ConvBnRelu,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let y = self.conv(tape, p, x, &layer.conv)?;
        let bn = &layer.bn;
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: self.buffers[bn.mean].tensor.data(),
                var: self.buffers[bn.var].tensor.data(),
            },
        };
        let (y, stats) = tape.batchnorm2d(y, p[bn.gamma], p[bn.beta], bn_mode)?;
        if let Some(stats) = stats {
            updates.push(BnUpdate {
                mean: bn.mean,
                var: bn.var,
                stats,
            });
        }
        tape.relu(y)
    }

    fn double_conv(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        block: &DownBlock,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let y = self.conv_bn_relu(tape, p, x, &block.first, mode, updates)?;
        self.conv_bn_relu(tape, p, y, &block.second, mode, updates)
    }

    /// Run the network on `x` with parameters `params` (from [`bind`]).
    /// `rng` drives dropout masks in train mode.
    ///
    /// [`bind`]: Network::bind
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput<T>> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter vars for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        self.spec.check_input(tape.value(x).dims())?;
        let p = params;
        let mut updates = Vec::new();
        let mut skips = Vec::with_capacity(DEPTH);
        let mut h = x;
        for block in &self.layout.down {
            h = self.double_conv(tape, p, h, block, mode, &mut updates)?;
            skips.push(h);
            h = tape.maxpool2d(h)?;
            h = tape.dropout(h, block.dropout, mode, rng)?;
        }
        let t = &self.layout.transition;
        h = self.double_conv(tape, p, h, t, mode, &mut updates)?;
        h = tape.dropout(h, t.dropout, mode, rng)?;

        for block in &self.layout.up {
            let high = tape.conv_transpose2d(h, p[block.deconv_w], Some(p[block.deconv_b]))?;
            let skip = skips.pop().expect("one skip per level");
            let skip_b = block.skip.b.map(|b| p[b]);
            let merged = lateral_merge(tape, high, skip, p[block.skip.w], skip_b, block.skip.spec)?;
            h = self.conv_bn_relu(tape, p, merged, &block.merge, mode, &mut updates)?;
        }
        let logits = self.conv(tape, p, h, &self.layout.head)?;
        let probs = tape.softmax_channel(logits)?;
        Ok(ForwardOutput {
            logits,
            probs,
            bn_updates: updates,
        })
    }

    /// Eval-mode class probabilities `(n, 3, h, w)` for a batch.
    pub fn predict(&self, batch: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        // eval mode never draws from the rng
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &params, x, Mode::Eval, &mut rng)?;
        Ok(tape.value(out.probs).clone())
    }

    /// Fold the batch statistics of a train-mode pass into the running
    /// estimates: `running = m·running + (1-m)·batch`.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<T>>) {
        let m = T::of(BN_MOMENTUM);
        let one_minus = T::one() - m;
        for u in updates {
            for (r, &b) in self.buffers[u.mean].tensor.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = m * *r + one_minus * b;
            }
            for (r, &b) in self.buffers[u.var].tensor.data_mut().iter_mut().zip(&u.stats.var) {
                *r = m * *r + one_minus * b;
            }
        }
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |v: &[Named<T>]| {
            v.iter()
                .map(|n| Named {
                    name: n.name.clone(),
                    tensor: n.tensor.cast(),
                })
                .collect()
        };
        Network {
            spec: self.spec.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            layout: self.layout.clone(),
        }
    }
}

/// `dilated_conv(skip) + high`. The skip-branch convolution keeps the channel
/// count, so both operands must share dims.
pub fn lateral_merge<T: Scalar>(
    tape: &mut Tape<T>,
    high: Var,
    skip: Var,
    skip_w: Var,
    skip_b: Option<Var>,
    spec: ConvSpec,
) -> Result<Var> {
    let (hd, sd) = (tape.value(high).dims(), tape.value(skip).dims());
    if hd != sd {
        return Err(Error::shape(
            "lateral_merge",
            format!("upsampled {hd:?} vs skip {sd:?}"),
        ));
    }
    let refined = tape.conv2d(skip, skip_w, skip_b, spec)?;
    tape.add(refined, high)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn net(spec: NetworkSpec, seed: u64) -> Network<f32> {
        Network::build(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn ladder() {
        let s = NetworkSpec::default();
        assert_eq!(s.down_channels(), [8, 16, 32, 64]);
        assert_eq!(s.transition_channels(), 128);
        assert_eq!(s.up_channels(), [64, 32, 16, 8]);
    }

    #[test]
    fn parameter_names_unique_and_ordered() {
        let n = net(NetworkSpec::default(), 0);
        let names: Vec<&str> = n.named_tensors().map(|p| p.name.as_str()).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names[0], "down1.conv1.w");
        assert_eq!(n.params().last().unwrap().name, "head.b");
        for block in ["down1", "down2", "down3", "down4", "transition", "up1", "up2", "up3", "up4", "head"] {
            assert!(names.iter().any(|n| n.starts_with(block)), "{block}");
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = net(NetworkSpec::default(), 5);
        let b = net(NetworkSpec::default(), 5);
        assert_eq!(a.params(), b.params());
        let c = net(NetworkSpec::default(), 6);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for spec in [
            NetworkSpec { in_channels: 0, ..Default::default() },
            NetworkSpec { dilation: 0, ..Default::default() },
            NetworkSpec { down_dropout: 1.0, ..Default::default() },
        ] {
            assert!(Network::<f32>::build(spec, &mut rng).is_err());
        }
    }

    #[test]
    fn output_shapes() {
        let n = net(NetworkSpec::default(), 1);
        let x = Tensor4::full([1, 4, 64, 64], 0.1f32);
        let y = n.predict(&x).unwrap();
        assert_eq!(y.dims(), [1, 3, 64, 64]);
        let x = Tensor4::full([2, 4, 32, 48], 0.1f32);
        assert_eq!(n.predict(&x).unwrap().dims(), [2, 3, 32, 48]);
    }

    #[test]
    fn bad_input_rejected() {
        let n = net(NetworkSpec::default(), 1);
        assert!(n.predict(&Tensor4::zeros([1, 4, 24, 32])).is_err());
        assert!(n.predict(&Tensor4::zeros([1, 3, 32, 32])).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let n = net(NetworkSpec::default(), 2);
        let x = Tensor4::from_fn([1, 4, 32, 32], |[_, c, y, x]| ((c * 7 + y * 3 + x) as f32 * 0.1).sin());
        let a = n.predict(&x).unwrap();
        let b = n.predict(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn merge_with_zero_skip_conv_is_identity() {
        let mut tape = Tape::<f64>::new();
        let high = tape.leaf(Tensor4::from_fn([1, 64, 16, 16], |[_, c, y, x]| (c + y * x) as f64), false);
        let skip = tape.leaf(Tensor4::zeros([1, 64, 16, 16]), false);
        let spec = ConvSpec::same(64, 64, 3, 4, true);
        let w = tape.leaf(Tensor4::zeros(spec.weight_dims()), false);
        let b = tape.leaf(Tensor4::zeros(spec.bias_dims()), false);
        let out = lateral_merge(&mut tape, high, skip, w, Some(b), spec).unwrap();
        assert_eq!(tape.value(out).dims(), [1, 64, 16, 16]);
        assert_eq!(tape.value(out), tape.value(high));
    }

    #[test]
    fn merge_rejects_mismatched_dims() {
        let mut tape = Tape::<f64>::new();
        let high = tape.leaf(Tensor4::zeros([1, 8, 16, 16]), false);
        let skip = tape.leaf(Tensor4::zeros([1, 8, 8, 8]), false);
        let spec = ConvSpec::same(8, 8, 3, 4, true);
        let w = tape.leaf(Tensor4::zeros(spec.weight_dims()), false);
        assert!(lateral_merge(&mut tape, high, skip, w, None, spec).is_err());
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut n = net(NetworkSpec::default(), 3);
        let before = n.buffers().to_vec();
        let mut tape = Tape::new();
        let p = n.bind(&mut tape, true);
        let x = tape.constant(Tensor4::from_fn([2, 4, 16, 16], |[b, c, y, x]| (b + c * y + x) as f32 * 0.05));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = n.forward(&mut tape, &p, x, Mode::Train, &mut rng).unwrap();
        assert_eq!(out.bn_updates.len(), 2 * DEPTH + 2 + DEPTH);
        n.apply_bn_updates(out.bn_updates);
        assert_ne!(n.buffers(), &before[..]);
    }
}
