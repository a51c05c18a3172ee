//! Convolutional backbones, the 1×1 alignment adapter, and teacher pre-training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::{staged_lr, Sgd};
use crate::rng::Rng;
use crate::tensor::{Padding, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Stage {
    /// 3×3 same-padded convolution with bias, followed by ReLU.
    Conv { out: usize },
    /// 2×2 max pooling.
    Pool,
}

/// A stack of conv/pool stages with a global-average-pool + linear head.
/// The distilled feature is the pre-activation output of stage `feature_tap`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub input_size: usize,
    pub stages: Vec<Stage>,
    pub feature_tap: usize,
    pub num_classes: usize,
}

impl ArchSpec {
    pub fn teacher_default() -> Self {
        Self {
            in_channels: 3,
            input_size: 16,
            stages: vec![
                Stage::Conv { out: 16 },
                Stage::Conv { out: 32 },
                Stage::Pool,
                Stage::Conv { out: 32 },
            ],
            feature_tap: 3,
            num_classes: 10,
        }
    }

    pub fn student_default() -> Self {
        Self {
            in_channels: 3,
            input_size: 16,
            stages: vec![Stage::Conv { out: 8 }, Stage::Pool, Stage::Conv { out: 16 }],
            feature_tap: 2,
            num_classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.input_size == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArch("input channels, size and classes must be positive".into()));
        }
        let mut size = self.input_size;
        for (i, s) in self.stages.iter().enumerate() {
            match *s {
                Stage::Conv { out: 0 } => return Err(Error::InvalidArch(format!("stage {i} has zero channels"))),
                Stage::Conv { .. } => {}
                Stage::Pool => {
                    if size % 2 != 0 {
                        return Err(Error::InvalidArch(format!("stage {i} pools an odd size {size}")));
                    }
                    size /= 2;
                }
            }
        }
        match self.stages.get(self.feature_tap) {
            Some(Stage::Conv { .. }) => Ok(()),
            _ => Err(Error::InvalidArch(format!(
                "feature tap {} is not a conv stage",
                self.feature_tap
            ))),
        }
    }

    /// `[C, H, W]` of the tapped feature.
    pub fn feature_dims(&self) -> Result<[usize; 3]> {
        self.validate()?;
        let mut size = self.input_size;
        for (i, s) in self.stages.iter().enumerate() {
            match *s {
                Stage::Pool => size /= 2,
                Stage::Conv { out } if i == self.feature_tap => return Ok([out, size, size]),
                Stage::Conv { .. } => {}
            }
        }
        unreachable!("validated tap")
    }

    /// Closed-form parameter count: `Σ (9·c_in + 1)·c_out` over conv stages
    /// plus `(c_last + 1)·classes` for the head.
    pub fn param_count(&self) -> usize {
        let mut c_in = self.in_channels;
        let mut n = 0;
        for s in &self.stages {
            if let Stage::Conv { out } = *s {
                n += (9 * c_in + 1) * out;
                c_in = out;
            }
        }
        n + (c_in + 1) * self.num_classes
    }
}

/// Pixels in `[0, 1]` are mapped to `(x − INPUT_CENTER) · INPUT_GAIN` before
/// the first convolution.
pub const INPUT_CENTER: f32 = 0.5;
pub const INPUT_GAIN: f32 = 4.0;

fn init_uniform(rng: &mut Rng, dims: &[usize], fan_in: usize) -> Result<Tensor> {
    init_bounded(rng, dims, 1.0 / (fan_in as f32).sqrt())
}

/// He-uniform for layers followed by ReLU.
fn init_he(rng: &mut Rng, dims: &[usize], fan_in: usize) -> Result<Tensor> {
    init_bounded(rng, dims, (6.0 / fan_in as f32).sqrt())
}

fn init_bounded(rng: &mut Rng, dims: &[usize], bound: f32) -> Result<Tensor> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| bound * (2.0 * rng.uniform_f32() - 1.0)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub spec: ArchSpec,
    /// Per conv stage a weight `[out, in, 3, 3]` and a bias `[out]`, then the
    /// head weight `[c_last, classes]` and bias `[classes]`.
    pub weights: Vec<Tensor>,
}

pub struct ForwardVars {
    pub feature: Var,
    pub logits: Var,
}

pub fn build_backbone(spec: &ArchSpec, rng: &mut Rng) -> Result<Backbone> {
    spec.validate()?;
    let mut weights = Vec::new();
    let mut c_in = spec.in_channels;
    for s in &spec.stages {
        if let Stage::Conv { out } = *s {
            let fan_in = 9 * c_in;
            weights.push(init_he(rng, &[out, c_in, 3, 3], fan_in)?);
            weights.push(Tensor::zeros(&[out])?);
            c_in = out;
        }
    }
    weights.push(init_uniform(rng, &[c_in, spec.num_classes], c_in)?);
    weights.push(init_uniform(rng, &[spec.num_classes], c_in)?);
    Ok(Backbone {
        spec: spec.clone(),
        weights,
    })
}

impl Backbone {
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut conv = 0;
        for s in &self.spec.stages {
            if let Stage::Conv { .. } = s {
                names.push(format!("conv{conv}.weight"));
                names.push(format!("conv{conv}.bias"));
                conv += 1;
            }
        }
        names.push("fc.weight".into());
        names.push("fc.bias".into());
        names
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }

    /// Leaves for every weight, trainable or constant.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.weights
            .iter()
            .map(|w| if trainable { tape.param(w.clone()) } else { tape.constant(w.clone()) })
            .collect()
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<ForwardVars> {
        let xc = tape.add_scalar(x, -INPUT_CENTER);
        let mut h = tape.scale(xc, INPUT_GAIN);
        let mut feature = None;
        let mut wi = 0;
        for (i, s) in self.spec.stages.iter().enumerate() {
            match s {
                Stage::Conv { .. } => {
                    let y = tape.conv2d(h, vars[wi], Padding::Same)?;
                    let y = tape.channel_bias(y, vars[wi + 1])?;
                    wi += 2;
                    if i == self.spec.feature_tap {
                        feature = Some(y);
                    }
                    h = tape.relu(y);
                }
                Stage::Pool => h = tape.max_pool2(h)?,
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let n = tape.value(pooled).dims()[0];
        let c = tape.value(pooled).dims()[1];
        let pooled = tape.reshape(pooled, &[n, c])?;
        let z = tape.matmul(pooled, vars[wi])?;
        let ones = tape.constant(Tensor::ones(&[n, 1])?);
        let b_row = tape.reshape(vars[wi + 1], &[1, self.spec.num_classes])?;
        let bias = tape.matmul(ones, b_row)?;
        let logits = tape.add(z, bias)?;
        Ok(ForwardVars {
            feature: feature.expect("validated tap"),
            logits,
        })
    }

    /// `(feature, logits)` for a batch `[N, C, H, W]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = if x.rank() == 3 {
            let mut d = vec![1];
            d.extend_from_slice(x.dims());
            x.reshape(&d)?
        } else {
            x.clone()
        };
        let expect = [self.spec.in_channels, self.spec.input_size, self.spec.input_size];
        if x.rank() != 4 || x.dims()[1..] != expect {
            return Err(Error::ShapeMismatch {
                op: "backbone forward",
                lhs: x.dims().to_vec(),
                rhs: expect.to_vec(),
            });
        }
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, false);
        let xv = tape.constant(x);
        let out = self.forward_on_tape(&mut tape, &vars, xv)?;
        Ok((tape.value(out.feature).clone(), tape.value(out.logits).clone()))
    }

    /// Features and logits over a dataset in fixed-size chunks.
    pub fn forward_all(&self, images: &Tensor, chunk: usize) -> Result<(Tensor, Tensor)> {
        let n = images.dims()[0];
        let (mut feats, mut logits) = (Vec::new(), Vec::new());
        let (mut fdims, mut ldims) = (Vec::new(), Vec::new());
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let (f, l) = self.forward(&images.slice_outer(start, end)?)?;
            fdims = f.dims()[1..].to_vec();
            ldims = l.dims()[1..].to_vec();
            feats.extend_from_slice(f.data());
            logits.extend_from_slice(l.data());
        }
        let mut fd = vec![n];
        fd.extend(fdims);
        let mut ld = vec![n];
        ld.extend(ldims);
        Ok((Tensor::new(fd, feats)?, Tensor::new(ld, logits)?))
    }
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn top1(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if logits.rank() != 2 || logits.dims()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "top1",
            lhs: logits.dims().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let k = logits.dims()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| crate::dafa::argmax_first(row) == y)
        .count();
    Ok(hits as f32 / labels.len() as f32)
}

pub fn evaluate(model: &Backbone, data: &Dataset) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (_, logits) = model.forward_all(data.images(), 256)?;
    top1(&logits, data.labels())
}

/// 1×1 convolution without bias mapping student channels to teacher channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    /// `[out, in, 1, 1]`.
    pub weight: Tensor,
}

impl Adapter {
    /// Identity when the channel counts match, otherwise fan-in uniform.
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidArch("adapter channels must be positive".into()));
        }
        let weight = if in_channels == out_channels {
            Self::identity(in_channels)?.weight
        } else {
            init_uniform(rng, &[out_channels, in_channels, 1, 1], in_channels)?
        };
        Ok(Self { weight })
    }

    pub fn identity(channels: usize) -> Result<Self> {
        let mut w = vec![0.0; channels * channels];
        for i in 0..channels {
            w[i * channels + i] = 1.0;
        }
        Ok(Self {
            weight: Tensor::new(vec![channels, channels, 1, 1], w)?,
        })
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(Self {
            weight: Tensor::zeros(&[out_channels, in_channels, 1, 1])?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn apply_on_tape(tape: &mut Tape, weight: Var, f_s: Var) -> Result<Var> {
        tape.conv2d(f_s, weight, Padding::Same)
    }

    pub fn adapt(&self, f_s: &Tensor) -> Result<Tensor> {
        let c = f_s.dims().get(f_s.rank().wrapping_sub(3)).copied();
        if c != Some(self.in_channels()) {
            return Err(Error::ShapeMismatch {
                op: "adapter",
                lhs: f_s.dims().to_vec(),
                rhs: self.weight.dims().to_vec(),
            });
        }
        crate::tensor::conv2d(f_s, &self.weight, Padding::Same)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOpts {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
        }
    }
}

/// Cross-entropy SGD on `train`; returns the trained network and its top-1
/// on `test`.
pub fn pretrain_teacher(
    mut model: Backbone,
    train: &Dataset,
    test: &Dataset,
    opts: &TrainOpts,
    rng: &Rng,
) -> Result<(Backbone, f32)> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut opt = Sgd::new(opts.momentum);
    for epoch in 0..opts.epochs {
        let lr = staged_lr(opts.lr, epoch, opts.epochs);
        let order = rng.child(epoch as u64).permutation(train.len());
        for idx in order.chunks(opts.batch_size) {
            let (x, y) = train.batch(idx)?;
            let mut tape = Tape::new();
            let vars = model.record(&mut tape, true);
            let xv = tape.constant(x);
            let out = model.forward_on_tape(&mut tape, &vars, xv)?;
            let loss = tape.cross_entropy(out.logits, &y)?;
            let l = tape.value(loss).item()?;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("teacher loss at epoch {epoch}")));
            }
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).expect("trainable leaf")).collect();
            let grefs: Vec<&Tensor> = g.iter().collect();
            let mut prefs: Vec<&mut Tensor> = model.weights.iter_mut().collect();
            opt.step(&mut prefs, &grefs, lr)?;
        }
    }
    let acc = evaluate(&model, test)?;
    Ok((model, acc))
}
