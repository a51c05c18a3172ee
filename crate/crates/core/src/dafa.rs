//! Differentiable feature-augmentation policies.
//!
//! A policy holds `P` sub-policies, each an ordered list of gated,
//! magnitude-parameterised feature operations. During search the categorical
//! choice of sub-policy is relaxed with Gumbel-softmax over the logits
//! `alpha`, and every operation's apply/skip gate with a relaxed Bernoulli
//! `σ((logit(β) + logit(u)) / λ)`. Magnitudes receive a straight-through
//! gradient: `∂L/∂m = Σ ∂L/∂F̂`, whatever the operation.
//!
//! All randomness is drawn up front into a [`MixNoise`] so that the same
//! draws can be replayed (finite differences, enumeration, identical
//! forward values on and off the tape).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomBackward, StraightThrough, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{gumbel_from_uniform, logistic_from_uniform, Rng};
use crate::tensor::{self, Tensor};

pub const BETA_MIN: f32 = 1e-3;
pub const DEFAULT_K_MAX: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOpKind {
    Identity,
    AdditiveGaussianNoise,
    FeatureMask,
    ChannelScale,
    UniformScale,
    ChannelShuffle,
}

impl AugOpKind {
    pub const ALL: [AugOpKind; 6] = [
        AugOpKind::Identity,
        AugOpKind::AdditiveGaussianNoise,
        AugOpKind::FeatureMask,
        AugOpKind::ChannelScale,
        AugOpKind::UniformScale,
        AugOpKind::ChannelShuffle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugOpKind::Identity => "identity",
            AugOpKind::AdditiveGaussianNoise => "additive_gaussian_noise",
            AugOpKind::FeatureMask => "feature_mask",
            AugOpKind::ChannelScale => "channel_scale",
            AugOpKind::UniformScale => "uniform_scale",
            AugOpKind::ChannelShuffle => "channel_shuffle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugOp {
    pub kind: AugOpKind,
    pub beta: f32,
    pub m: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubPolicy {
    pub ops: Vec<AugOp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub alpha: Vec<f32>,
    pub tau: f32,
    pub lambda: f32,
    pub subpolicies: Vec<SubPolicy>,
}

impl AugPolicy {
    /// Policy over the given operation lists with `alpha = 0` and every
    /// operation at `(beta, m)`.
    pub fn uniform_init(kinds: &[Vec<AugOpKind>], beta: f32, m: f32, tau: f32, lambda: f32) -> Result<Self> {
        let policy = Self {
            alpha: vec![0.0; kinds.len()],
            tau,
            lambda,
            subpolicies: kinds
                .iter()
                .map(|ops| SubPolicy {
                    ops: ops.iter().map(|&kind| AugOp { kind, beta, m }).collect(),
                })
                .collect(),
        };
        policy.validate(usize::MAX)?;
        Ok(policy)
    }

    /// Draws `p` sub-policies of `k` operation kinds uniformly from the search space.
    pub fn random_kinds(p: usize, k: usize, rng: &mut Rng) -> Vec<Vec<AugOpKind>> {
        (0..p)
            .map(|_| (0..k).map(|_| AugOpKind::ALL[rng.below(AugOpKind::ALL.len())]).collect())
            .collect()
    }

    pub fn num_subpolicies(&self) -> usize {
        self.subpolicies.len()
    }

    pub fn validate(&self, k_max: usize) -> Result<()> {
        if self.subpolicies.is_empty() || self.alpha.len() != self.subpolicies.len() {
            return Err(Error::InvalidArgument(format!(
                "policy needs P >= 1 sub-policies and one logit each (P = {}, logits = {})",
                self.subpolicies.len(),
                self.alpha.len()
            )));
        }
        if self.alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        if !(self.tau > 0.0) || !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument("tau and lambda must be positive".into()));
        }
        for sub in &self.subpolicies {
            if sub.ops.is_empty() || sub.ops.len() > k_max {
                return Err(Error::InvalidArgument(format!(
                    "sub-policy length {} outside 1..={k_max}",
                    sub.ops.len()
                )));
            }
            for op in &sub.ops {
                if !(0.0..=1.0).contains(&op.m) || !(0.0..=1.0).contains(&op.beta) {
                    return Err(Error::InvalidArgument(format!("operation {op:?} out of range")));
                }
            }
        }
        Ok(())
    }

    /// Projects β into `[BETA_MIN, 1 - BETA_MIN]` and m into `[0, 1]`.
    pub fn clamp(&mut self) {
        for op in self.subpolicies.iter_mut().flat_map(|s| s.ops.iter_mut()) {
            op.beta = op.beta.clamp(BETA_MIN, 1.0 - BETA_MIN);
            op.m = op.m.clamp(0.0, 1.0);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate(usize::MAX)?;
        Ok(p)
    }
}

/// Batch layout used by the operations: `(samples, channels, positions)`.
fn layout(dims: &[usize]) -> (usize, usize, usize) {
    match *dims {
        [l] => (1, 1, l),
        [c, l] => (1, c, l),
        [c, h, w] => (1, c, h * w),
        [n, c, h, w] => (n, c, h * w),
        _ => (1, 1, dims.iter().product()),
    }
}

/// Randomness consumed by one application of an operation to a batch.
/// Draws never depend on the magnitude, so the same draw can be replayed at
/// different `m`.
#[derive(Debug, Clone, PartialEq)]
pub enum OpDraw {
    None,
    /// Standard normal per element.
    Noise(Vec<f32>),
    /// Per sample, a random ranking of spatial positions; the first
    /// `round(m·positions)` are masked.
    Mask(Vec<Vec<usize>>),
    /// Per sample and channel, a gain factor in [0, 1).
    Gains(Vec<f32>),
    /// Per sample, a random ranking of channels; the first `round(m·C)` are
    /// rotated among themselves.
    Shuffle(Vec<Vec<usize>>),
}

impl OpDraw {
    pub fn sample(kind: AugOpKind, dims: &[usize], rng: &mut Rng) -> Self {
        let (n, c, p) = layout(dims);
        match kind {
            AugOpKind::Identity | AugOpKind::UniformScale => OpDraw::None,
            AugOpKind::AdditiveGaussianNoise => OpDraw::Noise((0..n * c * p).map(|_| rng.normal()).collect()),
            AugOpKind::FeatureMask => OpDraw::Mask((0..n).map(|_| rng.permutation(p)).collect()),
            AugOpKind::ChannelScale => OpDraw::Gains((0..n * c).map(|_| rng.uniform_f32()).collect()),
            AugOpKind::ChannelShuffle => OpDraw::Shuffle((0..n).map(|_| rng.permutation(c)).collect()),
        }
    }
}

fn count_for(m: f32, total: usize) -> usize {
    ((m * total as f32).round() as usize).min(total)
}

fn sample_std(x: &[f32]) -> f32 {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() as f32
}

/// Applies an operation with pre-drawn randomness.
pub fn apply_with(kind: AugOpKind, draw: &OpDraw, f: &Tensor, m: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!("magnitude {m} outside [0, 1]")));
    }
    let (n, c, p) = layout(f.dims());
    let x = f.data();
    let mut out = x.to_vec();
    match (kind, draw) {
        (AugOpKind::Identity, _) => {}
        (AugOpKind::UniformScale, _) => out.iter_mut().for_each(|v| *v *= 1.0 + m),
        (AugOpKind::AdditiveGaussianNoise, OpDraw::Noise(eps)) => {
            let per = c * p;
            for s in 0..n {
                let std = sample_std(&x[s * per..(s + 1) * per]);
                for (o, e) in out[s * per..(s + 1) * per].iter_mut().zip(&eps[s * per..(s + 1) * per]) {
                    *o += m * std * e;
                }
            }
        }
        (AugOpKind::FeatureMask, OpDraw::Mask(ranks)) => {
            let k = count_for(m, p);
            for (s, rank) in ranks.iter().enumerate() {
                for &pos in &rank[..k] {
                    for ch in 0..c {
                        out[(s * c + ch) * p + pos] = 0.0;
                    }
                }
            }
        }
        (AugOpKind::ChannelScale, OpDraw::Gains(xi)) => {
            for (i, chunk) in out.chunks_mut(p).enumerate() {
                let gain = 1.0 + m * xi[i];
                chunk.iter_mut().for_each(|v| *v *= gain);
            }
        }
        (AugOpKind::ChannelShuffle, OpDraw::Shuffle(orders)) => {
            let k = count_for(m, c);
            if k >= 2 {
                for (s, order) in orders.iter().enumerate() {
                    let chosen = &order[..k];
                    for i in 0..k {
                        let (dst, src) = (chosen[i], chosen[(i + 1) % k]);
                        out[(s * c + dst) * p..(s * c + dst + 1) * p]
                            .copy_from_slice(&x[(s * c + src) * p..(s * c + src + 1) * p]);
                    }
                }
            }
        }
        _ => return Err(Error::InvalidArgument(format!("draw does not match operation {}", kind.name()))),
    }
    Tensor::new(f.dims().to_vec(), out)
}

/// Adjoint of the operation with respect to its input feature, treating the
/// noise scale `std(F)` as a constant.
fn input_adjoint(kind: AugOpKind, draw: &OpDraw, g: &Tensor, m: f32) -> Result<Tensor> {
    let (n, c, p) = layout(g.dims());
    let mut out = g.data().to_vec();
    match (kind, draw) {
        (AugOpKind::Identity, _) | (AugOpKind::AdditiveGaussianNoise, _) => {}
        (AugOpKind::UniformScale, _) => out.iter_mut().for_each(|v| *v *= 1.0 + m),
        (AugOpKind::FeatureMask, OpDraw::Mask(ranks)) => {
            let k = count_for(m, p);
            for (s, rank) in ranks.iter().enumerate() {
                for &pos in &rank[..k] {
                    for ch in 0..c {
                        out[(s * c + ch) * p + pos] = 0.0;
                    }
                }
            }
        }
        (AugOpKind::ChannelScale, OpDraw::Gains(xi)) => {
            for (i, chunk) in out.chunks_mut(p).enumerate() {
                let gain = 1.0 + m * xi[i];
                chunk.iter_mut().for_each(|v| *v *= gain);
            }
        }
        (AugOpKind::ChannelShuffle, OpDraw::Shuffle(orders)) => {
            let k = count_for(m, c);
            if k >= 2 {
                let gd = g.data();
                for (s, order) in orders.iter().enumerate().take(n) {
                    let chosen = &order[..k];
                    for i in 0..k {
                        let (dst, src) = (chosen[i], chosen[(i + 1) % k]);
                        out[(s * c + src) * p..(s * c + src + 1) * p]
                            .copy_from_slice(&gd[(s * c + dst) * p..(s * c + dst + 1) * p]);
                    }
                }
            }
        }
        _ => return Err(Error::InvalidArgument(format!("draw does not match operation {}", kind.name()))),
    }
    Tensor::new(g.dims().to_vec(), out)
}

/// Applies one operation, drawing its randomness from `rng`.
pub fn apply_op(kind: AugOpKind, f: &Tensor, m: f32, rng: &mut Rng) -> Result<Tensor> {
    let draw = OpDraw::sample(kind, f.dims(), rng);
    apply_with(kind, &draw, f, m)
}

/// Straight-through magnitude gradient: the sum of the upstream gradient over
/// every position, accumulated left to right in `f32`.
pub fn magnitude_grad(upstream: &Tensor) -> f32 {
    upstream.data().iter().fold(0.0f32, |acc, &g| acc + g)
}

/// Tape node for one augmentation operation. Inputs are the feature and a
/// one-element magnitude.
struct AugOpNode {
    kind: AugOpKind,
    draw: OpDraw,
}

impl CustomBackward for AugOpNode {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        apply_with(self.kind, &self.draw, inputs[0], inputs[1].item()?)
    }

    fn backward(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let m = inputs[1].item()?;
        let gf = input_adjoint(self.kind, &self.draw, upstream, m)?;
        let gm = match self.kind {
            AugOpKind::Identity => 0.0,
            _ => magnitude_grad(upstream),
        };
        Ok(vec![gf, Tensor::scalar(gm)])
    }
}

/// Records `O(F; m)` on the tape with the straight-through magnitude gradient.
pub fn aug_op_on_tape(tape: &mut Tape, kind: AugOpKind, draw: OpDraw, f: Var, m: Var) -> Result<Var> {
    tape.custom(Arc::new(AugOpNode { kind, draw }), &[f, m])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `b = σ((logit(β) + logit(u)) / λ)`.
    Relaxed,
    /// `b = 1` iff `u > 1 - β`, i.e. `b ~ Bernoulli(β)` coupled to the relaxed draw.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// Gumbel-softmax weighted sum over all sub-policies.
    Soft,
    /// One-hot argmax in the forward pass, soft weights on the backward path.
    Hard,
}

/// Draws for one gated operation: a per-sample gate uniform and the
/// operation's own randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct OpNoise {
    pub gate_u: Vec<f64>,
    pub draw: OpDraw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubPolicyNoise {
    pub ops: Vec<OpNoise>,
}

impl SubPolicyNoise {
    pub fn sample(sub: &SubPolicy, dims: &[usize], rng: &Rng) -> Self {
        let (n, _, _) = layout(dims);
        let ops = sub
            .ops
            .iter()
            .enumerate()
            .map(|(j, op)| {
                let mut r = rng.child(j as u64);
                let gate_u = (0..n).map(|_| r.uniform_open()).collect();
                let draw = OpDraw::sample(op.kind, dims, &mut r);
                OpNoise { gate_u, draw }
            })
            .collect();
        Self { ops }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixNoise {
    /// One Gumbel sample per sub-policy.
    pub gumbel: Vec<f32>,
    pub subs: Vec<SubPolicyNoise>,
}

impl MixNoise {
    pub fn sample(policy: &AugPolicy, dims: &[usize], rng: &Rng) -> Self {
        let mut g = rng.child(0);
        let gumbel = (0..policy.num_subpolicies())
            .map(|_| gumbel_from_uniform(g.uniform_open()))
            .collect();
        let subs = policy
            .subpolicies
            .iter()
            .enumerate()
            .map(|(s, sub)| SubPolicyNoise::sample(sub, dims, &rng.child(1 + s as u64)))
            .collect();
        Self { gumbel, subs }
    }

    pub fn with_gumbel(mut self, gumbel: Vec<f32>) -> Self {
        self.gumbel = gumbel;
        self
    }
}

/// Tape handles for the policy parameters γ = {alpha, β, m}.
#[derive(Debug, Clone)]
pub struct PolicyVars {
    pub alpha: Var,
    /// `(beta, m)` per operation, per sub-policy.
    pub ops: Vec<Vec<(Var, Var)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub alpha: bool,
    pub beta: bool,
    pub m: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        alpha: true,
        beta: true,
        m: true,
    };
    pub const NONE: Trainable = Trainable {
        alpha: false,
        beta: false,
        m: false,
    };
}

impl PolicyVars {
    pub fn record(tape: &mut Tape, policy: &AugPolicy, trainable: Trainable) -> Result<Self> {
        let leaf = |tape: &mut Tape, t: Tensor, train: bool| if train { tape.param(t) } else { tape.constant(t) };
        let alpha = leaf(tape, Tensor::from_vec(policy.alpha.clone())?, trainable.alpha);
        let ops = policy
            .subpolicies
            .iter()
            .map(|sub| {
                sub.ops
                    .iter()
                    .map(|op| {
                        let b = leaf(tape, Tensor::scalar(op.beta), trainable.beta);
                        let m = leaf(tape, Tensor::scalar(op.m), trainable.m);
                        (b, m)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { alpha, ops })
    }
}

/// Gated composition `Ō_k ∘ … ∘ Ō_1` of one sub-policy on the tape.
pub fn subpolicy_on_tape(
    tape: &mut Tape,
    sub: &SubPolicy,
    vars: &[(Var, Var)],
    f: Var,
    lambda: f32,
    noise: &SubPolicyNoise,
    mode: GateMode,
) -> Result<Var> {
    let mut cur = f;
    for ((op, &(beta, m)), on) in sub.ops.iter().zip(vars).zip(&noise.ops) {
        let applied = aug_op_on_tape(tape, op.kind, on.draw.clone(), cur, m)?;
        let n = on.gate_u.len();
        let gate = match mode {
            GateMode::Relaxed => {
                let lb = tape.logit(beta)?;
                let ones = tape.constant(Tensor::ones(&[n])?);
                let lb_n = tape.row_scale(ones, lb)?;
                let logistic = on.gate_u.iter().map(|&u| logistic_from_uniform(u)).collect();
                let noise_v = tape.constant(Tensor::from_vec(logistic)?);
                let z = tape.add(lb_n, noise_v)?;
                let z = tape.scale(z, 1.0 / lambda);
                tape.sigmoid(z)
            }
            GateMode::Hard => {
                let b = tape.value(beta).item()?;
                let bits = on
                    .gate_u
                    .iter()
                    .map(|&u| if u > 1.0 - b as f64 { 1.0 } else { 0.0 })
                    .collect();
                tape.constant(Tensor::from_vec(bits)?)
            }
        };
        cur = match mode {
            GateMode::Hard => {
                // Select rather than blend so skipped samples stay bit-identical.
                let bits: Vec<bool> = tape.value(gate).data().iter().map(|&b| b > 0.5).collect();
                let (ns, _, _) = layout(tape.value(cur).dims());
                let per = tape.value(cur).numel() / ns;
                let mut keep = vec![0.0f32; tape.value(cur).numel()];
                for (s, &on) in bits.iter().enumerate() {
                    if on {
                        keep[s * per..(s + 1) * per].iter_mut().for_each(|v| *v = 1.0);
                    }
                }
                let dims = tape.value(cur).dims().to_vec();
                let sel = Arc::new(GateSelect {
                    keep: Tensor::new(dims, keep)?,
                });
                tape.custom(sel, &[applied, cur])?
            }
            GateMode::Relaxed => {
                let diff = tape.sub(applied, cur)?;
                let scaled = tape.row_scale(diff, gate)?;
                tape.add(cur, scaled)?
            }
        };
    }
    Ok(cur)
}

/// `keep ? applied : original`, element-wise, with the matching gradient routing.
struct GateSelect {
    keep: Tensor,
}

impl CustomBackward for GateSelect {
    fn name(&self) -> &str {
        "gate_select"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let k = self.keep.data();
        let data = inputs[0]
            .data()
            .iter()
            .zip(inputs[1].data())
            .zip(k)
            .map(|((&a, &o), &kv)| if kv > 0.5 { a } else { o })
            .collect();
        Tensor::new(inputs[0].dims().to_vec(), data)
    }

    fn backward(&self, _inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let ga = upstream.zip_map(&self.keep, "gate grad", |g, k| g * k)?;
        let go = upstream.zip_map(&self.keep, "gate grad", |g, k| g * (1.0 - k))?;
        Ok(vec![ga, go])
    }
}

/// Mixture weights `softmax((alpha + g) / τ)` on the tape; in hard mode the
/// forward value is the one-hot argmax while gradients follow the soft weights.
pub fn mixture_weights_on_tape(tape: &mut Tape, alpha: Var, gumbel: &[f32], tau: f32, mode: MixMode) -> Result<Var> {
    let g = tape.constant(Tensor::from_vec(gumbel.to_vec())?);
    let z = tape.add(alpha, g)?;
    let soft = tape.softmax(z, tau)?;
    match mode {
        MixMode::Soft => Ok(soft),
        MixMode::Hard => {
            let st = Arc::new(StraightThrough::new(
                |w| {
                    let idx = argmax_first(w.data());
                    let mut one_hot = vec![0.0; w.numel()];
                    one_hot[idx] = 1.0;
                    Tensor::new(w.dims().to_vec(), one_hot)
                },
                |g| Ok(g.clone()),
            ));
            tape.straight_through(st, soft)
        }
    }
}

/// Relaxed Bernoulli gate `σ((logit(β) + logit(u)) / λ)` for a single draw.
pub fn relaxed_gate(beta: f32, u: f64, lambda: f32) -> f32 {
    let lb = (beta / (1.0 - beta)).ln();
    tensor::sigmoid((lb + logistic_from_uniform(u)) * (1.0 / lambda))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax_first(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `s̄(F) = Σ_s w_s · s(F)` on the tape, with relaxed gates inside each sub-policy.
pub fn mix_on_tape(
    tape: &mut Tape,
    policy: &AugPolicy,
    vars: &PolicyVars,
    f: Var,
    noise: &MixNoise,
    mode: MixMode,
) -> Result<Var> {
    let p = policy.num_subpolicies();
    if p == 0 {
        return Err(Error::InvalidArgument("empty policy".into()));
    }
    let w = mixture_weights_on_tape(tape, vars.alpha, &noise.gumbel, policy.tau, mode)?;
    let mut acc: Option<Var> = None;
    for s in 0..p {
        let out = subpolicy_on_tape(
            tape,
            &policy.subpolicies[s],
            &vars.ops[s],
            f,
            policy.lambda,
            &noise.subs[s],
            GateMode::Relaxed,
        )?;
        let ws = tape.select(w, s)?;
        let term = tape.row_scale(out, ws)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("p >= 1"))
}

/// Applies one sub-policy off the tape.
pub fn apply_subpolicy_with(
    sub: &SubPolicy,
    f: &Tensor,
    lambda: f32,
    noise: &SubPolicyNoise,
    mode: GateMode,
) -> Result<Tensor> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("lambda must be positive".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(f.clone());
    let vars: Vec<(Var, Var)> = sub
        .ops
        .iter()
        .map(|op| (tape.constant(Tensor::scalar(op.beta)), tape.constant(Tensor::scalar(op.m))))
        .collect();
    let out = subpolicy_on_tape(&mut tape, sub, &vars, x, lambda, noise, mode)?;
    Ok(tape.value(out).clone())
}

pub fn apply_subpolicy(sub: &SubPolicy, f: &Tensor, lambda: f32, rng: &Rng, mode: GateMode) -> Result<Tensor> {
    let noise = SubPolicyNoise::sample(sub, f.dims(), rng);
    apply_subpolicy_with(sub, f, lambda, &noise, mode)
}

pub fn mix_subpolicies_with(policy: &AugPolicy, f: &Tensor, noise: &MixNoise, mode: MixMode) -> Result<Tensor> {
    if policy.subpolicies.is_empty() {
        return Err(Error::InvalidArgument("empty policy".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(f.clone());
    let vars = PolicyVars::record(&mut tape, policy, Trainable::NONE)?;
    let out = mix_on_tape(&mut tape, policy, &vars, x, noise, mode)?;
    Ok(tape.value(out).clone())
}

pub fn mix_subpolicies(policy: &AugPolicy, f: &Tensor, rng: &Rng, mode: MixMode) -> Result<Tensor> {
    if policy.subpolicies.is_empty() {
        return Err(Error::InvalidArgument("empty policy".into()));
    }
    let noise = MixNoise::sample(policy, f.dims(), rng);
    mix_subpolicies_with(policy, f, &noise, mode)
}

/// The sub-policy kept after search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePolicy {
    pub index: usize,
    pub lambda: f32,
    pub subpolicy: SubPolicy,
}

impl DiscretePolicy {
    /// Hard-gated application with fixed magnitudes.
    pub fn apply(&self, f: &Tensor, rng: &Rng) -> Result<Tensor> {
        apply_subpolicy(&self.subpolicy, f, self.lambda, rng, GateMode::Hard)
    }

    /// Single-sub-policy document in the policy format.
    pub fn to_policy(&self, alpha: f32, tau: f32) -> AugPolicy {
        AugPolicy {
            alpha: vec![alpha],
            tau,
            lambda: self.lambda,
            subpolicies: vec![self.subpolicy.clone()],
        }
    }

    pub fn identity() -> Self {
        Self {
            index: 0,
            lambda: 0.5,
            subpolicy: SubPolicy {
                ops: vec![AugOp {
                    kind: AugOpKind::Identity,
                    beta: 1.0,
                    m: 0.0,
                }],
            },
        }
    }
}

/// Keeps the sub-policy with the largest logit (lowest index on ties).
pub fn discretize(policy: &AugPolicy) -> Result<DiscretePolicy> {
    if policy.subpolicies.is_empty() {
        return Err(Error::InvalidArgument("empty policy".into()));
    }
    let index = argmax_first(&policy.alpha);
    Ok(DiscretePolicy {
        index,
        lambda: policy.lambda,
        subpolicy: policy.subpolicies[index].clone(),
    })
}

/// `½ · mean((F_t_aug − F_s_aligned)²)`.
pub fn consistency_loss(f_t_aug: &Tensor, f_s_aligned: &Tensor) -> Result<f32> {
    tensor::ensure_same_dims("consistency loss", f_t_aug, f_s_aligned)?;
    let s: f64 = f_t_aug
        .data()
        .iter()
        .zip(f_s_aligned.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    Ok((0.5 * s / f_t_aug.numel() as f64) as f32)
}

pub fn consistency_loss_on_tape(tape: &mut Tape, f_t_aug: Var, f_s_aligned: Var) -> Result<Var> {
    let mse = tape.mse(f_t_aug, f_s_aligned)?;
    Ok(tape.scale(mse, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    fn feat(seed: u64) -> Tensor {
        let mut r = Rng::new(seed, 99);
        Tensor::new(vec![2, 4, 3, 3], (0..72).map(|_| r.normal()).collect()).unwrap()
    }

    fn op(kind: AugOpKind, beta: f32, m: f32) -> AugOp {
        AugOp { kind, beta, m }
    }

    #[test]
    fn zero_noise_is_identity() {
        let f = feat(1);
        let out = apply_op(AugOpKind::AdditiveGaussianNoise, &f, 0.0, &mut Rng::new(1, 1)).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn full_mask_zeroes() {
        let out = apply_op(AugOpKind::FeatureMask, &feat(2), 1.0, &mut Rng::new(1, 1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_scale_arithmetic() {
        let out = apply_op(AugOpKind::UniformScale, &t(&[2], &[2., 4.]), 0.5, &mut Rng::new(0, 0)).unwrap();
        assert_eq!(out.data(), &[3., 6.]);
    }

    #[test]
    fn magnitude_out_of_range() {
        assert!(apply_op(AugOpKind::UniformScale, &feat(3), 1.5, &mut Rng::new(0, 0)).is_err());
        assert!(apply_op(AugOpKind::Identity, &feat(3), -0.1, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn identity_ignores_magnitude() {
        let f = feat(4);
        assert_eq!(apply_op(AugOpKind::Identity, &f, 0.9, &mut Rng::new(0, 0)).unwrap(), f);
    }

    #[test]
    fn shuffle_permutes_channels() {
        let f = feat(5);
        let out = apply_op(AugOpKind::ChannelShuffle, &f, 1.0, &mut Rng::new(3, 3)).unwrap();
        for s in 0..2 {
            let mut a: Vec<Vec<u32>> = (0..4)
                .map(|c| f.data()[(s * 4 + c) * 9..(s * 4 + c + 1) * 9].iter().map(|v| v.to_bits()).collect())
                .collect();
            let mut b: Vec<Vec<u32>> = (0..4)
                .map(|c| out.data()[(s * 4 + c) * 9..(s * 4 + c + 1) * 9].iter().map(|v| v.to_bits()).collect())
                .collect();
            assert_ne!(a, b);
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn channel_scale_bounded_by_one_plus_m() {
        let f = feat(6);
        let out = apply_op(AugOpKind::ChannelScale, &f, 0.4, &mut Rng::new(1, 2)).unwrap();
        for (o, x) in out.data().iter().zip(f.data()) {
            let ratio = o / x;
            assert!((1.0..=1.4 + 1e-6).contains(&ratio));
        }
    }

    #[test]
    fn hard_mode_no_ops_fire_at_beta_min() {
        let sub = SubPolicy {
            ops: vec![op(AugOpKind::UniformScale, BETA_MIN, 1.0), op(AugOpKind::FeatureMask, BETA_MIN, 1.0)],
        };
        let f = feat(7);
        let noise = SubPolicyNoise {
            ops: sub
                .ops
                .iter()
                .map(|o| OpNoise {
                    gate_u: vec![0.5, 0.9],
                    draw: OpDraw::sample(o.kind, f.dims(), &mut Rng::new(0, 0)),
                })
                .collect(),
        };
        assert_eq!(apply_subpolicy_with(&sub, &f, 0.5, &noise, GateMode::Hard).unwrap(), f);
    }

    #[test]
    fn hard_mode_certain_application() {
        let sub = SubPolicy {
            ops: vec![op(AugOpKind::UniformScale, 1.0, 1.0)],
        };
        let out = apply_subpolicy(&sub, &t(&[2], &[1., 2.]), 0.5, &Rng::new(5, 5), GateMode::Hard).unwrap();
        assert_eq!(out.data(), &[2., 4.]);
    }

    #[test]
    fn relaxed_gate_at_half() {
        let sub = SubPolicy {
            ops: vec![op(AugOpKind::UniformScale, 0.5, 1.0)],
        };
        let f = t(&[3], &[1., -2., 5.]);
        for lambda in [0.1, 0.5, 3.0] {
            let noise = SubPolicyNoise {
                ops: vec![OpNoise {
                    gate_u: vec![0.5],
                    draw: OpDraw::None,
                }],
            };
            let out = apply_subpolicy_with(&sub, &f, lambda, &noise, GateMode::Relaxed).unwrap();
            // b = σ(0) = 0.5 => (2F + F)/2
            assert_eq!(out.data(), &[1.5, -3.0, 7.5]);
        }
    }

    fn two_policy(alpha: Vec<f32>) -> AugPolicy {
        AugPolicy {
            alpha,
            tau: 1.0,
            lambda: 0.5,
            subpolicies: vec![
                SubPolicy {
                    ops: vec![op(AugOpKind::Identity, 0.5, 0.1)],
                },
                SubPolicy {
                    ops: vec![op(AugOpKind::UniformScale, 1.0 - BETA_MIN, 1.0)],
                },
            ],
        }
    }

    fn forced_noise(policy: &AugPolicy, dims: &[usize]) -> MixNoise {
        let mut noise = MixNoise::sample(policy, dims, &Rng::new(1, 1)).with_gumbel(vec![0.0; policy.alpha.len()]);
        for sub in &mut noise.subs {
            for o in &mut sub.ops {
                o.gate_u.iter_mut().for_each(|u| *u = 1.0 - 1e-9);
            }
        }
        noise
    }

    #[test]
    fn hand_mixture() {
        let policy = two_policy(vec![0.0, 0.0]);
        let f = t(&[1], &[2.0]);
        let out = mix_subpolicies_with(&policy, &f, &forced_noise(&policy, f.dims()), MixMode::Soft).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-6, "{out:?}");
    }

    #[test]
    fn saturated_mixture_selects_first() {
        let policy = two_policy(vec![50.0, 0.0]);
        let f = t(&[2], &[2.0, -1.0]);
        let out = mix_subpolicies_with(&policy, &f, &forced_noise(&policy, f.dims()), MixMode::Soft).unwrap();
        for (o, x) in out.data().iter().zip(f.data()) {
            assert!((o - x).abs() < 1e-6);
        }
    }

    #[test]
    fn singleton_policy_ignores_alpha() {
        let mut policy = two_policy(vec![-7.0]);
        policy.subpolicies.truncate(1);
        policy.subpolicies[0].ops[0] = op(AugOpKind::UniformScale, 0.5, 0.5);
        let f = feat(8);
        let rng = Rng::new(2, 2);
        let mixed = mix_subpolicies(&policy, &f, &rng, MixMode::Soft).unwrap();
        let noise = MixNoise::sample(&policy, f.dims(), &rng);
        let direct = apply_subpolicy_with(&policy.subpolicies[0], &f, 0.5, &noise.subs[0], GateMode::Relaxed).unwrap();
        assert_eq!(mixed, direct);
    }

    #[test]
    fn identity_policy_is_bit_exact() {
        let f = feat(9);
        let kinds = vec![vec![AugOpKind::Identity, AugOpKind::Identity]; 3];
        let policy = AugPolicy::uniform_init(&kinds, BETA_MIN, 0.3, 1.0, 0.5).unwrap();
        let hard = mix_subpolicies(&policy, &f, &Rng::new(4, 4), MixMode::Hard).unwrap();
        assert_eq!(hard, f);
        let soft = mix_subpolicies(&policy, &f, &Rng::new(4, 4), MixMode::Soft).unwrap();
        for (a, b) in soft.data().iter().zip(f.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn hard_mixture_is_one_hot_forward() {
        let policy = two_policy(vec![0.0, 3.0]);
        let f = t(&[1], &[2.0]);
        let out = mix_subpolicies_with(&policy, &f, &forced_noise(&policy, f.dims()), MixMode::Hard).unwrap();
        assert!((out.data()[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn magnitude_grad_examples() {
        assert_eq!(magnitude_grad(&Tensor::ones(&[2, 2]).unwrap()), 4.0);
        assert_eq!(magnitude_grad(&t(&[2, 2], &[1., -1., 2., 0.])), 2.0);
        assert_eq!(magnitude_grad(&Tensor::zeros(&[2, 2]).unwrap()), 0.0);
    }

    #[test]
    fn magnitude_gradient_is_upstream_sum_on_tape() {
        let f = feat(10);
        let mut tape = Tape::new();
        let x = tape.constant(f.clone());
        let m = tape.param(Tensor::scalar(0.2));
        let draw = OpDraw::sample(AugOpKind::AdditiveGaussianNoise, f.dims(), &mut Rng::new(3, 1));
        let y = aug_op_on_tape(&mut tape, AugOpKind::AdditiveGaussianNoise, draw, x, m).unwrap();
        let up = feat(11);
        let g = tape.backward_from(y, up.clone()).unwrap();
        assert_eq!(g.get(m).unwrap().data()[0], magnitude_grad(&up));
    }

    #[test]
    fn discretize_examples() {
        let mk = |alpha: Vec<f32>| {
            let kinds = vec![vec![AugOpKind::Identity]; alpha.len()];
            let mut p = AugPolicy::uniform_init(&kinds, 0.5, 0.1, 1.0, 0.5).unwrap();
            p.alpha = alpha;
            p
        };
        assert_eq!(discretize(&mk(vec![0.1, 2.0, -1.0])).unwrap().index, 1);
        assert_eq!(discretize(&mk(vec![1.0, 1.0])).unwrap().index, 0);
        let single = discretize(&mk(vec![-3.0])).unwrap();
        assert_eq!(single.index, 0);
        assert_eq!(single.subpolicy, mk(vec![-3.0]).subpolicies[0]);
    }

    #[test]
    fn consistency_examples() {
        let a = t(&[2], &[2., 0.]);
        let z = Tensor::zeros(&[2]).unwrap();
        assert_eq!(consistency_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(consistency_loss(&a, &z).unwrap(), 1.0);
        let a2 = t(&[2], &[4., 0.]);
        assert_eq!(consistency_loss(&a2, &z).unwrap(), 4.0);
        assert!(consistency_loss(&a, &t(&[1], &[0.])).is_err());
    }

    #[test]
    fn policy_document_field_order() {
        let policy = AugPolicy::uniform_init(&[vec![AugOpKind::FeatureMask]], 0.5, 0.1, 1.0, 0.5).unwrap();
        let s = serde_json::to_string(&policy).unwrap();
        assert_eq!(
            s,
            r#"{"alpha":[0.0],"tau":1.0,"lambda":0.5,"subpolicies":[{"ops":[{"kind":"feature_mask","beta":0.5,"m":0.1}]}]}"#
        );
        assert_eq!(AugPolicy::from_json(&policy.to_json().unwrap()).unwrap(), policy);
    }

    #[test]
    fn validate_rejects_bad_policies() {
        let mut p = AugPolicy::uniform_init(&[vec![AugOpKind::Identity]], 0.5, 0.1, 1.0, 0.5).unwrap();
        p.tau = 0.0;
        assert!(p.validate(2).is_err());
        let long = AugPolicy::uniform_init(&[vec![AugOpKind::Identity; 3]], 0.5, 0.1, 1.0, 0.5).unwrap();
        assert!(long.validate(2).is_err());
        let empty = AugPolicy {
            alpha: vec![],
            tau: 1.0,
            lambda: 0.5,
            subpolicies: vec![],
        };
        assert!(empty.validate(2).is_err());
    }

    #[test]
    fn clamp_projects_parameters() {
        let mut p = AugPolicy::uniform_init(&[vec![AugOpKind::UniformScale]], 0.5, 0.1, 1.0, 0.5).unwrap();
        p.subpolicies[0].ops[0].beta = 1.3;
        p.subpolicies[0].ops[0].m = -0.2;
        p.clamp();
        assert_eq!(p.subpolicies[0].ops[0].beta, 1.0 - BETA_MIN);
        assert_eq!(p.subpolicies[0].ops[0].m, 0.0);
    }
}
