//! Bi-level training loop. Inner steps update the student, the adapter and the
//! DAM head on training batches with the policy frozen; outer steps update the
//! policy on held-out batches with the networks frozen. After the search phase
//! the policy is discretized and distillation continues on the full training
//! set.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::save_checkpoint;
use crate::config::{DecodePath, Mode, RunConfig};
use crate::dafa::{self, AugPolicy, DiscretePolicy, MixMode, MixNoise, PolicyVars, SubPolicy, Trainable};
use crate::dam::{self, DamHead, DistinctiveArea};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, build_backbone, top1, Adapter, Backbone};
use crate::optim::{staged_lr, Sgd};
use crate::oracle;
use crate::rng::Rng;
use crate::tensor::Tensor;

const ROOT_STREAM: u64 = 0x736f_6b64;
const STUDENT: u64 = 1;
const ADAPTER: u64 = 2;
const HEAD: u64 = 3;
const POLICY: u64 = 4;
const SPLIT: u64 = 5;
const SHUFFLE: u64 = 6;
const VAL_SHUFFLE: u64 = 7;
const INNER_NOISE: u64 = 8;
const OUTER_NOISE: u64 = 9;
const KS: u64 = 10;

const EVAL_CHUNK: usize = 256;

/// Networks updated by inner steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Nets {
    pub student: Backbone,
    pub adapter: Adapter,
    pub head: DamHead,
    /// Constant factor applied to both sides of every feature comparison.
    pub feature_scale: f32,
}

impl Nets {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.student.weights.iter_mut().collect();
        v.push(&mut self.adapter.weight);
        v.extend(self.head.weights.iter_mut());
        v
    }

    /// Aligned student feature `Φ(F_s)` for a batch.
    pub fn aligned_feature(&self, x: &Tensor) -> Result<Tensor> {
        let (f, _) = self.student.forward(x)?;
        let s = self.feature_scale;
        Ok(self.adapter.adapt(&f)?.map(|v| v * s))
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub nets: Nets,
    pub policy: AugPolicy,
    opt: Sgd,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(nets: Nets, policy: AugPolicy, momentum: f32) -> Self {
        Self {
            nets,
            policy,
            opt: Sgd::new(momentum),
            epoch: 0,
        }
    }
}

/// Loss terms of one inner step. In baseline mode `lda` holds the plain
/// feature loss and `ld` is absent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub task: f32,
    pub ld: Option<f32>,
    pub lda: f32,
    pub total: f32,
    pub correct: usize,
}

impl StepRecord {
    pub fn recombined(&self, cfg: &RunConfig) -> f32 {
        let w = cfg.loss;
        match cfg.mode {
            Mode::Baseline => self.task + w.alpha_w * self.lda,
            Mode::Sokd => self.task + w.alpha_w * self.ld.unwrap_or(0.0) + w.beta_w * self.lda,
        }
    }
}

fn scaled_add(tape: &mut Tape, acc: Var, term: Var, w: f32) -> Result<Var> {
    let t = tape.scale(term, w);
    tape.add(acc, t)
}

/// Loss record and gradients for every inner parameter (student, adapter,
/// head, in that order) given an already augmented teacher feature.
pub fn inner_grads(
    nets: &Nets,
    cfg: &RunConfig,
    x: &Tensor,
    labels: &[usize],
    f_t_aug: &Tensor,
) -> Result<(StepRecord, Vec<Tensor>)> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut tape = Tape::new();
    let sv = nets.student.record(&mut tape, true);
    let av = tape.param(nets.adapter.weight.clone());
    let sokd = cfg.mode == Mode::Sokd;
    let hv = if sokd { nets.head.record(&mut tape, true) } else { Vec::new() };
    let xv = tape.constant(x.clone());
    let out = nets.student.forward_on_tape(&mut tape, &sv, xv)?;
    let task = tape.cross_entropy(out.logits, labels)?;
    let phi = Adapter::apply_on_tape(&mut tape, av, out.feature)?;
    let phi = tape.scale(phi, nets.feature_scale);
    let ftv = tape.constant(f_t_aug.clone());
    let w = cfg.loss;
    let (total, ld, lda) = if sokd {
        let s_out = nets.head.forward_on_tape(&mut tape, &hv, phi)?;
        let t_out = nets.head.forward(f_t_aug)?;
        let ld = dam::align_loss_on_tape(&mut tape, s_out, &t_out)?;
        let decoded = match cfg.dam.decode_from {
            DecodePath::Student => s_out.values(&tape),
            DecodePath::Teacher => t_out,
        };
        let areas = dam::decode_batch(&decoded, cfg.dam.max_areas)?;
        let weights = dam::lda_weights(tape.value(phi).dims(), &areas)?;
        let lda = dam::masked_loss_on_tape(&mut tape, phi, ftv, weights)?;
        let t = scaled_add(&mut tape, task, ld, w.alpha_w)?;
        let t = scaled_add(&mut tape, t, lda, w.beta_w)?;
        (t, Some(ld), lda)
    } else {
        let feat = tape.mse(phi, ftv)?;
        (scaled_add(&mut tape, task, feat, w.alpha_w)?, None, feat)
    };
    let rec = StepRecord {
        task: tape.value(task).item()?,
        ld: ld.map(|v| tape.value(v).item()).transpose()?,
        lda: tape.value(lda).item()?,
        total: tape.value(total).item()?,
        correct: (top1(tape.value(out.logits), labels)? * labels.len() as f32).round() as usize,
    };
    if !rec.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "inner loss: task {} ld {:?} lda {} total {}",
            rec.task, rec.ld, rec.lda, rec.total
        )));
    }
    let mut grads = tape.backward(total)?;
    let mut take = |v: Var, like: &Tensor| -> Result<Tensor> {
        match grads.take(v) {
            Some(g) => Ok(g),
            None => Tensor::zeros(like.dims()),
        }
    };
    let mut out_grads = Vec::new();
    for (v, w) in sv.iter().zip(&nets.student.weights) {
        out_grads.push(take(*v, w)?);
    }
    out_grads.push(take(av, &nets.adapter.weight)?);
    for (i, w) in nets.head.weights.iter().enumerate() {
        out_grads.push(match hv.get(i) {
            Some(&v) => take(v, w)?,
            None => Tensor::zeros(w.dims())?,
        });
    }
    Ok((rec, out_grads))
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f32) -> f32 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64).powi(2))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.map(|v| v * k);
        }
    }
    norm
}

/// One SGD-momentum step on `L_task + α_w·L_D + β_w·L_DA` (or the baseline
/// objective). The policy is not touched.
pub fn inner_step(
    state: &mut TrainState,
    cfg: &RunConfig,
    x: &Tensor,
    labels: &[usize],
    f_t_aug: &Tensor,
    lr: f32,
) -> Result<StepRecord> {
    let (rec, mut grads) = inner_grads(&state.nets, cfg, x, labels, f_t_aug)?;
    if let Some(c) = cfg.schedule.grad_clip {
        clip_global_norm(&mut grads, c);
    }
    let grefs: Vec<&Tensor> = grads.iter().collect();
    let mut params = state.nets.params_mut();
    state.opt.step(&mut params, &grefs, lr)?;
    Ok(rec)
}

/// Gradients of the consistency loss with respect to the policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub alpha: Vec<f32>,
    /// `(dβ, dm)` per operation, per sub-policy.
    pub ops: Vec<Vec<(f32, f32)>>,
}

pub fn outer_grads(
    policy: &AugPolicy,
    f_t: &Tensor,
    f_s_aligned: &Tensor,
    noise: &MixNoise,
    mode: MixMode,
    trainable: Trainable,
) -> Result<(f32, PolicyGrads)> {
    let mut tape = Tape::new();
    let fv = tape.constant(f_t.clone());
    let pv = PolicyVars::record(&mut tape, policy, trainable)?;
    let aug = dafa::mix_on_tape(&mut tape, policy, &pv, fv, noise, mode)?;
    let sv = tape.constant(f_s_aligned.clone());
    let loss = dafa::consistency_loss_on_tape(&mut tape, aug, sv)?;
    let l = tape.value(loss).item()?;
    if !l.is_finite() {
        return Err(Error::NonFinite(format!("consistency loss {l}")));
    }
    let mut grads = PolicyGrads {
        alpha: vec![0.0; policy.alpha.len()],
        ops: policy.subpolicies.iter().map(|s| vec![(0.0, 0.0); s.ops.len()]).collect(),
    };
    if trainable == Trainable::NONE {
        return Ok((l, grads));
    }
    let g = tape.backward(loss)?;
    if let Some(a) = g.get(pv.alpha) {
        grads.alpha = a.data().to_vec();
    }
    for (gs, vs) in grads.ops.iter_mut().zip(&pv.ops) {
        for (go, &(b, m)) in gs.iter_mut().zip(vs) {
            if let Some(t) = g.get(b) {
                go.0 = t.data()[0];
            }
            if let Some(t) = g.get(m) {
                go.1 = t.data()[0];
            }
        }
    }
    Ok((l, grads))
}

/// One first-order gradient step on the consistency loss with respect to the
/// policy only, followed by projection of β and m. Returns the loss.
#[allow(clippy::too_many_arguments)]
pub fn outer_step(
    policy: &mut AugPolicy,
    f_t: &Tensor,
    f_s_aligned: &Tensor,
    noise: &MixNoise,
    mode: MixMode,
    trainable: Trainable,
    lr: f32,
) -> Result<f32> {
    let (l, g) = outer_grads(policy, f_t, f_s_aligned, noise, mode, trainable)?;
    for (a, ga) in policy.alpha.iter_mut().zip(&g.alpha) {
        *a -= lr * ga;
    }
    for (sub, gs) in policy.subpolicies.iter_mut().zip(&g.ops) {
        for (op, &(gb, gm)) in sub.ops.iter_mut().zip(gs) {
            op.beta -= lr * gb;
            op.m -= lr * gm;
        }
    }
    policy.clamp();
    Ok(l)
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub task_loss: Option<f32>,
    pub ld_loss: Option<f32>,
    pub lda_loss: Option<f32>,
    pub aug_loss: Option<f32>,
    pub top1: Option<f32>,
}

/// One row of `areas.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRow {
    pub epoch: usize,
    pub image_index: usize,
    pub area_rank: usize,
    pub center_x: f32,
    pub center_y: f32,
    pub width: f32,
    pub height: f32,
    pub score: f32,
}

/// One row of `ks.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsRow {
    pub policy: String,
    pub statistic: f64,
    pub critical: f64,
    pub below_critical: bool,
}

fn init_policy(cfg: &RunConfig, rng: &Rng) -> Result<AugPolicy> {
    let p = &cfg.policy;
    let policy = if let Some(ex) = &p.explicit {
        let mut policy = AugPolicy {
            alpha: vec![0.0; ex.len()],
            tau: p.tau,
            lambda: p.lambda,
            subpolicies: ex.clone(),
        };
        // The relaxed gate needs logit(β) finite.
        policy.clamp();
        policy
    } else {
        let kinds = match &p.subpolicies {
            Some(k) => k.clone(),
            None => AugPolicy::random_kinds(p.num_subpolicies, p.ops_per_subpolicy, &mut rng.clone()),
        };
        AugPolicy::uniform_init(&kinds, p.init_beta, p.init_m, p.tau, p.lambda)?
    };
    policy.validate(p.k_max)?;
    Ok(policy)
}

/// `1 / RMS` of the teacher's training features when normalization is on,
/// otherwise 1.
pub fn feature_scale(cfg: &RunConfig, teacher_feat: &Tensor) -> Result<f32> {
    if !cfg.loss.normalize_features {
        return Ok(1.0);
    }
    let ms = teacher_feat.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / teacher_feat.numel().max(1) as f64;
    if !(ms > 0.0) || !ms.is_finite() {
        return Err(Error::NonFinite(format!("teacher feature mean square {ms}")));
    }
    Ok((1.0 / ms.sqrt()) as f32)
}

/// Freshly initialized networks and policy for `cfg.seed`. The student
/// initialization does not depend on the mode.
pub fn init_state(cfg: &RunConfig, teacher: &Backbone, feature_scale: f32) -> Result<TrainState> {
    let root = Rng::new(cfg.seed, ROOT_STREAM);
    let student = build_backbone(&cfg.student, &mut root.child(STUDENT))?;
    let s_c = cfg.student.feature_dims()?[0];
    let t_c = teacher.spec.feature_dims()?[0];
    let adapter = Adapter::new(s_c, t_c, &mut root.child(ADAPTER))?;
    let head = DamHead::new(t_c, cfg.dam.hidden, &mut root.child(HEAD))?;
    let policy = init_policy(cfg, &root.child(POLICY))?;
    Ok(TrainState::new(
        Nets {
            student,
            adapter,
            head,
            feature_scale,
        },
        policy,
        cfg.schedule.momentum,
    ))
}

const TEACHER_STREAM: u64 = 0x7465_6163;

/// Builds and pretrains the teacher described by `cfg`; returns it with its
/// test top-1.
pub fn train_teacher(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<(Backbone, f32)> {
    let root = Rng::new(cfg.seed, TEACHER_STREAM);
    let model = build_backbone(&cfg.teacher, &mut root.child(0))?;
    model::pretrain_teacher(model, train, test, &cfg.teacher_train, &root.child(1))
}

/// Mean of the recorded values; `None` when nothing was recorded.
fn mean(v: &[f32]) -> Option<f32> {
    if v.is_empty() {
        None
    } else {
        Some((v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64) as f32)
    }
}

/// Test-set cross-entropy and top-1.
pub fn test_metrics(model: &Backbone, data: &Dataset) -> Result<(f32, f32)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (_, logits) = model.forward_all(data.images(), EVAL_CHUNK)?;
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = tape.cross_entropy(l, data.labels())?;
    Ok((tape.value(ce).item()?, top1(&logits, data.labels())?))
}

/// A training run over a fixed teacher and dataset pair.
pub struct Session<'a> {
    cfg: &'a RunConfig,
    teacher: &'a Backbone,
    train: &'a Dataset,
    test: &'a Dataset,
    teacher_feat: Tensor,
    root: Rng,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    pub state: TrainState,
    pub metrics: Vec<MetricRow>,
    pub areas: Vec<AreaRow>,
}

impl<'a> Session<'a> {
    pub fn new(cfg: &'a RunConfig, teacher: &'a Backbone, train: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let expect = [cfg.student.in_channels, cfg.student.input_size, cfg.student.input_size];
        if train.sample_dims() != expect || test.sample_dims() != expect {
            return Err(Error::InvalidDataset(format!(
                "samples {:?} do not match the student input {expect:?}",
                train.sample_dims()
            )));
        }
        let (tf, sf) = (teacher.spec.feature_dims()?, cfg.student.feature_dims()?);
        if tf[1..] != sf[1..] || teacher.spec.in_channels != cfg.student.in_channels {
            return Err(Error::InvalidArch(format!(
                "teacher feature {tf:?} is incompatible with student feature {sf:?}"
            )));
        }
        let root = Rng::new(cfg.seed, ROOT_STREAM);
        let (raw, _) = teacher.forward_all(train.images(), EVAL_CHUNK)?;
        let scale = feature_scale(cfg, &raw)?;
        let teacher_feat = raw.map(|v| v * scale);
        let state = init_state(cfg, teacher, scale)?;
        let (train_idx, val_idx) = if cfg.mode == Mode::Sokd && cfg.schedule.search_epochs > 0 {
            train.split_indices(cfg.schedule.val_fraction, &mut root.child(SPLIT))?
        } else {
            ((0..train.len()).collect(), Vec::new())
        };
        let mut s = Self {
            cfg,
            teacher,
            train,
            test,
            teacher_feat,
            root,
            train_idx,
            val_idx,
            state,
            metrics: Vec::new(),
            areas: Vec::new(),
        };
        s.log_test()?;
        s.log_areas()?;
        Ok(s)
    }

    fn log_test(&mut self) -> Result<()> {
        let (ce, acc) = test_metrics(&self.state.nets.student, self.test)?;
        self.metrics.push(MetricRow {
            epoch: self.state.epoch,
            split: "test".into(),
            task_loss: Some(ce),
            ld_loss: None,
            lda_loss: None,
            aug_loss: None,
            top1: Some(acc),
        });
        Ok(())
    }

    /// Decoded areas of the probe test images under the current head.
    pub fn probe_areas(&self) -> Result<Vec<Vec<DistinctiveArea>>> {
        let n = self.cfg.dam.probe_images.min(self.test.len());
        if n == 0 {
            return Ok(Vec::new());
        }
        let idx: Vec<usize> = (0..n).collect();
        let (x, _) = self.test.batch(&idx)?;
        let feat = match self.cfg.dam.decode_from {
            DecodePath::Student => self.state.nets.aligned_feature(&x)?,
            DecodePath::Teacher => {
                let s = self.state.nets.feature_scale;
                self.teacher.forward(&x)?.0.map(|v| v * s)
            }
        };
        dam::decode_batch(&self.state.nets.head.forward(&feat)?, self.cfg.dam.max_areas)
    }

    fn log_areas(&mut self) -> Result<()> {
        if self.cfg.mode != Mode::Sokd {
            return Ok(());
        }
        let epoch = self.state.epoch;
        for (i, list) in self.probe_areas()?.into_iter().enumerate() {
            for (r, a) in list.into_iter().enumerate() {
                self.areas.push(AreaRow {
                    epoch,
                    image_index: i,
                    area_rank: r,
                    center_x: a.center_x,
                    center_y: a.center_y,
                    width: a.width,
                    height: a.height,
                    score: a.score,
                });
            }
        }
        Ok(())
    }

    fn batch_indices(&self, pool: &[usize], stream: u64, epoch: usize) -> Vec<usize> {
        self.root
            .child(stream)
            .child(epoch as u64)
            .permutation(pool.len())
            .into_iter()
            .map(|i| pool[i])
            .collect()
    }

    /// One epoch. With `policy` set, teacher features are mixed with the
    /// frozen relaxed policy and an outer step follows every inner step;
    /// otherwise `discrete` (if any) augments the teacher feature.
    fn epoch(&mut self, search: bool, discrete: Option<&DiscretePolicy>) -> Result<()> {
        let cfg = self.cfg;
        let e0 = self.state.epoch;
        let epoch = e0 + 1;
        let lr = staged_lr(cfg.schedule.lr, e0, cfg.schedule.epochs);
        let bs = cfg.schedule.batch_size;
        if search {
            self.state.policy.tau = cfg.policy.tau_at(e0);
        }
        let pool = if search { self.train_idx.clone() } else { (0..self.train.len()).collect() };
        let order = self.batch_indices(&pool, SHUFFLE, epoch);
        let val_order = if search { self.batch_indices(&self.val_idx, VAL_SHUFFLE, epoch) } else { Vec::new() };
        let trainable = Trainable {
            alpha: cfg.policy.learn_alpha,
            beta: cfg.policy.learn_beta,
            m: cfg.policy.learn_magnitude,
        };
        let (mut task, mut ld, mut lda, mut aug) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(bs).enumerate() {
            let (x, y) = self.train.batch(chunk)?;
            let ft = self.teacher_feat.gather_outer(chunk)?;
            let noise_rng = self.root.child(INNER_NOISE).child(epoch as u64).child(b as u64);
            let ft_aug = match (cfg.mode, search, discrete) {
                (Mode::Baseline, _, _) => ft,
                (Mode::Sokd, true, _) => dafa::mix_subpolicies(&self.state.policy, &ft, &noise_rng, cfg.policy.mix)?,
                (Mode::Sokd, false, Some(d)) => d.apply(&ft, &noise_rng)?,
                (Mode::Sokd, false, None) => ft,
            };
            let rec = inner_step(&mut self.state, cfg, &x, &y, &ft_aug, lr)
                .map_err(|e| annotate(e, epoch, b))?;
            task.push(rec.task);
            if let Some(v) = rec.ld {
                ld.push(v);
            }
            lda.push(rec.lda);
            correct += rec.correct;
            if search {
                let vb: Vec<usize> = (0..bs.min(val_order.len()))
                    .map(|i| val_order[(b * bs + i) % val_order.len()])
                    .collect();
                let (xv, _) = self.train.batch(&vb)?;
                let ftv = self.teacher_feat.gather_outer(&vb)?;
                let phi = self.state.nets.aligned_feature(&xv)?;
                let noise = MixNoise::sample(
                    &self.state.policy,
                    ftv.dims(),
                    &self.root.child(OUTER_NOISE).child(epoch as u64).child(b as u64),
                );
                let l = outer_step(
                    &mut self.state.policy,
                    &ftv,
                    &phi,
                    &noise,
                    cfg.policy.mix,
                    trainable,
                    cfg.schedule.outer_lr,
                )
                .map_err(|e| annotate(e, epoch, b))?;
                aug.push(l);
            }
        }
        self.state.epoch = epoch;
        self.metrics.push(MetricRow {
            epoch,
            split: "train".into(),
            task_loss: mean(&task),
            ld_loss: mean(&ld),
            lda_loss: mean(&lda),
            aug_loss: mean(&aug),
            top1: Some(correct as f32 / order.len() as f32),
        });
        self.log_test()?;
        self.log_areas()
    }

    /// Search phase: `search_epochs` epochs of alternating inner and outer
    /// steps. Returns the learned relaxed policy.
    pub fn run_search(&mut self) -> Result<AugPolicy> {
        if self.cfg.mode != Mode::Sokd {
            return Err(Error::Config("search requires mode sokd".into()));
        }
        if self.cfg.schedule.search_epochs > 0 && (self.train_idx.is_empty() || self.val_idx.is_empty()) {
            return Err(Error::EmptyDataset);
        }
        for _ in 0..self.cfg.schedule.search_epochs {
            self.epoch(true, None)?;
        }
        Ok(self.state.policy.clone())
    }

    /// Distillation for the remaining epochs with the frozen discrete policy.
    /// Returns the final test top-1.
    pub fn run_distill(&mut self, policy: Option<&DiscretePolicy>) -> Result<f32> {
        while self.state.epoch < self.cfg.schedule.epochs {
            self.epoch(false, policy)?;
        }
        test_metrics(&self.state.nets.student, self.test).map(|(_, a)| a)
    }

    /// KS statistics between teacher test-feature elements before and after
    /// the noise-only reference policy and the learned discrete policy.
    pub fn ks_report(&self, learned: Option<&DiscretePolicy>) -> Result<Vec<KsRow>> {
        let s = self.state.nets.feature_scale;
        let feat = self.teacher.forward_all(self.test.images(), EVAL_CHUNK)?.0.map(|v| v * s);
        let rng = self.root.child(KS);
        let mut rows = Vec::new();
        let noise = dafa::discretize(&oracle::noise_policy(self.cfg.ks.m)?)?;
        let mut policies = vec![(format!("additive_gaussian_noise(m={})", self.cfg.ks.m), noise)];
        if let Some(d) = learned {
            policies.push(("learned".to_string(), d.clone()));
        }
        for (i, (name, p)) in policies.into_iter().enumerate() {
            let (statistic, critical) = oracle::policy_shift(&feat, &p, self.cfg.ks.sample, &rng.child(i as u64))?;
            rows.push(KsRow {
                policy: name,
                statistic,
                critical,
                below_critical: statistic < critical,
            });
        }
        Ok(rows)
    }
}

fn annotate(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

/// Everything a completed run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub nets: Nets,
    pub metrics: Vec<MetricRow>,
    pub areas: Vec<AreaRow>,
    pub policy: Option<AugPolicy>,
    pub discrete: Option<DiscretePolicy>,
    pub ks: Vec<KsRow>,
    pub final_top1: f32,
}

/// Search phase only.
pub fn run_search(cfg: &RunConfig, teacher: &Backbone, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
    let mut s = Session::new(cfg, teacher, train, test)?;
    let policy = s.run_search()?;
    let discrete = dafa::discretize(&policy)?;
    let ks = s.ks_report(Some(&discrete))?;
    let final_top1 = test_metrics(&s.state.nets.student, test)?.1;
    Ok(RunOutcome {
        nets: s.state.nets,
        metrics: s.metrics,
        areas: s.areas,
        policy: Some(policy),
        discrete: Some(discrete),
        ks,
        final_top1,
    })
}

/// Full run: search then distillation in sokd mode, plain feature
/// distillation for every epoch in baseline mode.
pub fn run_experiment(cfg: &RunConfig, teacher: &Backbone, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
    let mut s = Session::new(cfg, teacher, train, test)?;
    let (policy, discrete) = match cfg.mode {
        Mode::Sokd => {
            let p = s.run_search()?;
            let d = dafa::discretize(&p)?;
            (Some(p), Some(d))
        }
        Mode::Baseline => (None, None),
    };
    let final_top1 = s.run_distill(discrete.as_ref())?;
    let ks = if cfg.mode == Mode::Sokd { s.ks_report(discrete.as_ref())? } else { Vec::new() };
    Ok(RunOutcome {
        nets: s.state.nets,
        metrics: s.metrics,
        areas: s.areas,
        policy,
        discrete,
        ks,
        final_top1,
    })
}

/// Frozen features of the initial networks over the validation split (the
/// batch the outer steps draw from), capped at `oracle.snapshot_size` images.
pub fn validation_snapshot(cfg: &RunConfig, teacher: &Backbone, train: &Dataset) -> Result<oracle::Snapshot> {
    let scale = feature_scale(cfg, &teacher.forward_all(train.images(), EVAL_CHUNK)?.0)?;
    let state = init_state(cfg, teacher, scale)?;
    let root = Rng::new(cfg.seed, ROOT_STREAM);
    let (_, val) = train.split_indices(cfg.schedule.val_fraction, &mut root.child(SPLIT))?;
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx = &val[..val.len().min(cfg.oracle.snapshot_size)];
    let (x, _) = train.batch(idx)?;
    Ok(oracle::Snapshot {
        teacher: teacher.forward_all(&x, EVAL_CHUNK)?.0.map(|v| v * scale),
        student_aligned: state.nets.aligned_feature(&x)?,
    })
}

const ORACLE_STREAM: u64 = 0x6f72_6163;

/// Brute-force ranking of `oracle.candidates` (expanded over
/// `oracle.magnitudes`) by expected consistency loss on the validation snapshot.
pub fn policy_oracle(cfg: &RunConfig, teacher: &Backbone, train: &Dataset) -> Result<Vec<oracle::RankedPolicy>> {
    let snapshot = validation_snapshot(cfg, teacher, train)?;
    let grid = oracle::PolicyGrid {
        candidates: cfg.oracle.candidates.clone(),
        magnitudes: cfg.oracle.magnitudes.clone(),
    };
    oracle::enumerate_policies(&grid, &snapshot, cfg.policy.lambda, &Rng::new(cfg.seed, ORACLE_STREAM))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const METRICS_HEADER: [&str; 7] = ["epoch", "split", "task_loss", "ld_loss", "lda_loss", "aug_loss", "top1"];
const AREAS_HEADER: [&str; 8] = [
    "epoch",
    "image_index",
    "area_rank",
    "center_x",
    "center_y",
    "width",
    "height",
    "score",
];
const KS_HEADER: [&str; 4] = ["policy", "statistic", "critical", "below_critical"];

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    write_csv(path.as_ref(), rows, &METRICS_HEADER)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingMetrics(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?;
    Ok(rows)
}

/// Writes the run directory: config snapshot, metrics, policy documents,
/// area and KS logs, and the student checkpoint.
pub fn write_run(dir: impl AsRef<Path>, cfg: &RunConfig, out: &RunOutcome) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    put("config.json", cfg.to_json()?)?;
    write_metrics(dir.join("metrics.csv"), &out.metrics)?;
    if let Some(p) = &out.policy {
        put("policy.json", p.to_json()?)?;
    }
    if let Some(d) = &out.discrete {
        put("policy_discrete.json", serde_json::to_string_pretty(d)?)?;
    }
    if cfg.mode == Mode::Sokd {
        write_csv(&dir.join("areas.csv"), &out.areas, &AREAS_HEADER)?;
        write_csv(&dir.join("ks.csv"), &out.ks, &KS_HEADER)?;
    }
    let mut extra = vec![("adapter.weight".to_string(), out.nets.adapter.weight.clone())];
    for (n, w) in DamHead::names().into_iter().zip(&out.nets.head.weights) {
        extra.push((format!("dam.{n}"), w.clone()));
    }
    let info = BTreeMap::from([
        ("feature_scale".to_string(), out.nets.feature_scale as f64),
        ("test_top1".to_string(), out.final_top1 as f64),
    ]);
    save_checkpoint(dir.join("checkpoint"), &out.nets.student, &extra, info)
}

/// Single-operation candidates of a discrete grid, for reporting.
pub fn describe(sub: &SubPolicy) -> String {
    sub.ops
        .iter()
        .map(|o| format!("{}(beta={:.3},m={:.3})", o.kind.name(), o.beta, o.m))
        .collect::<Vec<_>>()
        .join(" -> ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dafa::{AugOp, AugOpKind, OpDraw, OpNoise, SubPolicyNoise};
    use crate::data::SyntheticSpec;
    use crate::model::ArchSpec;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data = SyntheticSpec {
            classes: 10,
            train_per_class: 4,
            test_per_class: 2,
            ..SyntheticSpec::default()
        };
        cfg.schedule.epochs = 3;
        cfg.schedule.search_epochs = 2;
        cfg.schedule.batch_size = 16;
        cfg
    }

    fn fixtures(cfg: &RunConfig) -> (Backbone, Dataset, Dataset) {
        let (train, test) = cfg.data.generate(11).unwrap();
        let teacher = build_backbone(&cfg.teacher, &mut Rng::new(99, 0)).unwrap();
        (teacher, train, test)
    }

    fn first_batch(cfg: &RunConfig, teacher: &Backbone, train: &Dataset) -> (Tensor, Vec<usize>, Tensor) {
        let idx: Vec<usize> = (0..8).collect();
        let (x, y) = train.batch(&idx).unwrap();
        let _ = cfg;
        let ft = teacher.forward(&x).unwrap().0;
        (x, y, ft)
    }

    #[test]
    fn zero_lr_keeps_weights_and_records_losses() {
        let cfg = tiny_cfg();
        let (teacher, train, _) = fixtures(&cfg);
        let mut st = init_state(&cfg, &teacher, 1.0).unwrap();
        let before = st.nets.clone();
        let (x, y, ft) = first_batch(&cfg, &teacher, &train);
        let rec = inner_step(&mut st, &cfg, &x, &y, &ft, 0.0).unwrap();
        assert_eq!(st.nets, before);
        assert!(rec.task > 0.0 && rec.ld.unwrap() >= 0.0 && rec.lda >= 0.0);
    }

    #[test]
    fn loss_decomposition() {
        for mode in [Mode::Sokd, Mode::Baseline] {
            let mut cfg = tiny_cfg();
            cfg.mode = mode;
            cfg.loss.alpha_w = 0.7;
            cfg.loss.beta_w = 1.3;
            let (teacher, train, _) = fixtures(&cfg);
            let st = init_state(&cfg, &teacher, 1.0).unwrap();
            let (x, y, ft) = first_batch(&cfg, &teacher, &train);
            let (rec, _) = inner_grads(&st.nets, &cfg, &x, &y, &ft).unwrap();
            let r = rec.recombined(&cfg);
            assert!((rec.total - r).abs() <= 1e-5 * r.abs(), "{mode:?}: {} vs {r}", rec.total);
        }
    }

    #[test]
    fn zero_weights_give_task_gradient() {
        let mut cfg = tiny_cfg();
        cfg.loss.alpha_w = 0.0;
        cfg.loss.beta_w = 0.0;
        let (teacher, train, _) = fixtures(&cfg);
        let st = init_state(&cfg, &teacher, 1.0).unwrap();
        let (x, y, ft) = first_batch(&cfg, &teacher, &train);
        let (_, grads) = inner_grads(&st.nets, &cfg, &x, &y, &ft).unwrap();
        let mut tape = Tape::new();
        let sv = st.nets.student.record(&mut tape, true);
        let xv = tape.constant(x);
        let out = st.nets.student.forward_on_tape(&mut tape, &sv, xv).unwrap();
        let ce = tape.cross_entropy(out.logits, &y).unwrap();
        let g = tape.backward(ce).unwrap();
        for (i, v) in sv.iter().enumerate() {
            assert_eq!(g.get(*v).unwrap(), &grads[i], "student param {i}");
        }
        for t in &grads[sv.len()..] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn phase_separation() {
        let cfg = tiny_cfg();
        let (teacher, train, _) = fixtures(&cfg);
        let mut st = init_state(&cfg, &teacher, 1.0).unwrap();
        let (x, y, ft) = first_batch(&cfg, &teacher, &train);
        let policy = st.policy.clone();
        let nets = st.nets.clone();
        inner_step(&mut st, &cfg, &x, &y, &ft, 0.05).unwrap();
        assert_eq!(st.policy, policy);
        assert_ne!(st.nets, nets);
        let nets = st.nets.clone();
        let phi = st.nets.aligned_feature(&x).unwrap();
        let noise = MixNoise::sample(&st.policy, ft.dims(), &Rng::new(1, 1));
        outer_step(&mut st.policy, &ft, &phi, &noise, MixMode::Soft, Trainable::ALL, 0.5).unwrap();
        assert_eq!(st.nets, nets);
        assert_ne!(st.policy, policy);
    }

    #[test]
    fn outer_zero_lr_and_identity_examples() {
        let ft = Tensor::new(vec![2, 2, 2, 2], (0..16).map(|i| i as f32 * 0.1).collect()).unwrap();
        let phi = ft.map(|v| v + 0.3);
        let mut p = AugPolicy::uniform_init(
            &[vec![AugOpKind::UniformScale], vec![AugOpKind::AdditiveGaussianNoise]],
            0.5,
            0.1,
            1.0,
            0.5,
        )
        .unwrap();
        let before = p.clone();
        let noise = MixNoise::sample(&p, ft.dims(), &Rng::new(2, 0));
        outer_step(&mut p, &ft, &phi, &noise, MixMode::Soft, Trainable::ALL, 0.0).unwrap();
        assert_eq!(p, before);

        let id = AugPolicy::uniform_init(&[vec![AugOpKind::Identity]], 0.5, 0.1, 1.0, 0.5).unwrap();
        let noise = MixNoise::sample(&id, ft.dims(), &Rng::new(2, 0));
        let (_, g) = outer_grads(&id, &ft, &phi, &noise, MixMode::Soft, Trainable::ALL).unwrap();
        assert_eq!(g.alpha, vec![0.0]);
    }

    #[test]
    fn outer_step_shrinks_noise_magnitude() {
        let ft = Tensor::new(vec![2, 3, 2, 2], (0..24).map(|i| ((i * 7) % 5) as f32 - 2.0).collect()).unwrap();
        let policy = AugPolicy {
            alpha: vec![0.0],
            tau: 1.0,
            lambda: 0.5,
            subpolicies: vec![SubPolicy {
                ops: vec![AugOp {
                    kind: AugOpKind::AdditiveGaussianNoise,
                    beta: 0.999,
                    m: 0.1,
                }],
            }],
        };
        let xi: Vec<f32> = (0..24).map(|i| if i % 2 == 0 { 1.0 } else { -0.8 }).collect();
        let noise = MixNoise {
            gumbel: vec![0.0],
            subs: vec![SubPolicyNoise {
                ops: vec![OpNoise {
                    gate_u: vec![1.0 - 1e-9; 2],
                    draw: OpDraw::Noise(xi),
                }],
            }],
        };
        // Teacher feature equals the aligned student feature.
        let (_, g) = outer_grads(&policy, &ft, &ft, &noise, MixMode::Soft, Trainable::ALL).unwrap();
        assert!(g.ops[0][0].1 > 0.0);
        let fd = oracle::finite_diff_grad(
            |m| {
                let mut p = policy.clone();
                p.subpolicies[0].ops[0].m = m.data()[0];
                let aug = dafa::mix_subpolicies_with(&p, &ft, &noise, MixMode::Soft)?;
                Ok(dafa::consistency_loss(&aug, &ft)? as f64)
            },
            &Tensor::scalar(0.1),
            1e-3,
        )
        .unwrap();
        assert!(fd.data()[0] > 0.0);
        let mut p = policy.clone();
        outer_step(&mut p, &ft, &ft, &noise, MixMode::Soft, Trainable::ALL, 0.05).unwrap();
        assert!(p.subpolicies[0].ops[0].m < 0.1);
    }

    #[test]
    fn teacher_initialized_baseline_starts_at_zero_feature_loss() {
        let mut cfg = tiny_cfg();
        cfg.mode = Mode::Baseline;
        cfg.student = ArchSpec::teacher_default();
        let (teacher, train, _) = fixtures(&cfg);
        let mut st = init_state(&cfg, &teacher, 1.0).unwrap();
        st.nets.student = teacher.clone();
        let (x, y, ft) = first_batch(&cfg, &teacher, &train);
        let (rec, _) = inner_grads(&st.nets, &cfg, &x, &y, &ft).unwrap();
        assert_eq!(rec.lda, 0.0);
    }

    #[test]
    fn search_zero_epochs_returns_initial_policy() {
        let mut cfg = tiny_cfg();
        cfg.schedule.search_epochs = 0;
        let (teacher, train, test) = fixtures(&cfg);
        let init = init_state(&cfg, &teacher, 1.0).unwrap().policy;
        let out = run_search(&cfg, &teacher, &train, &test).unwrap();
        assert_eq!(out.policy.unwrap(), init);
    }

    #[test]
    fn explicit_certain_ops_are_searchable() {
        let mut cfg = tiny_cfg();
        cfg.policy.explicit = Some(cfg.oracle.candidates.clone());
        let (teacher, train, test) = fixtures(&cfg);
        let out = run_search(&cfg, &teacher, &train, &test).unwrap();
        let policy = out.policy.unwrap();
        assert!(policy.subpolicies.iter().flat_map(|s| &s.ops).all(|op| op.beta < 1.0));
    }

    #[test]
    fn zero_epoch_distill_is_evaluation_only() {
        let mut cfg = tiny_cfg();
        cfg.schedule.epochs = 0;
        cfg.schedule.search_epochs = 0;
        let (teacher, train, test) = fixtures(&cfg);
        let init = init_state(&cfg, &teacher, 1.0).unwrap();
        let out = run_experiment(&cfg, &teacher, &train, &test).unwrap();
        assert_eq!(out.nets.student, init.nets.student);
        assert_eq!(out.nets.adapter, init.nets.adapter);
        assert_eq!(out.nets.head, init.nets.head);
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.metrics[0].split, "test");
    }

    #[test]
    fn full_run_is_deterministic_and_leaves_teacher_alone() {
        let cfg = tiny_cfg();
        let (teacher, train, test) = fixtures(&cfg);
        let snapshot = teacher.clone();
        let a = run_experiment(&cfg, &teacher, &train, &test).unwrap();
        let b = run_experiment(&cfg, &teacher, &train, &test).unwrap();
        assert_eq!(teacher, snapshot);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.policy.as_ref().unwrap().to_json().unwrap(), b.policy.unwrap().to_json().unwrap());
        assert_eq!(a.nets, b.nets);
        let train_rows = a.metrics.iter().filter(|r| r.split == "train").count();
        assert_eq!(train_rows, 3);
        let aug_rows = a.metrics.iter().filter(|r| r.aug_loss.is_some()).count();
        assert_eq!(aug_rows, 2);
        assert!(!a.areas.is_empty());
        assert_eq!(a.ks.len(), 2);
    }

    #[test]
    fn baseline_and_sokd_share_student_init() {
        let mut cfg = tiny_cfg();
        let (teacher, _, _) = fixtures(&cfg);
        let s = init_state(&cfg, &teacher, 1.0).unwrap();
        cfg.mode = Mode::Baseline;
        let b = init_state(&cfg, &teacher, 1.0).unwrap();
        assert_eq!(s.nets.student, b.nets.student);
    }

    #[test]
    fn empty_validation_split_is_an_error() {
        let mut cfg = tiny_cfg();
        cfg.schedule.val_fraction = 0.0;
        let (teacher, train, test) = fixtures(&cfg);
        assert!(matches!(run_search(&cfg, &teacher, &train, &test), Err(Error::EmptyDataset)));
    }

    #[test]
    fn run_directory_contents() {
        let cfg = tiny_cfg();
        let (teacher, train, test) = fixtures(&cfg);
        let out = run_experiment(&cfg, &teacher, &train, &test).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &cfg, &out).unwrap();
        for f in ["config.json", "metrics.csv", "policy.json", "policy_discrete.json", "areas.csv", "ks.csv"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(text.starts_with("epoch,split,task_loss,ld_loss,lda_loss,aug_loss,top1\n"));
        assert_eq!(read_metrics(dir.path().join("metrics.csv")).unwrap(), out.metrics);
        let back = crate::checkpoint::load_backbone(dir.path().join("checkpoint")).unwrap();
        assert_eq!(back, out.nets.student);
        let cfg_back = RunConfig::load(dir.path().join("config.json")).unwrap();
        assert_eq!(cfg_back, cfg);
    }
}
