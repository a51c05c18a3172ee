//! Independent checks: finite differences, exhaustive policy ranking,
//! sampling-law frequencies and the two-sample Kolmogorov-Smirnov statistic.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::dafa::{
    self, AugOp, AugOpKind, AugPolicy, DiscretePolicy, GateMode, MixMode, MixNoise, PolicyVars, SubPolicy,
    SubPolicyNoise,
};
use crate::error::{Error, Result};
use crate::rng::{gumbel_from_uniform, Rng};
use crate::tensor::{self, Padding, Tensor};

pub const MAX_GRID: usize = 10_000;
pub const ENUM_DRAWS: usize = 16;

/// Central differences `(f(x + εeᵢ) − f(x − εeᵢ)) / (x⁺ᵢ − x⁻ᵢ)`, dividing by
/// the perturbation actually representable in `f32`. `f` must replay the same
/// noise on every call.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, eps: f32) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.data().to_vec();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let x0 = probe[i];
        let (hi, lo) = (x0 + eps, x0 - eps);
        probe[i] = hi;
        let fp = f(&Tensor::new(x.dims().to_vec(), probe.clone())?)?;
        probe[i] = lo;
        let fm = f(&Tensor::new(x.dims().to_vec(), probe.clone())?)?;
        probe[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push(((fp - fm) / (hi as f64 - lo as f64)) as f32);
    }
    Tensor::new(x.dims().to_vec(), grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    tensor::ensure_same_dims("relative error", a, b)?;
    let norm = |t: &Tensor| t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

/// A graph builder: records a scalar loss from the given parameter leaves.
pub type GraphFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub graph: String,
    pub seed: u64,
    pub params: usize,
    pub max_rel_err: f64,
}

/// Compares reverse-mode gradients against central differences, returning
/// the norm-relative error over the concatenation of all parameter gradients.
pub fn check_graph(build: &GraphFn, params: &[Tensor], eps: f32) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let (mut ad_all, mut fd_all) = (Vec::new(), Vec::new());
    for (i, p) in params.iter().enumerate() {
        let ad = grads.get(vars[i]).expect("every parameter has a gradient");
        let fd = finite_diff_grad(
            |x| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = params
                    .iter()
                    .enumerate()
                    .map(|(j, q)| tape.constant(if j == i { x.clone() } else { q.clone() }))
                    .collect();
                let loss = build(&mut tape, &vars)?;
                Ok(tape.value(loss).item()? as f64)
            },
            p,
            eps,
        )?;
        ad_all.extend_from_slice(ad.data());
        fd_all.extend_from_slice(fd.data());
    }
    relative_error(&Tensor::from_vec(ad_all)?, &Tensor::from_vec(fd_all)?)
}

fn uniform(rng: &mut Rng, dims: &[usize], lo: f32, hi: f32) -> Result<Tensor> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| lo + (hi - lo) * rng.uniform_f32()).collect())
}

/// Uniform on `[-2, 2]` but at least `gap` away from zero.
fn away_from_zero(rng: &mut Rng, dims: &[usize], gap: f32) -> Result<Tensor> {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = gap + (2.0 - gap) * rng.uniform_f32();
            if rng.bernoulli(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(dims.to_vec(), data)
}

/// Values on `[-2, 2]` whose 2×2 pooling windows have a unique maximum by a margin.
fn pool_friendly(rng: &mut Rng, dims: &[usize]) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let mut data: Vec<f32> = (0..n).map(|_| -2.0 + 3.0 * rng.uniform_f32()).collect();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    for plane in data.chunks_mut(h * w) {
        for r in (0..h).step_by(2) {
            for c in (0..w).step_by(2) {
                let pick = rng.below(4);
                let idx = (r + pick / 2) * w + c + pick % 2;
                plane[idx] = 1.1 + 0.9 * rng.uniform_f32();
            }
        }
    }
    Tensor::new(dims.to_vec(), data)
}

struct Template {
    name: &'static str,
    make: fn(&mut Rng) -> Result<(Vec<Tensor>, Box<GraphFn>)>,
}

fn templates() -> Vec<Template> {
    vec![
        Template {
            name: "arithmetic",
            make: |rng| {
                let d = [2 + rng.below(3), 3];
                let params = vec![uniform(rng, &d, -2.0, 2.0)?, uniform(rng, &d, -2.0, 2.0)?];
                let f: Box<GraphFn> = Box::new(|t, v| {
                    let s = t.add(v[0], v[1])?;
                    let hb = t.scale(v[1], 0.5);
                    let d = t.sub(v[0], hb)?;
                    let p = t.mul(s, d)?;
                    let q = t.square(v[0]);
                    let q = t.add_scalar(q, 0.25);
                    let e = t.scale(v[1], 0.3);
                    let e = t.exp(e);
                    let a = t.add(p, q)?;
                    let a = t.add(a, e)?;
                    Ok(t.sum(a))
                });
                Ok((params, f))
            },
        },
        Template {
            name: "activations",
            make: |rng| {
                let d = [3, 2 + rng.below(3)];
                let params = vec![away_from_zero(rng, &d, 0.05)?, uniform(rng, &d, -2.0, 2.0)?];
                let w = uniform(rng, &d, -1.0, 1.0)?;
                let f: Box<GraphFn> = Box::new(move |t, v| {
                    let r = t.relu(v[0]);
                    let s = t.sigmoid(v[1]);
                    let l = t.logit(s)?;
                    let m = t.mul(r, s)?;
                    let a = t.add(m, l)?;
                    t.weighted_sum(a, w.clone())
                });
                Ok((params, f))
            },
        },
        Template {
            name: "matmul",
            make: |rng| {
                let (m, k, n) = (2 + rng.below(3), 2 + rng.below(3), 1 + rng.below(3));
                let params = vec![uniform(rng, &[m, k], -2.0, 2.0)?, uniform(rng, &[k, n], -2.0, 2.0)?];
                let f: Box<GraphFn> = Box::new(|t, v| {
                    let p = t.matmul(v[0], v[1])?;
                    let q = t.square(p);
                    let q = t.scale(q, 0.1);
                    Ok(t.sum(q))
                });
                Ok((params, f))
            },
        },
        Template {
            name: "conv_same",
            make: |rng| {
                let (c, k) = (1 + rng.below(2), 1 + rng.below(3));
                let params = vec![
                    uniform(rng, &[2, c, 4, 4], -2.0, 2.0)?,
                    uniform(rng, &[k, c, 3, 3], -0.5, 0.5)?,
                    uniform(rng, &[1, c, 3, 3], -0.5, 0.5)?,
                    uniform(rng, &[k + 1], -0.5, 0.5)?,
                ];
                let w = uniform(rng, &[2, k, 4, 4], -1.0, 1.0)?;
                let f: Box<GraphFn> = Box::new(move |t, v| {
                    let kernel = t.concat_outer(&[v[1], v[2]])?;
                    let y = t.conv2d(v[0], kernel, Padding::Same)?;
                    let y = t.channel_bias(y, v[3])?;
                    let y = t.sigmoid(y);
                    let k = w.dims()[1];
                    let y = t.slice_channels(y, 1, k)?;
                    t.weighted_sum(y, w.clone())
                });
                Ok((params, f))
            },
        },
        Template {
            name: "conv_valid",
            make: |rng| {
                let c = 1 + rng.below(2);
                let params = vec![
                    uniform(rng, &[c, 5, 4], -2.0, 2.0)?,
                    uniform(rng, &[2, c, 3, 3], -0.5, 0.5)?,
                ];
                let f: Box<GraphFn> = Box::new(|t, v| {
                    let y = t.conv2d(v[0], v[1], Padding::Valid)?;
                    let y = t.square(y);
                    Ok(t.mean(y))
                });
                Ok((params, f))
            },
        },
        Template {
            name: "pooling",
            make: |rng| {
                let c = 1 + rng.below(3);
                let params = vec![pool_friendly(rng, &[2, c, 4, 4])?];
                let w = uniform(rng, &[2, c, 2, 2], -1.0, 1.0)?;
                let f: Box<GraphFn> = Box::new(move |t, v| {
                    let p = t.max_pool2(v[0])?;
                    let s = t.weighted_sum(p, w.clone())?;
                    let g = t.global_avg_pool(v[0])?;
                    let g = t.square(g);
                    let g = t.sum(g);
                    t.add(s, g)
                });
                Ok((params, f))
            },
        },
        Template {
            name: "classifier",
            make: |rng| {
                let n = 2 + rng.below(3);
                let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
                let params = vec![uniform(rng, &[n, 2, 2, 2], -2.0, 2.0)?, uniform(rng, &[2, 3], -2.0, 2.0)?];
                let f: Box<GraphFn> = Box::new(move |t, v| {
                    let g = t.global_avg_pool(v[0])?;
                    let g = t.reshape(g, &[labels.len(), 2])?;
                    let z = t.matmul(g, v[1])?;
                    t.cross_entropy(z, &labels)
                });
                Ok((params, f))
            },
        },
        Template {
            name: "softmax_select",
            make: |rng| {
                let n = 2 + rng.below(4);
                let tau = 0.5 + rng.uniform_f32();
                let params = vec![uniform(rng, &[n], -2.0, 2.0)?, uniform(rng, &[n, 3], -2.0, 2.0)?];
                let f: Box<GraphFn> = Box::new(move |t, v| {
                    let p = t.softmax(v[0], tau)?;
                    let rows = t.row_scale(v[1], p)?;
                    let first = t.select(p, 0)?;
                    let all = t.row_scale(rows, first)?;
                    let a = t.mse(all, v[1])?;
                    let b = t.mean(rows);
                    t.add(a, b)
                });
                Ok((params, f))
            },
        },
        Template {
            name: "relaxed_bernoulli",
            make: |rng| {
                // Noise only leads: its scale is detached, so it must see a β-independent input.
                let ops = [AugOpKind::AdditiveGaussianNoise, AugOpKind::UniformScale, AugOpKind::ChannelScale];
                let sub = SubPolicy {
                    ops: (0..2)
                        .map(|j| AugOp {
                            kind: ops[j + rng.below(2)],
                            beta: 0.0,
                            m: 0.2 + 0.6 * rng.uniform_f32(),
                        })
                        .collect(),
                };
                let dims = [2, 3, 2, 2];
                let feat = uniform(rng, &dims, -2.0, 2.0)?;
                let noise = SubPolicyNoise::sample(&sub, &dims, &rng.child(7));
                let lambda = 0.5 + rng.uniform_f32();
                let params = vec![uniform(rng, &[1], 0.2, 0.8)?, uniform(rng, &[1], 0.2, 0.8)?];
                let w = uniform(rng, &dims, -1.0, 1.0)?;
                let f: Box<GraphFn> = Box::new(move |t, v| {
                    let x = t.constant(feat.clone());
                    let vars: Vec<(Var, Var)> = sub
                        .ops
                        .iter()
                        .zip(v)
                        .map(|(op, &b)| (b, t.constant(Tensor::scalar(op.m))))
                        .collect();
                    let y = dafa::subpolicy_on_tape(t, &sub, &vars, x, lambda, &noise, GateMode::Relaxed)?;
                    t.weighted_sum(y, w.clone())
                });
                Ok((params, f))
            },
        },
        Template {
            name: "soft_mixture",
            make: |rng| {
                let p = 2 + rng.below(2);
                let kinds: Vec<Vec<AugOpKind>> = (0..p)
                    .map(|s| match s {
                        0 => vec![AugOpKind::UniformScale],
                        1 => vec![AugOpKind::FeatureMask, AugOpKind::ChannelScale],
                        _ => vec![AugOpKind::AdditiveGaussianNoise],
                    })
                    .collect();
                let mut policy = AugPolicy::uniform_init(&kinds, 0.5, 0.5, 0.5 + rng.uniform_f32(), 0.7)?;
                for op in policy.subpolicies.iter_mut().flat_map(|s| s.ops.iter_mut()) {
                    op.m = 0.2 + 0.6 * rng.uniform_f32();
                }
                let dims = [2, 2, 2, 2];
                let feat = uniform(rng, &dims, -2.0, 2.0)?;
                let noise = MixNoise::sample(&policy, &dims, &rng.child(11));
                let n_beta = policy.subpolicies.iter().map(|s| s.ops.len()).sum::<usize>();
                let mut params = vec![uniform(rng, &[p], -1.0, 1.0)?];
                for _ in 0..n_beta {
                    params.push(uniform(rng, &[1], 0.2, 0.8)?);
                }
                // Correlating the read-out with the feature keeps sub-policy losses well separated.
                let w = feat.clone();
                let f: Box<GraphFn> = Box::new(move |t, v| {
                    let x = t.constant(feat.clone());
                    let mut betas = v[1..].iter();
                    let ops = policy
                        .subpolicies
                        .iter()
                        .map(|s| {
                            s.ops
                                .iter()
                                .map(|op| (*betas.next().expect("one beta per op"), t.constant(Tensor::scalar(op.m))))
                                .collect()
                        })
                        .collect();
                    let vars = PolicyVars { alpha: v[0], ops };
                    let y = dafa::mix_on_tape(t, &policy, &vars, x, &noise, MixMode::Soft)?;
                    t.weighted_sum(y, w.clone())
                });
                Ok((params, f))
            },
        },
    ]
}

pub const GRAD_CHECK_TEMPLATES: usize = 10;

/// Runs `graphs` seeded random graphs, cycling through templates that
/// together cover every differentiable primitive plus the relaxed gate and
/// soft-mixture paths.
pub fn grad_check_suite(seed: u64, graphs: usize, eps: f32) -> Result<Vec<GradCheck>> {
    let all = templates();
    let mut out = Vec::with_capacity(graphs);
    for g in 0..graphs {
        let tpl = &all[g % all.len()];
        let mut rng = Rng::new(seed, 0x6772_6164).child(g as u64);
        let (params, build) = (tpl.make)(&mut rng)?;
        let err = check_graph(build.as_ref(), &params, eps)?;
        out.push(GradCheck {
            graph: tpl.name.to_string(),
            seed: g as u64,
            params: params.len(),
            max_rel_err: err,
        });
    }
    Ok(out)
}

/// Candidate sub-policies, optionally expanded over a magnitude grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrid {
    pub candidates: Vec<SubPolicy>,
    /// When set, every operation of every candidate takes each listed magnitude.
    pub magnitudes: Option<Vec<f32>>,
}

impl PolicyGrid {
    pub fn size(&self) -> usize {
        match &self.magnitudes {
            None => self.candidates.len(),
            Some(ms) => self
                .candidates
                .iter()
                .map(|c| ms.len().saturating_pow(c.ops.len() as u32))
                .fold(0usize, |a, b| a.saturating_add(b)),
        }
    }

    pub fn expand(&self) -> Result<Vec<SubPolicy>> {
        let size = self.size();
        if size == 0 {
            return Err(Error::EmptyGrid);
        }
        if size > MAX_GRID {
            return Err(Error::OversizedGrid(size));
        }
        let Some(ms) = &self.magnitudes else {
            return Ok(self.candidates.clone());
        };
        let mut out = Vec::with_capacity(size);
        for cand in &self.candidates {
            let k = cand.ops.len();
            for code in 0..ms.len().pow(k as u32) {
                let mut c = cand.clone();
                let mut rest = code;
                for op in c.ops.iter_mut().rev() {
                    op.m = ms[rest % ms.len()];
                    rest /= ms.len();
                }
                out.push(c);
            }
        }
        Ok(out)
    }
}

/// Frozen features for policy evaluation: the teacher feature batch and the
/// aligned student feature batch.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub teacher: Tensor,
    pub student_aligned: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedPolicy {
    pub candidate: SubPolicy,
    pub l_aug: f64,
}

/// Expected consistency loss of every candidate under hard gating, averaged
/// over [`ENUM_DRAWS`] noise draws shared by all candidates; sorted ascending,
/// ties kept in enumeration order.
pub fn enumerate_policies(grid: &PolicyGrid, snapshot: &Snapshot, lambda: f32, rng: &Rng) -> Result<Vec<RankedPolicy>> {
    let cands = grid.expand()?;
    if snapshot.teacher.numel() == 0 {
        return Err(Error::EmptyDataset);
    }
    tensor::ensure_same_dims("enumerate_policies", &snapshot.teacher, &snapshot.student_aligned)?;
    let mut ranked = Vec::with_capacity(cands.len());
    for cand in cands {
        let mut total = 0.0f64;
        for d in 0..ENUM_DRAWS {
            let noise = SubPolicyNoise::sample(&cand, snapshot.teacher.dims(), &rng.child(d as u64));
            let aug = dafa::apply_subpolicy_with(&cand, &snapshot.teacher, lambda, &noise, GateMode::Hard)?;
            total += dafa::consistency_loss(&aug, &snapshot.student_aligned)? as f64;
        }
        ranked.push(RankedPolicy {
            candidate: cand,
            l_aug: total / ENUM_DRAWS as f64,
        });
    }
    ranked.sort_by(|a, b| a.l_aug.total_cmp(&b.l_aug));
    Ok(ranked)
}

/// L1 distance between the empirical frequencies of `argmax softmax((α + g)/τ)`
/// over `n` draws and `softmax(α)`.
pub fn gumbel_frequency_test(alpha: &[f32], tau: f32, n: usize, rng: &mut Rng) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let target = tensor::softmax_temp(alpha, 1.0)?;
    let mut counts = vec![0usize; alpha.len()];
    let mut z = vec![0.0f32; alpha.len()];
    for _ in 0..n {
        for (zi, &a) in z.iter_mut().zip(alpha) {
            *zi = a + gumbel_from_uniform(rng.uniform_open());
        }
        let w = tensor::softmax_temp(&z, tau)?;
        counts[dafa::argmax_first(&w)] += 1;
    }
    Ok(counts
        .iter()
        .zip(&target)
        .map(|(&c, &p)| (c as f64 / n as f64 - p as f64).abs())
        .sum())
}

/// Fraction of `n` relaxed-Bernoulli draws with `b > 0.5`.
pub fn bernoulli_threshold_frequency(beta: f32, lambda: f32, n: usize, rng: &mut Rng) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let hits = (0..n)
        .filter(|_| dafa::relaxed_gate(beta, rng.uniform_open(), lambda) > 0.5)
        .count();
    Ok(hits as f64 / n as f64)
}

/// `sup_x |F_a(x) − F_b(x)|` over the pooled sample.
pub fn ks_two_sample(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("KS test needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("KS sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f32::total_cmp);
    b.sort_by(f32::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Asymptotic 5% critical value `1.358·√((n + m)/(n·m))`.
pub fn ks_critical_value(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    1.358 * ((n + m) / (n * m)).sqrt()
}

/// Noise-only policy used for the distribution-preservation check: one
/// sub-policy with a single certain additive-noise operation at magnitude `m`.
pub fn noise_policy(m: f32) -> Result<AugPolicy> {
    let mut p = AugPolicy::uniform_init(&[vec![AugOpKind::AdditiveGaussianNoise]], 1.0 - dafa::BETA_MIN, m, 1.0, 0.5)?;
    p.subpolicies[0].ops[0].beta = 1.0;
    Ok(p)
}

/// KS statistic and 5% critical value between `sample` elements of `feat`
/// before and after the hard-gated noise-only policy.
pub fn distribution_shift(feat: &Tensor, m: f32, sample: usize, rng: &Rng) -> Result<(f64, f64)> {
    policy_shift(feat, &dafa::discretize(&noise_policy(m)?)?, sample, rng)
}

/// KS statistic and 5% critical value between paired element samples of
/// `feat` before and after applying `policy`.
pub fn policy_shift(feat: &Tensor, policy: &DiscretePolicy, sample: usize, rng: &Rng) -> Result<(f64, f64)> {
    let post = policy.apply(feat, &rng.child(0))?;
    let n = feat.numel();
    let take = sample.min(n);
    let idx: Vec<usize> = rng.child(1).permutation(n)[..take].to_vec();
    let before: Vec<f32> = idx.iter().map(|&i| feat.data()[i]).collect();
    let after: Vec<f32> = idx.iter().map(|&i| post.data()[i]).collect();
    Ok((ks_two_sample(&before, &after)?, ks_critical_value(take, take)))
}
