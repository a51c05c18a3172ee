//! Distinctive-area module: a shared three-branch head (heatmap, size,
//! offset), its alignment loss, peak decoding into boxes, and the
//! area-masked feature loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, Padding, Tensor};

pub const BRANCH_OUT: [usize; 3] = [1, 2, 2];

/// One weight set used for both the student and the teacher path. Per branch
/// (heatmap, size, offset): a 3×3 conv `[hidden, C, 3, 3]` + bias, ReLU, then
/// a 1×1 conv `[out, hidden, 1, 1]` + bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamHead {
    pub in_channels: usize,
    pub hidden: usize,
    pub weights: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DamOutput {
    /// `[N, 1, H, W]`, values in (0, 1).
    pub heatmap: Tensor,
    /// `[N, 2, H, W]` (width, height), positive.
    pub size: Tensor,
    /// Natural log of `size`, bounded by ±[`LOG_SIZE_BOUND`].
    pub log_size: Tensor,
    /// `[N, 2, H, W]` (x, y), values in (0, 1).
    pub offset: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct DamVars {
    pub heatmap: Var,
    pub size: Var,
    pub log_size: Var,
    pub offset: Var,
}

impl DamHead {
    pub fn new(in_channels: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let mut head = Self::zeros(in_channels, hidden)?;
        for w in head.weights.iter_mut() {
            let fan_in: usize = if w.rank() == 4 { w.dims()[1..].iter().product() } else { continue };
            let bound = 1.0 / (fan_in as f32).sqrt();
            let data = (0..w.numel()).map(|_| bound * (2.0 * rng.uniform_f32() - 1.0)).collect();
            *w = Tensor::new(w.dims().to_vec(), data)?;
        }
        Ok(head)
    }

    pub fn zeros(in_channels: usize, hidden: usize) -> Result<Self> {
        if in_channels == 0 || hidden == 0 {
            return Err(Error::InvalidArch("DAM head channels must be positive".into()));
        }
        let mut weights = Vec::with_capacity(12);
        for out in BRANCH_OUT {
            weights.push(Tensor::zeros(&[hidden, in_channels, 3, 3])?);
            weights.push(Tensor::zeros(&[hidden])?);
            weights.push(Tensor::zeros(&[out, hidden, 1, 1])?);
            weights.push(Tensor::zeros(&[out])?);
        }
        Ok(Self {
            in_channels,
            hidden,
            weights,
        })
    }

    pub fn names() -> Vec<String> {
        let mut v = Vec::new();
        for b in ["heatmap", "size", "offset"] {
            for p in ["conv3.weight", "conv3.bias", "conv1.weight", "conv1.bias"] {
                v.push(format!("{b}.{p}"));
            }
        }
        v
    }

    pub fn record(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.weights
            .iter()
            .map(|w| if trainable { tape.param(w.clone()) } else { tape.constant(w.clone()) })
            .collect()
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], feat: Var) -> Result<DamVars> {
        let c = tape.value(feat).dims().get(1).copied();
        if tape.value(feat).rank() != 4 || c != Some(self.in_channels) {
            return Err(Error::ShapeMismatch {
                op: "dam forward",
                lhs: tape.value(feat).dims().to_vec(),
                rhs: vec![self.in_channels],
            });
        }
        let mut outs = Vec::with_capacity(3);
        let mut log_size = None;
        // The three 3×3 convolutions share one im2col pass.
        let kernel = tape.concat_outer(&[vars[0], vars[4], vars[8]])?;
        let bias = tape.concat_outer(&[vars[1], vars[5], vars[9]])?;
        let hidden = tape.conv2d(feat, kernel, Padding::Same)?;
        let hidden = tape.channel_bias(hidden, bias)?;
        let hidden = tape.relu(hidden);
        for b in 0..3 {
            let v = &vars[4 * b..4 * b + 4];
            let h = tape.slice_channels(hidden, b * self.hidden, self.hidden)?;
            let o = tape.conv2d(h, v[2], Padding::Same)?;
            let o = tape.channel_bias(o, v[3])?;
            outs.push(match b {
                1 => {
                    let l = bounded_log(tape, o);
                    log_size = Some(l);
                    tape.exp(l)
                }
                _ => tape.sigmoid(o),
            });
        }
        Ok(DamVars {
            heatmap: outs[0],
            size: outs[1],
            log_size: log_size.expect("size branch"),
            offset: outs[2],
        })
    }

    /// Branch outputs for `[C, H, W]` or `[N, C, H, W]` input (always batched out).
    pub fn forward(&self, feat: &Tensor) -> Result<DamOutput> {
        let feat = batched(feat)?;
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, false);
        let x = tape.constant(feat);
        let o = self.forward_on_tape(&mut tape, &vars, x)?;
        Ok(o.values(&tape))
    }
}

impl DamVars {
    pub fn values(&self, tape: &Tape) -> DamOutput {
        DamOutput {
            heatmap: tape.value(self.heatmap).clone(),
            size: tape.value(self.size).clone(),
            log_size: tape.value(self.log_size).clone(),
            offset: tape.value(self.offset).clone(),
        }
    }
}

/// Largest log-size the size branch can emit.
pub const LOG_SIZE_BOUND: f32 = 4.0;

/// `c·tanh(o/c)` with `c = LOG_SIZE_BOUND`, written as `2c·σ(2o/c) − c`;
/// the size branch emits its exponential.
fn bounded_log(tape: &mut Tape, o: Var) -> Var {
    let c = LOG_SIZE_BOUND;
    let z = tape.scale(o, 2.0 / c);
    let sg = tape.sigmoid(z);
    let t = tape.scale(sg, 2.0 * c);
    tape.add_scalar(t, -c)
}

fn batched(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        3 => {
            let mut d = vec![1];
            d.extend_from_slice(t.dims());
            t.reshape(&d)
        }
        4 => Ok(t.clone()),
        _ => Err(Error::InvalidShape {
            dims: t.dims().to_vec(),
            reason: "expected [C, H, W] or [N, C, H, W]".into(),
        }),
    }
}

pub fn dam_forward(head: &DamHead, feat: &Tensor) -> Result<DamOutput> {
    head.forward(feat)
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    tensor::ensure_same_dims("dam align", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum();
    Ok(s / a.numel() as f64)
}

/// `Σ_branches mean((student − teacher)²)`; sizes are compared in log space.
pub fn dam_align_loss(student: &DamOutput, teacher: &DamOutput) -> Result<f32> {
    let heat = mse(&student.heatmap, &teacher.heatmap)?;
    let size = mse(&student.log_size, &teacher.log_size)?;
    let offset = mse(&student.offset, &teacher.offset)?;
    Ok((heat + size + offset) as f32)
}

/// Alignment loss on the tape; the teacher-path outputs enter as constants.
pub fn align_loss_on_tape(tape: &mut Tape, student: DamVars, teacher: &DamOutput) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (s, t) in [
        (student.heatmap, &teacher.heatmap),
        (student.log_size, &teacher.log_size),
        (student.offset, &teacher.offset),
    ] {
        let tc = tape.constant(t.clone());
        let l = tape.mse(s, tc)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    Ok(total.expect("three branches"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistinctiveArea {
    pub center_x: f32,
    pub center_y: f32,
    pub width: f32,
    pub height: f32,
    pub score: f32,
}

impl DistinctiveArea {
    /// `(x0, y0, x1, y1)` clipped to `[0, w] × [0, h]`.
    pub fn clipped_box(&self, h: usize, w: usize) -> (f32, f32, f32, f32) {
        let x0 = (self.center_x - self.width / 2.0).clamp(0.0, w as f32);
        let x1 = (self.center_x + self.width / 2.0).clamp(0.0, w as f32);
        let y0 = (self.center_y - self.height / 2.0).clamp(0.0, h as f32);
        let y1 = (self.center_y + self.height / 2.0).clamp(0.0, h as f32);
        (x0, y0, x1, y1)
    }

    pub fn is_empty(&self, h: usize, w: usize) -> bool {
        let (x0, y0, x1, y1) = self.clipped_box(h, w);
        !(x1 > x0 && y1 > y0)
    }
}

fn plane(t: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let d = t.dims();
    let (c, h, w) = match *d {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        [h, w] if channels == 1 => (1, h, w),
        _ => {
            return Err(Error::InvalidShape {
                dims: d.to_vec(),
                reason: format!("expected a single {channels}-channel map"),
            })
        }
    };
    if c != channels {
        return Err(Error::InvalidShape {
            dims: d.to_vec(),
            reason: format!("expected {channels} channels"),
        });
    }
    Ok((h, w))
}

/// Smallest decoded box side, in cells. A side of one cell centred inside the
/// peak cell always covers that cell's centre.
pub const MIN_EXTENT: f32 = 1.0;

/// Local maxima (a cell at least as large as each of its up-to-8 neighbours)
/// ranked by score, then raster position; the first `n` become areas with
/// sides of at least [`MIN_EXTENT`]. Areas whose clipped box is empty are dropped.
pub fn decode_areas(heatmap: &Tensor, size: &Tensor, offset: &Tensor, n: usize) -> Result<Vec<DistinctiveArea>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one area".into()));
    }
    let (h, w) = plane(heatmap, 1)?;
    if plane(size, 2)? != (h, w) || plane(offset, 2)? != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "decode_areas",
            lhs: heatmap.dims().to_vec(),
            rhs: size.dims().to_vec(),
        });
    }
    let hm = heatmap.data();
    let mut peaks = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = hm[r * w + c];
            let mut is_peak = true;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    if hm[rr as usize * w + cc as usize] > v {
                        is_peak = false;
                    }
                }
            }
            if is_peak {
                peaks.push((r * w + c, v));
            }
        }
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (sz, off) = (size.data(), offset.data());
    let hw = h * w;
    let mut areas = Vec::new();
    for &(pos, score) in &peaks {
        if areas.len() == n {
            break;
        }
        let (r, c) = (pos / w, pos % w);
        let area = DistinctiveArea {
            center_x: c as f32 + off[pos],
            center_y: r as f32 + off[hw + pos],
            width: sz[pos].max(MIN_EXTENT),
            height: sz[hw + pos].max(MIN_EXTENT),
            score,
        };
        if !area.is_empty(h, w) {
            areas.push(area);
        }
    }
    Ok(areas)
}

/// Binary `[H, W]` mask of cells whose centre lies in the clipped box
/// (half-open on the far edges).
pub fn area_mask(area: &DistinctiveArea, h: usize, w: usize) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape {
            dims: vec![h, w],
            reason: "mask needs positive dims".into(),
        });
    }
    let (x0, y0, x1, y1) = area.clipped_box(h, w);
    let mut m = vec![0.0f32; h * w];
    for r in 0..h {
        let cy = r as f32 + 0.5;
        if cy < y0 || cy >= y1 {
            continue;
        }
        for c in 0..w {
            let cx = c as f32 + 0.5;
            if cx >= x0 && cx < x1 {
                m[r * w + c] = 1.0;
            }
        }
    }
    Tensor::new(vec![h, w], m)
}

/// Per-element weights `W` with `Σ W ⊙ (F_s − F_t)² = L_DA`: for each image,
/// each area contributes `1 / (|mask|·C)` on its masked cells across all
/// channels; the total is averaged over the batch.
pub fn lda_weights(dims: &[usize], areas: &[Vec<DistinctiveArea>]) -> Result<Tensor> {
    let [n, c, h, w] = *dims else {
        return Err(Error::InvalidShape {
            dims: dims.to_vec(),
            reason: "expected [N, C, H, W]".into(),
        });
    };
    if areas.len() != n {
        return Err(Error::InvalidArgument(format!("{} area lists for a batch of {n}", areas.len())));
    }
    let mut wts = vec![0.0f32; n * c * h * w];
    for (i, list) in areas.iter().enumerate() {
        let mut plane = vec![0.0f64; h * w];
        for a in list {
            let m = area_mask(a, h, w)?;
            let count = m.data().iter().filter(|&&v| v > 0.0).count();
            if count == 0 {
                continue;
            }
            let share = 1.0 / (count as f64 * c as f64 * n as f64);
            for (p, &mv) in plane.iter_mut().zip(m.data()) {
                if mv > 0.0 {
                    *p += share;
                }
            }
        }
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for (dst, &p) in wts[base..base + h * w].iter_mut().zip(&plane) {
                *dst = p as f32;
            }
        }
    }
    Tensor::new(dims.to_vec(), wts)
}

/// `L_DA`: per image, the sum over areas of the masked mean squared
/// difference; averaged over the batch. Accepts `[C, H, W]` (one area list)
/// or `[N, C, H, W]` (one list per image).
pub fn masked_distill_loss(f_s_aligned: &Tensor, f_t_aug: &Tensor, areas: &[Vec<DistinctiveArea>]) -> Result<f32> {
    tensor::ensure_same_dims("masked distill", f_s_aligned, f_t_aug)?;
    let fs = batched(f_s_aligned)?;
    let ft = batched(f_t_aug)?;
    let dims = fs.dims().to_vec();
    let (n, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
    if areas.len() != n {
        return Err(Error::InvalidArgument(format!("{} area lists for a batch of {n}", areas.len())));
    }
    let mut total = 0.0f64;
    for (i, list) in areas.iter().enumerate() {
        for a in list {
            let m = area_mask(a, dims[2], dims[3])?;
            let mut s = 0.0f64;
            let mut count = 0usize;
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for (p, &mv) in m.data().iter().enumerate() {
                    if mv > 0.0 {
                        s += ((fs.data()[base + p] - ft.data()[base + p]) as f64).powi(2);
                        count += 1;
                    }
                }
            }
            if count > 0 {
                total += s / count as f64;
            }
        }
    }
    Ok((total / n as f64) as f32)
}

/// `L_DA` on the tape for a batch.
pub fn masked_loss_on_tape(tape: &mut Tape, f_s_aligned: Var, f_t_aug: Var, weights: Tensor) -> Result<Var> {
    let d = tape.sub(f_s_aligned, f_t_aug)?;
    let sq = tape.square(d);
    tape.weighted_sum(sq, weights)
}

/// Areas for every image in a batch of branch outputs.
pub fn decode_batch(out: &DamOutput, n_areas: usize) -> Result<Vec<Vec<DistinctiveArea>>> {
    let n = out.heatmap.dims()[0];
    (0..n)
        .map(|i| {
            decode_areas(
                &out.heatmap.slice_outer(i, i + 1)?,
                &out.size.slice_outer(i, i + 1)?,
                &out.offset.slice_outer(i, i + 1)?,
                n_areas,
            )
        })
        .collect()
}
