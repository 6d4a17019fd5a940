//! Cross-modal interpolation distillation.
//!
//! Each of audio and video has a student path: a `tanh` adapter over the
//! encoder features followed by a projection into the shared space. The
//! teacher keeps a simple moving average of the student parameters and its
//! outputs are always stop-gradient. Classifier heads sit on the pooled
//! adapter output and exist in the student only.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::config::{Dims, DistillConfig};
use crate::encoders::{FeatureSample, Modality};
use crate::error::{Error, Result};
use crate::numcore::nn;
use crate::numcore::{Graph, ParamSet, Tensor, Var};

/// Prefix shared by every parameter the teacher mirrors.
pub const STUDENT: &str = "student";

pub fn adapter_name(m: Modality) -> String {
    format!("{STUDENT}.{m}.adapter")
}

pub fn projection_name(m: Modality) -> String {
    format!("{STUDENT}.{m}.proj")
}

pub fn head_name(m: Modality) -> String {
    format!("head.{m}")
}

/// Register student adapters, projections and classifier heads for audio and video.
pub fn init_params<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    dims: &Dims,
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<()> {
    for (m, d_in) in [(Modality::Audio, dims.audio_dim), (Modality::Video, dims.video_dim())] {
        nn::init_linear(ps, &adapter_name(m), d_in, cfg.student_dim, rng)?;
        nn::init_linear(ps, &projection_name(m), cfg.student_dim, dims.shared_dim, rng)?;
        nn::init_linear(ps, &head_name(m), cfg.student_dim, 1, rng)?;
    }
    Ok(())
}

/// Draw the interpolation weight from a symmetric Beta distribution.
pub fn sample_theta<R: Rng + ?Sized>(beta_alpha: f64, rng: &mut R) -> Result<f64> {
    if !(beta_alpha > 0.0) || !beta_alpha.is_finite() {
        return Err(Error::invalid(format!("beta_alpha must be > 0, got {beta_alpha}")));
    }
    let dist = Beta::new(beta_alpha, beta_alpha).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// `θ·a + (1−θ)·b`.
pub fn mixup(a: &[f64], b: &[f64], theta: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape("mixup", &[a.len()], &[b.len()]));
    }
    Ok(a.iter().zip(b).map(|(x, y)| theta * x + (1.0 - theta) * y).collect())
}

pub fn mixup_var(g: &Graph, a: Var, b: Var, theta: f64) -> Result<Var> {
    g.add(g.scale(a, theta), g.scale(b, 1.0 - theta))
}

/// Moving-average copy of the student parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TeacherState {
    pub params: ParamSet,
    pub t: u64,
    pub t0: u64,
}

impl TeacherState {
    /// Start at `t = 0` with a copy of the mirrored student parameters.
    pub fn new(student: &ParamSet, t0: u64) -> Self {
        TeacherState {
            params: student.subset(STUDENT),
            t: 0,
            t0,
        }
    }

    /// Advance to iteration `t + 1` and fold in the current student.
    pub fn update(&mut self, student: &ParamSet) -> Result<()> {
        let t = self.t + 1;
        sma_update(self, student, t)
    }
}

/// Apply the moving-average rule for iteration `t`, which must be `teacher.t + 1`.
pub fn sma_update(teacher: &mut TeacherState, student: &ParamSet, t: u64) -> Result<()> {
    if t != teacher.t + 1 {
        return Err(Error::invalid(format!(
            "teacher at iteration {} cannot jump to {t}",
            teacher.t
        )));
    }
    let keep = if t <= teacher.t0 {
        0.0
    } else {
        let n = (t - teacher.t0) as f64;
        n / (n + 1.0)
    };
    let fresh = if t <= teacher.t0 { 1.0 } else { 1.0 - keep };
    for (name, tp) in teacher.params.iter_mut() {
        let sp = student.get(name)?;
        if sp.shape() != tp.shape() {
            return Err(Error::shape("sma_update", tp.shape(), sp.shape()));
        }
        if t <= teacher.t0 {
            tp.data_mut().copy_from_slice(sp.data());
        } else {
            for (a, b) in tp.data_mut().iter_mut().zip(sp.data()) {
                *a = keep * *a + fresh * b;
            }
        }
    }
    teacher.t = t;
    Ok(())
}

/// Student path for one modality: `(pooled adapter output [1, s], shared vector [1, d])`.
pub fn student_forward(g: &Graph, ps: &ParamSet, m: Modality, x: Var) -> Result<(Var, Var)> {
    let h = g.tanh(nn::linear(g, ps, &adapter_name(m), x)?);
    let pooled = g.mean_rows(h);
    let shared = nn::linear(g, ps, &projection_name(m), pooled)?;
    Ok((pooled, shared))
}

/// Teacher path for one modality; the result never carries gradient.
pub fn teacher_forward(g: &Graph, teacher: &ParamSet, m: Modality, x: Var) -> Result<Var> {
    let h = g.tanh(nn::linear_frozen(g, teacher, &adapter_name(m), x)?);
    let pooled = g.mean_rows(h);
    nn::linear_frozen(g, teacher, &projection_name(m), pooled)
}

/// Gated distillation distances `(video, audio)`: the video student is
/// pulled toward the teacher mixup when `θ ≤ 0.5`, otherwise the audio one.
pub fn distill_loss(g: &Graph, theta: f64, video: Var, audio: Var, teacher_mix: Var) -> Result<(Var, Var)> {
    let zero = g.zeros(&[1]);
    if theta <= 0.5 {
        Ok((g.sum_sq(g.sub(video, teacher_mix)?), zero))
    } else {
        Ok((zero, g.sum_sq(g.sub(audio, teacher_mix)?)))
    }
}

/// Plain-number form of [`distill_loss`].
pub fn distill_distances(theta: f64, video: &[f64], audio: &[f64], teacher_mix: &[f64]) -> (f64, f64) {
    let sq = |a: &[f64]| a.iter().zip(teacher_mix).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    if theta <= 0.5 {
        (sq(video), 0.0)
    } else {
        (0.0, sq(audio))
    }
}

/// One-directional contrastive loss over a batch of audio rows `a` and video
/// rows `v` (`[B, d]` each). The positive pair is `(a_i, v_i)`; the
/// denominator runs over `a_i·a_j` and `a_i·v_j` for all `j ≠ i`.
pub fn contrastive_loss(g: &Graph, a: Var, v: Var, tau: f64) -> Result<Var> {
    if g.shape(a) != g.shape(v) {
        return Err(Error::shape("contrastive_loss", &g.shape(a), &g.shape(v)));
    }
    let b = g.rows(a);
    if b < 2 {
        return Err(Error::invalid(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be > 0"));
    }
    let at = g.transpose(a)?;
    let vt = g.transpose(v)?;
    let aa = g.scale(g.matmul(a, at)?, 1.0 / tau);
    let av = g.scale(g.matmul(a, vt)?, 1.0 / tau);
    let both = g.concat_rows(&[aa, av])?;
    let mut terms = Vec::with_capacity(b);
    for i in 0..b {
        let others: Vec<usize> = (0..b).filter(|&j| j != i).collect();
        let offsets: Vec<usize> = others
            .iter()
            .map(|j| i * b + j)
            .chain(others.iter().map(|j| (b + i) * b + j))
            .collect();
        let denom = g.logsumexp(g.pick(both, &offsets)?);
        let pos = g.pick(av, &[i * b + i])?;
        terms.push(g.sub(g.reshape(denom, &[1, 1])?, pos)?);
    }
    let total = g.sum_of(&terms)?;
    g.reshape(g.scale(total, 1.0 / b as f64), &[1])
}

/// Classifier probability and BCE on a pooled pre-projection feature.
pub fn modality_cls_loss(g: &Graph, ps: &ParamSet, head: &str, pooled: Var, label: u8) -> Result<(Var, Var)> {
    let p = g.sigmoid(nn::linear(g, ps, head, pooled)?);
    let loss = nn::bce(g, p, label)?;
    Ok((loss, p))
}

/// The five terms of the distillation objective.
#[derive(Debug, Clone, Copy)]
pub struct DistillLosses<T> {
    pub con: T,
    pub cls_audio: T,
    pub cls_video: T,
    pub dis_audio: T,
    pub dis_video: T,
}

impl DistillLosses<f64> {
    pub fn total(&self) -> f64 {
        self.con + self.cls_audio + self.cls_video + self.dis_audio + self.dis_video
    }
}

impl DistillLosses<Var> {
    pub fn total(&self, g: &Graph) -> Result<Var> {
        g.sum_of(&[self.con, self.cls_audio, self.cls_video, self.dis_audio, self.dis_video])
    }

    pub fn values(&self, g: &Graph) -> DistillLosses<f64> {
        DistillLosses {
            con: g.scalar(self.con),
            cls_audio: g.scalar(self.cls_audio),
            cls_video: g.scalar(self.cls_video),
            dis_audio: g.scalar(self.dis_audio),
            dis_video: g.scalar(self.dis_video),
        }
    }
}

/// Graph nodes produced by one distillation pass over a batch.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub losses: DistillLosses<Var>,
    /// Per-sample classifier probabilities, `[1, 1]` each.
    pub p_audio: Vec<Var>,
    pub p_video: Vec<Var>,
}

/// Distillation terms for a batch, each averaged over the batch (the
/// contrastive term is already a batch mean).
pub fn distill_batch(
    g: &Graph,
    ps: &ParamSet,
    teacher: &ParamSet,
    batch: &[&FeatureSample],
    theta: f64,
    tau: f64,
) -> Result<DistillBatch> {
    if batch.is_empty() {
        return Err(Error::EmptySequence("distill batch"));
    }
    let n = batch.len() as f64;
    let (mut stu_a, mut stu_v) = (Vec::new(), Vec::new());
    let (mut cls_a, mut cls_v, mut dis_a, mut dis_v) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut p_audio, mut p_video) = (Vec::new(), Vec::new());
    for s in batch {
        let xa = g.constant(&s.audio.values);
        let xv = g.constant(&s.video.values);
        let (pool_a, shared_a) = student_forward(g, ps, Modality::Audio, xa)?;
        let (pool_v, shared_v) = student_forward(g, ps, Modality::Video, xv)?;
        let ta = teacher_forward(g, teacher, Modality::Audio, xa)?;
        let tv = teacher_forward(g, teacher, Modality::Video, xv)?;
        let teacher_mix = mixup_var(g, ta, tv, theta)?;
        let (dv, da) = distill_loss(g, theta, shared_v, shared_a, teacher_mix)?;
        let (la, pa) = modality_cls_loss(g, ps, &head_name(Modality::Audio), pool_a, s.label)?;
        let (lv, pv) = modality_cls_loss(g, ps, &head_name(Modality::Video), pool_v, s.label)?;
        stu_a.push(shared_a);
        stu_v.push(shared_v);
        dis_a.push(da);
        dis_v.push(dv);
        cls_a.push(la);
        cls_v.push(lv);
        p_audio.push(pa);
        p_video.push(pv);
    }
    let avg = |xs: &[Var]| -> Result<Var> { Ok(g.scale(g.sum_of(xs)?, 1.0 / n)) };
    let con = if batch.len() >= 2 {
        contrastive_loss(g, g.concat_rows(&stu_a)?, g.concat_rows(&stu_v)?, tau)?
    } else {
        g.zeros(&[1])
    };
    Ok(DistillBatch {
        losses: DistillLosses {
            con,
            cls_audio: avg(&cls_a)?,
            cls_video: avg(&cls_v)?,
            dis_audio: avg(&dis_a)?,
            dis_video: avg(&dis_v)?,
        },
        p_audio,
        p_video,
    })
}

/// Classifier probabilities `(p_audio, p_video)` for one sample, no graph kept.
pub fn modality_probabilities(ps: &ParamSet, s: &FeatureSample) -> Result<(f64, f64)> {
    let g = Graph::new();
    let mut out = [0.0; 2];
    for (slot, (m, feat)) in out
        .iter_mut()
        .zip([(Modality::Audio, &s.audio), (Modality::Video, &s.video)])
    {
        let x = g.constant(&feat.values);
        let h = g.tanh(nn::linear_frozen(&g, ps, &adapter_name(m), x)?);
        let pooled = g.mean_rows(h);
        let z = nn::linear_frozen(&g, ps, &head_name(m), pooled)?;
        *slot = g.scalar(g.sigmoid(z));
    }
    Ok((out[0], out[1]))
}

/// Teacher shared-space vector for one modality, as plain numbers.
pub fn teacher_embedding(teacher: &ParamSet, m: Modality, values: &Tensor) -> Result<Vec<f64>> {
    let g = Graph::new();
    let x = g.constant(values);
    Ok(g.value(teacher_forward(&g, teacher, m, x)?))
}
