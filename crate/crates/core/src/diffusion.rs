//! Conditional feature diffusion over the four fusion features.
//!
//! One linear noise schedule is shared by all feature kinds. A single
//! noise-prediction network serves every kind, told apart by a one-hot tag,
//! and is conditioned on an affine fusion of the four clean features.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{DiffusionConfig, Dims};
use crate::error::{Error, Result};
use crate::numcore::nn;
use crate::numcore::{Graph, ParamSet, Var};

/// Width of the sinusoidal step embedding fed to the denoiser.
pub const STEP_EMBED: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Emo,
    Sem,
    Spa,
    Time,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [FeatureKind::Emo, FeatureKind::Sem, FeatureKind::Spa, FeatureKind::Time];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Emo => "emo",
            FeatureKind::Sem => "sem",
            FeatureKind::Spa => "spa",
            FeatureKind::Time => "time",
        }
    }
}

/// Per-step noise levels and their cumulative products. Index `k − 1` holds step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Zero-step schedule: denoising is the identity.
    pub fn identity() -> Self {
        NoiseSchedule {
            betas: Vec::new(),
            alpha_bars: Vec::new(),
        }
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        if cfg.diff_steps == 0 {
            Ok(Self::identity())
        } else {
            build_schedule(cfg.diff_steps, cfg.beta_start, cfg.beta_end)
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::invalid(format!("diffusion step {k} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.betas[k - 1]
    }

    /// Cumulative product up to step `k`; 1 at `k = 0`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }
}

/// Linearly spaced noise levels from `beta_start` to `beta_end` over `steps` steps.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("diffusion needs at least one step"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut prod = 1.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            prod *= 1.0 - b;
            prod
        })
        .collect();
    Ok(NoiseSchedule { betas, alpha_bars })
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Closed-form noising to step `k`; returns `(x_k, noise)`.
pub fn forward_sample<R: Rng + ?Sized>(x0: &[f64], k: usize, sched: &NoiseSchedule, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    sched.check(k)?;
    let eps = gaussian(rng, x0.len());
    let ab = sched.alpha_bar(k);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let xk = x0.iter().zip(&eps).map(|(x, e)| s * x + n * e).collect();
    Ok((xk, eps))
}

/// One Markov noising step from `k − 1` to `k`.
pub fn forward_step<R: Rng + ?Sized>(x_prev: &[f64], k: usize, sched: &NoiseSchedule, rng: &mut R) -> Result<Vec<f64>> {
    sched.check(k)?;
    let b = sched.beta(k);
    let eps = gaussian(rng, x_prev.len());
    Ok(x_prev
        .iter()
        .zip(&eps)
        .map(|(x, e)| (1.0 - b).sqrt() * x + b.sqrt() * e)
        .collect())
}

/// Mean of the reverse transition given a noise estimate.
pub fn reverse_mean(xk: &[f64], eps_hat: &[f64], k: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check(k)?;
    if xk.len() != eps_hat.len() {
        return Err(Error::shape("reverse_mean", &[xk.len()], &[eps_hat.len()]));
    }
    let coef = sched.beta(k) / (1.0 - sched.alpha_bar(k)).sqrt();
    let inv = 1.0 / sched.alpha(k).sqrt();
    Ok(xk.iter().zip(eps_hat).map(|(x, e)| inv * (x - coef * e)).collect())
}

/// Anything that estimates the noise in `x_k` given the condition.
pub trait NoisePredictor {
    fn predict(&self, xk: &[f64], cond: &[f64], k: usize, kind: FeatureKind) -> Result<Vec<f64>>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&[f64], &[f64], usize, FeatureKind) -> Result<Vec<f64>>,
{
    fn predict(&self, xk: &[f64], cond: &[f64], k: usize, kind: FeatureKind) -> Result<Vec<f64>> {
        self(xk, cond, k, kind)
    }
}

/// Ancestral step `k → k − 1` with variance `β_k`; no noise is added at `k = 1`.
pub fn reverse_step<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    xk: &[f64],
    cond: &[f64],
    k: usize,
    kind: FeatureKind,
    model: &P,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let eps_hat = model.predict(xk, cond, k, kind)?;
    let mut mean = reverse_mean(xk, &eps_hat, k, sched)?;
    if k > 1 {
        let sd = sched.beta(k).sqrt();
        for (m, z) in mean.iter_mut().zip(gaussian(rng, xk.len())) {
            *m += sd * z;
        }
    }
    Ok(mean)
}

/// Run the reverse chain `K..1` on each feature kind under one shared condition.
pub fn denoise<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    noised: &[Vec<f64>; 4],
    cond: &[f64],
    model: &P,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<[Vec<f64>; 4]> {
    let mut out = noised.clone();
    for kind in FeatureKind::ALL {
        let x = &mut out[kind.index()];
        for k in (1..=sched.steps()).rev() {
            *x = reverse_step(x, cond, k, kind, model, sched, rng)?;
        }
    }
    Ok(out)
}

/// Sinusoidal embedding of the step index.
pub fn step_embedding(k: usize) -> Vec<f64> {
    (0..STEP_EMBED)
        .map(|j| {
            let angle = k as f64 / 10000f64.powf((2 * (j / 2)) as f64 / STEP_EMBED as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

pub fn init_params<R: Rng + ?Sized>(ps: &mut ParamSet, dims: &Dims, rng: &mut R) -> Result<()> {
    let d = dims.shared_dim;
    nn::init_linear(ps, "diffusion.fuse", 4 * d, d, rng)?;
    let input = 2 * d + STEP_EMBED + FeatureKind::ALL.len();
    nn::init_linear(ps, "denoiser.l1", input, 4 * d, rng)?;
    nn::init_linear(ps, "denoiser.l2", 4 * d, 4 * d, rng)?;
    nn::init_linear(ps, "denoiser.out", 4 * d, d, rng)
}

/// Affine map of the concatenated clean features, `[1, d]`.
pub fn fuse_multi(g: &Graph, ps: &ParamSet, features: &[Option<Var>; 4]) -> Result<Var> {
    let mut parts = Vec::with_capacity(4);
    for (kind, f) in FeatureKind::ALL.iter().zip(features) {
        parts.push(f.ok_or_else(|| Error::invalid(format!("missing {} feature for fusion", kind.as_str())))?);
    }
    nn::linear(g, ps, "diffusion.fuse", g.concat_cols(&parts)?)
}

/// Predicted noise `[1, d]` for `x_k` (`[1, d]`) under condition `cond` (`[1, d]`).
pub fn predict_noise(g: &Graph, ps: &ParamSet, xk: Var, cond: Var, k: usize, kind: FeatureKind) -> Result<Var> {
    let mut tag = vec![0.0; FeatureKind::ALL.len()];
    tag[kind.index()] = 1.0;
    let step = g.constant_vec(&[1, STEP_EMBED], step_embedding(k))?;
    let tag = g.constant_vec(&[1, tag.len()], tag)?;
    let input = g.concat_cols(&[xk, cond, step, tag])?;
    let h = g.tanh(nn::linear(g, ps, "denoiser.l1", input)?);
    let h = g.tanh(nn::linear(g, ps, "denoiser.l2", h)?);
    nn::linear(g, ps, "denoiser.out", h)
}

/// Trained denoiser bound to a parameter set.
pub struct Denoiser<'a> {
    pub params: &'a ParamSet,
}

impl NoisePredictor for Denoiser<'_> {
    fn predict(&self, xk: &[f64], cond: &[f64], k: usize, kind: FeatureKind) -> Result<Vec<f64>> {
        let g = Graph::new();
        let x = g.constant_vec(&[1, xk.len()], xk.to_vec())?;
        let c = g.constant_vec(&[1, cond.len()], cond.to_vec())?;
        Ok(g.value(predict_noise(&g, self.params, x, c, k, kind)?))
    }
}

/// Noise-prediction error `‖ε − ε̂‖²` at a uniformly drawn step, averaged
/// over items. Each item is a feature kind, its clean value (entering only
/// as a constant) and the `[1, d]` condition of the sample it belongs to.
pub fn denoiser_loss<R: Rng + ?Sized>(
    g: &Graph,
    ps: &ParamSet,
    items: &[(FeatureKind, Vec<f64>, Var)],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::EmptySequence("denoiser batch"));
    }
    if sched.steps() == 0 {
        return Ok(g.zeros(&[1]));
    }
    let mut terms = Vec::with_capacity(items.len());
    for (kind, x0, cond) in items {
        let k = rng.random_range(1..=sched.steps());
        let (xk, eps) = forward_sample(x0, k, sched, rng)?;
        let xk = g.constant_vec(&[1, xk.len()], xk)?;
        let eps = g.constant_vec(&[1, eps.len()], eps)?;
        let eps_hat = predict_noise(g, ps, xk, *cond, k, *kind)?;
        terms.push(g.sum_sq(g.sub(eps, eps_hat)?));
    }
    let n = terms.len() as f64;
    Ok(g.scale(g.sum_of(&terms)?, 1.0 / n))
}

/// Graph-side single-shot estimate of `x⁰` from the fully noised feature:
/// `(x_K − √(1−ᾱ_K)·ε̂) / √ᾱ_K`. Gradient flows into both the feature and
/// the denoiser. Returns `x0` unchanged for a zero-step schedule.
pub fn one_shot_estimate<R: Rng + ?Sized>(
    g: &Graph,
    ps: &ParamSet,
    x0: Var,
    cond: Var,
    kind: FeatureKind,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var> {
    let k = sched.steps();
    if k == 0 {
        return Ok(x0);
    }
    let ab = sched.alpha_bar(k);
    let eps = g.constant_vec(&[1, g.cols(x0)], gaussian(rng, g.cols(x0)))?;
    let xk = g.add(g.scale(x0, ab.sqrt()), g.scale(eps, (1.0 - ab).sqrt()))?;
    let eps_hat = predict_noise(g, ps, xk, cond, k, kind)?;
    let num = g.sub(xk, g.scale(eps_hat, (1.0 - ab).sqrt()))?;
    Ok(g.scale(num, 1.0 / ab.sqrt()))
}

/// Copy of a node's value with no graph history.
pub fn detach(g: &Graph, v: Var) -> Var {
    g.constant(&g.tensor(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use crate::numcore::gradcheck::{check_params, max_error, GRAD_TOL};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::from_config(&DiffusionConfig::default()).unwrap()
    }

    #[test]
    fn schedule_cases() {
        let s = build_schedule(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        let s = default_schedule();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((1..=10).all(|k| s.alpha_bar(k) < s.alpha_bar(k - 1)));
        assert!((s.beta(10) - 0.02).abs() < 1e-15);
        let long = build_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(long.alpha_bar(1000) <= 0.01);
        assert!(build_schedule(0, 1e-4, 0.02).is_err());
        assert!(build_schedule(5, 0.0, 0.02).is_err());
        assert!(build_schedule(5, 0.1, 0.05).is_err());
        assert!(build_schedule(5, 0.1, 1.0).is_err());
    }

    #[test]
    fn step_bounds_are_checked() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(forward_sample(&[1.0], 0, &s, &mut rng).is_err());
        assert!(forward_sample(&[1.0], 11, &s, &mut rng).is_err());
        assert!(reverse_mean(&[1.0], &[0.0], 0, &s).is_err());
    }

    #[test]
    fn tiny_noise_leaves_input_nearly_unchanged() {
        let s = build_schedule(10, 1e-12, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = [0.3, -1.2, 2.0];
        let (xk, _) = forward_sample(&x0, 10, &s, &mut rng).unwrap();
        let dist: f64 = xk.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 1e-4);
        let m = reverse_mean(&x0, &[0.0; 3], 1, &s).unwrap();
        for (a, b) in m.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn true_noise_inverts_the_single_step_closed_form() {
        let s = build_schedule(1, 0.02, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0: Vec<f64> = gaussian(&mut rng, 8);
        let (xk, eps) = forward_sample(&x0, 1, &s, &mut rng).unwrap();
        let oracle = |_: &[f64], _: &[f64], _: usize, _: FeatureKind| Ok(eps.clone());
        let back = reverse_step(&xk, &[], 1, FeatureKind::Emo, &oracle, &s, &mut rng).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let s = NoiseSchedule::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = [vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let never = |_: &[f64], _: &[f64], _: usize, _: FeatureKind| -> Result<Vec<f64>> { unreachable!() };
        assert_eq!(denoise(&feats, &[0.0], &never, &s, &mut rng).unwrap(), feats);
    }

    #[test]
    fn oracle_denoiser_reduces_error_tenfold() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 8;
        let (mut before, mut after) = (0.0, 0.0);
        for _ in 0..100 {
            let x0 = gaussian(&mut rng, d);
            let (xk, _) = forward_sample(&x0, s.steps(), &s, &mut rng).unwrap();
            // The exact posterior noise given x0.
            let oracle = |x: &[f64], _: &[f64], k: usize, _: FeatureKind| {
                let ab = s.alpha_bar(k);
                Ok(x.iter().zip(&x0).map(|(xv, x0v)| (xv - ab.sqrt() * x0v) / (1.0 - ab).sqrt()).collect())
            };
            let mut x = xk.clone();
            for k in (1..=s.steps()).rev() {
                x = reverse_step(&x, &[], k, FeatureKind::Spa, &oracle, &s, &mut rng).unwrap();
            }
            let mse = |v: &[f64]| v.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d as f64;
            before += mse(&xk);
            after += mse(&x);
        }
        assert!(after * 10.0 <= before, "before {before}, after {after}");
    }

    #[test]
    fn fuse_is_affine_and_requires_all_inputs() {
        let dims = Dims {
            shared_dim: 3,
            ..Dims::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        init_params(&mut ps, &dims, &mut rng).unwrap();
        ps.set("diffusion.fuse.b", Tensor::randn(&mut rng, &[1, 3], 1.0)).unwrap();
        let g = Graph::new();
        let rand4 = |rng: &mut ChaCha8Rng| -> [Option<Var>; 4] {
            std::array::from_fn(|_| Some(g.constant(&Tensor::randn(rng, &[1, 3], 1.0))))
        };
        let zero: [Option<Var>; 4] = std::array::from_fn(|_| Some(g.zeros(&[1, 3])));
        let bias = g.value(fuse_multi(&g, &ps, &zero).unwrap());
        assert_eq!(bias, ps.get("diffusion.fuse.b").unwrap().data());
        let (a, b) = (rand4(&mut rng), rand4(&mut rng));
        let sum: [Option<Var>; 4] = std::array::from_fn(|i| Some(g.add(a[i].unwrap(), b[i].unwrap()).unwrap()));
        let fa = g.value(fuse_multi(&g, &ps, &a).unwrap());
        let fb = g.value(fuse_multi(&g, &ps, &b).unwrap());
        let fs = g.value(fuse_multi(&g, &ps, &sum).unwrap());
        assert_eq!(fs.len(), 3);
        for i in 0..3 {
            assert!((fs[i] - (fa[i] + fb[i] - bias[i])).abs() <= 1e-10);
        }
        let mut missing = a;
        missing[2] = None;
        assert!(fuse_multi(&g, &ps, &missing).is_err());
    }

    #[test]
    fn zero_prediction_loss_matches_noise_energy() {
        let d = 6;
        let dims = Dims {
            shared_dim: d,
            ..Dims::default()
        };
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamSet::new();
        init_params(&mut ps, &dims, &mut rng).unwrap();
        ps.set("denoiser.out.w", Tensor::zeros(&[4 * d, d])).unwrap();
        let g = Graph::new();
        let cond = g.zeros(&[1, d]);
        let items: Vec<(FeatureKind, Vec<f64>, Var)> = (0..10_000)
            .map(|i| (FeatureKind::ALL[i % 4], gaussian(&mut rng, d), cond))
            .collect();
        let l = g.scalar(denoiser_loss(&g, &ps, &items, &s, &mut rng).unwrap());
        assert!((l - d as f64).abs() <= 0.05 * d as f64, "{l}");
    }

    #[test]
    fn denoiser_loss_gradcheck() {
        let d = 3;
        let dims = Dims {
            shared_dim: d,
            ..Dims::default()
        };
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        init_params(&mut ps, &dims, &mut rng).unwrap();
        let clean: Vec<[Vec<f64>; 4]> = (0..2).map(|_| std::array::from_fn(|_| gaussian(&mut rng, d))).collect();
        let report = check_params(&ps, 10, &mut rng, |g, ps| {
            let feats: Vec<[Option<Var>; 4]> = clean
                .iter()
                .map(|c| std::array::from_fn(|i| Some(g.constant_vec(&[1, d], c[i].clone()).unwrap())))
                .collect();
            let mut items = Vec::new();
            for (c, f) in clean.iter().zip(&feats) {
                let cond = fuse_multi(g, ps, f)?;
                for kind in FeatureKind::ALL {
                    items.push((kind, c[kind.index()].clone(), cond));
                }
            }
            let mut fixed = ChaCha8Rng::seed_from_u64(99);
            denoiser_loss(g, ps, &items, &s, &mut fixed)
        })
        .unwrap();
        assert!(max_error(&report) <= GRAD_TOL, "{report:?}");
    }
}
