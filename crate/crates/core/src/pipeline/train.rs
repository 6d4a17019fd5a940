//! Total loss, the SGD training loop and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{self, Metrics};
use super::model::{Features, Model, SampleTrace, Variant};
use crate::config::{ModelConfig, TrainConfig};
use crate::diffusion::{self, FeatureKind};
use crate::distill;
use crate::encoders::FeatureSample;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numcore::{gradcheck, nn};
use crate::numcore::{Graph, ParamSet, Var};

const SHUFFLE_SALT: u64 = 0x7EA1_5EED;
const SPLIT_SALT: u64 = 0x5B11_7000;

/// Loss components of one batch or the mean over an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub loss_final: f64,
    pub l_es: f64,
    pub l_st: f64,
    pub l_dis: f64,
    pub l_diff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_final: f64,
    pub l_es: f64,
    pub l_st: f64,
    pub l_dis: f64,
    pub l_diff: f64,
}

/// `α·L_es + β·L_st + γ·L_dis + λ_diff·L_diff`.
pub fn loss_final(l_es: f64, l_st: f64, l_dis: f64, l_diff: f64, cfg: &TrainConfig) -> f64 {
    cfg.alpha * l_es + cfg.beta * l_st + cfg.gamma * l_dis + cfg.lambda_diff * l_diff
}

/// Graph nodes of the total loss for one batch. Components a variant does
/// not use are `None` and contribute nothing.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub l_es: Option<Var>,
    pub l_st: Option<Var>,
    pub l_dis: Option<Var>,
    pub l_diff: Option<Var>,
}

impl BatchLoss {
    pub fn terms(&self, g: &Graph) -> LossTerms {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar(x));
        LossTerms {
            loss_final: g.scalar(self.total),
            l_es: v(self.l_es),
            l_st: v(self.l_st),
            l_dis: v(self.l_dis),
            l_diff: v(self.l_diff),
        }
    }

    fn check_finite(&self, g: &Graph) -> Result<()> {
        let t = self.terms(g);
        for (name, value) in [
            ("l_es", t.l_es),
            ("l_st", t.l_st),
            ("l_dis", t.l_dis),
            ("l_diff", t.l_diff),
            ("loss_final", t.loss_final),
        ] {
            if !value.is_finite() {
                return Err(Error::Divergence(name.to_string()));
            }
        }
        Ok(())
    }
}

/// Build the total loss of `batch` on `g`, reading trainable weights from `ps`.
pub fn batch_loss<R: Rng + ?Sized>(
    model: &Model,
    g: &Graph,
    ps: &ParamSet,
    batch: &[&FeatureSample],
    theta: f64,
    rng: &mut R,
) -> Result<BatchLoss> {
    Ok(batch_loss_pinned(model, g, ps, batch, theta, rng, None)?.0)
}

/// Clean feature values of each sample at the point where they stop
/// carrying gradient (diffusion condition and denoiser target).
pub type Detached = Vec<Features<Vec<f64>>>;

/// As [`batch_loss`], optionally substituting `pinned` for the detached
/// feature values. Returns the detached values actually used.
pub fn batch_loss_pinned<R: Rng + ?Sized>(
    model: &Model,
    g: &Graph,
    ps: &ParamSet,
    batch: &[&FeatureSample],
    theta: f64,
    rng: &mut R,
    pinned: Option<&Detached>,
) -> Result<(BatchLoss, Detached)> {
    if pinned.is_some_and(|p| p.len() != batch.len()) {
        return Err(Error::invalid("pinned features do not match the batch"));
    }
    if batch.is_empty() {
        return Err(Error::EmptySequence("training batch"));
    }
    let cfg = &model.config.train;
    let variant = model.variant;
    let diffuses = variant.diffusion() && model.schedule().steps() > 0;
    let n = batch.len() as f64;
    let (mut es_terms, mut st_terms) = (Vec::new(), Vec::new());
    let mut diff_items = Vec::new();
    let mut detached = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        let feats = model.branch_features(g, ps, s)?;
        let clean: Features<Vec<f64>> = match pinned {
            Some(p) => p[i].clone(),
            None => std::array::from_fn(|k| feats[k].map(|v| g.value(v))),
        };
        let head_in: Features<Var> = if diffuses {
            let cond = model.condition(g, ps, &clean)?;
            let mut out: Features<Var> = [None; 4];
            for kind in FeatureKind::ALL {
                if let Some(x0) = feats[kind.index()] {
                    let value = clean[kind.index()]
                        .clone()
                        .ok_or_else(|| Error::invalid("pinned features miss a branch"))?;
                    diff_items.push((kind, value, cond));
                    out[kind.index()] =
                        Some(diffusion::one_shot_estimate(g, ps, x0, cond, kind, model.schedule(), rng)?);
                }
            }
            out
        } else {
            feats
        };
        let (st, es) = model.heads(g, ps, &head_in)?;
        if let Some(p) = st {
            st_terms.push(nn::bce(g, p, s.label)?);
        }
        if let Some(p) = es {
            es_terms.push(nn::bce(g, p, s.label)?);
        }
        detached.push(clean);
    }
    let mean = |xs: &[Var]| -> Result<Option<Var>> {
        if xs.is_empty() {
            Ok(None)
        } else {
            Ok(Some(g.scale(g.sum_of(xs)?, 1.0 / n)))
        }
    };
    let l_es = mean(&es_terms)?;
    let l_st = mean(&st_terms)?;
    let l_diff = if diffuses && !diff_items.is_empty() {
        Some(diffusion::denoiser_loss(g, ps, &diff_items, model.schedule(), rng)?)
    } else {
        None
    };
    let l_dis = if variant.distillation() {
        let tau = model.config.distill.tau;
        let d = distill::distill_batch(g, ps, &model.teacher.params, batch, theta, tau)?;
        Some(d.losses.total(g)?)
    } else {
        None
    };
    let mut parts = Vec::new();
    for (term, weight) in [(l_es, cfg.alpha), (l_st, cfg.beta), (l_dis, cfg.gamma), (l_diff, cfg.lambda_diff)] {
        if let Some(v) = term {
            parts.push(g.scale(v, weight));
        }
    }
    let total = if parts.is_empty() { g.zeros(&[1]) } else { g.sum_of(&parts)? };
    Ok((
        BatchLoss {
            total,
            l_es,
            l_st,
            l_dis,
            l_diff,
        },
        detached,
    ))
}

/// Train/validation index split; validation is empty when it would hold fewer than two samples.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let n_val = (n as f64 * fraction).floor() as usize;
    if n_val < 2 || n_val >= n {
        return (idx, Vec::new());
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let val = idx.split_off(n - n_val);
    idx.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (idx, val)
}

/// One pass over `data` in shuffled batches; returns the batch-mean loss terms.
pub fn train_epoch<R: Rng + ?Sized>(model: &mut Model, data: &[&FeatureSample], rng: &mut R) -> Result<LossTerms> {
    let cfg = model.config.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut sum = LossTerms::default();
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.train.batch_size) {
        let batch: Vec<&FeatureSample> = chunk.iter().map(|&i| data[i]).collect();
        let theta = distill::sample_theta(cfg.distill.beta_alpha, rng)?;
        let g = Graph::new();
        let loss = batch_loss(model, &g, &model.params, &batch, theta, rng)?;
        loss.check_finite(&g)?;
        let t = loss.terms(&g);
        model.params.zero_grad();
        g.backward_into(loss.total, &mut model.params)?;
        model.params.sgd_step(cfg.train.learning_rate);
        if model.params.iter().any(|(_, p)| p.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence("parameters".into()));
        }
        model.teacher.update(&model.params)?;
        sum.loss_final += t.loss_final;
        sum.l_es += t.l_es;
        sum.l_st += t.l_st;
        sum.l_dis += t.l_dis;
        sum.l_diff += t.l_diff;
        batches += 1;
    }
    let k = batches.max(1) as f64;
    Ok(LossTerms {
        loss_final: sum.loss_final / k,
        l_es: sum.l_es / k,
        l_st: sum.l_st / k,
        l_dis: sum.l_dis / k,
        l_diff: sum.l_diff / k,
    })
}

/// Train a fresh model. `on_epoch` sees each epoch's log as soon as it is done.
pub fn train_with<F>(
    data: &[FeatureSample],
    config: &ModelConfig,
    variant: Variant,
    exec: Execution,
    mut on_epoch: F,
) -> Result<(Model, Vec<EpochLog>)>
where
    F: FnMut(&EpochLog),
{
    if data.is_empty() {
        return Err(Error::EmptySequence("training set"));
    }
    let mut model = Model::new(config, variant)?;
    let train_cfg = &config.train;
    let (fit_idx, val_idx) = validation_split(data.len(), train_cfg.val_fraction, config.seed);
    let fit: Vec<&FeatureSample> = fit_idx.iter().map(|&i| &data[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut log = Vec::with_capacity(train_cfg.epochs);
    for epoch in 0..train_cfg.epochs {
        let t = train_epoch(&mut model, &fit, &mut rng)?;
        let entry = EpochLog {
            epoch,
            loss_final: t.loss_final,
            l_es: t.l_es,
            l_st: t.l_st,
            l_dis: t.l_dis,
            l_diff: t.l_diff,
        };
        log::debug!("epoch {epoch}: {entry:?}");
        on_epoch(&entry);
        log.push(entry);
    }
    if train_cfg.epochs > 0 && !val_idx.is_empty() {
        let val: Vec<FeatureSample> = val_idx.iter().map(|&i| data[i].clone()).collect();
        let traces = model.trace_all(&val, exec)?;
        let labels: Vec<u8> = val.iter().map(|s| s.label).collect();
        let scores: Vec<f64> = traces.iter().map(|t| t.scores.final_score).collect();
        model.threshold = metrics::calibrate_threshold(&labels, &scores, train_cfg.default_threshold);
        log::info!("calibrated threshold {:.6} on {} validation samples", model.threshold, val.len());
    }
    Ok((model, log))
}

pub fn train(
    data: &[FeatureSample],
    config: &ModelConfig,
    variant: Variant,
    exec: Execution,
) -> Result<(Model, Vec<EpochLog>)> {
    train_with(data, config, variant, exec, |_| {})
}

/// Metrics over `Ŷ_final` with the model's threshold, plus the traces they came from.
pub fn evaluate(model: &Model, data: &[FeatureSample], exec: Execution) -> Result<(Metrics, Vec<SampleTrace>)> {
    if data.is_empty() {
        return Err(Error::EmptySequence("evaluation set"));
    }
    let traces = model.trace_all(data, exec)?;
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    let scores: Vec<f64> = traces.iter().map(|t| t.scores.final_score).collect();
    let predicted: Vec<u8> = traces.iter().map(|t| t.scores.predicted).collect();
    Ok((metrics::classification(&labels, &predicted, &scores), traces))
}

/// Finite-difference check of the full training loss on `batch`, with the
/// stochastic parts (θ, diffusion noise and steps) replayed from `seed`.
/// Detached feature values are held at their unperturbed values, matching
/// what the backward pass differentiates.
pub fn gradcheck_loss_final(
    model: &Model,
    batch: &[&FeatureSample],
    seed: u64,
    points: usize,
) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = distill::sample_theta(model.config.distill.beta_alpha, &mut rng)?;
    let replay = || ChaCha8Rng::seed_from_u64(seed ^ 1);
    let (_, pinned) = batch_loss_pinned(model, &Graph::new(), &model.params, batch, theta, &mut replay(), None)?;
    gradcheck::check_params(&model.params, points, &mut rng, |g, ps| {
        Ok(batch_loss_pinned(model, g, ps, batch, theta, &mut replay(), Some(&pinned))?.0.total)
    })
}
