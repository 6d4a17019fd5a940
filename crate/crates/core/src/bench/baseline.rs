//! Naive fusion baseline: per-modality mean-pooled projections are
//! concatenated and scored by one linear head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoders::{self, FeatureSample, Modality};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numcore::nn;
use crate::numcore::{Graph, ParamSet, Var};
use crate::pipeline::metrics::{self, Metrics};
use crate::pipeline::train::validation_split;

const INIT_SALT: u64 = 0xBA5E_1111;

#[derive(Debug, Clone)]
pub struct Baseline {
    pub params: ParamSet,
    pub threshold: f64,
}

fn prefix(m: Modality) -> String {
    format!("baseline.{m}")
}

impl Baseline {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT);
        let dims = &cfg.dims;
        let mut ps = ParamSet::new();
        for (m, d_in) in [
            (Modality::Audio, dims.audio_dim),
            (Modality::Video, dims.video_dim()),
            (Modality::Text, dims.text_dim),
        ] {
            encoders::init_projection(&mut ps, &prefix(m), d_in, dims.shared_dim, &mut rng)?;
        }
        nn::init_linear(&mut ps, "baseline.head", 3 * dims.shared_dim, 1, &mut rng)?;
        Ok(Baseline {
            params: ps,
            threshold: cfg.train.default_threshold,
        })
    }

    fn probability(g: &Graph, ps: &ParamSet, s: &FeatureSample) -> Result<Var> {
        let mut parts = Vec::with_capacity(3);
        for m in Modality::ALL {
            let x = g.constant(&s.feature(m).values);
            parts.push(encoders::project_var(g, ps, &prefix(m), x)?);
        }
        let z = nn::linear(g, ps, "baseline.head", g.concat_cols(&parts)?)?;
        Ok(g.sigmoid(z))
    }

    pub fn score(&self, s: &FeatureSample) -> Result<f64> {
        let g = Graph::new();
        Ok(g.scalar(Self::probability(&g, &self.params, s)?))
    }

    /// Same protocol as the full model: SGD on BCE, threshold calibrated on a validation split.
    pub fn train(data: &[FeatureSample], cfg: &ModelConfig, exec: Execution) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptySequence("training set"));
        }
        let mut model = Baseline::new(cfg)?;
        let (fit, val) = validation_split(data.len(), cfg.train.val_fraction, cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT ^ 1);
        let mut order = fit.clone();
        for _ in 0..cfg.train.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.train.batch_size) {
                let g = Graph::new();
                let mut terms = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let p = Self::probability(&g, &model.params, &data[i])?;
                    terms.push(nn::bce(&g, p, data[i].label)?);
                }
                let loss = g.scale(g.sum_of(&terms)?, 1.0 / chunk.len() as f64);
                if !g.scalar(loss).is_finite() {
                    return Err(Error::Divergence("baseline bce".into()));
                }
                model.params.zero_grad();
                g.backward_into(loss, &mut model.params)?;
                model.params.sgd_step(cfg.train.learning_rate);
            }
        }
        if cfg.train.epochs > 0 && !val.is_empty() {
            let scores: Vec<f64> = exec
                .map(&val, |_, &i| model.score(&data[i]))
                .into_iter()
                .collect::<Result<_>>()?;
            let labels: Vec<u8> = val.iter().map(|&i| data[i].label).collect();
            model.threshold = metrics::calibrate_threshold(&labels, &scores, cfg.train.default_threshold);
        }
        Ok(model)
    }

    pub fn evaluate(&self, data: &[FeatureSample], exec: Execution) -> Result<Metrics> {
        if data.is_empty() {
            return Err(Error::EmptySequence("evaluation set"));
        }
        let scores: Vec<f64> = exec.map(data, |_, s| self.score(s)).into_iter().collect::<Result<_>>()?;
        let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
        let predicted = metrics::threshold_labels(&scores, self.threshold);
        Ok(metrics::classification(&labels, &predicted, &scores))
    }
}
