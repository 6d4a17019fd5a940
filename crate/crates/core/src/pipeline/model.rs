//! Model assembly: branch features, diffusion refinement, prediction heads
//! and late fusion.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::diffusion::{self, Denoiser, FeatureKind, NoiseSchedule};
use crate::distill::{self, TeacherState};
use crate::encoders::FeatureSample;
use crate::error::{Error, Result};
use crate::exec::{item_seed, Execution};
use crate::numcore::nn;
use crate::numcore::{Graph, ParamSet, Var};
use crate::{affect, spatial, temporal};

/// Salt mixed into the config seed for inference-time noise.
const INFERENCE_SALT: u64 = 0x5EED_0F_1E7E;

/// Full model or one of the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoDiffusion,
    NoDistillation,
    NoSe,
    NoSt,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoDiffusion,
        Variant::NoDistillation,
        Variant::NoSe,
        Variant::NoSt,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDiffusion => "w/o Diffusion",
            Variant::NoDistillation => "w/o Distillation",
            Variant::NoSe => "w/o SE",
            Variant::NoSt => "w/o ST",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDiffusion => "no-diffusion",
            Variant::NoDistillation => "no-distillation",
            Variant::NoSe => "no-se",
            Variant::NoSt => "no-st",
        }
    }

    pub fn diffusion(self) -> bool {
        self != Variant::NoDiffusion
    }

    pub fn distillation(self) -> bool {
        self != Variant::NoDistillation
    }

    /// Semantic/emotional branch.
    pub fn se(self) -> bool {
        self != Variant::NoSe
    }

    /// Spatial/temporal branch.
    pub fn st(self) -> bool {
        self != Variant::NoSt
    }

    pub fn has(self, kind: FeatureKind) -> bool {
        match kind {
            FeatureKind::Emo | FeatureKind::Sem => self.se(),
            FeatureKind::Spa | FeatureKind::Time => self.st(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.slug() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

/// How often the spatial and temporal extractors ran.
#[derive(Debug, Default)]
pub struct Probes {
    spatial: AtomicUsize,
    temporal: AtomicUsize,
}

impl Probes {
    pub fn spatial_calls(&self) -> usize {
        self.spatial.load(Ordering::Relaxed)
    }

    pub fn temporal_calls(&self) -> usize {
        self.temporal.load(Ordering::Relaxed)
    }
}

/// Branch and fused scores of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub st: f64,
    pub es: f64,
    pub dis: f64,
    pub fusion: f64,
    pub final_score: f64,
    pub predicted: u8,
}

impl Scores {
    pub fn combine(st: f64, es: f64, dis: f64, threshold: f64) -> Self {
        let fusion = st * es.tanh();
        let final_score = fusion * dis;
        Scores {
            st,
            es,
            dis,
            fusion,
            final_score,
            predicted: u8::from(final_score > threshold),
        }
    }
}

/// Late fusion of already-computed branch probabilities. A dropped branch
/// contributes the constant 1, which leaves the ranking of samples unchanged.
pub fn predict_final(st: Option<f64>, es: Option<f64>, p_audio: f64, p_video: f64, threshold: f64) -> Scores {
    Scores::combine(st.unwrap_or(1.0), es.unwrap_or(1.0), (p_audio + p_video) / 2.0, threshold)
}

pub type Features<T> = [Option<T>; 4];

/// Everything computed for one sample at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub clean: Features<Vec<f64>>,
    /// Fully noised features fed to the reverse chain (absent without diffusion).
    pub noised: Features<Vec<f64>>,
    /// Features seen by the heads.
    pub refined: Features<Vec<f64>>,
    pub scores: Scores,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: Variant,
    pub params: ParamSet,
    pub teacher: TeacherState,
    pub threshold: f64,
    schedule: NoiseSchedule,
    probes: Arc<Probes>,
}

impl Model {
    pub fn new(config: &ModelConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let dims = &config.dims;
        distill::init_params(&mut ps, dims, &config.distill, &mut rng)?;
        spatial::init_params(&mut ps, dims, &config.spatial, &mut rng)?;
        temporal::init_params(&mut ps, dims, config.tpe_bins, &mut rng)?;
        affect::init_params(&mut ps, dims, &mut rng)?;
        diffusion::init_params(&mut ps, dims, &mut rng)?;
        let d = dims.shared_dim;
        nn::init_linear(&mut ps, "head.st", 2 * d, 1, &mut rng)?;
        nn::init_linear(&mut ps, "head.se", 2 * d, 1, &mut rng)?;
        Self::from_parts(config.clone(), variant, ps, None, config.train.default_threshold)
    }

    pub fn from_parts(
        config: ModelConfig,
        variant: Variant,
        params: ParamSet,
        teacher: Option<TeacherState>,
        threshold: f64,
    ) -> Result<Self> {
        let schedule = NoiseSchedule::from_config(&config.diffusion)?;
        let teacher = teacher.unwrap_or_else(|| TeacherState::new(&params, config.distill.sma_t0));
        Ok(Model {
            config,
            variant,
            params,
            teacher,
            threshold,
            schedule,
            probes: Arc::new(Probes::default()),
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn probes(&self) -> &Probes {
        &self.probes
    }

    fn diffuses(&self) -> bool {
        self.variant.diffusion() && self.schedule.steps() > 0
    }

    /// Clean branch features `[1, d]` in `FeatureKind` order; dropped branches are `None`.
    pub fn branch_features(&self, g: &Graph, ps: &ParamSet, s: &FeatureSample) -> Result<Features<Var>> {
        let mut out: Features<Var> = [None; 4];
        if self.variant.se() {
            let t = g.constant(&s.text.values);
            let a = g.constant(&s.audio.values);
            let v = g.constant(&s.video.values);
            let f = affect::affect_features(g, ps, t, a, v)?;
            out[FeatureKind::Emo.index()] = Some(f.emo);
            out[FeatureKind::Sem.index()] = Some(f.sem);
        }
        if self.variant.st() {
            self.probes.spatial.fetch_add(1, Ordering::Relaxed);
            let cfg = &self.config;
            out[FeatureKind::Spa.index()] = Some(spatial::spatial_features(g, ps, s, &cfg.dims, &cfg.spatial)?);
            self.probes.temporal.fetch_add(1, Ordering::Relaxed);
            out[FeatureKind::Time.index()] = Some(temporal::sample_temporal(
                g,
                ps,
                s,
                cfg.spatial.text_rich_threshold,
                cfg.tpe_bins,
            )?);
        }
        Ok(out)
    }

    /// Diffusion condition from detached feature values; dropped branches enter as zeros.
    pub fn condition(&self, g: &Graph, ps: &ParamSet, clean: &Features<Vec<f64>>) -> Result<Var> {
        let d = self.config.dims.shared_dim;
        let mut parts: Features<Var> = [None; 4];
        for (slot, v) in parts.iter_mut().zip(clean) {
            *slot = Some(match v {
                Some(v) => g.constant_vec(&[1, v.len()], v.clone())?,
                None => g.zeros(&[1, d]),
            });
        }
        diffusion::fuse_multi(g, ps, &parts)
    }

    /// Branch probabilities `(st, es)` from head inputs.
    pub fn heads(&self, g: &Graph, ps: &ParamSet, feats: &Features<Var>) -> Result<(Option<Var>, Option<Var>)> {
        let pair = |a: FeatureKind, b: FeatureKind, head: &str| -> Result<Option<Var>> {
            match (feats[a.index()], feats[b.index()]) {
                (Some(x), Some(y)) => {
                    let z = nn::linear(g, ps, head, g.concat_cols(&[x, y])?)?;
                    Ok(Some(g.sigmoid(z)))
                }
                _ => Ok(None),
            }
        };
        Ok((
            pair(FeatureKind::Time, FeatureKind::Spa, "head.st")?,
            pair(FeatureKind::Sem, FeatureKind::Emo, "head.se")?,
        ))
    }

    /// Score one sample. `seed` drives the diffusion noise.
    pub fn trace(&self, s: &FeatureSample, seed: u64) -> Result<SampleTrace> {
        let ps = &self.params;
        let g = Graph::new();
        let feats = self.branch_features(&g, ps, s)?;
        let clean: Features<Vec<f64>> = std::array::from_fn(|i| feats[i].map(|v| g.value(v)));
        let mut noised: Features<Vec<f64>> = Default::default();
        let mut refined = clean.clone();
        if self.diffuses() {
            let cond = g.value(self.condition(&g, ps, &clean)?);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let den = Denoiser { params: ps };
            let steps = self.schedule.steps();
            for kind in FeatureKind::ALL {
                let Some(x0) = &clean[kind.index()] else { continue };
                let (mut x, _) = diffusion::forward_sample(x0, steps, &self.schedule, &mut rng)?;
                noised[kind.index()] = Some(x.clone());
                for k in (1..=steps).rev() {
                    x = diffusion::reverse_step(&x, &cond, k, kind, &den, &self.schedule, &mut rng)?;
                }
                refined[kind.index()] = Some(x);
            }
        }
        let head_in: Features<Var> = std::array::from_fn(|i| {
            refined[i]
                .as_ref()
                .map(|v| g.constant_vec(&[1, v.len()], v.clone()).expect("non-empty feature"))
        });
        let (st, es) = self.heads(&g, ps, &head_in)?;
        let (p_audio, p_video) = distill::modality_probabilities(ps, s)?;
        let scores = predict_final(st.map(|v| g.scalar(v)), es.map(|v| g.scalar(v)), p_audio, p_video, self.threshold);
        Ok(SampleTrace {
            clean,
            noised,
            refined,
            scores,
        })
    }

    /// Per-sample inference seed, independent of scheduling.
    pub fn sample_seed(&self, index: usize) -> u64 {
        item_seed(self.config.seed ^ INFERENCE_SALT, index as u64)
    }

    pub fn trace_all(&self, data: &[FeatureSample], exec: Execution) -> Result<Vec<SampleTrace>> {
        exec.map(data, |i, s| self.trace(s, self.sample_seed(i))).into_iter().collect()
    }
}
