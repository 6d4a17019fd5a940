//! Synthetic domain-shifted short-video dataset.
//!
//! Fake samples carry `+a·motif` in their domain's forged modality, real ones
//! `−a·motif`; everything else is noise, a per-domain "logo" and per-domain
//! topic tokens. The motif sits in the centre of each frame and the video
//! logo in the top-left corner, so the two never overlap; the audio logo is
//! orthogonalized against the audio motif.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::Dims;
use crate::encoders::{Encoder, FeatureSample, RawSample, SyntheticEncoders};
use crate::error::{Error, Result};
use crate::exec::{item_seed, Execution};
use crate::numcore::Tensor;

pub const DOMAIN_NAMES: [&str; 9] = [
    "Society",
    "Health",
    "Disaster",
    "Culture",
    "Education",
    "Finance",
    "Politics",
    "Science",
    "Military",
];

const MOTIF_SIDE: usize = 4;
const LOGO_SIDE: usize = 3;
const TOPIC_TOKENS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Forged {
    Video,
    Audio,
    Joint,
}

impl Forged {
    pub fn video(self) -> bool {
        self != Forged::Audio
    }

    pub fn audio(self) -> bool {
        self != Forged::Video
    }

    /// Per-modality motif amplitude scale; joint forgeries split the signal.
    pub fn share(self) -> f64 {
        if self == Forged::Joint {
            std::f64::consts::FRAC_1_SQRT_2
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub domains: usize,
    pub per_domain: usize,
    pub frames: usize,
    pub audio_rows: usize,
    pub text_len: usize,
    pub motif_amplitude: f64,
    pub noise_level: f64,
    pub logo_amplitude: f64,
    /// Domain whose logo is label-correlated; `None` disables the trap.
    pub trap_domain: Option<usize>,
    /// 0 = logo independent of the label, 1 = logo shown exactly on fakes.
    pub trap_strength: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            domains: 9,
            per_domain: 200,
            frames: 6,
            audio_rows: 8,
            text_len: 10,
            motif_amplitude: 1.0,
            noise_level: 1.0,
            logo_amplitude: 4.0,
            trap_domain: Some(8),
            trap_strength: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        if self.domains < 2 {
            return Err(Error::invalid("need at least two domains"));
        }
        if self.per_domain == 0 || self.frames == 0 || self.audio_rows == 0 || self.text_len == 0 {
            return Err(Error::invalid("generator sizes must be positive"));
        }
        if dims.frame_size < MOTIF_SIDE + LOGO_SIDE {
            return Err(Error::invalid("frames too small for motif and logo"));
        }
        if !(0.0..=1.0).contains(&self.trap_strength) {
            return Err(Error::invalid("trap strength must lie in [0, 1]"));
        }
        if !(self.noise_level >= 0.0 && self.motif_amplitude >= 0.0 && self.logo_amplitude >= 0.0) {
            return Err(Error::invalid("amplitudes and noise must be non-negative"));
        }
        if let Some(t) = self.trap_domain {
            if t >= self.domains {
                return Err(Error::invalid(format!("trap domain {t} out of range")));
            }
        }
        Ok(())
    }
}

/// Shared forgery signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    /// `frame_size²` pixels, non-zero only in the centre square.
    pub video: Vec<f64>,
    pub audio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub name: String,
    pub forged: Forged,
    /// Logo pixels, non-zero only in the top-left corner.
    pub bias_video: Vec<f64>,
    pub bias_audio: Vec<f64>,
    pub topic_tokens: Vec<usize>,
    /// Probability of the logo on fake and on real samples.
    pub logo_rate: [f64; 2],
    pub noise_level: f64,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: GeneratorConfig,
    pub motif: Motif,
    pub domains: Vec<DomainSpec>,
    pub raw: Vec<RawSample>,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pattern of `±1` on a `side × side` square at `(top, left)`, scaled to unit norm.
fn square_pattern<R: Rng + ?Sized>(rng: &mut R, frame: usize, top: usize, left: usize, side: usize) -> Vec<f64> {
    let mut v = vec![0.0; frame * frame];
    for i in 0..side {
        for j in 0..side {
            v[(top + i) * frame + left + j] = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
    }
    unit(v)
}

fn build_motif<R: Rng + ?Sized>(dims: &Dims, rng: &mut R) -> Motif {
    let side = dims.frame_size;
    let c = (side - MOTIF_SIDE) / 2;
    Motif {
        video: square_pattern(rng, side, c, c, MOTIF_SIDE),
        audio: unit(gaussian(rng, dims.audio_len)),
    }
}

fn build_domain<R: Rng + ?Sized>(
    id: usize,
    cfg: &GeneratorConfig,
    dims: &Dims,
    motif: &Motif,
    rng: &mut R,
) -> DomainSpec {
    let forged = [Forged::Video, Forged::Audio, Forged::Joint][id % 3];
    let bias_video = square_pattern(rng, dims.frame_size, 0, 0, LOGO_SIDE);
    let mut bias_audio = gaussian(rng, dims.audio_len);
    let proj = dot(&bias_audio, &motif.audio);
    bias_audio.iter_mut().zip(&motif.audio).for_each(|(b, m)| *b -= proj * m);
    let bias_audio = unit(bias_audio);
    let mut vocab: Vec<usize> = (0..dims.vocab).collect();
    vocab.shuffle(rng);
    let topic_tokens = vocab[..TOPIC_TOKENS.min(dims.vocab)].to_vec();
    let logo_rate = if cfg.trap_domain == Some(id) {
        [0.5 + 0.5 * cfg.trap_strength, 0.5 - 0.5 * cfg.trap_strength]
    } else {
        [0.5, 0.5]
    };
    DomainSpec {
        domain_id: id,
        name: DOMAIN_NAMES.get(id).map_or_else(|| format!("Domain{id}"), |s| s.to_string()),
        forged,
        bias_video,
        bias_audio,
        topic_tokens,
        logo_rate,
        noise_level: cfg.noise_level,
    }
}

fn sample<R: Rng + ?Sized>(
    spec: &DomainSpec,
    motif: &Motif,
    label: u8,
    cfg: &GeneratorConfig,
    dims: &Dims,
    rng: &mut R,
) -> RawSample {
    let sign = if label == 0 { 1.0 } else { -1.0 };
    let amp = sign * cfg.motif_amplitude * spec.forged.share();
    let logo = rng.random::<f64>() < spec.logo_rate[usize::from(label)];
    let logo_amp = if logo { cfg.logo_amplitude } else { 0.0 };
    let side = dims.frame_size;
    let video_amp = if spec.forged.video() { amp } else { 0.0 };
    let audio_amp = if spec.forged.audio() { amp } else { 0.0 };
    let mut video_frames = Vec::with_capacity(cfg.frames);
    let mut frame_text_density = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        let noise = gaussian(rng, side * side);
        let pixels: Vec<f64> = (0..side * side)
            .map(|p| spec.noise_level * noise[p] + video_amp * motif.video[p] + logo_amp * spec.bias_video[p])
            .collect();
        video_frames.push(Tensor::new(vec![side, side], pixels).expect("square frame"));
        frame_text_density.push(rng.random_range(0.0..0.6));
    }
    let audio = (0..cfg.audio_rows)
        .map(|_| {
            let noise = gaussian(rng, dims.audio_len);
            (0..dims.audio_len)
                .map(|p| spec.noise_level * noise[p] + audio_amp * motif.audio[p] + logo_amp * spec.bias_audio[p])
                .collect()
        })
        .collect();
    let text_tokens = (0..cfg.text_len)
        .map(|_| {
            if rng.random::<bool>() {
                spec.topic_tokens[rng.random_range(0..spec.topic_tokens.len())]
            } else {
                rng.random_range(0..dims.vocab)
            }
        })
        .collect();
    RawSample {
        video_frames,
        frame_text_density,
        audio,
        text_tokens,
        domain_id: spec.domain_id,
        label,
    }
}

/// Generate the raw benchmark. Each domain holds exactly `⌊n/2⌋` fakes.
pub fn gen_domains(cfg: &GeneratorConfig, dims: &Dims) -> Result<Benchmark> {
    cfg.validate(dims)?;
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let motif = build_motif(dims, &mut rng);
    let domains: Vec<DomainSpec> = (0..cfg.domains)
        .map(|id| build_domain(id, cfg, dims, &motif, &mut rng))
        .collect();
    let mut raw = Vec::with_capacity(cfg.domains * cfg.per_domain);
    for spec in &domains {
        let mut drng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, spec.domain_id as u64));
        let mut labels: Vec<u8> = (0..cfg.per_domain).map(|i| u8::from(i >= cfg.per_domain / 2)).collect();
        labels.shuffle(&mut drng);
        for label in labels {
            raw.push(sample(spec, &motif, label, cfg, dims, &mut drng));
        }
    }
    Ok(Benchmark {
        config: cfg.clone(),
        motif,
        domains,
        raw,
    })
}

impl Benchmark {
    /// Encode every raw sample with fixed random encoders.
    pub fn encode(&self, dims: &Dims, encoder_seed: u64, exec: Execution) -> Result<Vec<FeatureSample>> {
        let enc = SyntheticEncoders::new(dims, encoder_seed)?;
        exec.map(&self.raw, |_, r| enc.encode_sample(r)).into_iter().collect()
    }

    /// Bayes posterior `P(real | sample)` from the known generator parameters.
    pub fn oracle_real_probability(&self, s: &RawSample) -> Result<f64> {
        let spec = self
            .domains
            .get(s.domain_id)
            .ok_or_else(|| Error::invalid(format!("unknown domain {}", s.domain_id)))?;
        let amp = self.config.motif_amplitude * spec.forged.share();
        // sufficient statistic: projections of the forged modality onto the motif
        let mut stat = 0.0;
        if spec.forged.video() {
            stat += s.video_frames.iter().map(|f| dot(f.data(), &self.motif.video)).sum::<f64>();
        }
        if spec.forged.audio() {
            stat += s.audio.iter().map(|a| dot(a, &self.motif.audio)).sum::<f64>();
        }
        let var = spec.noise_level * spec.noise_level;
        if var == 0.0 {
            // noiseless: only the sign of the projection matters
            return Ok(if stat.abs() < 1e-9 {
                0.5
            } else if stat > 0.0 {
                0.0
            } else {
                1.0
            });
        }
        // log P(fake)/P(real) for means ±amp·motif
        let llr = 2.0 * amp * stat / var;
        Ok(1.0 / (1.0 + llr.exp()))
    }

    pub fn oracle_label(&self, s: &RawSample) -> Result<u8> {
        Ok(u8::from(self.oracle_real_probability(s)? > 0.5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            domains: 3,
            per_domain: 20,
            trap_domain: Some(2),
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let dims = Dims::default();
        let a = gen_domains(&small(), &dims).unwrap();
        let b = gen_domains(&small(), &dims).unwrap();
        assert_eq!(a.raw, b.raw);
        let mut other = small();
        other.seed = 1;
        assert_ne!(gen_domains(&other, &dims).unwrap().raw, a.raw);
    }

    #[test]
    fn motif_and_logo_do_not_interact() {
        let dims = Dims::default();
        let b = gen_domains(&small(), &dims).unwrap();
        for d in &b.domains {
            assert_eq!(dot(&d.bias_video, &b.motif.video), 0.0);
            assert!(dot(&d.bias_audio, &b.motif.audio).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_single_domain() {
        let cfg = GeneratorConfig {
            domains: 1,
            trap_domain: None,
            ..GeneratorConfig::default()
        };
        assert!(gen_domains(&cfg, &Dims::default()).is_err());
    }
}
