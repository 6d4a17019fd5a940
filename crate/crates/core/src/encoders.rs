//! Per-modality feature extraction, projection into the shared space, and
//! JSON-lines feature files.
//!
//! The bundled [`SyntheticEncoders`] are seeded random linear maps followed by
//! `tanh`. Video rows are laid out as the flattened patch grid (row-major,
//! `patch_dim` values per patch) followed by the frame's text density, so a
//! feature file alone carries everything the spatial and temporal stages need.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Dims;
use crate::error::{Error, Result};
use crate::numcore::nn;
use crate::numcore::{Graph, ParamSet, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Video, Modality::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "video" => Ok(Modality::Video),
            "text" => Ok(Modality::Text),
            other => Err(Error::invalid(format!("unknown modality `{other}`"))),
        }
    }
}

/// One short video before feature extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    /// `frame_size × frame_size` pixel matrices.
    pub video_frames: Vec<Tensor>,
    /// Fraction of each frame covered by on-screen text, in `[0, 1]`.
    pub frame_text_density: Vec<f64>,
    /// Fixed-length audio windows spread evenly over the clip.
    pub audio: Vec<Vec<f64>>,
    pub text_tokens: Vec<usize>,
    pub domain_id: usize,
    /// 0 = fake, 1 = real.
    pub label: u8,
}

impl RawSample {
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        if self.video_frames.is_empty() || self.audio.is_empty() || self.text_tokens.is_empty() {
            return Err(Error::EmptySequence("raw sample"));
        }
        if self.frame_text_density.len() != self.video_frames.len() {
            return Err(Error::shape(
                "raw sample density",
                &[self.video_frames.len()],
                &[self.frame_text_density.len()],
            ));
        }
        if self.frame_text_density.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::invalid("text density outside [0, 1]"));
        }
        let side = dims.frame_size;
        for f in &self.video_frames {
            if f.shape() != [side, side] {
                return Err(Error::shape("raw frame", f.shape(), &[side, side]));
            }
        }
        for a in &self.audio {
            if a.len() != dims.audio_len {
                return Err(Error::shape("raw audio", &[a.len()], &[dims.audio_len]));
            }
        }
        if let Some(t) = self.text_tokens.iter().find(|&&t| t >= dims.vocab) {
            return Err(Error::invalid(format!("token {t} outside vocabulary of {}", dims.vocab)));
        }
        if self.label > 1 {
            return Err(Error::invalid(format!("label {} not in {{0, 1}}", self.label)));
        }
        Ok(())
    }
}

/// Sequence of per-step embeddings for one modality (`seq_len × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModalFeature {
    pub modality: Modality,
    pub values: Tensor,
}

impl ModalFeature {
    pub fn new(modality: Modality, values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::shape("modal feature", values.shape(), &[0, 0]));
        }
        Ok(ModalFeature { modality, values })
    }

    pub fn seq_len(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

/// Encoded sample: the three modality features plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub audio: ModalFeature,
    pub video: ModalFeature,
    pub text: ModalFeature,
    pub domain: usize,
    pub label: u8,
}

impl FeatureSample {
    pub fn feature(&self, m: Modality) -> &ModalFeature {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
            Modality::Text => &self.text,
        }
    }

    pub fn frames(&self) -> usize {
        self.video.seq_len()
    }

    /// Text density of each frame (last column of the video rows).
    pub fn densities(&self) -> Vec<f64> {
        let c = self.video.dim();
        self.video.values.data().chunks(c).map(|r| r[c - 1]).collect()
    }
}

/// Something that turns raw content into modality features.
pub trait Encoder: Send + Sync {
    fn dim(&self, modality: Modality) -> usize;
    fn encode(&self, modality: Modality, raw: &RawSample) -> Result<ModalFeature>;

    fn encode_sample(&self, raw: &RawSample) -> Result<FeatureSample> {
        Ok(FeatureSample {
            audio: self.encode(Modality::Audio, raw)?,
            video: self.encode(Modality::Video, raw)?,
            text: self.encode(Modality::Text, raw)?,
            domain: raw.domain_id,
            label: raw.label,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticEncoders {
    dims: Dims,
    patch_w: Tensor,
    patch_b: Vec<f64>,
    audio_w: Tensor,
    audio_b: Vec<f64>,
    tokens: Tensor,
}

impl SyntheticEncoders {
    pub fn new(dims: &Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pp = dims.patch * dims.patch;
        let patch_w = Tensor::randn(&mut rng, &[pp, dims.patch_dim], 1.0 / (pp as f64).sqrt());
        let patch_b = Tensor::randn(&mut rng, &[dims.patch_dim], 0.1).into_data();
        let audio_w = Tensor::randn(
            &mut rng,
            &[dims.audio_len, dims.audio_dim],
            1.0 / (dims.audio_len as f64).sqrt(),
        );
        let audio_b = Tensor::randn(&mut rng, &[dims.audio_dim], 0.1).into_data();
        let tokens = Tensor::randn(&mut rng, &[dims.vocab, dims.text_dim], 1.0);
        Ok(SyntheticEncoders {
            dims: dims.clone(),
            patch_w,
            patch_b,
            audio_w,
            audio_b,
            tokens,
        })
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    /// Pre-activation linear map of one flattened patch.
    pub fn patch_preactivation(&self, pixels: &[f64]) -> Vec<f64> {
        affine_row(pixels, &self.patch_w, &self.patch_b)
    }

    /// Pre-activation linear map of one audio window.
    pub fn audio_preactivation(&self, window: &[f64]) -> Vec<f64> {
        affine_row(window, &self.audio_w, &self.audio_b)
    }

    fn encode_frame(&self, frame: &Tensor, density: f64) -> Vec<f64> {
        let (side, p) = (self.dims.frame_size, self.dims.patch);
        let grid = self.dims.grid();
        let mut row = Vec::with_capacity(self.dims.video_dim());
        let mut pixels = Vec::with_capacity(p * p);
        for gi in 0..grid {
            for gj in 0..grid {
                pixels.clear();
                for di in 0..p {
                    let start = (gi * p + di) * side + gj * p;
                    pixels.extend_from_slice(&frame.data()[start..start + p]);
                }
                row.extend(self.patch_preactivation(&pixels).into_iter().map(f64::tanh));
            }
        }
        row.push(density);
        row
    }
}

fn affine_row(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    let cols = w.cols();
    let mut out = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wv;
        }
    }
    debug_assert_eq!(out.len(), cols);
    out
}

impl Encoder for SyntheticEncoders {
    fn dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Audio => self.dims.audio_dim,
            Modality::Video => self.dims.video_dim(),
            Modality::Text => self.dims.text_dim,
        }
    }

    fn encode(&self, modality: Modality, raw: &RawSample) -> Result<ModalFeature> {
        raw.validate(&self.dims)?;
        let rows: Vec<Vec<f64>> = match modality {
            Modality::Video => raw
                .video_frames
                .iter()
                .zip(&raw.frame_text_density)
                .map(|(f, &d)| self.encode_frame(f, d))
                .collect(),
            Modality::Audio => raw
                .audio
                .iter()
                .map(|a| self.audio_preactivation(a).into_iter().map(f64::tanh).collect())
                .collect(),
            Modality::Text => raw.text_tokens.iter().map(|&t| self.tokens.row(t).to_vec()).collect(),
        };
        ModalFeature::new(modality, Tensor::from_rows(&rows)?)
    }
}

/// Register the projection `{prefix}.w [d_in, d]`, `{prefix}.b [1, d]`.
pub fn init_projection<R: rand::Rng + ?Sized>(
    ps: &mut ParamSet,
    prefix: &str,
    d_in: usize,
    d: usize,
    rng: &mut R,
) -> Result<()> {
    nn::init_linear(ps, prefix, d_in, d, rng)
}

/// Mean-pool the rows of `x` and apply the affine map under `prefix`; `[1, d]`.
pub fn project_var(g: &Graph, ps: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let pooled = g.mean_rows(x);
    nn::linear(g, ps, prefix, pooled)
}

/// Shared-space vector for one modality feature.
pub fn project(x: &ModalFeature, ps: &ParamSet, prefix: &str) -> Result<Vec<f64>> {
    let g = Graph::new();
    let v = g.constant(&x.values);
    Ok(g.value(project_var(&g, ps, prefix, v)?))
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureLine {
    audio: Vec<Vec<f64>>,
    video: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
    domain: usize,
    label: u8,
}

fn to_line(s: &FeatureSample) -> FeatureLine {
    FeatureLine {
        audio: s.audio.values.row_vecs(),
        video: s.video.values.row_vecs(),
        text: s.text.values.row_vecs(),
        domain: s.domain,
        label: s.label,
    }
}

fn matrix(modality: Modality, rows: &[Vec<f64>], line: usize) -> Result<ModalFeature> {
    let t = Tensor::from_rows(rows).map_err(|e| Error::Parse {
        line,
        msg: format!("{modality}: {e}"),
    })?;
    ModalFeature::new(modality, t)
}

/// Read a JSON-lines feature file. Blank lines are skipped; every modality
/// must keep one width across the whole file.
pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<FeatureSample>> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut out: Vec<FeatureSample> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if rec.label > 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("label {} not in {{0, 1}}", rec.label),
            });
        }
        let sample = FeatureSample {
            audio: matrix(Modality::Audio, &rec.audio, lineno)?,
            video: matrix(Modality::Video, &rec.video, lineno)?,
            text: matrix(Modality::Text, &rec.text, lineno)?,
            domain: rec.domain,
            label: rec.label,
        };
        if let Some(first) = out.first() {
            for m in Modality::ALL {
                let (want, got) = (first.feature(m).dim(), sample.feature(m).dim());
                if want != got {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("{m} width {got} differs from {want} on earlier lines"),
                    });
                }
            }
        }
        out.push(sample);
    }
    let fakes = out.iter().filter(|s| s.label == 0).count();
    log::info!(
        "loaded {} samples ({} fake, {} real) from {}",
        out.len(),
        fakes,
        out.len() - fakes,
        path.as_ref().display()
    );
    Ok(out)
}

pub fn write_features(path: impl AsRef<Path>, samples: &[FeatureSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, &to_line(s))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn raw(seed: u64, dims: &Dims) -> RawSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 4;
        RawSample {
            video_frames: (0..frames)
                .map(|_| Tensor::randn(&mut rng, &[dims.frame_size, dims.frame_size], 1.0))
                .collect(),
            frame_text_density: (0..frames).map(|_| rng.random::<f64>()).collect(),
            audio: (0..6).map(|_| Tensor::randn(&mut rng, &[dims.audio_len], 1.0).into_data()).collect(),
            text_tokens: (0..5).map(|_| rng.random_range(0..dims.vocab)).collect(),
            domain_id: 2,
            label: 1,
        }
    }

    #[test]
    fn encoding_is_deterministic_and_blind_to_domain_and_label() {
        let dims = Dims::default();
        let enc = SyntheticEncoders::new(&dims, 11).unwrap();
        let a = raw(1, &dims);
        let mut b = a.clone();
        b.domain_id = 7;
        b.label = 0;
        for m in Modality::ALL {
            let fa = enc.encode(m, &a).unwrap();
            assert_eq!(fa, enc.encode(m, &a).unwrap());
            assert_eq!(fa, enc.encode(m, &b).unwrap());
            assert_eq!(fa.dim(), enc.dim(m));
        }
        let other = SyntheticEncoders::new(&dims, 11).unwrap();
        assert_eq!(enc.encode(Modality::Video, &a).unwrap(), other.encode(Modality::Video, &a).unwrap());
    }

    #[test]
    fn unknown_modality_tag_is_rejected() {
        assert!("smell".parse::<Modality>().is_err());
        assert_eq!("audio".parse::<Modality>().unwrap(), Modality::Audio);
    }

    #[test]
    fn video_rows_end_with_density() {
        let dims = Dims::default();
        let enc = SyntheticEncoders::new(&dims, 0).unwrap();
        let r = raw(2, &dims);
        let s = enc.encode_sample(&r).unwrap();
        assert_eq!(s.densities(), r.frame_text_density);
        assert_eq!(s.frames(), 4);
    }

    #[test]
    fn malformed_raw_sample_is_rejected() {
        let dims = Dims::default();
        let enc = SyntheticEncoders::new(&dims, 0).unwrap();
        let mut r = raw(3, &dims);
        r.text_tokens.clear();
        assert!(enc.encode(Modality::Text, &r).is_err());
        let mut r = raw(3, &dims);
        r.text_tokens[0] = dims.vocab;
        assert!(enc.encode(Modality::Text, &r).is_err());
    }

    #[test]
    fn projection_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        init_projection(&mut ps, "p", 3, 4, &mut rng).unwrap();
        ps.set("p.b", Tensor::matrix(1, 4, vec![0.5, -1.0, 2.0, 0.0]).unwrap()).unwrap();
        let zero = ModalFeature::new(Modality::Audio, Tensor::zeros(&[5, 3])).unwrap();
        assert_eq!(project(&zero, &ps, "p").unwrap(), vec![0.5, -1.0, 2.0, 0.0]);

        let mut id = ParamSet::new();
        id.insert("q.w", Tensor::eye(3)).unwrap();
        id.insert("q.b", Tensor::zeros(&[1, 3])).unwrap();
        let row = ModalFeature::new(Modality::Video, Tensor::matrix(1, 3, vec![1.5, -2.0, 0.25]).unwrap()).unwrap();
        assert_eq!(project(&row, &id, "q").unwrap(), vec![1.5, -2.0, 0.25]);

        let wrong = ModalFeature::new(Modality::Audio, Tensor::zeros(&[2, 5])).unwrap();
        assert!(project(&wrong, &ps, "p").is_err());
    }

    #[test]
    fn audio_and_video_project_to_shared_dim() {
        let dims = Dims::default();
        let enc = SyntheticEncoders::new(&dims, 0).unwrap();
        let s = enc.encode_sample(&raw(4, &dims)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        init_projection(&mut ps, "audio", dims.audio_dim, dims.shared_dim, &mut rng).unwrap();
        init_projection(&mut ps, "video", dims.video_dim(), dims.shared_dim, &mut rng).unwrap();
        assert_eq!(project(&s.audio, &ps, "audio").unwrap().len(), 32);
        assert_eq!(project(&s.video, &ps, "video").unwrap().len(), 32);
    }

    fn samples(n: usize) -> Vec<FeatureSample> {
        let dims = Dims::default();
        let enc = SyntheticEncoders::new(&dims, 9).unwrap();
        (0..n)
            .map(|i| {
                let mut r = raw(100 + i as u64, &dims);
                r.domain_id = i % 3;
                r.label = (i % 2) as u8;
                enc.encode_sample(&r).unwrap()
            })
            .collect()
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        let s = samples(5);
        write_features(&path, &s).unwrap();
        assert_eq!(load_features(&path).unwrap(), s);

        std::fs::write(&path, "").unwrap();
        assert!(load_features(&path).unwrap().is_empty());
    }

    #[test]
    fn corrupted_line_is_reported_by_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        write_features(&path, &samples(4)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let half = lines[2].len() / 2;
        lines[2].truncate(half);
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_features(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_widths_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        let good = r#"{"audio":[[1.0,2.0]],"video":[[0.5]],"text":[[1.0]],"domain":0,"label":1}"#;
        let bad = r#"{"audio":[[1.0,2.0,3.0]],"video":[[0.5]],"text":[[1.0]],"domain":0,"label":0}"#;
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match load_features(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let ragged = r#"{"audio":[[1.0,2.0],[1.0]],"video":[[0.5]],"text":[[1.0]],"domain":0,"label":0}"#;
        std::fs::write(&path, format!("{ragged}\n")).unwrap();
        assert!(load_features(&path).is_err());
    }
}
