//! Temporal features: segment a sample at its text-rich frames, give each
//! segment a bin embedding and a sinusoidal index code, and fuse the
//! per-segment multimodal sums with self-attention.

use rand::Rng;

use crate::config::Dims;
use crate::encoders::FeatureSample;
use crate::error::{Error, Result};
use crate::numcore::nn;
use crate::numcore::{Graph, ParamSet, Tensor, Var};

/// Synthetic clips carry no container metadata; frames are one second apart.
pub const DEFAULT_FPS: f64 = 1.0;

pub const TPE_TABLE: &str = "temporal.tpe";

/// Time-aligned slice of a sample. Rows of `text` and `audio` are assigned to
/// frames proportionally; a slice that receives none gets a single zero row.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub text: Tensor,
    pub video: Tensor,
    pub audio: Tensor,
    /// Inclusive frame range.
    pub interval: (usize, usize),
    pub fps: f64,
    pub vframes: usize,
}

/// Inclusive frame intervals for sorted anchors over `frames` frames.
pub fn segment_intervals(frames: usize, anchors: &[usize]) -> Result<Vec<(usize, usize)>> {
    if frames == 0 {
        return Err(Error::EmptySequence("segment frames"));
    }
    if anchors.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("anchors must be strictly increasing"));
    }
    if anchors.last().is_some_and(|&a| a >= frames) {
        return Err(Error::invalid(format!("anchor outside {frames} frames")));
    }
    if anchors.is_empty() {
        return Ok(vec![(0, frames - 1)]);
    }
    let n = anchors.len();
    Ok((0..n)
        .map(|i| {
            let start = if i == 0 { 0 } else { anchors[i] };
            let end = if i + 1 < n { anchors[i + 1] - 1 } else { frames - 1 };
            (start, end)
        })
        .collect())
}

/// Rows of a `len`-row sequence that fall in frames `[start, end]` when
/// row `j` is placed at frame `⌊j·frames/len⌋`.
fn aligned_rows(t: &Tensor, frames: usize, (start, end): (usize, usize)) -> Result<Tensor> {
    let len = t.rows();
    let rows: Vec<Vec<f64>> = (0..len)
        .filter(|&j| {
            let f = j * frames / len;
            (start..=end).contains(&f)
        })
        .map(|j| t.row(j).to_vec())
        .collect();
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[1, t.cols()]));
    }
    Tensor::from_rows(&rows)
}

pub fn segment_by_anchors(sample: &FeatureSample, anchors: &[usize]) -> Result<Vec<Segment>> {
    let frames = sample.frames();
    let intervals = segment_intervals(frames, anchors)?;
    intervals
        .into_iter()
        .map(|iv| {
            let idx: Vec<usize> = (iv.0..=iv.1).collect();
            let video_rows: Vec<Vec<f64>> = idx.iter().map(|&i| sample.video.values.row(i).to_vec()).collect();
            Ok(Segment {
                text: aligned_rows(&sample.text.values, frames, iv)?,
                video: Tensor::from_rows(&video_rows)?,
                audio: aligned_rows(&sample.audio.values, frames, iv)?,
                interval: iv,
                fps: DEFAULT_FPS,
                vframes: frames,
            })
        })
        .collect()
}

/// Frames whose text density reaches `threshold`.
pub fn anchors(sample: &FeatureSample, threshold: f64) -> Vec<usize> {
    sample
        .densities()
        .iter()
        .enumerate()
        .filter(|(_, &d)| d >= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Bin index of each of `n` segments among `bins` equal-frequency bins.
/// The step is `max(1, ⌊n/bins⌋)` so fewer segments than bins still works.
pub fn tpe_bins(n: usize, bins: usize) -> Vec<usize> {
    let step = (n / bins.max(1)).max(1);
    (0..n).map(|i| (i / step).min(bins.saturating_sub(1))).collect()
}

/// Rows of the learned bin table for `n` segments, `[n, d]`.
pub fn tpe(g: &Graph, ps: &ParamSet, n: usize, bins: usize) -> Result<Var> {
    let table = g.param(ps, TPE_TABLE)?;
    if g.rows(table) != bins {
        return Err(Error::shape("tpe", &g.shape(table), &[bins]));
    }
    g.gather_rows(table, &tpe_bins(n, bins))
}

/// Fixed sinusoidal code of segment indices `0..n`, `[n, d]`.
pub fn de(n: usize, d: usize) -> Result<Tensor> {
    if n == 0 || d < 2 {
        return Err(Error::invalid(format!("duration code needs n >= 1 and d >= 2, got n={n}, d={d}")));
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            let angle = i as f64 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(n, d, data)
}

pub fn init_params<R: Rng + ?Sized>(ps: &mut ParamSet, dims: &Dims, bins: usize, rng: &mut R) -> Result<()> {
    let d = dims.shared_dim;
    ps.insert(TPE_TABLE, Tensor::randn(rng, &[bins, d], 0.1))?;
    nn::init_linear(ps, "temporal.text", dims.text_dim, d, rng)?;
    nn::init_linear(ps, "temporal.video", dims.video_dim(), d, rng)?;
    nn::init_linear(ps, "temporal.audio", dims.audio_dim, d, rng)?;
    nn::init_attention(ps, "temporal.av", d, d, d, d, rng)?;
    nn::init_attention(ps, "temporal.fuse", d, d, d, d, rng)
}

/// The three modal addends of one segment, each `[1, d]`.
#[derive(Debug, Clone, Copy)]
pub struct SegmentParts {
    pub text: Var,
    pub video: Var,
    pub audio: Var,
}

pub fn segment_parts(g: &Graph, ps: &ParamSet, seg: &Segment) -> Result<SegmentParts> {
    let text = nn::linear(g, ps, "temporal.text", g.mean_rows(g.constant(&seg.text)))?;
    let v = nn::linear(g, ps, "temporal.video", g.constant(&seg.video))?;
    let a = nn::linear(g, ps, "temporal.audio", g.constant(&seg.audio))?;
    let (nv, na) = (g.rows(v), g.rows(a));
    let both = g.concat_rows(&[v, a])?;
    let fused = nn::attend(g, ps, "temporal.av", both, both)?;
    Ok(SegmentParts {
        text,
        video: g.mean_rows(g.slice_rows(fused, 0, nv)?),
        audio: g.mean_rows(g.slice_rows(fused, nv, nv + na)?),
    })
}

/// Per-segment representations `DE + TPE + text + video + audio`, `[n, d]`.
pub fn segment_sums(g: &Graph, ps: &ParamSet, segments: &[Segment], bins: usize) -> Result<Var> {
    let n = segments.len();
    if n == 0 {
        return Err(Error::EmptySequence("segments"));
    }
    let pos = tpe(g, ps, n, bins)?;
    let d = g.cols(pos);
    let dur = g.constant(&de(n, d)?);
    let mut rows = Vec::with_capacity(n);
    for seg in segments {
        let p = segment_parts(g, ps, seg)?;
        rows.push(g.sum_of(&[p.text, p.video, p.audio])?);
    }
    let modal = g.concat_rows(&rows)?;
    g.sum_of(&[dur, pos, modal])
}

/// Temporal feature `[1, d]`: self-attention over segment sums, then mean.
pub fn temporal_features(g: &Graph, ps: &ParamSet, segments: &[Segment], bins: usize) -> Result<Var> {
    let segs = segment_sums(g, ps, segments, bins)?;
    let att = nn::attend(g, ps, "temporal.fuse", segs, segs)?;
    Ok(g.mean_rows(att))
}

/// Segment a sample at its text-rich frames and compute its temporal feature.
pub fn sample_temporal(g: &Graph, ps: &ParamSet, sample: &FeatureSample, threshold: f64, bins: usize) -> Result<Var> {
    let segments = segment_by_anchors(sample, &anchors(sample, threshold))?;
    temporal_features(g, ps, &segments, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{ModalFeature, Modality};
    use crate::numcore::gradcheck::{check_params, max_error, GRAD_TOL};
    use crate::testref as r;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interval_cases() {
        assert_eq!(segment_intervals(10, &[0]).unwrap(), vec![(0, 9)]);
        assert_eq!(segment_intervals(10, &[0, 5]).unwrap(), vec![(0, 4), (5, 9)]);
        assert_eq!(segment_intervals(10, &[3, 5]).unwrap(), vec![(0, 4), (5, 9)]);
        assert_eq!(segment_intervals(10, &[]).unwrap(), vec![(0, 9)]);
        assert!(segment_intervals(10, &[5, 3]).is_err());
        assert!(segment_intervals(10, &[10]).is_err());
    }

    proptest! {
        #[test]
        fn intervals_cover_and_are_disjoint(frames in 1usize..60, picks in proptest::collection::btree_set(0usize..60, 0..12)) {
            let anchors: Vec<usize> = picks.into_iter().filter(|&a| a < frames).collect();
            let iv = segment_intervals(frames, &anchors).unwrap();
            prop_assert_eq!(iv.len(), anchors.len().max(1));
            prop_assert_eq!(iv[0].0, 0);
            prop_assert_eq!(iv.last().unwrap().1, frames - 1);
            for w in iv.windows(2) {
                prop_assert_eq!(w[0].1 + 1, w[1].0);
            }
            for (s, e) in iv {
                prop_assert!(s <= e);
            }
        }

        #[test]
        fn bins_are_monotone(n in 1usize..200, b in 1usize..20) {
            let bins = tpe_bins(n, b);
            prop_assert!(bins.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(bins.iter().all(|&x| x < b));
        }
    }

    #[test]
    fn tpe_bin_cases() {
        let b = tpe_bins(10, 5);
        assert_eq!(b[6], 3);
        assert_eq!(b[9], 4);
        assert_eq!(tpe_bins(3, 5), vec![0, 1, 2]);
    }

    #[test]
    fn de_cases() {
        let t = de(2, 6).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(t.row(1)[0], 1f64.sin());
        assert!((t.row(1)[0] - 0.8414709848078965).abs() < 1e-15);
        assert!(de(0, 4).is_err() && de(3, 1).is_err());
    }

    #[test]
    fn de_rows_are_distinct() {
        let t = de(1000, 32).unwrap();
        let mut rows: Vec<Vec<u64>> = (0..1000).map(|i| t.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 1000);
    }

    fn setup(seed: u64) -> (Dims, ParamSet, ChaCha8Rng) {
        let dims = Dims::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        init_params(&mut ps, &dims, 8, &mut rng).unwrap();
        (dims, ps, rng)
    }

    fn zero_segment(dims: &Dims) -> Segment {
        Segment {
            text: Tensor::zeros(&[2, dims.text_dim]),
            video: Tensor::zeros(&[3, dims.video_dim()]),
            audio: Tensor::zeros(&[2, dims.audio_dim]),
            interval: (0, 2),
            fps: DEFAULT_FPS,
            vframes: 3,
        }
    }

    fn random_segment(rng: &mut ChaCha8Rng, dims: &Dims, frames: usize) -> Segment {
        Segment {
            text: Tensor::randn(rng, &[2, dims.text_dim], 1.0),
            video: Tensor::randn(rng, &[frames, dims.video_dim()], 0.3),
            audio: Tensor::randn(rng, &[3, dims.audio_dim], 1.0),
            interval: (0, frames - 1),
            fps: DEFAULT_FPS,
            vframes: frames,
        }
    }

    #[test]
    fn zero_segment_reduces_to_position_codes() {
        let (dims, mut ps, _) = setup(1);
        ps.set("temporal.fuse.wv", Tensor::eye(dims.shared_dim)).unwrap();
        let g = Graph::new();
        let out = g.value(temporal_features(&g, &ps, &[zero_segment(&dims)], 8).unwrap());
        let expect: Vec<f64> = de(1, 32)
            .unwrap()
            .data()
            .iter()
            .zip(ps.get(TPE_TABLE).unwrap().row(0))
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn text_shift_passes_through_value_pathway() {
        let (dims, mut ps, mut rng) = setup(2);
        let d = dims.shared_dim;
        ps.set("temporal.fuse.wv", Tensor::eye(d)).unwrap();
        ps.set("temporal.fuse.wq", Tensor::zeros(&[d, d])).unwrap();
        let segs: Vec<Segment> = (0..3).map(|_| random_segment(&mut rng, &dims, 2)).collect();
        let run = |ps: &ParamSet| {
            let g = Graph::new();
            g.value(temporal_features(&g, ps, &segs, 8).unwrap())
        };
        let base = run(&ps);
        let c = 0.75;
        ps.set("temporal.text.b", Tensor::filled(&[1, d], c)).unwrap();
        for (a, b) in run(&ps).iter().zip(&base) {
            assert!((a - b - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn segment_sum_is_exact() {
        let (dims, ps, mut rng) = setup(3);
        let segs: Vec<Segment> = (0..4).map(|_| random_segment(&mut rng, &dims, 3)).collect();
        let g = Graph::new();
        let sums = g.tensor(segment_sums(&g, &ps, &segs, 8).unwrap());
        let dur = de(4, 32).unwrap();
        let bins = tpe_bins(4, 8);
        let table = ps.get(TPE_TABLE).unwrap();
        for (i, seg) in segs.iter().enumerate() {
            let p = segment_parts(&g, &ps, seg).unwrap();
            let modal: Vec<f64> = [p.text, p.video, p.audio]
                .iter()
                .map(|v| g.value(*v))
                .fold(vec![0.0; 32], |acc, v| acc.iter().zip(&v).map(|(a, b)| a + b).collect());
            for j in 0..32 {
                let rest = sums.row(i)[j] - dur.row(i)[j] - table.row(bins[i])[j];
                assert!((rest - modal[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matches_scripted_recomputation() {
        let (dims, ps, mut rng) = setup(4);
        let segs: Vec<Segment> = (0..3).map(|i| random_segment(&mut rng, &dims, i + 1)).collect();
        let g = Graph::new();
        let out = g.value(temporal_features(&g, &ps, &segs, 8).unwrap());

        let dur = r::mat(&de(3, 32).unwrap());
        let table = r::param(&ps, TPE_TABLE);
        let mut seg_rows = Vec::new();
        for (i, s) in segs.iter().enumerate() {
            let t = r::linear(&ps, "temporal.text", &vec![r::mean_rows(&r::mat(&s.text))]);
            let v = r::linear(&ps, "temporal.video", &r::mat(&s.video));
            let a = r::linear(&ps, "temporal.audio", &r::mat(&s.audio));
            let both: r::Mat = v.iter().chain(&a).cloned().collect();
            let fused = r::attend(&ps, "temporal.av", &both, &both);
            let sv = r::mean_rows(&fused[..v.len()].to_vec());
            let sa = r::mean_rows(&fused[v.len()..].to_vec());
            let bin = tpe_bins(3, 8)[i];
            seg_rows.push((0..32).map(|j| dur[i][j] + table[bin][j] + t[0][j] + sv[j] + sa[j]).collect());
        }
        let expect = r::mean_rows(&r::attend(&ps, "temporal.fuse", &seg_rows, &seg_rows));
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    fn sample(rng: &mut ChaCha8Rng, dims: &Dims, densities: &[f64]) -> FeatureSample {
        let rows: Vec<Vec<f64>> = densities
            .iter()
            .map(|&d| {
                let mut row = Tensor::randn(rng, &[dims.video_dim() - 1], 0.3).into_data();
                row.push(d);
                row
            })
            .collect();
        FeatureSample {
            audio: ModalFeature::new(Modality::Audio, Tensor::randn(rng, &[5, dims.audio_dim], 1.0)).unwrap(),
            video: ModalFeature::new(Modality::Video, Tensor::from_rows(&rows).unwrap()).unwrap(),
            text: ModalFeature::new(Modality::Text, Tensor::randn(rng, &[3, dims.text_dim], 1.0)).unwrap(),
            domain: 0,
            label: 1,
        }
    }

    #[test]
    fn sample_segmentation_aligns_rows() {
        let (dims, _, mut rng) = setup(5);
        let s = sample(&mut rng, &dims, &[0.0, 0.5, 0.1, 0.1, 0.9, 0.0]);
        assert_eq!(anchors(&s, 0.3), vec![1, 4]);
        let segs = segment_by_anchors(&s, &[1, 4]).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].interval, segs[1].interval), ((0, 3), (4, 5)));
        assert_eq!(segs[0].video.rows() + segs[1].video.rows(), 6);
        // 5 audio rows over 6 frames land on frames 0,1,2,3,4
        assert_eq!((segs[0].audio.rows(), segs[1].audio.rows()), (4, 1));
        // 3 tokens land on frames 0,2,4
        assert_eq!((segs[0].text.rows(), segs[1].text.rows()), (2, 1));
    }

    #[test]
    fn full_path_gradcheck() {
        let (dims, ps, mut rng) = setup(6);
        let s = sample(&mut rng, &dims, &[0.5, 0.1, 0.6, 0.0]);
        let report = check_params(&ps, 10, &mut rng, |g, ps| {
            let x = sample_temporal(g, ps, &s, 0.3, 8)?;
            Ok(g.sum_sq(g.tanh(x)))
        })
        .unwrap();
        assert!(max_error(&report) <= GRAD_TOL, "{report:?}");
    }
}
