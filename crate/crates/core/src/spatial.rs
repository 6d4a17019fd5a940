//! Spatial features from text-rich frames.
//!
//! Each selected frame's patch grid is refined by a bidirectional attention
//! block against a prompt built from its detected text boxes, downsampled by
//! two strided convolutions, flattened to the shared width, and finally all
//! frames are fused by self-attention and a mean.

use std::f64::consts::PI;

use rand::Rng;

use crate::config::{Dims, SpatialConfig};
use crate::encoders::FeatureSample;
use crate::error::{Error, Result};
use crate::numcore::nn;
use crate::numcore::{Graph, ParamSet, Tensor, Var};

/// Detected text boxes of one frame and their prompt embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextAreaPrompt {
    pub frame: usize,
    /// `(x0, y0, x1, y1)` in normalized image coordinates.
    pub boxes: Vec<[f64; 4]>,
    /// `n_boxes × d_p`, absent when no box was found.
    pub embedding: Option<Tensor>,
}

/// Stand-in text detector: `round(density · max_boxes)` boxes tiled along
/// the bottom quarter of the frame (where subtitles sit), each embedded by
/// a fixed sin/cos code of its four coordinates.
pub fn detect_text_area(frame: usize, density: f64, max_boxes: usize, prompt_dim: usize) -> Result<TextAreaPrompt> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::invalid(format!("text density {density} outside [0, 1]")));
    }
    let n = (density * max_boxes as f64).round() as usize;
    let boxes: Vec<[f64; 4]> = (0..n)
        .map(|i| [i as f64 / n as f64, 0.75, (i + 1) as f64 / n as f64, 1.0])
        .collect();
    let embedding = if n == 0 {
        None
    } else {
        let rows: Vec<Vec<f64>> = boxes.iter().map(|b| box_code(b, prompt_dim)).collect();
        Some(Tensor::from_rows(&rows)?)
    };
    Ok(TextAreaPrompt { frame, boxes, embedding })
}

fn box_code(b: &[f64; 4], width: usize) -> Vec<f64> {
    let mut code: Vec<f64> = Vec::with_capacity(width);
    let mut freq = 1.0;
    while code.len() < width {
        for c in b {
            code.push((PI * freq * c).sin());
            code.push((PI * freq * c).cos());
        }
        freq *= 2.0;
    }
    code.truncate(width);
    code
}

pub fn init_params<R: Rng + ?Sized>(ps: &mut ParamSet, dims: &Dims, cfg: &SpatialConfig, rng: &mut R) -> Result<()> {
    let (dv, dp) = (dims.patch_dim, prompt_dim(dims));
    nn::init_attention(ps, "spatial.prompt_self", dp, dp, dp, dp, rng)?;
    nn::init_attention(ps, "spatial.prompt_cross", dp, dv, dp, dp, rng)?;
    nn::init_linear(ps, "spatial.mlp_in", dp, 2 * dp, rng)?;
    nn::init_linear(ps, "spatial.mlp_out", 2 * dp, dp, rng)?;
    nn::init_attention(ps, "spatial.frame_cross", dv, dp, dv, dv, rng)?;
    let k = cfg.conv_kernel;
    nn::init_linear(ps, "spatial.conv1", k * k * dv, dv, rng)?;
    nn::init_linear(ps, "spatial.conv2", k * k * dv, dv, rng)?;
    let d = dims.shared_dim;
    nn::init_attention(ps, "spatial.fuse", d, d, d, d, rng)
}

/// The prompt width equals the patch channel width.
pub fn prompt_dim(dims: &Dims) -> usize {
    dims.patch_dim
}

/// Refine frame patches `frame [P, d_v]` with the text prompt `[n, d_p]`.
/// Without a prompt the frame is only normalized.
pub fn bidirectional_attention(g: &Graph, ps: &ParamSet, prompt: Option<Var>, frame: Var) -> Result<Var> {
    let Some(prompt) = prompt else {
        return Ok(nn::layernorm(g, frame));
    };
    let self_att = nn::attend(g, ps, "spatial.prompt_self", prompt, prompt)?;
    let prompt_hat = nn::layernorm(g, g.add(prompt, self_att)?);
    let cross = nn::attend(g, ps, "spatial.prompt_cross", prompt_hat, frame)?;
    let prompt_dot = nn::layernorm(g, g.add(prompt_hat, cross)?);
    let hidden = g.tanh(nn::linear(g, ps, "spatial.mlp_in", prompt_dot)?);
    let mlp = nn::linear(g, ps, "spatial.mlp_out", hidden)?;
    // The frame patches query the prompt so the output keeps the frame's shape.
    let back = nn::attend(g, ps, "spatial.frame_cross", frame, mlp)?;
    Ok(nn::layernorm(g, g.add(frame, back)?))
}

/// Two strided convolutions over the refined patch grid, flattened and
/// zero-padded or truncated to `width`; `[1, width]`.
pub fn downsample(g: &Graph, ps: &ParamSet, x: Var, grid: usize, cfg: &SpatialConfig, width: usize) -> Result<Var> {
    let (k, s) = (cfg.conv_kernel, cfg.conv_stride);
    let pad = k / 2;
    let (w1, b1) = (g.param(ps, "spatial.conv1.w")?, g.param(ps, "spatial.conv1.b")?);
    let (y, h, w) = g.conv2d(x, (grid, grid), w1, b1, k, s, pad)?;
    let y = g.tanh(y);
    let (w2, b2) = (g.param(ps, "spatial.conv2.w")?, g.param(ps, "spatial.conv2.b")?);
    let (y, h, w) = g.conv2d(y, (h, w), w2, b2, k, s, pad)?;
    let y = g.tanh(y);
    let flat = g.reshape(y, &[1, h * w * g.cols(y)])?;
    g.fit_cols(flat, width)
}

/// Indices of text-rich frames, or the single densest frame if none qualify.
pub fn select_frames(densities: &[f64], threshold: f64) -> Result<Vec<usize>> {
    if densities.is_empty() {
        return Err(Error::EmptySequence("frame densities"));
    }
    let rich: Vec<usize> = (0..densities.len()).filter(|&i| densities[i] >= threshold).collect();
    if !rich.is_empty() {
        return Ok(rich);
    }
    let mut best = 0;
    for (i, &d) in densities.iter().enumerate() {
        if d > densities[best] {
            best = i;
        }
    }
    Ok(vec![best])
}

/// Patch grid of frame `i` as `[grid², patch_dim]`.
pub fn frame_patches(sample: &FeatureSample, i: usize, dims: &Dims) -> Result<Tensor> {
    let want = dims.video_dim();
    if sample.video.dim() != want {
        return Err(Error::shape("frame_patches", &[sample.video.dim()], &[want]));
    }
    let row = sample.video.values.row(i);
    let cells = dims.grid() * dims.grid();
    Tensor::matrix(cells, dims.patch_dim, row[..cells * dims.patch_dim].to_vec())
}

/// Per-frame spatial encoding `X^d` of shape `[1, shared_dim]`.
pub fn frame_feature(
    g: &Graph,
    ps: &ParamSet,
    patches: &Tensor,
    density: f64,
    frame: usize,
    dims: &Dims,
    cfg: &SpatialConfig,
) -> Result<Var> {
    let prompt = detect_text_area(frame, density, cfg.max_boxes, prompt_dim(dims))?;
    let prompt = prompt.embedding.as_ref().map(|t| g.constant(t));
    let x = g.constant(patches);
    let refined = bidirectional_attention(g, ps, prompt, x)?;
    downsample(g, ps, refined, dims.grid(), cfg, dims.shared_dim)
}

/// Fuse per-frame encodings `[D, d]` into one `[1, d]` vector.
pub fn fuse_frames(g: &Graph, ps: &ParamSet, frames: Var) -> Result<Var> {
    let att = nn::attend(g, ps, "spatial.fuse", frames, frames)?;
    Ok(g.mean_rows(att))
}

/// Spatial feature of a sample, `[1, shared_dim]`.
pub fn spatial_features(g: &Graph, ps: &ParamSet, sample: &FeatureSample, dims: &Dims, cfg: &SpatialConfig) -> Result<Var> {
    let densities = sample.densities();
    let picked = select_frames(&densities, cfg.text_rich_threshold)?;
    let mut rows = Vec::with_capacity(picked.len());
    for &i in &picked {
        let patches = frame_patches(sample, i, dims)?;
        rows.push(frame_feature(g, ps, &patches, densities[i], i, dims, cfg)?);
    }
    fuse_frames(g, ps, g.concat_rows(&rows)?)
}
