//! Emotional and semantic features: text queries audio for the former and
//! video for the latter.

use rand::Rng;

use crate::config::Dims;
use crate::error::{Error, Result};
use crate::numcore::nn;
use crate::numcore::{Graph, ParamSet, Var};

#[derive(Debug, Clone, Copy)]
pub struct AffectFeatures {
    pub emo: Var,
    pub sem: Var,
}

pub fn init_params<R: Rng + ?Sized>(ps: &mut ParamSet, dims: &Dims, rng: &mut R) -> Result<()> {
    let (dt, d) = (dims.text_dim, dims.shared_dim);
    nn::init_attention(ps, "affect.emo_att", dt, dims.audio_dim, d, d, rng)?;
    nn::init_linear(ps, "affect.emo_proj", d, d, rng)?;
    nn::init_attention(ps, "affect.sem_att", dt, dims.video_dim(), d, d, rng)?;
    nn::init_linear(ps, "affect.sem_proj", d, d, rng)
}

/// `[1, d]` projection of the pooled text-queried attention over `kv`.
fn branch(g: &Graph, ps: &ParamSet, name: &str, text: Var, kv: Var) -> Result<Var> {
    let att = nn::attend(g, ps, &format!("affect.{name}_att"), text, kv)?;
    nn::linear(g, ps, &format!("affect.{name}_proj"), g.mean_rows(att))
}

pub fn emotional(g: &Graph, ps: &ParamSet, text: Var, audio: Var) -> Result<Var> {
    if g.shape(text).len() != 2 || g.rows(text) == 0 {
        return Err(Error::EmptySequence("affect text"));
    }
    branch(g, ps, "emo", text, audio)
}

pub fn semantic(g: &Graph, ps: &ParamSet, text: Var, video: Var) -> Result<Var> {
    if g.shape(text).len() != 2 || g.rows(text) == 0 {
        return Err(Error::EmptySequence("affect text"));
    }
    branch(g, ps, "sem", text, video)
}

pub fn affect_features(g: &Graph, ps: &ParamSet, text: Var, audio: Var, video: Var) -> Result<AffectFeatures> {
    Ok(AffectFeatures {
        emo: emotional(g, ps, text, audio)?,
        sem: semantic(g, ps, text, video)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{check_params, max_error, GRAD_TOL};
    use crate::numcore::Tensor;
    use crate::testref as r;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> Dims {
        Dims {
            frame_size: 4,
            patch: 2,
            patch_dim: 2,
            audio_len: 4,
            audio_dim: 5,
            vocab: 6,
            text_dim: 3,
            shared_dim: 4,
        }
    }

    fn setup(seed: u64) -> (Dims, ParamSet, ChaCha8Rng) {
        let dims = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        init_params(&mut ps, &dims, &mut rng).unwrap();
        (dims, ps, rng)
    }

    fn run(ps: &ParamSet, t: &Tensor, a: &Tensor, v: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let g = Graph::new();
        let f = affect_features(&g, ps, g.constant(t), g.constant(a), g.constant(v)).unwrap();
        (g.value(f.emo), g.value(f.sem))
    }

    #[test]
    fn single_audio_row_is_projected_directly() {
        let (dims, ps, mut rng) = setup(1);
        let t = Tensor::randn(&mut rng, &[3, dims.text_dim], 1.0);
        let a = Tensor::randn(&mut rng, &[1, dims.audio_dim], 1.0);
        let v = Tensor::randn(&mut rng, &[2, dims.video_dim()], 1.0);
        let (emo, _) = run(&ps, &t, &a, &v);
        let value = r::matmul(&r::mat(&a), &r::param(&ps, "affect.emo_att.wv"));
        let expect = r::linear(&ps, "affect.emo_proj", &value);
        for (x, y) in emo.iter().zip(&expect[0]) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn audio_order_does_not_matter() {
        let (dims, ps, mut rng) = setup(2);
        let t = Tensor::randn(&mut rng, &[3, dims.text_dim], 1.0);
        let a = Tensor::randn(&mut rng, &[4, dims.audio_dim], 1.0);
        let v = Tensor::randn(&mut rng, &[2, dims.video_dim()], 1.0);
        let mut rows = a.row_vecs();
        rows.reverse();
        rows.swap(0, 2);
        let (e1, _) = run(&ps, &t, &a, &v);
        let (e2, _) = run(&ps, &t, &Tensor::from_rows(&rows).unwrap(), &v);
        for (x, y) in e1.iter().zip(&e2) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn branches_see_only_their_modality() {
        let (dims, ps, mut rng) = setup(3);
        let t = Tensor::randn(&mut rng, &[3, dims.text_dim], 1.0);
        let a = Tensor::randn(&mut rng, &[4, dims.audio_dim], 1.0);
        let v = Tensor::randn(&mut rng, &[2, dims.video_dim()], 1.0);
        let a2 = Tensor::randn(&mut rng, &[6, dims.audio_dim], 1.0);
        let v2 = Tensor::randn(&mut rng, &[5, dims.video_dim()], 1.0);
        let (e, s) = run(&ps, &t, &a, &v);
        assert_eq!(run(&ps, &t, &a2, &v).1, s);
        assert_eq!(run(&ps, &t, &a, &v2).0, e);
    }

    #[test]
    fn both_paths_gradcheck() {
        let (dims, ps, mut rng) = setup(4);
        let t = Tensor::randn(&mut rng, &[3, dims.text_dim], 1.0);
        let a = Tensor::randn(&mut rng, &[4, dims.audio_dim], 1.0);
        let v = Tensor::randn(&mut rng, &[2, dims.video_dim()], 1.0);
        let report = check_params(&ps, 10, &mut rng, |g, ps| {
            let f = affect_features(g, ps, g.constant(&t), g.constant(&a), g.constant(&v))?;
            let both = g.concat_cols(&[f.emo, f.sem])?;
            Ok(g.sum_sq(g.tanh(both)))
        })
        .unwrap();
        assert!(max_error(&report) <= GRAD_TOL, "{report:?}");
    }
}
