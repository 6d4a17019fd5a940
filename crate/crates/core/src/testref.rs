//! Plain-loop reference implementations used as oracles in unit tests.

use crate::numcore::nn::LN_EPS;
use crate::numcore::{ParamSet, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    t.row_vecs()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let p = b[0].len();
    a.iter()
        .map(|row| {
            (0..p)
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect()
}

pub fn mean_rows(a: &Mat) -> Vec<f64> {
    let n = a.len() as f64;
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

pub fn layernorm(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let m = r.iter().sum::<f64>() / n;
            let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            r.iter().map(|x| (x - m) / (v + LN_EPS).sqrt()).collect()
        })
        .collect()
}

pub fn param(ps: &ParamSet, name: &str) -> Mat {
    mat(ps.get(name).unwrap())
}

/// `x·W + b` with weights `{prefix}.w`, `{prefix}.b`.
pub fn linear(ps: &ParamSet, prefix: &str, x: &Mat) -> Mat {
    let b = &param(ps, &format!("{prefix}.b"))[0];
    matmul(x, &param(ps, &format!("{prefix}.w")))
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

/// Single-head attention with weights `{prefix}.wq/.wk/.wv`.
pub fn attend(ps: &ParamSet, prefix: &str, query: &Mat, kv: &Mat) -> Mat {
    let q = matmul(query, &param(ps, &format!("{prefix}.wq")));
    let k = matmul(kv, &param(ps, &format!("{prefix}.wk")));
    let v = matmul(kv, &param(ps, &format!("{prefix}.wv")));
    let scale = (q[0].len() as f64).sqrt();
    q.iter()
        .map(|qi| {
            let s: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / scale)
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(&v).map(|(w, vr)| w / z * vr[c]).sum())
                .collect()
        })
        .collect()
}
