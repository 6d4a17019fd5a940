//! Central finite-difference checks of [`Graph::backward`].

use rand::Rng;

use crate::error::Result;
use crate::numcore::graph::{Graph, Var};
use crate::numcore::nn;
use crate::numcore::tensor::{ParamSet, Tensor};

pub const STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Magnitude below which gradients are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, FLOOR)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Floor for a loss of magnitude `f`: central differences carry roughly
/// `ε·|f|/STEP` of rounding noise, which must stay below `GRAD_TOL` relative.
fn noise_floor(f: f64) -> f64 {
    FLOOR.max(f64::EPSILON * f.abs() / (STEP * GRAD_TOL))
}

/// Check every coordinate of every input; returns the max relative error.
pub fn check_vars<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t)).collect();
        let out = build(&g, &vars)?;
        Ok(g.scalar(out))
    };
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t)).collect();
    let out = build(&g, &vars)?;
    let grads = g.backward(out)?;
    let floor = noise_floor(g.scalar(out));

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].len()];
        let analytic = grads.wrt(*v).unwrap_or(&zeros).to_vec();
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + STEP;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = orig - STEP;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * STEP);
            worst = worst.max(relative_error_floored(analytic[i], numeric, floor));
        }
    }
    Ok(worst)
}

/// Per-parameter max relative error over up to `points` random coordinates
/// of each tensor in `ps`. `build` must be a deterministic function of `ps`.
pub fn check_params<F, R>(ps: &ParamSet, points: usize, rng: &mut R, build: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&Graph, &ParamSet) -> Result<Var>,
    R: Rng + ?Sized,
{
    let g = Graph::new();
    let out = build(&g, ps)?;
    let grads = g.backward(out)?;
    let floor = noise_floor(g.scalar(out));

    let mut probe = ps.clone();
    let mut report = Vec::new();
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    for name in names {
        let len = ps.get(&name)?.len();
        let zeros = vec![0.0; len];
        let analytic = grads.param(&name).unwrap_or(&zeros).to_vec();
        let coords: Vec<usize> = if len <= points {
            (0..len).collect()
        } else {
            (0..points).map(|_| rng.random_range(0..len)).collect()
        };
        let mut worst: f64 = 0.0;
        for i in coords {
            let orig = ps.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + STEP;
            let fp = {
                let g = Graph::new();
                let o = build(&g, &probe)?;
                g.scalar(o)
            };
            probe.get_mut(&name)?.data_mut()[i] = orig - STEP;
            let fm = {
                let g = Graph::new();
                let o = build(&g, &probe)?;
                g.scalar(o)
            };
            probe.get_mut(&name)?.data_mut()[i] = orig;
            worst = worst.max(relative_error_floored(analytic[i], (fp - fm) / (2.0 * STEP), floor));
        }
        report.push((name, worst));
    }
    Ok(report)
}

pub fn max_error(report: &[(String, f64)]) -> f64 {
    report.iter().map(|(_, e)| *e).fold(0.0, f64::max)
}

type Build = fn(&Graph, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let m = g.matmul(v[0], v[1])?;
            Ok(g.sum_sq(m))
        }),
        ("add_sub_mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            Ok(g.sum(m))
        }),
        ("scale_neg_sum_of", vec![vec![2, 2], vec![2, 2]], |g, v| {
            let a = g.scale(v[0], 2.5);
            let b = g.neg(v[1]);
            let s = g.sum_of(&[a, b, v[0]])?;
            let m = g.mul(s, v[1])?;
            Ok(g.mean(m))
        }),
        ("tanh_sigmoid", vec![vec![2, 3]], |g, v| {
            let a = g.tanh(v[0]);
            let b = g.sigmoid(a);
            Ok(g.sum_sq(b))
        }),
        ("exp_log", vec![vec![2, 3]], |g, v| {
            let e = g.exp(v[0]);
            let p = g.add_scalar(e, 1.0);
            let l = g.log(p);
            Ok(g.sum_sq(l))
        }),
        ("clamp", vec![vec![2, 3]], |g, v| {
            let c = g.clamp(v[0], -5.0, 5.0);
            Ok(g.sum_sq(c))
        }),
        ("softmax", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let s = g.softmax_rows(v[0]);
            let m = g.mul(s, v[1])?;
            Ok(g.sum(m))
        }),
        ("layernorm", vec![vec![3, 5], vec![3, 5]], |g, v| {
            let s = g.layernorm_rows(v[0], 1e-5);
            let m = g.mul(s, v[1])?;
            Ok(g.sum(m))
        }),
        ("mean_rows_concat", vec![vec![3, 2], vec![3, 4]], |g, v| {
            let c = g.concat_cols(&[v[0], v[1]])?;
            let r = g.concat_rows(&[c, c])?;
            let m = g.mean_rows(r);
            let t = g.tanh(m);
            Ok(g.sum_sq(t))
        }),
        ("gather_ops", vec![vec![4, 3]], |g, v| {
            let t = g.transpose(v[0])?;
            let s = g.slice_rows(t, 1, 3)?;
            let f = g.fit_cols(s, 6)?;
            let e = g.gather_rows(f, &[1, 0, 1])?;
            let r = g.reshape(e, &[9, 2])?;
            let c = g.slice_cols(r, 1, 2)?;
            let x = g.expand_rows(g.mean_rows(c), 2)?;
            let p = g.pick(r, &[0, 3, 3, 17])?;
            let th = g.tanh(g.concat_cols(&[g.reshape(x, &[1, 2])?, p])?);
            Ok(g.sum_sq(th))
        }),
        ("dot", vec![vec![1, 4], vec![1, 4]], |g, v| {
            let d = g.dot(v[0], v[1])?;
            Ok(g.tanh(d))
        }),
        ("conv2d", vec![vec![16, 2], vec![18, 3], vec![1, 3]], |g, v| {
            let (y, _, _) = g.conv2d(v[0], (4, 4), v[1], v[2], 3, 2, 1)?;
            let t = g.tanh(y);
            Ok(g.sum_sq(t))
        }),
        ("conv1d", vec![vec![7, 2], vec![6, 2], vec![1, 2]], |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], 3, 2, 1)?;
            let t = g.tanh(y);
            Ok(g.sum_sq(t))
        }),
        ("logsumexp", vec![vec![2, 4]], |g, v| Ok(g.logsumexp(v[0]))),
        ("attention", vec![vec![2, 3], vec![4, 3], vec![3, 2], vec![3, 2], vec![3, 3]], |g, v| {
            let w = nn::AttnWeights {
                query: v[2],
                key: v[3],
                value: v[4],
            };
            let out = nn::attention(g, v[0], v[1], v[1], &w)?;
            Ok(g.sum_sq(out))
        }),
        ("bce", vec![vec![1, 3], vec![3, 1]], |g, v| {
            let z = g.matmul(v[0], v[1])?;
            let p = g.sigmoid(z);
            nn::bce(g, p, 1)
        }),
    ]
}

/// Max relative error of every primitive over `points` random inputs each.
pub fn op_suite<R: Rng + ?Sized>(rng: &mut R, points: usize) -> Result<Vec<(String, f64)>> {
    let mut report = Vec::new();
    for (name, shapes, build) in op_cases() {
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(rng, s, 1.0)).collect();
            worst = worst.max(check_vars(&inputs, build)?);
        }
        report.push((name.to_string(), worst));
    }
    Ok(report)
}
