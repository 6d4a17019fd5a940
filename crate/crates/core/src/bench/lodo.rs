//! Leave-one-domain-out protocol, ablation runner and CSV tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::baseline::Baseline;
use crate::config::ModelConfig;
use crate::encoders::FeatureSample;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::pipeline::metrics::Metrics;
use crate::pipeline::{evaluate, train, Variant};

pub const CSV_HEADER: &str = "target_domain,accuracy,f1,precision,recall,auc";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Learner {
    Doctor(Variant),
    Baseline,
}

impl Learner {
    pub fn label(self) -> &'static str {
        match self {
            Learner::Doctor(v) => v.label(),
            Learner::Baseline => "baseline",
        }
    }
}

/// Sample indices of one held-out fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub sources: Vec<usize>,
    pub target: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn domains_of(data: &[FeatureSample]) -> Vec<usize> {
    data.iter().map(|s| s.domain).collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn lodo_split(data: &[FeatureSample], target: usize) -> Split {
    let (test, train): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data[i].domain == target);
    let sources = domains_of(data).into_iter().filter(|&d| d != target).collect();
    Split {
        sources,
        target,
        train,
        test,
    }
}

/// Id-level check that no target-domain sample is trained on.
pub fn audit_split(data: &[FeatureSample], split: &Split) -> Result<()> {
    let train: BTreeSet<usize> = split.train.iter().copied().collect();
    for &i in &split.test {
        if train.contains(&i) {
            return Err(Error::invalid(format!("sample {i} is in both train and test")));
        }
        if data[i].domain != split.target {
            return Err(Error::invalid(format!("test sample {i} is outside the target domain")));
        }
    }
    if let Some(&i) = split.train.iter().find(|&&i| data[i].domain == split.target) {
        return Err(Error::invalid(format!("target-domain sample {i} entered training")));
    }
    Ok(())
}

fn pick(data: &[FeatureSample], ids: &[usize]) -> Vec<FeatureSample> {
    ids.iter().map(|&i| data[i].clone()).collect()
}

/// Train `learner` on the split's sources and score it on the target.
pub fn run_fold(
    data: &[FeatureSample],
    split: &Split,
    learner: Learner,
    cfg: &ModelConfig,
    exec: Execution,
) -> Result<Metrics> {
    audit_split(data, split)?;
    if split.train.is_empty() {
        return Err(Error::EmptySequence("source domains"));
    }
    let train_set = pick(data, &split.train);
    let test_set = pick(data, &split.test);
    match learner {
        Learner::Doctor(variant) => {
            let (model, _) = train(&train_set, cfg, variant, exec)?;
            Ok(evaluate(&model, &test_set, exec)?.0)
        }
        Learner::Baseline => Baseline::train(&train_set, cfg, exec)?.evaluate(&test_set, exec),
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub target: usize,
    pub metrics: Metrics,
}

/// One held-out evaluation per domain in `targets`; folds run concurrently
/// under `exec`. Targets without samples are skipped with a warning.
pub fn run_lodo(
    data: &[FeatureSample],
    targets: &[usize],
    learner: Learner,
    cfg: &ModelConfig,
    exec: Execution,
) -> Result<Vec<FoldResult>> {
    if domains_of(data).len() < 2 {
        return Err(Error::invalid("leave-one-domain-out needs at least two domains"));
    }
    let splits: Vec<Split> = targets
        .iter()
        .map(|&t| lodo_split(data, t))
        .filter(|s| {
            if s.test.is_empty() {
                log::warn!("domain {} has no samples; skipped", s.target);
            }
            !s.test.is_empty()
        })
        .collect();
    exec.map(&splits, |_, split| {
        log::info!("fold target={} train={} test={}", split.target, split.train.len(), split.test.len());
        run_fold(data, split, learner, cfg, exec).map(|metrics| FoldResult {
            target: split.target,
            metrics,
        })
    })
    .into_iter()
    .collect()
}

/// Full model plus the four ablations, trained and scored on one split.
pub fn run_ablation(
    data: &[FeatureSample],
    target: usize,
    cfg: &ModelConfig,
    exec: Execution,
) -> Result<Vec<(Variant, Metrics)>> {
    let split = lodo_split(data, target);
    if split.test.is_empty() {
        return Err(Error::invalid(format!("domain {target} has no samples")));
    }
    exec.map(&Variant::ALL, |_, &v| {
        run_fold(data, &split, Learner::Doctor(v), cfg, exec).map(|m| (v, m))
    })
    .into_iter()
    .collect()
}

fn fmt_auc(auc: Option<f64>) -> String {
    auc.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"))
}

fn metric_cells(m: &Metrics) -> String {
    format!(
        "{:.6},{:.6},{:.6},{:.6},{}",
        m.accuracy,
        m.f1,
        m.precision,
        m.recall,
        fmt_auc(m.auc)
    )
}

pub fn lodo_csv(rows: &[FoldResult]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{}", r.target, metric_cells(&r.metrics));
    }
    out
}

pub fn ablation_csv(target: usize, rows: &[(Variant, Metrics)]) -> String {
    let mut out = format!("variant,{CSV_HEADER}\n");
    for (v, m) in rows {
        let _ = writeln!(out, "{},{target},{}", v.slug(), metric_cells(m));
    }
    out
}
