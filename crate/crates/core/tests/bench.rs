use doctor_core::bench::lodo::{self, audit_split, lodo_split, Learner};
use doctor_core::bench::{gen_domains, GeneratorConfig};
use doctor_core::config::{Dims, ModelConfig};
use doctor_core::exec::Execution;
use doctor_core::pipeline::Variant;

#[test]
fn labels_are_balanced_per_domain() {
    let cfg = GeneratorConfig {
        per_domain: 200,
        ..GeneratorConfig::default()
    };
    let b = gen_domains(&cfg, &Dims::default()).unwrap();
    for d in 0..cfg.domains {
        let labels: Vec<u8> = b.raw.iter().filter(|s| s.domain_id == d).map(|s| s.label).collect();
        let real = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
        assert!((0.45..=0.55).contains(&real), "domain {d}: {real}");
    }
}

#[test]
fn bayes_oracle_is_accurate() {
    let cfg = GeneratorConfig {
        per_domain: 200,
        seed: 3,
        ..GeneratorConfig::default()
    };
    let b = gen_domains(&cfg, &Dims::default()).unwrap();
    let correct = b.raw.iter().filter(|s| b.oracle_label(s).unwrap() == s.label).count();
    let acc = correct as f64 / b.raw.len() as f64;
    assert!(acc >= 0.95, "oracle accuracy {acc}");
}

#[test]
fn removing_the_forged_motif_leaves_a_coin_flip() {
    let cfg = GeneratorConfig {
        domains: 3,
        per_domain: 4,
        noise_level: 0.0,
        trap_domain: Some(2),
        ..GeneratorConfig::default()
    };
    let b = gen_domains(&cfg, &Dims::default()).unwrap();
    for s in &b.raw {
        let spec = &b.domains[s.domain_id];
        let sign = if s.label == 0 { 1.0 } else { -1.0 };
        let amp = sign * cfg.motif_amplitude * spec.forged.share();
        let mut clean = s.clone();
        if spec.forged.video() {
            for f in &mut clean.video_frames {
                for (p, m) in f.data_mut().iter_mut().zip(&b.motif.video) {
                    *p -= amp * m;
                }
            }
        }
        if spec.forged.audio() {
            for a in &mut clean.audio {
                for (x, m) in a.iter_mut().zip(&b.motif.audio) {
                    *x -= amp * m;
                }
            }
        }
        assert_eq!(b.oracle_label(s).unwrap(), s.label);
        let p = b.oracle_real_probability(&clean).unwrap();
        assert!((p - 0.5).abs() < 1e-9, "{p}");
    }
}

fn small_data(domains: usize) -> Vec<doctor_core::encoders::FeatureSample> {
    let cfg = GeneratorConfig {
        domains,
        per_domain: 8,
        trap_domain: None,
        ..GeneratorConfig::default()
    };
    let dims = Dims::default();
    gen_domains(&cfg, &dims).unwrap().encode(&dims, 0, Execution::Sequential).unwrap()
}

fn quick() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.train.epochs = 1;
    cfg.train.learning_rate = 0.01;
    cfg
}

#[test]
fn two_domains_give_two_folds() {
    let data = small_data(2);
    let rows = lodo::run_lodo(&data, &[0, 1, 5], Learner::Baseline, &quick(), Execution::Parallel).unwrap();
    assert_eq!(rows.iter().map(|r| r.target).collect::<Vec<_>>(), vec![0, 1]);
    for t in [0, 1] {
        audit_split(&data, &lodo_split(&data, t)).unwrap();
    }
    let csv = lodo::lodo_csv(&rows);
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn ablation_has_five_rows() {
    let data = small_data(2);
    let rows = lodo::run_ablation(&data, 1, &quick(), Execution::Parallel).unwrap();
    let variants: Vec<Variant> = rows.iter().map(|(v, _)| *v).collect();
    assert_eq!(variants, Variant::ALL.to_vec());
}
