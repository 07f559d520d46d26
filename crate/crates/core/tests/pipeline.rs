use std::path::Path;

use kmp_core::distill::{stage2_distill, stage3_infer, DistillConfig, Schedule};
use kmp_core::experiment::{
    prepare, run_seed, student_encodings, train_teacher, DatasetSource, ExperimentManifest, Method, PeCache,
};
use kmp_core::graph::Setting;
use kmp_core::io::{decode_checkpoint, encode_checkpoint, generate_sbm, Checkpoint, SbmSpec};
use kmp_core::models::ModelKind;
use kmp_core::spectral::FusionMode;

fn sbm_manifest(method: Method) -> ExperimentManifest {
    let spec = SbmSpec::new(vec![60; 4], 0.2, 0.02, 8);
    let mut m = ExperimentManifest::new(DatasetSource::Sbm { spec, seed: 3 }, ModelKind::Gcn, method).unwrap();
    m.teacher.schedule = Schedule {
        max_epochs: 80,
        patience: 20,
    };
    m.distill.schedule = Schedule {
        max_epochs: 60,
        patience: 20,
    };
    m.split.labeled_per_class = 5;
    m.split.validation_count = 20;
    m.pe_k = 4;
    m.seeds = vec![0];
    m
}

#[test]
fn sbm_runs_are_deterministic_per_seed() {
    let m = sbm_manifest(Method::KmpPe);
    let bundle = m.dataset.load().unwrap();
    let cache = PeCache::new(None);
    let a = run_seed(&m, &bundle, 1, &cache, &|_| false).unwrap();
    let b = run_seed(&m, &bundle, 1, &cache, &|_| false).unwrap();
    assert_eq!(cache.computations(), 1);
    let ta = a.teacher.as_ref().unwrap();
    let tb = b.teacher.as_ref().unwrap();
    assert_eq!(ta.run.params, tb.run.params);
    assert_eq!(a.records.len(), 1);
    assert_eq!(a.records[0].test_acc.to_bits(), b.records[0].test_acc.to_bits());
    assert_eq!(a.students[0].1.run.student, b.students[0].1.run.student);
    let c = run_seed(&m, &bundle, 2, &cache, &|_| false).unwrap();
    assert_ne!(c.teacher.unwrap().run.params, ta.run.params);
}

#[test]
fn distillation_leaves_teacher_untouched() {
    let m = sbm_manifest(Method::Kmp);
    let bundle = m.dataset.load().unwrap();
    let (graph, split) = prepare(&bundle, &m, 0.0, 0).unwrap();
    let teacher = train_teacher(&graph, &split, &m.teacher, 0).unwrap();
    let checksum = teacher.run.params.checksum();
    let logits = teacher.run.outputs.logits.clone();
    for kernel in ["gaussian", "reverse", "sigmoid"] {
        let config = DistillConfig {
            kernel: kernel.parse().unwrap(),
            ..m.student_config(Method::Kmp)
        };
        stage2_distill(&graph, &split, Some(&teacher.run.outputs), None, &config, 0).unwrap();
    }
    assert_eq!(teacher.run.params.checksum(), checksum);
    assert_eq!(teacher.run.outputs.logits, logits);
}

#[test]
fn inductive_runs_never_read_unobserved_nodes() {
    let mut m = sbm_manifest(Method::KmpPe);
    m.setting = Setting::Inductive;
    let bundle = m.dataset.load().unwrap();
    let cache = PeCache::new(None);
    let (graph, split) = prepare(&bundle, &m, 0.0, 4).unwrap();
    assert!(!split.test.is_empty());
    let teacher = train_teacher(&graph, &split, &m.teacher, 4).unwrap();
    for &t in &split.test {
        assert!(!teacher.run.outputs.available[t]);
    }
    let enc = student_encodings(&graph, &split, m.pe_k, &cache).unwrap();
    for &t in &split.test {
        assert!(enc.train.row(t).iter().all(|&x| x == 0.0));
    }
    let config = m.student_config(Method::KmpPe);
    let run = stage2_distill(&graph, &split, Some(&teacher.run.outputs), Some(&enc.train), &config, 4).unwrap();
    run.audit(&split).unwrap();
    assert!(split.test.iter().all(|&t| !run.touched[t]));

    let mut leaky = run.clone();
    leaky.touched[split.test[0]] = true;
    assert!(leaky.audit(&split).is_err());
}

#[test]
fn inference_from_reloaded_checkpoint_matches() {
    let mut m = sbm_manifest(Method::KmpPe);
    m.pe_mode = FusionMode::Mul;
    let bundle = m.dataset.load().unwrap();
    let cache = PeCache::new(None);
    let outcome = run_seed(&m, &bundle, 0, &cache, &|_| false).unwrap();
    let (_, result) = &outcome.students[0];
    let student = &result.run.student;
    let ck = Checkpoint {
        params: student.mlp.clone(),
        fusion: student.fusion.clone(),
        kernel: student.kernel.clone(),
    };
    let loaded = decode_checkpoint(Path::new("s"), &encode_checkpoint(&ck)).unwrap();
    assert_eq!(loaded, ck);
    let pe = cache.get(&bundle.graph, m.pe_k).unwrap();
    let a = stage3_infer(student, bundle.graph.features(), Some(&pe.vectors)).unwrap();
    let reloaded = kmp_core::distill::StudentModel {
        mlp: loaded.params,
        fusion: loaded.fusion,
        kernel: loaded.kernel,
    };
    let b = stage3_infer(&reloaded, bundle.graph.features(), Some(&pe.vectors)).unwrap();
    assert_eq!(a, b);
    assert!(stage3_infer(student, bundle.graph.features(), None).is_err());
}

#[test]
fn glnn_method_matches_zero_gamma_kmp() {
    let bundle = sbm_manifest(Method::Glnn).dataset.load().unwrap();
    let cache = PeCache::new(None);
    let glnn = run_seed(&sbm_manifest(Method::Glnn), &bundle, 5, &cache, &|_| false).unwrap();
    let mut zero = sbm_manifest(Method::Kmp);
    zero.distill.gamma = 0.0;
    let kmp = run_seed(&zero, &bundle, 5, &cache, &|_| false).unwrap();
    assert_eq!(glnn.students[0].1.run.student, kmp.students[0].1.run.student);
    assert_eq!(glnn.records[0].test_acc.to_bits(), kmp.records[0].test_acc.to_bits());
}

#[test]
fn sbm_edge_count_matches_binomial_expectation() {
    let blocks = vec![50, 70, 40, 90];
    let (p_in, p_out) = (0.15, 0.01);
    let mut pairs_in = 0.0;
    let mut pairs_out = 0.0;
    for (i, &a) in blocks.iter().enumerate() {
        pairs_in += (a * (a - 1) / 2) as f64;
        for &b in &blocks[i + 1..] {
            pairs_out += (a * b) as f64;
        }
    }
    let mean = p_in * pairs_in + p_out * pairs_out;
    let sd = (p_in * (1.0 - p_in) * pairs_in + p_out * (1.0 - p_out) * pairs_out).sqrt();
    for seed in 0..5 {
        let b = generate_sbm(&SbmSpec::new(blocks.clone(), p_in, p_out, 4), seed).unwrap();
        let edges = b.graph.num_edges() as f64;
        assert!((edges - mean).abs() < 4.0 * sd, "seed {seed}: {edges} edges vs {mean} ± {sd}");
        let within = b
            .graph
            .edges()
            .into_iter()
            .filter(|&(u, v)| b.graph.labels()[u] == b.graph.labels()[v])
            .count() as f64;
        let sd_in = (p_in * (1.0 - p_in) * pairs_in).sqrt();
        assert!((within - p_in * pairs_in).abs() < 4.0 * sd_in);
    }
}

#[test]
fn sbm_generation_is_seeded() {
    let spec = SbmSpec::new(vec![20, 20], 0.3, 0.05, 3);
    let a = generate_sbm(&spec, 9).unwrap();
    let b = generate_sbm(&spec, 9).unwrap();
    let c = generate_sbm(&spec, 10).unwrap();
    assert_eq!(a.graph.edges(), b.graph.edges());
    assert_eq!(a.graph.features(), b.graph.features());
    assert_ne!(a.graph.edges(), c.graph.edges());
}

#[test]
fn noisy_features_change_only_features() {
    let m = sbm_manifest(Method::Glnn);
    let bundle = m.dataset.load().unwrap();
    let (clean, s1) = prepare(&bundle, &m, 0.0, 1).unwrap();
    let (noisy, s2) = prepare(&bundle, &m, 0.3, 1).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(clean.edges(), noisy.edges());
    assert_ne!(clean.features(), noisy.features());
}
