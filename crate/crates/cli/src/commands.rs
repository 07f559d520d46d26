use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use kmp_core::distill::{stage3_infer, teacher_outputs};
use kmp_core::eval::{emit_report, sweep_csv, sweep_points, RunRecord, SweepAxis};
use kmp_core::experiment::{
    prepare, run_seed, student_encodings, teacher_record, train_student, train_teacher, ExperimentManifest, PeCache,
};
use kmp_core::io::{
    append_metrics, decode_features, load_checkpoint, load_dataset, load_pe, parse_key_values, read_metrics,
    save_checkpoint, write_text, Checkpoint, DatasetBundle,
};
use kmp_core::models::ModelKind;
use kmp_core::spectral::laplacian_pe;

use crate::{Cli, DistillArgs, InferArgs, ReportArgs, RunArgs, SweepArgs};

/// Manifest file pairs first, then flags, so flags win.
fn build_manifest(cli: &Cli, run: &RunArgs, extra: &[(&str, String)]) -> Result<ExperimentManifest> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = &run.manifest {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        pairs.extend(parse_key_values(path, &text)?);
    }
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    flag("dataset", run.dataset.clone());
    flag("teacher", run.teacher.clone());
    flag("method", run.method.clone());
    flag("setting", run.setting.clone());
    flag("seeds", run.seeds.clone());
    flag("gamma", run.gamma.map(|v| v.to_string()));
    flag("theta", run.theta.map(|v| v.to_string()));
    flag("tau", run.tau.map(|v| v.to_string()));
    flag("kernel", run.kernel.clone());
    flag("pe", run.pe.clone());
    flag("pe_k", run.pe_k.map(|v| v.to_string()));
    flag("lr", run.lr.map(|v| v.to_string()));
    flag("weight_decay", run.weight_decay.map(|v| v.to_string()));
    flag("dropout", run.dropout.map(|v| v.to_string()));
    flag("norm", run.norm.clone());
    flag("noise", run.noise.map(|v| v.to_string()));
    flag("max_epochs", run.max_epochs.map(|v| v.to_string()));
    flag("patience", run.patience.map(|v| v.to_string()));
    for kv in &run.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in extra {
        pairs.push((k.to_string(), v.clone()));
    }
    Ok(ExperimentManifest::from_pairs(&pairs, cli.data_root.as_deref())?)
}

/// Creates the run directory and copies the effective manifest into it.
fn open_run_dir(run: &RunArgs, default_name: String, manifest: &ExperimentManifest) -> Result<PathBuf> {
    let dir = run.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default_name));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_text(&dir.join("manifest.toml"), &manifest.render())?;
    Ok(dir)
}

fn pe_cache(run: &RunArgs, dir: &Path) -> PeCache {
    PeCache::new(Some(run.pe_cache.clone().unwrap_or_else(|| dir.join("pe"))))
}

fn teacher_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("teacher-seed{seed}.ckpt"))
}

/// Runs `job` for every seed on the worker pool; fails if any seed failed,
/// after all have finished.
fn for_each_seed(seeds: &[u64], job: impl Fn(u64) -> Result<()> + Sync) -> Result<()> {
    let failures: Vec<String> = seeds
        .par_iter()
        .filter_map(|&seed| job(seed).err().map(|e| format!("seed {seed}: {e:#}")))
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        bail!("{} run(s) failed:\n  {}", failures.len(), failures.join("\n  "))
    }
}

fn write_report(dir: &Path, records: &[RunRecord], comparisons: &[(&str, &str)]) -> Result<()> {
    let report = emit_report(records, comparisons)?;
    write_text(&dir.join("report.csv"), &report.csv)?;
    write_text(&dir.join("report.txt"), &report.table)?;
    print!("{}", report.table);
    Ok(())
}

fn run_name(bundle: &DatasetBundle, m: &ExperimentManifest, label: &str) -> String {
    format!("{}-{}-{label}-{}", bundle.name, m.teacher.kind, m.setting.as_str())
}

pub fn pretrain(cli: &Cli, args: &RunArgs) -> Result<()> {
    let manifest = build_manifest(cli, args, &[])?;
    let bundle = manifest.dataset.load()?;
    let dir = open_run_dir(args, run_name(&bundle, &manifest, "teacher"), &manifest)?;
    let metrics = dir.join("metrics.csv");
    for_each_seed(&manifest.seeds, |seed| {
        let (graph, split) = prepare(&bundle, &manifest, manifest.noise, seed)?;
        let t = train_teacher(&graph, &split, &manifest.teacher, seed)?;
        save_checkpoint(
            &teacher_path(&dir, seed),
            &Checkpoint {
                params: t.run.params.clone(),
                fusion: None,
                kernel: None,
            },
        )?;
        append_metrics(&metrics, &[teacher_record(&bundle.name, &manifest, seed, &t)])?;
        eprintln!(
            "teacher seed {seed}: test {:.4} val {:.4} epochs {}",
            t.test_acc, t.run.best_val_acc, t.run.epochs
        );
        Ok(())
    })?;
    write_report(&dir, &read_metrics(&metrics)?, &[])
}

pub fn distill(cli: &Cli, args: &DistillArgs) -> Result<()> {
    let extra = if args.select_best_kernel {
        vec![("select_best_kernel", "true".to_string())]
    } else {
        Vec::new()
    };
    let manifest = build_manifest(cli, &args.run, &extra)?;
    let bundle = manifest.dataset.load()?;
    let dir = open_run_dir(&args.run, run_name(&bundle, &manifest, manifest.method.as_str()), &manifest)?;
    let teacher_dir = args.teacher_dir.clone().unwrap_or_else(|| dir.clone());
    let cache = pe_cache(&args.run, &dir);
    let metrics = dir.join("metrics.csv");
    let variant = manifest.variants().remove(0);
    let selections = Mutex::new(Vec::new());
    for_each_seed(&manifest.seeds, |seed| {
        let (graph, split) = prepare(&bundle, &manifest, manifest.noise, seed)?;
        let outputs = if variant.method.uses_teacher() {
            let path = teacher_path(&teacher_dir, seed);
            if !path.exists() {
                bail!("missing teacher checkpoint {}; run `kmp pretrain` first", path.display());
            }
            let ck = load_checkpoint(&path)?;
            if ck.params.kind() != manifest.teacher.kind {
                bail!("{} holds a {} teacher, expected {}", path.display(), ck.params.kind(), manifest.teacher.kind);
            }
            Some(teacher_outputs(&ck.params, &graph, &split)?)
        } else {
            None
        };
        let encodings = if variant.method.uses_pe() {
            Some(student_encodings(&graph, &split, variant.pe_k, &cache)?)
        } else {
            None
        };
        let r = train_student(&graph, &split, outputs.as_ref(), encodings.as_ref(), &variant, seed)?;
        let student = &r.run.student;
        save_checkpoint(
            &dir.join(format!("student-{}-seed{seed}.ckpt", variant.tag)),
            &Checkpoint {
                params: student.mlp.clone(),
                fusion: student.fusion.clone(),
                kernel: student.kernel.clone(),
            },
        )?;
        append_metrics(
            &metrics,
            &[RunRecord {
                dataset: bundle.name.clone(),
                teacher: manifest.teacher.kind.to_string(),
                method: variant.tag.clone(),
                setting: manifest.setting.as_str().into(),
                seed,
                test_acc: r.test_acc,
                val_acc: r.val_acc,
                epochs: r.run.epochs,
                seconds: r.seconds,
            }],
        )?;
        let kernel = r.kernel.map_or("none".to_string(), |k| k.to_string());
        eprintln!(
            "{} seed {seed}: test {:.4} val {:.4} epochs {} kernel {kernel}",
            variant.tag, r.test_acc, r.val_acc, r.run.epochs
        );
        selections.lock().expect("selection lock").push((seed, kernel, r.val_acc));
        Ok(())
    })?;
    if manifest.select_best_kernel {
        let mut rows = selections.into_inner().expect("selection lock");
        rows.sort_by_key(|r| r.0);
        let mut text = String::from("seed\tkernel\tval_acc\n");
        for (seed, kernel, val) in &rows {
            let _ = writeln!(text, "{seed}\t{kernel}\t{val:.6}");
        }
        write_text(&dir.join("kernels.tsv"), &text)?;
        println!("{}: selected kernels per seed written to {}", bundle.name, dir.join("kernels.tsv").display());
    }
    if cache.computations() > 0 {
        eprintln!("encodings: {} eigendecomposition(s) computed", cache.computations());
    }
    write_report(&dir, &read_metrics(&metrics)?, &[("teacher", variant.tag.as_str())])
}

pub fn sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let manifest = build_manifest(cli, &args.run, &[("sweep", args.axis.clone())])?;
    let axis: SweepAxis = args.axis.parse()?;
    let bundle = manifest.dataset.load()?;
    let dir = open_run_dir(&args.run, run_name(&bundle, &manifest, &format!("sweep-{}", axis.as_str())), &manifest)?;
    let cache = pe_cache(&args.run, &dir);
    let metrics = dir.join("metrics.csv");
    let done: HashSet<(String, u64)> = read_metrics(&metrics)?
        .into_iter()
        .map(|r| (r.method, r.seed))
        .collect();
    if !done.is_empty() {
        eprintln!("resuming: {} completed run(s) found", done.len());
    }
    for_each_seed(&manifest.seeds, |seed| {
        let skip = |tag: &str| done.contains(&(tag.to_string(), seed));
        let outcome = run_seed(&manifest, &bundle, seed, &cache, &skip)?;
        append_metrics(&metrics, &outcome.records)?;
        for r in &outcome.records {
            eprintln!("{} seed {seed}: test {:.4}", r.method, r.test_acc);
        }
        Ok(())
    })?;
    let records = read_metrics(&metrics)?;
    if axis != SweepAxis::Kernel {
        let csv = sweep_csv(&sweep_points(&records, axis)?);
        write_text(&dir.join("sweep.csv"), &csv)?;
        print!("{csv}");
    }
    write_report(&dir, &records, &[])
}

pub fn infer(args: &InferArgs) -> Result<()> {
    if !args.checkpoint.exists() {
        bail!("checkpoint {} does not exist", args.checkpoint.display());
    }
    let ck = load_checkpoint(&args.checkpoint)?;
    if ck.params.kind() != ModelKind::Mlp {
        bail!("{} is a {} teacher checkpoint, not a student", args.checkpoint.display(), ck.params.kind());
    }
    let (features, pe) = match (&args.dataset, &args.features) {
        (Some(dir), _) => {
            let bundle = load_dataset(dir)?;
            let pe = match &ck.fusion {
                Some(f) => Some(laplacian_pe(&bundle.graph, f.k())?.vectors),
                None => None,
            };
            (bundle.graph.features().clone(), pe)
        }
        (None, Some(path)) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let features = decode_features(path, &bytes)?;
            let pe = match &args.pe {
                Some(p) => Some(load_pe(p)?.vectors),
                None => None,
            };
            (features, pe)
        }
        (None, None) => bail!("give --dataset or --features"),
    };
    if ck.fusion.is_some() && pe.is_none() {
        bail!("the student uses positional encodings; pass --pe or --dataset");
    }
    let student = kmp_core::distill::StudentModel {
        mlp: ck.params,
        fusion: ck.fusion,
        kernel: ck.kernel,
    };
    let preds = stage3_infer(&student, &features, pe.as_ref())?;
    let mut out = String::from("node\tclass\tprob\n");
    for (i, &c) in preds.classes.iter().enumerate() {
        let _ = writeln!(out, "{i}\t{c}\t{:.6}", preds.probabilities.get(i, c));
    }
    match &args.out {
        Some(path) => write_text(path, &out)?,
        None => print!("{out}"),
    }
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let records = read_metrics(&args.metrics)?;
    let pairs: Vec<(&str, &str)> = args
        .compare
        .iter()
        .map(|c| c.split_once(':').with_context(|| format!("--compare expects BASE:CAND, got `{c}`")))
        .collect::<Result<_>>()?;
    let report = emit_report(&records, &pairs)?;
    print!("{}", report.table);
    Ok(())
}
