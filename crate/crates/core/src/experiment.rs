//! Experiment manifests and the per-seed run pipeline shared by the CLI and
//! the acceptance suite.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::distill::{
    stage1_pretrain, stage2_distill, stage3_infer, teacher_predict, DistillConfig, DistillRun, TeacherConfig,
    TeacherOutputs, TeacherRun,
};
use crate::error::{Error, Result};
use crate::eval::{accuracy, sweep_tag, RunRecord, SweepAxis};
use crate::graph::{add_feature_noise, induced_subgraph, make_split, row_normalize, Graph, Setting, SplitParams, SplitSpec};
use crate::io::{generate_sbm, load_dataset, load_pe, parse_key_values, save_pe, DatasetBundle, SbmSpec};
use crate::kernels::KernelKind;
use crate::models::{ModelKind, NormKind};
use crate::spectral::{laplacian_pe, FusionMode, PositionalEncoding};
use crate::tensor::Tensor;

/// What the student is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Cross-entropy on labeled nodes only.
    Mlp,
    /// Soft targets only.
    Glnn,
    /// Soft targets plus kernel matching.
    Kmp,
    /// Kernel matching plus Laplacian encodings.
    KmpPe,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mlp => "mlp",
            Method::Glnn => "glnn",
            Method::Kmp => "kmp",
            Method::KmpPe => "kmp+pe",
        }
    }

    pub fn uses_teacher(self) -> bool {
        self != Method::Mlp
    }

    pub fn uses_pe(self) -> bool {
        self == Method::KmpPe
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Method::Mlp),
            "glnn" => Ok(Method::Glnn),
            "kmp" => Ok(Method::Kmp),
            "kmp+pe" => Ok(Method::KmpPe),
            other => Err(Error::Config(format!("unknown method `{other}` (mlp|glnn|kmp|kmp+pe)"))),
        }
    }
}

pub const NOISE_GRID: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const GAMMA_GRID: [f64; 8] = [0.1, 0.3, 0.5, 0.7, 1.0, 3.0, 10.0, 30.0];
pub const PE_K_GRID: [usize; 3] = [4, 8, 16];
/// Baseline MLP settings, chosen by validation accuracy on Cora.
pub const MLP_LR: f64 = 0.01;
pub const MLP_DROPOUT: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Dir(PathBuf),
    Sbm { spec: SbmSpec, seed: u64 },
}

impl DatasetSource {
    pub fn load(&self) -> Result<DatasetBundle> {
        match self {
            DatasetSource::Dir(dir) => load_dataset(dir),
            DatasetSource::Sbm { spec, seed } => generate_sbm(spec, *seed),
        }
    }
}

/// One experiment: dataset, teacher, method and student configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentManifest {
    pub dataset: DatasetSource,
    pub teacher: TeacherConfig,
    pub method: Method,
    pub setting: Setting,
    pub distill: DistillConfig,
    pub pe_mode: FusionMode,
    pub pe_k: usize,
    pub select_best_kernel: bool,
    pub noise: f64,
    pub seeds: Vec<u64>,
    pub sweep: Option<SweepAxis>,
    pub split: SplitParams,
    /// Row-normalize features before noise and training.
    pub normalize_features: bool,
    /// Learning rate and dropout of the undistilled MLP baseline.
    pub mlp_lr: f64,
    pub mlp_dropout: f64,
}

impl ExperimentManifest {
    pub fn new(dataset: DatasetSource, teacher: ModelKind, method: Method) -> Result<Self> {
        Ok(ExperimentManifest {
            dataset,
            teacher: TeacherConfig::defaults(teacher)?,
            method,
            setting: Setting::Transductive,
            distill: DistillConfig::default(),
            pe_mode: FusionMode::Concat,
            pe_k: crate::spectral::pe::DEFAULT_PE_DIM,
            select_best_kernel: false,
            noise: 0.0,
            seeds: (0..10).collect(),
            sweep: None,
            split: SplitParams::default(),
            normalize_features: false,
            mlp_lr: MLP_LR,
            mlp_dropout: MLP_DROPOUT,
        })
    }

    /// Parses a flat `key = value` manifest. Relative dataset paths resolve
    /// against `data_root` when given.
    pub fn parse(path: &Path, text: &str, data_root: Option<&Path>) -> Result<Self> {
        let pairs = parse_key_values(path, text)?;
        Self::from_pairs(&pairs, data_root)
    }

    /// Builds a manifest from ordered key/value pairs; later pairs win.
    pub fn from_pairs(pairs: &[(String, String)], data_root: Option<&Path>) -> Result<Self> {
        let get = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let teacher: ModelKind = get("teacher").unwrap_or("gcn").parse()?;
        let method: Method = get("method").unwrap_or("kmp").parse()?;
        let dataset = match get("dataset") {
            Some("sbm") => DatasetSource::Sbm {
                spec: SbmSpec::new(vec![100; 4], 0.2, 0.02, 16),
                seed: 0,
            },
            Some(d) => DatasetSource::Dir(resolve_dataset(d, data_root)),
            None => return Err(Error::Config("manifest needs `dataset`".into())),
        };
        let mut m = Self::new(dataset, teacher, method)?;
        for (key, value) in pairs {
            if key != "dataset" && key != "teacher" && key != "method" {
                m.set(key, value)?;
            }
        }
        m.validate()?;
        Ok(m)
    }

    /// Applies one override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` = `{value}` is not a valid number")))
        }
        fn sbm<'a>(m: &'a mut ExperimentManifest, key: &str) -> Result<&'a mut SbmSpec> {
            match &mut m.dataset {
                DatasetSource::Sbm { spec, .. } => Ok(spec),
                _ => Err(Error::Config(format!("`{key}` needs dataset = sbm"))),
            }
        }
        match key {
            "teacher" => {
                let kind: ModelKind = value.parse()?;
                self.teacher = TeacherConfig::defaults(kind)?;
            }
            "method" => self.method = value.parse()?,
            "setting" => self.setting = value.parse()?,
            "gamma" => self.distill.gamma = num(key, value)?,
            "theta" => self.distill.theta = num(key, value)?,
            "tau" => self.distill.tau = num(key, value)?,
            "kernel" => self.distill.kernel = value.parse()?,
            "lr" => self.distill.lr = num(key, value)?,
            "weight_decay" => self.distill.weight_decay = num(key, value)?,
            "dropout" => self.distill.dropout = num(key, value)?,
            "norm" => self.distill.norm = parse_norm(value)?,
            "batch_size" => self.distill.batch_size = num(key, value)?,
            "max_epochs" => self.distill.schedule.max_epochs = num(key, value)?,
            "patience" => self.distill.schedule.patience = num(key, value)?,
            "pe" => match value {
                "off" => {
                    if self.method == Method::KmpPe {
                        self.method = Method::Kmp;
                    }
                }
                mode => {
                    self.pe_mode = mode.parse()?;
                    if self.method == Method::Kmp {
                        self.method = Method::KmpPe;
                    }
                }
            },
            "normalize_features" => self.normalize_features = parse_bool(key, value)?,
            "mlp_lr" => self.mlp_lr = num(key, value)?,
            "mlp_dropout" => self.mlp_dropout = num(key, value)?,
            "pe_mode" => self.pe_mode = value.parse()?,
            "pe_k" => self.pe_k = num(key, value)?,
            "select_best_kernel" => self.select_best_kernel = parse_bool(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "seeds" => self.seeds = parse_seeds(value)?,
            "sweep" => {
                self.sweep = match value {
                    "none" => None,
                    axis => Some(axis.parse()?),
                }
            }
            "labeled_per_class" => self.split.labeled_per_class = num(key, value)?,
            "validation_count" => self.split.validation_count = num(key, value)?,
            "holdout_fraction" => self.split.holdout_fraction = num(key, value)?,
            "teacher_lr" => self.teacher.lr = num(key, value)?,
            "teacher_weight_decay" => self.teacher.weight_decay = num(key, value)?,
            "teacher_dropout" => self.teacher.dropout = num(key, value)?,
            "teacher_hidden" => self.teacher.hidden_dim = num(key, value)?,
            "teacher_layers" => self.teacher.num_layers = num(key, value)?,
            "teacher_norm" => self.teacher.norm = parse_norm(value)?,
            "teacher_fanout" => {
                self.teacher.fanout = match num::<usize>(key, value)? {
                    0 => None,
                    k => Some(k),
                }
            }
            "teacher_max_epochs" => self.teacher.schedule.max_epochs = num(key, value)?,
            "teacher_patience" => self.teacher.schedule.patience = num(key, value)?,
            "sbm_blocks" => {
                sbm(self, key)?.blocks = value
                    .split(',')
                    .map(|b| num(key, b.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "sbm_p_in" => sbm(self, key)?.p_in = num(key, value)?,
            "sbm_p_out" => sbm(self, key)?.p_out = num(key, value)?,
            "sbm_feature_dim" => sbm(self, key)?.feature_dim = num(key, value)?,
            "sbm_mean_offset" => sbm(self, key)?.mean_offset = num(key, value)?,
            "sbm_seed" => match &mut self.dataset {
                DatasetSource::Sbm { seed, .. } => *seed = num(key, value)?,
                _ => return Err(Error::Config("`sbm_seed` needs dataset = sbm".into())),
            },
            other => return Err(Error::Config(format!("unknown manifest key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        self.student_config(Method::Mlp).validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise fraction {} outside [0, 1]", self.noise)));
        }
        if self.pe_k == 0 {
            return Err(Error::Config("pe_k must be positive".into()));
        }
        Ok(())
    }

    /// Canonical manifest text; parsing it back yields an equal manifest.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = \"{v}\"");
        };
        match &self.dataset {
            DatasetSource::Dir(d) => kv("dataset", d.display().to_string()),
            DatasetSource::Sbm { spec, seed } => {
                kv("dataset", "sbm".into());
                kv("sbm_blocks", spec.blocks.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","));
                kv("sbm_p_in", spec.p_in.to_string());
                kv("sbm_p_out", spec.p_out.to_string());
                kv("sbm_feature_dim", spec.feature_dim.to_string());
                kv("sbm_mean_offset", spec.mean_offset.to_string());
                kv("sbm_seed", seed.to_string());
            }
        }
        let t = &self.teacher;
        kv("teacher", t.kind.to_string());
        kv("teacher_lr", t.lr.to_string());
        kv("teacher_weight_decay", t.weight_decay.to_string());
        kv("teacher_dropout", t.dropout.to_string());
        kv("teacher_hidden", t.hidden_dim.to_string());
        kv("teacher_layers", t.num_layers.to_string());
        kv("teacher_norm", norm_str(t.norm).into());
        kv("teacher_fanout", t.fanout.unwrap_or(0).to_string());
        kv("teacher_max_epochs", t.schedule.max_epochs.to_string());
        kv("teacher_patience", t.schedule.patience.to_string());
        kv("method", self.method.as_str().into());
        kv("setting", self.setting.as_str().into());
        let d = &self.distill;
        kv("gamma", d.gamma.to_string());
        kv("theta", d.theta.to_string());
        kv("tau", d.tau.to_string());
        kv("kernel", d.kernel.to_string());
        kv("lr", d.lr.to_string());
        kv("weight_decay", d.weight_decay.to_string());
        kv("dropout", d.dropout.to_string());
        kv("norm", norm_str(d.norm).into());
        kv("batch_size", d.batch_size.to_string());
        kv("max_epochs", d.schedule.max_epochs.to_string());
        kv("patience", d.schedule.patience.to_string());
        kv("pe_mode", fusion_str(self.pe_mode).into());
        kv("pe_k", self.pe_k.to_string());
        kv("select_best_kernel", self.select_best_kernel.to_string());
        kv("noise", self.noise.to_string());
        kv("seeds", self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
        kv("sweep", self.sweep.map_or("none", |a| a.as_str()).into());
        kv("labeled_per_class", self.split.labeled_per_class.to_string());
        kv("validation_count", self.split.validation_count.to_string());
        kv("holdout_fraction", self.split.holdout_fraction.to_string());
        kv("normalize_features", self.normalize_features.to_string());
        kv("mlp_lr", self.mlp_lr.to_string());
        kv("mlp_dropout", self.mlp_dropout.to_string());
        out
    }

    /// Student configuration for `method`; `glnn` forces γ = 0 and no PE.
    pub fn student_config(&self, method: Method) -> DistillConfig {
        let mut c = self.distill.clone();
        match method {
            Method::Mlp => {
                c.gamma = 0.0;
                c.pe = None;
                c.lr = self.mlp_lr;
                c.dropout = self.mlp_dropout;
            }
            Method::Glnn => {
                c.gamma = 0.0;
                c.pe = None;
            }
            Method::Kmp => c.pe = None,
            Method::KmpPe => c.pe = Some(self.pe_mode),
        }
        c
    }

    /// Every student variant this manifest asks for, sweep expanded.
    pub fn variants(&self) -> Vec<Variant> {
        let base = |method: Method, tag: String| Variant {
            tag,
            method,
            config: self.student_config(method),
            noise: self.noise,
            pe_k: self.pe_k,
            select_best_kernel: self.select_best_kernel,
        };
        match self.sweep {
            None => vec![base(self.method, self.method.as_str().into())],
            Some(SweepAxis::Noise) => NOISE_GRID
                .iter()
                .flat_map(|&x| {
                    [Method::Glnn, Method::Kmp].map(|m| Variant {
                        noise: x,
                        ..base(m, sweep_tag(m.as_str(), SweepAxis::Noise, x))
                    })
                })
                .collect(),
            Some(SweepAxis::Gamma) => GAMMA_GRID
                .iter()
                .map(|&x| {
                    let mut v = base(Method::Kmp, sweep_tag("kmp", SweepAxis::Gamma, x));
                    v.config.gamma = x;
                    v
                })
                .collect(),
            Some(SweepAxis::Kernel) => KernelKind::ALL
                .iter()
                .map(|&k| {
                    let mut v = base(Method::Kmp, format!("kmp-{k}"));
                    v.config.kernel = k;
                    v.select_best_kernel = false;
                    v
                })
                .collect(),
            Some(SweepAxis::PeK) => PE_K_GRID
                .iter()
                .map(|&k| Variant {
                    pe_k: k,
                    ..base(Method::KmpPe, sweep_tag("kmp+pe", SweepAxis::PeK, k as f64))
                })
                .collect(),
        }
    }
}

/// A student configuration within an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    /// Method label recorded in metrics.
    pub tag: String,
    pub method: Method,
    pub config: DistillConfig,
    pub noise: f64,
    pub pe_k: usize,
    pub select_best_kernel: bool,
}

fn resolve_dataset(name: &str, root: Option<&Path>) -> PathBuf {
    let p = PathBuf::from(name);
    match root {
        Some(root) if p.is_relative() && !p.exists() => root.join(p),
        _ => p,
    }
}

fn parse_norm(value: &str) -> Result<NormKind> {
    match value {
        "batch" => Ok(NormKind::Batch),
        "none" => Ok(NormKind::None),
        other => Err(Error::Config(format!("unknown norm `{other}` (batch|none)"))),
    }
}

fn norm_str(n: NormKind) -> &'static str {
    match n {
        NormKind::Batch => "batch",
        NormKind::None => "none",
    }
}

fn fusion_str(m: FusionMode) -> &'static str {
    match m {
        FusionMode::Concat => "concat",
        FusionMode::Mul => "mul",
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` = `{value}` is not a boolean"))),
    }
}

/// `"10"` means seeds 0..10; a comma list is taken literally.
pub fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad seed list `{value}`"));
    if value.contains(',') {
        value.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
    } else {
        let n: u64 = value.trim().parse().map_err(|_| bad())?;
        Ok((0..n).collect())
    }
}

/// 64-bit FNV-1a over the node count and sorted edge list.
pub fn graph_fingerprint(graph: &Graph) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    feed(graph.num_nodes() as u64);
    for (u, v) in graph.edges() {
        feed(u as u64);
        feed(v as u64);
    }
    h
}

/// Laplacian encodings keyed by graph structure and `k`, memoized in memory
/// and optionally on disk.
#[derive(Debug, Default)]
pub struct PeCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<(u64, usize), Arc<PositionalEncoding>>>,
    computed: AtomicUsize,
}

impl PeCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        PeCache {
            dir,
            ..Self::default()
        }
    }

    /// Number of eigendecompositions performed so far.
    pub fn computations(&self) -> usize {
        self.computed.load(Ordering::Relaxed)
    }

    pub fn get(&self, graph: &Graph, k: usize) -> Result<Arc<PositionalEncoding>> {
        let key = (graph_fingerprint(graph), k);
        if let Some(pe) = self.memory.lock().expect("cache lock").get(&key) {
            return Ok(pe.clone());
        }
        let file = self.dir.as_ref().map(|d| d.join(format!("pe-{:016x}-k{k}.bin", key.0)));
        let pe = match file.as_ref().filter(|f| f.exists()) {
            Some(f) => load_pe(f)?,
            None => {
                self.computed.fetch_add(1, Ordering::Relaxed);
                let pe = laplacian_pe(graph, k)?;
                if let Some(f) = &file {
                    save_pe(f, &pe)?;
                }
                pe
            }
        };
        if pe.num_nodes() != graph.num_nodes() || pe.k() != k {
            return Err(Error::Contract("cached encodings do not match the graph".into()));
        }
        let pe = Arc::new(pe);
        self.memory.lock().expect("cache lock").insert(key, pe.clone());
        Ok(pe)
    }
}

/// Encodings used while training (full-graph ids, rows of unobserved nodes
/// zero) and at inference.
#[derive(Clone, Debug)]
pub struct StudentEncodings {
    pub train: Tensor,
    pub infer: Tensor,
}

/// Transductive: one encoding of the whole graph. Inductive: training uses
/// the observed subgraph, inference recomputes on the full graph.
pub fn student_encodings(graph: &Graph, split: &SplitSpec, k: usize, cache: &PeCache) -> Result<StudentEncodings> {
    let full = cache.get(graph, k)?;
    let Some(observed) = &split.observed else {
        return Ok(StudentEncodings {
            train: full.vectors.clone(),
            infer: full.vectors.clone(),
        });
    };
    let sub = induced_subgraph(graph, observed)?;
    let local = cache.get(&sub.graph, k)?;
    let mut train = Tensor::zeros(graph.num_nodes(), k);
    for (row, &g) in sub.origin.iter().enumerate() {
        train.row_mut(g).copy_from_slice(local.vectors.row(row));
    }
    Ok(StudentEncodings {
        train,
        infer: full.vectors.clone(),
    })
}

/// Graph and split for one seed of `manifest` at feature-noise level
/// `noise`.
pub fn prepare(bundle: &DatasetBundle, manifest: &ExperimentManifest, noise: f64, seed: u64) -> Result<(Graph, SplitSpec)> {
    let split = make_split(&bundle.graph, manifest.setting, manifest.split, seed)?;
    let mut features = None;
    if manifest.normalize_features {
        features = Some(row_normalize(bundle.graph.features()));
    }
    if noise > 0.0 {
        let base = features.as_ref().unwrap_or(bundle.graph.features());
        features = Some(add_feature_noise(base, noise, seed)?);
    }
    let graph = match features {
        Some(f) => bundle.graph.with_features(f)?,
        None => bundle.graph.clone(),
    };
    Ok((graph, split))
}

#[derive(Clone, Debug)]
pub struct TeacherResult {
    pub run: TeacherRun,
    pub test_acc: f64,
    pub seconds: f64,
}

/// Stage I plus test accuracy of the teacher on the full graph.
pub fn train_teacher(graph: &Graph, split: &SplitSpec, config: &TeacherConfig, seed: u64) -> Result<TeacherResult> {
    let start = Instant::now();
    let run = stage1_pretrain(graph, split, config, seed)?;
    let test_acc = teacher_test_accuracy(&run.params, graph, split)?;
    Ok(TeacherResult {
        run,
        test_acc,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn teacher_test_accuracy(params: &crate::models::ModelParams, graph: &Graph, split: &SplitSpec) -> Result<f64> {
    let trace = teacher_predict(params, graph)?;
    accuracy(&trace.logits.argmax_rows(), graph.labels(), &split.test)
}

#[derive(Clone, Debug)]
pub struct StudentResult {
    pub run: DistillRun,
    pub test_acc: f64,
    pub val_acc: f64,
    /// Kernel used, after selection when enabled.
    pub kernel: Option<KernelKind>,
    pub seconds: f64,
}

/// Stage II and III for one variant. With kernel selection every standard
/// kernel is trained and the best validation accuracy wins.
pub fn train_student(
    graph: &Graph,
    split: &SplitSpec,
    teacher: Option<&TeacherOutputs>,
    encodings: Option<&StudentEncodings>,
    variant: &Variant,
    seed: u64,
) -> Result<StudentResult> {
    let start = Instant::now();
    let outputs = if variant.method.uses_teacher() {
        Some(teacher.ok_or_else(|| Error::Config(format!("method {} needs a teacher", variant.method.as_str())))?)
    } else {
        None
    };
    let pe = match (variant.method.uses_pe(), encodings) {
        (false, _) => None,
        (true, Some(e)) => Some(e),
        (true, None) => return Err(Error::Config("kmp+pe needs encodings".into())),
    };
    let kernels: Vec<KernelKind> = if variant.select_best_kernel && variant.config.gamma > 0.0 && outputs.is_some() {
        KernelKind::STANDARD.to_vec()
    } else {
        vec![variant.config.kernel]
    };
    let mut best: Option<(DistillRun, KernelKind)> = None;
    for kind in kernels {
        let config = DistillConfig {
            kernel: kind,
            ..variant.config.clone()
        };
        let run = stage2_distill(graph, split, outputs, pe.map(|e| &e.train), &config, seed)?;
        run.audit(split)?;
        if best.as_ref().is_none_or(|(b, _)| run.best_val_acc > b.best_val_acc) {
            best = Some((run, kind));
        }
    }
    let (run, kind) = best.expect("at least one kernel");
    let preds = stage3_infer(&run.student, graph.features(), pe.map(|e| &e.infer))?;
    let test_acc = accuracy(&preds.classes, graph.labels(), &split.test)?;
    let matched = outputs.is_some() && variant.config.gamma > 0.0;
    Ok(StudentResult {
        val_acc: run.best_val_acc,
        run,
        test_acc,
        kernel: matched.then_some(kind),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Everything one seed of a manifest produces.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub teacher: Option<TeacherResult>,
    pub records: Vec<RunRecord>,
    pub students: Vec<(String, StudentResult)>,
}

/// Runs the variants of `manifest` not listed in `skip` for one seed.
/// Teachers are shared across variants with the same noise level.
pub fn run_seed(
    manifest: &ExperimentManifest,
    bundle: &DatasetBundle,
    seed: u64,
    cache: &PeCache,
    skip: &dyn Fn(&str) -> bool,
) -> Result<SeedOutcome> {
    let variants: Vec<Variant> = manifest.variants().into_iter().filter(|v| !skip(&v.tag)).collect();
    let mut outcome = SeedOutcome {
        teacher: None,
        records: Vec::new(),
        students: Vec::new(),
    };
    let mut noises: Vec<f64> = variants.iter().map(|v| v.noise).collect();
    noises.sort_by(f64::total_cmp);
    noises.dedup();
    for noise in noises {
        let (graph, split) = prepare(bundle, manifest, noise, seed)?;
        let group: Vec<&Variant> = variants.iter().filter(|v| v.noise == noise).collect();
        let teacher = if group.iter().any(|v| v.method.uses_teacher()) {
            Some(train_teacher(&graph, &split, &manifest.teacher, seed)?)
        } else {
            None
        };
        for v in group {
            let encodings = if v.method.uses_pe() {
                Some(student_encodings(&graph, &split, v.pe_k, cache)?)
            } else {
                None
            };
            let result = train_student(&graph, &split, teacher.as_ref().map(|t| &t.run.outputs), encodings.as_ref(), v, seed)?;
            outcome.records.push(RunRecord {
                dataset: bundle.name.clone(),
                teacher: manifest.teacher.kind.to_string(),
                method: v.tag.clone(),
                setting: manifest.setting.as_str().into(),
                seed,
                test_acc: result.test_acc,
                val_acc: result.val_acc,
                epochs: result.run.epochs,
                seconds: result.seconds,
            });
            outcome.students.push((v.tag.clone(), result));
        }
        if let Some(t) = teacher {
            if noise == manifest.noise || outcome.teacher.is_none() {
                outcome.teacher = Some(t);
            }
        }
    }
    Ok(outcome)
}

/// Metrics row for a teacher run.
pub fn teacher_record(dataset: &str, manifest: &ExperimentManifest, seed: u64, t: &TeacherResult) -> RunRecord {
    RunRecord {
        dataset: dataset.into(),
        teacher: manifest.teacher.kind.to_string(),
        method: "teacher".into(),
        setting: manifest.setting.as_str().into(),
        seed,
        test_acc: t.test_acc,
        val_acc: t.run.best_val_acc,
        epochs: t.run.epochs,
        seconds: t.seconds,
    }
}
