//! On-disk formats: dataset bundles, synthetic SBM graphs, model
//! checkpoints, positional-encoding caches and the metrics log.
//!
//! Binary formats are little-endian with 64-bit counts and floats. Every
//! decoder checks declared sizes against the bytes actually present before
//! allocating.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::eval::{RunRecord, METRICS_HEADER};
use crate::graph::Graph;
use crate::kernels::{Activation, KernelSpec};
use crate::models::{BatchNorm, Layer, ModelConfig, ModelKind, ModelParams, NormKind};
use crate::spectral::{FusionMode, PeFusion, PositionalEncoding};
use crate::tensor::Tensor;

/// A named graph dataset.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub name: String,
    pub graph: Graph,
    pub class_names: Vec<String>,
    pub provenance: String,
    /// Edge lines in the source file, before symmetrization and dedup.
    pub raw_edge_count: usize,
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Bounds-checked little-endian reader over a byte slice.
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader { path, bytes, pos: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        format_err(self.path, self.pos as u64, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| format_err(self.path, at as u64, format!("count {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// `count` floats, checked against the remaining length first.
    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(8)
            .filter(|&b| b <= self.remaining())
            .ok_or_else(|| self.err(format!("{count} floats declared, {} bytes left", self.remaining())))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.count()?;
        let cols = self.count()?;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| self.err(format!("tensor {rows}x{cols} overflows")))?;
        let data = self.f64s(len)?;
        Tensor::from_vec(rows, cols, data)
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        if self.take(8)? != expected {
            return Err(format_err(self.path, 0, "bad magic bytes"));
        }
        Ok(())
    }

    fn version(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::Version {
                path: self.path.to_path_buf(),
                found,
                expected,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.err(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

#[derive(Default)]
struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: usize) {
        self.bytes.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.rows());
        self.u64(t.cols());
        self.f64s(t.data());
    }
}

/// Writes `bytes` to `path` while holding an exclusive lock on it.
fn write_locked(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(false)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.lock().map_err(|e| Error::io(path, e))?;
    file.set_len(0).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))?;
    file.sync_all().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `features.bin`: `n`, `d`, then `n·d` row-major floats.
pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(path, bytes);
    let n = r.count()?;
    let d = r.count()?;
    let len = n
        .checked_mul(d)
        .ok_or_else(|| format_err(path, 0, format!("header {n}x{d} overflows")))?;
    if len.checked_mul(8) != Some(r.remaining()) {
        return Err(format_err(
            path,
            16,
            format!("header declares {n}x{d} floats but {} payload bytes follow", r.remaining()),
        ));
    }
    let data = r.f64s(len)?;
    Tensor::from_vec(n, d, data)
}

pub fn encode_features(t: &Tensor) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(t.rows());
    w.u64(t.cols());
    w.f64s(t.data());
    w.bytes
}

/// Lines of whitespace-separated integer columns, `#` comments allowed.
fn parse_int_rows(path: &Path, text: &str, columns: usize) -> Result<Vec<Vec<usize>>> {
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap_or("").trim();
        if !body.is_empty() {
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.len() != columns {
                return Err(format_err(path, offset, format!("expected {columns} columns, found {}", fields.len())));
            }
            let parsed: std::result::Result<Vec<usize>, _> = fields.iter().map(|f| f.parse::<usize>()).collect();
            rows.push(parsed.map_err(|e| format_err(path, offset, format!("bad integer: {e}")))?);
        }
        offset += line.len() as u64;
    }
    Ok(rows)
}

pub fn parse_edges(path: &Path, text: &str) -> Result<Vec<(usize, usize)>> {
    Ok(parse_int_rows(path, text, 2)?.into_iter().map(|r| (r[0], r[1])).collect())
}

pub fn parse_labels(path: &Path, text: &str) -> Result<Vec<(usize, usize)>> {
    Ok(parse_int_rows(path, text, 2)?.into_iter().map(|r| (r[0], r[1])).collect())
}

/// Flat `key = value` text; values may be double-quoted.
pub fn parse_key_values(path: &Path, text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let body = line.trim();
        if !body.is_empty() && !body.starts_with('#') {
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| format_err(path, offset, "expected `key = value`"))?;
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.') {
                return Err(format_err(path, offset, format!("invalid key `{key}`")));
            }
            let mut value = value.trim();
            if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
                value = &value[1..value.len() - 1];
            } else if value.starts_with('"') {
                return Err(format_err(path, offset, "unterminated string"));
            }
            out.push((key.to_string(), value.to_string()));
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

fn render_key_values(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = \"{v}\"\n")).collect()
}

/// Loads `edges.tsv`, `features.bin`, `labels.tsv` and optional `meta.toml`
/// from `dir`. Nodes absent from `labels.tsv` are unlabeled.
pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let features_path = dir.join("features.bin");
    let features = decode_features(&features_path, &read_file(&features_path)?)?;
    let n = features.rows();

    let edges_path = dir.join("edges.tsv");
    let edges = parse_edges(&edges_path, &read_text(&edges_path)?)?;
    let labels_path = dir.join("labels.tsv");
    let label_rows = parse_labels(&labels_path, &read_text(&labels_path)?)?;

    let meta_path = dir.join("meta.toml");
    let meta = if meta_path.exists() {
        parse_key_values(&meta_path, &read_text(&meta_path)?)?
    } else {
        Vec::new()
    };
    let get = |key: &str| meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    let declared_classes = get("num_classes")
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| format_err(&meta_path, 0, format!("num_classes `{v}` is not an integer")))
        })
        .transpose()?;
    let num_classes = declared_classes.unwrap_or_else(|| label_rows.iter().map(|r| r.1 + 1).max().unwrap_or(0));
    let mut labels = vec![None; n];
    for &(node, class) in &label_rows {
        if node >= n {
            return Err(Error::Graph(format!("{}: label for node {node} but only {n} nodes", labels_path.display())));
        }
        if class >= num_classes {
            return Err(Error::Graph(format!(
                "{}: class {class} of node {node} >= class count {num_classes}",
                labels_path.display()
            )));
        }
        labels[node] = Some(class);
    }
    let raw_edge_count = edges.len();
    let graph = Graph::build(&edges, features, labels, num_classes)?;
    let name = get("name").unwrap_or_else(|| {
        dir.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let class_names = match get("classes") {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => (0..num_classes).map(|c| c.to_string()).collect(),
    };
    Ok(DatasetBundle {
        name,
        graph,
        class_names,
        provenance: get("provenance").unwrap_or_default(),
        raw_edge_count,
    })
}

/// Writes a bundle in the layout [`load_dataset`] reads.
pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = &bundle.graph;
    let edges: String = g.edges().iter().map(|(u, v)| format!("{u}\t{v}\n")).collect();
    let labels: String = g
        .labels()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|c| format!("{i}\t{c}\n")))
        .collect();
    write_locked(&dir.join("edges.tsv"), edges.as_bytes())?;
    write_locked(&dir.join("labels.tsv"), labels.as_bytes())?;
    write_locked(&dir.join("features.bin"), &encode_features(g.features()))?;
    let meta = render_key_values(&[
        ("name", bundle.name.clone()),
        ("num_classes", g.num_classes().to_string()),
        ("classes", bundle.class_names.join(",")),
        ("provenance", bundle.provenance.clone()),
    ]);
    write_locked(&dir.join("meta.toml"), meta.as_bytes())
}

/// Stochastic block model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SbmSpec {
    pub blocks: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Offset of a block's feature mean along its own coordinate.
    pub mean_offset: f64,
    pub noise_std: f64,
}

impl SbmSpec {
    pub fn new(blocks: Vec<usize>, p_in: f64, p_out: f64, feature_dim: usize) -> Self {
        SbmSpec {
            blocks,
            p_in,
            p_out,
            feature_dim,
            mean_offset: 1.0,
            noise_std: 1.0,
        }
    }
}

/// Samples an SBM. Block `c` has features `N(offset · e_{c mod d}, σ² I)`
/// and label `c`.
pub fn generate_sbm(spec: &SbmSpec, seed: u64) -> Result<DatasetBundle> {
    if spec.blocks.is_empty() || spec.blocks.contains(&0) {
        return Err(Error::Config("every SBM block needs at least one node".into()));
    }
    for p in [spec.p_in, spec.p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("edge probability {p} outside [0, 1]")));
        }
    }
    if spec.feature_dim == 0 || !(spec.noise_std >= 0.0) {
        return Err(Error::Config("SBM needs feature_dim > 0 and noise_std >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block_of: Vec<usize> = spec
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(c, &size)| std::iter::repeat_n(c, size))
        .collect();
    let n = block_of.len();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if block_of[u] == block_of[v] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let features = Tensor::from_fn(n, spec.feature_dim, |i, j| {
        let mean = if j == block_of[i] % spec.feature_dim { spec.mean_offset } else { 0.0 };
        mean + noise.sample(&mut rng)
    });
    let labels = block_of.iter().map(|&c| Some(c)).collect();
    let graph = Graph::build(&edges, features, labels, spec.blocks.len())?;
    Ok(DatasetBundle {
        name: format!("sbm-{}x{}", spec.blocks.len(), spec.blocks[0]),
        graph,
        class_names: (0..spec.blocks.len()).map(|c| format!("block{c}")).collect(),
        provenance: format!(
            "sbm blocks={:?} p_in={} p_out={} d={} seed={seed}",
            spec.blocks, spec.p_in, spec.p_out, spec.feature_dim
        ),
        raw_edge_count: edges.len(),
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"KMPMODEL";
pub const CHECKPOINT_VERSION: u32 = 1;
const PE_MAGIC: &[u8; 8] = b"KMPPECCH";
pub const PE_VERSION: u32 = 1;

/// A model plus the optional encoding fusion and trained kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub fusion: Option<PeFusion>,
    pub kernel: Option<KernelSpec>,
}

fn kind_tag(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Gcn => 0,
        ModelKind::Sage => 1,
        ModelKind::Mlp => 2,
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let c = &ck.params.config;
    w.u8(kind_tag(c.kind));
    w.u64(c.input_dim);
    w.u64(c.hidden_dim);
    w.u64(c.output_dim);
    w.u64(c.num_layers);
    w.f64(c.dropout);
    w.u8(matches!(c.norm, NormKind::Batch) as u8);
    for t in ck.params.tensors() {
        w.tensor(t);
    }
    for norm in &ck.params.norms {
        w.tensor(&norm.running_mean);
        w.tensor(&norm.running_var);
    }
    match &ck.fusion {
        None => w.u8(0),
        Some(f) => {
            w.u8(1);
            w.u8(matches!(f.mode, FusionMode::Mul) as u8);
            w.tensor(&f.embed);
            w.tensor(&f.bias);
        }
    }
    match &ck.kernel {
        None => w.u8(0),
        Some(KernelSpec::Sigmoid { a, b }) => {
            w.u8(1);
            w.tensor(a);
            w.tensor(b);
        }
        Some(KernelSpec::Randomized { xi, projections }) => {
            w.u8(2);
            w.u64(xi.len());
            w.f64s(xi);
            for p in projections {
                w.tensor(p);
            }
        }
        Some(KernelSpec::Polynomial { offset, degree }) => {
            w.u8(3);
            w.f64(*offset);
            w.u32(*degree);
        }
        Some(KernelSpec::Gaussian { temperature }) => {
            w.u8(4);
            w.f64(*temperature);
        }
        Some(KernelSpec::Reverse {
            weight,
            decoder,
            activation,
        }) => {
            w.u8(5);
            w.u8(matches!(activation, Activation::Relu) as u8);
            w.tensor(weight);
            w.tensor(decoder);
        }
    }
    w.bytes
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(path, bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let kind = match r.u8()? {
        0 => ModelKind::Gcn,
        1 => ModelKind::Sage,
        2 => ModelKind::Mlp,
        t => return Err(r.err(format!("unknown model tag {t}"))),
    };
    let config = ModelConfig {
        kind,
        input_dim: r.count()?,
        hidden_dim: r.count()?,
        output_dim: r.count()?,
        num_layers: r.count()?,
        dropout: r.f64()?,
        norm: match r.u8()? {
            0 => NormKind::None,
            1 => NormKind::Batch,
            t => return Err(r.err(format!("unknown norm tag {t}"))),
        },
    };
    config.validate().map_err(|e| r.err(e.to_string()))?;
    if config.num_layers > r.remaining() {
        return Err(r.err(format!("{} layers declared", config.num_layers)));
    }
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let (fan_in, fan_out) = config.layer_dims(l);
        let expect = |r: &mut Reader, rows: usize, cols: usize| -> Result<Tensor> {
            let t = r.tensor()?;
            if t.shape() != (rows, cols) {
                return Err(r.err(format!("layer {l} tensor is {:?}, expected {:?}", t.shape(), (rows, cols))));
            }
            Ok(t)
        };
        let weight = expect(&mut r, fan_in, fan_out)?;
        let neighbor_weight = if kind == ModelKind::Sage {
            Some(expect(&mut r, fan_in, fan_out)?)
        } else {
            None
        };
        let bias = expect(&mut r, 1, fan_out)?;
        layers.push(Layer {
            weight,
            neighbor_weight,
            bias,
        });
    }
    let norm_count = match config.norm {
        NormKind::Batch => config.num_layers - 1,
        NormKind::None => 0,
    };
    let mut norm_parts = Vec::with_capacity(norm_count);
    for _ in 0..norm_count {
        norm_parts.push((r.tensor()?, r.tensor()?));
    }
    let mut norms = Vec::with_capacity(norm_count);
    for (scale, shift) in norm_parts {
        let running_mean = r.tensor()?;
        let running_var = r.tensor()?;
        let width = (1, config.hidden_dim);
        if [&scale, &shift, &running_mean, &running_var].iter().any(|t| t.shape() != width) {
            return Err(r.err("batch norm tensor has the wrong width"));
        }
        norms.push(BatchNorm {
            scale,
            shift,
            running_mean,
            running_var,
        });
    }
    let fusion = match r.u8()? {
        0 => None,
        1 => {
            let mode = match r.u8()? {
                0 => FusionMode::Concat,
                1 => FusionMode::Mul,
                t => return Err(r.err(format!("unknown fusion tag {t}"))),
            };
            let embed = r.tensor()?;
            let bias = r.tensor()?;
            let f = PeFusion { mode, embed, bias };
            if f.bias.shape() != (1, f.feature_dim()) || f.output_dim() != config.input_dim {
                return Err(r.err("fusion section does not match the model input"));
            }
            Some(f)
        }
        t => return Err(r.err(format!("unknown fusion flag {t}"))),
    };
    let kernel = match r.u8()? {
        0 => None,
        1 => Some(KernelSpec::Sigmoid {
            a: r.tensor()?,
            b: r.tensor()?,
        }),
        2 => {
            let t = r.count()?;
            let xi = r.f64s(t)?;
            let mut projections = Vec::with_capacity(t);
            for _ in 0..t {
                projections.push(r.tensor()?);
            }
            Some(KernelSpec::Randomized { xi, projections })
        }
        3 => Some(KernelSpec::Polynomial {
            offset: r.f64()?,
            degree: r.u32()?,
        }),
        4 => Some(KernelSpec::Gaussian { temperature: r.f64()? }),
        5 => {
            let activation = match r.u8()? {
                0 => Activation::Sigmoid,
                1 => Activation::Relu,
                t => return Err(r.err(format!("unknown activation tag {t}"))),
            };
            Some(KernelSpec::Reverse {
                activation,
                weight: r.tensor()?,
                decoder: r.tensor()?,
            })
        }
        t => return Err(r.err(format!("unknown kernel tag {t}"))),
    };
    r.finish()?;
    Ok(Checkpoint {
        params: ModelParams { config, layers, norms },
        fusion,
        kernel,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_locked(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(path, &read_file(path)?)
}

pub fn encode_pe(pe: &PositionalEncoding) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes.extend_from_slice(PE_MAGIC);
    w.u32(PE_VERSION);
    w.u64(pe.num_nodes());
    w.u64(pe.k());
    w.f64s(&pe.eigenvalues);
    for &f in &pe.flipped {
        w.u8(f as u8);
    }
    w.f64s(pe.vectors.data());
    w.bytes
}

pub fn decode_pe(path: &Path, bytes: &[u8]) -> Result<PositionalEncoding> {
    let mut r = Reader::new(path, bytes);
    r.magic(PE_MAGIC)?;
    r.version(PE_VERSION)?;
    let n = r.count()?;
    let k = r.count()?;
    let eigenvalues = r.f64s(k)?;
    let flipped = r.take(k)?.iter().map(|&b| b != 0).collect();
    let len = n.checked_mul(k).ok_or_else(|| r.err(format!("{n}x{k} overflows")))?;
    let vectors = Tensor::from_vec(n, k, r.f64s(len)?)?;
    r.finish()?;
    Ok(PositionalEncoding {
        vectors,
        eigenvalues,
        flipped,
    })
}

pub fn save_pe(path: &Path, pe: &PositionalEncoding) -> Result<()> {
    write_locked(path, &encode_pe(pe))
}

pub fn load_pe(path: &Path) -> Result<PositionalEncoding> {
    decode_pe(path, &read_file(path)?)
}

fn check_field(path: &Path, field: &str) -> Result<()> {
    if field.contains([',', '\n', '\r']) {
        return Err(format_err(path, 0, format!("field `{field}` contains a separator")));
    }
    Ok(())
}

pub fn parse_metrics(path: &Path, text: &str) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let body = line.trim_end_matches(['\n', '\r']);
        let at = offset;
        offset += line.len() as u64;
        if body.is_empty() {
            continue;
        }
        if i == 0 {
            if body != METRICS_HEADER {
                return Err(format_err(path, 0, "unexpected metrics header"));
            }
            continue;
        }
        let f: Vec<&str> = body.split(',').collect();
        if f.len() != 9 {
            return Err(format_err(path, at, format!("expected 9 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| format_err(path, at, format!("bad number `{s}`")));
        let int = |s: &str| s.parse::<u64>().map_err(|_| format_err(path, at, format!("bad integer `{s}`")));
        let test_acc = num(f[5])?;
        let val_acc = num(f[6])?;
        if !(0.0..=1.0).contains(&test_acc) || !(0.0..=1.0).contains(&val_acc) {
            return Err(format_err(path, at, "accuracy outside [0, 1]"));
        }
        out.push(RunRecord {
            dataset: f[0].into(),
            teacher: f[1].into(),
            method: f[2].into(),
            setting: f[3].into(),
            seed: int(f[4])?,
            test_acc,
            val_acc,
            epochs: int(f[7])? as usize,
            seconds: num(f[8])?,
        });
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    parse_metrics(path, &read_text(path)?)
}

/// Appends records under an exclusive lock, writing the header into an
/// empty file first.
pub fn append_metrics(path: &Path, records: &[RunRecord]) -> Result<()> {
    for rec in records {
        for field in [&rec.dataset, &rec.teacher, &rec.method, &rec.setting] {
            check_field(path, field)?;
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.lock().map_err(|e| Error::io(path, e))?;
    let mut existing = String::new();
    file.read_to_string(&mut existing).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if existing.is_empty() {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    } else if !existing.ends_with('\n') {
        text.push('\n');
    }
    for rec in records {
        text.push_str(&rec.to_csv());
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes text to a file under an exclusive lock.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_locked(path, text.as_bytes())
}

/// `KMP_DATA_ROOT`, if set.
pub fn data_root_from_env() -> Option<PathBuf> {
    std::env::var_os("KMP_DATA_ROOT").map(PathBuf::from)
}

/// Opens a file for reading, mapping the error to this crate's type.
pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}
