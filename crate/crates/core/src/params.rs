//! Learnable tensors of the query-specific graph network and their
//! checkpoint format.
//!
//! All tensors live in one flat list in a fixed order; typed index structs
//! ([`IntraIndex`], [`InterIndex`], ...) say which slot plays which role.
//! Row vectors (biases, norm gains) are stored as 1 x n matrices.
//!
//! Checkpoint files are plain text:
//!
//! ```text
//! mlkg-params 1
//! config input_dim=512 hidden_dim=128 layers=2 query_attention=true
//! tensor input 512 128
//! <one line of space-separated values per row>
//! tensor layer0.intra_entity.query_alpha 128 128
//! ...
//! ```
//!
//! Values are written in shortest round-trip form, so loading a checkpoint
//! reproduces the saved parameters bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "mlkg-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw embedding dimension.
    pub input_dim: usize,
    /// Hidden dimension after the input bottleneck.
    pub hidden_dim: usize,
    pub layers: usize,
    /// When false the query-alignment attention terms are dropped, leaving
    /// node-node similarity (intra) and uniform weights (inter).
    pub query_attention: bool,
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, layers: usize) -> Self {
        Self { input_dim, hidden_dim, layers, query_attention: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim < 2 {
            return Err(Error::Config(format!("hidden dimension must be at least 2, got {}", self.hidden_dim)));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: (usize, usize),
    init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpIndex {
    pub hidden_weight: usize,
    pub hidden_bias: usize,
    pub output_weight: usize,
    pub output_bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIndex {
    pub gain: usize,
    pub bias: usize,
}

/// Slots of one within-level attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntraIndex {
    pub query_alpha: usize,
    pub key_alpha: usize,
    pub query_beta: usize,
    /// 2n x n: rows `0..n` act on the target node, rows `n..2n` on the neighbor.
    pub key_beta: usize,
    pub value: usize,
    pub norm: NormIndex,
    pub mlp: MlpIndex,
}

/// Slots of one cross-level attention block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterIndex {
    pub target: usize,
    /// One projection per source level, in the block's source order.
    pub sources: Vec<usize>,
    pub query_gamma: usize,
    /// 2n x n: rows `0..n` act on the projected target, rows `n..2n` on the
    /// projected source.
    pub key_gamma: usize,
    pub value: usize,
    pub norm: NormIndex,
    pub mlp: MlpIndex,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIndex {
    pub intra_entity: IntraIndex,
    pub intra_chunk: IntraIndex,
    /// Chunks updated from entities.
    pub inter_chunk: InterIndex,
    /// Documents updated from entities and chunks.
    pub inter_document: InterIndex,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub input: usize,
    pub layers: Vec<LayerIndex>,
    pub specs: Vec<TensorSpec>,
}

struct Builder {
    specs: Vec<TensorSpec>,
    n: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.specs.push(TensorSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn square(&mut self, name: String) -> usize {
        let n = self.n;
        self.add(name, (n, n), Init::Xavier)
    }

    fn norm(&mut self, prefix: &str) -> NormIndex {
        let n = self.n;
        NormIndex {
            gain: self.add(format!("{prefix}.norm_gain"), (1, n), Init::Ones),
            bias: self.add(format!("{prefix}.norm_bias"), (1, n), Init::Zeros),
        }
    }

    fn mlp(&mut self, prefix: &str) -> MlpIndex {
        let n = self.n;
        MlpIndex {
            hidden_weight: self.square(format!("{prefix}.mlp_hidden_weight")),
            hidden_bias: self.add(format!("{prefix}.mlp_hidden_bias"), (1, n), Init::Zeros),
            output_weight: self.square(format!("{prefix}.mlp_output_weight")),
            output_bias: self.add(format!("{prefix}.mlp_output_bias"), (1, n), Init::Zeros),
        }
    }

    fn intra(&mut self, prefix: &str) -> IntraIndex {
        let n = self.n;
        IntraIndex {
            query_alpha: self.square(format!("{prefix}.query_alpha")),
            key_alpha: self.square(format!("{prefix}.key_alpha")),
            query_beta: self.square(format!("{prefix}.query_beta")),
            key_beta: self.add(format!("{prefix}.key_beta"), (2 * n, n), Init::Xavier),
            value: self.square(format!("{prefix}.value")),
            norm: self.norm(prefix),
            mlp: self.mlp(prefix),
        }
    }

    fn inter(&mut self, prefix: &str, sources: &[&str]) -> InterIndex {
        let n = self.n;
        InterIndex {
            target: self.square(format!("{prefix}.target")),
            sources: sources.iter().map(|s| self.square(format!("{prefix}.source_{s}"))).collect(),
            query_gamma: self.square(format!("{prefix}.query_gamma")),
            key_gamma: self.add(format!("{prefix}.key_gamma"), (2 * n, n), Init::Xavier),
            value: self.square(format!("{prefix}.value")),
            norm: self.norm(prefix),
            mlp: self.mlp(prefix),
        }
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let mut b = Builder { specs: Vec::new(), n: config.hidden_dim };
        let input = b.add("input".into(), (config.input_dim, config.hidden_dim), Init::Xavier);
        let layers = (0..config.layers)
            .map(|l| LayerIndex {
                intra_entity: b.intra(&format!("layer{l}.intra_entity")),
                intra_chunk: b.intra(&format!("layer{l}.intra_chunk")),
                inter_chunk: b.inter(&format!("layer{l}.inter_chunk"), &["entity"]),
                inter_document: b.inter(&format!("layer{l}.inter_document"), &["entity", "chunk"]),
            })
            .collect();
        Self { input, layers, specs: b.specs }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QsgnnParameters {
    pub config: ModelConfig,
    pub layout: Layout,
    pub tensors: Vec<Mat>,
}

impl QsgnnParameters {
    /// Xavier-uniform weights, zero biases, unit norm gains.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let tensors = layout
            .specs
            .iter()
            .map(|spec| match spec.init {
                Init::Zeros => Mat::zeros(spec.shape),
                Init::Ones => Mat::ones(spec.shape),
                Init::Xavier => {
                    let limit = (6.0 / (spec.shape.0 + spec.shape.1) as f64).sqrt();
                    Mat::from_shape_fn(spec.shape, |_| rng.gen_range(-limit..=limit))
                }
            })
            .collect();
        Ok(Self { config, layout, tensors })
    }

    /// Same layout with every tensor zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let tensors = layout.specs.iter().map(|s| Mat::zeros(s.shape)).collect();
        Ok(Self { config, layout, tensors })
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors.iter().map(|t| Mat::zeros(t.dim())).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layout.specs.iter().map(|s| s.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout.specs.iter().position(|s| s.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    /// First non-finite entry, as `(tensor name, flat index)`.
    pub fn first_non_finite(&self) -> Option<(String, usize)> {
        first_non_finite(&self.layout, &self.tensors)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n"));
        let c = &self.config;
        out.push_str(&format!(
            "config input_dim={} hidden_dim={} layers={} query_attention={}\n",
            c.input_dim, c.hidden_dim, c.layers, c.query_attention
        ));
        for (spec, t) in self.layout.specs.iter().zip(&self.tensors) {
            out.push_str(&format!("tensor {} {} {}\n", spec.name, t.nrows(), t.ncols()));
            for row in t.outer_iter() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }

    /// Parses a checkpoint; when `expected` is given the stored config must
    /// equal it.
    pub fn from_text(text: &str, expected: Option<&ModelConfig>) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty checkpoint".into()))?;
        if header != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(bad(format!("unsupported header {header:?}")));
        }
        let config = parse_config_line(lines.next().unwrap_or_default())?;
        if let Some(exp) = expected {
            if exp != &config {
                return Err(bad(format!("checkpoint config {config:?} does not match expected {exp:?}")));
            }
        }
        config.validate()?;
        let layout = Layout::new(&config);
        let mut tensors = Vec::with_capacity(layout.specs.len());
        for spec in &layout.specs {
            let head = lines.next().ok_or_else(|| bad(format!("missing tensor {}", spec.name)))?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            let shape = match parts.as_slice() {
                ["tensor", name, r, c] if *name == spec.name => (
                    r.parse::<usize>().map_err(|e| bad(e.to_string()))?,
                    c.parse::<usize>().map_err(|e| bad(e.to_string()))?,
                ),
                _ => return Err(bad(format!("expected tensor {}, found {head:?}", spec.name))),
            };
            if shape != spec.shape {
                return Err(Error::Shape(format!("tensor {} stored as {shape:?}, expected {:?}", spec.name, spec.shape)));
            }
            let mut values = Vec::with_capacity(shape.0 * shape.1);
            for _ in 0..shape.0 {
                let row = lines.next().ok_or_else(|| bad(format!("tensor {} is truncated", spec.name)))?;
                let before = values.len();
                for tok in row.split_whitespace() {
                    values.push(tok.parse::<f64>().map_err(|e| bad(format!("{}: {e}", spec.name)))?);
                }
                if values.len() - before != shape.1 {
                    return Err(Error::Shape(format!("tensor {} has a row of the wrong width", spec.name)));
                }
            }
            tensors.push(Mat::from_shape_vec(shape, values).expect("row widths checked"));
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing data after last tensor".into()));
        }
        let params = Self { config, layout, tensors };
        if let Some((name, i)) = params.first_non_finite() {
            return Err(Error::NonFinite { what: name, index: i });
        }
        Ok(params)
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?, expected)
    }
}

pub(crate) fn first_non_finite(layout: &Layout, tensors: &[Mat]) -> Option<(String, usize)> {
    layout.specs.iter().zip(tensors).find_map(|(spec, t)| {
        t.iter().position(|v| !v.is_finite()).map(|i| (spec.name.clone(), i))
    })
}

fn parse_config_line(line: &str) -> Result<ModelConfig> {
    let bad = || Error::Checkpoint(format!("malformed config line {line:?}"));
    let mut parts = line.split_whitespace();
    if parts.next() != Some("config") {
        return Err(bad());
    }
    let (mut input, mut hidden, mut layers, mut query) = (None, None, None, None);
    for kv in parts {
        let (k, v) = kv.split_once('=').ok_or_else(bad)?;
        match k {
            "input_dim" => input = v.parse().ok(),
            "hidden_dim" => hidden = v.parse().ok(),
            "layers" => layers = v.parse().ok(),
            "query_attention" => query = v.parse().ok(),
            _ => return Err(bad()),
        }
    }
    Ok(ModelConfig {
        input_dim: input.ok_or_else(bad)?,
        hidden_dim: hidden.ok_or_else(bad)?,
        layers: layers.ok_or_else(bad)?,
        query_attention: query.ok_or_else(bad)?,
    })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params(seed: u64) -> QsgnnParameters {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        QsgnnParameters::init(ModelConfig::new(12, 4, 2), &mut rng).unwrap()
    }

    #[test]
    fn shapes_follow_config() {
        let p = params(1);
        let n = 4;
        for (spec, t) in p.layout.specs.iter().zip(&p.tensors) {
            assert_eq!(spec.shape, t.dim(), "{}", spec.name);
        }
        assert_eq!(p.tensors[p.layout.input].dim(), (12, n));
        let l0 = &p.layout.layers[0];
        assert_eq!(p.tensors[l0.intra_entity.key_beta].dim(), (2 * n, n));
        assert_eq!(p.tensors[l0.inter_document.key_gamma].dim(), (2 * n, n));
        assert_eq!(l0.inter_document.sources.len(), 2);
        assert_eq!(l0.inter_chunk.sources.len(), 1);
        assert!(p.tensors[l0.intra_chunk.norm.gain].iter().all(|&v| v == 1.0));
        assert!(p.tensors[l0.intra_chunk.mlp.hidden_bias].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn xavier_bounds_hold() {
        let p = params(2);
        let limit = (6.0f64 / 8.0).sqrt();
        let w = &p.tensors[p.layout.layers[1].inter_chunk.value];
        assert!(w.iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn zero_layers_keeps_only_input() {
        let p = QsgnnParameters::zeros(ModelConfig::new(8, 2, 0)).unwrap();
        assert_eq!(p.tensors.len(), 1);
    }

    #[test]
    fn hidden_dim_below_two_rejected() {
        assert!(QsgnnParameters::zeros(ModelConfig::new(8, 1, 1)).is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let p = params(3);
        let q = QsgnnParameters::from_text(&p.to_text(), Some(&p.config)).unwrap();
        assert_eq!(p, q);
        for (a, b) in p.tensors.iter().zip(&q.tensors) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let p = params(3);
        let other = ModelConfig::new(12, 4, 1);
        assert!(QsgnnParameters::from_text(&p.to_text(), Some(&other)).is_err());
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let p = params(3);
        let text = p.to_text().replacen("tensor input 12 4", "tensor input 11 4", 1);
        assert!(QsgnnParameters::from_text(&text, None).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/params");
        let p = params(4);
        p.save(&path).unwrap();
        assert_eq!(QsgnnParameters::load(&path, None).unwrap(), p);
    }
}
