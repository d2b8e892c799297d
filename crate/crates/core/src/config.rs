//! Model and training configuration, stored as flat `key = value` text.
//!
//! Unknown keys are rejected. Lines starting with `#` are comments. Lists are
//! comma separated; skeleton edges are written `i-j`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graphs::SkeletonSpec;
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvOrder {
    SpatialFirst,
    TemporalFirst,
}

impl FromStr for ConvOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial_first" => Ok(ConvOrder::SpatialFirst),
            "temporal_first" => Ok(ConvOrder::TemporalFirst),
            _ => Err(Error::Config(format!("unknown conv_order `{s}`"))),
        }
    }
}

impl ConvOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            ConvOrder::SpatialFirst => "spatial_first",
            ConvOrder::TemporalFirst => "temporal_first",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipMode {
    Global,
    PerTensor,
}

impl FromStr for ClipMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(ClipMode::Global),
            "per_tensor" => Ok(ClipMode::PerTensor),
            _ => Err(Error::Config(format!("unknown clip_mode `{s}`"))),
        }
    }
}

impl ClipMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ClipMode::Global => "global",
            ClipMode::PerTensor => "per_tensor",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub joints: usize,
    pub channels: usize,
    pub edges: Vec<(usize, usize)>,
    /// Observed frames `T`.
    pub obs_len: usize,
    /// Predicted frames `ΔT`.
    pub pred_len: usize,
    /// Highest difference order fed to encoder and decoder.
    pub diff_order: usize,
    /// Output width of each MST-GCU; the stem convolution emits `layer_dims[0]`
    /// and the last entry is the decoder state width.
    pub layer_dims: Vec<usize>,
    pub spatial_scales: usize,
    pub temporal_scales: usize,
    pub spatial_hops: usize,
    pub temporal_hops: usize,
    /// Width of the embeddings used to infer pooling and unpooling operators.
    pub embed_dim: usize,
    pub conv_order: ConvOrder,
    /// When false the GA-GRU attention scores are fixed at 1 (plain graph-free GRU gates).
    pub attention: bool,
    pub trainable_graphs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            joints: 20,
            channels: 3,
            edges: (1..20).map(|j| (j - 1, j)).collect(),
            obs_len: 10,
            pred_len: 10,
            diff_order: 2,
            layer_dims: vec![64, 64, 128, 256],
            spatial_scales: 3,
            temporal_scales: 3,
            spatial_hops: 1,
            temporal_hops: 4,
            embed_dim: 32,
            conv_order: ConvOrder::SpatialFirst,
            attention: true,
            trainable_graphs: true,
        }
    }
}

impl ModelConfig {
    /// Reduced widths for single-core desk runs; scale and hop structure is
    /// unchanged from the default.
    pub fn desk(joints: usize) -> Self {
        ModelConfig {
            joints,
            edges: (1..joints).map(|j| (j - 1, j)).collect(),
            pred_len: 5,
            layer_dims: vec![16, 16, 32, 32],
            embed_dim: 8,
            ..Default::default()
        }
    }

    pub fn skeleton(&self) -> Result<SkeletonSpec> {
        SkeletonSpec::new(self.joints, self.channels, self.edges.clone())
    }

    pub fn state_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn input_channels(&self) -> usize {
        self.channels * (self.diff_order + 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.skeleton()?;
        if self.obs_len < self.diff_order + 1 || self.obs_len < 2 {
            return Err(Error::Config(format!(
                "obs_len {} too short for diff_order {}",
                self.obs_len, self.diff_order
            )));
        }
        if self.pred_len == 0 {
            return Err(Error::Config("pred_len must be positive".into()));
        }
        if self.layer_dims.is_empty() || self.layer_dims.contains(&0) {
            return Err(Error::Config(
                "layer_dims must be non-empty and positive".into(),
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        crate::multiscale::ScaleSpec::new(
            self.joints,
            self.obs_len,
            self.spatial_scales,
            self.temporal_scales,
        )?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// When set, training runs epochs until this many optimizer steps and
    /// `epochs` is ignored.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub weights: LossWeights,
    pub teacher_forcing: bool,
    /// Window stride when cutting sequences into training pairs.
    pub stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            clip: 0.5,
            clip_mode: ClipMode::Global,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 1,
            max_steps: None,
            seed: 0,
            weights: LossWeights::default(),
            teacher_forcing: false,
            stride: 1,
        }
    }
}

impl TrainConfig {
    /// Settings for the single-core desk runs: the reference optimizer with a
    /// larger step size.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            seed: 7,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("clip", self.clip), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v.is_finite() && v >= 0.0) || (name != "lr" && v == 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.stride == 0 {
            return Err(Error::Config(
                "batch_size and stride must be positive".into(),
            ));
        }
        self.weights.validate()
    }
}

/// Everything needed to rebuild a model and resume its training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn list<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean for {key}: `{v}`"))),
    }
}

fn parse_edges(v: &str) -> Result<Vec<(usize, usize)>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|pair| {
            let (a, b) = pair
                .trim()
                .split_once('-')
                .ok_or_else(|| Error::Config(format!("bad edge `{pair}`")))?;
            Ok((parse_num("edges", a.trim())?, parse_num("edges", b.trim())?))
        })
        .collect()
}

impl RunConfig {
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let edges: Vec<String> = m.edges.iter().map(|(a, b)| format!("{a}-{b}")).collect();
        let _ = writeln!(s, "joints = {}", m.joints);
        let _ = writeln!(s, "channels = {}", m.channels);
        let _ = writeln!(s, "edges = {}", edges.join(","));
        let _ = writeln!(s, "obs_len = {}", m.obs_len);
        let _ = writeln!(s, "pred_len = {}", m.pred_len);
        let _ = writeln!(s, "diff_order = {}", m.diff_order);
        let _ = writeln!(s, "layer_dims = {}", list(&m.layer_dims));
        let _ = writeln!(s, "spatial_scales = {}", m.spatial_scales);
        let _ = writeln!(s, "temporal_scales = {}", m.temporal_scales);
        let _ = writeln!(s, "spatial_hops = {}", m.spatial_hops);
        let _ = writeln!(s, "temporal_hops = {}", m.temporal_hops);
        let _ = writeln!(s, "embed_dim = {}", m.embed_dim);
        let _ = writeln!(s, "conv_order = {}", m.conv_order.as_str());
        let _ = writeln!(s, "attention = {}", m.attention);
        let _ = writeln!(s, "trainable_graphs = {}", m.trainable_graphs);
        let _ = writeln!(s, "lr = {:?}", t.lr);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "clip = {:?}", t.clip);
        let _ = writeln!(s, "clip_mode = {}", t.clip_mode.as_str());
        let _ = writeln!(s, "beta1 = {:?}", t.beta1);
        let _ = writeln!(s, "beta2 = {:?}", t.beta2);
        let _ = writeln!(s, "eps = {:?}", t.eps);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        if let Some(n) = t.max_steps {
            let _ = writeln!(s, "max_steps = {n}");
        }
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "alpha = {:?}", t.weights.alpha);
        let _ = writeln!(s, "beta = {:?}", t.weights.beta);
        let _ = writeln!(s, "gamma = {:?}", t.weights.gamma);
        let _ = writeln!(s, "teacher_forcing = {}", t.teacher_forcing);
        let _ = writeln!(s, "stride = {}", t.stride);
        s
    }

    /// Parses config text on top of the defaults. A config that sets
    /// `joints` without `edges` gets a chain skeleton.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut edges = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                source_name: "config".into(),
                line: n + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, v) = (key.trim(), value.trim());
            let (m, t) = (&mut cfg.model, &mut cfg.train);
            match key {
                "joints" => m.joints = parse_num(key, v)?,
                "channels" => m.channels = parse_num(key, v)?,
                "edges" => edges = Some(parse_edges(v)?),
                "obs_len" => m.obs_len = parse_num(key, v)?,
                "pred_len" => m.pred_len = parse_num(key, v)?,
                "diff_order" => m.diff_order = parse_num(key, v)?,
                "layer_dims" => {
                    m.layer_dims = v
                        .split(',')
                        .map(|d| parse_num(key, d.trim()))
                        .collect::<Result<_>>()?
                }
                "spatial_scales" => m.spatial_scales = parse_num(key, v)?,
                "temporal_scales" => m.temporal_scales = parse_num(key, v)?,
                "spatial_hops" => m.spatial_hops = parse_num(key, v)?,
                "temporal_hops" => m.temporal_hops = parse_num(key, v)?,
                "embed_dim" => m.embed_dim = parse_num(key, v)?,
                "conv_order" => m.conv_order = v.parse()?,
                "attention" => m.attention = parse_bool(key, v)?,
                "trainable_graphs" => m.trainable_graphs = parse_bool(key, v)?,
                "lr" => t.lr = parse_num(key, v)?,
                "batch_size" => t.batch_size = parse_num(key, v)?,
                "clip" => t.clip = parse_num(key, v)?,
                "clip_mode" => t.clip_mode = v.parse()?,
                "beta1" => t.beta1 = parse_num(key, v)?,
                "beta2" => t.beta2 = parse_num(key, v)?,
                "eps" => t.eps = parse_num(key, v)?,
                "epochs" => t.epochs = parse_num(key, v)?,
                "max_steps" => t.max_steps = Some(parse_num(key, v)?),
                "seed" => t.seed = parse_num(key, v)?,
                "alpha" => t.weights.alpha = parse_num(key, v)?,
                "beta" => t.weights.beta = parse_num(key, v)?,
                "gamma" => t.weights.gamma = parse_num(key, v)?,
                "teacher_forcing" => t.teacher_forcing = parse_bool(key, v)?,
                "stride" => t.stride = parse_num(key, v)?,
                _ => {
                    return Err(Error::Parse {
                        source_name: "config".into(),
                        line: n + 1,
                        msg: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        cfg.model.edges =
            edges.unwrap_or_else(|| (1..cfg.model.joints).map(|j| (j - 1, j)).collect());
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| Error::Context {
            context: path.display().to_string(),
            inner: Box::new(e),
        })
    }
}
