//! Pipeline settings as UTF-8 `key = value` lines grouped in `[section]`s.
//!
//! ```text
//! [model]
//! input = grad
//! layers = 1:3:16 4:2:1024
//! alphas = 0.5 0.5
//! ```
//!
//! Layers are `subpatch:subsample:filters` triples. Unset keys keep their
//! defaults, which reproduce the reference architecture of the chosen input.

use std::path::{Path, PathBuf};

use crate::aggregation::{DEFAULT_CODEBOOK_SIZE, DEFAULT_KMEANS_ITERATIONS};
use crate::encoder::Architecture;
use crate::error::{CknError, Result};
use crate::image::DEFAULT_PATCH_SIDE;
use crate::input::InputType;
use crate::pca::PcaMode;
use crate::trainer::{InitScheme, LayerSpec, SgdConfig, DEFAULT_POOL_SIZE};

/// Bandwidth of trained layers when none is configured.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub input: InputType,
    /// `(subpatch, subsample, filters)` per layer.
    pub layers: Vec<(usize, usize, usize)>,
    pub alphas: Vec<f64>,
    pub patch_side: usize,
    pub pool_size: usize,
    pub sgd: SgdConfig,
    pub train_seed: u64,
    pub pca_mode: PcaMode,
    pub pca_dim: usize,
    pub codebook_size: usize,
    pub kmeans_iterations: usize,
    pub vocab_seed: u64,
    pub model_path: Option<PathBuf>,
    pub pca_path: Option<PathBuf>,
    pub codebook_path: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::for_input(InputType::Grad)
    }
}

impl PipelineConfig {
    pub fn for_input(input: InputType) -> Self {
        let arch = Architecture::reference(input);
        PipelineConfig {
            input,
            layers: arch.layers.iter().map(|l| (l.subpatch, l.subsample, l.filters)).collect(),
            alphas: vec![DEFAULT_ALPHA; arch.layers.len()],
            patch_side: DEFAULT_PATCH_SIDE,
            pool_size: DEFAULT_POOL_SIZE,
            sgd: SgdConfig::default(),
            train_seed: 0,
            pca_mode: PcaMode::Semi,
            pca_dim: 1024,
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            kmeans_iterations: DEFAULT_KMEANS_ITERATIONS,
            vocab_seed: 0,
            model_path: None,
            pca_path: None,
            codebook_path: None,
        }
    }

    pub fn architecture(&self) -> Architecture {
        let mut channels = self.input.map_channels();
        let layers = self
            .layers
            .iter()
            .map(|&(subpatch, subsample, filters)| {
                let spec = LayerSpec {
                    subpatch,
                    subsample,
                    filters,
                    in_channels: channels,
                };
                channels = filters;
                spec
            })
            .collect();
        Architecture {
            input: self.input,
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.architecture();
        arch.validate()?;
        if arch.output_shape(self.patch_side).is_none() {
            return Err(CknError::InvalidArgument(format!(
                "a {0}x{0} patch is too small for the configured layers",
                self.patch_side
            )));
        }
        if self.alphas.len() != self.layers.len() {
            return Err(CknError::InvalidArgument(format!(
                "{} alphas for {} layers",
                self.alphas.len(),
                self.layers.len()
            )));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(CknError::InvalidArgument("alphas must be positive".into()));
        }
        self.sgd.validate()?;
        if self.pca_dim == 0 || self.codebook_size == 0 || self.pool_size == 0 {
            return Err(CknError::InvalidArgument("pca dim, codebook size and pool size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CknError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| CknError::Config { line: i + 1, reason };
            if let Some(name) = line.strip_prefix('[') {
                section = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header `{line}`")))?
                    .trim()
                    .to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
            pairs.push((i + 1, format!("{section}.{}", key.trim()), value.trim().to_string()));
        }

        // The input type decides the layer defaults, so it is read first.
        let mut input = InputType::Grad;
        let mut white_side = None;
        for (line, key, value) in &pairs {
            let err = |reason: String| CknError::Config { line: *line, reason };
            match key.as_str() {
                "model.input" => {
                    input = match value.as_str() {
                        "raw" => InputType::Raw,
                        "white" => InputType::White { subpatch: 3 },
                        "grad" => InputType::Grad,
                        other => return Err(err(format!("unknown input type `{other}`"))),
                    }
                }
                "model.white_subpatch" => white_side = Some(parse_num::<usize>(value).map_err(err)?),
                _ => {}
            }
        }
        if let (InputType::White { .. }, Some(side)) = (input, white_side) {
            input = InputType::White { subpatch: side };
        }
        let mut cfg = PipelineConfig::for_input(input);

        for (line, key, value) in pairs {
            let err = |reason: String| CknError::Config { line, reason };
            match key.as_str() {
                "model.input" | "model.white_subpatch" => {}
                "model.layers" => {
                    cfg.layers = value
                        .split_whitespace()
                        .map(parse_layer)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(err)?;
                    if cfg.alphas.len() != cfg.layers.len() {
                        cfg.alphas = vec![DEFAULT_ALPHA; cfg.layers.len()];
                    }
                }
                "model.alphas" => cfg.alphas = parse_list(&value).map_err(err)?,
                "model.patch_side" => cfg.patch_side = parse_num(&value).map_err(err)?,
                "train.pool_size" => cfg.pool_size = parse_num(&value).map_err(err)?,
                "train.iterations" => cfg.sgd.iterations = parse_num(&value).map_err(err)?,
                "train.batch_size" => cfg.sgd.batch_size = parse_num(&value).map_err(err)?,
                "train.probe_iterations" => cfg.sgd.probe_iterations = parse_num(&value).map_err(err)?,
                "train.check_period" => cfg.sgd.check_period = parse_num(&value).map_err(err)?,
                "train.decay_period" => cfg.sgd.decay_period = parse_num(&value).map_err(err)?,
                "train.validation_pairs" => cfg.sgd.validation_pairs = parse_num(&value).map_err(err)?,
                "train.divergence_factor" => cfg.sgd.divergence_factor = parse_num(&value).map_err(err)?,
                "train.max_backtracks" => cfg.sgd.max_backtracks = parse_num(&value).map_err(err)?,
                "train.learning_rates" => cfg.sgd.lr_candidates = parse_list(&value).map_err(err)?,
                "train.init" => {
                    cfg.sgd.init = match value.as_str() {
                        "random-features" => InitScheme::RandomFeatures,
                        "normal" => InitScheme::StandardNormal,
                        other => return Err(err(format!("unknown init `{other}`"))),
                    }
                }
                "train.seed" => {
                    cfg.train_seed = parse_num(&value).map_err(err)?;
                    cfg.sgd.seed = cfg.train_seed;
                }
                "pca.mode" => cfg.pca_mode = value.parse().map_err(err)?,
                "pca.dim" => cfg.pca_dim = parse_num(&value).map_err(err)?,
                "vocab.k" => cfg.codebook_size = parse_num(&value).map_err(err)?,
                "vocab.iterations" => cfg.kmeans_iterations = parse_num(&value).map_err(err)?,
                "vocab.seed" => cfg.vocab_seed = parse_num(&value).map_err(err)?,
                "paths.model" => cfg.model_path = Some(value.into()),
                "paths.pca" => cfg.pca_path = Some(value.into()),
                "paths.codebook" => cfg.codebook_path = Some(value.into()),
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_num<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

fn parse_list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value.split([' ', ',']).filter(|s| !s.is_empty()).map(parse_num).collect()
}

fn parse_layer(triple: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = triple.split(':').map(parse_num).collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [e, s, p] => Ok((e, s, p)),
        _ => Err(format!("layer `{triple}` is not subpatch:subsample:filters")),
    }
}
