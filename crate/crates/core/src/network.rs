//! Counting network: a small convolutional backbone, a foreground predictor,
//! a transformer that refines foreground tokens against themselves and the
//! background, and a density estimator over the recombined feature map.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear, Module};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agency::{DensitySource, ForegroundFeature, RegionFeatures};
use crate::datasets::{derive_seed, CellGrid, Image};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Densities of foreground cells are floored here before allocation.
pub const DENSITY_FLOOR: f64 = 1e-3;
pub const MASK_THRESHOLD: f64 = 0.5;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ToyCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub in_channels: usize,
    pub channels: usize,
    pub stride: usize,
    pub attn_heads: usize,
    pub attn_layers: usize,
    pub head_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::ToyCnn,
            in_channels: 1,
            channels: 64,
            stride: 8,
            attn_heads: 2,
            attn_layers: 1,
            head_hidden: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8, 16].contains(&self.stride) {
            return Err(Error::Config(format!("model.stride must be one of 2, 4, 8, 16; got {}", self.stride)));
        }
        if self.channels < 4 || !self.channels.is_multiple_of(4) {
            return Err(Error::Config(format!("model.channels must be a positive multiple of 4, got {}", self.channels)));
        }
        if self.attn_heads == 0 || !self.channels.is_multiple_of(self.attn_heads) {
            return Err(Error::Config(format!(
                "model.channels ({}) must be divisible by model.attn_heads ({})",
                self.channels, self.attn_heads
            )));
        }
        if self.in_channels == 0 || self.head_hidden == 0 {
            return Err(Error::Config("model.in_channels and model.head_hidden must be positive".into()));
        }
        Ok(())
    }

    fn block_channels(&self) -> [usize; 4] {
        let c = self.channels;
        [c / 4, c / 2, c, c]
    }

    fn pooled_blocks(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }
}

/// Named parameter specification: shape, fan-in and init scheme.
#[derive(Debug, Clone, Copy)]
enum Init {
    He(usize),
    Small,
    Zeros,
    Ones,
}

fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let mut cin = cfg.in_channels;
    for (k, cout) in cfg.block_channels().into_iter().enumerate() {
        push(format!("backbone.block{k}.weight"), vec![cout, cin, 3, 3], Init::He(cin * 9));
        push(format!("backbone.block{k}.bias"), vec![cout], Init::Zeros);
        cin = cout;
    }
    let c = cfg.channels;
    let h = cfg.head_hidden;
    push("fg.fc1.weight".into(), vec![h, c], Init::He(c));
    push("fg.fc1.bias".into(), vec![h], Init::Zeros);
    push("fg.fc2.weight".into(), vec![1, h], Init::He(h));
    push("fg.fc2.bias".into(), vec![1], Init::Zeros);
    for l in 0..cfg.attn_layers {
        for block in ["self", "cross"] {
            let p = format!("transformer.layer{l}.{block}");
            push(format!("{p}.ln_q.gamma"), vec![c], Init::Ones);
            push(format!("{p}.ln_q.beta"), vec![c], Init::Zeros);
            if block == "cross" {
                push(format!("{p}.ln_kv.gamma"), vec![c], Init::Ones);
                push(format!("{p}.ln_kv.beta"), vec![c], Init::Zeros);
            }
            for proj in ["q", "k", "v"] {
                push(format!("{p}.{proj}.weight"), vec![c, c], Init::He(c));
                push(format!("{p}.{proj}.bias"), vec![c], Init::Zeros);
            }
            push(format!("{p}.o.weight"), vec![c, c], Init::Small);
            push(format!("{p}.o.bias"), vec![c], Init::Zeros);
            push(format!("{p}.ffn.ln.gamma"), vec![c], Init::Ones);
            push(format!("{p}.ffn.ln.beta"), vec![c], Init::Zeros);
            push(format!("{p}.ffn.fc1.weight"), vec![2 * c, c], Init::He(c));
            push(format!("{p}.ffn.fc1.bias"), vec![2 * c], Init::Zeros);
            push(format!("{p}.ffn.fc2.weight"), vec![c, 2 * c], Init::Small);
            push(format!("{p}.ffn.fc2.bias"), vec![c], Init::Zeros);
        }
    }
    push("density.conv1.weight".into(), vec![h, c, 3, 3], Init::He(c * 9));
    push("density.conv1.bias".into(), vec![h], Init::Zeros);
    push("density.conv2.weight".into(), vec![1, h, 1, 1], Init::He(h));
    push("density.conv2.bias".into(), vec![1], Init::Zeros);
    out
}

fn init_values(name: &str, shape: &[usize], init: Init, seed: u64) -> Vec<f32> {
    let n: usize = shape.iter().product();
    let std = match init {
        Init::Zeros => return vec![0.0; n],
        Init::Ones => return vec![1.0; n],
        Init::He(fan_in) => (2.0 / fan_in as f64).sqrt(),
        Init::Small => 0.02,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
}

/// Which component a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    ForegroundPredictor,
    Transformer,
    DensityEstimator,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        match name.split('.').next() {
            Some("backbone") => ParamGroup::Backbone,
            Some("fg") => ParamGroup::ForegroundPredictor,
            Some("transformer") => ParamGroup::Transformer,
            _ => ParamGroup::DensityEstimator,
        }
    }

    /// Everything downstream of the backbone.
    pub fn is_head(self) -> bool {
        self != ParamGroup::Backbone
    }
}

/// Per-cell outputs of one forward pass over a `grid = (rows, cols)` map.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub grid: (usize, usize),
    pub stride: usize,
    /// `N x c` backbone features, rows in row-major cell order.
    pub features: Tensor,
    /// `N` foreground probabilities.
    pub mask_prob: Tensor,
    /// Binarized `mask_prob` (a constant).
    pub mask: Vec<bool>,
    /// `N` non-negative densities.
    pub density: Tensor,
}

impl ForwardOutputs {
    pub fn num_cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn density_values(&self) -> Result<Vec<f64>> {
        Ok(self.density.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    pub fn mask_prob_values(&self) -> Result<Vec<f64>> {
        Ok(self.mask_prob.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    pub fn count(&self) -> Result<f64> {
        Ok(self.density_values()?.iter().sum())
    }
}

/// Foreground and background rows of a feature matrix. Selection indices are
/// constants, so no gradient reaches the mask while both halves stay
/// differentiable with respect to the features.
#[derive(Debug, Clone)]
pub struct SplitFeatures {
    pub foreground: Tensor,
    pub background: Tensor,
    pub foreground_cells: Vec<usize>,
    pub background_cells: Vec<usize>,
}

fn select_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    if rows.is_empty() {
        return Ok(Tensor::zeros((0, c), x.dtype(), x.device())?);
    }
    let ids: Vec<u32> = rows.iter().map(|r| *r as u32).collect();
    let ids = Tensor::from_vec(ids, rows.len(), x.device())?;
    Ok(x.index_select(&ids, 0)?)
}

pub fn split_features(features: &Tensor, mask: &[bool]) -> Result<SplitFeatures> {
    let (n, _) = features.dims2()?;
    if n != mask.len() {
        return Err(Error::Shape(format!("{n} feature rows with a {}-cell mask", mask.len())));
    }
    let foreground_cells: Vec<usize> = (0..n).filter(|i| mask[*i]).collect();
    let background_cells: Vec<usize> = (0..n).filter(|i| !mask[*i]).collect();
    Ok(SplitFeatures {
        foreground: select_rows(features, &foreground_cells)?,
        background: select_rows(features, &background_cells)?,
        foreground_cells,
        background_cells,
    })
}

/// Where a scene's split mask and reference densities come from.
#[derive(Debug, Clone, Copy)]
pub enum Supervision<'a> {
    Labeled { density: &'a CellGrid, mask: &'a CellGrid },
    Unlabeled,
}

/// A feature split with one reference density per foreground row.
#[derive(Debug, Clone)]
pub struct SourcedSplit {
    pub split: SplitFeatures,
    pub densities: Vec<f64>,
    pub source: DensitySource,
}

impl SourcedSplit {
    /// Detached `f64` copy for the agent update.
    pub fn region_features(&self) -> Result<RegionFeatures> {
        let fg = rows_f64(&self.split.foreground)?;
        let foreground = fg
            .into_iter()
            .zip(&self.densities)
            .map(|(feature, d)| ForegroundFeature { feature, density: *d, source: self.source })
            .collect();
        Ok(RegionFeatures { foreground, background: rows_f64(&self.split.background)? })
    }
}

fn rows_f64(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    if x.dims2()?.0 == 0 {
        return Ok(Vec::new());
    }
    Ok(x.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Labeled scenes split by the ground-truth mask with ground-truth densities;
/// unlabeled scenes split by the predicted mask with the detached predicted
/// densities. Densities are floored at [`DENSITY_FLOOR`].
pub fn attach_density_source(supervision: Supervision<'_>, outputs: &ForwardOutputs) -> Result<SourcedSplit> {
    let n = outputs.num_cells();
    let (mask, reference, source) = match supervision {
        Supervision::Labeled { density, mask } => {
            if density.num_cells() != n || mask.num_cells() != n {
                return Err(Error::Shape(format!(
                    "ground truth grids of {} and {} cells for {n} predicted cells",
                    density.num_cells(),
                    mask.num_cells()
                )));
            }
            (mask.values.iter().map(|v| *v > 0.5).collect::<Vec<_>>(), density.values.clone(), DensitySource::Gt)
        }
        Supervision::Unlabeled => (outputs.mask.clone(), outputs.density_values()?, DensitySource::Predicted),
    };
    let split = split_features(&outputs.features, &mask)?;
    let densities = split.foreground_cells.iter().map(|i| reference[*i].max(DENSITY_FLOOR)).collect();
    Ok(SourcedSplit { split, densities, source })
}

fn check_finite(x: &Tensor, layer: &str) -> Result<()> {
    if x.elem_count() == 0 {
        return Ok(());
    }
    let s = x.detach().abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("activations of `{layer}`")));
    }
    Ok(())
}

fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<ParamRecord>,
}

const MODEL_FORMAT: &str = "crowd-agency/model";
const MODEL_VERSION: u32 = 1;

/// The counting network and its trainable parameters.
#[derive(Debug, Clone)]
pub struct CountingModel {
    config: ModelConfig,
    params: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl CountingModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut params = Vec::new();
        for (name, shape, init) in param_layout(&config) {
            let data = init_values(&name, &shape, init, config.seed);
            params.push((name, Var::from_vec(data, shape, &device)?));
        }
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: Vec<(String, Var)>) -> Self {
        let index = params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        CountingModel { config, params, index }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn named_params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn param(&self, name: &str) -> Result<&Var> {
        self.index
            .get(name)
            .map(|i| &self.params[*i].1)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    fn t(&self, name: &str) -> Result<Tensor> {
        Ok(self.param(name)?.as_tensor().clone())
    }

    fn linear(&self, prefix: &str) -> Result<Linear> {
        Ok(Linear::new(self.t(&format!("{prefix}.weight"))?, Some(self.t(&format!("{prefix}.bias"))?)))
    }

    fn conv(&self, prefix: &str, padding: usize) -> Result<Conv2d> {
        let cfg = Conv2dConfig { padding, ..Default::default() };
        Ok(Conv2d::new(self.t(&format!("{prefix}.weight"))?, Some(self.t(&format!("{prefix}.bias"))?), cfg))
    }

    /// Zero every residual-branch output projection so the transformer
    /// becomes the identity on foreground tokens.
    pub fn zero_transformer_outputs(&self) -> Result<()> {
        for (name, var) in &self.params {
            let is_out = name.ends_with(".o.weight")
                || name.ends_with(".o.bias")
                || name.ends_with(".ffn.fc2.weight")
                || name.ends_with(".ffn.fc2.bias");
            if name.starts_with("transformer.") && is_out {
                var.set(&var.as_tensor().zeros_like()?)?;
            }
        }
        Ok(())
    }

    fn backbone(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = self.config.pooled_blocks();
        let mut x = x.clone();
        for k in 0..4 {
            x = self.conv(&format!("backbone.block{k}"), 1)?.forward(&x)?;
            // The last block stays linear so features are not rectified to zero.
            if k < 3 {
                x = x.relu()?;
            }
            if k < pooled {
                x = x.max_pool2d(2)?;
            }
        }
        Ok(x)
    }

    fn foreground_probability(&self, tokens: &Tensor) -> Result<Tensor> {
        let h = self.linear("fg.fc1")?.forward(tokens)?.relu()?;
        let logits = self.linear("fg.fc2")?.forward(&h)?;
        Ok(sigmoid(&logits)?.squeeze(1)?)
    }

    fn attention(&self, prefix: &str, q_in: &Tensor, kv_in: &Tensor) -> Result<Tensor> {
        let heads = self.config.attn_heads;
        let c = self.config.channels;
        let dh = c / heads;
        let (n, _) = q_in.dims2()?;
        let (m, _) = kv_in.dims2()?;
        let split = |x: Tensor, len: usize| -> Result<Tensor> {
            Ok(x.reshape((len, heads, dh))?.transpose(0, 1)?.contiguous()?)
        };
        let q = split(self.linear(&format!("{prefix}.q"))?.forward(q_in)?, n)?;
        let k = split(self.linear(&format!("{prefix}.k"))?.forward(kv_in)?, m)?;
        let v = split(self.linear(&format!("{prefix}.v"))?.forward(kv_in)?, m)?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(0, 1)?.contiguous()?.reshape((n, c))?;
        Ok(self.linear(&format!("{prefix}.o"))?.forward(&out)?)
    }

    fn feed_forward(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let h = layer_norm(x, &self.t(&format!("{prefix}.ffn.ln.gamma"))?, &self.t(&format!("{prefix}.ffn.ln.beta"))?)?;
        let h = self.linear(&format!("{prefix}.ffn.fc1"))?.forward(&h)?.relu()?;
        Ok((x + self.linear(&format!("{prefix}.ffn.fc2"))?.forward(&h)?)?)
    }

    /// Refine foreground tokens `e` (`n x c`) with self-attention and, when
    /// `b` is non-empty, cross-attention onto the background tokens.
    pub fn foreground_transformer(&self, e: &Tensor, b: &Tensor) -> Result<Tensor> {
        if e.dims2()?.0 == 0 {
            return Ok(e.clone());
        }
        let has_background = b.dims2()?.0 > 0;
        let mut x = e.clone();
        for l in 0..self.config.attn_layers {
            let p = format!("transformer.layer{l}.self");
            let h = layer_norm(&x, &self.t(&format!("{p}.ln_q.gamma"))?, &self.t(&format!("{p}.ln_q.beta"))?)?;
            x = (&x + self.attention(&p, &h, &h)?)?;
            x = self.feed_forward(&p, &x)?;
            if has_background {
                let p = format!("transformer.layer{l}.cross");
                let hq = layer_norm(&x, &self.t(&format!("{p}.ln_q.gamma"))?, &self.t(&format!("{p}.ln_q.beta"))?)?;
                let hkv = layer_norm(b, &self.t(&format!("{p}.ln_kv.gamma"))?, &self.t(&format!("{p}.ln_kv.beta"))?)?;
                x = (&x + self.attention(&p, &hq, &hkv)?)?;
                x = self.feed_forward(&p, &x)?;
            }
        }
        Ok(x)
    }

    fn image_tensor(&self, image: &Image) -> Result<Tensor> {
        if image.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "image has {} channels, model expects {}",
                image.channels(),
                self.config.in_channels
            )));
        }
        let padded = image.pad_to_multiple(self.config.stride);
        Ok(Tensor::from_slice(
            padded.data(),
            (1, padded.channels(), padded.height(), padded.width()),
            &Device::Cpu,
        )?)
    }

    /// Full forward pass. Images are zero-padded to a multiple of the stride.
    pub fn forward(&self, image: &Image) -> Result<ForwardOutputs> {
        let x = self.image_tensor(image)?;
        let fmap = self.backbone(&x)?;
        check_finite(&fmap, "backbone")?;
        let (_, c, h, w) = fmap.dims4()?;
        let n = h * w;
        let features = fmap.reshape((c, n))?.t()?.contiguous()?;

        let mask_prob = self.foreground_probability(&features)?;
        check_finite(&mask_prob, "foreground predictor")?;
        let mask: Vec<bool> =
            mask_prob.to_dtype(DType::F64)?.to_vec1::<f64>()?.iter().map(|p| *p >= MASK_THRESHOLD).collect();

        let split = split_features(&features, &mask)?;
        let refined = self.foreground_transformer(&split.foreground, &split.background)?;
        check_finite(&refined, "transformer")?;
        let combined = if split.foreground_cells.is_empty() {
            features.clone()
        } else if split.background_cells.is_empty() {
            refined
        } else {
            let mut inverse = vec![0u32; n];
            for (row, cell) in split.foreground_cells.iter().chain(&split.background_cells).enumerate() {
                inverse[*cell] = row as u32;
            }
            let stacked = Tensor::cat(&[&refined, &split.background], 0)?;
            stacked.index_select(&Tensor::from_vec(inverse, n, &Device::Cpu)?, 0)?
        };

        let map = combined.t()?.contiguous()?.reshape((1, c, h, w))?;
        let hidden = self.conv("density.conv1", 1)?.forward(&map)?.relu()?;
        let density = self.conv("density.conv2", 0)?.forward(&hidden)?.abs()?.reshape(n)?;
        check_finite(&density, "density estimator")?;

        Ok(ForwardOutputs { grid: (h, w), stride: self.config.stride, features, mask_prob, mask, density })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let params = self
            .params
            .iter()
            .map(|(name, var)| {
                Ok(ParamRecord {
                    name: name.clone(),
                    shape: var.dims().to_vec(),
                    data: var.as_tensor().flatten_all()?.to_vec1::<f32>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            params,
        };
        write_atomic(path, &serde_json::to_vec(&file)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        Self::from_records(file.config, file.params)
    }

    fn from_records(config: ModelConfig, records: Vec<ParamRecord>) -> Result<Self> {
        config.validate()?;
        let mut by_name: HashMap<String, ParamRecord> = records.into_iter().map(|r| (r.name.clone(), r)).collect();
        let mut params = Vec::new();
        for (name, shape, _) in param_layout(&config) {
            let rec = by_name.remove(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if rec.shape != shape || rec.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has shape {:?}, expected {shape:?}", rec.shape)));
            }
            params.push((name, Var::from_vec(rec.data, shape, &Device::Cpu)?));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self::assemble(config, params))
    }

    /// Deep copy with independent parameter storage.
    pub fn snapshot(&self) -> Result<Self> {
        let params = self
            .params
            .iter()
            .map(|(n, v)| Ok((n.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(self.config.clone(), params))
    }
}
