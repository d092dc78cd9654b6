//! Evaluation, parameter sweeps, training curves and the 2-D toy laboratory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agency::{agent_gradients, cosine, cosine_with_grad, AgentBank, DensitySource, ForegroundFeature};
use crate::agency::{IntervalPartition, RegionFeatures};
use crate::contrastive::{contrastive_loss_with_grads, MatchConfig, MatchDistribution};
use crate::datasets::{Dataset, SceneSample, Split};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::network::CountingModel;
use crate::trainer::{run_training, Checkpoint, EpochLog, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub id: String,
    pub gt_count: f64,
    pub pred_count: f64,
}

/// Counting metrics; `mse` is the root mean square error by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mae: f64,
    pub mse: f64,
    pub per_image: Vec<ImageEval>,
}

/// `(mean |e|, sqrt(mean e^2))` of count errors.
pub fn mae_mse(errors: &[f64]) -> (f64, f64) {
    if errors.is_empty() {
        return (0.0, 0.0);
    }
    let n = errors.len() as f64;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let mse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    (mae, mse)
}

impl EvalResult {
    pub fn from_counts(per_image: Vec<ImageEval>) -> Self {
        let errors: Vec<f64> = per_image.iter().map(|r| r.pred_count - r.gt_count).collect();
        let (mae, mse) = mae_mse(&errors);
        EvalResult { mae, mse, per_image }
    }
}

pub fn evaluate_samples(model: &CountingModel, samples: &[&SceneSample]) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let per_image = samples
        .iter()
        .map(|s| {
            Ok(ImageEval {
                id: s.id().to_string(),
                gt_count: s.count() as f64,
                pred_count: model.forward(s.image())?.count()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_counts(per_image))
}

/// Load a checkpoint directory and evaluate one split of `dataset`.
pub fn evaluate(checkpoint_dir: &Path, dataset: &Dataset, split: Split) -> Result<EvalResult> {
    let ckpt = Checkpoint::load(checkpoint_dir)?;
    evaluate_samples(&ckpt.model, &dataset.split(split))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Beta,
    LambdaC,
    Tau,
    LambdaM,
    LambdaU,
    Distribution,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "beta" => SweepParam::Beta,
            "lambda_c" => SweepParam::LambdaC,
            "tau" => SweepParam::Tau,
            "lambda_m" => SweepParam::LambdaM,
            "lambda_u" => SweepParam::LambdaU,
            "distribution" => SweepParam::Distribution,
            other => return Err(Error::Config(format!("unknown sweep parameter `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Real(f64),
    Distribution(MatchDistribution),
}

impl std::fmt::Display for SweepValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepValue::Real(v) => write!(f, "{v}"),
            SweepValue::Distribution(MatchDistribution::Laplace) => f.write_str("laplace"),
            SweepValue::Distribution(MatchDistribution::Normal) => f.write_str("normal"),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Beta => "beta",
            SweepParam::LambdaC => "lambda_c",
            SweepParam::Tau => "tau",
            SweepParam::LambdaM => "lambda_m",
            SweepParam::LambdaU => "lambda_u",
            SweepParam::Distribution => "distribution",
        }
    }

    /// Header label of the results table.
    pub fn symbol(self) -> &'static str {
        match self {
            SweepParam::Beta => "β",
            SweepParam::LambdaC => "λ_c",
            SweepParam::Tau => "τ",
            SweepParam::LambdaM => "λ_m",
            SweepParam::LambdaU => "λ_u",
            SweepParam::Distribution => "distribution",
        }
    }

    pub fn preset(self) -> Vec<SweepValue> {
        let reals = |v: &[f64]| v.iter().map(|x| SweepValue::Real(*x)).collect();
        match self {
            SweepParam::Beta => reals(&[0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0]),
            SweepParam::LambdaC => reals(&[0.0, 0.001, 0.01, 0.05, 0.1, 0.5, 1.0]),
            SweepParam::Tau => reals(&[0.01, 0.05, 0.07, 0.1, 0.2, 0.5, 1.0]),
            SweepParam::LambdaM => reals(&[0.01, 0.05, 0.1, 0.5, 1.0]),
            SweepParam::LambdaU => reals(&[0.0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0]),
            SweepParam::Distribution => vec![
                SweepValue::Distribution(MatchDistribution::Laplace),
                SweepValue::Distribution(MatchDistribution::Normal),
            ],
        }
    }

    pub fn parse_value(self, s: &str) -> Result<SweepValue> {
        match self {
            SweepParam::Distribution => Ok(SweepValue::Distribution(s.parse()?)),
            _ => s
                .parse::<f64>()
                .map(SweepValue::Real)
                .map_err(|_| Error::Config(format!("`{s}` is not a number for {}", self.name()))),
        }
    }

    /// Set the parameter on `cfg`; `cfg` is left unchanged when the result is invalid.
    pub fn apply(self, cfg: &mut RunConfig, value: SweepValue) -> Result<()> {
        let mut next = cfg.clone();
        match (self, value) {
            (SweepParam::Beta, SweepValue::Real(v)) => next.loss.beta = v,
            (SweepParam::LambdaC, SweepValue::Real(v)) => next.loss.lambda_c = v,
            (SweepParam::Tau, SweepValue::Real(v)) => next.contrastive.tau = v,
            (SweepParam::LambdaM, SweepValue::Real(v)) => next.loss.lambda_m = v,
            (SweepParam::LambdaU, SweepValue::Real(v)) => next.loss.lambda_u = v,
            (SweepParam::Distribution, SweepValue::Distribution(d)) => next.contrastive.distribution = d,
            (p, v) => return Err(Error::Config(format!("value {v} does not fit sweep parameter {}", p.name()))),
        }
        next.validate()?;
        *cfg = next;
        Ok(())
    }
}

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub param: String,
    pub value: String,
    pub seed: u64,
    pub mae: Option<f64>,
    pub mse: Option<f64>,
    pub wall_time: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub param: SweepParam,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    /// Parameter row, MAE row and MSE row.
    pub fn to_markdown(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "failed".into());
        let mut s = String::new();
        let _ = write!(s, "| {} |", self.param.symbol());
        for c in &self.cells {
            let _ = write!(s, " {} |", c.value);
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.cells.len()));
        s.push_str("\n| MAE |");
        for c in &self.cells {
            let _ = write!(s, " {} |", fmt(c.mae));
        }
        s.push_str("\n| MSE |");
        for c in &self.cells {
            let _ = write!(s, " {} |", fmt(c.mse));
        }
        s.push('\n');
        s
    }
}

fn cell_dir(out: &Path, param: SweepParam, value: SweepValue) -> PathBuf {
    out.join(format!("{}={value}", param.name()))
}

/// Train and evaluate one sweep cell.
pub fn run_sweep_cell(
    param: SweepParam,
    value: SweepValue,
    base: &RunConfig,
    dataset: &Dataset,
    out: Option<&Path>,
) -> Result<EvalResult> {
    let mut cfg = base.clone();
    param.apply(&mut cfg, value)?;
    cfg.train.eval_test = false;
    cfg.train.eval_train = false;
    let run = run_training(dataset, &cfg, out)?;
    evaluate_samples(&run.checkpoint.model, &dataset.split(Split::Test))
}

/// One train-and-evaluate per value with the base seed. A failing cell is
/// recorded and the sweep continues. Writes `results.csv` and `table.md`.
pub fn sweep(
    param: SweepParam,
    values: &[SweepValue],
    base: &RunConfig,
    dataset: &Dataset,
    out: &Path,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut cells = Vec::with_capacity(values.len());
    for value in values {
        let started = Instant::now();
        let dir = cell_dir(out, param, *value);
        let result = run_sweep_cell(param, *value, base, dataset, Some(&dir));
        let (mae, mse, error) = match result {
            Ok(r) => (Some(r.mae), Some(r.mse), None),
            Err(e) => {
                log::error!("sweep cell {}={value} failed: {e}", param.name());
                (None, None, Some(e.to_string()))
            }
        };
        cells.push(SweepCell {
            param: param.name().into(),
            value: value.to_string(),
            seed: base.train.seed,
            mae,
            mse,
            wall_time: started.elapsed().as_secs_f64(),
            error,
        });
        let table = SweepTable { param, cells: cells.clone() };
        write_sweep_outputs(&table, out)?;
    }
    Ok(SweepTable { param, cells })
}

fn write_sweep_outputs(table: &SweepTable, out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &table.cells {
        w.serialize(c)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&out.join("results.csv"), &bytes)?;
    write_atomic(&out.join("table.md"), table.to_markdown().as_bytes())
}

pub fn read_sweep_results(path: &Path) -> Result<Vec<SweepCell>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// One point of `curves.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub run: String,
    pub epoch: usize,
    pub train_mae: Option<f64>,
    pub train_mse: Option<f64>,
    pub test_mae: Option<f64>,
    pub test_mse: Option<f64>,
}

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189], [255, 127, 14], [23, 190, 207]];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Two panels (MAE left, MSE right) with one colored line per run. Solid
/// lines are training metrics, the lighter lines test metrics.
fn plot_curves(points: &[CurvePoint], runs: &[String]) -> RgbImage {
    const W: u32 = 480;
    const H: u32 = 320;
    const M: i64 = 30;
    let mut img = RgbImage::from_pixel(2 * W, H, Rgb([255, 255, 255]));
    let max_epoch = points.iter().map(|p| p.epoch).max().unwrap_or(1).max(2);
    for panel in 0..2u32 {
        let pick = |p: &CurvePoint| -> [Option<f64>; 2] {
            if panel == 0 {
                [p.train_mae, p.test_mae]
            } else {
                [p.train_mse, p.test_mse]
            }
        };
        let ymax = points.iter().flat_map(&pick).flatten().fold(0.0f64, f64::max).max(1e-9);
        let x0 = (panel * W) as i64;
        let to_px = |epoch: usize, v: f64| -> (i64, i64) {
            let fx = (epoch - 1) as f64 / (max_epoch - 1) as f64;
            let fy = v / ymax;
            (x0 + M + (fx * (W as i64 - 2 * M) as f64) as i64, H as i64 - M - (fy * (H as i64 - 2 * M) as f64) as i64)
        };
        let axis = Rgb([0, 0, 0]);
        draw_line(&mut img, (x0 + M, M), (x0 + M, H as i64 - M), axis);
        draw_line(&mut img, (x0 + M, H as i64 - M), (x0 + W as i64 - M, H as i64 - M), axis);
        for (r, run) in runs.iter().enumerate() {
            let c = PALETTE[r % PALETTE.len()];
            let colors = [Rgb(c), Rgb([c[0] / 2 + 127, c[1] / 2 + 127, c[2] / 2 + 127])];
            let series: Vec<&CurvePoint> = points.iter().filter(|p| &p.run == run).collect();
            for (k, color) in colors.iter().enumerate() {
                let pts: Vec<(i64, i64)> =
                    series.iter().filter_map(|p| pick(p)[k].map(|v| to_px(p.epoch, v))).collect();
                for w in pts.windows(2) {
                    draw_line(&mut img, w[0], w[1], *color);
                }
                for p in &pts {
                    draw_line(&mut img, (p.0 - 1, p.1), (p.0 + 1, p.1), *color);
                }
            }
            // Legend swatch.
            for dy in 0..6 {
                draw_line(&mut img, (x0 + M + 10 + 20 * r as i64, 8 + dy), (x0 + M + 24 + 20 * r as i64, 8 + dy), colors[0]);
            }
        }
    }
    img
}

/// Write `curves.csv` (the source of truth) and the derived `curves.png`.
pub fn emit_curves(runs: &[(String, Vec<EpochLog>)], out: &Path) -> Result<Vec<CurvePoint>> {
    if runs.is_empty() {
        return Err(Error::Config("no runs to plot".into()));
    }
    let points: Vec<CurvePoint> = runs
        .iter()
        .flat_map(|(name, logs)| {
            logs.iter().map(move |l| CurvePoint {
                run: name.clone(),
                epoch: l.epoch,
                train_mae: l.train_mae,
                train_mse: l.train_mse,
                test_mae: l.test_mae,
                test_mse: l.test_mse,
            })
        })
        .collect();
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &points {
        w.serialize(p)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&out.join("curves.csv"), &bytes)?;
    let names: Vec<String> = runs.iter().map(|(n, _)| n.clone()).collect();
    plot_curves(&points, &names).save(out.join("curves.png"))?;
    Ok(points)
}

pub fn read_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyScheme {
    /// No optimization.
    AInit,
    /// Foreground features pulled by `L_E`; agents by `L_E + L_B`.
    BPullOnly,
    /// Foreground features by `L_c`; agents by `L_c + L_B`.
    CContrastiveAgents,
    /// Foreground features by `L_c`; agents by `L_E + L_B`.
    DFull,
}

impl std::str::FromStr for ToyScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "a" | "a_init" => ToyScheme::AInit,
            "b" | "b_pull_only" => ToyScheme::BPullOnly,
            "c" | "c_contrastive_agents" => ToyScheme::CContrastiveAgents,
            "d" | "d_full" => ToyScheme::DFull,
            other => return Err(Error::Config(format!("unknown toy scheme `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub num_classes: usize,
    pub pts_per_class: usize,
    pub num_background: usize,
    pub dims: usize,
    pub steps: usize,
    pub scheme: ToyScheme,
    pub seed: u64,
    pub lr: f64,
    pub tau: f64,
    pub distribution: MatchDistribution,
    /// Keep a snapshot every this many steps (0 keeps only the endpoints).
    pub snapshot_every: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            num_classes: 4,
            pts_per_class: 16,
            num_background: 24,
            dims: 2,
            steps: 400,
            scheme: ToyScheme::DFull,
            seed: 0,
            lr: 0.02,
            tau: 0.5,
            distribution: MatchDistribution::Laplace,
            snapshot_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyMetrics {
    /// Mean within-class pairwise cosine distance.
    pub intra_spread: f64,
    /// Smallest cosine distance between class centroids.
    pub inter_margin: f64,
    /// Smallest `1 - s` over foreground/background pairs.
    pub fg_bg_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyFrame {
    pub step: usize,
    pub foreground: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub background: Vec<Vec<f64>>,
    pub agents: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyResult {
    pub config: ToyConfig,
    pub initial: ToyMetrics,
    pub metrics: ToyMetrics,
    pub frames: Vec<ToyFrame>,
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine(a, b).unwrap_or(0.0)
}

pub fn toy_metrics(foreground: &[Vec<f64>], labels: &[usize], background: &[Vec<f64>], num_classes: usize) -> ToyMetrics {
    let dim = foreground.first().or(background.first()).map(|v| v.len()).unwrap_or(2);
    let mut spread = 0.0;
    let mut pairs = 0usize;
    let mut centroids = vec![vec![0.0; dim]; num_classes];
    for (i, a) in foreground.iter().enumerate() {
        let n = crate::agency::norm(a).max(1e-12);
        for (c, x) in centroids[labels[i]].iter_mut().zip(a) {
            *c += x / n;
        }
        for (j, b) in foreground.iter().enumerate().skip(i + 1) {
            if labels[i] == labels[j] {
                spread += cosine_distance(a, b);
                pairs += 1;
            }
        }
    }
    let mut inter = f64::INFINITY;
    for i in 0..num_classes {
        for j in i + 1..num_classes {
            inter = inter.min(cosine_distance(&centroids[i], &centroids[j]));
        }
    }
    let mut fg_bg = f64::INFINITY;
    for e in foreground {
        for b in background {
            fg_bg = fg_bg.min(cosine_distance(e, b));
        }
    }
    ToyMetrics {
        intra_spread: if pairs > 0 { spread / pairs as f64 } else { 0.0 },
        inter_margin: if inter.is_finite() { inter } else { 0.0 },
        fg_bg_margin: if fg_bg.is_finite() { fg_bg } else { 0.0 },
    }
}

fn unit_at(angle: f64, radius: f64, dims: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = vec![0.0; dims];
    v[0] = radius * angle.cos();
    v[1] = radius * angle.sin();
    for x in v.iter_mut().skip(2) {
        *x = rng.random_range(-0.05..0.05);
    }
    v
}

/// Seeded initial layout: classes at evenly spaced angles over the upper
/// half-plane, background clustered around the downward direction, agents at
/// uniformly random angles. Class `k` has densities inside `[k, k+1)`.
fn toy_init(cfg: &ToyConfig) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    use std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Normal::new(0.0, 0.15).expect("valid");
    let k = cfg.num_classes;
    let mut fg = Vec::new();
    let mut labels = Vec::new();
    let mut dens = Vec::new();
    for class in 0..k {
        let center = if k == 1 { PI / 2.0 } else { PI / 6.0 + class as f64 * (2.0 * PI / 3.0) / (k - 1) as f64 };
        for _ in 0..cfg.pts_per_class {
            let a = center + jitter.sample(&mut rng);
            let r = rng.random_range(0.5..1.5);
            fg.push(unit_at(a, r, cfg.dims, &mut rng));
            labels.push(class);
            dens.push(class as f64 + rng.random_range(0.05..0.95));
        }
    }
    let bg = (0..cfg.num_background)
        .map(|_| {
            let a = -PI / 2.0 + 2.0 * jitter.sample(&mut rng);
            let r = rng.random_range(0.5..1.5);
            unit_at(a, r, cfg.dims, &mut rng)
        })
        .collect();
    let agents = (0..k).map(|_| unit_at(rng.random_range(-PI..PI), 1.0, cfg.dims, &mut rng)).collect();
    (fg, labels, dens, bg, agents)
}

fn toy_frame(step: usize, fg: &AgentBank, labels: &[usize], bg: &AgentBank, agents: &AgentBank) -> ToyFrame {
    ToyFrame {
        step,
        foreground: fg.agents().to_vec(),
        labels: labels.to_vec(),
        background: bg.agents().to_vec(),
        agents: agents.agents().to_vec(),
    }
}

/// Optimize free feature points and agents under the losses chosen by the scheme.
pub fn run_toy(cfg: &ToyConfig) -> Result<ToyResult> {
    if cfg.dims < 2 || cfg.num_classes == 0 || cfg.pts_per_class == 0 {
        return Err(Error::Config("toy needs dims >= 2 and at least one class with points".into()));
    }
    let (fg0, labels, dens, bg0, agents0) = toy_init(cfg);
    let borders: Vec<f64> = (1..cfg.num_classes).map(|b| b as f64).collect();
    let partition = IntervalPartition::from_borders(borders)?;
    let mc = MatchConfig { tau: cfg.tau, distribution: cfg.distribution, ..MatchConfig::default() };
    let mut fg = AgentBank::from_agents(fg0, cfg.lr)?;
    let mut bg = AgentBank::from_agents(bg0, cfg.lr)?;
    let mut agents = AgentBank::from_agents(agents0, cfg.lr)?;
    let initial = toy_metrics(fg.agents(), &labels, bg.agents(), cfg.num_classes);
    let mut frames = vec![toy_frame(0, &fg, &labels, &bg, &agents)];
    let steps = if cfg.scheme == ToyScheme::AInit { 0 } else { cfg.steps };
    let n_a = cfg.num_classes as f64;

    for step in 1..=steps {
        let region = RegionFeatures {
            foreground: fg
                .agents()
                .iter()
                .zip(&dens)
                .map(|(e, d)| ForegroundFeature { feature: e.clone(), density: *d, source: DensitySource::Gt })
                .collect(),
            background: bg.agents().to_vec(),
        };

        // Background points are pushed off every agent by L_B in all schemes.
        let bg_grads = bg
            .agents()
            .iter()
            .map(|b| {
                let mut g = vec![0.0; cfg.dims];
                for f in agents.agents() {
                    let (_, ds) = cosine_with_grad(b, f)?;
                    for (x, y) in g.iter_mut().zip(ds) {
                        *x += y / n_a;
                    }
                }
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut fg_grads = Vec::with_capacity(region.foreground.len());
        let mut agent_grads = vec![vec![0.0; cfg.dims]; cfg.num_classes];
        for e in &region.foreground {
            match cfg.scheme {
                ToyScheme::BPullOnly => {
                    let i = partition.allocate(e.density)?;
                    let (_, ds) = cosine_with_grad(&e.feature, agents.agent(i))?;
                    fg_grads.push(ds.iter().map(|x| -x).collect());
                }
                _ => {
                    let g = contrastive_loss_with_grads(&e.feature, e.density, &agents, &partition, &mc)?;
                    if cfg.scheme == ToyScheme::CContrastiveAgents {
                        for (a, d) in agent_grads.iter_mut().zip(&g.d_agents) {
                            for (x, y) in a.iter_mut().zip(d) {
                                *x += y;
                            }
                        }
                    }
                    fg_grads.push(g.d_feature);
                }
            }
        }
        let agent_update = match cfg.scheme {
            ToyScheme::CContrastiveAgents => {
                let background_only = RegionFeatures { foreground: Vec::new(), background: region.background.clone() };
                let lb = agent_gradients(&background_only, &partition, &agents)?;
                for (a, d) in agent_grads.iter_mut().zip(&lb) {
                    for (x, y) in a.iter_mut().zip(d) {
                        *x += y;
                    }
                }
                agent_grads
            }
            _ => agent_gradients(&region, &partition, &agents)?,
        };
        fg.step(&fg_grads)?;
        bg.step(&bg_grads)?;
        agents.step(&agent_update)?;
        if step == steps || (cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0) {
            frames.push(toy_frame(step, &fg, &labels, &bg, &agents));
        }
    }
    let metrics = toy_metrics(fg.agents(), &labels, bg.agents(), cfg.num_classes);
    Ok(ToyResult { config: cfg.clone(), initial, metrics, frames })
}

/// `toy_metrics.json` plus one JSON point snapshot per frame in `toy_frames/`.
pub fn write_toy_outputs(result: &ToyResult, out: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a ToyConfig,
        initial: ToyMetrics,
        metrics: ToyMetrics,
    }
    let summary = Summary { config: &result.config, initial: result.initial, metrics: result.metrics };
    write_atomic(&out.join("toy_metrics.json"), &serde_json::to_vec_pretty(&summary)?)?;
    for f in &result.frames {
        write_atomic(&out.join("toy_frames").join(format!("step-{:05}.json", f.step)), &serde_json::to_vec(f)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(mae_mse(&[0.0, 0.0]), (0.0, 0.0));
        assert_eq!(mae_mse(&[1.0, -1.0]), (1.0, 1.0));
        let (mae, mse) = mae_mse(&[0.0, 3.0]);
        assert_eq!(mae, 1.5);
        assert!((mse - 4.5f64.sqrt()).abs() < 1e-15);
        assert!((mse - 2.1213).abs() < 1e-4);
    }

    #[test]
    fn sweep_presets_and_parsing() {
        assert_eq!(SweepParam::Beta.preset().len(), 7);
        assert_eq!(SweepParam::LambdaU.preset().len(), 8);
        assert_eq!(SweepParam::LambdaM.preset().len(), 5);
        assert_eq!("tau".parse::<SweepParam>().unwrap(), SweepParam::Tau);
        assert_eq!(SweepParam::Distribution.parse_value("normal").unwrap().to_string(), "normal");
        assert!(SweepParam::Beta.parse_value("x").is_err());
        let mut cfg = RunConfig::default();
        assert!(SweepParam::Tau.apply(&mut cfg, SweepValue::Real(0.0)).is_err());
        SweepParam::LambdaU.apply(&mut cfg, SweepValue::Real(0.5)).unwrap();
        assert_eq!(cfg.loss.lambda_u, 0.5);
    }

    #[test]
    fn markdown_layout() {
        let cell = |v: &str, m: Option<f64>| SweepCell {
            param: "beta".into(),
            value: v.into(),
            seed: 0,
            mae: m,
            mse: m.map(|x| x + 1.0),
            wall_time: 0.0,
            error: None,
        };
        let t = SweepTable { param: SweepParam::Beta, cells: vec![cell("0", Some(1.0)), cell("0.1", None)] };
        let md = t.to_markdown();
        let rows: Vec<&str> = md.lines().collect();
        assert_eq!(rows[0], "| β | 0 | 0.1 |");
        assert_eq!(rows[1], "|---|---|---|");
        assert_eq!(rows[2], "| MAE | 1.00 | failed |");
        assert_eq!(rows[3], "| MSE | 2.00 | failed |");
    }

    #[test]
    fn toy_zero_steps_reproduces_initial_metrics() {
        let cfg = ToyConfig { steps: 0, ..ToyConfig::default() };
        let r = run_toy(&cfg).unwrap();
        assert_eq!(r.initial, r.metrics);
        let a = run_toy(&ToyConfig { scheme: ToyScheme::AInit, ..ToyConfig::default() }).unwrap();
        assert_eq!(a.initial, a.metrics);
        assert_eq!(a.frames.len(), 1);
    }

    #[test]
    fn toy_metrics_by_hand() {
        let fg = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0]];
        let m = toy_metrics(&fg, &[0, 0, 1, 1], &[vec![-1.0, 0.0]], 2);
        assert_eq!(m.intra_spread, 0.0);
        assert!((m.inter_margin - 1.0).abs() < 1e-12);
        assert!((m.fg_bg_margin - 1.0).abs() < 1e-12);
    }
}
