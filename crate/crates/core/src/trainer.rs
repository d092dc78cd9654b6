//! Semi-supervised training loop: mixed labeled/unlabeled batches, one model
//! optimizer step on the summed loss and one agent step on the agent loss per
//! batch.

use std::path::Path;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agency::{agent_background_loss, agent_foreground_loss, agent_gradients, build_partition};
use crate::agency::{AgentBank, IntervalPartition, PartitionStrategy};
use crate::contrastive::{background_loss_tensor, contrastive_loss_tensor, MatchConfig};
use crate::datasets::{augment, derive_seed, rasterize_density, rasterize_mask};
use crate::datasets::{AugmentationConfig, Dataset, DatasetSpec, SceneSample, Split};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_samples, EvalResult};
use crate::fsutil::write_atomic;
use crate::network::{attach_density_source, CountingModel, ModelConfig, ParamGroup, Supervision};
use crate::regression_losses::{
    compose_losses, mask_loss_tensor, nd_bayes_loss_tensor, posterior_matrix, scalar, LossReport, LossWeights,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub model_lr: f64,
    pub agent_lr: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables periodic saves).
    pub checkpoint_every: usize,
    pub num_agents: usize,
    pub partition: PartitionStrategy,
    /// Chebyshev dilation of the ground-truth foreground mask, in cells.
    pub mask_dilation: usize,
    pub augmentation: AugmentationConfig,
    /// Evaluate on the test split at the end of every epoch.
    pub eval_test: bool,
    /// Evaluate on all training scenes at the end of every epoch.
    pub eval_train: bool,
    pub lr_schedule: LrSchedule,
}

/// Model learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `model_lr` down to 0 at the last batch.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if total <= 1 => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / (total - 1) as f64).cos()),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_labeled: 1,
            batch_unlabeled: 4,
            model_lr: 1e-4,
            agent_lr: 1e-3,
            seed: 0,
            checkpoint_every: 0,
            num_agents: 24,
            partition: PartitionStrategy::Quantile,
            mask_dilation: 1,
            augmentation: AugmentationConfig::default(),
            eval_test: true,
            eval_train: true,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

/// Everything needed to generate data and train one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub contrastive: MatchConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.contrastive.validate()?;
        let t = &self.train;
        if t.batch_labeled == 0 && t.batch_unlabeled == 0 {
            return Err(Error::Config("train.batch_labeled and train.batch_unlabeled are both 0".into()));
        }
        if !(t.model_lr >= 0.0 && t.agent_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if t.num_agents == 0 {
            return Err(Error::Config("train.num_agents must be at least 1".into()));
        }
        if self.data.stride_hint != self.model.stride {
            return Err(Error::Config(format!(
                "data.stride_hint ({}) differs from model.stride ({})",
                self.data.stride_hint, self.model.stride
            )));
        }
        t.augmentation.validate(self.model.stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunTag {
    Semi,
    LabeledOnly,
}

impl RunTag {
    pub fn as_str(self) -> &'static str {
        match self {
            RunTag::Semi => "semi",
            RunTag::LabeledOnly => "labeled_only",
        }
    }
}

/// One row of `epochs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub run: String,
    pub epoch: usize,
    pub train_mae: Option<f64>,
    pub train_mse: Option<f64>,
    pub test_mae: Option<f64>,
    pub test_mse: Option<f64>,
    pub loss_total: f64,
    pub loss_label: f64,
    pub loss_unlabel: f64,
    pub loss_nd: f64,
    pub loss_mask: f64,
    pub loss_agency_labeled: f64,
    pub loss_agency_unlabeled: f64,
    pub loss_agents: f64,
    pub batches: usize,
    pub wall_time: f64,
}

pub fn write_epoch_logs(logs: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for log in logs {
        w.serialize(log)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn read_epoch_logs(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Per-batch result of [`Trainer::train_step`].
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub report: LossReport,
    /// `L_E + L_B` summed over labeled scenes plus `lambda_u` times the unlabeled sum.
    pub agent_loss: f64,
    /// Gradient L2 norm per model parameter; 0 where no gradient reached it.
    pub grad_norms: Vec<(String, f64)>,
}

impl StepOutcome {
    pub fn max_norm(&self, pred: impl Fn(ParamGroup) -> bool) -> f64 {
        self.grad_norms
            .iter()
            .filter(|(n, _)| pred(ParamGroup::of(n)))
            .map(|(_, g)| *g)
            .fold(0.0, f64::max)
    }
}

/// Model, agents and partition of one run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CountingModel,
    pub bank: AgentBank,
    pub partition: IntervalPartition,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.save(&dir.join("model.json"))?;
        self.bank.save(&dir.join("agents.json"))?;
        write_atomic(&dir.join("partition.json"), &serde_json::to_vec_pretty(&self.partition)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model_path = dir.join("model.json");
        if !model_path.exists() {
            return Err(Error::Checkpoint(format!("no model.json in {}", dir.display())));
        }
        let partition: IntervalPartition = serde_json::from_slice(&std::fs::read(dir.join("partition.json"))?)?;
        let fell_back = partition.fell_back();
        let mut partition = IntervalPartition::from_borders(partition.borders().to_vec())?;
        partition.fell_back = fell_back;
        Ok(Checkpoint {
            model: CountingModel::load(&model_path)?,
            bank: AgentBank::load(&dir.join("agents.json"))?,
            partition,
        })
    }
}

/// Outcome of a full training run.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub tag: RunTag,
    pub checkpoint: Checkpoint,
    pub logs: Vec<EpochLog>,
    pub steps: usize,
    pub labeled_seen: usize,
    pub unlabeled_seen: usize,
}

/// Training state: model, agents, frozen partition and the model optimizer.
pub struct Trainer {
    pub model: CountingModel,
    pub bank: AgentBank,
    pub partition: IntervalPartition,
    cfg: RunConfig,
    opt: AdamW,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer").field("partition", &self.partition).finish_non_exhaustive()
    }
}

fn check_term(value: f64, term: &str, id: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{term} of `{id}`")))
    }
}

fn grad_norm(grads: &GradStore, var: &candle_core::Var) -> Result<f64> {
    match grads.get(var.as_tensor()) {
        Some(g) => Ok(scalar(&g.sqr()?.sum_all()?)?.sqrt()),
        None => Ok(0.0),
    }
}

fn add_scaled(acc: &mut [Vec<f64>], grads: &[Vec<f64>], k: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.iter_mut().zip(g) {
            *x += k * y;
        }
    }
}

/// Positive ground-truth cell densities of the labeled scenes.
pub fn labeled_cell_densities(dataset: &Dataset, stride: usize) -> Vec<f64> {
    dataset
        .split(Split::Labeled)
        .iter()
        .flat_map(|s| rasterize_density(s.points(), stride, s.size()).values)
        .filter(|d| *d > 0.0)
        .collect()
}

impl Trainer {
    /// Fresh model and agents; the partition is built once from the labeled
    /// ground truth and stays frozen.
    pub fn new(cfg: &RunConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let t = &cfg.train;
        let model = CountingModel::new(ModelConfig { seed: derive_seed(t.seed, &format!("model-{}", cfg.model.seed)), ..cfg.model.clone() })?;
        let densities = labeled_cell_densities(dataset, cfg.model.stride);
        let partition = build_partition(&densities, t.num_agents, t.partition)?;
        let bank = AgentBank::spherical(t.num_agents, cfg.model.channels, t.agent_lr, derive_seed(t.seed, "agents"))?;
        Self::from_parts(cfg, model, bank, partition)
    }

    pub fn from_parts(
        cfg: &RunConfig,
        model: CountingModel,
        bank: AgentBank,
        partition: IntervalPartition,
    ) -> Result<Self> {
        let opt = AdamW::new(
            model.vars(),
            ParamsAdamW { lr: cfg.train.model_lr, weight_decay: 0.0, ..Default::default() },
        )?;
        Ok(Trainer { model, bank, partition, cfg: cfg.clone(), opt })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint { model: self.model.snapshot()?, bank: self.bank.clone(), partition: self.partition.clone() })
    }

    /// One optimization step on a batch of already-augmented scenes.
    pub fn train_step(&mut self, labeled: &[SceneSample], unlabeled: &[SceneSample]) -> Result<StepOutcome> {
        let w = self.cfg.loss;
        let mc = self.cfg.contrastive;
        let stride = self.cfg.model.stride;
        let mut model_terms: Vec<Tensor> = Vec::new();
        let mut agent_grads = vec![vec![0.0; self.bank.dim()]; self.bank.num_agents()];
        let mut agent_loss = 0.0;
        let (mut nd_sum, mut mask_sum, mut lc_lab, mut lc_unlab) = (0.0, 0.0, 0.0, 0.0);

        for s in labeled {
            let out = self.model.forward(s.image())?;
            let size = (out.grid.0 * stride, out.grid.1 * stride);
            let gt = rasterize_density(s.points(), stride, size);
            let gt_mask = rasterize_mask(s.points(), stride, size, self.cfg.train.mask_dilation);
            let posterior = posterior_matrix(s.points(), &gt, w.sigma)?;
            let nd = nd_bayes_loss_tensor(&out.density, &posterior, w.beta)?;
            let mask = mask_loss_tensor(&out.mask_prob, &gt_mask.values)?;
            let sourced = attach_density_source(Supervision::Labeled { density: &gt, mask: &gt_mask }, &out)?;
            let lc = (contrastive_loss_tensor(&sourced.split.foreground, &sourced.densities, &self.bank, &self.partition, &mc)?
                + (background_loss_tensor(&sourced.split.background, &self.bank)? * mc.lambda_b)?)?;
            nd_sum += check_term(scalar(&nd)?, "noise-depression loss", s.id())?;
            mask_sum += check_term(scalar(&mask)?, "mask loss", s.id())?;
            lc_lab += check_term(scalar(&lc)?, "agency loss", s.id())?;
            model_terms.push(((nd + (mask * w.lambda_m)?)? + (lc * w.lambda_c)?)?);

            let feats = sourced.region_features()?;
            agent_loss += agent_foreground_loss(&feats, &self.partition, &self.bank)?
                + agent_background_loss(&feats, &self.bank)?;
            add_scaled(&mut agent_grads, &agent_gradients(&feats, &self.partition, &self.bank)?, 1.0);
        }

        for s in unlabeled {
            let out = self.model.forward(s.image())?;
            let sourced = attach_density_source(Supervision::Unlabeled, &out)?;
            let lc = (contrastive_loss_tensor(&sourced.split.foreground, &sourced.densities, &self.bank, &self.partition, &mc)?
                + (background_loss_tensor(&sourced.split.background, &self.bank)? * mc.lambda_b)?)?;
            lc_unlab += check_term(scalar(&lc)?, "agency loss", s.id())?;
            model_terms.push((lc * (w.lambda_u * w.lambda_c))?);

            let feats = sourced.region_features()?;
            agent_loss += w.lambda_u
                * (agent_foreground_loss(&feats, &self.partition, &self.bank)?
                    + agent_background_loss(&feats, &self.bank)?);
            add_scaled(&mut agent_grads, &agent_gradients(&feats, &self.partition, &self.bank)?, w.lambda_u);
        }

        let report = compose_losses(nd_sum, mask_sum, lc_lab, lc_unlab, &w);
        if !report.total.is_finite() {
            return Err(Error::NonFinite("total loss".into()));
        }
        let mut grad_norms = Vec::with_capacity(self.model.named_params().len());
        if let Some(first) = model_terms.first() {
            let mut loss = first.clone();
            for t in &model_terms[1..] {
                loss = (loss + t)?;
            }
            let grads = loss.backward()?;
            for (name, var) in self.model.named_params() {
                grad_norms.push((name.clone(), grad_norm(&grads, var)?));
            }
            if cfg!(debug_assertions) && labeled.is_empty() {
                let leak = grad_norms.iter().find(|(n, g)| ParamGroup::of(n).is_head() && *g != 0.0);
                debug_assert!(leak.is_none(), "unlabeled loss reached the regression head: {leak:?}");
            }
            self.opt.step(&grads)?;
        }
        self.bank.step(&agent_grads)?;
        Ok(StepOutcome { report, agent_loss, grad_norms })
    }
}

fn batch_indices(order: &[usize], batch: usize, size: usize) -> Vec<usize> {
    if order.is_empty() {
        return Vec::new();
    }
    (0..size).map(|k| order[(batch * size + k) % order.len()]).collect()
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

#[derive(Debug, Default)]
struct LossTotals {
    total: f64,
    label: f64,
    unlabel: f64,
    nd: f64,
    mask: f64,
    agency_labeled: f64,
    agency_unlabeled: f64,
    agents: f64,
}

impl LossTotals {
    fn add(&mut self, o: &StepOutcome) {
        let r = &o.report;
        self.total += r.total;
        self.label += r.label;
        self.unlabel += r.unlabel;
        self.nd += r.nd;
        self.mask += r.mask;
        self.agency_labeled += r.agency_labeled;
        self.agency_unlabeled += r.agency_unlabeled;
        self.agents += o.agent_loss;
    }
}

fn metrics(r: Option<EvalResult>) -> (Option<f64>, Option<f64>) {
    match r {
        Some(r) => (Some(r.mae), Some(r.mse)),
        None => (None, None),
    }
}

fn train(dataset: &Dataset, cfg: &RunConfig, out: Option<&Path>, tag: RunTag) -> Result<TrainingRun> {
    let labeled: Vec<&SceneSample> = dataset.split(Split::Labeled);
    if labeled.is_empty() {
        return Err(Error::Config("training needs at least one labeled scene".into()));
    }
    let unlabeled: Vec<&SceneSample> = dataset.split(Split::Unlabeled);
    let test: Vec<&SceneSample> = dataset.split(Split::Test);
    let train_all: Vec<&SceneSample> = labeled.iter().chain(&unlabeled).copied().collect();
    let t = cfg.train.clone();
    let mut trainer = Trainer::new(cfg, dataset)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    }

    let bl = t.batch_labeled;
    let bu = t.batch_unlabeled;
    let per_epoch = {
        let a = if bl > 0 { labeled.len().div_ceil(bl) } else { 0 };
        let b = if bu > 0 { unlabeled.len().div_ceil(bu) } else { 0 };
        a.max(b).max(1)
    };
    let use_unlabeled = tag == RunTag::Semi && bu > 0;

    let mut logs = Vec::with_capacity(t.epochs);
    let (mut steps, mut labeled_seen, mut unlabeled_seen) = (0, 0, 0);
    for epoch in 0..t.epochs {
        let started = Instant::now();
        let lab_order = shuffled(labeled.len(), derive_seed(t.seed, &format!("order-labeled-{epoch}")));
        let unl_order = shuffled(unlabeled.len(), derive_seed(t.seed, &format!("order-unlabeled-{epoch}")));
        let aug = AugmentationConfig { seed: derive_seed(t.seed, &format!("augment-{epoch}")), ..t.augmentation };
        let mut totals = LossTotals::default();
        for b in 0..per_epoch {
            let lr = t.model_lr * t.lr_schedule.factor(steps, t.epochs * per_epoch);
            trainer.opt.set_learning_rate(lr);
            let lab: Vec<SceneSample> =
                batch_indices(&lab_order, b, bl).into_iter().map(|i| augment(labeled[i], &aug)).collect();
            let unl: Vec<SceneSample> = if use_unlabeled {
                batch_indices(&unl_order, b, bu).into_iter().map(|i| augment(unlabeled[i], &aug)).collect()
            } else {
                Vec::new()
            };
            let outcome = trainer
                .train_step(&lab, &unl)
                .map_err(|e| Error::Training { epoch, step: b, source: Box::new(e) })?;
            totals.add(&outcome);
            steps += 1;
            labeled_seen += lab.len();
            unlabeled_seen += unl.len();
        }
        let (train_mae, train_mse) =
            metrics(if t.eval_train { Some(evaluate_samples(&trainer.model, &train_all)?) } else { None });
        let (test_mae, test_mse) = metrics(if t.eval_test && !test.is_empty() {
            Some(evaluate_samples(&trainer.model, &test)?)
        } else {
            None
        });
        let n = per_epoch as f64;
        let log = EpochLog {
            run: tag.as_str().into(),
            epoch: epoch + 1,
            train_mae,
            train_mse,
            test_mae,
            test_mse,
            loss_total: totals.total / n,
            loss_label: totals.label / n,
            loss_unlabel: totals.unlabel / n,
            loss_nd: totals.nd / n,
            loss_mask: totals.mask / n,
            loss_agency_labeled: totals.agency_labeled / n,
            loss_agency_unlabeled: totals.agency_unlabeled / n,
            loss_agents: totals.agents / n,
            batches: per_epoch,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "[{}] epoch {} loss {:.4} train MAE {:?} test MAE {:?}",
            log.run,
            log.epoch,
            log.loss_total,
            log.train_mae,
            log.test_mae
        );
        logs.push(log);
        if let Some(dir) = out {
            write_epoch_logs(&logs, &dir.join("epochs.csv"))?;
            if t.checkpoint_every > 0 && (epoch + 1) % t.checkpoint_every == 0 {
                trainer.checkpoint()?.save(&dir.join(format!("epoch-{:04}", epoch + 1)))?;
            }
        }
    }
    let checkpoint = trainer.checkpoint()?;
    if let Some(dir) = out {
        checkpoint.save(dir)?;
        write_epoch_logs(&logs, &dir.join("epochs.csv"))?;
    }
    Ok(TrainingRun { tag, checkpoint, logs, steps, labeled_seen, unlabeled_seen })
}

/// Semi-supervised training. Writes `config.toml`, `epochs.csv` and the final
/// checkpoint into `out` when given.
pub fn run_training(dataset: &Dataset, cfg: &RunConfig, out: Option<&Path>) -> Result<TrainingRun> {
    train(dataset, cfg, out, RunTag::Semi)
}

/// The same pipeline with `lambda_u = 0` and unlabeled scenes skipped; the
/// number of batches per epoch is unchanged.
pub fn labeled_only_baseline(dataset: &Dataset, cfg: &RunConfig, out: Option<&Path>) -> Result<TrainingRun> {
    let mut cfg = cfg.clone();
    cfg.loss.lambda_u = 0.0;
    train(dataset, &cfg, out, RunTag::LabeledOnly)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate_dataset;

    pub(crate) fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data = DatasetSpec {
            n_train: 6,
            n_test: 2,
            labeled_ratio: 0.34,
            size: (64, 64),
            count_range: (4, 30),
            ..DatasetSpec::default()
        };
        cfg.model.channels = 16;
        cfg.model.head_hidden = 8;
        cfg.train.epochs = 2;
        cfg.train.batch_unlabeled = 2;
        cfg.train.num_agents = 4;
        cfg.train.augmentation.crop_size = 48;
        cfg
    }

    #[test]
    fn toml_round_trip_and_partial_documents() {
        let cfg = tiny_config();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        let partial = RunConfig::from_toml(
            "[loss]\nbeta = 2.0\n[contrastive]\ndistribution = \"normal\"\ntau = 0.05\n[train]\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(partial.loss.beta, 2.0);
        assert_eq!(partial.loss.lambda_m, 0.1);
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.contrastive.tau, 0.05);
        assert!(RunConfig::from_toml("[train]\nbatch_labeled = 0\nbatch_unlabeled = 0\n").is_err());
        assert!(RunConfig::from_toml("[model]\nstride = 4\n").is_err());
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Constant.factor(7, 10), 1.0);
        assert_eq!(LrSchedule::Cosine.factor(0, 10), 1.0);
        assert!(LrSchedule::Cosine.factor(9, 10).abs() < 1e-15);
        assert!((LrSchedule::Cosine.factor(2, 5) - 0.5).abs() < 1e-15);
        assert_eq!(LrSchedule::Cosine.factor(0, 1), 1.0);
        let f: Vec<f64> = (0..10).map(|s| LrSchedule::Cosine.factor(s, 10)).collect();
        assert!(f.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut cfg = tiny_config();
        cfg.train.epochs = 0;
        let data = generate_dataset(&cfg.data).unwrap();
        let run = run_training(&data, &cfg, None).unwrap();
        assert!(run.logs.is_empty());
        let fresh = Trainer::new(&cfg, &data).unwrap();
        let img = data.samples[0].image();
        assert_eq!(
            run.checkpoint.model.forward(img).unwrap().density_values().unwrap(),
            fresh.model.forward(img).unwrap().density_values().unwrap()
        );
    }

    #[test]
    fn unlabeled_only_step_leaves_head_untouched() {
        let cfg = tiny_config();
        let data = generate_dataset(&cfg.data).unwrap();
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        let unl: Vec<SceneSample> = data.split(Split::Unlabeled).into_iter().cloned().collect();
        let out = trainer.train_step(&[], &unl[..2]).unwrap();
        assert_eq!(out.max_norm(ParamGroup::is_head), 0.0);
        assert!(out.max_norm(|g| g == ParamGroup::Backbone) > 0.0);
        assert_eq!(out.report.label, 0.0);
    }

    #[test]
    fn labeled_only_batch_total_equals_label_loss() {
        let cfg = tiny_config();
        let data = generate_dataset(&cfg.data).unwrap();
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        let lab: Vec<SceneSample> = data.split(Split::Labeled).into_iter().cloned().collect();
        let out = trainer.train_step(&lab[..1], &[]).unwrap();
        assert_eq!(out.report.total, out.report.label);
        assert!(out.max_norm(ParamGroup::is_head) > 0.0);
    }

    #[test]
    fn frozen_learning_rates_repeat_reports() {
        let mut cfg = tiny_config();
        cfg.train.model_lr = 0.0;
        cfg.train.agent_lr = 0.0;
        let data = generate_dataset(&cfg.data).unwrap();
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        let lab: Vec<SceneSample> = data.split(Split::Labeled).into_iter().cloned().collect();
        let unl: Vec<SceneSample> = data.split(Split::Unlabeled).into_iter().cloned().collect();
        let a = trainer.train_step(&lab[..1], &unl[..2]).unwrap();
        let b = trainer.train_step(&lab[..1], &unl[..2]).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.agent_loss, b.agent_loss);
    }

    #[test]
    fn runs_are_deterministic_and_logged() {
        let cfg = tiny_config();
        let data = generate_dataset(&cfg.data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = run_training(&data, &cfg, Some(dir.path())).unwrap();
        let b = run_training(&data, &cfg, None).unwrap();
        assert_eq!(a.logs.len(), 2);
        let strip = |logs: &[EpochLog]| -> Vec<EpochLog> {
            logs.iter().map(|l| EpochLog { wall_time: 0.0, ..l.clone() }).collect()
        };
        assert_eq!(strip(&a.logs), strip(&b.logs));
        assert_eq!(strip(&read_epoch_logs(&dir.path().join("epochs.csv")).unwrap()), strip(&a.logs));
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.bank, a.checkpoint.bank);
        assert_eq!(back.partition, a.checkpoint.partition);
    }

    #[test]
    fn zero_lambda_u_matches_baseline_trajectory() {
        let mut cfg = tiny_config();
        cfg.loss.lambda_u = 0.0;
        cfg.train.eval_train = false;
        cfg.train.eval_test = false;
        let data = generate_dataset(&cfg.data).unwrap();
        let semi = run_training(&data, &cfg, None).unwrap();
        let base = labeled_only_baseline(&data, &cfg, None).unwrap();
        assert_eq!(semi.steps, base.steps);
        assert_eq!(base.unlabeled_seen, 0);
        assert!(semi.unlabeled_seen > 0);
        assert_eq!(base.logs[0].run, "labeled_only");
        for ((n, a), (_, b)) in
            semi.checkpoint.model.named_params().iter().zip(base.checkpoint.model.named_params())
        {
            let d = scalar(&(a.as_tensor() - b.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap()).unwrap();
            assert_eq!(d, 0.0, "{n}");
        }
        assert_eq!(semi.checkpoint.bank.agents(), base.checkpoint.bank.agents());
    }
}
