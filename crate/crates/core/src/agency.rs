//! Density agency: the interval partition and allocator, the agent bank, the
//! agent-side losses (foreground pull, background push) with their
//! closed-form gradients, and the agents' Adam optimizer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Smallest norm accepted by [`cosine`].
pub const MIN_COSINE_NORM: f64 = 1e-12;
/// Agents are never allowed to fall below this norm.
pub const MIN_AGENT_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionStrategy {
    Quantile,
    Geometric,
    Linear,
}

impl std::str::FromStr for PartitionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(Self::Quantile),
            "geometric" => Ok(Self::Geometric),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown partition strategy `{other}`"))),
        }
    }
}

/// Density intervals `(0, v1), [v1, v2), ..., [v_{n-1}, inf)` and their centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalPartition {
    borders: Vec<f64>,
    centers: Vec<f64>,
    /// Set when the requested strategy could not be honored and
    /// [`build_partition`] fell back to geometric borders.
    pub(crate) fell_back: bool,
}

impl IntervalPartition {
    pub fn from_borders(borders: Vec<f64>) -> Result<Self> {
        if borders.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("partition borders must be finite".into()));
        }
        if borders.first().is_some_and(|v| *v <= 0.0) {
            return Err(Error::Contract(format!("first border {} must be positive", borders[0])));
        }
        if borders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(format!("borders {borders:?} are not strictly increasing")));
        }
        let centers = interval_centers(&borders);
        Ok(Self { borders, centers, fell_back: false })
    }

    pub fn num_agents(&self) -> usize {
        self.borders.len() + 1
    }

    pub fn borders(&self) -> &[f64] {
        &self.borders
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn fell_back(&self) -> bool {
        self.fell_back
    }

    /// Agent index (0-based) of the interval containing `d`. Intervals are
    /// left-inclusive and right-exclusive; the first is open at 0.
    pub fn allocate(&self, d: f64) -> Result<usize> {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Contract(format!("allocator requires a finite density > 0, got {d}")));
        }
        Ok(self.borders.partition_point(|v| *v <= d))
    }
}

fn interval_centers(borders: &[f64]) -> Vec<f64> {
    let n = borders.len() + 1;
    if borders.is_empty() {
        // Single unbounded interval; one expected head per cell.
        return vec![1.0];
    }
    (0..n)
        .map(|i| {
            if i == 0 {
                0.5 * borders[0]
            } else if i == n - 1 {
                borders[n - 2]
            } else {
                0.5 * (borders[i - 1] + borders[i])
            }
        })
        .collect()
}

/// Lower empirical quantile: `sorted[ceil(q * n) - 1]`.
fn lower_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

fn spaced_borders(lo: f64, hi: f64, num_agents: usize, geometric: bool) -> Vec<f64> {
    let count = num_agents - 1;
    if count == 0 {
        return Vec::new();
    }
    let lo = if lo > 0.0 { lo } else { 1.0 };
    let hi = if hi > lo { hi } else { lo * (count + 1) as f64 };
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| {
            let t = i as f64 / (count - 1) as f64;
            if geometric {
                lo * (hi / lo).powf(t)
            } else {
                lo + (hi - lo) * t
            }
        })
        .collect()
}

/// Build the density partition from labeled ground-truth cell densities.
///
/// `Quantile` puts border `i` at the `i/N_a` lower empirical quantile of the
/// positive densities. When that does not yield strictly increasing borders
/// (too few distinct values), the result falls back to `Geometric` spacing
/// between the smallest and largest positive density and `fell_back()` is set.
pub fn build_partition(
    densities: &[f64],
    num_agents: usize,
    strategy: PartitionStrategy,
) -> Result<IntervalPartition> {
    if num_agents == 0 {
        return Err(Error::Config("number of agents must be at least 1".into()));
    }
    let mut positive: Vec<f64> = densities.iter().copied().filter(|d| *d > 0.0 && d.is_finite()).collect();
    positive.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let lo = positive.first().copied().unwrap_or(1.0);
    let hi = positive.last().copied().unwrap_or(lo);

    let (borders, fell_back) = match strategy {
        PartitionStrategy::Quantile => {
            let candidate: Vec<f64> = if positive.is_empty() {
                Vec::new()
            } else {
                (1..num_agents).map(|i| lower_quantile(&positive, i as f64 / num_agents as f64)).collect()
            };
            let ok = candidate.len() == num_agents - 1 && candidate.windows(2).all(|w| w[0] < w[1]);
            if ok {
                (candidate, false)
            } else {
                log::warn!(
                    "quantile partition needs {num_agents} distinct positive densities; falling back to geometric"
                );
                (spaced_borders(lo, hi, num_agents, true), true)
            }
        }
        PartitionStrategy::Geometric => (spaced_borders(lo, hi, num_agents, true), false),
        PartitionStrategy::Linear => (spaced_borders(lo, hi, num_agents, false), false),
    };
    let mut partition = IntervalPartition::from_borders(borders)?;
    partition.fell_back = fell_back;
    Ok(partition)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity `(a . b) / (|a| |b|)`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < MIN_COSINE_NORM || nb < MIN_COSINE_NORM {
        return Err(Error::Contract(format!("cosine of near-zero vector (norms {na:e}, {nb:e})")));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Similarity and its gradient with respect to the first argument:
/// `d s(x, y) / dx = y / (|x||y|) - s x / |x|^2`.
pub(crate) fn cosine_with_grad(x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    let s = cosine(x, y)?;
    let (nx, ny) = (norm(x), norm(y));
    let grad = x.iter().zip(y).map(|(xi, yi)| yi / (nx * ny) - s * xi / (nx * nx)).collect();
    Ok((s, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensitySource {
    Gt,
    Predicted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundFeature {
    pub feature: Vec<f64>,
    pub density: f64,
    pub source: DensitySource,
}

/// Region features split into foreground (with densities) and background.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegionFeatures {
    pub foreground: Vec<ForegroundFeature>,
    pub background: Vec<Vec<f64>>,
}

impl RegionFeatures {
    pub fn is_empty(&self) -> bool {
        self.foreground.is_empty() && self.background.is_empty()
    }
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

/// The `N_a` density agents plus their optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentBank {
    agents: Vec<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState,
}

const BANK_FORMAT: &str = "crowd-agency/agent-bank";
const BANK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BankFile {
    format: String,
    version: u32,
    num_agents: usize,
    dim: usize,
    bank: AgentBank,
}

impl AgentBank {
    /// Unit-norm agents drawn uniformly on the sphere.
    pub fn spherical(num_agents: usize, dim: usize, lr: f64, seed: u64) -> Result<Self> {
        if num_agents == 0 || dim == 0 {
            return Err(Error::Config(format!("agent bank of shape {num_agents}x{dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agents = (0..num_agents)
            .map(|_| loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = norm(&v);
                if n > 1e-6 {
                    break v.into_iter().map(|x| x / n).collect();
                }
            })
            .collect();
        Self::from_agents(agents, lr)
    }

    pub fn from_agents(agents: Vec<Vec<f64>>, lr: f64) -> Result<Self> {
        let dim = agents.first().map(Vec::len).unwrap_or(0);
        if agents.is_empty() || dim == 0 || agents.iter().any(|a| a.len() != dim) {
            return Err(Error::Shape("agents must be a non-empty rectangular set of vectors".into()));
        }
        if agents.iter().any(|a| norm(a) < MIN_AGENT_NORM || a.iter().any(|x| !x.is_finite())) {
            return Err(Error::Contract("agents must be finite and non-zero".into()));
        }
        let zeros = vec![vec![0.0; dim]; agents.len()];
        Ok(Self {
            agents,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState { m: zeros.clone(), v: zeros, t: 0 },
        })
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn dim(&self) -> usize {
        self.agents[0].len()
    }

    pub fn agents(&self) -> &[Vec<f64>] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        &self.agents[i]
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// One Adam step. Rejects non-finite gradients without touching the bank.
    /// An agent whose update would fall below [`MIN_AGENT_NORM`] keeps its
    /// previous value.
    pub fn step(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.agents.len() || grads.iter().any(|g| g.len() != self.dim()) {
            return Err(Error::Shape(format!(
                "agent gradients shaped {}x{}, bank is {}x{}",
                grads.len(),
                grads.first().map(Vec::len).unwrap_or(0),
                self.num_agents(),
                self.dim()
            )));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("agent gradients".into()));
        }
        self.state.t += 1;
        let t = self.state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let mut next = self.agents[i].clone();
            for k in 0..g.len() {
                let m = &mut self.state.m[i][k];
                let v = &mut self.state.v[i][k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[k];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                next[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            if norm(&next) >= MIN_AGENT_NORM && next.iter().all(|x| x.is_finite()) {
                self.agents[i] = next;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BankFile {
            format: BANK_FORMAT.into(),
            version: BANK_VERSION,
            num_agents: self.num_agents(),
            dim: self.dim(),
            bank: self.clone(),
        };
        write_atomic(path, serde_json::to_string(&file)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: BankFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.format != BANK_FORMAT || file.version != BANK_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported agent bank {} v{}",
                file.format, file.version
            )));
        }
        let bank = file.bank;
        if bank.num_agents() != file.num_agents || bank.dim() != file.dim {
            return Err(Error::Checkpoint("agent bank header does not match its payload".into()));
        }
        Ok(bank)
    }
}

fn check_dims(features: &RegionFeatures, bank: &AgentBank) -> Result<()> {
    let dim = bank.dim();
    let bad = features.foreground.iter().map(|e| e.feature.len()).chain(features.background.iter().map(Vec::len));
    for len in bad {
        if len != dim {
            return Err(Error::Shape(format!("feature of length {len}, agents have dimension {dim}")));
        }
    }
    Ok(())
}

/// Foreground pull `L_E = -sum_e s(Z(e), e)`; zero for an empty foreground.
pub fn agent_foreground_loss(features: &RegionFeatures, partition: &IntervalPartition, bank: &AgentBank) -> Result<f64> {
    check_dims(features, bank)?;
    let mut loss = 0.0;
    for e in &features.foreground {
        let i = partition.allocate(e.density)?;
        loss -= cosine(bank.agent(i), &e.feature)?;
    }
    Ok(loss)
}

/// Background push `L_B = (1/N_a) sum_f sum_b s(f, b)`; zero for an empty background.
pub fn agent_background_loss(features: &RegionFeatures, bank: &AgentBank) -> Result<f64> {
    check_dims(features, bank)?;
    let mut total = 0.0;
    for f in bank.agents() {
        for b in &features.background {
            total += cosine(f, b)?;
        }
    }
    Ok(total / bank.num_agents() as f64)
}

/// Closed-form `d(L_E + L_B)/d f` for every agent:
///
/// ```text
/// dL_E/df = sum_{Z(e)=f} s(f,e) f/|f|^2 - e/(|e||f|)
/// dL_B/df = (1/N_a) sum_b  b/(|b||f|) - s(f,b) f/|f|^2
/// ```
pub fn agent_gradients(
    features: &RegionFeatures,
    partition: &IntervalPartition,
    bank: &AgentBank,
) -> Result<Vec<Vec<f64>>> {
    check_dims(features, bank)?;
    if partition.num_agents() != bank.num_agents() {
        return Err(Error::Shape(format!(
            "partition has {} intervals, bank has {} agents",
            partition.num_agents(),
            bank.num_agents()
        )));
    }
    let n_a = bank.num_agents() as f64;
    let mut grads = vec![vec![0.0; bank.dim()]; bank.num_agents()];
    for e in &features.foreground {
        let i = partition.allocate(e.density)?;
        let (_, ds) = cosine_with_grad(bank.agent(i), &e.feature)?;
        for (g, d) in grads[i].iter_mut().zip(ds) {
            *g -= d;
        }
    }
    for (i, f) in bank.agents().iter().enumerate() {
        for b in &features.background {
            let (_, ds) = cosine_with_grad(f, b)?;
            for (g, d) in grads[i].iter_mut().zip(ds) {
                *g += d / n_a;
            }
        }
    }
    Ok(grads)
}
