//! Uncertainty-aware contrastive supervision of region features against the
//! density agents.
//!
//! Every agent `j` gets a matching probability `w_hat_j` from the feature's
//! density `d` and the agent's interval center, turned into a weight
//! `w_j = 8 |w_hat_j - 0.25|`. With `u_j = exp(s(f_j, e) / tau)` the
//! per-feature loss is
//!
//! ```text
//! L_c(e) = -log( (sum_{j in P} w_j u_j + eps) / (sum_j w_j u_j + eps) )
//! ```
//!
//! where `P` is the positive set. Under the Laplace form `w_hat <= 0.25`
//! everywhere, so the literal threshold rule admits a positive only when `d`
//! sits exactly on a center; [`PositiveRule::MatchedGuaranteed`] adds the
//! allocator's agent so the numerator is never structurally empty.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::agency::{
    agent_background_loss, cosine, cosine_with_grad, AgentBank, IntervalPartition, RegionFeatures,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchDistribution {
    /// `1/4 exp(-|d - a| / 2)`
    Laplace,
    /// `sqrt(2/pi) exp(-2 (d - a)^2)`
    Normal,
}

impl std::str::FromStr for MatchDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplace" => Ok(Self::Laplace),
            "normal" => Ok(Self::Normal),
            other => Err(Error::Config(format!("unknown distribution `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveRule {
    /// Only agents whose matching probability reaches the threshold.
    Verbatim,
    /// Threshold set plus the allocator-matched agent.
    MatchedGuaranteed,
}

impl std::str::FromStr for PositiveRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verbatim" => Ok(Self::Verbatim),
            "matched_guaranteed" => Ok(Self::MatchedGuaranteed),
            other => Err(Error::Config(format!("unknown positive rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub distribution: MatchDistribution,
    pub tau: f64,
    pub threshold: f64,
    pub lambda_b: f64,
    pub positive_rule: PositiveRule,
    pub clamp_weights: bool,
    pub eps_num: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            distribution: MatchDistribution::Laplace,
            tau: 0.1,
            threshold: 0.25,
            lambda_b: 1.0,
            positive_rule: PositiveRule::MatchedGuaranteed,
            clamp_weights: false,
            eps_num: 1e-12,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!("threshold must be positive, got {}", self.threshold)));
        }
        if !(self.eps_num > 0.0) || !(self.lambda_b >= 0.0) {
            return Err(Error::Config("eps_num must be positive and lambda_b non-negative".into()));
        }
        Ok(())
    }
}

pub fn matching_probability(d: f64, center: f64, distribution: MatchDistribution) -> f64 {
    let r = d - center;
    match distribution {
        MatchDistribution::Laplace => 0.25 * (-r.abs() / 2.0).exp(),
        MatchDistribution::Normal => (2.0 / std::f64::consts::PI).sqrt() * (-2.0 * r * r).exp(),
    }
}

/// `8 |w_hat - 0.25|`, optionally clamped to 1.
pub fn uncertainty_weight(prob: f64, clamp: bool) -> f64 {
    let w = 8.0 * (prob - 0.25).abs();
    if clamp {
        w.min(1.0)
    } else {
        w
    }
}

/// Weights and positive flags of every agent for one density value.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentWeights {
    pub probabilities: Vec<f64>,
    pub weights: Vec<f64>,
    pub positive: Vec<bool>,
}

pub fn agent_weights(d: f64, partition: &IntervalPartition, cfg: &MatchConfig) -> Result<AgentWeights> {
    let matched = partition.allocate(d)?;
    let probabilities: Vec<f64> =
        partition.centers().iter().map(|a| matching_probability(d, *a, cfg.distribution)).collect();
    let weights = probabilities.iter().map(|p| uncertainty_weight(*p, cfg.clamp_weights)).collect();
    let positive = probabilities
        .iter()
        .enumerate()
        .map(|(i, p)| *p >= cfg.threshold || (cfg.positive_rule == PositiveRule::MatchedGuaranteed && i == matched))
        .collect();
    Ok(AgentWeights { probabilities, weights, positive })
}

/// Positive agent indices (0-based) for density `d`.
pub fn positive_set(d: f64, partition: &IntervalPartition, cfg: &MatchConfig) -> Result<Vec<usize>> {
    let w = agent_weights(d, partition, cfg)?;
    Ok(w.positive.iter().enumerate().filter_map(|(i, p)| p.then_some(i)).collect())
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Per-agent log terms `ln(w_j) + s_j / tau` (`-inf` where `w_j = 0`).
fn log_terms(sims: &[f64], weights: &[f64], tau: f64) -> Vec<f64> {
    sims.iter()
        .zip(weights)
        .map(|(s, w)| if *w > 0.0 { w.ln() + s / tau } else { f64::NEG_INFINITY })
        .collect()
}

/// The contrastive ratio evaluated from precomputed similarities, weights and
/// positive flags. Computed in log space so small temperatures cannot overflow.
pub fn contrastive_from_parts(sims: &[f64], weights: &[f64], positive: &[bool], tau: f64, eps: f64) -> f64 {
    let logs = log_terms(sims, weights, tau);
    let ln_eps = eps.ln();
    let all = log_sum_exp(logs.iter().copied().chain(std::iter::once(ln_eps)));
    let pos = log_sum_exp(
        logs.iter().zip(positive).filter(|(_, p)| **p).map(|(l, _)| *l).chain(std::iter::once(ln_eps)),
    );
    all - pos
}

pub fn contrastive_loss(
    e: &[f64],
    d: f64,
    bank: &AgentBank,
    partition: &IntervalPartition,
    cfg: &MatchConfig,
) -> Result<f64> {
    let w = agent_weights(d, partition, cfg)?;
    let sims = bank.agents().iter().map(|f| cosine(f, e)).collect::<Result<Vec<_>>>()?;
    Ok(contrastive_from_parts(&sims, &w.weights, &w.positive, cfg.tau, cfg.eps_num))
}

/// Loss and analytic gradients of `L_c(e)` with respect to the feature and
/// every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub d_feature: Vec<f64>,
    pub d_agents: Vec<Vec<f64>>,
}

/// For agent `i`, `dL/ds_i = (1/tau) (w_i u_i / (W + eps) - [i in P] w_i u_i / (N + eps))`
/// with `W` the full and `N` the positive sum. A negative agent therefore
/// receives `(1/tau) (w_i u_i / (W + eps)) (e/(|e||f_i|) - s f_i/|f_i|^2)`.
pub fn contrastive_loss_with_grads(
    e: &[f64],
    d: f64,
    bank: &AgentBank,
    partition: &IntervalPartition,
    cfg: &MatchConfig,
) -> Result<ContrastiveGrad> {
    let w = agent_weights(d, partition, cfg)?;
    let mut sims = Vec::with_capacity(bank.num_agents());
    let mut ds_df = Vec::with_capacity(bank.num_agents());
    let mut ds_de = Vec::with_capacity(bank.num_agents());
    for f in bank.agents() {
        let (s, g_f) = cosine_with_grad(f, e)?;
        let (_, g_e) = cosine_with_grad(e, f)?;
        sims.push(s);
        ds_df.push(g_f);
        ds_de.push(g_e);
    }
    let logs = log_terms(&sims, &w.weights, cfg.tau);
    let ln_eps = cfg.eps_num.ln();
    let all = log_sum_exp(logs.iter().copied().chain(std::iter::once(ln_eps)));
    let pos = log_sum_exp(
        logs.iter().zip(&w.positive).filter(|(_, p)| **p).map(|(l, _)| *l).chain(std::iter::once(ln_eps)),
    );
    let mut d_feature = vec![0.0; e.len()];
    let mut d_agents = Vec::with_capacity(bank.num_agents());
    for (i, l) in logs.iter().enumerate() {
        let share_all = (l - all).exp();
        let share_pos = if w.positive[i] { (l - pos).exp() } else { 0.0 };
        let coef = (share_all - share_pos) / cfg.tau;
        d_agents.push(ds_df[i].iter().map(|g| coef * g).collect());
        for (acc, g) in d_feature.iter_mut().zip(&ds_de[i]) {
            *acc += coef * g;
        }
    }
    Ok(ContrastiveGrad { loss: all - pos, d_feature, d_agents })
}

/// Itemized `L_C = sum_e L_c(e) + lambda_b L_B`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AgencyLossReport {
    pub contrastive_sum: f64,
    pub background: f64,
    pub lambda_b: f64,
    pub total: f64,
    pub num_foreground: usize,
    pub num_background: usize,
}

pub fn total_agency_loss(
    features: &RegionFeatures,
    bank: &AgentBank,
    partition: &IntervalPartition,
    cfg: &MatchConfig,
) -> Result<AgencyLossReport> {
    let mut contrastive_sum = 0.0;
    for e in &features.foreground {
        contrastive_sum += contrastive_loss(&e.feature, e.density, bank, partition, cfg)?;
    }
    let background = agent_background_loss(features, bank)?;
    Ok(AgencyLossReport {
        contrastive_sum,
        background,
        lambda_b: cfg.lambda_b,
        total: contrastive_sum + cfg.lambda_b * background,
        num_foreground: features.foreground.len(),
        num_background: features.background.len(),
    })
}

/// Stand-in for `ln 0` in the tensor path; finite so masked entries never
/// produce NaN through `x - max`.
const LOG_ZERO: f64 = -1e30;

fn agents_unit_tensor(bank: &AgentBank, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let flat: Vec<f64> = bank
        .agents()
        .iter()
        .flat_map(|f| {
            let n = crate::agency::norm(f);
            f.iter().map(move |x| x / n)
        })
        .collect();
    Ok(Tensor::from_vec(flat, (bank.num_agents(), bank.dim()), device)?.to_dtype(dtype)?)
}

fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(1)?.sqrt()?;
    Ok(x.broadcast_div(&norms)?)
}

/// Row-wise `max + ln(sum exp(x - max))` with the max treated as a constant.
fn row_log_sum_exp(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(1)?.detach();
    Ok((x.broadcast_sub(&m)?.exp()?.sum_keepdim(1)?.log()? + m)?)
}

/// Differentiable `sum_e L_c(e)` over the rows of `features` (`n x c`).
/// Agents enter as constants, so gradients reach only the features.
pub fn contrastive_loss_tensor(
    features: &Tensor,
    densities: &[f64],
    bank: &AgentBank,
    partition: &IntervalPartition,
    cfg: &MatchConfig,
) -> Result<Tensor> {
    let (n, c) = features.dims2()?;
    if n != densities.len() || c != bank.dim() {
        return Err(Error::Shape(format!(
            "{n}x{c} features with {} densities against {}-dim agents",
            densities.len(),
            bank.dim()
        )));
    }
    let device = features.device();
    let dtype = features.dtype();
    if n == 0 {
        return Ok(Tensor::zeros((), dtype, device)?);
    }
    let n_a = bank.num_agents();
    let mut log_w = Vec::with_capacity(n * (n_a + 1));
    let mut log_wp = Vec::with_capacity(n * (n_a + 1));
    let ln_eps = cfg.eps_num.ln();
    for d in densities {
        let w = agent_weights(*d, partition, cfg)?;
        for (wj, pj) in w.weights.iter().zip(&w.positive) {
            let lw = if *wj > 0.0 { wj.ln() } else { LOG_ZERO };
            log_w.push(lw);
            log_wp.push(if *pj { lw } else { LOG_ZERO });
        }
        log_w.push(ln_eps);
        log_wp.push(ln_eps);
    }
    let log_w = Tensor::from_vec(log_w, (n, n_a + 1), device)?.to_dtype(dtype)?;
    let log_wp = Tensor::from_vec(log_wp, (n, n_a + 1), device)?.to_dtype(dtype)?;

    let agents = agents_unit_tensor(bank, dtype, device)?;
    let sims = normalize_rows(features)?.matmul(&agents.t()?)?;
    let scaled = (sims / cfg.tau)?;
    // The epsilon column carries no similarity.
    let scaled = Tensor::cat(&[scaled, Tensor::zeros((n, 1), dtype, device)?], 1)?;
    let all = row_log_sum_exp(&(&scaled + log_w)?)?;
    let pos = row_log_sum_exp(&(&scaled + log_wp)?)?;
    Ok((all - pos)?.sum_all()?)
}

/// Differentiable `L_B = (1/N_a) sum_f sum_b s(f, b)` over background rows;
/// the agents are constants.
pub fn background_loss_tensor(background: &Tensor, bank: &AgentBank) -> Result<Tensor> {
    let (n, _) = background.dims2()?;
    if n == 0 {
        return Ok(Tensor::zeros((), background.dtype(), background.device())?);
    }
    let agents = agents_unit_tensor(bank, background.dtype(), background.device())?;
    let sims = normalize_rows(background)?.matmul(&agents.t()?)?;
    Ok((sims.sum_all()? / bank.num_agents() as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agency::{DensitySource, ForegroundFeature};
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_agent_fixture() -> (AgentBank, IntervalPartition) {
        let bank = AgentBank::from_agents(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.0).unwrap();
        let partition = IntervalPartition::from_borders(vec![2.0]).unwrap();
        (bank, partition)
    }

    fn cfg(tau: f64) -> MatchConfig {
        MatchConfig { tau, ..MatchConfig::default() }
    }

    #[test]
    fn matching_probability_values() {
        assert_eq!(matching_probability(3.0, 3.0, MatchDistribution::Laplace), 0.25);
        let half = matching_probability(1.0 + 2.0 * 2f64.ln(), 1.0, MatchDistribution::Laplace);
        assert!((half - 0.125).abs() < 1e-15);
        // Scalar oracle for the Normal form at its center.
        let oracle = (2.0f64 / std::f64::consts::PI).sqrt();
        let p = matching_probability(0.7, 0.7, MatchDistribution::Normal);
        assert!((p - oracle).abs() < 1e-15);
        assert!((p - 0.797_88).abs() < 1e-5);
        for dist in [MatchDistribution::Laplace, MatchDistribution::Normal] {
            let a = matching_probability(2.0 + 0.3, 2.0, dist);
            let b = matching_probability(2.0 - 0.3, 2.0, dist);
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_values_and_range() {
        assert_eq!(uncertainty_weight(0.25, false), 0.0);
        assert_eq!(uncertainty_weight(0.125, false), 1.0);
        // Far Laplace tail: weight tends to 2, outside the nominal [0, 1].
        let far = uncertainty_weight(matching_probability(100.0, 0.0, MatchDistribution::Laplace), false);
        assert!((far - 2.0).abs() < 1e-9);
        assert_eq!(uncertainty_weight(matching_probability(100.0, 0.0, MatchDistribution::Laplace), true), 1.0);
        let normal_peak = uncertainty_weight(matching_probability(0.0, 0.0, MatchDistribution::Normal), false);
        assert!((normal_peak - 4.383).abs() < 1e-3);
    }

    #[test]
    fn positive_sets() {
        let partition = IntervalPartition::from_borders(vec![1.0, 2.0, 3.0]).unwrap();
        let verbatim = MatchConfig { positive_rule: PositiveRule::Verbatim, ..MatchConfig::default() };
        assert!(positive_set(1.7, &partition, &verbatim).unwrap().is_empty());
        assert_eq!(positive_set(1.5, &partition, &verbatim).unwrap(), vec![1]);
        assert_eq!(positive_set(1.7, &partition, &MatchConfig::default()).unwrap(), vec![1]);

        // Root-solve sqrt(2/pi) exp(-2 r^2) = 0.25 by bisection.
        let f = |r: f64| (2.0 / std::f64::consts::PI).sqrt() * (-2.0 * r * r).exp() - 0.25;
        let (mut lo, mut hi) = (0.0, 2.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert!((lo - 0.7617).abs() < 1e-4);
        let normal = MatchConfig {
            distribution: MatchDistribution::Normal,
            positive_rule: PositiveRule::Verbatim,
            ..MatchConfig::default()
        };
        let wide = IntervalPartition::from_borders(vec![4.0, 8.0]).unwrap(); // centers 2, 6, 8
        assert_eq!(positive_set(6.0 + 0.99 * lo, &wide, &normal).unwrap(), vec![1]);
        assert!(positive_set(6.0 - 1.01 * lo, &wide, &normal).unwrap().is_empty());
    }

    #[test]
    fn single_agent_loss_is_zero() {
        let bank = AgentBank::from_agents(vec![vec![0.3, -1.0]], 0.0).unwrap();
        let p = IntervalPartition::from_borders(vec![]).unwrap();
        let l = contrastive_loss(&[1.0, 2.0], 0.8, &bank, &p, &cfg(0.1)).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn two_agent_fixture_matches_scalar_oracle() {
        let (bank, p) = two_agent_fixture();
        // Independent evaluation: a = (1, 2), d = 1.5, Laplace, tau = 1.
        let w1 = 8.0 * (0.25 - 0.25 * (-0.5f64 / 2.0).exp()).abs();
        let w2 = 8.0 * (0.25 - 0.25 * (-0.5f64 / 2.0).exp()).abs();
        let (u1, u2) = (1f64.exp(), 1.0);
        let oracle = -((w1 * u1 + 1e-12) / (w1 * u1 + w2 * u2 + 1e-12)).ln();
        let l = contrastive_loss(&[1.0, 0.0], 1.5, &bank, &p, &cfg(1.0)).unwrap();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.313_26).abs() < 1e-4);
        // The same ratio driven by weights (0.4424, 1.0554).
        let from_weights = contrastive_from_parts(&[1.0, 0.0], &[0.4424, 1.0554], &[true, false], 1.0, 1e-12);
        assert!((from_weights - 0.630).abs() < 1e-3);
    }

    #[test]
    fn large_temperature_limit() {
        // Uniform weights: put d on no center, every agent at the same distance.
        let bank = AgentBank::from_agents(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.3]], 0.0).unwrap();
        let p = IntervalPartition::from_borders(vec![2.0, 4.0]).unwrap(); // centers 1, 3, 4
        let weights = [1.0, 1.0, 1.0];
        let l = contrastive_from_parts(&[0.2, -0.4, 0.9], &weights, &[true, false, false], 1e3, 1e-12);
        assert!((l - 3f64.ln()).abs() < 2e-3);
        let l2 = contrastive_from_parts(&[0.2, -0.4, 0.9], &weights, &[true, true, false], 1e3, 1e-12);
        assert!((l2 - 1.5f64.ln()).abs() < 2e-3);
        // Through the public API the loss stays finite for tiny temperatures.
        assert!(contrastive_loss(&[0.3, 0.1], 1.2, &bank, &p, &cfg(1e-4)).unwrap().is_finite());
    }

    #[test]
    fn total_agency_loss_cases() {
        let (bank, p) = two_agent_fixture();
        let empty = total_agency_loss(&RegionFeatures::default(), &bank, &p, &cfg(0.1)).unwrap();
        assert_eq!(empty.total, 0.0);

        let feats = RegionFeatures {
            foreground: vec![ForegroundFeature { feature: vec![0.5, 0.2], density: 2.5, source: DensitySource::Gt }],
            background: vec![vec![-0.3, 1.0]],
        };
        let lc = contrastive_loss(&[0.5, 0.2], 2.5, &bank, &p, &cfg(0.1)).unwrap();
        let nb = (0.09f64 + 1.0).sqrt();
        let s_sum = (-0.3 / nb) + (1.0 / nb);
        let r = total_agency_loss(&feats, &bank, &p, &cfg(0.1)).unwrap();
        assert!((r.total - (lc + s_sum / 2.0)).abs() < 1e-12);
        let no_b = MatchConfig { lambda_b: 0.0, ..cfg(0.1) };
        assert!((total_agency_loss(&feats, &bank, &p, &no_b).unwrap().total - lc).abs() < 1e-15);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = IntervalPartition::from_borders(vec![1.0, 2.0, 3.5]).unwrap();
        for dist in [MatchDistribution::Laplace, MatchDistribution::Normal] {
            for trial in 0..10 {
                let dim = 2 + trial % 5;
                let agents: Vec<Vec<f64>> =
                    (0..4).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
                let bank = AgentBank::from_agents(agents.clone(), 0.0).unwrap();
                let e: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let d = rng.random_range(0.1..5.0);
                let c = MatchConfig { distribution: dist, tau: 0.5, ..MatchConfig::default() };
                let g = contrastive_loss_with_grads(&e, d, &bank, &p, &c).unwrap();
                let h = 1e-6;
                for i in 0..4 {
                    for k in 0..dim {
                        let mut a = agents.clone();
                        a[i][k] += h;
                        let lp = contrastive_loss(&e, d, &AgentBank::from_agents(a, 0.0).unwrap(), &p, &c).unwrap();
                        let mut a = agents.clone();
                        a[i][k] -= h;
                        let lm = contrastive_loss(&e, d, &AgentBank::from_agents(a, 0.0).unwrap(), &p, &c).unwrap();
                        let fd = (lp - lm) / (2.0 * h);
                        assert!((fd - g.d_agents[i][k]).abs() <= 1e-5 * fd.abs().max(1e-2));
                    }
                }
                for k in 0..dim {
                    let mut ep = e.clone();
                    ep[k] += h;
                    let mut em = e.clone();
                    em[k] -= h;
                    let fd = (contrastive_loss(&ep, d, &bank, &p, &c).unwrap()
                        - contrastive_loss(&em, d, &bank, &p, &c).unwrap())
                        / (2.0 * h);
                    assert!((fd - g.d_feature[k]).abs() <= 1e-5 * fd.abs().max(1e-2));
                }
            }
        }
    }

    #[test]
    fn tensor_path_matches_scalar_path() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = IntervalPartition::from_borders(vec![1.0, 2.0, 3.0]).unwrap();
        let bank = AgentBank::spherical(4, 5, 0.0, 2).unwrap();
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let dens: Vec<f64> = (0..6).map(|i| 0.3 + i as f64 * 0.7).collect();
        let bg: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        for c in [cfg(0.1), cfg(0.01), MatchConfig { distribution: MatchDistribution::Normal, ..cfg(0.2) }] {
            let feats = RegionFeatures {
                foreground: rows
                    .iter()
                    .zip(&dens)
                    .map(|(r, d)| ForegroundFeature { feature: r.clone(), density: *d, source: DensitySource::Gt })
                    .collect(),
                background: bg.clone(),
            };
            let scalar = total_agency_loss(&feats, &bank, &p, &c).unwrap();
            let fg = Var::from_vec(rows.concat(), (6, 5), &dev).unwrap();
            let bgt = Tensor::from_vec(bg.concat(), (3, 5), &dev).unwrap();
            let lc = contrastive_loss_tensor(fg.as_tensor(), &dens, &bank, &p, &c).unwrap();
            let lb = background_loss_tensor(&bgt, &bank).unwrap();
            let lc_v = lc.to_scalar::<f64>().unwrap();
            assert!((lc_v - scalar.contrastive_sum).abs() < 1e-9 * scalar.contrastive_sum.abs().max(1.0));
            assert!((lb.to_scalar::<f64>().unwrap() - scalar.background).abs() < 1e-12);

            // Autodiff on the tensor path agrees with the analytic feature gradient.
            let grads = lc.backward().unwrap();
            let g = grads.get(fg.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
            for (row, (e, d)) in rows.iter().zip(&dens).enumerate() {
                let a = contrastive_loss_with_grads(e, *d, &bank, &p, &c).unwrap();
                for k in 0..5 {
                    assert!((a.d_feature[k] - g[row][k]).abs() < 1e-8 * a.d_feature[k].abs().max(1.0));
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::collection::vec;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn laplace_probability_never_exceeds_quarter(d in 1e-6f64..50.0, b1 in 0.1f64..3.0, gap in 0.1f64..5.0) {
                let p = IntervalPartition::from_borders(vec![b1, b1 + gap]).unwrap();
                let w = agent_weights(d, &p, &MatchConfig::default()).unwrap();
                prop_assert!(w.probabilities.iter().all(|x| *x <= 0.25));
                prop_assert!(w.positive.iter().any(|x| *x));
            }

            #[test]
            fn scale_invariance(e in vec(-1.0f64..1.0, 3), k in 0.01f64..100.0, d in 0.05f64..6.0) {
                prop_assume!(crate::agency::norm(&e) > 1e-3);
                let p = IntervalPartition::from_borders(vec![1.0, 2.0]).unwrap();
                let bank = AgentBank::spherical(3, 3, 0.0, 4).unwrap();
                let a = contrastive_loss(&e, d, &bank, &p, &MatchConfig::default()).unwrap();
                let scaled: Vec<f64> = e.iter().map(|x| x * k).collect();
                let b = contrastive_loss(&scaled, d, &bank, &p, &MatchConfig::default()).unwrap();
                prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
            }

            #[test]
            fn loss_decreases_with_positive_similarity(s0 in -0.9f64..0.8, bump in 0.01f64..0.1, tau in 0.05f64..2.0) {
                let sims_lo = [s0, 0.1, -0.3];
                let sims_hi = [s0 + bump, 0.1, -0.3];
                let w = [0.5, 1.2, 1.7];
                let pos = [true, false, false];
                let lo = contrastive_from_parts(&sims_lo, &w, &pos, tau, 1e-12);
                let hi = contrastive_from_parts(&sims_hi, &w, &pos, tau, 1e-12);
                prop_assert!(hi < lo);
            }
        }
    }
}
