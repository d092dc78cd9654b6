//! Supervision on labeled scenes: the point posterior, the noise-depression
//! Bayesian loss, the mask loss and the weighted loss composition.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::datasets::{CellGrid, Point};
use crate::error::{Error, Result};

/// Row-stochastic posterior `p[i][j]` of cell `i` belonging to annotation `j`.
/// With no annotations the matrix is empty and every loss built on it is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    pub num_cells: usize,
    pub num_points: usize,
    pub sigma: f64,
    pub stride: usize,
    /// Row-major `num_cells x num_points`.
    pub p: Vec<f64>,
}

impl PosteriorMatrix {
    pub fn is_empty(&self) -> bool {
        self.num_points == 0
    }

    pub fn get(&self, cell: usize, point: usize) -> f64 {
        self.p[cell * self.num_points + point]
    }

    /// Expected count `sum_i p_ij D_i` per annotation.
    pub fn expected_counts(&self, density: &[f64]) -> Result<Vec<f64>> {
        if density.len() != self.num_cells {
            return Err(Error::Shape(format!("{} density cells for {} posterior rows", density.len(), self.num_cells)));
        }
        let mut out = vec![0.0; self.num_points];
        for (i, d) in density.iter().enumerate() {
            let row = &self.p[i * self.num_points..(i + 1) * self.num_points];
            for (o, p) in out.iter_mut().zip(row) {
                *o += p * d;
            }
        }
        Ok(out)
    }
}

/// Softmax over annotations of `-|c_i - y_j|^2 / (2 sigma^2)` at every cell center of `grid`.
pub fn posterior_matrix(points: &[Point], grid: &CellGrid, sigma: f64) -> Result<PosteriorMatrix> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("posterior bandwidth must be positive, got {sigma}")));
    }
    let n = grid.num_cells();
    let m = points.len();
    let mut p = Vec::with_capacity(n * m);
    let mut logits = vec![0.0; m];
    for i in 0..n {
        if m == 0 {
            break;
        }
        let (cx, cy) = grid.cell_center(i);
        for (l, q) in logits.iter_mut().zip(points) {
            let (dx, dy) = (cx - q.x, cy - q.y);
            *l = -(dx * dx + dy * dy) / (2.0 * sigma * sigma);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        p.extend(logits.iter().map(|l| (l - max).exp() / z));
    }
    Ok(PosteriorMatrix { num_cells: n, num_points: m, sigma, stride: grid.stride, p })
}

fn check_density(density: &[f64]) -> Result<()> {
    if density.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("predicted density".into()));
    }
    Ok(())
}

/// `sum_j exp(-beta eps_j) eps_j` with `eps_j = |1 - sum_i p_ij D_i|`.
pub fn nd_bayes_loss(density: &[f64], posterior: &PosteriorMatrix, beta: f64) -> Result<f64> {
    check_density(density)?;
    if posterior.is_empty() {
        return Ok(0.0);
    }
    let counts = posterior.expected_counts(density)?;
    Ok(counts
        .iter()
        .map(|c| {
            let eps = (1.0 - c).abs();
            (-beta * eps).exp() * eps
        })
        .sum())
}

pub fn plain_bayes_loss(density: &[f64], posterior: &PosteriorMatrix) -> Result<f64> {
    nd_bayes_loss(density, posterior, 0.0)
}

/// Gradient of the noise-depression loss with the modulating factor held
/// constant: `dL/dD_i = sum_j exp(-beta eps_j) sign(c_j - 1) p_ij`.
pub fn nd_bayes_grad(density: &[f64], posterior: &PosteriorMatrix, beta: f64) -> Result<Vec<f64>> {
    check_density(density)?;
    let mut grad = vec![0.0; density.len()];
    if posterior.is_empty() {
        return Ok(grad);
    }
    let counts = posterior.expected_counts(density)?;
    let coef: Vec<f64> = counts
        .iter()
        .map(|c| {
            let r = c - 1.0;
            let sign = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
            (-beta * r.abs()).exp() * sign
        })
        .collect();
    for (i, g) in grad.iter_mut().enumerate() {
        for (j, k) in coef.iter().enumerate() {
            *g += k * posterior.get(i, j);
        }
    }
    Ok(grad)
}

/// `sqrt(sum (pred - gt)^2)`.
pub fn mask_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("mask grids of {} and {} cells", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_c: f64,
    pub lambda_u: f64,
    pub beta: f64,
    /// Posterior bandwidth in pixels.
    pub sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_m: 0.1, lambda_c: 0.01, lambda_u: 0.1, beta: 1.0, sigma: 8.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_m", self.lambda_m),
            ("lambda_c", self.lambda_c),
            ("lambda_u", self.lambda_u),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("loss.sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub nd: f64,
    pub mask: f64,
    pub agency_labeled: f64,
    pub agency_unlabeled: f64,
    pub weighted_mask: f64,
    pub weighted_agency_labeled: f64,
    pub weighted_agency_unlabeled: f64,
    pub label: f64,
    pub unlabel: f64,
    pub total: f64,
}

pub fn compose_losses(
    nd: f64,
    mask: f64,
    agency_labeled: f64,
    agency_unlabeled: f64,
    weights: &LossWeights,
) -> LossReport {
    let weighted_mask = weights.lambda_m * mask;
    let weighted_agency_labeled = weights.lambda_c * agency_labeled;
    let weighted_agency_unlabeled = weights.lambda_c * agency_unlabeled;
    let label = nd + weighted_mask + weighted_agency_labeled;
    let unlabel = weighted_agency_unlabeled;
    LossReport {
        nd,
        mask,
        agency_labeled,
        agency_unlabeled,
        weighted_mask,
        weighted_agency_labeled,
        weighted_agency_unlabeled,
        label,
        unlabel,
        total: label + weights.lambda_u * unlabel,
    }
}

/// Differentiable noise-depression loss over a flat density tensor of
/// `num_cells` entries. The modulating factor is detached.
pub fn nd_bayes_loss_tensor(density: &Tensor, posterior: &PosteriorMatrix, beta: f64) -> Result<Tensor> {
    let n = density.elem_count();
    if n != posterior.num_cells {
        return Err(Error::Shape(format!("{n} density cells for {} posterior rows", posterior.num_cells)));
    }
    if posterior.is_empty() {
        return Ok(Tensor::zeros((), density.dtype(), density.device())?);
    }
    let p = Tensor::from_slice(&posterior.p, (n, posterior.num_points), density.device())?.to_dtype(density.dtype())?;
    let counts = density.reshape((1, n))?.matmul(&p)?;
    let eps = (counts - 1.0)?.abs()?;
    let factor = (eps.detach() * (-beta))?.exp()?;
    Ok((factor * eps)?.sum_all()?)
}

/// Floor inside the square root so the gradient stays finite at a perfect fit.
const MASK_SQRT_FLOOR: f64 = 1e-12;

/// Differentiable mask loss against a constant binary grid.
pub fn mask_loss_tensor(pred: &Tensor, gt: &[f64]) -> Result<Tensor> {
    if pred.elem_count() != gt.len() {
        return Err(Error::Shape(format!("mask grids of {} and {} cells", pred.elem_count(), gt.len())));
    }
    let gt = Tensor::from_slice(gt, pred.shape(), pred.device())?.to_dtype(pred.dtype())?;
    Ok(((pred - gt)?.sqr()?.sum_all()? + MASK_SQRT_FLOOR)?.sqrt()?)
}

/// Scalar value of a 0-d tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
