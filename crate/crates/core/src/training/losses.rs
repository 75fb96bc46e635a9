use crate::error::{Error, Result};
use crate::material::PartPrior;
use crate::sim::Vec3;
use crate::spatial::KdTree;

/// Lower bound applied to the predicted log-stiffness spread of a part.
pub const MIN_PREDICTED_STD: f64 = 1e-3;

/// Mean squared distance between simulated and target tracks.
///
/// `traj[t][i]` is the simulated trajectory, `targets[s][t]` the target of
/// point `indices[s]`. Frames `[0, frames)` are used.
pub fn tracking_loss(traj: &[Vec<Vec3>], indices: &[usize], targets: &[Vec<Vec3>], frames: usize) -> Result<f64> {
    tracking_loss_impl(traj, indices, targets, frames, None)
}

pub(crate) fn tracking_loss_impl(
    traj: &[Vec<Vec3>],
    indices: &[usize],
    targets: &[Vec<Vec3>],
    frames: usize,
    mut grad: Option<(&mut [Vec<Vec3>], f64)>,
) -> Result<f64> {
    if indices.is_empty() || frames == 0 {
        return Err(Error::invalid("tracking loss needs at least one correspondence"));
    }
    if indices.len() != targets.len() {
        return Err(Error::dims("tracked targets", indices.len(), targets.len()));
    }
    if traj.len() < frames || targets.iter().any(|t| t.len() < frames) {
        return Err(Error::invalid("tracking loss frames exceed the available data"));
    }
    let count = (indices.len() * frames) as f64;
    let mut sum = 0.0;
    for (s, &i) in indices.iter().enumerate() {
        for t in 0..frames {
            let d = traj[t][i] - targets[s][t];
            sum += d.norm_squared();
            if let Some((g, scale)) = grad.as_mut() {
                g[t][i] += d * (2.0 * *scale / count);
            }
        }
    }
    Ok(sum / count)
}

/// Symmetric squared Chamfer distance averaged over frames `[0, frames)`.
pub fn chamfer_loss(sim: &[Vec<Vec3>], clouds: &[Vec<Vec3>], frames: usize) -> Result<f64> {
    chamfer_loss_impl(sim, clouds, frames, None)
}

pub(crate) fn chamfer_loss_impl(
    sim: &[Vec<Vec3>],
    clouds: &[Vec<Vec3>],
    frames: usize,
    mut grad: Option<(&mut [Vec<Vec3>], f64)>,
) -> Result<f64> {
    if frames == 0 || sim.len() < frames || clouds.len() < frames {
        return Err(Error::invalid("chamfer loss frames exceed the available data"));
    }
    let mut total = 0.0;
    for t in 0..frames {
        let (a, b) = (&sim[t], &clouds[t]);
        if a.is_empty() || b.is_empty() {
            return Err(Error::invalid(format!("chamfer loss: empty point set at frame {t}")));
        }
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let tb = KdTree::build(b);
        let ta = KdTree::build(a);
        let mut fwd = 0.0;
        for (i, p) in a.iter().enumerate() {
            let (j, d2) = tb.nearest_one(p).expect("non-empty");
            fwd += d2;
            if let Some((g, scale)) = grad.as_mut() {
                g[t][i] += (p - b[j]) * (2.0 * *scale / (na * frames as f64));
            }
        }
        let mut bwd = 0.0;
        for q in b {
            let (i, d2) = ta.nearest_one(q).expect("non-empty");
            bwd += d2;
            if let Some((g, scale)) = grad.as_mut() {
                g[t][i] += (a[i] - q) * (2.0 * *scale / (nb * frames as f64));
            }
        }
        total += fwd / na + bwd / nb;
    }
    Ok(total / frames as f64)
}

/// KL(N(mu_hat, sigma_hat²) ‖ N(mu, sigma²)).
pub fn gaussian_kl(mu_hat: f64, sigma_hat: f64, mu: f64, sigma: f64) -> f64 {
    (sigma / sigma_hat).ln() + (sigma_hat * sigma_hat + (mu_hat - mu).powi(2)) / (2.0 * sigma * sigma) - 0.5
}

/// Sum over parts of the KL divergence between the predicted log-stiffness
/// statistics of the part's intra edges and its prior.
///
/// `log_k[m]` holds ln(k) of part `m`'s intra edges. Parts with a single edge
/// contribute only the mean term; parts without edges contribute nothing.
pub fn prior_loss(log_k: &[Vec<f64>], priors: &[PartPrior]) -> Result<f64> {
    prior_loss_impl(log_k, priors, None)
}

/// Same as [`prior_loss`], also writing d(loss)/d(ln k) into `grad`, which
/// is laid out like `log_k`.
pub fn prior_loss_grad(log_k: &[Vec<f64>], priors: &[PartPrior], grad: &mut [Vec<f64>]) -> Result<f64> {
    prior_loss_impl(log_k, priors, Some(grad))
}

fn prior_loss_impl(log_k: &[Vec<f64>], priors: &[PartPrior], mut grad: Option<&mut [Vec<f64>]>) -> Result<f64> {
    if log_k.len() != priors.len() {
        return Err(Error::dims("part priors", log_k.len(), priors.len()));
    }
    let mut total = 0.0;
    for (m, (ys, prior)) in log_k.iter().zip(priors).enumerate() {
        let n = ys.len();
        if n == 0 {
            continue;
        }
        let (mu, sigma) = (prior.log_stiffness_mean, prior.log_stiffness_std);
        let nf = n as f64;
        let mean = ys.iter().sum::<f64>() / nf;
        let d_mean = (mean - mu) / (sigma * sigma);
        if n == 1 {
            total += (mean - mu).powi(2) / (2.0 * sigma * sigma);
            if let Some(g) = grad.as_deref_mut() {
                g[m][0] = d_mean;
            }
            continue;
        }
        let raw_std = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / nf).sqrt();
        let floored = raw_std < MIN_PREDICTED_STD;
        let std = raw_std.max(MIN_PREDICTED_STD);
        total += gaussian_kl(mean, std, mu, sigma);
        if let Some(g) = grad.as_deref_mut() {
            let d_std = if floored { 0.0 } else { -1.0 / std + std / (sigma * sigma) };
            for (gy, y) in g[m].iter_mut().zip(ys) {
                *gy = d_mean / nf + d_std * (y - mean) / (nf * std);
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_trk: f64,
    pub lambda_cham: f64,
    pub lambda_prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_trk: 1.0,
            lambda_cham: 1.0,
            lambda_prior: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_trk", self.lambda_trk),
            ("lambda_cham", self.lambda_cham),
            ("lambda_prior", self.lambda_prior),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub tracking: f64,
    pub chamfer: f64,
    pub prior: f64,
    pub total: f64,
}

pub fn total_loss(weights: &LossWeights, tracking: f64, chamfer: f64, prior: f64) -> f64 {
    weights.lambda_trk * tracking + weights.lambda_cham * chamfer + weights.lambda_prior * prior
}
