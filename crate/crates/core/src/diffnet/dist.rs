//! Graph-free densities and samplers on plain vectors.

use crate::error::{Error, Result};
use crate::tsallis::DiagGaussian;

use super::graph::{cb_log_norm_logit, HALF_LOG_2PI};

/// Half-width of the window around `lambda = 0.5` where series expansions are used.
pub const CB_SERIES_HALF_WIDTH: f64 = 1e-3;

pub fn gaussian_log_prob(dist: &DiagGaussian, x: &[f64]) -> Result<f64> {
    if x.len() != dist.dim() {
        return Err(Error::Shape(format!("point has {} dims, distribution {}", x.len(), dist.dim())));
    }
    Ok(dist
        .mean()
        .iter()
        .zip(dist.log_std())
        .zip(x)
        .map(|((m, ls), x)| {
            let z = (x - m) * (-ls).exp();
            -0.5 * z * z - ls - HALF_LOG_2PI
        })
        .sum())
}

/// `mean + std * noise`.
pub fn reparam_sample(dist: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != dist.dim() {
        return Err(Error::Shape(format!("noise has {} dims, distribution {}", noise.len(), dist.dim())));
    }
    Ok(dist.mean().iter().zip(dist.std()).zip(noise).map(|((m, s), n)| m + s * n).collect())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Domain(format!("continuous Bernoulli needs 0 < lambda < 1, got {lambda}")));
    }
    Ok(())
}

/// Log normalising constant `ln C(lambda)`, `C = 2 atanh(1 - 2 lambda) / (1 - 2 lambda)`.
pub fn cb_log_norm(lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let u = 1.0 - 2.0 * lambda;
    if (lambda - 0.5).abs() < CB_SERIES_HALF_WIDTH {
        let u2 = u * u;
        // atanh(u)/u = 1 + u^2/3 + u^4/5 + ...
        Ok(std::f64::consts::LN_2 + (u2 / 3.0 + u2 * u2 / 5.0).ln_1p())
    } else {
        Ok((2.0 * u.atanh() / u).ln())
    }
}

/// Summed continuous-Bernoulli log density over independent coordinates.
pub fn cb_log_prob(lambda: &[f64], x: &[f64]) -> Result<f64> {
    if lambda.len() != x.len() {
        return Err(Error::Shape(format!("{} parameters for {} values", lambda.len(), x.len())));
    }
    let mut total = 0.0;
    for (&l, &xv) in lambda.iter().zip(x) {
        if !(0.0..=1.0).contains(&xv) {
            return Err(Error::Domain(format!("continuous Bernoulli support is [0, 1], got {xv}")));
        }
        total += xv * l.ln() + (1.0 - xv) * (-l).ln_1p() + cb_log_norm(l)?;
    }
    Ok(total)
}

/// Mean of a continuous Bernoulli given its logit: `sigmoid(l)/tanh(l/2) - 1/l`.
pub fn cb_mean_logit(l: f64) -> f64 {
    // |lambda - 0.5| < 1e-3 corresponds to |l| < ~4e-3.
    if l.abs() < 4.0 * CB_SERIES_HALF_WIDTH {
        0.5 + l / 12.0 - l * l * l / 720.0
    } else {
        let lam = 1.0 / (1.0 + (-l).exp());
        lam / (0.5 * l).tanh() - 1.0 / l
    }
}

/// Log normaliser from a logit; re-exported for callers holding logits.
pub fn cb_log_norm_from_logit(l: f64) -> f64 {
    cb_log_norm_logit(l)
}
