use ndarray::s;

use super::model::QvaeModel;
use crate::diffnet::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::tsallis::{check_sparsity_condition, QParams, CHAIN_REL_TOL, DEFAULT_MAX_EXPONENT};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    /// Skip the sparsification-condition check and the bracket assertion.
    pub unsafe_condition: bool,
    pub max_exponent: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { unsafe_condition: false, max_exponent: DEFAULT_MAX_EXPONENT }
    }
}

/// Batch means of the weighted objective terms.
///
/// `total = -(sum(recon_per_class) + prior_term - entropy_term)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon_per_class: Vec<f64>,
    pub prior_term: f64,
    pub entropy_term: f64,
    /// Smallest bracketed reconstruction quantity in the batch; `+inf` when `q = 1`.
    pub bracket_min: f64,
    pub saturation_count: usize,
}

/// Validates `params` and enforces the sparsification chain unless `unsafe_condition`.
pub fn enforce_condition(params: &QParams, unsafe_condition: bool) -> Result<()> {
    params.validate()?;
    let report = check_sparsity_condition(params);
    if !report.satisfied && !unsafe_condition {
        return Err(Error::ConditionViolated { chain: report.chain_values });
    }
    Ok(())
}

/// Coefficients `a_0 = beta/(1-q)`, `a_c = zeta_c/(1-q_c)` and the gaps
/// `a_{c-1} - a_c`. Gaps within the chain tolerance count as exact equality.
fn bracket_coefficients(params: &QParams) -> (f64, Vec<f64>) {
    let mut a = vec![params.beta / (1.0 - params.q)];
    a.extend(params.class_qs.iter().zip(&params.class_weights).map(|(&qc, &zc)| zc / (1.0 - qc)));
    let gaps = a
        .windows(2)
        .map(|w| {
            let gap = w[0] - w[1];
            if gap.abs() <= CHAIN_REL_TOL * w[0].abs().max(w[1].abs()) {
                0.0
            } else {
                gap
            }
        })
        .collect();
    (a[a.len() - 1], gaps)
}

/// The bracketed quantity multiplying `p(z)^{1-q}` once the prior q-log is
/// folded into the reconstruction sum, from per-class log likelihoods:
/// `a_C P_{<C+1} + sum_c P_{<c} (a_{c-1} - a_c)` with
/// `P_{<c} = prod_{j<c} p_j^{1-q_j}`. Returns `+inf` at `q = 1`.
pub fn bracket_from_log_likelihoods(params: &QParams, class_log_probs: &[f64], max_exponent: f64) -> f64 {
    if params.is_exact() {
        return f64::INFINITY;
    }
    let (a_last, gaps) = bracket_coefficients(params);
    let mut cum = 0.0;
    let mut total = 0.0;
    for (c, gap) in gaps.iter().enumerate() {
        total += cum_power(cum, max_exponent) * gap;
        cum += (1.0 - params.class_qs[c]) * class_log_probs[c];
    }
    total + a_last * cum_power(cum, max_exponent)
}

/// `sum_c zeta_c P_{<c} ln_{q_c} p_c`: the reconstruction sum before the
/// `p(z)^{1-q}` factor, from per-class log likelihoods.
pub fn reconstruction_from_log_likelihoods(params: &QParams, class_log_probs: &[f64], max_exponent: f64) -> f64 {
    let mut cum = 0.0;
    let mut total = 0.0;
    for (c, &lp) in class_log_probs.iter().enumerate() {
        let qc = params.class_qs[c];
        let k = 1.0 - qc;
        let lq = if k == 0.0 { lp } else { (k * lp).clamp(-max_exponent, max_exponent).exp_m1() / k };
        total += params.class_weights[c] * cum_power(cum, max_exponent) * lq;
        cum += k * lp;
    }
    total
}

fn cum_power(cum: f64, max_exponent: f64) -> f64 {
    cum.clamp(-max_exponent, max_exponent).exp()
}

/// Bracketed quantity for one observation `x` decoded at latent `z`.
pub fn bracket_term(model: &QvaeModel, x: &[f64], z: &[f64], params: &QParams) -> Result<f64> {
    let lps = class_log_likelihoods(model, x, z)?;
    Ok(bracket_from_log_likelihoods(params, &lps, DEFAULT_MAX_EXPONENT))
}

/// `ln p(x_c | z)` for every class.
pub fn class_log_likelihoods(model: &QvaeModel, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.observation_width() {
        return Err(Error::Shape(format!("observation width {}, expected {}", x.len(), model.observation_width())));
    }
    if z.len() != model.latent_dim() {
        return Err(Error::Shape(format!("latent width {}, expected {}", z.len(), model.latent_dim())));
    }
    let g = Graph::new();
    let zv = g.constant(Mat::from_shape_vec((1, z.len()), z.to_vec()).expect("row"));
    (0..model.spec().classes.len())
        .map(|c| {
            let r = model.spec().classes.range(c);
            let xc = g.constant(Mat::from_shape_vec((1, r.len()), x[r].to_vec()).expect("row"));
            let lp = model.record_class_log_prob(&g, c, zv, xc)?;
            Ok(g.scalar(lp))
        })
        .collect()
}

pub(crate) struct LossGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

pub(crate) fn record_loss(
    model: &QvaeModel,
    g: &Graph,
    x: &Mat,
    noise: &Mat,
    params: &QParams,
    opts: &LossOptions,
) -> Result<LossGraph> {
    if x.nrows() == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    if params.num_classes() != model.spec().classes.len() {
        return Err(Error::Config(format!(
            "{} class q values for a model with {} observation classes",
            params.num_classes(),
            model.spec().classes.len()
        )));
    }
    if noise.dim() != (x.nrows(), model.latent_dim()) {
        return Err(Error::Shape(format!(
            "noise shape {:?}, expected {:?}",
            noise.dim(),
            (x.nrows(), model.latent_dim())
        )));
    }
    enforce_condition(params, opts.unsafe_condition)?;
    let me = opts.max_exponent;
    let sat0 = g.saturations();

    let xv = g.constant(x.clone());
    let (mean, log_std) = model.record_encoder(g, xv)?;
    let z = g.reparam_sample(mean, log_std, g.constant(noise.clone()))?;
    let lp_post = g.gaussian_log_prob(z, mean, log_std)?;
    let zdim = model.latent_dim() as f64;
    let lp_prior = g.add_const(g.scale(g.sum_cols(g.square(z)), -0.5), -0.5 * zdim * LOG_2PI);

    let classes = &model.spec().classes;
    let mut lps = Vec::with_capacity(classes.len());
    for c in 0..classes.len() {
        let r = classes.range(c);
        let xc = g.constant(x.slice(s![.., r]).to_owned());
        lps.push(model.record_class_log_prob(g, c, z, xc)?);
    }

    let prior_power = g.exp_scaled(lp_prior, 1.0 - params.q, me);
    let mut recon = Vec::with_capacity(lps.len());
    let mut cum: Option<Var> = None;
    for (c, &lp) in lps.iter().enumerate() {
        let qc = params.class_qs[c];
        let weight = match cum {
            None => prior_power,
            Some(cv) => g.mul(prior_power, g.exp_scaled(cv, 1.0, me))?,
        };
        let term = g.scale(g.mul(weight, g.q_log_from_log(lp, qc, me))?, params.class_weights[c]);
        recon.push(term);
        let step = g.scale(lp, 1.0 - qc);
        cum = Some(match cum {
            None => step,
            Some(cv) => g.add(cv, step)?,
        });
    }
    let prior = g.scale(g.q_log_from_log(lp_prior, params.q, me), params.beta);
    let entropy = g.scale(g.q_log_from_log(lp_post, params.q, me), params.gamma);

    let mut objective = g.sub(prior, entropy)?;
    for &t in &recon {
        objective = g.add(objective, t)?;
    }
    let total = g.scale(g.mean_all(objective), -1.0);

    let batch_mean = |v: Var| g.value(v).mean().unwrap_or(0.0);
    let recon_per_class: Vec<f64> = recon.iter().map(|&v| batch_mean(v)).collect();
    let prior_term = batch_mean(prior);
    let entropy_term = batch_mean(entropy);
    let lp_values: Vec<Mat> = lps.iter().map(|&v| g.value(v).clone()).collect();
    let bracket_min = (0..x.nrows())
        .map(|i| {
            let row: Vec<f64> = lp_values.iter().map(|m| m[[i, 0]]).collect();
            bracket_from_log_likelihoods(params, &row, me)
        })
        .fold(f64::INFINITY, f64::min);

    let breakdown = LossBreakdown {
        total: g.scalar(total),
        recon_per_class,
        prior_term,
        entropy_term,
        bracket_min,
        saturation_count: g.saturations() - sat0,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NumericalAbort(format!(
            "non-finite loss {} ({} exponent saturations in the batch)",
            breakdown.total, breakdown.saturation_count
        )));
    }
    let report = check_sparsity_condition(params);
    if report.satisfied && !opts.unsafe_condition && bracket_min < 0.0 {
        return Err(Error::NumericalAbort(format!(
            "bracketed reconstruction quantity is negative ({bracket_min}) under a satisfied condition"
        )));
    }
    Ok(LossGraph { total, breakdown })
}

/// Negated Monte-Carlo estimate of the modified q-VAE objective, one latent
/// sample per row drawn as `mean + std * noise`.
pub fn qvae_loss(model: &QvaeModel, x: &Mat, noise: &Mat, params: &QParams, opts: &LossOptions) -> Result<LossBreakdown> {
    let g = Graph::new();
    Ok(record_loss(model, &g, x, noise, params, opts)?.breakdown)
}

/// Loss together with its gradient for every model parameter, in declaration order.
pub fn qvae_loss_and_grad(
    model: &QvaeModel,
    x: &Mat,
    noise: &Mat,
    params: &QParams,
    opts: &LossOptions,
) -> Result<(LossBreakdown, Vec<Mat>)> {
    let g = Graph::new();
    let lg = record_loss(model, &g, x, noise, params, opts)?;
    let grads = g.backward(lg.total)?.for_params(model.params());
    if grads.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::NumericalAbort(format!(
            "non-finite gradient ({} exponent saturations in the batch)",
            lg.breakdown.saturation_count
        )));
    }
    Ok((lg.breakdown, grads))
}
