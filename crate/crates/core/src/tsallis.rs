//! q-deformed logarithm and friends from Tsallis statistics.
//!
//! Every function treats `q == 1` through an exact branch (natural log /
//! exponential / Shannon KL) so that downstream objectives collapse to their
//! classical counterparts without evaluating limits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound on `|(1 - q) * ln p|` before the exponential is evaluated.
pub const DEFAULT_MAX_EXPONENT: f64 = 50.0;

/// Lower and upper clamp applied to every log standard deviation.
pub const LOG_STD_MIN: f64 = -6.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Relative slack used when comparing neighbouring terms of the condition chain.
pub const CHAIN_REL_TOL: f64 = 1e-9;

fn check_q(q: f64) -> Result<()> {
    if !q.is_finite() {
        return Err(Error::Domain(format!("q must be finite, got {q}")));
    }
    Ok(())
}

/// `ln_q(x)`: `ln x` at `q = 1`, `(x^(1-q) - 1) / (1 - q)` otherwise.
pub fn q_log(x: f64, q: f64) -> Result<f64> {
    check_q(q)?;
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("q_log requires finite x > 0, got {x}")));
    }
    if q == 1.0 {
        return Ok(x.ln());
    }
    let k = 1.0 - q;
    Ok((k * x.ln()).exp_m1() / k)
}

/// `ln_q(p)` from `ell = ln p` without ever forming `p`.
pub fn q_log_from_log(ell: f64, q: f64) -> Result<f64> {
    q_log_from_log_clamped(ell, q, DEFAULT_MAX_EXPONENT).map(|(v, _)| v)
}

/// Like [`q_log_from_log`] but with an explicit exponent clamp. The second
/// element reports whether `(1 - q) * ell` had to be clamped.
pub fn q_log_from_log_clamped(ell: f64, q: f64, max_exponent: f64) -> Result<(f64, bool)> {
    check_q(q)?;
    if !ell.is_finite() {
        return Err(Error::Domain(format!("q_log_from_log requires finite input, got {ell}")));
    }
    if q == 1.0 {
        return Ok((ell, false));
    }
    let k = 1.0 - q;
    let e = k * ell;
    let clamped = e.clamp(-max_exponent, max_exponent);
    Ok((clamped.exp_m1() / k, clamped != e))
}

/// Inverse of [`q_log`] in its first argument.
pub fn q_exp(y: f64, q: f64) -> Result<f64> {
    check_q(q)?;
    if !y.is_finite() {
        return Err(Error::Domain(format!("q_exp requires finite y, got {y}")));
    }
    if q == 1.0 {
        return Ok(y.exp());
    }
    let k = 1.0 - q;
    let base = 1.0 + k * y;
    if base <= 0.0 {
        return Err(Error::Domain(format!(
            "q_exp undefined: 1 + (1-q)y = {base} <= 0 (y={y}, q={q})"
        )));
    }
    Ok(((k * y).ln_1p() / k).exp())
}

/// q-log of a product from the q-logs of its factors.
pub fn pseudo_add(lq1: f64, lq2: f64, q: f64) -> f64 {
    lq1 + lq2 + (1.0 - q) * lq1 * lq2
}

/// Diagonal Gaussian parameterised by mean and log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagGaussian {
    /// Builds the distribution; `log_std` is clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::Shape(format!(
                "mean has {} dims but log_std has {}",
                mean.len(),
                log_std.len()
            )));
        }
        if mean.iter().chain(log_std.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("DiagGaussian parameters must be finite".into()));
        }
        let log_std = log_std.into_iter().map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], log_std: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn std(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_std.iter().map(|s| s.exp())
    }
}

/// Closed-form Tsallis divergence `KL_q(p1 || p2)` between diagonal Gaussians.
///
/// For `q < 1` this is `(1 - prod_d I_d) / (1 - q)` with
/// `I_d = int p1_d^q p2_d^(1-q)`, which for Gaussians reduces to
/// `s1^(1-q) s2^q / s_bar * exp(-q(1-q) dmu^2 / (2 s_bar^2))`,
/// `s_bar^2 = q s2^2 + (1-q) s1^2`.
pub fn tsallis_kl_diag_gaussian(p1: &DiagGaussian, p2: &DiagGaussian, q: f64) -> Result<f64> {
    if p1.dim() != p2.dim() {
        return Err(Error::Shape(format!(
            "divergence between {}-dim and {}-dim Gaussians",
            p1.dim(),
            p2.dim()
        )));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("divergence requires 0 < q <= 1, got {q}")));
    }
    let pairs = p1
        .mean
        .iter()
        .zip(&p1.log_std)
        .zip(p2.mean.iter().zip(&p2.log_std));
    if q == 1.0 {
        let kl = pairs
            .map(|((&m1, &ls1), (&m2, &ls2))| {
                let r = (2.0 * (ls1 - ls2)).exp();
                let d = (m1 - m2) / ls2.exp();
                0.5 * (r + d * d - 1.0) - (ls1 - ls2)
            })
            .sum::<f64>();
        return Ok(kl.max(0.0));
    }
    let k = 1.0 - q;
    // Accumulate ln prod I_d so high-dimensional products do not underflow.
    let log_overlap: f64 = pairs
        .map(|((&m1, &ls1), (&m2, &ls2))| {
            let v1 = (2.0 * ls1).exp();
            let v2 = (2.0 * ls2).exp();
            let vbar = q * v2 + k * v1;
            let dm = m1 - m2;
            k * ls1 + q * ls2 - 0.5 * vbar.ln() - q * k * dm * dm / (2.0 * vbar)
        })
        .sum();
    Ok((-log_overlap.exp_m1() / k).max(0.0))
}

/// Hyperparameters of the modified q-VAE objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QParams {
    pub q: f64,
    pub class_qs: Vec<f64>,
    pub class_weights: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
}

impl QParams {
    /// Standard or beta-VAE settings: every deformation parameter equals one
    /// and the entropy weight matches `beta`.
    pub fn beta_vae(beta: f64, class_weights: Vec<f64>) -> Self {
        Self {
            q: 1.0,
            class_qs: vec![1.0; class_weights.len()],
            class_weights,
            beta,
            gamma: beta,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_qs.len()
    }

    pub fn is_exact(&self) -> bool {
        self.q == 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.q > 0.0 && self.q <= 1.0) {
            return bad(format!("q must lie in (0, 1], got {}", self.q));
        }
        if self.class_qs.is_empty() {
            return bad("at least one observation class is required".into());
        }
        if self.class_qs.len() != self.class_weights.len() {
            return bad(format!(
                "{} class q values but {} class weights",
                self.class_qs.len(),
                self.class_weights.len()
            ));
        }
        if let Some(w) = self.class_weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return bad(format!("class weights must be positive, got {w}"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) || !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("beta and gamma must be positive (beta={}, gamma={})", self.beta, self.gamma));
        }
        if self.is_exact() {
            if self.class_qs.iter().any(|&qc| qc != 1.0) {
                return bad("with q = 1 every class q must also equal 1".into());
            }
            return Ok(());
        }
        let mut prev = self.q;
        for &qc in &self.class_qs {
            if !(qc >= prev && qc < 1.0) {
                return bad(format!(
                    "class q values must be nondecreasing in [q, 1) (q={}, class_qs={:?})",
                    self.q, self.class_qs
                ));
            }
            prev = qc;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub satisfied: bool,
    /// `beta, (1-q)/(1-q_1) zeta_1, ..., (1-q)/(1-q_C) zeta_C`; empty at `q = 1`.
    pub chain_values: Vec<f64>,
    /// Set when `q = 1`: the objective is the ordinary (beta-)VAE and the
    /// condition carries no content.
    pub exact_vae: bool,
}

/// Evaluates the chain `beta >= (1-q)/(1-q_1) zeta_1 >= ... >= (1-q)/(1-q_C) zeta_C`.
pub fn check_sparsity_condition(params: &QParams) -> SparsityReport {
    if params.is_exact() {
        return SparsityReport { satisfied: true, chain_values: Vec::new(), exact_vae: true };
    }
    let k = 1.0 - params.q;
    let mut chain = Vec::with_capacity(params.num_classes() + 1);
    chain.push(params.beta);
    chain.extend(
        params
            .class_qs
            .iter()
            .zip(&params.class_weights)
            .map(|(&qc, &zc)| k / (1.0 - qc) * zc),
    );
    let satisfied = chain
        .windows(2)
        .all(|w| w[1] <= w[0] + CHAIN_REL_TOL * w[0].abs().max(w[1].abs()));
    SparsityReport { satisfied, chain_values: chain, exact_vae: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::integrate;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn q_log_examples() {
        assert_eq!(q_log(1.0, 0.7).unwrap(), 0.0);
        assert_relative_eq!(q_log(4.0, 0.5).unwrap(), 2.0, max_relative = 1e-15);
        assert_relative_eq!(q_log(std::f64::consts::E, 1.0).unwrap(), 1.0, max_relative = 1e-15);
        let tiny = q_log(1e-300, 0.5).unwrap();
        assert!(tiny >= -2.0 && tiny < -1.999_999);
    }

    #[test]
    fn q_log_rejects_bad_domain() {
        for x in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(q_log(x, 0.5), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn q_log_from_log_examples() {
        assert_eq!(q_log_from_log(0.0, 0.3).unwrap(), 0.0);
        assert_relative_eq!(q_log_from_log(4f64.ln(), 0.5).unwrap(), 2.0, max_relative = 1e-14);
        // (e - 1) / 0.001 evaluated in extended precision.
        assert_relative_eq!(q_log_from_log(1000.0, 0.999).unwrap(), 1718.281828459045, max_relative = 1e-12);
        assert_eq!(q_log_from_log(-3.5, 1.0).unwrap(), -3.5);
        assert!(q_log_from_log(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn q_log_from_log_saturates() {
        let (v, sat) = q_log_from_log_clamped(1e6, 0.5, 50.0).unwrap();
        assert!(sat);
        assert_relative_eq!(v, 50f64.exp_m1() / 0.5, max_relative = 1e-14);
        let (_, sat) = q_log_from_log_clamped(10.0, 0.5, 50.0).unwrap();
        assert!(!sat);
    }

    #[test]
    fn q_exp_examples() {
        assert_relative_eq!(q_exp(0.0, 0.5).unwrap(), 1.0);
        assert_relative_eq!(q_exp(2.0, 0.5).unwrap(), 4.0, max_relative = 1e-14);
        assert_relative_eq!(q_exp(1.0, 1.0).unwrap(), std::f64::consts::E, max_relative = 1e-15);
        assert!(q_exp(-2.5, 0.5).is_err());
    }

    #[test]
    fn pseudo_add_examples() {
        assert_relative_eq!(pseudo_add(2.0, 4.0, 0.5), 10.0);
        assert_relative_eq!(q_log(36.0, 0.5).unwrap(), 10.0, max_relative = 1e-14);
        assert_eq!(pseudo_add(0.0, 1.7, 0.2), 1.7);
        assert_eq!(pseudo_add(1.5, 2.5, 1.0), 4.0);
    }

    fn gauss(m: f64, ls: f64) -> DiagGaussian {
        DiagGaussian::new(vec![m], vec![ls]).unwrap()
    }

    #[test]
    fn divergence_examples() {
        let p = DiagGaussian::new(vec![0.3, -1.0], vec![0.1, -0.4]).unwrap();
        assert_eq!(tsallis_kl_diag_gaussian(&p, &p, 0.5).unwrap(), 0.0);
        assert_relative_eq!(
            tsallis_kl_diag_gaussian(&gauss(0.0, 0.0), &gauss(1.0, 0.0), 1.0).unwrap(),
            0.5,
            max_relative = 1e-15
        );
        // Frozen from the quadrature oracle below.
        assert_relative_eq!(
            tsallis_kl_diag_gaussian(&gauss(0.0, 0.0), &gauss(1.0, 0.0), 0.5).unwrap(),
            0.235_006_194_830_809,
            max_relative = 1e-12
        );
        let other = DiagGaussian::standard(3);
        assert!(matches!(tsallis_kl_diag_gaussian(&p, &other, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn divergence_matches_quadrature_oracle() {
        let cases: [(f64, f64, f64, f64, f64); 3] = [(0.0, 0.0, 1.0, 0.0, 0.5), (0.3, -0.5, -0.7, 0.4, 0.3), (1.2, 0.2, 0.9, -0.3, 0.99)];
        for (m1, l1, m2, l2, q) in cases {
            let (s1, s2) = (f64::exp(l1), f64::exp(l2));
            let pdf = |x: f64, m: f64, s: f64| {
                (-0.5 * ((x - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
            };
            let lo = m1.min(m2) - 40.0 * s1.max(s2);
            let hi = m1.max(m2) + 40.0 * s1.max(s2);
            let overlap = integrate(|x| pdf(x, m1, s1).powf(q) * pdf(x, m2, s2).powf(1.0 - q), lo, hi, 1e-14);
            let oracle = (1.0 - overlap) / (1.0 - q);
            let closed = tsallis_kl_diag_gaussian(&gauss(m1, l1), &gauss(m2, l2), q).unwrap();
            assert_relative_eq!(closed, oracle, max_relative = 1e-8);
        }
    }

    #[test]
    fn diag_gaussian_clamps_and_checks() {
        let g = DiagGaussian::new(vec![0.0, 0.0], vec![-10.0, 5.0]).unwrap();
        assert_eq!(g.log_std(), &[LOG_STD_MIN, LOG_STD_MAX]);
        assert!(DiagGaussian::new(vec![0.0], vec![0.0, 1.0]).is_err());
        assert!(DiagGaussian::new(vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn sparsity_condition_examples() {
        let highway = QParams {
            q: 0.99,
            class_qs: vec![0.99, 0.999],
            class_weights: vec![10.0, 1.0],
            beta: 10.0,
            gamma: 3.0,
        };
        let r = check_sparsity_condition(&highway);
        assert!(r.satisfied && !r.exact_vae);
        for (v, e) in r.chain_values.iter().zip([10.0, 10.0, 10.0]) {
            assert_relative_eq!(*v, e, max_relative = 1e-12);
        }

        let reach = QParams {
            q: 0.95,
            class_qs: vec![0.95, 0.999],
            class_weights: vec![50.0, 1.0],
            beta: 50.0,
            gamma: 3.0,
        };
        let r = check_sparsity_condition(&reach);
        assert!(r.satisfied);
        for (v, e) in r.chain_values.iter().zip([50.0, 50.0, 50.0]) {
            assert_relative_eq!(*v, e, max_relative = 1e-12);
        }

        let weak = QParams { beta: 5.0, ..highway };
        let r = check_sparsity_condition(&weak);
        assert!(!r.satisfied);
        assert_eq!(r.chain_values[0], 5.0);

        let vae = QParams::beta_vae(1.0, vec![50.0, 1.0]);
        let r = check_sparsity_condition(&vae);
        assert!(r.satisfied && r.exact_vae && r.chain_values.is_empty());
    }

    #[test]
    fn qparams_validation() {
        let ok = QParams { q: 0.9, class_qs: vec![0.9, 0.99], class_weights: vec![1.0, 1.0], beta: 1.0, gamma: 1.0 };
        assert!(ok.validate().is_ok());
        let unordered = QParams { class_qs: vec![0.99, 0.95], ..ok.clone() };
        assert!(unordered.validate().is_err());
        let below_q = QParams { class_qs: vec![0.8, 0.99], ..ok.clone() };
        assert!(below_q.validate().is_err());
        let one = QParams { class_qs: vec![0.9, 1.0], ..ok.clone() };
        assert!(one.validate().is_err());
        let mismatch = QParams { class_weights: vec![1.0], ..ok.clone() };
        assert!(mismatch.validate().is_err());
        let exact_bad = QParams { q: 1.0, ..ok.clone() };
        assert!(exact_bad.validate().is_err());
        assert!(QParams::beta_vae(0.3, vec![50.0, 1.0]).validate().is_ok());
    }

    proptest! {
        #[test]
        fn monotone_in_q(lx in -20.0f64..20.0, qa in 0.01f64..1.0, dq in 0.0f64..1.0) {
            let x = lx.exp();
            let qb = qa + dq * (1.0 - qa);
            prop_assume!(qb > qa);
            let a = q_log(x, qa).unwrap();
            let b = q_log(x, qb).unwrap();
            prop_assert!(a >= b - 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn q_exp_round_trip(lx in -20.0f64..20.0, q in 0.05f64..1.0) {
            let x = lx.exp();
            let y = q_log(x, q).unwrap();
            let back = q_log(q_exp(y, q).unwrap(), q).unwrap();
            prop_assert!((back - y).abs() <= 1e-12 * y.abs().max(1e-300) + 1e-15);
        }

        #[test]
        fn reciprocal_rule(lx in -15.0f64..15.0, q in 0.05f64..1.0) {
            let x = lx.exp();
            let lhs = q_log(1.0 / x, q).unwrap();
            let rhs = -x.powf(q - 1.0) * q_log(x, q).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1e-12));
        }
    }
}
