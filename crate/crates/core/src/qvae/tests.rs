use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::diffnet::dist::{cb_log_prob, gaussian_log_prob};
use crate::diffnet::{Activation, Mat, NormOrder, Normalization};
use crate::error::Error;
use crate::testutil::{central_diff, max_rel_err};
use crate::tsallis::{q_log_from_log, DiagGaussian, QParams, DEFAULT_MAX_EXPONENT};

fn tiny_spec() -> QvaeSpec {
    QvaeSpec {
        classes: ObservationClasses::new(vec![
            ObservationClass { name: "p".into(), kind: ClassKind::DiagGaussian, width: 2 },
            ObservationClass { name: "img".into(), kind: ClassKind::ContinuousBernoulli, width: 8 },
        ])
        .unwrap(),
        latent_dim: 3,
        encoder_hidden: vec![6],
        decoder_hidden: vec![5],
        activation: Activation::Swish,
        normalization: Normalization::LayerNorm,
        norm_order: NormOrder::PostActivation,
    }
}

fn batch(rng: &mut ChaCha8Rng, n: usize) -> (Mat, Mat) {
    let x = Mat::from_shape_fn((n, 10), |(_, j)| {
        if j < 2 {
            rng.sample::<f64, _>(StandardNormal) * 0.5
        } else {
            rng.random_range(0.0..1.0)
        }
    });
    let noise = Mat::from_shape_simple_fn((n, 3), || rng.sample(StandardNormal));
    (x, noise)
}

fn stretch_params() -> QParams {
    QParams { q: 0.95, class_qs: vec![0.95, 0.999], class_weights: vec![50.0, 1.0], beta: 50.0, gamma: 3.0 }
}

struct Pieces {
    lp_post: f64,
    lp_prior: f64,
    lps: Vec<f64>,
}

// Graph-free single-datum evaluation built from the scalar density functions.
fn oracle_pieces(model: &QvaeModel, x: &[f64], noise: &[f64]) -> Pieces {
    let belief = model.encode(x).unwrap();
    let z: Vec<f64> = (0..belief.dim()).map(|d| belief.mean()[d] + belief.log_std()[d].exp() * noise[d]).collect();
    let lp_post = gaussian_log_prob(&belief, &z).unwrap();
    let lp_prior = gaussian_log_prob(&DiagGaussian::standard(z.len()), &z).unwrap();
    let lps = model
        .decode(&z)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(c, p)| {
            let r = model.spec().classes.range(c);
            match p {
                ClassParams::DiagGaussian(g) => gaussian_log_prob(g, &x[r]).unwrap(),
                ClassParams::ContinuousBernoulli { lambda } => cb_log_prob(lambda, &x[r]).unwrap(),
            }
        })
        .collect();
    Pieces { lp_post, lp_prior, lps }
}

fn oracle_objective(p: &Pieces, qp: &QParams) -> (Vec<f64>, f64, f64) {
    let mut recon = Vec::new();
    let mut log_weight = (1.0 - qp.q) * p.lp_prior;
    for (c, lp) in p.lps.iter().enumerate() {
        recon.push(qp.class_weights[c] * log_weight.exp() * q_log_from_log(*lp, qp.class_qs[c]).unwrap());
        log_weight += (1.0 - qp.class_qs[c]) * lp;
    }
    let prior = qp.beta * q_log_from_log(p.lp_prior, qp.q).unwrap();
    let entropy = qp.gamma * q_log_from_log(p.lp_post, qp.q).unwrap();
    (recon, prior, entropy)
}

#[test]
fn single_datum_loss_matches_straight_line_evaluation() {
    for seed in 0..3 {
        let model = QvaeModel::new(tiny_spec(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 40);
        let (x, noise) = batch(&mut rng, 1);
        let qp = stretch_params();
        let b = qvae_loss(&model, &x, &noise, &qp, &LossOptions::default()).unwrap();
        let pieces = oracle_pieces(&model, x.row(0).as_slice().unwrap(), noise.row(0).as_slice().unwrap());
        let (recon, prior, entropy) = oracle_objective(&pieces, &qp);
        for (a, o) in b.recon_per_class.iter().zip(&recon) {
            assert_relative_eq!(*a, *o, max_relative = 1e-9);
        }
        assert_relative_eq!(b.prior_term, prior, max_relative = 1e-9);
        assert_relative_eq!(b.entropy_term, entropy, max_relative = 1e-9);
        assert_relative_eq!(b.total, -(recon.iter().sum::<f64>() + prior - entropy), max_relative = 1e-9);
    }
}

#[test]
fn breakdown_parts_combine_to_total() {
    let model = QvaeModel::new(tiny_spec(), 2).unwrap();
    let (x, noise) = batch(&mut ChaCha8Rng::seed_from_u64(3), 17);
    let b = qvae_loss(&model, &x, &noise, &stretch_params(), &LossOptions::default()).unwrap();
    let combined = -(b.recon_per_class.iter().sum::<f64>() + b.prior_term - b.entropy_term);
    assert!((b.total - combined).abs() <= 1e-10 * b.total.abs().max(1.0));
}

fn beta_vae_oracle(model: &QvaeModel, x: &Mat, noise: &Mat, beta: f64, weights: &[f64]) -> f64 {
    let mut sum = 0.0;
    for i in 0..x.nrows() {
        let p = oracle_pieces(model, x.row(i).as_slice().unwrap(), noise.row(i).as_slice().unwrap());
        let recon: f64 = p.lps.iter().zip(weights).map(|(lp, w)| w * lp).sum();
        sum += recon - beta * (p.lp_post - p.lp_prior);
    }
    -sum / x.nrows() as f64
}

#[test]
fn exact_q_is_the_beta_vae_bound() {
    for (seed, beta) in [(0, 1.0), (1, 0.3), (2, 4.0)] {
        let model = QvaeModel::new(tiny_spec(), seed).unwrap();
        let (x, noise) = batch(&mut ChaCha8Rng::seed_from_u64(seed + 9), 12);
        let weights = vec![1.0, 1.0];
        let qp = QParams::beta_vae(beta, weights.clone());
        let b = qvae_loss(&model, &x, &noise, &qp, &LossOptions::default()).unwrap();
        let oracle = beta_vae_oracle(&model, &x, &noise, beta, &weights);
        assert!((b.total - oracle).abs() <= 1e-10 * oracle.abs(), "{} vs {}", b.total, oracle);
        assert_eq!(b.bracket_min, f64::INFINITY);
    }
}

#[test]
fn near_one_q_approaches_the_exact_bound() {
    for seed in 0..3 {
        let model = QvaeModel::new(tiny_spec(), seed).unwrap();
        let (x, noise) = batch(&mut ChaCha8Rng::seed_from_u64(seed + 20), 16);
        let exact = qvae_loss(&model, &x, &noise, &QParams::beta_vae(1.0, vec![1.0, 1.0]), &LossOptions::default())
            .unwrap()
            .total;
        let q = 1.0 - 1e-6;
        let near = QParams { q, class_qs: vec![q, q], class_weights: vec![1.0, 1.0], beta: 1.0, gamma: 1.0 };
        let approx = qvae_loss(&model, &x, &noise, &near, &LossOptions::default()).unwrap().total;
        assert!((approx - exact).abs() <= 1e-3 * exact.abs(), "{approx} vs {exact}");
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let mut model = QvaeModel::new(tiny_spec(), seed).unwrap();
        let (x, noise) = batch(&mut ChaCha8Rng::seed_from_u64(seed + 60), 4);
        let qp = stretch_params();
        let opts = LossOptions::default();
        let (_, grads) = qvae_loss_and_grad(&model, &x, &noise, &qp, &opts).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
        let flat = model.params().flatten();
        let numeric = central_diff(
            |theta| {
                model.params_mut().assign_flat(theta);
                qvae_loss(&model, &x, &noise, &qp, &opts).unwrap().total
            },
            &flat,
            1e-5,
        );
        let err = max_rel_err(&analytic, &numeric, 1e-3);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn condition_is_enforced_unless_unsafe() {
    let model = QvaeModel::new(tiny_spec(), 0).unwrap();
    let (x, noise) = batch(&mut ChaCha8Rng::seed_from_u64(1), 3);
    let mut qp = stretch_params();
    qp.beta = 10.0;
    match qvae_loss(&model, &x, &noise, &qp, &LossOptions::default()) {
        Err(Error::ConditionViolated { chain }) => assert_eq!(chain.len(), 3),
        other => panic!("expected a condition violation, got {other:?}"),
    }
    let opts = LossOptions { unsafe_condition: true, ..LossOptions::default() };
    assert!(qvae_loss(&model, &x, &noise, &qp, &opts).is_ok());
}

#[test]
fn empty_batch_and_bad_noise_are_rejected() {
    let model = QvaeModel::new(tiny_spec(), 0).unwrap();
    let qp = stretch_params();
    let opts = LossOptions::default();
    assert!(qvae_loss(&model, &Mat::zeros((0, 10)), &Mat::zeros((0, 3)), &qp, &opts).is_err());
    assert!(matches!(qvae_loss(&model, &Mat::zeros((2, 10)), &Mat::zeros((2, 4)), &qp, &opts), Err(Error::Shape(_))));
}

#[test]
fn bracket_with_equality_chain_is_first_term_only() {
    let rows = [
        QParams { q: 0.99, class_qs: vec![0.99, 0.999], class_weights: vec![10.0, 1.0], beta: 10.0, gamma: 3.0 },
        stretch_params(),
    ];
    for qp in rows {
        for lps in [[-3.0, 120.0], [4.0, -800.0], [0.0, 0.0]] {
            let first = qp.class_weights[1] / (1.0 - qp.class_qs[1])
                * ((1.0 - qp.class_qs[0]) * lps[0] + (1.0 - qp.class_qs[1]) * lps[1]).exp();
            let b = bracket_from_log_likelihoods(&qp, &lps, DEFAULT_MAX_EXPONENT);
            assert_relative_eq!(b, first, max_relative = 1e-12);
            assert!(b >= 0.0);
        }
    }
}

#[test]
fn bracket_at_vanishing_likelihood_keeps_the_leading_gap() {
    let qp = QParams { q: 0.9, class_qs: vec![0.95, 0.99], class_weights: vec![1.0, 0.5], beta: 4.0, gamma: 1.0 };
    let a0 = 4.0 / 0.1;
    let a1 = 1.0 / 0.05;
    let b = bracket_from_log_likelihoods(&qp, &[-1e4, -1e4], DEFAULT_MAX_EXPONENT);
    assert!(b >= a0 - a1 - 1e-9 && a0 - a1 > 0.0);
}

#[test]
fn bracket_equals_reconstruction_sum_plus_prior_coefficient() {
    let qp = QParams { q: 0.9, class_qs: vec![0.95, 0.99], class_weights: vec![1.0, 0.5], beta: 4.0, gamma: 1.0 };
    for lps in [[-2.0, 3.0], [1.5, -40.0], [0.2, 0.1]] {
        let recon = reconstruction_from_log_likelihoods(&qp, &lps, DEFAULT_MAX_EXPONENT);
        let b = bracket_from_log_likelihoods(&qp, &lps, DEFAULT_MAX_EXPONENT);
        assert_relative_eq!(b, recon + qp.beta / (1.0 - qp.q), max_relative = 1e-12);
    }
}

#[test]
fn bracket_term_uses_decoder_likelihoods() {
    let model = QvaeModel::new(tiny_spec(), 5).unwrap();
    let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.13).fract()).collect();
    let z = [0.3, -0.2, 0.9];
    let lps = class_log_likelihoods(&model, &x, &z).unwrap();
    let qp = stretch_params();
    assert_eq!(bracket_term(&model, &x, &z, &qp).unwrap(), bracket_from_log_likelihoods(&qp, &lps, DEFAULT_MAX_EXPONENT));
    assert!(bracket_term(&model, &x, &z, &qp).unwrap() >= 0.0);
}

#[test]
fn raising_a_leading_class_q_alone_can_raise_the_reconstruction_sum() {
    let at = |q1: f64| {
        let qp = QParams { q: 0.5, class_qs: vec![q1, 0.999], class_weights: vec![1.0, 1.0], beta: 1.0, gamma: 1.0 };
        reconstruction_from_log_likelihoods(&qp, &[-5.0, 10.0], DEFAULT_MAX_EXPONENT)
    };
    assert!(at(0.9) > at(0.5));
}

fn chain_params(q1: f64, q2: f64) -> QParams {
    QParams { q: q1, class_qs: vec![q1, q2], class_weights: vec![2.0, 1.0], beta: 2.0, gamma: 1.0 }
}

proptest! {
    #[test]
    fn raising_the_last_class_q_never_raises_the_reconstruction_sum(
        lp1 in -30.0f64..10.0, lp2 in -300.0f64..60.0,
        q1 in 0.3f64..0.99, t in 0.0f64..1.0, u in 0.0f64..1.0,
    ) {
        let q2 = q1 + t * (0.999 - q1);
        let q2b = q2 + u * (0.9999 - q2);
        let lo = reconstruction_from_log_likelihoods(&chain_params(q1, q2), &[lp1, lp2], DEFAULT_MAX_EXPONENT);
        let hi = reconstruction_from_log_likelihoods(&chain_params(q1, q2b), &[lp1, lp2], DEFAULT_MAX_EXPONENT);
        prop_assert!(hi <= lo + 1e-12 * lo.abs().max(1.0));
    }

    #[test]
    fn raising_a_shared_q_never_raises_the_reconstruction_sum(
        lp1 in -30.0f64..10.0, lp2 in -300.0f64..60.0,
        r in 0.3f64..0.99, u in 0.0f64..1.0,
    ) {
        let r2 = r + u * (0.9999 - r);
        let lo = reconstruction_from_log_likelihoods(&chain_params(r, r), &[lp1, lp2], DEFAULT_MAX_EXPONENT);
        let hi = reconstruction_from_log_likelihoods(&chain_params(r2, r2), &[lp1, lp2], DEFAULT_MAX_EXPONENT);
        prop_assert!(hi <= lo + 1e-12 * lo.abs().max(1.0));
    }

    #[test]
    fn bracket_is_nonnegative_under_the_condition(
        lp1 in -200.0f64..50.0, lp2 in -3000.0f64..500.0,
        q in 0.5f64..0.99, s in 0.0f64..1.0, t in 0.0f64..1.0,
        z1 in 0.1f64..50.0, shrink1 in 0.0f64..1.0, shrink2 in 0.0f64..1.0,
    ) {
        let q1 = q + s * (0.999 - q);
        let q2 = q1 + t * (0.9999 - q1);
        let beta = z1 * (1.0 - q) / (1.0 - q1) / (1.0 - 0.9 * shrink1);
        let z2 = z1 * (1.0 - q2) / (1.0 - q1) * (1.0 - 0.9 * shrink2);
        let qp = QParams { q, class_qs: vec![q1, q2], class_weights: vec![z1, z2], beta, gamma: 1.0 };
        prop_assert!(crate::tsallis::check_sparsity_condition(&qp).satisfied);
        prop_assert!(bracket_from_log_likelihoods(&qp, &[lp1, lp2], DEFAULT_MAX_EXPONENT) >= 0.0);
    }
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, seed: 11, learning_rate: 3e-3, ..TrainConfig::default() }
}

fn toy_data(n: usize) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    Mat::from_shape_fn((n, 10), |(_, j)| if j < 2 { rng.random_range(-1.0..1.0) } else { rng.random_range(0.0..1.0) })
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let mut model = QvaeModel::new(tiny_spec(), 1).unwrap();
    let before = model.to_bytes().unwrap();
    let log = train(&mut model, &toy_data(20), &stretch_params(), &train_cfg(0), |_| {}).unwrap();
    assert!(log.is_empty());
    assert_eq!(model.to_bytes().unwrap(), before);
}

#[test]
fn training_is_deterministic_and_reduces_the_loss() {
    let data = toy_data(40);
    let run = || {
        let mut model = QvaeModel::new(tiny_spec(), 1).unwrap();
        let log = train(&mut model, &data, &stretch_params(), &train_cfg(30), |_| {}).unwrap();
        (model.to_bytes().unwrap(), log)
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert!(log_a.last().unwrap().total < log_a[0].total);
    assert!(log_a.iter().all(|r| r.bracket_min >= 0.0));
    let line = log_a[0].log_line();
    for key in ["epoch=1 ", "total=", "recon_c1=", "recon_c2=", "prior=", "entropy=", "bracket_min=", "saturation_count="] {
        assert!(line.contains(key), "{line}");
    }
}

#[test]
fn non_finite_data_aborts_and_keeps_last_good_parameters() {
    let mut data = toy_data(16);
    data[[9, 4]] = f64::NAN;
    let mut model = QvaeModel::new(tiny_spec(), 1).unwrap();
    let before = model.to_bytes().unwrap();
    let cfg = TrainConfig { batch_size: 16, ..train_cfg(3) };
    let abort = train(&mut model, &data, &stretch_params(), &cfg, |_| {}).unwrap_err();
    assert!(matches!(abort.error, Error::NumericalAbort(_)));
    assert!(abort.records.is_empty());
    assert_eq!(model.to_bytes().unwrap(), before);
}
