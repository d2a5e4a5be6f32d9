//! Checks the consensus pair weights against direct numerical integration.
//!
//! The library derives its loss weights by integrating a latent consensus
//! score out of a product of Gaussians in closed form. Here the same
//! integral is done the slow way — Simpson quadrature over the latent
//! variable — and the resulting negative log density must equal the
//! closed-form quadratic surface up to one additive constant shared by all
//! evaluation points.

mod common;

use common::{normal_pdf, simpson};
use noteacher::consensus::{labeled_quadratic, unlabeled_quadratic, ConsensusWeights};
use noteacher::rng::StreamRng;

/// -log of the joint density of `obs` once the shared latent consensus is
/// integrated out numerically. `vars[i]` is observation i's noise variance.
fn quadrature_nll(obs: &[f64], vars: &[f64]) -> f64 {
    let precision: f64 = vars.iter().map(|v| 1.0 / v).sum();
    let center: f64 = obs.iter().zip(vars).map(|(&o, &v)| o / v).sum::<f64>() / precision;
    let sd = precision.sqrt().recip();
    let integrand = |c: f64| -> f64 {
        obs.iter()
            .zip(vars)
            .map(|(&o, &v)| normal_pdf(o, c, v))
            .product()
    };
    // The integrand is a scaled Gaussian in the consensus, so +/-15 posterior
    // standard deviations capture it to well below the test tolerance.
    let integral = simpson(integrand, center - 15.0 * sd, center + 15.0 * sd, 8192);
    -integral.ln()
}

/// The additive constant the quadratic surface drops: for M observers,
/// (1/2) * ((M-1) ln 2*pi + sum ln var_i + ln sum 1/var_i).
fn dropped_constant(vars: &[f64]) -> f64 {
    let m = vars.len() as f64;
    let log_vars: f64 = vars.iter().map(|v| v.ln()).sum();
    let precision: f64 = vars.iter().map(|v| 1.0 / v).sum();
    0.5 * ((m - 1.0) * (2.0 * std::f64::consts::PI).ln() + log_vars + precision.ln())
}

#[test]
fn labeled_weights_reproduce_the_integrated_density() {
    let mut rng = StreamRng::new(1724, "quadrature");
    for _ in 0..20 {
        let s1 = rng.uniform(0.05, 4.0);
        let s2 = rng.uniform(0.05, 4.0);
        let sy = rng.uniform(0.05, 4.0);
        let w = ConsensusWeights::from_variances(s1, s2, sy).unwrap();
        let konst = dropped_constant(&[s1, s2, sy]);
        for _ in 0..10 {
            let f1 = rng.uniform(-2.0, 2.0);
            let f2 = rng.uniform(-2.0, 2.0);
            let y = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
            let by_quadrature = quadrature_nll(&[f1, f2, y], &[s1, s2, sy]);
            let by_weights = labeled_quadratic(&w, f1, f2, y) + konst;
            assert!(
                (by_quadrature - by_weights).abs() < 1e-7,
                "vars ({s1}, {s2}, {sy}) obs ({f1}, {f2}, {y}): \
                 quadrature {by_quadrature} vs closed form {by_weights}"
            );
        }
    }
}

#[test]
fn unlabeled_weight_reproduces_the_integrated_density() {
    let mut rng = StreamRng::new(1725, "quadrature");
    for _ in 0..20 {
        let s1 = rng.uniform(0.05, 4.0);
        let s2 = rng.uniform(0.05, 4.0);
        let w = ConsensusWeights::from_variances(s1, s2, 1.0).unwrap();
        let konst = dropped_constant(&[s1, s2]);
        for _ in 0..10 {
            let f1 = rng.uniform(-2.0, 2.0);
            let f2 = rng.uniform(-2.0, 2.0);
            let by_quadrature = quadrature_nll(&[f1, f2], &[s1, s2]);
            let by_weights = unlabeled_quadratic(&w, f1, f2) + konst;
            assert!(
                (by_quadrature - by_weights).abs() < 1e-7,
                "vars ({s1}, {s2}) obs ({f1}, {f2}): \
                 quadrature {by_quadrature} vs closed form {by_weights}"
            );
        }
    }
}

/// Even without trusting the dropped-constant formula, differences of the
/// integrated density across evaluation points must match differences of
/// the quadratic surface exactly.
#[test]
fn surface_differences_are_constant_free() {
    let (s1, s2, sy) = (0.25, 0.5, 0.125);
    let w = ConsensusWeights::from_variances(s1, s2, sy).unwrap();
    let pts = [
        (0.1, 0.9, 1.0),
        (0.4, 0.3, 0.0),
        (0.95, 0.85, 1.0),
        (0.2, 0.7, 0.0),
    ];
    let offsets: Vec<f64> = pts
        .iter()
        .map(|&(f1, f2, y)| {
            quadrature_nll(&[f1, f2, y], &[s1, s2, sy]) - labeled_quadratic(&w, f1, f2, y)
        })
        .collect();
    for pair in offsets.windows(2) {
        assert!(
            (pair[0] - pair[1]).abs() < 1e-8,
            "additive offset drifted: {offsets:?}"
        );
    }
}
