//! Helpers shared by the integration and acceptance tests: slow, obviously
//! correct reference implementations that the fast library code is checked
//! against.

#![allow(dead_code)]

/// Density of a normal with the given mean and variance.
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let z = (x - mean) * (x - mean) / (2.0 * var);
    (-z).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Composite Simpson quadrature on [a, b] with n (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(
        n >= 2 && n.is_multiple_of(2),
        "simpson needs an even interval count"
    );
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Central finite-difference gradient of a scalar function of a flat
/// parameter vector.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}
