//! Closed-form and tree prices used as independent references.

use statrs::distribution::{ContinuousCDF, Normal};

/// Cox–Ross–Rubinstein American put with `steps` binomial periods.
pub fn crr_american_put(s0: f64, strike: f64, rate: f64, vol: f64, maturity: f64, steps: usize) -> f64 {
    let dt = maturity / steps as f64;
    let up = (vol * dt.sqrt()).exp();
    let down = 1.0 / up;
    let growth = (rate * dt).exp();
    let q = (growth - down) / (up - down);
    let disc = 1.0 / growth;
    // spot(n, k) = s0 · up^(2k − n)
    let powers: Vec<f64> = (0..=2 * steps).map(|m| s0 * up.powi(m as i32 - steps as i32)).collect();
    let spot = |n: usize, k: usize| powers[steps + 2 * k - n];
    let mut values: Vec<f64> = (0..=steps).map(|k| (strike - spot(steps, k)).max(0.0)).collect();
    for n in (0..steps).rev() {
        for k in 0..=n {
            let cont = disc * (q * values[k + 1] + (1.0 - q) * values[k]);
            values[k] = cont.max(strike - spot(n, k));
        }
    }
    values[0]
}

/// Black–Scholes European put.
pub fn black_scholes_put(s0: f64, strike: f64, rate: f64, vol: f64, maturity: f64) -> f64 {
    let n = Normal::standard();
    let sd = vol * maturity.sqrt();
    let d1 = ((s0 / strike).ln() + (rate + 0.5 * vol * vol) * maturity) / sd;
    let d2 = d1 - sd;
    strike * (-rate * maturity).exp() * n.cdf(-d2) - s0 * n.cdf(-d1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_prices() {
        assert!((crr_american_put(100.0, 100.0, 0.05, 0.2, 1.0, 2000) - 6.09).abs() < 0.01);
        assert!((black_scholes_put(100.0, 100.0, 0.0, 0.2, 1.0) - 7.9656).abs() < 1e-3);
        // Put–call parity at zero rate: C − P = S − K.
        let p = black_scholes_put(110.0, 100.0, 0.0, 0.3, 0.5);
        assert!(p > 0.0 && p < 100.0);
    }

    #[test]
    fn american_dominates_european() {
        let am = crr_american_put(90.0, 100.0, 0.05, 0.25, 1.0, 1000);
        let eu = black_scholes_put(90.0, 100.0, 0.05, 0.25, 1.0);
        assert!(am > eu);
        assert!(am >= 10.0);
    }
}
