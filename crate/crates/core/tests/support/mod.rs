//! Test-only reference implementations, kept independent of the library's
//! computation paths.

use std::f64::consts::PI;

/// ln of the subsampled-Gaussian likelihood ratio, written out directly.
fn log_mix_ratio(x: f64, q: f64, sigma: f64) -> f64 {
    let shift = (2.0 * x - 1.0) / (2.0 * sigma * sigma);
    if q >= 1.0 {
        return shift;
    }
    let stay = (1.0 - q).ln();
    let move_ = q.ln() + shift;
    let hi = stay.max(move_);
    hi + ((stay - hi).exp() + (move_ - hi).exp()).ln()
}

/// ln E_{x ~ N(0, sigma^2)}[r(x)^power] by a fixed-resolution composite
/// Simpson rule (2^20 intervals) over a scanned window, with Kahan
/// summation. Deliberately not adaptive: a different integration scheme
/// than the implementation under test.
fn log_moment_fixed(q: f64, sigma: f64, power: f64) -> f64 {
    let log_norm = -(sigma * (2.0 * PI).sqrt()).ln();
    let h = |x: f64| log_norm - x * x / (2.0 * sigma * sigma) + power * log_mix_ratio(x, q, sigma);

    let reach = power.abs() + 1.0 + 16.0 * sigma;
    let (lo, hi) = (-reach, reach);

    let mut scale = f64::NEG_INFINITY;
    for i in 0..=8192 {
        let x = lo + (hi - lo) * i as f64 / 8192.0;
        scale = scale.max(h(x));
    }

    let n: usize = 1 << 20;
    let step = (hi - lo) / n as f64;
    let mut sum = 0.0f64;
    let mut compensation = 0.0f64;
    for i in 0..=n {
        let x = lo + step * i as f64;
        let weight = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let value = weight * (h(x) - scale).exp();
        let y = value - compensation;
        let t = sum + y;
        compensation = (t - sum) - y;
        sum = t;
    }
    scale + (sum * step / 3.0).ln()
}

/// Reference one-step Rényi loss of the sampled Gaussian mechanism: max of
/// the two divergence directions.
pub fn oracle_rdp_sgm(q: f64, sigma: f64, alpha: f64) -> f64 {
    let mix_vs_pure = log_moment_fixed(q, sigma, alpha) / (alpha - 1.0);
    let pure_vs_mix = log_moment_fixed(q, sigma, 1.0 - alpha) / (alpha - 1.0);
    mix_vs_pure.max(pure_vs_mix).max(0.0)
}

/// Reference conversion: min over the grid of
/// `steps * eps(alpha) + ln(1/delta) / (alpha - 1)`.
pub fn oracle_to_dp(curve: &[(f64, f64)], steps: f64, delta: f64) -> (f64, f64) {
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = f64::INFINITY;
    let mut best_alpha = curve[0].0;
    for &(alpha, eps) in curve {
        let candidate = steps * eps + log_inv_delta / (alpha - 1.0);
        if candidate < best {
            best = candidate;
            best_alpha = alpha;
        }
    }
    (best, best_alpha)
}
