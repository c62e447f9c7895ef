//! Reference implementations used as independent oracles by the integration
//! tests. Nothing here calls into the FFT path of the crate.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Direct O(n^2) DFT, bins 0..=n/2.
pub fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let n = x.len();
    (0..n / 2 + 1)
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, v)| {
                let a = -2.0 * PI * (k * i % n) as f64 / n as f64;
                (re + v * a.cos(), im + v * a.sin())
            })
        })
        .collect()
}

/// Time-domain cross-correlation `c[l] = sum_n a[n + l] b[n]` for lags in
/// `-max_lag..=max_lag`, peak located with a three-point parabola. Positive
/// result means `a` lags `b`.
pub fn xcorr_delay(a: &[f64], b: &[f64], max_lag: i64) -> f64 {
    let n = a.len() as i64;
    let c = |l: i64| -> f64 {
        (0..n)
            .filter(|&i| i + l >= 0 && i + l < n)
            .map(|i| a[(i + l) as usize] * b[i as usize])
            .sum()
    };
    let lags: Vec<i64> = (-max_lag..=max_lag).collect();
    let vals: Vec<f64> = lags.iter().map(|&l| c(l)).collect();
    let mut best = 0;
    for i in 1..vals.len() {
        if vals[i] > vals[best] {
            best = i;
        }
    }
    if best == 0 || best == vals.len() - 1 {
        return lags[best] as f64;
    }
    let (y0, y1, y2) = (vals[best - 1], vals[best], vals[best + 1]);
    let denom = y0 - 2.0 * y1 + y2;
    let offset = if denom == 0.0 {
        0.0
    } else {
        0.5 * (y0 - y2) / denom
    };
    lags[best] as f64 + offset
}

/// Gaussian-windowed tone burst centred at `centre` samples: a smooth,
/// effectively band-limited test pulse.
pub fn gaussian_burst(n: usize, centre: f64, width: f64, cycles_per_sample: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = i as f64 - centre;
            (-(t / width).powi(2) / 2.0).exp() * (2.0 * PI * cycles_per_sample * t).cos()
        })
        .collect()
}

/// Plain Euclidean distance.
pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
