//! Monte Carlo summaries, goodness-of-fit and trend fitting.

use crate::rng::{self, Stream};
use serde::{Deserialize, Serialize};

/// Output of every Monte Carlo or quadrature oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl MCEstimate {
    /// A deterministic value (zero standard error).
    pub fn exact(mean: f64, seed: u64) -> Self {
        MCEstimate {
            mean,
            stderr: 0.0,
            n_samples: 1,
            seed,
        }
    }

    pub fn from_samples(samples: &[f64], seed: u64) -> Self {
        let m = Moments::from_slice(samples);
        MCEstimate {
            mean: m.mean(),
            stderr: m.stderr(),
            n_samples: samples.len(),
            seed,
        }
    }

    /// Is `value` within `k` standard errors (plus `slack`) of the mean?
    pub fn within(&self, value: f64, k: f64, other_stderr: f64) -> bool {
        let s = self.stderr.hypot(other_stderr);
        (self.mean - value).abs() <= k * s
    }

    /// Half-width of the 99% normal-approximation interval.
    pub fn ci99(&self) -> f64 {
        2.575_829_303_548_901 * self.stderr
    }
}

/// Streaming mean and variance with a fixed merge order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, o: &Moments) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = (self.n + o.n) as f64;
        let delta = o.mean - self.mean;
        self.mean += delta * o.n as f64 / n;
        self.m2 += o.m2 + delta * delta * self.n as f64 * o.n as f64 / n;
        self.n += o.n;
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Moments::default();
        xs.iter().for_each(|&x| m.push(x));
        m
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Samples per independently seeded chunk in [`monte_carlo`].
pub const MC_CHUNK: usize = 256;

/// Runs `n` independent samples of `f`, chunk `c` drawing from stream `c`
/// of `seed`. Chunks may run in parallel; their moments are merged in chunk
/// order, so the result does not depend on the thread count.
pub fn monte_carlo<F>(n: usize, seed: u64, f: F) -> MCEstimate
where
    F: Fn(&mut Stream) -> f64 + Sync,
{
    let chunks = n.div_ceil(MC_CHUNK);
    let run = |c: usize| {
        let mut s = rng::stream(seed, c as u64);
        let len = MC_CHUNK.min(n - c * MC_CHUNK);
        let mut m = Moments::default();
        for _ in 0..len {
            m.push(f(&mut s));
        }
        m
    };
    let parts: Vec<Moments> = map_indices(chunks, run);
    let mut total = Moments::default();
    parts.iter().for_each(|m| total.merge(m));
    MCEstimate {
        mean: total.mean(),
        stderr: total.stderr(),
        n_samples: total.n,
        seed,
    }
}

/// `(0..n).map(f).collect()`, in parallel when the `parallel` feature is on.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(&f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Result of a one-sample Kolmogorov-Smirnov test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    /// Set when every sample was identical, in which case `p_value = 0`.
    pub degenerate: bool,
}

/// Two-sided one-sample KS test of `samples` against `cdf`.
///
/// Exact distribution (Marsaglia-Tsang-Wang) for `n ≤ 35`, Stephens'
/// corrected asymptotic series above.
pub fn ks_test<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> KsResult {
    let n = samples.len();
    let mut xs: Vec<f64> = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    if n == 0 || xs[0] == xs[n - 1] {
        let d = if n == 0 { 1.0 } else { ks_stat(&xs, &cdf) };
        return KsResult {
            statistic: d,
            p_value: 0.0,
            n,
            degenerate: true,
        };
    }
    let d = ks_stat(&xs, &cdf);
    let p = if n <= 35 {
        1.0 - mtw_cdf(n, d)
    } else {
        let sn = (n as f64).sqrt();
        kolmogorov_q((sn + 0.12 + 0.11 / sn) * d)
    };
    KsResult {
        statistic: d,
        p_value: p.clamp(0.0, 1.0),
        n,
        degenerate: false,
    }
}

fn ks_stat<F: Fn(f64) -> f64>(sorted: &[f64], cdf: &F) -> f64 {
    let n = sorted.len() as f64;
    sorted.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-17 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// `P(D_n < d)` by the Marsaglia-Tsang-Wang matrix method.
fn mtw_cdf(n: usize, d: f64) -> f64 {
    let nd = n as f64 * d;
    let k = nd.floor() as usize + 1;
    let m = 2 * k - 1;
    let h = k as f64 - nd;
    let mut hm = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            hm[i * m + j] = if (i as isize - j as isize + 1) >= 0 { 1.0 } else { 0.0 };
        }
    }
    for i in 0..m {
        hm[i * m] -= h.powi(i as i32 + 1);
        hm[(m - 1) * m + i] -= h.powi((m - i) as i32);
    }
    hm[(m - 1) * m] += if 2.0 * h - 1.0 > 0.0 {
        (2.0 * h - 1.0).powi(m as i32)
    } else {
        0.0
    };
    for i in 0..m {
        for j in 0..m {
            if i + 1 >= j {
                for g in 1..=(i + 1 - j) {
                    hm[i * m + j] /= g as f64;
                }
            }
        }
    }
    let (q, e) = mat_pow(&hm, 0, m, n);
    let mut s = q[(k - 1) * m + k - 1];
    let mut eq = e;
    for i in 1..=n {
        s *= i as f64 / n as f64;
        if s < 1e-140 {
            s *= 1e140;
            eq -= 140;
        }
    }
    s * 10f64.powi(eq)
}

fn mat_mul(a: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..m {
                c[i * m + j] += aik * b[k * m + j];
            }
        }
    }
    c
}

fn mat_pow(a: &[f64], ea: i32, m: usize, n: usize) -> (Vec<f64>, i32) {
    if n == 1 {
        return (a.to_vec(), ea);
    }
    let (half, eh) = mat_pow(a, ea, m, n / 2);
    let mut b = mat_mul(&half, &half, m);
    let mut eb = 2 * eh;
    if n % 2 == 1 {
        b = mat_mul(a, &b, m);
        eb += ea;
    }
    if b[(m / 2) * m + m / 2] > 1e140 {
        b.iter_mut().for_each(|v| *v *= 1e-140);
        eb += 140;
    }
    (b, eb)
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let slope_stderr = if x.len() > 2 {
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    LinearFit {
        slope,
        intercept,
        slope_stderr,
    }
}

/// Slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly).slope
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::normal_cdf;

    #[test]
    fn moments_merge_matches_direct() {
        let xs: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64 * 0.1).collect();
        let mut a = Moments::from_slice(&xs[..20]);
        a.merge(&Moments::from_slice(&xs[20..]));
        let b = Moments::from_slice(&xs);
        assert!((a.mean() - b.mean()).abs() < 1e-12);
        assert!((a.variance() - b.variance()).abs() < 1e-10);
    }

    #[test]
    fn mtw_agrees_with_known_values() {
        // Marsaglia et al. quote K(10, 0.274) = 0.6284796154565043.
        assert!((mtw_cdf(10, 0.274) - 0.628_479_615_456_504_3).abs() < 1e-12);
        // Continuity with the asymptotic form near n = 35.
        let d = 0.2;
        let exact = 1.0 - mtw_cdf(35, d);
        let sn = 35f64.sqrt();
        let asym = kolmogorov_q((sn + 0.12 + 0.11 / sn) * d);
        assert!((exact - asym).abs() < 5e-3, "{exact} {asym}");
    }

    #[test]
    fn degenerate_samples_flagged() {
        let r = ks_test(&[1.0; 8], normal_cdf);
        assert!(r.degenerate);
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn monte_carlo_is_chunk_deterministic() {
        use rand::Rng;
        let a = monte_carlo(1000, 5, |s| s.random::<f64>());
        let b = monte_carlo(1000, 5, |s| s.random::<f64>());
        assert_eq!(a, b);
        assert_eq!(a.n_samples, 1000);
        assert!((a.mean - 0.5).abs() < 4.0 * a.stderr);
    }

    #[test]
    fn fit_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = linear_fit(&x, &y);
        assert!((f.slope + 0.5).abs() < 1e-12 && (f.intercept - 2.0).abs() < 1e-12);
    }
}
