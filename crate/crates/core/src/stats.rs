//! Statistical primitives: χ² and standard normal quantiles, and the seeded
//! random streams used by the experiment harness.
//!
//! Both quantiles are computed by bisection on a CDF built from the
//! regularized incomplete gamma function, so their accuracy is bounded by the
//! final bracket width rather than by the quality of a rational fit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sample::SampleSet;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;

/// Series expansion of P(a, x), valid (and fast) for x < a + 1.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Continued fraction for Q(a, x) (modified Lentz), valid for x ≥ a + 1.
fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    let tiny = f64::MIN_POSITIVE / GAMMA_EPS;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized lower incomplete gamma P(a, x).
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_p_series(a, x)
    } else {
        1.0 - gamma_q_continued_fraction(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 − P(a, x), computed
/// directly in the tail to keep relative precision.
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_continued_fraction(a, x)
    }
}

pub fn chi2_cdf(df: u32, q: f64) -> f64 {
    regularized_gamma_p(df as f64 / 2.0, q / 2.0)
}

/// Upper tail 1 − CDF, evaluated without cancellation.
pub fn chi2_sf(df: u32, q: f64) -> f64 {
    regularized_gamma_q(df as f64 / 2.0, q / 2.0)
}

const BISECTION_ITERS: usize = 200;

/// The `1 − beta` quantile of the χ² distribution with `df` degrees of freedom.
///
/// Bisection on the survival function starting from `[0, df + 40·sqrt(df)]`;
/// the upper end is doubled until it brackets the target.
pub fn chi2_quantile(df: u32, beta: f64) -> Result<f64> {
    if df < 1 {
        return Err(Error::Domain(format!(
            "chi2 degrees of freedom must be >= 1, got {df}"
        )));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Domain(format!("beta must lie in (0,1), got {beta}")));
    }
    let k = df as f64;
    let mut lo = 0.0;
    let mut hi = k + 40.0 * k.sqrt();
    while chi2_sf(df, hi) > beta {
        hi *= 2.0;
    }
    // sf is decreasing in q: sf(lo) > beta >= sf(hi)
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if chi2_sf(df, mid) > beta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via Φ(x) = ½(1 + sign(x)·P(½, x²/2)); the lower tail
/// uses Q directly.
pub fn normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let half_q = 0.5 * regularized_gamma_q(0.5, 0.5 * x * x);
    if x >= 0.0 {
        1.0 - half_q
    } else {
        half_q
    }
}

/// Standard normal inverse CDF by bisection on [`normal_cdf`].
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "probability must lie in (0,1), got {p}"
        )));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Solve on the lower tail and reflect, so p and 1-p give exact negatives.
    let (target, sign) = if p < 0.5 { (p, 1.0) } else { (1.0 - p, -1.0) };
    let mut lo = -1.0;
    while normal_cdf(lo) > target {
        lo *= 2.0;
    }
    let mut hi = 0.0;
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if normal_cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(sign * 0.5 * (lo + hi))
}

/// Seeded random stream.
///
/// The generator is ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`). The
/// 64-bit seed is expanded to the 256-bit key with `rand_core`'s PCG32-based
/// `seed_from_u64`, and independent streams are selected through the
/// ChaCha 64-bit stream id, so stream `k` of seed `s` never overlaps stream
/// `j != k`. Uniform doubles are `(next_u64 >> 11) * 2^-53`; normals use the
/// Box–Muller transform `sqrt(-2 ln(1-u1)) * cos(2π u2)` (and the matching
/// `sin` value on the following call).
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RandomSource {
    pub const ALGORITHM: &'static str = "chacha8-pcg32seed-boxmuller";

    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RandomSource {
            seed,
            stream,
            rng,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    pub fn algorithm(&self) -> &'static str {
        Self::ALGORITHM
    }

    /// Child stream `index` of this source's seed. Children are independent of
    /// how much the parent has been consumed, so replication `r` always sees
    /// the same data. Stream 0 is reserved for the parent itself.
    pub fn split(&self, index: u64) -> RandomSource {
        // Nested splits mix the parent stream id into the child id.
        let child = self
            .stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index.wrapping_add(1));
        RandomSource::with_stream(self.seed, child)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen::<u64>()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * (1.0 - u1).ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Exponential(1) variate by inversion.
    pub fn exponential(&mut self) -> f64 {
        -(1.0 - self.uniform()).ln()
    }
}

/// Lower-triangular factor `L` with `L Lᵀ = cov`, tolerating semidefinite
/// input: pivots in `[-1e-12, 0]` zero out their column.
pub fn cholesky_psd(cov: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = cov.len();
    for (i, row) in cov.iter().enumerate() {
        if row.len() != d {
            return Err(Error::Dimension {
                what: "covariance row length",
                expected: d,
                got: row.len(),
            });
        }
        for j in 0..i {
            let scale = 1.0 + row[j].abs().max(cov[j][i].abs());
            if (row[j] - cov[j][i]).abs() > 1e-10 * scale {
                return Err(Error::Domain(format!(
                    "covariance is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let mut l = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut pivot = cov[j][j];
        for k in 0..j {
            pivot -= l[j][k] * l[j][k];
        }
        if pivot < -1e-12 {
            return Err(Error::NotPsd { row: j, pivot });
        }
        if pivot <= 1e-12 {
            continue;
        }
        let root = pivot.sqrt();
        l[j][j] = root;
        for i in (j + 1)..d {
            let mut s = cov[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / root;
        }
    }
    Ok(l)
}

/// `n` i.i.d. draws from N(mean, cov): `mean + L z` with `z` standard normal
/// and `L` the Cholesky factor of `cov`.
pub fn sample_mvnormal(
    source: &mut RandomSource,
    mean: &[f64],
    cov: &[Vec<f64>],
    n: usize,
) -> Result<SampleSet> {
    let d = mean.len();
    if cov.len() != d {
        return Err(Error::Dimension {
            what: "covariance size",
            expected: d,
            got: cov.len(),
        });
    }
    if n == 0 {
        return Err(Error::Domain("sample count must be positive".into()));
    }
    let l = cholesky_psd(cov)?;
    let mut data = Vec::with_capacity(n * d);
    let mut z = vec![0.0; d];
    for _ in 0..n {
        for zj in z.iter_mut() {
            *zj = source.standard_normal();
        }
        for i in 0..d {
            let mut v = mean[i];
            for k in 0..=i {
                v += l[i][k] * z[k];
            }
            data.push(v);
        }
    }
    SampleSet::from_flat(data, d)
}
