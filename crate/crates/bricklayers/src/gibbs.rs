//! Canonical Gibbs measures and everything derived from them.
//!
//! The one-site marginal at parameter `theta` has weights
//! `exp(theta*z) / r(|z|)!`. Supports are truncated where an explicit
//! geometric tail bound drops below a target, normalizers use log-sum-exp,
//! and every downstream quantity (moments, flux, shock speed) is an honest
//! truncated sum carrying that tail bound.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rates::{RateFunction, RateKind};

/// Default relative bound on the probability mass left outside a support.
pub const DEFAULT_TAIL_TARGET: f64 = 1e-15;

/// Hard cap on the half-width of the admissible `theta` box used by scans.
pub const THETA_BOX_CAP: f64 = 4.0;

/// Default admissible `theta` box for scans: generous for divergent
/// `theta_bar`, shrinking to keep a safety margin for finite tables.
pub fn admissible_theta_box(rf: &RateFunction) -> f64 {
    let tb = rf.theta_bar().value();
    if tb.is_infinite() {
        THETA_BOX_CAP
    } else {
        (tb - 0.5).max(0.5 * tb).min(THETA_BOX_CAP)
    }
}

/// One-site canonical Gibbs marginal, truncated with a rigorous tail bound.
#[derive(Debug, Clone)]
pub struct GibbsMarginal {
    rf: Arc<RateFunction>,
    theta: f64,
    z_lo: i64,
    z_hi: i64,
    log_weights: Vec<f64>,
    log_z: f64,
    tail_bound: f64,
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

/// Log-sum-exp over a slice of finite log weights.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Unnormalized log weight `theta*z - log r(|z|)!`.
fn log_weight(rf: &RateFunction, theta: f64, z: i64) -> Result<f64> {
    Ok(theta * z as f64 - rf.log_rate_factorial(z.abs())?)
}

impl GibbsMarginal {
    pub fn rate_function(&self) -> &Arc<RateFunction> {
        &self.rf
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn support(&self) -> (i64, i64) {
        (self.z_lo, self.z_hi)
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    /// Rigorous upper bound on the probability mass outside the support.
    pub fn tail_bound(&self) -> f64 {
        self.tail_bound
    }

    pub fn log_weight(&self, z: i64) -> Option<f64> {
        if z < self.z_lo || z > self.z_hi {
            None
        } else {
            Some(self.log_weights[(z - self.z_lo) as usize])
        }
    }

    /// Probability of slope `z`; zero outside the truncated support.
    pub fn pmf(&self, z: i64) -> f64 {
        if z < self.z_lo || z > self.z_hi {
            0.0
        } else {
            self.pmf[(z - self.z_lo) as usize]
        }
    }

    /// Mass strictly outside `[-m, m]` within the support (plus the tail
    /// bound for what the support itself cut off).
    pub fn mass_outside(&self, m: i64) -> f64 {
        let mut t = self.tail_bound;
        for z in self.z_lo..=self.z_hi {
            if z.abs() > m {
                t += self.pmf(z);
            }
        }
        t
    }

    /// Inverse-CDF sample; never leaves the truncated support.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> i64 {
        let u: f64 = rng.gen::<f64>() * self.cdf[self.cdf.len() - 1];
        let idx = self.cdf.partition_point(|&c| c <= u);
        self.z_lo + idx.min(self.pmf.len() - 1) as i64
    }

    pub fn mean(&self) -> f64 {
        self.pmf
            .iter()
            .enumerate()
            .map(|(i, p)| (self.z_lo + i as i64) as f64 * p)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.pmf
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = (self.z_lo + i as i64) as f64 - m;
                d * d * p
            })
            .sum()
    }

    pub fn third_central(&self) -> f64 {
        let m = self.mean();
        self.pmf
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = (self.z_lo + i as i64) as f64 - m;
                d * d * d * p
            })
            .sum()
    }

    /// Expectation of `f(z)` under the truncated marginal.
    pub fn expect(&self, mut f: impl FnMut(i64) -> f64) -> f64 {
        self.pmf
            .iter()
            .enumerate()
            .map(|(i, p)| f(self.z_lo + i as i64) * p)
            .sum()
    }

    /// Two-column text export: header carrying the defining parameters,
    /// then `z,pmf` rows.
    pub fn export_text(&self) -> String {
        let beta = match self.rf.kind() {
            RateKind::Ebl { beta } => format!("{beta}"),
            RateKind::Tabulated => "na".to_string(),
        };
        let mut out = format!(
            "# theta={} beta={} log_z={} tail_bound={:e}\nz,pmf\n",
            self.theta, beta, self.log_z, self.tail_bound
        );
        for z in self.z_lo..=self.z_hi {
            let _ = writeln!(out, "{},{:e}", z, self.pmf(z));
        }
        out
    }
}

/// Builds the truncated marginal at `theta`, growing the support until the
/// geometric tail bound falls below `tail_target`.
pub fn build_marginal(
    rf: &Arc<RateFunction>,
    theta: f64,
    tail_target: f64,
) -> Result<GibbsMarginal> {
    if !(tail_target > 0.0 && tail_target < 1.0) {
        return Err(Error::Config(format!("tail target {tail_target} outside (0, 1)")));
    }
    let tb = rf.theta_bar().value();
    if !(theta.abs() < tb) {
        return Err(Error::ThetaNotAdmissible { theta, theta_bar: tb });
    }

    // Start around the mode: weights increase to the right while
    // log r(z) < theta, and to the left while log r(|z|) < -theta.
    let mut hi = 1i64;
    while let Ok(l) = rf.log_rate(hi + 1) {
        if l < theta && hi < 100_000 {
            hi += 1;
        } else {
            break;
        }
    }
    let mut lo = -1i64;
    while let Ok(l) = rf.log_rate(-lo + 1) {
        if l < -theta && lo > -100_000 {
            lo -= 1;
        } else {
            break;
        }
    }

    // Grow the support until both geometric tails clear the target.
    let mut best_tail = f64::INFINITY;
    for _ in 0..200_000 {
        let log_z_run = {
            let mut ws = Vec::with_capacity((hi - lo + 1) as usize);
            for z in lo..=hi {
                ws.push(log_weight(rf, theta, z)?);
            }
            log_sum_exp(&ws)
        };
        let right = tail_log_bound_right(rf, theta, hi);
        let left = tail_log_bound_left(rf, theta, lo);
        match (right, left) {
            (Some(tr), Some(tl)) => {
                let tail = (tr - log_z_run).exp() + (tl - log_z_run).exp();
                best_tail = best_tail.min(tail);
                if tail <= tail_target {
                    return finish_marginal(rf, theta, lo, hi, tail);
                }
                // extend the heavier side
                if tr >= tl {
                    hi += 1;
                } else {
                    lo -= 1;
                }
            }
            (None, _) | (_, None) => {
                // a side is still growing or hit the tabulated domain edge
                let grew_r = matches!(right, None) && extendable_right(rf, hi);
                let grew_l = matches!(left, None) && extendable_left(rf, lo);
                if grew_r {
                    hi += 1;
                }
                if grew_l {
                    lo -= 1;
                }
                if !grew_r && !grew_l {
                    return Err(Error::TailUnachievable {
                        target: tail_target,
                        reached: best_tail,
                    });
                }
            }
        }
    }
    Err(Error::TailUnachievable { target: tail_target, reached: best_tail })
}

fn extendable_right(rf: &RateFunction, hi: i64) -> bool {
    log_weight(rf, 0.0, hi + 1).is_ok() && rf.log_rate(hi + 2).is_ok()
}

fn extendable_left(rf: &RateFunction, lo: i64) -> bool {
    log_weight(rf, 0.0, lo - 1).is_ok() && rf.log_rate(-lo + 2).is_ok()
}

/// Log of an upper bound on the unnormalized mass beyond `hi`; `None` while
/// the weights are not yet strictly decaying there or the domain ran out.
fn tail_log_bound_right(rf: &RateFunction, theta: f64, hi: i64) -> Option<f64> {
    let w_next = log_weight(rf, theta, hi + 1).ok()?;
    let q = (theta - rf.log_rate(hi + 2).ok()?).exp();
    if q >= 0.5 {
        return None;
    }
    Some(w_next - (1.0 - q).ln())
}

fn tail_log_bound_left(rf: &RateFunction, theta: f64, lo: i64) -> Option<f64> {
    let w_next = log_weight(rf, theta, lo - 1).ok()?;
    let q = (-theta - rf.log_rate(-lo + 2).ok()?).exp();
    if q >= 0.5 {
        return None;
    }
    Some(w_next - (1.0 - q).ln())
}

fn finish_marginal(
    rf: &Arc<RateFunction>,
    theta: f64,
    z_lo: i64,
    z_hi: i64,
    tail_bound: f64,
) -> Result<GibbsMarginal> {
    let mut log_weights = Vec::with_capacity((z_hi - z_lo + 1) as usize);
    for z in z_lo..=z_hi {
        log_weights.push(log_weight(rf, theta, z)?);
    }
    let log_z = log_sum_exp(&log_weights);
    let pmf: Vec<f64> = log_weights.iter().map(|&w| (w - log_z).exp()).collect();
    let mut cdf = Vec::with_capacity(pmf.len());
    let mut acc = 0.0;
    for &p in &pmf {
        acc += p;
        cdf.push(acc);
    }
    Ok(GibbsMarginal {
        rf: Arc::clone(rf),
        theta,
        z_lo,
        z_hi,
        log_weights,
        log_z,
        tail_bound,
        pmf,
        cdf,
    })
}

/// Log partition function with its tail bound; for the exponential family
/// also the factorization `log Z = theta^2/(2 beta) + log Z~(beta, m)`.
#[derive(Debug, Clone, Copy)]
pub struct LogPartition {
    pub log_z: f64,
    pub tail_bound: f64,
    /// `(m, log Z~)` with `m = theta/beta`, exponential family only.
    pub ebl_factorization: Option<(f64, f64)>,
}

pub fn log_partition(rf: &Arc<RateFunction>, theta: f64) -> Result<LogPartition> {
    let m = build_marginal(rf, theta, DEFAULT_TAIL_TARGET)?;
    let ebl_factorization = rf.beta().map(|beta| {
        let mm = theta / beta;
        (mm, m.log_z() - theta * theta / (2.0 * beta))
    });
    Ok(LogPartition { log_z: m.log_z(), tail_bound: m.tail_bound(), ebl_factorization })
}

/// Mean slope `u(theta)`.
pub fn mean_u(rf: &Arc<RateFunction>, theta: f64) -> Result<f64> {
    Ok(build_marginal(rf, theta, DEFAULT_TAIL_TARGET)?.mean())
}

/// `u'(theta)`, computed as the exact truncated variance.
pub fn variance(rf: &Arc<RateFunction>, theta: f64) -> Result<f64> {
    Ok(build_marginal(rf, theta, DEFAULT_TAIL_TARGET)?.variance())
}

/// `u''(theta)`, computed as the exact truncated third central moment.
pub fn third_central(rf: &Arc<RateFunction>, theta: f64) -> Result<f64> {
    Ok(build_marginal(rf, theta, DEFAULT_TAIL_TARGET)?.third_central())
}

/// Inverts the strictly increasing map `theta -> u(theta)` by bisection
/// over the admissible box.
pub fn theta_of_u(rf: &Arc<RateFunction>, u: f64) -> Result<f64> {
    let box_half = admissible_theta_box(rf);
    let mut lo = -box_half;
    let mut hi = box_half;
    let u_lo = mean_u(rf, lo)?;
    let u_hi = mean_u(rf, hi)?;
    if u < u_lo || u > u_hi {
        return Err(Error::MeanOutOfRange { u, min: u_lo, max: u_hi });
    }
    let mut mid = 0.0;
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let um = mean_u(rf, mid)?;
        if (um - u).abs() <= 1e-10 {
            return Ok(mid);
        }
        if um < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// Both routes to the flux at a given `theta`: the truncated expectation
/// `E[r(w) + r(-w)]` and the closed form `2 cosh(theta)`.
pub fn flux_parts_at_theta(rf: &Arc<RateFunction>, theta: f64) -> Result<(f64, f64)> {
    let m = build_marginal(rf, theta, DEFAULT_TAIL_TARGET)?;
    let mut direct = 0.0;
    for z in m.z_lo..=m.z_hi {
        direct += (rf.rate(z)? + rf.rate(-z)?) * m.pmf(z);
    }
    Ok((direct, 2.0 * theta.cosh()))
}

/// Flux at a given `theta`, cross-checked between the two routes.
pub fn flux_j_at_theta(rf: &Arc<RateFunction>, theta: f64) -> Result<f64> {
    let (direct, closed) = flux_parts_at_theta(rf, theta)?;
    if (direct - closed).abs() > 1e-6 * closed.abs().max(1.0) {
        return Err(Error::FluxMismatch { direct, closed });
    }
    Ok(direct)
}

/// Flux as a function of the mean slope `u`.
pub fn flux_j(rf: &Arc<RateFunction>, u: f64) -> Result<f64> {
    let theta = theta_of_u(rf, u)?;
    flux_j_at_theta(rf, theta)
}

/// Second derivative of the flux along `u`, from exact truncated moments:
/// `cosh(theta)/(2 u'^2) - sinh(theta) u'' / (2 u'^3)`.
pub fn flux_convexity(rf: &Arc<RateFunction>, theta: f64) -> Result<f64> {
    let m = build_marginal(rf, theta, DEFAULT_TAIL_TARGET)?;
    let up = m.variance();
    let upp = m.third_central();
    Ok(theta.cosh() / (2.0 * up * up) - theta.sinh() * upp / (2.0 * up * up * up))
}

/// Widest contiguous grid interval around `theta = 0` where the flux is
/// certified convex. Always nonempty: convexity at 0 is structural.
pub fn convexity_interval(
    rf: &Arc<RateFunction>,
    scan_range: (f64, f64),
    grid_step: f64,
) -> Result<(f64, f64)> {
    let (a, b) = scan_range;
    if !(a <= 0.0 && b >= 0.0 && grid_step > 0.0) {
        return Err(Error::Config("convexity scan range must contain 0".into()));
    }
    if flux_convexity(rf, 0.0)? <= 0.0 {
        return Err(Error::Config("flux not convex at theta = 0".into()));
    }
    let mut hi = 0.0;
    let mut k = 1;
    while 0.0 + k as f64 * grid_step <= b {
        let t = k as f64 * grid_step;
        if flux_convexity(rf, t)? > 0.0 {
            hi = t;
            k += 1;
        } else {
            break;
        }
    }
    let mut lo = 0.0;
    let mut k = 1;
    while -(k as f64) * grid_step >= a {
        let t = -(k as f64) * grid_step;
        if flux_convexity(rf, t)? > 0.0 {
            lo = t;
            k += 1;
        } else {
            break;
        }
    }
    Ok((lo, hi))
}

/// Rankine-Hugoniot speed between the states with parameters `theta_left`
/// and `theta_right`.
pub fn rh_speed(rf: &Arc<RateFunction>, theta_left: f64, theta_right: f64) -> Result<f64> {
    let u_l = mean_u(rf, theta_left)?;
    let u_r = mean_u(rf, theta_right)?;
    if (u_r - u_l).abs() < 1e-9 {
        return Err(Error::DegenerateMeans((u_r - u_l).abs()));
    }
    let j_l = flux_j_at_theta(rf, theta_left)?;
    let j_r = flux_j_at_theta(rf, theta_right)?;
    Ok((j_r - j_l) / (u_r - u_l))
}

/// Cached moment data on a `theta` grid.
#[derive(Debug, Clone)]
pub struct MomentMap {
    entries: Vec<MomentEntry>,
}

#[derive(Debug, Clone, Copy)]
pub struct MomentEntry {
    pub theta: f64,
    pub u: f64,
    pub u_prime: f64,
    pub u_double_prime: f64,
}

impl MomentMap {
    /// Evaluates the first three moments on a uniform grid; errors if the
    /// variance fails to be strictly positive anywhere.
    pub fn build(rf: &Arc<RateFunction>, range: (f64, f64), step: f64) -> Result<Self> {
        let (a, b) = range;
        if !(step > 0.0 && b > a) {
            return Err(Error::Config("bad moment grid".into()));
        }
        let n = ((b - a) / step).round() as usize;
        let mut entries = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let theta = a + k as f64 * step;
            let m = build_marginal(rf, theta, DEFAULT_TAIL_TARGET)?;
            let entry = MomentEntry {
                theta,
                u: m.mean(),
                u_prime: m.variance(),
                u_double_prime: m.third_central(),
            };
            if entry.u_prime <= 0.0 {
                return Err(Error::Config(format!("variance not positive at theta={theta}")));
            }
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[MomentEntry] {
        &self.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::DEFAULT_DOMAIN_BOUND;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn ebl(beta: f64) -> Arc<RateFunction> {
        Arc::new(RateFunction::make_ebl(beta, DEFAULT_DOMAIN_BOUND).unwrap())
    }

    /// Independent oracle: direct series summation over |z| <= 20.
    fn series_z(beta: f64, theta: f64) -> f64 {
        let mut z_sum = 0.0;
        for z in -20i64..=20 {
            z_sum += (theta * z as f64 - beta * (z * z) as f64 / 2.0).exp();
        }
        z_sum
    }

    #[test]
    fn partition_function_against_series_oracle() {
        for (beta, approx) in [(1.0, 2.506628), (2.0, 1.772637)] {
            let rf = ebl(beta);
            let m = build_marginal(&rf, 0.0, 1e-15).unwrap();
            let oracle = series_z(beta, 0.0);
            assert!(
                (m.log_z().exp() - oracle).abs() < 1e-12 * oracle,
                "beta={beta}: {} vs oracle {}",
                m.log_z().exp(),
                oracle
            );
            assert!((m.log_z().exp() - approx).abs() < 1e-5);
        }
        // mu(0) at beta=1 is 1/Z
        let rf = ebl(1.0);
        let m = build_marginal(&rf, 0.0, 1e-15).unwrap();
        assert!((m.pmf(0) - 0.398942).abs() < 1e-6);
    }

    #[test]
    fn marginal_symmetry_at_zero_theta() {
        let rf = ebl(1.0);
        let m = build_marginal(&rf, 0.0, 1e-15).unwrap();
        let (lo, hi) = m.support();
        for z in 0..=hi.min(-lo) {
            assert_eq!(m.pmf(z), m.pmf(-z), "z={z}");
        }
    }

    #[test]
    fn normalization_and_ratio_identities() {
        for (beta, theta) in [(1.0, 0.0), (1.0, 0.7), (2.0, -1.3), (0.5, 2.0)] {
            let rf = ebl(beta);
            let m = build_marginal(&rf, theta, 1e-15).unwrap();
            let total: f64 = (m.z_lo..=m.z_hi).map(|z| m.pmf(z)).sum();
            assert!((total - 1.0).abs() <= m.tail_bound().max(1e-12));
            let (lo, hi) = m.support();
            for z in (lo + 1)..=hi {
                let up = rf.rate(z).unwrap() * m.pmf(z) / m.pmf(z - 1);
                assert!(
                    (up / theta.exp() - 1.0).abs() < 1e-12,
                    "up ratio at z={z}: {up}"
                );
            }
            for z in lo..hi {
                let down = rf.rate(-z).unwrap() * m.pmf(z) / m.pmf(z + 1);
                assert!(
                    (down / (-theta).exp() - 1.0).abs() < 1e-12,
                    "down ratio at z={z}: {down}"
                );
            }
        }
    }

    #[test]
    fn partition_symmetry_and_periodicity() {
        let rf = ebl(1.0);
        for theta in [0.4, 1.1, 2.7] {
            let zp = log_partition(&rf, theta).unwrap().log_z;
            let zm = log_partition(&rf, -theta).unwrap().log_z;
            assert!((zp - zm).abs() < 1e-12, "theta={theta}");
        }
        // Z~(beta, m) has period one in m
        for beta in [1.0, 2.0] {
            let rf = ebl(beta);
            for m0 in [0.0, 0.3, 0.7] {
                let (_, zt0) = log_partition(&rf, beta * m0).unwrap().ebl_factorization.unwrap();
                let (_, zt1) =
                    log_partition(&rf, beta * (m0 + 1.0)).unwrap().ebl_factorization.unwrap();
                assert!((zt0 - zt1).abs() < 1e-9, "beta={beta} m={m0}: {zt0} vs {zt1}");
            }
        }
    }

    #[test]
    fn theta_not_admissible_for_bounded_table() {
        // bounded rates: log r(n) converges to log 3
        let a: Vec<f64> = (1..=60).map(|n| 3.0 - 2.0 * 0.5f64.powi(n)).collect();
        let rf = Arc::new(RateFunction::make_tabulated(&a).unwrap());
        let tb = rf.theta_bar().value();
        assert!((tb - 3.0f64.ln()).abs() < 1e-9);
        assert!(build_marginal(&rf, tb + 0.1, 1e-6).is_err());
        let m = build_marginal(&rf, 0.3, 1e-6).unwrap();
        assert!(m.tail_bound() <= 1e-6);
        // a 1e-15 tail does not fit in a 6-entry bounded table: refuse
        let short = Arc::new(RateFunction::make_tabulated(&[1.5, 1.9, 2.0, 2.0, 2.0, 2.0]).unwrap());
        assert!(matches!(
            build_marginal(&short, 0.3, 1e-15),
            Err(Error::TailUnachievable { .. })
        ));
    }

    #[test]
    fn tail_target_unachievable_on_short_table() {
        let rf = Arc::new(
            RateFunction::make_tabulated_log(&crate::rates::ebl_log_values(0.1, 4)).unwrap(),
        );
        // domain [-3, 4] is far too short for a 1e-15 tail at this beta
        assert!(matches!(
            build_marginal(&rf, 0.0, 1e-15),
            Err(Error::TailUnachievable { .. })
        ));
    }

    #[test]
    fn sampler_statistics() {
        let rf = ebl(1.0);
        let m = build_marginal(&rf, 0.0, 1e-15).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 1_000_000usize;
        let mut sum = 0i64;
        let mut counts = std::collections::HashMap::new();
        let (lo, hi) = m.support();
        for _ in 0..n {
            let z = m.sample(&mut rng);
            assert!(z >= lo && z <= hi, "sample left the truncated support");
            sum += z;
            *counts.entry(z).or_insert(0u64) += 1;
        }
        let mean = sum as f64 / n as f64;
        let sigma = (m.variance() / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * sigma, "mean={mean} sigma={sigma}");
        let mut tv = 0.0;
        for z in lo..=hi {
            let emp = *counts.get(&z).unwrap_or(&0) as f64 / n as f64;
            tv += (emp - m.pmf(z)).abs();
        }
        tv *= 0.5;
        assert!(tv < 5e-3, "tv={tv}");
    }

    #[test]
    fn sampler_is_deterministic() {
        let rf = ebl(1.0);
        let m = build_marginal(&rf, 0.5, 1e-15).unwrap();
        let draw = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            (0..64).map(|_| m.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn moments_and_periodicity() {
        let rf = ebl(1.0);
        assert!(mean_u(&rf, 0.0).unwrap().abs() < 1e-14);
        // u(theta) - theta/beta has period one in theta/beta
        let a = mean_u(&rf, 0.25).unwrap();
        let b = mean_u(&rf, 1.25).unwrap();
        assert!((b - a - 1.0).abs() < 1e-8, "{b} - {a}");
        // u' equals the variance; cross-check with a central difference
        for theta in [-1.0, 0.3, 1.5] {
            let var = variance(&rf, theta).unwrap();
            assert!(var > 0.0);
            let h = 1e-4;
            let fd = (mean_u(&rf, theta + h).unwrap() - mean_u(&rf, theta - h).unwrap()) / (2.0 * h);
            assert!((fd - var).abs() < 1e-6 * var.max(1e-6), "theta={theta}: {fd} vs {var}");
        }
    }

    #[test]
    fn theta_inversion() {
        let rf = ebl(1.0);
        assert!(theta_of_u(&rf, 0.0).unwrap().abs() < 1e-9);
        for theta in [-1.0, 0.5, 2.0] {
            let u = mean_u(&rf, theta).unwrap();
            let back = theta_of_u(&rf, u).unwrap();
            assert!((back - theta).abs() < 1e-8, "theta={theta} back={back}");
            // the period-one shift: u + 1 corresponds to theta + beta
            if theta + 1.0 <= admissible_theta_box(&rf) {
                let shifted = theta_of_u(&rf, u + 1.0).unwrap();
                assert!((shifted - (theta + 1.0)).abs() < 1e-8);
            }
        }
        assert!(matches!(theta_of_u(&rf, 100.0), Err(Error::MeanOutOfRange { .. })));
    }

    #[test]
    fn flux_values_and_cross_check() {
        let rf = ebl(1.0);
        assert!((flux_j(&rf, 0.0).unwrap() - 2.0).abs() < 1e-9);
        let u1 = mean_u(&rf, 1.0).unwrap();
        let j = flux_j(&rf, u1).unwrap();
        assert!((j - 3.0861612696304874).abs() < 1e-8, "j={j}");
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..10 {
            let theta = rng.gen::<f64>() * 4.0 - 2.0;
            let (direct, closed) = flux_parts_at_theta(&rf, theta).unwrap();
            assert!((direct - closed).abs() < 1e-9 * closed.max(1.0), "theta={theta}");
        }
    }

    #[test]
    fn convexity_formula_and_interval() {
        let rf = ebl(1.0);
        let c0 = flux_convexity(&rf, 0.0).unwrap();
        let up0 = variance(&rf, 0.0).unwrap();
        assert!((c0 - 1.0 / (2.0 * up0 * up0)).abs() < 1e-12);
        assert!(c0 > 0.0);
        // sign equivalence with the moment-ratio condition for theta > 0
        for theta in [0.5, 1.5] {
            let conv = flux_convexity(&rf, theta).unwrap();
            let cond = 1.0 / theta.tanh() - third_central(&rf, theta).unwrap()
                / variance(&rf, theta).unwrap();
            assert_eq!(conv > 0.0, cond > 0.0, "theta={theta}");
        }
        let (lo, hi) = convexity_interval(&rf, (-3.0, 3.0), 0.05).unwrap();
        assert!(lo <= 0.0 && hi >= 0.0);
        // refinement never shrinks the certified set by more than a cell
        let (lo2, hi2) = convexity_interval(&rf, (-3.0, 3.0), 0.025).unwrap();
        assert!(lo2 <= lo + 0.05 + 1e-12 && hi2 >= hi - 0.05 - 1e-12);
    }

    #[test]
    fn rh_speed_properties() {
        let rf = ebl(1.0);
        // symmetric pair: J symmetric, u antisymmetric
        let s0 = rh_speed(&rf, 0.5, -0.5).unwrap();
        assert!(s0.abs() < 1e-10, "s0={s0}");
        let s = rh_speed(&rf, 1.0, 0.0).unwrap();
        assert!((s - 1.0861612696304874).abs() < 1e-8, "s={s}");
        let swapped = rh_speed(&rf, 0.0, 1.0).unwrap();
        assert!((s - swapped).abs() < 1e-12);
        assert!(matches!(rh_speed(&rf, 0.7, 0.7), Err(Error::DegenerateMeans(_))));
    }

    #[test]
    fn moment_map_grid() {
        let rf = ebl(1.0);
        let map = MomentMap::build(&rf, (-2.0, 2.0), 0.25).unwrap();
        assert_eq!(map.entries().len(), 17);
        for e in map.entries() {
            assert!(e.u_prime > 0.0);
        }
    }

    #[test]
    fn export_text_shape() {
        let rf = ebl(1.0);
        let m = build_marginal(&rf, 0.5, 1e-12).unwrap();
        let text = m.export_text();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("# theta=0.5 beta=1"));
        assert!(header.contains("log_z=") && header.contains("tail_bound="));
        assert_eq!(lines.next().unwrap(), "z,pmf");
        let (lo, hi) = m.support();
        assert_eq!(lines.count() as i64, hi - lo + 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

        #[test]
        fn marginal_invariants_random(beta in 0.5f64..2.5, theta in -2.0f64..2.0) {
            let rf = ebl(beta);
            let m = build_marginal(&rf, theta, 1e-15).unwrap();
            let total: f64 = (m.support().0..=m.support().1).map(|z| m.pmf(z)).sum();
            prop_assert!((total - 1.0).abs() <= m.tail_bound().max(1e-12));
            prop_assert!(m.variance() > 0.0);
            let (direct, closed) = flux_parts_at_theta(&rf, theta).unwrap();
            prop_assert!((direct - closed).abs() < 1e-9 * closed.max(1.0));
        }

        #[test]
        fn u_shift_by_beta_adds_one(beta in 0.5f64..2.0, theta in -1.0f64..1.0) {
            let rf = ebl(beta);
            let a = mean_u(&rf, theta).unwrap();
            let b = mean_u(&rf, theta + beta).unwrap();
            prop_assert!((b - a - 1.0).abs() < 1e-8);
        }
    }
}
