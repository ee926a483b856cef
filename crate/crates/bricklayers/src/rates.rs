//! Jump-rate functions for bricklayers' models.
//!
//! A rate function maps a slope `z` to the rate `r(z)` at which a bricklayer
//! next to a discrete gradient `z` lays a brick. Two invariants are enforced
//! at construction and assumed everywhere downstream:
//!
//! * monotonicity: `r(z+1) >= r(z)`,
//! * consistency: `r(z) * r(1-z) = 1` (time already rescaled).
//!
//! All arithmetic is carried out in the log domain; raw rates overflow
//! quickly (`r(40)` for the exponential family with slope parameter 2 is
//! already ~1e34). Exponentiation happens only at the point of rate
//! comparison or summation, capped at [`LOG_RATE_CAP`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tabulation bound for slopes.
pub const DEFAULT_DOMAIN_BOUND: i64 = 64;

/// Largest log rate that is ever exponentiated. `exp(700)` is still finite
/// in f64; anything above errors out instead of silently saturating.
pub const LOG_RATE_CAP: f64 = 700.0;

/// Absolute tolerance for the consistency identity in log domain.
pub const CONSISTENCY_TOL: f64 = 1e-12;

/// Which family a rate function belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateKind {
    /// Exponential bricklayers' rates `r(z) = exp(-beta/2) * exp(beta z)`.
    Ebl { beta: f64 },
    /// Arbitrary tabulated rates on a finite slope interval.
    Tabulated,
}

/// Limit of `log r(n)` as `n` grows, estimated from the available table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThetaBar {
    /// Analytically infinite (exponential family).
    Infinite,
    /// The tail increments have converged; the limit is (close to) this value.
    Finite(f64),
    /// Still growing at the end of the table; only a lower bound is known.
    Diverging { lower_bound: f64 },
}

impl ThetaBar {
    /// Usable bound on admissible `|theta|`: the best finite information we
    /// have, or infinity for the exponential family.
    pub fn value(&self) -> f64 {
        match self {
            ThetaBar::Infinite => f64::INFINITY,
            ThetaBar::Finite(v) => *v,
            ThetaBar::Diverging { lower_bound } => *lower_bound,
        }
    }

    pub fn is_divergent(&self) -> bool {
        matches!(self, ThetaBar::Infinite | ThetaBar::Diverging { .. })
    }
}

/// A validated jump-rate function on a slope interval `[z_min, z_max]`.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFunction {
    kind: RateKind,
    z_min: i64,
    z_max: i64,
    /// `log r(z)` for `z` in `[z_min, z_max]`.
    log_table: Vec<f64>,
    /// `exp` of `log_table`, cached for the event engine's hot path.
    rate_table: Vec<f64>,
    /// Prefix sums `log r(n)! = sum_{y=1..n} log r(y)` for `n` in `[0, z_max]`.
    log_fact: Vec<f64>,
}

/// Closed-form log rate of the exponential family, written so that the
/// consistency identity holds bitwise: the branch for `z <= 0` is the exact
/// negation of the branch for `1 - z`.
fn ebl_log_rate(beta: f64, z: i64) -> f64 {
    if z >= 1 {
        beta * z as f64 - 0.5 * beta
    } else {
        -(beta * (1 - z) as f64 - 0.5 * beta)
    }
}

impl RateFunction {
    /// Exponential bricklayers' rates with parameter `beta > 0`, tabulated on
    /// `[-domain_bound, domain_bound]`. Outside the table the closed form is
    /// still evaluated on demand.
    pub fn make_ebl(beta: f64, domain_bound: i64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::NonPositiveBeta(beta));
        }
        let bound = domain_bound.max(1);
        let log_table: Vec<f64> = (-bound..=bound).map(|z| ebl_log_rate(beta, z)).collect();
        Self::from_log_table(RateKind::Ebl { beta }, -bound, log_table)
    }

    /// General rate function from the free positive values `r(n) = a_n`,
    /// `n = 1..=M`. The remaining rates are closed via consistency:
    /// `r(0) = 1/a_1`, `r(-n) = 1/a_{n+1}`, giving a domain of `[-M+1, M]`.
    ///
    /// Requires `a` nondecreasing with `a_1 >= 1`; those are exactly the
    /// constraints under which the closure is monotone.
    pub fn make_tabulated(a: &[f64]) -> Result<Self> {
        for (i, &v) in a.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidRateValue { index: i, value: v });
            }
        }
        let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
        Self::make_tabulated_log(&log_a)
    }

    /// Same as [`make_tabulated`](Self::make_tabulated) but takes
    /// `log a_n` directly. This is the lossless constructor: the table is
    /// stored exactly as given (plus exact negations), so serialization
    /// round-trips bit-for-bit.
    pub fn make_tabulated_log(log_a: &[f64]) -> Result<Self> {
        if log_a.is_empty() {
            return Err(Error::Config("tabulated rates need at least one value".into()));
        }
        for (i, &v) in log_a.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidRateValue { index: i, value: v });
            }
        }
        if log_a[0] < 0.0 {
            return Err(Error::FirstRateBelowOne(log_a[0].exp()));
        }
        for i in 1..log_a.len() {
            if log_a[i] < log_a[i - 1] {
                return Err(Error::RateMonotonicity {
                    index: i,
                    prev: log_a[i - 1],
                    next: log_a[i],
                });
            }
        }
        let m = log_a.len() as i64;
        let z_min = -(m - 1);
        // z = -n maps to -log a_{n+1}, z = 0 to -log a_1, z = n to log a_n.
        let log_table: Vec<f64> = (z_min..=m)
            .map(|z| {
                if z >= 1 {
                    log_a[(z - 1) as usize]
                } else {
                    -log_a[(-z) as usize]
                }
            })
            .collect();
        Self::from_log_table(RateKind::Tabulated, z_min, log_table)
    }

    /// Shared validated constructor.
    fn from_log_table(kind: RateKind, z_min: i64, log_table: Vec<f64>) -> Result<Self> {
        let z_max = z_min + log_table.len() as i64 - 1;
        if z_max < 1 || z_min > 0 {
            return Err(Error::Config("rate domain must contain both 0 and 1".into()));
        }
        let rf = Self::assemble(kind, z_min, log_table)?;
        rf.validate()?;
        Ok(rf)
    }

    /// Test-only escape hatch: assembles without invariant validation so the
    /// verifier's negative controls can probe deliberately broken tables.
    #[cfg(test)]
    pub(crate) fn from_log_table_unchecked(kind: RateKind, z_min: i64, log_table: Vec<f64>) -> Self {
        Self::assemble(kind, z_min, log_table).expect("table shape")
    }

    fn assemble(kind: RateKind, z_min: i64, log_table: Vec<f64>) -> Result<Self> {
        let z_max = z_min + log_table.len() as i64 - 1;
        let rate_table = log_table.iter().map(|&l| l.exp()).collect();
        let mut log_fact = Vec::with_capacity((z_max + 1) as usize);
        log_fact.push(0.0);
        let mut acc = 0.0;
        for n in 1..=z_max {
            acc += log_table[(n - z_min) as usize];
            log_fact.push(acc);
        }
        Ok(Self { kind, z_min, z_max, log_table, rate_table, log_fact })
    }

    fn validate(&self) -> Result<()> {
        for idx in 1..self.log_table.len() {
            if self.log_table[idx] < self.log_table[idx - 1] {
                return Err(Error::RateMonotonicity {
                    index: idx,
                    prev: self.log_table[idx - 1],
                    next: self.log_table[idx],
                });
            }
        }
        for z in self.z_min..=self.z_max {
            let partner = 1 - z;
            if partner < self.z_min || partner > self.z_max {
                continue;
            }
            let defect = self.log_table[(z - self.z_min) as usize]
                + self.log_table[(partner - self.z_min) as usize];
            if defect.abs() > CONSISTENCY_TOL {
                return Err(Error::RateConsistency { z, defect });
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> RateKind {
        self.kind
    }

    /// `beta` for the exponential family, `None` otherwise.
    pub fn beta(&self) -> Option<f64> {
        match self.kind {
            RateKind::Ebl { beta } => Some(beta),
            RateKind::Tabulated => None,
        }
    }

    /// Tabulated slope domain `[z_min, z_max]`.
    pub fn domain(&self) -> (i64, i64) {
        (self.z_min, self.z_max)
    }

    /// Natural log of `r(z)`. Tabulated kinds hard-error outside their
    /// domain; the exponential kind falls back to its closed form.
    pub fn log_rate(&self, z: i64) -> Result<f64> {
        if z >= self.z_min && z <= self.z_max {
            return Ok(self.log_table[(z - self.z_min) as usize]);
        }
        match self.kind {
            RateKind::Ebl { beta } => Ok(ebl_log_rate(beta, z)),
            RateKind::Tabulated => Err(Error::SlopeOutOfDomain {
                z,
                min: self.z_min,
                max: self.z_max,
            }),
        }
    }

    /// `r(z)` as a plain float, errors above the exponentiation cap.
    pub fn rate(&self, z: i64) -> Result<f64> {
        if z >= self.z_min && z <= self.z_max {
            return Ok(self.rate_table[(z - self.z_min) as usize]);
        }
        let l = self.log_rate(z)?;
        if l > LOG_RATE_CAP {
            return Err(Error::RateOverflow(l));
        }
        Ok(l.exp())
    }

    /// `log r(n)! = sum_{y=1..n} log r(y)`; the empty product is 1, so
    /// `n = 0` returns 0.
    pub fn log_rate_factorial(&self, n: i64) -> Result<f64> {
        assert!(n >= 0, "factorial argument must be nonnegative");
        if n <= self.z_max {
            return Ok(self.log_fact[n as usize]);
        }
        match self.kind {
            RateKind::Ebl { beta } => {
                let mut acc = self.log_fact[self.z_max as usize];
                for y in (self.z_max + 1)..=n {
                    acc += ebl_log_rate(beta, y);
                }
                Ok(acc)
            }
            RateKind::Tabulated => Err(Error::SlopeOutOfDomain {
                z: n,
                min: self.z_min,
                max: self.z_max,
            }),
        }
    }

    /// Limit of `log r(n)`, estimated from the tail of the table. Strictly
    /// positive for every valid rate function; may be infinite.
    pub fn theta_bar(&self) -> ThetaBar {
        match self.kind {
            RateKind::Ebl { .. } => ThetaBar::Infinite,
            RateKind::Tabulated => {
                let last = self.log_table[(self.z_max - self.z_min) as usize];
                // Converged if the last few increments are negligible.
                let probe = 3.min((self.z_max - 1).max(0)) as usize;
                let mut converged = probe > 0;
                for k in 0..probe {
                    let hi = (self.z_max - k as i64 - self.z_min) as usize;
                    if self.log_table[hi] - self.log_table[hi - 1] > 1e-9 {
                        converged = false;
                        break;
                    }
                }
                if converged {
                    ThetaBar::Finite(last)
                } else {
                    ThetaBar::Diverging { lower_bound: last }
                }
            }
        }
    }
}

/// Wire format: `{kind, beta?, domain_bound?, table?: [(z, log_rate)]}`.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RateFunctionRepr {
    Ebl { beta: f64, domain_bound: i64 },
    Tabulated { table: Vec<(i64, f64)> },
}

impl Serialize for RateFunction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = match self.kind {
            RateKind::Ebl { beta } => RateFunctionRepr::Ebl { beta, domain_bound: self.z_max },
            RateKind::Tabulated => RateFunctionRepr::Tabulated {
                table: (self.z_min..=self.z_max)
                    .map(|z| (z, self.log_table[(z - self.z_min) as usize]))
                    .collect(),
            },
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RateFunction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = RateFunctionRepr::deserialize(d)?;
        match repr {
            RateFunctionRepr::Ebl { beta, domain_bound } => {
                RateFunction::make_ebl(beta, domain_bound).map_err(D::Error::custom)
            }
            RateFunctionRepr::Tabulated { table } => {
                if table.is_empty() {
                    return Err(D::Error::custom("empty rate table"));
                }
                let z_min = table[0].0;
                for (i, &(z, _)) in table.iter().enumerate() {
                    if z != z_min + i as i64 {
                        return Err(D::Error::custom("rate table slopes must be contiguous"));
                    }
                }
                let logs: Vec<f64> = table.iter().map(|&(_, l)| l).collect();
                RateFunction::from_log_table(RateKind::Tabulated, z_min, logs)
                    .map_err(D::Error::custom)
            }
        }
    }
}

/// EBL log values `log a_n = beta*n - beta/2`, `n = 1..=m`, computed with the
/// same expression `make_ebl` uses, for exact tabulated reconstruction.
pub fn ebl_log_values(beta: f64, m: i64) -> Vec<f64> {
    (1..=m).map(|n| ebl_log_rate(beta, n)).collect()
}
