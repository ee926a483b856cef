//! Event-driven continuous-time simulation of the single-wall dynamics.
//!
//! A lattice state holds the slope field, a weighted index over bond rates
//! (cumulative-sum tree, O(log N) per event), and the boundary policy. Ring
//! lattices conserve the slope sum exactly; ghost boundaries resample an
//! out-of-window neighbor from the appropriate one-site marginal at every
//! step (heat-bath ghost). Configurations are confined to `|w_i| <= cap`
//! with rejected events counted rather than silently dropped.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gibbs::{build_marginal, GibbsMarginal, DEFAULT_TAIL_TARGET};
use crate::rates::RateFunction;
use crate::sum_tree::SumTree;

/// Default hard cap on slopes; generously above any support the canonical
/// measures reach for `beta >= 0.5`, so rejections stay at zero.
pub const DEFAULT_SLOPE_CAP: i64 = 24;

/// Boundary policy for a finite lattice window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    /// Periodic: bond `N-1` joins site `N-1` back to site 0.
    Ring,
    /// Open window inside an infinite product environment: neighbors beyond
    /// the window are freshly resampled ghosts from the one-site marginal at
    /// `theta_left` (left edge) or `theta_right` (right edge). `split_index`
    /// records where initial data switches from left to right parameter.
    GhostProduct { theta_left: f64, theta_right: f64, split_index: usize },
}

#[derive(Debug, Clone)]
struct GhostEnv {
    left: GibbsMarginal,
    right: GibbsMarginal,
    cur_left: i64,
    cur_right: i64,
}

/// One simulated event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub bond: usize,
    pub applied: bool,
    /// Slopes at the bond before the move (ghost neighbors included).
    pub pre: (i64, i64),
    pub post: (i64, i64),
}

/// Counters accumulated over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunStats {
    pub events: u64,
    pub rejections: u64,
}

/// Finite lattice of slopes with its event clock and weighted bond index.
#[derive(Debug, Clone)]
pub struct LatticeState {
    rf: Arc<RateFunction>,
    omega: Vec<i64>,
    boundary: Boundary,
    ghosts: Option<GhostEnv>,
    time: f64,
    tree: SumTree,
    slope_cap: i64,
    stats: RunStats,
}

impl LatticeState {
    pub fn new_ring(rf: Arc<RateFunction>, omega: Vec<i64>, slope_cap: i64) -> Result<Self> {
        Self::new(rf, omega, Boundary::Ring, slope_cap)
    }

    pub fn new(
        rf: Arc<RateFunction>,
        omega: Vec<i64>,
        boundary: Boundary,
        slope_cap: i64,
    ) -> Result<Self> {
        assert!(!omega.is_empty(), "empty lattice");
        for &w in &omega {
            if w.abs() > slope_cap {
                return Err(Error::Config(format!(
                    "initial slope {w} beyond cap {slope_cap}"
                )));
            }
        }
        let ghosts = match boundary {
            Boundary::Ring => None,
            Boundary::GhostProduct { theta_left, theta_right, .. } => {
                let left = build_marginal(&rf, theta_left, DEFAULT_TAIL_TARGET)?;
                let right = build_marginal(&rf, theta_right, DEFAULT_TAIL_TARGET)?;
                // Placeholder ghost values; resampled before every step.
                let cur_left = left.mean().round() as i64;
                let cur_right = right.mean().round() as i64;
                Some(GhostEnv { left, right, cur_left, cur_right })
            }
        };
        let mut state = Self {
            rf,
            omega,
            boundary,
            ghosts,
            time: 0.0,
            tree: SumTree::new(&[]),
            slope_cap,
            stats: RunStats::default(),
        };
        let rates = state.all_bond_rates()?;
        state.tree = SumTree::new(&rates);
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn omega(&self) -> &[i64] {
        &self.omega
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn stats(&self) -> RunStats {
        self.stats
    }

    pub fn slope_cap(&self) -> i64 {
        self.slope_cap
    }

    pub fn rate_function(&self) -> &Arc<RateFunction> {
        &self.rf
    }

    pub fn sum_omega(&self) -> i64 {
        self.omega.iter().sum()
    }

    pub fn bond_count(&self) -> usize {
        match self.boundary {
            Boundary::Ring => self.omega.len(),
            Boundary::GhostProduct { .. } => self.omega.len() + 1,
        }
    }

    /// Sites joined by bond `b`; `None` marks a ghost neighbor.
    pub fn bond_sites(&self, b: usize) -> (Option<usize>, Option<usize>) {
        let n = self.omega.len();
        match self.boundary {
            Boundary::Ring => (Some(b), Some((b + 1) % n)),
            Boundary::GhostProduct { .. } => {
                let left = if b == 0 { None } else { Some(b - 1) };
                let right = if b == n { None } else { Some(b) };
                (left, right)
            }
        }
    }

    fn bond_slopes(&self, b: usize) -> (i64, i64) {
        let (l, r) = self.bond_sites(b);
        let env = self.ghosts.as_ref();
        let wl = l.map(|s| self.omega[s]).unwrap_or_else(|| env.unwrap().cur_left);
        let wr = r.map(|s| self.omega[s]).unwrap_or_else(|| env.unwrap().cur_right);
        (wl, wr)
    }

    /// Current rate `r(w_l) + r(-w_r)` of bond `b`.
    pub fn bond_rate(&self, b: usize) -> Result<f64> {
        let (wl, wr) = self.bond_slopes(b);
        Ok(self.rf.rate(wl)? + self.rf.rate(-wr)?)
    }

    fn all_bond_rates(&self) -> Result<Vec<f64>> {
        (0..self.bond_count()).map(|b| self.bond_rate(b)).collect()
    }

    /// Largest relative deviation between the weighted index and freshly
    /// recomputed bond rates (including the root total).
    pub fn verify_rate_index(&self) -> Result<f64> {
        let rates = self.all_bond_rates()?;
        let mut worst: f64 = 0.0;
        for (b, &r) in rates.iter().enumerate() {
            let dev = (self.tree.get(b) - r).abs() / r.max(1e-300);
            worst = worst.max(dev);
        }
        let direct: f64 = rates.iter().sum();
        worst = worst.max((self.tree.total() - direct).abs() / direct.max(1e-300));
        Ok(worst)
    }

    /// Applies the move at bond `b` (left slope down, right slope up),
    /// refreshing the rate index for the affected bonds. Returns `false`
    /// and counts a rejection if the cap would be violated.
    pub fn apply_move(&mut self, b: usize) -> Result<bool> {
        let (l, r) = self.bond_sites(b);
        if let Some(s) = l {
            if self.omega[s] - 1 < -self.slope_cap {
                self.stats.rejections += 1;
                return Ok(false);
            }
        }
        if let Some(s) = r {
            if self.omega[s] + 1 > self.slope_cap {
                self.stats.rejections += 1;
                return Ok(false);
            }
        }
        if let Some(s) = l {
            self.omega[s] -= 1;
        }
        if let Some(s) = r {
            self.omega[s] += 1;
        }
        self.refresh_bonds_around(b)?;
        Ok(true)
    }

    fn refresh_bonds_around(&mut self, b: usize) -> Result<()> {
        let n_bonds = self.bond_count();
        match self.boundary {
            Boundary::Ring => {
                let prev = (b + n_bonds - 1) % n_bonds;
                let next = (b + 1) % n_bonds;
                for bb in [prev, b, next] {
                    let rate = self.bond_rate(bb)?;
                    self.tree.update(bb, rate);
                }
            }
            Boundary::GhostProduct { .. } => {
                for bb in [b.wrapping_sub(1), b, b + 1] {
                    if bb < n_bonds {
                        let rate = self.bond_rate(bb)?;
                        self.tree.update(bb, rate);
                    }
                }
            }
        }
        Ok(())
    }

    fn resample_ghosts<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.ghosts.is_some() {
            let n = self.omega.len();
            {
                let env = self.ghosts.as_mut().unwrap();
                env.cur_left = env.left.sample(rng);
                env.cur_right = env.right.sample(rng);
            }
            for b in [0, n] {
                let rate = self.bond_rate(b)?;
                self.tree.update(b, rate);
            }
        }
        Ok(())
    }

    /// Draws the exponential holding time and the bond of the next event
    /// without applying it. Ghost neighbors are refreshed first.
    fn draw_event<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(f64, usize)> {
        self.resample_ghosts(rng)?;
        let total = self.tree.total();
        if !(total > 0.0) {
            return Err(Error::ZeroTotalRate);
        }
        let u: f64 = 1.0 - rng.gen::<f64>();
        let dt = -u.ln() / total;
        let x = rng.gen::<f64>() * total;
        Ok((dt, self.tree.select(x)))
    }

    /// One exact-simulation step: exponential holding time at the current
    /// total rate, bond choice proportional to its rate, move applied.
    pub fn gillespie_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<EventRecord> {
        let (dt, bond) = self.draw_event(rng)?;
        self.time += dt;
        let pre = self.bond_slopes(bond);
        let applied = self.apply_move(bond)?;
        self.stats.events += 1;
        let post = self.bond_slopes(bond);
        Ok(EventRecord { time: self.time, bond, applied, pre, post })
    }

    /// Runs until the clock passes `t_end`, firing `hook` at every requested
    /// sample time (sorted ascending; times at or before the current clock
    /// fire immediately, times beyond `t_end` are skipped).
    pub fn simulate_until<R: Rng + ?Sized>(
        &mut self,
        t_end: f64,
        rng: &mut R,
        sample_times: &[f64],
        mut hook: impl FnMut(&LatticeState),
    ) -> Result<RunStats> {
        assert!(t_end >= self.time, "t_end precedes the current clock");
        let start = self.stats;
        let mut idx = 0;
        while idx < sample_times.len() && sample_times[idx] <= self.time {
            if sample_times[idx] <= t_end {
                hook(self);
            }
            idx += 1;
        }
        loop {
            let (dt, bond) = self.draw_event(rng)?;
            let next_time = self.time + dt;
            while idx < sample_times.len() && sample_times[idx] <= next_time.min(t_end) {
                hook(self);
                idx += 1;
            }
            if next_time > t_end {
                self.time = t_end;
                break;
            }
            self.time = next_time;
            self.apply_move(bond)?;
            self.stats.events += 1;
        }
        Ok(RunStats {
            events: self.stats.events - start.events,
            rejections: self.stats.rejections - start.rejections,
        })
    }
}

/// Wall heights reconstructed from slopes, anchored at `h_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightField {
    pub h: Vec<i64>,
}

impl HeightField {
    /// `h_0 = 0`, `h_i = h_{i-1} - w_i`.
    pub fn from_omega(omega: &[i64]) -> Self {
        let mut h = Vec::with_capacity(omega.len());
        h.push(0);
        for i in 1..omega.len() {
            h.push(h[i - 1] - omega[i]);
        }
        Self { h }
    }

    /// Recovers `w_i = h_{i-1} - h_i` for `i >= 1`.
    pub fn slopes(&self) -> Vec<i64> {
        (1..self.h.len()).map(|i| self.h[i - 1] - self.h[i]).collect()
    }
}

/// Draws `n` i.i.d. slopes from a one-site marginal.
pub fn init_iid<R: Rng + ?Sized>(marginal: &GibbsMarginal, n: usize, rng: &mut R) -> Vec<i64> {
    (0..n).map(|_| marginal.sample(rng)).collect()
}

/// Slopes drawn from `left` before `split` and from `right` from `split` on.
pub fn init_split<R: Rng + ?Sized>(
    left: &GibbsMarginal,
    right: &GibbsMarginal,
    n: usize,
    split: usize,
    rng: &mut R,
) -> Vec<i64> {
    (0..n)
        .map(|i| if i < split { left.sample(rng) } else { right.sample(rng) })
        .collect()
}

/// Explicit rate matrix of the slope-truncated ring chain; the oracle for
/// generator-expectation checks on small systems.
#[derive(Debug, Clone)]
pub struct ExactGenerator {
    pub n_sites: usize,
    pub slope_trunc: i64,
    pub dim: usize,
    /// Off-diagonal entries `(from, to, rate)`.
    pub entries: Vec<(u32, u32, f64)>,
    /// Diagonal (negative exit rates); rows sum to zero by construction.
    pub diagonal: Vec<f64>,
}

/// State-space budget for the exact generator.
pub const GENERATOR_STATE_BUDGET: u128 = 1_000_000;

pub fn build_exact_generator(
    rf: &Arc<RateFunction>,
    n_sites: usize,
    slope_trunc: i64,
) -> Result<ExactGenerator> {
    let base = (2 * slope_trunc + 1) as u128;
    let dim_big = base.pow(n_sites as u32);
    if dim_big > GENERATOR_STATE_BUDGET {
        return Err(Error::StateSpaceOverflow { states: dim_big, budget: GENERATOR_STATE_BUDGET });
    }
    let dim = dim_big as usize;
    let base = base as usize;
    let mut entries = Vec::new();
    let mut diagonal = vec![0.0; dim];
    let mut digits = vec![0i64; n_sites];
    for s in 0..dim {
        let mut acc = s;
        for d in digits.iter_mut() {
            *d = (acc % base) as i64 - slope_trunc;
            acc /= base;
        }
        for b in 0..n_sites {
            let l = b;
            let r = (b + 1) % n_sites;
            if digits[l] - 1 < -slope_trunc || digits[r] + 1 > slope_trunc {
                continue;
            }
            let rate = rf.rate(digits[l])? + rf.rate(-digits[r])?;
            let stride_l = base.pow(l as u32);
            let stride_r = base.pow(r as u32);
            let t = s - stride_l + stride_r;
            entries.push((s as u32, t as u32, rate));
            diagonal[s] -= rate;
        }
    }
    Ok(ExactGenerator { n_sites, slope_trunc, dim, entries, diagonal })
}

impl ExactGenerator {
    /// Maximal absolute row sum; zero up to rounding for a rate matrix.
    pub fn max_abs_row_sum(&self) -> f64 {
        let mut rows = self.diagonal.clone();
        for &(s, _, rate) in &self.entries {
            rows[s as usize] += rate;
        }
        rows.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// Left action `mu^T Q` of a distribution on the truncated state space.
    pub fn left_apply(&self, mu: &[f64]) -> Vec<f64> {
        assert_eq!(mu.len(), self.dim);
        let mut out: Vec<f64> = (0..self.dim).map(|s| mu[s] * self.diagonal[s]).collect();
        for &(s, t, rate) in &self.entries {
            out[t as usize] += mu[s as usize] * rate;
        }
        out
    }

    /// Product distribution over the truncated box from a one-site marginal,
    /// renormalized per site.
    pub fn product_measure(&self, marginal: &GibbsMarginal) -> Vec<f64> {
        let m = self.slope_trunc;
        let site: Vec<f64> = (-m..=m).map(|z| marginal.pmf(z)).collect();
        let norm: f64 = site.iter().sum();
        let site: Vec<f64> = site.iter().map(|p| p / norm).collect();
        let base = site.len();
        let mut out = Vec::with_capacity(self.dim);
        for s in 0..self.dim {
            let mut acc = s;
            let mut p = 1.0;
            for _ in 0..self.n_sites {
                p *= site[acc % base];
                acc /= base;
            }
            out.push(p);
        }
        out
    }

    /// Image of a state index under the cyclic site shift `i -> i+1`.
    pub fn shift_state(&self, s: usize) -> usize {
        let base = (2 * self.slope_trunc + 1) as usize;
        let mut digits = vec![0usize; self.n_sites];
        let mut acc = s;
        for d in digits.iter_mut() {
            *d = acc % base;
            acc /= base;
        }
        let mut out = 0;
        for (i, &d) in digits.iter().enumerate() {
            let to = (i + 1) % self.n_sites;
            out += d * base.pow(to as u32);
        }
        out
    }
}
