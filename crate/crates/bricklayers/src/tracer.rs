//! The defect tracer: two coupled walls differing by a single brick, and the
//! equivalent process as seen from the discrepancy site.
//!
//! Two representations are first-class and cross-validated:
//!
//! * [`CoupledPair`] keeps the lower wall and the tracer position `Q` in
//!   fixed lattice coordinates, with the four special events at bonds `Q-1`
//!   and `Q`. Simple linear event menus make it the ground-truth oracle.
//! * [`TracerFrame`] is the workhorse: the slope field in tracer-centered
//!   logical coordinates `[-K, K]`, stored in a circular buffer so frame
//!   shifts are O(1), with a weighted event index for O(log K) steps.
//!
//! Sites scrolling into the frame window, and ghost neighbors beyond it,
//! are freshly sampled from the exact one-site marginals; this is the one
//! place the simulation injects the theoretical measure.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gibbs::{build_marginal, GibbsMarginal, DEFAULT_TAIL_TARGET};
use crate::rates::RateFunction;
use crate::sum_tree::SumTree;

/// Default tracer-frame half-width.
pub const DEFAULT_WINDOW_K: i64 = 64;

/// Events of the coupled two-wall dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoupledEvent {
    /// Joint move of both walls at a bond away from the tracer.
    Bulk { bond: usize },
    /// Joint growth fed by the left ghost neighbor (site 0 goes up).
    EdgeLeft,
    /// Joint growth into the right ghost neighbor (site N-1 goes down).
    EdgeRight,
    /// Lower wall catches up at bond Q-1; the tracer hops left.
    TracerLeft,
    /// Both walls grow at bond Q-1; the tracer stays.
    BothAtLeftBond,
    /// Upper wall grows at bond Q; the tracer hops right.
    TracerRight,
    /// Both walls grow at bond Q; the tracer stays.
    BothAtRightBond,
}

/// Lower wall plus tracer position, coupled so that the implied upper wall
/// differs by `+1` at exactly one site at all times.
#[derive(Debug, Clone)]
pub struct CoupledPair {
    rf: Arc<RateFunction>,
    omega_minus: Vec<i64>,
    q: usize,
    q_start: usize,
    marg_left: GibbsMarginal,
    marg_right: GibbsMarginal,
    ghost_left: i64,
    ghost_right: i64,
    time: f64,
    slope_cap: i64,
    rejections: u64,
    events: u64,
}

impl CoupledPair {
    /// Starts from the two-sided product measure in tracer coordinates:
    /// sites left of `q0` from `theta_left`, sites from `q0` on from
    /// `theta_right`.
    pub fn new<R: Rng + ?Sized>(
        rf: Arc<RateFunction>,
        n: usize,
        q0: usize,
        theta_left: f64,
        theta_right: f64,
        slope_cap: i64,
        rng: &mut R,
    ) -> Result<Self> {
        if q0 < 1 || q0 > n.saturating_sub(2) {
            return Err(Error::TracerAtBoundary { q: q0, n });
        }
        let marg_left = build_marginal(&rf, theta_left, DEFAULT_TAIL_TARGET)?;
        let marg_right = build_marginal(&rf, theta_right, DEFAULT_TAIL_TARGET)?;
        let omega_minus: Vec<i64> = (0..n)
            .map(|i| if i < q0 { marg_left.sample(rng) } else { marg_right.sample(rng) })
            .collect();
        let ghost_left = marg_left.sample(rng);
        let ghost_right = marg_right.sample(rng);
        Ok(Self {
            rf,
            omega_minus,
            q: q0,
            q_start: q0,
            marg_left,
            marg_right,
            ghost_left,
            ghost_right,
            time: 0.0,
            slope_cap,
            rejections: 0,
            events: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.omega_minus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega_minus.is_empty()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn rejections(&self) -> u64 {
        self.rejections
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn displacement(&self) -> i64 {
        self.q as i64 - self.q_start as i64
    }

    pub fn omega_minus(&self) -> &[i64] {
        &self.omega_minus
    }

    /// The implied upper wall: `w+_i = w-_i + [i == Q]`.
    pub fn omega_plus(&self) -> Vec<i64> {
        let mut w = self.omega_minus.clone();
        w[self.q] += 1;
        w
    }

    /// Test hook: pins the lower-wall slope at the tracer.
    #[cfg(test)]
    pub(crate) fn set_slope_at_q(&mut self, w: i64) {
        let q = self.q;
        self.omega_minus[q] = w;
    }

    /// The four special Table-row rates at the current tracer position:
    /// (tracer-left, both-at-left-bond, tracer-right, both-at-right-bond).
    pub fn special_rates(&self) -> Result<[f64; 4]> {
        let n = self.omega_minus.len();
        if self.q < 1 || self.q > n - 2 {
            return Err(Error::TracerAtBoundary { q: self.q, n });
        }
        let w_qm1 = self.omega_minus[self.q - 1];
        let w_q = self.omega_minus[self.q];
        let w_qp1 = self.omega_minus[self.q + 1];
        Ok([
            self.rf.rate(-w_q)? - self.rf.rate(-w_q - 1)?,
            self.rf.rate(w_qm1)? + self.rf.rate(-w_q - 1)?,
            self.rf.rate(w_q + 1)? - self.rf.rate(w_q)?,
            self.rf.rate(w_q)? + self.rf.rate(-w_qp1)?,
        ])
    }

    /// Full event menu with rates: the four special events at bonds `Q-1`
    /// and `Q`, standard joint rates everywhere else.
    pub fn event_menu(&self) -> Result<Vec<(CoupledEvent, f64)>> {
        let n = self.omega_minus.len();
        if self.q < 1 || self.q > n - 2 {
            return Err(Error::TracerAtBoundary { q: self.q, n });
        }
        let special = self.special_rates()?;
        let mut menu = Vec::with_capacity(n + 5);
        menu.push((
            CoupledEvent::EdgeLeft,
            self.rf.rate(self.ghost_left)? + self.rf.rate(-self.omega_minus[0])?,
        ));
        for b in 0..n - 1 {
            if b + 1 == self.q {
                menu.push((CoupledEvent::TracerLeft, special[0]));
                menu.push((CoupledEvent::BothAtLeftBond, special[1]));
            } else if b == self.q {
                menu.push((CoupledEvent::TracerRight, special[2]));
                menu.push((CoupledEvent::BothAtRightBond, special[3]));
            } else {
                let rate = self.rf.rate(self.omega_minus[b])?
                    + self.rf.rate(-self.omega_minus[b + 1])?;
                menu.push((CoupledEvent::Bulk { bond: b }, rate));
            }
        }
        menu.push((
            CoupledEvent::EdgeRight,
            self.rf.rate(self.omega_minus[n - 1])? + self.rf.rate(-self.ghost_right)?,
        ));
        Ok(menu)
    }

    fn move_minus(&mut self, bond: usize) -> bool {
        let (a, b) = (bond, bond + 1);
        if self.omega_minus[a] - 1 < -self.slope_cap || self.omega_minus[b] + 1 > self.slope_cap {
            self.rejections += 1;
            return false;
        }
        self.omega_minus[a] -= 1;
        self.omega_minus[b] += 1;
        true
    }

    /// Applies one event from the menu.
    pub fn apply_event(&mut self, event: CoupledEvent) -> Result<bool> {
        let n = self.omega_minus.len();
        let ok = match event {
            CoupledEvent::Bulk { bond } => self.move_minus(bond),
            CoupledEvent::EdgeLeft => {
                if self.omega_minus[0] + 1 > self.slope_cap {
                    self.rejections += 1;
                    false
                } else {
                    self.omega_minus[0] += 1;
                    true
                }
            }
            CoupledEvent::EdgeRight => {
                if self.omega_minus[n - 1] - 1 < -self.slope_cap {
                    self.rejections += 1;
                    false
                } else {
                    self.omega_minus[n - 1] -= 1;
                    true
                }
            }
            CoupledEvent::TracerLeft => {
                let ok = self.move_minus(self.q - 1);
                if ok {
                    self.q -= 1;
                }
                ok
            }
            CoupledEvent::BothAtLeftBond => self.move_minus(self.q - 1),
            CoupledEvent::TracerRight => {
                // only the upper wall grows; the lower wall is untouched
                self.q += 1;
                true
            }
            CoupledEvent::BothAtRightBond => self.move_minus(self.q),
        };
        if self.q < 1 || self.q > n - 2 {
            return Err(Error::TracerAtBoundary { q: self.q, n });
        }
        Ok(ok)
    }

    fn draw_and_apply<R: Rng + ?Sized>(&mut self, t_cap: Option<f64>, rng: &mut R) -> Result<Option<CoupledEvent>> {
        self.ghost_left = self.marg_left.sample(rng);
        self.ghost_right = self.marg_right.sample(rng);
        let menu = self.event_menu()?;
        let total: f64 = menu.iter().map(|&(_, r)| r).sum();
        if !(total > 0.0) {
            return Err(Error::ZeroTotalRate);
        }
        let u: f64 = 1.0 - rng.gen::<f64>();
        let dt = -u.ln() / total;
        if let Some(cap) = t_cap {
            if self.time + dt > cap {
                self.time = cap;
                return Ok(None);
            }
        }
        self.time += dt;
        let mut x = rng.gen::<f64>() * total;
        let mut chosen = menu[menu.len() - 1].0;
        for &(ev, rate) in &menu {
            if x < rate {
                chosen = ev;
                break;
            }
            x -= rate;
        }
        self.apply_event(chosen)?;
        self.events += 1;
        Ok(Some(chosen))
    }

    /// One exact-simulation step over the full coupled menu.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<CoupledEvent> {
        Ok(self.draw_and_apply(None, rng)?.expect("uncapped step"))
    }

    /// Runs until `t_end`; exact by memorylessness of the holding times.
    pub fn run_until<R: Rng + ?Sized>(&mut self, t_end: f64, rng: &mut R) -> Result<()> {
        while self.time < t_end {
            if self.draw_and_apply(Some(t_end), rng)?.is_none() {
                break;
            }
        }
        Ok(())
    }
}

/// Events of the tracer-frame chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameEvent {
    /// Move at logical bond `i` (sites `i`, `i+1`); `-K-1` and `K` are the
    /// ghost edge bonds.
    Bond(i64),
    /// Lower wall catches up at bond `-1`, then the frame shifts under the
    /// observer (displacement -1).
    LeftJump,
    /// Upper wall grows at the tracer; pure frame shift (displacement +1).
    RightJump,
}

/// The slope field as seen from the defect tracer, on logical window
/// `[-K, K]` with O(1) frame shifts via a circular buffer.
#[derive(Debug, Clone)]
pub struct TracerFrame {
    rf: Arc<RateFunction>,
    k: i64,
    buf: Vec<i64>,
    /// Buffer slot of logical index `-K`.
    base: usize,
    theta_left: f64,
    theta_right: f64,
    marg_left: GibbsMarginal,
    marg_right: GibbsMarginal,
    ghost_left: i64,
    ghost_right: i64,
    time: f64,
    left_jumps: u64,
    right_jumps: u64,
    tree: SumTree,
    slope_cap: i64,
    rejections: u64,
    events: u64,
}

impl TracerFrame {
    /// Starts from the two-sided product measure: logical sites `<= -1`
    /// from `theta_left`, sites `>= 0` from `theta_right`.
    pub fn new<R: Rng + ?Sized>(
        rf: Arc<RateFunction>,
        k: i64,
        theta_left: f64,
        theta_right: f64,
        slope_cap: i64,
        rng: &mut R,
    ) -> Result<Self> {
        assert!(k >= 2, "window too small");
        let marg_left = build_marginal(&rf, theta_left, DEFAULT_TAIL_TARGET)?;
        let marg_right = build_marginal(&rf, theta_right, DEFAULT_TAIL_TARGET)?;
        let len = (2 * k + 1) as usize;
        let buf: Vec<i64> = (0..len)
            .map(|s| {
                let logical = s as i64 - k;
                if logical <= -1 { marg_left.sample(rng) } else { marg_right.sample(rng) }
            })
            .collect();
        let ghost_left = marg_left.sample(rng);
        let ghost_right = marg_right.sample(rng);
        let mut frame = Self {
            rf,
            k,
            buf,
            base: 0,
            theta_left,
            theta_right,
            marg_left,
            marg_right,
            ghost_left,
            ghost_right,
            time: 0.0,
            left_jumps: 0,
            right_jumps: 0,
            tree: SumTree::new(&[]),
            slope_cap,
            rejections: 0,
            events: 0,
        };
        frame.tree = SumTree::new(&frame.all_event_rates()?);
        Ok(frame)
    }

    pub fn window_k(&self) -> i64 {
        self.k
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn rejections(&self) -> u64 {
        self.rejections
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    /// `(left, right)` jump counters.
    pub fn jumps(&self) -> (u64, u64) {
        (self.left_jumps, self.right_jumps)
    }

    /// Net tracer displacement: right jumps minus left jumps.
    pub fn displacement(&self) -> i64 {
        self.right_jumps as i64 - self.left_jumps as i64
    }

    pub fn theta_left(&self) -> f64 {
        self.theta_left
    }

    pub fn theta_right(&self) -> f64 {
        self.theta_right
    }

    fn slot(&self, logical: i64) -> usize {
        debug_assert!(logical >= -self.k && logical <= self.k);
        let len = self.buf.len();
        (self.base + (logical + self.k) as usize) % len
    }

    /// Slope at logical index `i` (0 is the site right of the tracer).
    pub fn omega(&self, logical: i64) -> i64 {
        self.buf[self.slot(logical)]
    }

    fn set_omega(&mut self, logical: i64, w: i64) {
        let s = self.slot(logical);
        self.buf[s] = w;
    }

    /// Number of tree-indexed events: bonds `-K-1 ..= K` plus two jumps.
    fn event_count(&self) -> usize {
        (2 * self.k + 2) as usize + 2
    }

    fn bond_tree_index(&self, bond: i64) -> usize {
        (bond + self.k + 1) as usize
    }

    fn left_jump_index(&self) -> usize {
        (2 * self.k + 2) as usize
    }

    fn right_jump_index(&self) -> usize {
        (2 * self.k + 2) as usize + 1
    }

    /// Rate of logical bond `i`, with the tracer-frame correction at `-1`
    /// and ghost values at the edges.
    pub fn bond_rate(&self, bond: i64) -> Result<f64> {
        if bond == -self.k - 1 {
            Ok(self.rf.rate(self.ghost_left)? + self.rf.rate(-self.omega(-self.k))?)
        } else if bond == self.k {
            Ok(self.rf.rate(self.omega(self.k))? + self.rf.rate(-self.ghost_right)?)
        } else if bond == -1 {
            Ok(self.rf.rate(self.omega(-1))? + self.rf.rate(-self.omega(0) - 1)?)
        } else {
            Ok(self.rf.rate(self.omega(bond))? + self.rf.rate(-self.omega(bond + 1))?)
        }
    }

    /// Rate of the left-jump event, `r(-w_0) - r(-w_0 - 1)`.
    pub fn left_jump_rate(&self) -> Result<f64> {
        Ok(self.rf.rate(-self.omega(0))? - self.rf.rate(-self.omega(0) - 1)?)
    }

    /// Rate of the right-jump event, `r(w_0 + 1) - r(w_0)`.
    pub fn right_jump_rate(&self) -> Result<f64> {
        Ok(self.rf.rate(self.omega(0) + 1)? - self.rf.rate(self.omega(0))?)
    }

    fn all_event_rates(&self) -> Result<Vec<f64>> {
        let mut rates = Vec::with_capacity(self.event_count());
        for bond in -self.k - 1..=self.k {
            rates.push(self.bond_rate(bond)?);
        }
        rates.push(self.left_jump_rate()?);
        rates.push(self.right_jump_rate()?);
        Ok(rates)
    }

    /// The full event menu with current rates.
    pub fn event_menu(&self) -> Result<Vec<(FrameEvent, f64)>> {
        let mut menu = Vec::with_capacity(self.event_count());
        for bond in -self.k - 1..=self.k {
            menu.push((FrameEvent::Bond(bond), self.bond_rate(bond)?));
        }
        menu.push((FrameEvent::LeftJump, self.left_jump_rate()?));
        menu.push((FrameEvent::RightJump, self.right_jump_rate()?));
        Ok(menu)
    }

    /// Largest relative deviation between the event index and freshly
    /// recomputed rates.
    pub fn verify_rate_index(&self) -> Result<f64> {
        let rates = self.all_event_rates()?;
        let mut worst: f64 = 0.0;
        for (i, &r) in rates.iter().enumerate() {
            let dev = (self.tree.get(i) - r).abs() / r.max(1e-12);
            worst = worst.max(dev);
        }
        let direct: f64 = rates.iter().sum();
        worst = worst.max((self.tree.total() - direct).abs() / direct.max(1e-12));
        Ok(worst)
    }

    fn refresh_event(&mut self, idx: usize) -> Result<()> {
        let rate = if idx == self.left_jump_index() {
            self.left_jump_rate()?
        } else if idx == self.right_jump_index() {
            self.right_jump_rate()?
        } else {
            self.bond_rate(idx as i64 - self.k - 1)?
        };
        self.tree.update(idx, rate);
        Ok(())
    }

    /// Applies a bond move (edge bonds touch one real site), refreshing the
    /// affected event rates.
    fn apply_bond(&mut self, bond: i64) -> Result<bool> {
        let (l_site, r_site) = if bond == -self.k - 1 {
            (None, Some(-self.k))
        } else if bond == self.k {
            (Some(self.k), None)
        } else {
            (Some(bond), Some(bond + 1))
        };
        if let Some(s) = l_site {
            if self.omega(s) - 1 < -self.slope_cap {
                self.rejections += 1;
                return Ok(false);
            }
        }
        if let Some(s) = r_site {
            if self.omega(s) + 1 > self.slope_cap {
                self.rejections += 1;
                return Ok(false);
            }
        }
        if let Some(s) = l_site {
            let w = self.omega(s) - 1;
            self.set_omega(s, w);
        }
        if let Some(s) = r_site {
            let w = self.omega(s) + 1;
            self.set_omega(s, w);
        }
        for b in bond - 1..=bond + 1 {
            if b >= -self.k - 1 && b <= self.k {
                let idx = self.bond_tree_index(b);
                self.refresh_event(idx)?;
            }
        }
        // jump rates depend on the slope at the tracer
        if bond == -1 || bond == 0 {
            let li = self.left_jump_index();
            let ri = self.right_jump_index();
            self.refresh_event(li)?;
            self.refresh_event(ri)?;
        }
        Ok(true)
    }

    /// Tracer hopped left (`tau_1`): the window re-centers one step left;
    /// the site scrolling in at `-K` is freshly sampled.
    fn shift_left<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let len = self.buf.len();
        self.base = (self.base + len - 1) % len;
        let fresh = self.marg_left.sample(rng);
        self.set_omega(-self.k, fresh);
        self.left_jumps += 1;
        let rates = self.all_event_rates()?;
        self.tree.rebuild(&rates);
        Ok(())
    }

    /// Tracer hopped right (`tau_{-1}`); fresh sample scrolls in at `K`.
    fn shift_right<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let len = self.buf.len();
        self.base = (self.base + 1) % len;
        let fresh = self.marg_right.sample(rng);
        self.set_omega(self.k, fresh);
        self.right_jumps += 1;
        let rates = self.all_event_rates()?;
        self.tree.rebuild(&rates);
        Ok(())
    }

    fn resample_ghosts<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.ghost_left = self.marg_left.sample(rng);
        self.ghost_right = self.marg_right.sample(rng);
        let li = self.bond_tree_index(-self.k - 1);
        let ri = self.bond_tree_index(self.k);
        self.refresh_event(li)?;
        self.refresh_event(ri)?;
        Ok(())
    }

    fn apply_event_idx<R: Rng + ?Sized>(&mut self, idx: usize, rng: &mut R) -> Result<FrameEvent> {
        if idx == self.left_jump_index() {
            // lower wall catches up at bond -1, then the frame re-centers
            if self.apply_bond(-1)? {
                self.shift_left(rng)?;
            }
            Ok(FrameEvent::LeftJump)
        } else if idx == self.right_jump_index() {
            // pure frame shift: no slope in the window changes
            self.shift_right(rng)?;
            Ok(FrameEvent::RightJump)
        } else {
            let bond = idx as i64 - self.k - 1;
            self.apply_bond(bond)?;
            Ok(FrameEvent::Bond(bond))
        }
    }

    /// One exact-simulation step of the frame chain.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<FrameEvent> {
        self.resample_ghosts(rng)?;
        let total = self.tree.total();
        if !(total > 0.0) {
            return Err(Error::ZeroTotalRate);
        }
        let u: f64 = 1.0 - rng.gen::<f64>();
        self.time += -u.ln() / total;
        let x = rng.gen::<f64>() * total;
        let idx = self.tree.select(x);
        let ev = self.apply_event_idx(idx, rng)?;
        self.events += 1;
        Ok(ev)
    }

    /// Runs until `t_end`; exact by memorylessness of the holding times.
    pub fn run_until<R: Rng + ?Sized>(&mut self, t_end: f64, rng: &mut R) -> Result<()> {
        while self.time < t_end {
            self.resample_ghosts(rng)?;
            let total = self.tree.total();
            if !(total > 0.0) {
                return Err(Error::ZeroTotalRate);
            }
            let u: f64 = 1.0 - rng.gen::<f64>();
            let dt = -u.ln() / total;
            if self.time + dt > t_end {
                self.time = t_end;
                break;
            }
            self.time += dt;
            let x = rng.gen::<f64>() * total;
            let idx = self.tree.select(x);
            self.apply_event_idx(idx, rng)?;
            self.events += 1;
        }
        Ok(())
    }

    /// Runs to `t_end`, invoking `hook` every `sample_every` time units.
    pub fn run_sampling<R: Rng + ?Sized>(
        &mut self,
        t_end: f64,
        sample_every: f64,
        rng: &mut R,
        mut hook: impl FnMut(&TracerFrame),
    ) -> Result<()> {
        assert!(sample_every > 0.0);
        let mut next = self.time + sample_every;
        while next <= t_end + 1e-12 {
            self.run_until(next, rng)?;
            hook(self);
            next += sample_every;
        }
        self.run_until(t_end, rng)?;
        Ok(())
    }

    /// Test hook: pins a slope (logical coordinates) and refreshes rates.
    #[cfg(test)]
    pub(crate) fn pin_omega(&mut self, logical: i64, w: i64) {
        self.set_omega(logical, w);
        let rates = self.all_event_rates().unwrap();
        self.tree.rebuild(&rates);
    }
}

/// Tracer speed estimate with a batch-means standard error.
#[derive(Debug, Clone, Copy)]
pub struct SpeedEstimate {
    pub v_hat: f64,
    pub stderr: f64,
    pub batches: usize,
    pub elapsed: f64,
}

/// Measures `displacement / time` over `[frame.time(), t_end]` with the
/// standard error taken from at least 20 batch means.
pub fn measure_tracer_speed<R: Rng + ?Sized>(
    frame: &mut TracerFrame,
    t_end: f64,
    rng: &mut R,
    batches: usize,
) -> Result<SpeedEstimate> {
    let batches = batches.max(20);
    let t0 = frame.time();
    let d0 = frame.displacement();
    let elapsed = t_end - t0;
    if !(elapsed > 0.0) {
        return Err(Error::ZeroElapsedTime);
    }
    let dt = elapsed / batches as f64;
    let mut batch_v = Vec::with_capacity(batches);
    let mut last_d = d0;
    for b in 1..=batches {
        frame.run_until(t0 + b as f64 * dt, rng)?;
        let d = frame.displacement();
        batch_v.push((d - last_d) as f64 / dt);
        last_d = d;
    }
    let v_hat = (last_d - d0) as f64 / elapsed;
    let mean_b: f64 = batch_v.iter().sum::<f64>() / batches as f64;
    let var_b: f64 =
        batch_v.iter().map(|v| (v - mean_b) * (v - mean_b)).sum::<f64>() / (batches - 1) as f64;
    let stderr = (var_b / batches as f64).sqrt();
    Ok(SpeedEstimate { v_hat, stderr, batches, elapsed })
}

/// Law-of-large-numbers speed under a given one-site marginal at the
/// tracer: `E[r(w0+1) - r(w0)] - E[r(-w0) - r(-w0-1)]`.
pub fn analytic_tracer_speed(rf: &RateFunction, marginal: &GibbsMarginal) -> Result<f64> {
    let (lo, hi) = marginal.support();
    let mut v = 0.0;
    for z in lo..=hi {
        let gain = rf.rate(z + 1)? - rf.rate(z)?;
        let loss = rf.rate(-z)? - rf.rate(-z - 1)?;
        v += (gain - loss) * marginal.pmf(z);
    }
    Ok(v)
}

/// Closed form of the tracer speed for the exponential family:
/// `(e^beta - 1) e^theta - (1 - e^-beta) e^-theta`.
pub fn ebl_tracer_speed(beta: f64, theta_right: f64) -> f64 {
    (beta.exp() - 1.0) * theta_right.exp() - (1.0 - (-beta).exp()) * (-theta_right).exp()
}

/// Accumulates stationary-regime samples of the slopes around the tracer.
#[derive(Debug, Clone, Default)]
pub struct TracerSamples {
    pub n: u64,
    pub count_m1: HashMap<i64, u64>,
    pub count_0: HashMap<i64, u64>,
    sum_a: f64,
    sum_b: f64,
    sum_ab: f64,
    sum_a2: f64,
    sum_b2: f64,
}

impl TracerSamples {
    pub fn record(&mut self, frame: &TracerFrame) {
        self.n += 1;
        *self.count_m1.entry(frame.omega(-1)).or_insert(0) += 1;
        *self.count_0.entry(frame.omega(0)).or_insert(0) += 1;
        let a = frame.omega(-2) as f64;
        let b = frame.omega(2) as f64;
        self.sum_a += a;
        self.sum_b += b;
        self.sum_ab += a * b;
        self.sum_a2 += a * a;
        self.sum_b2 += b * b;
    }

    pub fn merge(&mut self, other: &TracerSamples) {
        self.n += other.n;
        for (&z, &c) in &other.count_m1 {
            *self.count_m1.entry(z).or_insert(0) += c;
        }
        for (&z, &c) in &other.count_0 {
            *self.count_0.entry(z).or_insert(0) += c;
        }
        self.sum_a += other.sum_a;
        self.sum_b += other.sum_b;
        self.sum_ab += other.sum_ab;
        self.sum_a2 += other.sum_a2;
        self.sum_b2 += other.sum_b2;
    }
}

/// Distribution comparison around the tracer.
#[derive(Debug, Clone, Copy)]
pub struct ShiftReport {
    pub n_samples: u64,
    /// TV between the empirical laws of `w_{-1}` and of `w_0 + 1`.
    pub tv_shift: f64,
    /// TV between the empirical law of `w_{-1}` and the exact left marginal.
    pub tv_left: f64,
    /// TV between the empirical law of `w_0` and the exact right marginal.
    pub tv_right: f64,
    /// Empirical correlation of `(w_{-2}, w_{+2})` and its ~1/sqrt(n) scale.
    pub far_correlation: f64,
    pub far_correlation_sigma: f64,
}

fn tv_counts(a: &HashMap<i64, u64>, b: &HashMap<i64, u64>, shift_b: i64, n: u64) -> f64 {
    let mut keys: Vec<i64> = a.keys().copied().collect();
    for &k in b.keys() {
        keys.push(k + shift_b);
    }
    keys.sort_unstable();
    keys.dedup();
    let nf = n as f64;
    0.5 * keys
        .iter()
        .map(|&z| {
            let pa = a.get(&z).copied().unwrap_or(0) as f64 / nf;
            let pb = b.get(&(z - shift_b)).copied().unwrap_or(0) as f64 / nf;
            (pa - pb).abs()
        })
        .sum::<f64>()
}

fn tv_against_exact(counts: &HashMap<i64, u64>, n: u64, exact: &GibbsMarginal) -> f64 {
    let (lo, hi) = exact.support();
    let mut keys: Vec<i64> = counts.keys().copied().collect();
    keys.extend(lo..=hi);
    keys.sort_unstable();
    keys.dedup();
    let nf = n as f64;
    0.5 * keys
        .iter()
        .map(|&z| {
            let emp = counts.get(&z).copied().unwrap_or(0) as f64 / nf;
            (emp - exact.pmf(z)).abs()
        })
        .sum::<f64>()
}

/// Compares the sampled laws around the tracer against each other and the
/// exact marginals.
pub fn shifted_marginal_check(
    samples: &TracerSamples,
    left: &GibbsMarginal,
    right: &GibbsMarginal,
) -> Result<ShiftReport> {
    if samples.n < 1000 {
        return Err(Error::Config(format!("only {} samples collected", samples.n)));
    }
    let n = samples.n;
    let nf = n as f64;
    let mean_a = samples.sum_a / nf;
    let mean_b = samples.sum_b / nf;
    let var_a = samples.sum_a2 / nf - mean_a * mean_a;
    let var_b = samples.sum_b2 / nf - mean_b * mean_b;
    let cov = samples.sum_ab / nf - mean_a * mean_b;
    let corr = cov / (var_a * var_b).sqrt();
    Ok(ShiftReport {
        n_samples: n,
        tv_shift: tv_counts(&samples.count_m1, &samples.count_0, 1, n),
        tv_left: tv_against_exact(&samples.count_m1, n, left),
        tv_right: tv_against_exact(&samples.count_0, n, right),
        far_correlation: corr,
        far_correlation_sigma: 1.0 / nf.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::DEFAULT_SLOPE_CAP;
    use crate::gibbs::rh_speed;
    use crate::rates::DEFAULT_DOMAIN_BOUND;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn ebl(beta: f64) -> Arc<RateFunction> {
        Arc::new(RateFunction::make_ebl(beta, DEFAULT_DOMAIN_BOUND).unwrap())
    }

    fn pair(beta: f64, seed: u64) -> CoupledPair {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        CoupledPair::new(ebl(beta), 41, 20, 1.0, 0.0, DEFAULT_SLOPE_CAP, &mut rng).unwrap()
    }

    #[test]
    fn special_rates_match_table_rows() {
        let mut p = pair(1.0, 1);
        p.set_slope_at_q(0);
        let s = p.special_rates().unwrap();
        // tracer-right at w_Q = 0: r(1) - r(0) = 2 sinh(1/2)
        assert!((s[2] - 1.0421906109874948).abs() < 1e-14);
        for (i, &r) in s.iter().enumerate() {
            assert!(r >= 0.0, "row {i} rate negative: {r}");
        }
    }

    #[test]
    fn column_sums_reproduce_standalone_wall_rates() {
        let rf = ebl(1.3);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..200 {
            let w_qm1 = rng.gen_range(-5..=5);
            let w_q = rng.gen_range(-5..=5);
            let w_qp1 = rng.gen_range(-5..=5);
            let r = |z: i64| rf.rate(z).unwrap();
            let row1 = r(-w_q) - r(-w_q - 1);
            let row2 = r(w_qm1) + r(-w_q - 1);
            let row3 = r(w_q + 1) - r(w_q);
            let row4 = r(w_q) + r(-w_qp1);
            // lower wall at bond Q-1: rows 1+2 give its standard rate
            let lower = r(w_qm1) + r(-w_q);
            assert!(((row1 + row2) - lower).abs() < 1e-12 * lower.max(1.0));
            // upper wall at bond Q: rows 3+4 give its standard rate
            let upper = r(w_q + 1) + r(-w_qp1);
            assert!(((row3 + row4) - upper).abs() < 1e-12 * upper.max(1.0));
            assert!(row1 >= 0.0 && row3 >= 0.0);
        }
    }

    #[test]
    fn coupled_events_preserve_single_discrepancy() {
        let mut p = pair(1.0, 33);
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        for _ in 0..3000 {
            let before_minus = p.omega_minus().to_vec();
            let before_q = p.q();
            let ev = p.step(&mut rng).unwrap();
            let plus = p.omega_plus();
            let minus = p.omega_minus();
            let mut diffs = 0;
            for i in 0..minus.len() {
                let d = plus[i] - minus[i];
                if d != 0 {
                    assert_eq!(d, 1);
                    assert_eq!(i, p.q());
                    diffs += 1;
                }
            }
            assert_eq!(diffs, 1, "event {ev:?} from q={before_q}");
            if ev == CoupledEvent::TracerRight {
                assert_eq!(
                    p.omega_minus(),
                    before_minus.as_slice(),
                    "tracer-right must not move the lower wall"
                );
                assert_eq!(p.q(), before_q + 1);
            }
        }
        assert_eq!(p.rejections(), 0);
    }

    #[test]
    fn tracer_left_then_right_restores_position() {
        let mut p = pair(1.0, 5);
        let q0 = p.q();
        p.apply_event(CoupledEvent::TracerLeft).unwrap();
        assert_eq!(p.q(), q0 - 1);
        p.apply_event(CoupledEvent::TracerRight).unwrap();
        assert_eq!(p.q(), q0);
    }

    #[test]
    fn frame_rates_match_generator_terms() {
        let rf = ebl(1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(70);
        let mut frame =
            TracerFrame::new(rf.clone(), 8, 1.0, 0.0, DEFAULT_SLOPE_CAP, &mut rng).unwrap();
        frame.pin_omega(0, 0);
        assert!((frame.left_jump_rate().unwrap() - 0.38340049956420355).abs() < 1e-14);
        let r = |z: i64| rf.rate(z).unwrap();
        // bond -1 + left jump = unmarked lower-wall rate r(w_{-1}) + r(-w_0)
        let sum = frame.bond_rate(-1).unwrap() + frame.left_jump_rate().unwrap();
        let unmarked = r(frame.omega(-1)) + r(-frame.omega(0));
        assert!((sum - unmarked).abs() < 1e-12 * unmarked.max(1.0));
        // right jump + bond 0 = upper-wall rate r(w_0 + 1) + r(-w_1)
        let sum2 = frame.right_jump_rate().unwrap() + frame.bond_rate(0).unwrap();
        let upper = r(frame.omega(0) + 1) + r(-frame.omega(1));
        assert!((sum2 - upper).abs() < 1e-12 * upper.max(1.0));
    }

    #[test]
    fn right_jump_changes_no_slopes_only_frame() {
        let rf = ebl(1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(71);
        let mut frame = TracerFrame::new(rf, 6, 1.0, 0.0, DEFAULT_SLOPE_CAP, &mut rng).unwrap();
        let before: Vec<i64> = (-6..=6).map(|i| frame.omega(i)).collect();
        let idx = frame.right_jump_index();
        frame.apply_event_idx(idx, &mut rng).unwrap();
        assert_eq!(frame.displacement(), 1);
        // every surviving logical site shows the old value shifted by one
        for i in -6..=5i64 {
            assert_eq!(frame.omega(i), before[(i + 1 + 6) as usize], "logical {i}");
        }
        assert!(frame.verify_rate_index().unwrap() < 1e-12);
    }

    #[test]
    fn left_jump_applies_move_then_shift() {
        let rf = ebl(1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(72);
        let mut frame = TracerFrame::new(rf, 6, 1.0, 0.0, DEFAULT_SLOPE_CAP, &mut rng).unwrap();
        let before: Vec<i64> = (-6..=6).map(|i| frame.omega(i)).collect();
        let idx = frame.left_jump_index();
        frame.apply_event_idx(idx, &mut rng).unwrap();
        assert_eq!(frame.displacement(), -1);
        // old w_{-1} - 1 sits at logical 0, old w_0 + 1 at logical 1
        assert_eq!(frame.omega(0), before[(-1i64 + 6) as usize] - 1);
        assert_eq!(frame.omega(1), before[(0i64 + 6) as usize] + 1);
        for i in 2..=6i64 {
            assert_eq!(frame.omega(i), before[(i - 1 + 6) as usize]);
        }
        assert!(frame.verify_rate_index().unwrap() < 1e-12);
    }

    #[test]
    fn frame_steps_keep_index_exact() {
        let rf = ebl(1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(73);
        let mut frame = TracerFrame::new(rf, 16, 1.0, 0.0, DEFAULT_SLOPE_CAP, &mut rng).unwrap();
        for _ in 0..20_000 {
            frame.step(&mut rng).unwrap();
        }
        assert_eq!(frame.rejections(), 0);
        assert!(frame.verify_rate_index().unwrap() < 1e-9);
        let (l, r) = frame.jumps();
        assert_eq!(frame.displacement(), r as i64 - l as i64);
    }

    #[test]
    fn analytic_speed_closed_form_and_rh_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        for _ in 0..5 {
            let beta = 0.5 + 1.5 * rng.gen::<f64>();
            let theta_r = -1.0 + 2.0 * rng.gen::<f64>();
            let rf = ebl(beta);
            let marg = build_marginal(&rf, theta_r, 1e-15).unwrap();
            let v = analytic_tracer_speed(&rf, &marg).unwrap();
            let closed = ebl_tracer_speed(beta, theta_r);
            assert!((v - closed).abs() < 1e-10, "beta={beta} theta={theta_r}: {v} vs {closed}");
            let s = rh_speed(&rf, theta_r + beta, theta_r).unwrap();
            assert!((v - s).abs() < 1e-10, "v={v} s={s}");
        }
        // antisymmetric point: v = 0 at theta_r = -beta/2
        let rf = ebl(1.0);
        let marg = build_marginal(&rf, -0.5, 1e-15).unwrap();
        assert!(analytic_tracer_speed(&rf, &marg).unwrap().abs() < 1e-12);
    }

    #[test]
    fn measured_speed_small_run() {
        let rf = ebl(1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(606);
        let mut frame = TracerFrame::new(rf, 24, 1.0, 0.0, DEFAULT_SLOPE_CAP, &mut rng).unwrap();
        let est = measure_tracer_speed(&mut frame, 400.0, &mut rng, 20).unwrap();
        let target = ebl_tracer_speed(1.0, 0.0);
        assert!(
            (est.v_hat - target).abs() < 4.0 * est.stderr.max(0.02),
            "v={} +- {} vs {}",
            est.v_hat,
            est.stderr,
            target
        );
        assert_eq!(frame.rejections(), 0);
    }

    #[test]
    fn symmetric_profile_speed_is_zero() {
        let rf = ebl(1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(607);
        let mut frame = TracerFrame::new(rf, 24, 0.5, -0.5, DEFAULT_SLOPE_CAP, &mut rng).unwrap();
        let est = measure_tracer_speed(&mut frame, 300.0, &mut rng, 20).unwrap();
        assert!(est.v_hat.abs() < 4.0 * est.stderr.max(0.02), "v={} se={}", est.v_hat, est.stderr);
    }

    #[test]
    fn stderr_scales_like_inverse_sqrt_time() {
        let rf = ebl(1.0);
        let run = |t: f64, seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut frame =
                TracerFrame::new(rf.clone(), 16, 1.0, 0.0, DEFAULT_SLOPE_CAP, &mut rng).unwrap();
            measure_tracer_speed(&mut frame, t, &mut rng, 20).unwrap().stderr
        };
        // average a few seeds to damp batch noise
        let se_long: f64 = (0..4).map(|s| run(800.0, s)).sum::<f64>() / 4.0;
        let se_short: f64 = (0..4).map(|s| run(400.0, 100 + s)).sum::<f64>() / 4.0;
        let ratio = se_short / se_long;
        assert!(ratio > 1.1 && ratio < 2.0, "ratio={ratio}");
    }

    #[test]
    fn zero_elapsed_time_is_an_error() {
        let rf = ebl(1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(608);
        let mut frame = TracerFrame::new(rf, 8, 1.0, 0.0, DEFAULT_SLOPE_CAP, &mut rng).unwrap();
        assert!(matches!(
            measure_tracer_speed(&mut frame, 0.0, &mut rng, 20),
            Err(Error::ZeroElapsedTime)
        ));
    }

    #[test]
    fn shifted_marginal_small_run() {
        let rf = ebl(1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(909);
        let mut frame =
            TracerFrame::new(rf.clone(), 24, 1.0, 0.0, DEFAULT_SLOPE_CAP, &mut rng).unwrap();
        let mut samples = TracerSamples::default();
        frame.run_sampling(2000.0, 0.25, &mut rng, |f| samples.record(f)).unwrap();
        let left = build_marginal(&rf, 1.0, 1e-15).unwrap();
        let right = build_marginal(&rf, 0.0, 1e-15).unwrap();
        let report = shifted_marginal_check(&samples, &left, &right).unwrap();
        assert!(report.n_samples >= 7000);
        assert!(report.tv_shift < 0.05, "tv_shift={}", report.tv_shift);
        assert!(report.tv_left < 0.05, "tv_left={}", report.tv_left);
        assert!(report.tv_right < 0.05, "tv_right={}", report.tv_right);
        assert!(
            report.far_correlation.abs() < 5.0 * report.far_correlation_sigma.max(0.02),
            "corr={}",
            report.far_correlation
        );
    }

    #[test]
    fn insufficient_samples_rejected() {
        let samples = TracerSamples::default();
        let rf = ebl(1.0);
        let m = build_marginal(&rf, 0.0, 1e-15).unwrap();
        assert!(shifted_marginal_check(&samples, &m, &m).is_err());
    }

    #[test]
    fn coupled_and_frame_displacement_agree_quick() {
        // small matched cross-check; the acceptance suite runs the full one
        let reps = 60;
        let t = 20.0;
        let mut coupled_sum = 0.0;
        let mut coupled_sq = 0.0;
        for s in 0..reps {
            let mut rng = ChaCha12Rng::seed_from_u64(10_000 + s);
            let mut p =
                CoupledPair::new(ebl(1.0), 161, 60, 1.0, 0.0, DEFAULT_SLOPE_CAP, &mut rng).unwrap();
            p.run_until(t, &mut rng).unwrap();
            let d = p.displacement() as f64;
            coupled_sum += d;
            coupled_sq += d * d;
        }
        let mut frame_sum = 0.0;
        let mut frame_sq = 0.0;
        for s in 0..reps {
            let mut rng = ChaCha12Rng::seed_from_u64(20_000 + s);
            let mut f = TracerFrame::new(ebl(1.0), 24, 1.0, 0.0, DEFAULT_SLOPE_CAP, &mut rng).unwrap();
            f.run_until(t, &mut rng).unwrap();
            let d = f.displacement() as f64;
            frame_sum += d;
            frame_sq += d * d;
        }
        let n = reps as f64;
        let m1 = coupled_sum / n;
        let m2 = frame_sum / n;
        let v1 = (coupled_sq / n - m1 * m1) / n;
        let v2 = (frame_sq / n - m2 * m2) / n;
        let sigma = (v1 + v2).sqrt();
        assert!((m1 - m2).abs() < 4.0 * sigma, "coupled {m1} vs frame {m2} (sigma {sigma})");
    }
}
