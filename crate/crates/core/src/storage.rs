//! Work storage: an equally spaced ladder with one state per rung.

use crate::error::{Error, Result};
use crate::spectrum::{rational_to_f64, EnergyHistogram, Rational};

const EDGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ladder {
    pub unit: Rational,
    pub num_rungs: u64,
}

pub fn ladder_new(unit: Rational, num_rungs: u64) -> Result<Ladder> {
    if num_rungs == 0 {
        return Err(Error::ZeroRungs);
    }
    if unit <= Rational::from_integer(0) {
        return Err(Error::OutOfRange { value: rational_to_f64(&unit), range: "unit > 0".into() });
    }
    Ok(Ladder { unit, num_rungs })
}

impl Ladder {
    pub fn unit_f64(&self) -> f64 {
        rational_to_f64(&self.unit)
    }

    pub fn energy(&self, rung: i64) -> f64 {
        rung as f64 * self.unit_f64()
    }

    pub fn energies(&self) -> Vec<f64> {
        (0..self.num_rungs as i64).map(|r| self.energy(r)).collect()
    }

    pub fn contains(&self, rung: i64) -> bool {
        rung >= 0 && (rung as u64) < self.num_rungs
    }
}

/// Inclusive rung range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub lo: i64,
    pub hi: i64,
}

impl Window {
    pub fn count(&self) -> u64 {
        (self.hi - self.lo + 1) as u64
    }
}

/// Rungs with n(u−δ) ≤ energy ≤ n(u+δ).
pub fn window(ladder: &Ladder, n: u64, u_center: f64, delta: f64) -> Result<Window> {
    if u_center - delta <= 0.0 {
        return Err(Error::WindowTouchesGround);
    }
    let unit = ladder.unit_f64();
    let lo = n as f64 * (u_center - delta) / unit;
    let hi = n as f64 * (u_center + delta) / unit;
    let w = Window {
        lo: (lo - EDGE_TOL * lo.abs().max(1.0)).ceil() as i64,
        hi: (hi + EDGE_TOL * hi.abs().max(1.0)).floor() as i64,
    };
    if w.lo > w.hi {
        return Err(Error::EmptyWindow);
    }
    if !ladder.contains(w.hi) {
        return Err(Error::WindowTouchesTop { top: ladder.num_rungs - 1 });
    }
    Ok(w)
}

/// Probability distribution over rungs, stored densely from `offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderState {
    offset: i64,
    probs: Vec<f64>,
}

impl LadderState {
    pub fn from_dense(offset: i64, probs: Vec<f64>) -> Self {
        let mut s = LadderState { offset, probs };
        s.trim();
        s
    }

    pub fn uniform(w: Window) -> Self {
        let c = w.count();
        LadderState { offset: w.lo, probs: vec![1.0 / c as f64; c as usize] }
    }

    fn trim(&mut self) {
        let first = self.probs.iter().position(|&p| p != 0.0);
        match first {
            None => {
                self.probs.clear();
            }
            Some(f) => {
                let last = self.probs.iter().rposition(|&p| p != 0.0).unwrap();
                self.probs = self.probs[f..=last].to_vec();
                self.offset += f as i64;
            }
        }
    }

    pub fn offset(&self) -> i64 {
        self.offset
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, rung: i64) -> f64 {
        let i = rung - self.offset;
        if i < 0 || i as usize >= self.probs.len() {
            0.0
        } else {
            self.probs[i as usize]
        }
    }

    pub fn log_prob(&self, rung: i64) -> f64 {
        self.prob(rung).ln()
    }

    /// `(first, last)` occupied rung.
    pub fn support(&self) -> Option<(i64, i64)> {
        if self.probs.is_empty() {
            None
        } else {
            Some((self.offset, self.offset + self.probs.len() as i64 - 1))
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn entropy(&self) -> f64 {
        self.probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }

    pub fn mean_rung(&self) -> f64 {
        self.probs.iter().enumerate().map(|(i, &p)| p * (self.offset + i as i64) as f64).sum::<f64>()
            / self.total_mass()
    }

    pub fn mass_in(&self, lo: i64, hi: i64) -> f64 {
        (lo.max(self.offset)..=hi.min(self.offset + self.probs.len() as i64 - 1))
            .map(|r| self.prob(r))
            .sum()
    }

    /// Total variation (half L1) distance.
    pub fn tv(&self, other: &LadderState) -> f64 {
        let (a, b) = match (self.support(), other.support()) {
            (Some(x), Some(y)) => (x.0.min(y.0), x.1.max(y.1)),
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => return 0.0,
        };
        0.5 * (a..=b).map(|r| (self.prob(r) - other.prob(r)).abs()).sum::<f64>()
    }
}

/// Uniform state on the window n(u±δ).
pub fn microcanonical(ladder: &Ladder, n: u64, u_center: f64, delta: f64) -> Result<LadderState> {
    Ok(LadderState::uniform(window(ladder, n, u_center, delta)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosureReport {
    pub max_shift: i64,
    /// Reachable rungs at or above `num_rungs`.
    pub top_violations: Vec<i64>,
    /// Reachable rungs e' ≤ 0, excluded by the positivity proviso.
    pub ground_excluded: Vec<i64>,
    pub ok: bool,
}

/// Every shift e + h − h' from the window must land on an existing rung.
pub fn closure_check(ladder: &Ladder, system_hist: &EnergyHistogram, window: &Window) -> ClosureReport {
    let span = system_hist.max_energy() - system_hist.min_energy();
    let lo = window.lo - span;
    let hi = window.hi + span;
    let top_violations: Vec<i64> = (lo..=hi).filter(|&r| r >= ladder.num_rungs as i64).collect();
    let ground_excluded: Vec<i64> = (lo..=hi).filter(|&r| r <= 0).collect();
    ClosureReport { max_shift: span, ok: top_violations.is_empty(), top_violations, ground_excluded }
}

/// Rungs covering n(Ũ_W + |ΔŨ| + 8δ) plus the system span, with 20% headroom.
pub fn default_num_rungs(unit: Rational, n: u64, u_w: f64, du: f64, delta: f64, span_units: i64) -> u64 {
    let top = n as f64 * (u_w + du.abs() + 8.0 * delta) / rational_to_f64(&unit) + span_units as f64;
    (1.2 * top).ceil().max(1.0) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{convolve_n, SiteSpectrum};
    use num_rational::Ratio;

    #[test]
    fn ladder_energies() {
        assert_eq!(ladder_new(Ratio::new(1, 1), 5).unwrap().energies(), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ladder_new(Ratio::new(1, 2), 3).unwrap().energies(), vec![0.0, 0.5, 1.0]);
        assert_eq!(ladder_new(Ratio::new(1, 1), 0).unwrap_err(), Error::ZeroRungs);
    }

    #[test]
    fn window_count() {
        let l = ladder_new(Ratio::new(1, 1), 100).unwrap();
        let s = microcanonical(&l, 10, 2.0, 0.1).unwrap();
        assert_eq!(s.support(), Some((19, 21)));
        for r in 19..=21 {
            assert!((s.prob(r) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s.entropy() - 3f64.ln()).abs() < 1e-15);
        let s = microcanonical(&l, 10, 2.0, 0.01).unwrap();
        assert_eq!(s.support(), Some((20, 20)));
        assert_eq!(microcanonical(&l, 10, 0.05, 0.1).unwrap_err(), Error::WindowTouchesGround);
        assert_eq!(microcanonical(&l, 10, 2.05, 0.01).unwrap_err(), Error::EmptyWindow);
        assert!(matches!(microcanonical(&l, 10, 9.95, 0.1), Err(Error::WindowTouchesTop { .. })));
    }

    #[test]
    fn closure() {
        let q = SiteSpectrum::new(&[(Ratio::new(0, 1), 1), (Ratio::new(1, 1), 1)]).unwrap();
        let h = convolve_n(&q, 10).unwrap();
        let l = ladder_new(Ratio::new(1, 1), 100).unwrap();
        let w = window(&l, 10, 2.0, 0.1).unwrap();
        let r = closure_check(&l, &h, &w);
        assert!(r.ok && r.ground_excluded.is_empty());
        let small = ladder_new(Ratio::new(1, 1), 25).unwrap();
        let r = closure_check(&small, &h, &w);
        assert!(!r.ok);
        assert_eq!(r.top_violations, (25..=31).collect::<Vec<_>>());
        let w = window(&l, 10, 0.5, 0.1).unwrap();
        let r = closure_check(&l, &h, &w);
        assert_eq!(*r.ground_excluded.last().unwrap(), 0);
    }

    #[test]
    fn tv_between_states() {
        let a = LadderState::uniform(Window { lo: 0, hi: 1 });
        let b = LadderState::uniform(Window { lo: 1, hi: 2 });
        assert!((a.tv(&b) - 0.5).abs() < 1e-15);
        assert_eq!(a.tv(&a), 0.0);
    }
}
