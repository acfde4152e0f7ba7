//! Energy tail probabilities and rate functions.

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::logmath::log_sum_exp;
use crate::spectrum::{convolve_n_with, gibbs_state, rational_to_f64, Rational, SiteSpectrum};
use crate::state::DiagonalState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Above,
    Below,
}

/// ln Tr[ρ Π], Π projecting on total energy ≥ n(Ũ+x) (or ≤ n(Ũ−x)),
/// where Ũ is the state's own mean energy per site.
pub fn tail_log_prob(state: &DiagonalState, grid_unit: Rational, n: u64, x: f64, side: Side) -> Result<f64> {
    if !state.has_energies() {
        return Err(Error::NonThermalState);
    }
    let u = rational_to_f64(&grid_unit);
    let mean = state.mean_energy_units()?;
    let shift = n as f64 * x / u;
    let threshold = match side {
        Side::Above => mean + shift,
        Side::Below => mean - shift,
    };
    let tol = 1e-9 * threshold.abs().max(1.0);
    let masses: Vec<f64> = state
        .blocks()
        .iter()
        .filter(|b| {
            let e = b.energy.unwrap() as f64;
            match side {
                Side::Above => e >= threshold - tol,
                Side::Below => e <= threshold + tol,
            }
        })
        .map(|b| b.log_mass())
        .collect();
    Ok(log_sum_exp(&masses))
}

/// Finite-n rate estimates, one row per n.
#[derive(Debug, Clone, PartialEq)]
pub struct RateCurve {
    pub x_grid: Vec<f64>,
    pub rate: Vec<f64>,
    pub n_used: Vec<u64>,
}

impl RateCurve {
    /// True when some row has no tail mass at all (rate +inf).
    pub fn is_degenerate(&self) -> bool {
        self.rate.iter().any(|r| r.is_infinite())
    }
}

pub fn rate_estimate(site: &SiteSpectrum, beta: f64, x: f64, n_list: &[u64]) -> Result<RateCurve> {
    rate_estimate_with(site, beta, x, n_list, Execution::default())
}

pub fn rate_estimate_with(
    site: &SiteSpectrum,
    beta: f64,
    x: f64,
    n_list: &[u64],
    exec: Execution,
) -> Result<RateCurve> {
    if x == 0.0 || !x.is_finite() {
        return Err(Error::OutOfRange { value: x, range: "x != 0".into() });
    }
    if let Some(&n) = n_list.iter().find(|&&n| n < 2) {
        return Err(Error::OutOfRange { value: n as f64, range: "n >= 2".into() });
    }
    let side = if x > 0.0 { Side::Above } else { Side::Below };
    let rows = exec::map(exec, n_list, |&n| -> Result<f64> {
        let h = convolve_n_with(site, n, Execution::Sequential)?;
        let st = gibbs_state(&h, beta, site.grid_unit())?;
        let lp = tail_log_prob(&st, site.grid_unit(), n, x.abs(), side)?;
        Ok(-lp / n as f64)
    });
    let rate = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(RateCurve { x_grid: vec![x; n_list.len()], rate, n_used: n_list.to_vec() })
}

/// Cramér rate sup_t [t(Ũ+x) − ln⟨e^{tE}⟩] of i.i.d. Gibbs sites.
pub fn rate_analytic(site: &SiteSpectrum, beta: f64, x: f64) -> Result<f64> {
    let pots = crate::spectrum::potentials(site, beta)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    let u = rational_to_f64(&site.grid_unit());
    let levels: Vec<(f64, f64)> = site
        .grid_levels()
        .iter()
        .map(|&(e, d)| (e as f64 * u, (d as f64).ln() - beta * e as f64 * u))
        .collect();
    let shift = rational_to_f64(&site.shift());
    let target = pots.u_tilde - shift + x;
    let top = levels.last().unwrap().0;
    if !(target > 0.0 && target < top) {
        return Err(Error::OutOfRange {
            value: x,
            range: format!("({}, {})", -(pots.u_tilde - shift), top - (pots.u_tilde - shift)),
        });
    }
    let log_w0 = log_sum_exp(&levels.iter().map(|l| l.1).collect::<Vec<_>>());
    let cgf = |t: f64| log_sum_exp(&levels.iter().map(|l| l.1 + t * l.0).collect::<Vec<_>>()) - log_w0;
    let mean = |t: f64| {
        let lw: Vec<f64> = levels.iter().map(|l| l.1 + t * l.0).collect();
        let lz = log_sum_exp(&lw);
        levels.iter().zip(&lw).map(|(l, w)| (w - lz).exp() * l.0).sum::<f64>()
    };
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while mean(lo) > target {
        lo *= 2.0;
    }
    while mean(hi) < target {
        hi *= 2.0;
    }
    while hi - lo > 1e-12 * hi.abs().max(lo.abs()).max(1.0) {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    Ok((t * target - cgf(t)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::convolve_n;
    use num_rational::Ratio;

    fn qubit() -> SiteSpectrum {
        SiteSpectrum::new(&[(Ratio::new(0, 1), 1), (Ratio::new(1, 1), 1)]).unwrap()
    }

    fn kl(a: f64, b: f64) -> f64 {
        a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln()
    }

    fn ln_choose(n: u64, k: u64) -> f64 {
        (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
    }

    #[test]
    fn single_site_upper_tail() {
        let st = gibbs_state(&convolve_n(&qubit(), 1).unwrap(), 1.0, Ratio::new(1, 1)).unwrap();
        let lp = tail_log_prob(&st, Ratio::new(1, 1), 1, 0.5, Side::Above).unwrap();
        assert!((lp.exp() - 0.268941).abs() < 1e-6);
        let lp = tail_log_prob(&st, Ratio::new(1, 1), 1, 5.0, Side::Above).unwrap();
        assert_eq!(lp, f64::NEG_INFINITY);
    }

    #[test]
    fn binomial_tail_oracle() {
        let n = 20;
        let st = gibbs_state(&convolve_n(&qubit(), n).unwrap(), 1.0, Ratio::new(1, 1)).unwrap();
        let lp = tail_log_prob(&st, Ratio::new(1, 1), n, 0.2, Side::Above).unwrap();
        let lz1 = (1.0 + (-1f64).exp()).ln();
        let terms: Vec<f64> = (10..=n).map(|k| ln_choose(n, k) - k as f64 - n as f64 * lz1).collect();
        assert!((lp - log_sum_exp(&terms)).abs() < 1e-12);
    }

    #[test]
    fn needs_energy_labels() {
        let st = gibbs_state(&convolve_n(&qubit(), 3).unwrap(), 1.0, Ratio::new(1, 1)).unwrap();
        let mut b = st.blocks().to_vec();
        b[0].energy = None;
        let st = DiagonalState::new(b).unwrap();
        assert_eq!(tail_log_prob(&st, Ratio::new(1, 1), 3, 0.1, Side::Above), Err(Error::NonThermalState));
    }

    #[test]
    fn analytic_matches_binary_kl() {
        let q = qubit();
        let i = rate_analytic(&q, 1.0, 0.2).unwrap();
        assert!((i - 0.0909864).abs() < 1e-7);
        assert!((i - kl(0.468941, 0.268941)).abs() < 1e-6);
        let u = (-1f64).exp() / (1.0 + (-1f64).exp());
        assert!((rate_analytic(&q, 1.0, -0.2).unwrap() - kl(u - 0.2, u)).abs() < 1e-12);
        assert!((rate_analytic(&q, 1.0, 0.2).unwrap() - kl(u + 0.2, u)).abs() < 1e-12);
        assert_eq!(rate_analytic(&q, 1.0, 0.0).unwrap(), 0.0);
        assert!(rate_analytic(&q, 1.0, 0.9).is_err());
    }

    #[test]
    fn estimates_approach_analytic() {
        let q = qubit();
        let c = rate_estimate(&q, 1.0, 0.2, &[50, 100, 200, 400]).unwrap();
        let exact = rate_analytic(&q, 1.0, 0.2).unwrap();
        let errs: Vec<f64> = c.rate.iter().map(|r| (r - exact).abs()).collect();
        for w in errs.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn single_level_is_flagged() {
        let s = SiteSpectrum::new(&[(Ratio::new(0, 1), 2)]).unwrap();
        let c = rate_estimate(&s, 1.0, 0.1, &[4]).unwrap();
        assert!(c.is_degenerate());
    }
}
