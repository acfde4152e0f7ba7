//! Typical energy shells and truncated Gibbs states.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::logmath::{log_close, log_sum_exp};
use crate::spectrum::{convolve_n, gibbs_state, potentials, EnergyGrid, EnergyHistogram, SiteSpectrum};
use crate::state::{Block, DiagonalState};

const EDGE_TOL: f64 = 1e-9;

/// Total energies n(c−ε) ≤ E ≤ n(c+ε), rounded inward to grid units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shell {
    pub center: f64,
    pub half_width: f64,
    pub lo_units: i64,
    pub hi_units: i64,
}

impl Shell {
    /// `center` is a real energy per site; the grid fixes units and origin.
    pub fn around(center: f64, half_width: f64, n: u64, grid: &EnergyGrid) -> Shell {
        let lo = grid.units_of(n as f64 * (center - half_width), n);
        let hi = grid.units_of(n as f64 * (center + half_width), n);
        Shell {
            center,
            half_width,
            lo_units: (lo - EDGE_TOL * lo.abs().max(1.0)).ceil() as i64,
            hi_units: (hi + EDGE_TOL * hi.abs().max(1.0)).floor() as i64,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lo_units > self.hi_units
    }

    pub fn contains(&self, energy: i64) -> bool {
        self.lo_units <= energy && energy <= self.hi_units
    }
}

fn energy_of(b: &Block) -> Result<i64> {
    b.energy.ok_or(Error::NonThermalState)
}

/// Keeps the blocks inside the shell and renormalizes; returns the kept mass.
pub fn shell_project(state: &DiagonalState, shell: &Shell) -> Result<(DiagonalState, f64)> {
    let mut kept = Vec::new();
    for b in state.blocks() {
        if shell.contains(energy_of(b)?) {
            kept.push(*b);
        }
    }
    let log_kept = log_sum_exp(&kept.iter().map(Block::log_mass).collect::<Vec<_>>());
    if log_kept == f64::NEG_INFINITY {
        return Err(Error::EmptyShell);
    }
    for b in &mut kept {
        b.log_p -= log_kept;
    }
    Ok((DiagonalState::from_blocks(kept), log_kept.exp()))
}

/// ln of the mass outside the shell, accurate when that mass is tiny.
pub fn excluded_log_mass(state: &DiagonalState, shell: &Shell) -> Result<f64> {
    let mut out = Vec::new();
    for b in state.blocks() {
        if !shell.contains(energy_of(b)?) {
            out.push(b.log_mass());
        }
    }
    Ok(log_sum_exp(&out))
}

/// ln D for the shell.
pub fn shell_dim_log(hist: &EnergyHistogram, shell: &Shell) -> Result<f64> {
    let v: Vec<f64> = hist
        .entries()
        .into_iter()
        .filter(|(e, _)| shell.contains(*e))
        .map(|(_, l)| l)
        .collect();
    let d = log_sum_exp(&v);
    if d == f64::NEG_INFINITY {
        Err(Error::EmptyShell)
    } else {
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DimBoundsReport {
    pub n: u64,
    pub log_dim_rate: f64,
    pub lower: f64,
    pub upper: f64,
    pub slack: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
    /// Positive when the bound holds.
    pub lower_margin: f64,
    pub upper_margin: f64,
}

/// Checks S̃ − 2βε − η ≤ (1/n) ln D ≤ S̃ + 2βε + η with η = ln(n·range)/n.
pub fn dim_bounds_check(site: &SiteSpectrum, beta: f64, eps: f64, n: u64) -> Result<DimBoundsReport> {
    let pots = potentials(site, beta)?;
    let hist = convolve_n(site, n)?;
    let shell = Shell::around(pots.u_tilde, eps, n, &site.grid());
    let log_dim = match shell_dim_log(&hist, &shell) {
        Ok(d) => d,
        Err(Error::EmptyShell) => f64::NEG_INFINITY,
        Err(e) => return Err(e),
    };
    let levels = (n as f64 * site.max_units() as f64).max(1.0);
    let slack = levels.ln() / n as f64;
    let rate = log_dim / n as f64;
    let lower = pots.s_tilde - 2.0 * beta * eps - slack;
    let upper = pots.s_tilde + 2.0 * beta * eps + slack;
    Ok(DimBoundsReport {
        n,
        log_dim_rate: rate,
        lower,
        upper,
        slack,
        lower_ok: rate >= lower,
        upper_ok: rate <= upper,
        lower_margin: rate - lower,
        upper_margin: upper - rate,
    })
}

/// Exact Σ|p − p̃| between a state and its shell truncation.
pub fn truncation_distance(state: &DiagonalState, truncated: &DiagonalState, kept_mass: f64) -> f64 {
    let _ = kept_mass;
    let mut pool: BTreeMap<Option<i64>, Vec<(Block, bool)>> = BTreeMap::new();
    for b in truncated.blocks() {
        pool.entry(b.energy).or_default().push((*b, false));
    }
    let mut acc = 0.0;
    for b in state.blocks() {
        let p = b.log_p.exp();
        let count = b.log_count.exp();
        let hit = pool.get_mut(&b.energy).and_then(|v| {
            v.iter_mut().find(|(t, used)| !*used && log_close(t.log_count, b.log_count, 1e-12))
        });
        match hit {
            Some((t, used)) => {
                *used = true;
                acc += count * (p - t.log_p.exp()).abs();
            }
            None => acc += b.mass(),
        }
    }
    for v in pool.values() {
        for (t, used) in v {
            if !used {
                acc += t.mass();
            }
        }
    }
    acc
}

/// Least-squares slope α of −ln(1−kept) − ½ ln n against n.
pub fn fit_tail_exponent(points: &[(u64, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| -p.1 - 0.5 * (p.0 as f64).ln()).collect();
    linear_fit(&xs, &ys).0
}

/// Ordinary least squares; returns (slope, intercept).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// The gentle-measurement scale e^{−nα/2}.
pub fn gentle_bound(alpha: f64, n: u64) -> f64 {
    (-(n as f64) * alpha / 2.0).exp()
}

/// Gibbs state of n i.i.d. sites on the site's own grid.
pub fn site_gibbs(site: &SiteSpectrum, beta: f64, n: u64) -> Result<DiagonalState> {
    gibbs_state(&convolve_n(site, n)?, beta, site.grid_unit())
}
