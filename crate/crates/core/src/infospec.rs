//! Finite-n information-spectrum diagnostics: how the mass of a state is
//! spread over per-site surprisal −(1/n) ln p.

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::shells::{linear_fit, site_gibbs};
use crate::spectrum::SiteSpectrum;
use crate::state::DiagonalState;

/// Mass of the states with ln p ≥ −nγ.
pub fn spectral_mass(state: &DiagonalState, n: u64, gamma: f64) -> f64 {
    let cut = -(n as f64) * gamma;
    let tol = 1e-12 * cut.abs().max(1.0);
    state.blocks().iter().filter(|b| b.log_p >= cut - tol).map(|b| b.mass()).sum::<f64>().min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMassCurve {
    pub gamma_grid: Vec<f64>,
    pub mass: Vec<f64>,
    pub n: u64,
}

pub fn spectral_mass_curve(state: &DiagonalState, n: u64, gamma_grid: &[f64]) -> SpectralMassCurve {
    SpectralMassCurve { gamma_grid: gamma_grid.to_vec(), mass: gamma_grid.iter().map(|&g| spectral_mass(state, n, g)).collect(), n }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossover {
    pub n: u64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
}

impl Crossover {
    pub fn width(&self) -> f64 {
        self.gamma_hi - self.gamma_lo
    }
}

/// Smallest γ where the mass reaches `band` and where it reaches 1 − band.
pub fn crossover_of(state: &DiagonalState, n: u64, band: f64) -> Result<Crossover> {
    if !(band > 0.0 && band < 0.5) {
        return Err(Error::InvalidBand(band));
    }
    let mut acc = 0.0;
    let (mut lo, mut hi) = (None, None);
    let mut last = f64::NAN;
    for b in state.blocks() {
        if b.log_p == f64::NEG_INFINITY {
            break;
        }
        acc += b.mass();
        last = -b.log_p / n as f64;
        if lo.is_none() && acc >= band * (1.0 - 1e-12) {
            lo = Some(last);
        }
        if hi.is_none() && acc >= (1.0 - band) * (1.0 - 1e-12) {
            hi = Some(last);
        }
    }
    Ok(Crossover { n, gamma_lo: lo.unwrap_or(last), gamma_hi: hi.unwrap_or(last) })
}

pub fn rate_crossover(site: &SiteSpectrum, beta: f64, n_list: &[u64], band: f64) -> Result<Vec<Crossover>> {
    rate_crossover_with(site, beta, n_list, band, Execution::default())
}

pub fn rate_crossover_with(site: &SiteSpectrum, beta: f64, n_list: &[u64], band: f64, exec: Execution) -> Result<Vec<Crossover>> {
    if !(band > 0.0 && band < 0.5) {
        return Err(Error::InvalidBand(band));
    }
    exec::map(exec, n_list, |&n| crossover_of(&site_gibbs(site, beta, n)?, n, band)).into_iter().collect()
}

/// Each band lies inside the previous one.
pub fn bands_nest(c: &[Crossover]) -> bool {
    c.windows(2).all(|w| w[1].gamma_lo >= w[0].gamma_lo - 1e-12 && w[1].gamma_hi <= w[0].gamma_hi + 1e-12)
}

/// −slope of ln(width) against ln n.
pub fn shrink_exponent(c: &[Crossover]) -> f64 {
    let xs: Vec<f64> = c.iter().map(|x| (x.n as f64).ln()).collect();
    let ys: Vec<f64> = c.iter().map(|x| x.width().ln()).collect();
    -linear_fit(&xs, &ys).0
}
