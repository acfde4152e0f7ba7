//! Single-site spectra on an exact rational grid, n-fold densities of
//! states, Gibbs states and the per-site thermodynamic potentials.

use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::logmath::log_sum_exp;
use crate::state::{Block, DiagonalState};

pub type Rational = Ratio<i64>;

/// Parses `3`, `-1/2`, `0.25` or `1.5e-1` into an exact rational.
pub fn parse_rational(s: &str) -> Option<Rational> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once('/') {
        let n: i64 = a.trim().parse().ok()?;
        let d: i64 = b.trim().parse().ok()?;
        if d == 0 {
            return None;
        }
        return Some(Ratio::new(n, d));
    }
    let (mant, exp) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], s[i + 1..].parse::<i32>().ok()?),
        None => (s, 0),
    };
    let neg = mant.starts_with('-');
    let mant = mant.trim_start_matches(['+', '-']);
    let (int_part, frac_part) = mant.split_once('.').unwrap_or((mant, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    if !digits.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let mut num: i64 = digits.parse().ok()?;
    let scale = exp - frac_part.len() as i32;
    let mut den: i64 = 1;
    if scale >= 0 {
        num = num.checked_mul(10i64.checked_pow(scale as u32)?)?;
    } else {
        den = 10i64.checked_pow((-scale) as u32)?;
    }
    if neg {
        num = -num;
    }
    Some(Ratio::new(num, den))
}

pub fn rational_to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Single-site Hamiltonian: levels sorted by energy.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSpectrum {
    energies: Vec<Rational>,
    degeneracies: Vec<u64>,
    grid_unit: Rational,
    shift: Rational,
    units: Vec<i64>,
}

impl SiteSpectrum {
    pub fn new(levels: &[(Rational, i64)]) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::EmptySpectrum);
        }
        let mut lv: Vec<(Rational, i64)> = levels.to_vec();
        for &(_, d) in &lv {
            if d < 1 {
                return Err(Error::NonPositiveDegeneracy(d));
            }
        }
        lv.sort_by_key(|a| a.0);
        for w in lv.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::DuplicateEnergy(w[0].0.to_string()));
            }
        }
        let lcd = lv.iter().fold(1i64, |acc, (e, _)| acc.lcm(e.denom()));
        let grid_unit = Ratio::new(1, lcd);
        let shift = lv[0].0;
        let units = lv
            .iter()
            .map(|(e, _)| to_units(e, &shift, lcd))
            .collect::<Result<Vec<_>>>()?;
        Ok(SiteSpectrum {
            energies: lv.iter().map(|l| l.0).collect(),
            degeneracies: lv.iter().map(|l| l.1 as u64).collect(),
            grid_unit,
            shift,
            units,
        })
    }

    pub fn energies(&self) -> &[Rational] {
        &self.energies
    }

    pub fn degeneracies(&self) -> &[u64] {
        &self.degeneracies
    }

    pub fn grid_unit(&self) -> Rational {
        self.grid_unit
    }

    /// The lowest energy, subtracted to put the ground level at 0.
    pub fn shift(&self) -> Rational {
        self.shift
    }

    /// `(energy units, degeneracy)` on the site's own grid.
    pub fn grid_levels(&self) -> Vec<(i64, u64)> {
        self.units.iter().copied().zip(self.degeneracies.iter().copied()).collect()
    }

    pub fn dimension(&self) -> u64 {
        self.degeneracies.iter().sum()
    }

    pub fn max_units(&self) -> i64 {
        *self.units.last().unwrap()
    }

    /// Energy range in real units.
    pub fn range(&self) -> f64 {
        rational_to_f64(&(*self.energies.last().unwrap() - self.energies[0]))
    }

    pub fn grid(&self) -> EnergyGrid {
        EnergyGrid { unit: self.grid_unit, origin: self.shift }
    }
}

fn to_units(e: &Rational, origin: &Rational, lcd: i64) -> Result<i64> {
    let d = *e - *origin;
    let v = (*d.numer() as i128) * (lcd as i128) / (*d.denom() as i128);
    i64::try_from(v).map_err(|_| Error::Overflow(format!("energy {e} on grid 1/{lcd}")))
}

/// Common integer grid shared by several sites: real energy = origin + units·unit (per site).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyGrid {
    pub unit: Rational,
    pub origin: Rational,
}

impl EnergyGrid {
    pub fn common(sites: &[&SiteSpectrum]) -> Self {
        let lcd = sites.iter().fold(1i64, |acc, s| acc.lcm(s.grid_unit.denom()));
        let origin = sites.iter().map(|s| s.shift).min().unwrap_or_else(Rational::zero);
        EnergyGrid { unit: Ratio::new(1, lcd), origin }
    }

    pub fn unit_f64(&self) -> f64 {
        rational_to_f64(&self.unit)
    }

    pub fn origin_f64(&self) -> f64 {
        rational_to_f64(&self.origin)
    }

    /// Site levels expressed on this grid.
    pub fn levels_of(&self, site: &SiteSpectrum) -> Result<Vec<(i64, u64)>> {
        let lcd = *self.unit.denom();
        site.energies
            .iter()
            .zip(&site.degeneracies)
            .map(|(e, &d)| Ok((to_units(e, &self.origin, lcd)?, d)))
            .collect()
    }

    /// Real total energy of `units` on n sites.
    pub fn real_energy(&self, units: i64, n: u64) -> f64 {
        n as f64 * self.origin_f64() + units as f64 * self.unit_f64()
    }

    /// Grid position (possibly fractional) of a real total energy on n sites.
    pub fn units_of(&self, energy: f64, n: u64) -> f64 {
        (energy - n as f64 * self.origin_f64()) / self.unit_f64()
    }
}

/// Density of states of n sites: log-multiplicity per integer energy.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyHistogram {
    n: u64,
    offset: i64,
    log_mult: Vec<f64>,
}

impl EnergyHistogram {
    /// n-fold convolution of a level list by repeated doubling.
    pub fn from_levels(levels: &[(i64, u64)], n: u64, exec: Execution) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::EmptySpectrum);
        }
        if n == 0 {
            return Err(Error::OutOfRange { value: 0.0, range: "n >= 1".into() });
        }
        let lo = levels.iter().map(|l| l.0).min().unwrap();
        let hi = levels.iter().map(|l| l.0).max().unwrap();
        let span = hi - lo;
        let total_span = span
            .checked_mul(n as i64)
            .filter(|s| *s < (1i64 << 40))
            .ok_or_else(|| Error::Overflow(format!("{n} sites with energy span {span}")))?;
        let offset = lo
            .checked_mul(n as i64)
            .ok_or_else(|| Error::Overflow(format!("{n} sites with ground energy {lo}")))?;
        offset
            .checked_add(total_span)
            .ok_or_else(|| Error::Overflow(format!("{n} sites with top energy {hi}")))?;
        let mut base = vec![f64::NEG_INFINITY; (span + 1) as usize];
        for &(e, d) in levels {
            let i = (e - lo) as usize;
            base[i] = crate::logmath::log_add(base[i], (d as f64).ln());
        }
        let mut result = vec![0.0];
        let mut power = base;
        let mut k = n;
        loop {
            if k & 1 == 1 {
                result = log_convolve(&result, &power, exec);
            }
            k >>= 1;
            if k == 0 {
                break;
            }
            power = log_convolve(&power, &power, exec);
        }
        Ok(EnergyHistogram { n, offset, log_mult: result })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn min_energy(&self) -> i64 {
        self.offset
    }

    pub fn max_energy(&self) -> i64 {
        self.offset + self.log_mult.len() as i64 - 1
    }

    /// Log-multiplicity at an energy, `-inf` when absent.
    pub fn log_mult(&self, energy: i64) -> f64 {
        let i = energy - self.offset;
        if i < 0 || i as usize >= self.log_mult.len() {
            f64::NEG_INFINITY
        } else {
            self.log_mult[i as usize]
        }
    }

    /// Occupied `(energy, log multiplicity)` pairs in increasing energy.
    pub fn entries(&self) -> Vec<(i64, f64)> {
        self.log_mult
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > f64::NEG_INFINITY)
            .map(|(i, v)| (self.offset + i as i64, *v))
            .collect()
    }

    pub fn log_dimension(&self) -> f64 {
        log_sum_exp(&self.log_mult)
    }
}

/// Log-domain convolution of two dense log-sequences.
pub fn log_convolve(a: &[f64], b: &[f64], exec: Execution) -> Vec<f64> {
    let len = a.len() + b.len() - 1;
    exec::map_range(exec, len, |k| {
        let i_lo = k.saturating_sub(b.len() - 1);
        let i_hi = k.min(a.len() - 1);
        let mut m = f64::NEG_INFINITY;
        for i in i_lo..=i_hi {
            m = m.max(a[i] + b[k - i]);
        }
        if m == f64::NEG_INFINITY {
            return m;
        }
        let mut s = 0.0;
        for i in i_lo..=i_hi {
            s += (a[i] + b[k - i] - m).exp();
        }
        m + s.ln()
    })
}

pub fn convolve_n(site: &SiteSpectrum, n: u64) -> Result<EnergyHistogram> {
    convolve_n_with(site, n, Execution::default())
}

pub fn convolve_n_with(site: &SiteSpectrum, n: u64, exec: Execution) -> Result<EnergyHistogram> {
    EnergyHistogram::from_levels(&site.grid_levels(), n, exec)
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidBeta(beta))
    }
}

/// Gibbs state of the histogram at inverse temperature beta, one block per level.
pub fn gibbs_state(hist: &EnergyHistogram, beta: f64, grid_unit: Rational) -> Result<DiagonalState> {
    check_beta(beta)?;
    let u = rational_to_f64(&grid_unit);
    let entries = hist.entries();
    let base = hist.min_energy();
    let weights: Vec<f64> = entries.iter().map(|&(e, lm)| lm - beta * u * (e - base) as f64).collect();
    let log_z = log_sum_exp(&weights);
    let blocks = entries
        .iter()
        .map(|&(e, lm)| Block::new(-beta * u * (e - base) as f64 - log_z, lm, Some(e)))
        .collect();
    Ok(DiagonalState::from_blocks(blocks))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermoPotentials {
    pub u_tilde: f64,
    pub f_tilde: f64,
    pub s_tilde: f64,
    pub beta: f64,
}

impl ThermoPotentials {
    pub fn identity_residual(&self) -> f64 {
        (self.s_tilde - self.beta * (self.u_tilde - self.f_tilde)).abs()
    }

    /// Componentwise sum over the parts of a composite system.
    pub fn total(parts: &[ThermoPotentials]) -> (f64, f64, f64) {
        parts.iter().fold((0.0, 0.0, 0.0), |acc, p| {
            (acc.0 + p.u_tilde, acc.1 + p.f_tilde, acc.2 + p.s_tilde)
        })
    }
}

/// Per-site potentials of i.i.d. sites from the single-site partition function.
pub fn potentials(site: &SiteSpectrum, beta: f64) -> Result<ThermoPotentials> {
    check_beta(beta)?;
    let u = rational_to_f64(&site.grid_unit);
    let shift = rational_to_f64(&site.shift);
    let logw: Vec<f64> = site
        .grid_levels()
        .iter()
        .map(|&(e, d)| (d as f64).ln() - beta * u * e as f64)
        .collect();
    let log_z = log_sum_exp(&logw);
    let mean_shifted: f64 = site
        .grid_levels()
        .iter()
        .zip(&logw)
        .map(|(&(e, _), lw)| (lw - log_z).exp() * u * e as f64)
        .sum();
    let s_tilde = beta * mean_shifted + log_z;
    Ok(ThermoPotentials {
        u_tilde: shift + mean_shifted,
        f_tilde: shift - log_z / beta,
        s_tilde,
        beta,
    })
}

/// Potentials from a user-supplied sequence of histograms (increasing n),
/// extrapolated linearly in 1/n through the last two members.
pub fn potentials_from_histograms(
    hists: &[EnergyHistogram],
    beta: f64,
    grid: &EnergyGrid,
) -> Result<ThermoPotentials> {
    check_beta(beta)?;
    if hists.is_empty() {
        return Err(Error::EmptySpectrum);
    }
    let u = grid.unit_f64();
    let finite = |h: &EnergyHistogram| {
        let st = gibbs_state(h, beta, grid.unit).expect("beta checked");
        let n = h.n() as f64;
        let mean = st.mean_energy_units().expect("gibbs blocks carry energies");
        let e_mean = grid.real_energy(0, h.n()) + mean * u;
        let base = h.min_energy();
        let logw: Vec<f64> = h.entries().iter().map(|&(e, lm)| lm - beta * u * (e - base) as f64).collect();
        let log_z = log_sum_exp(&logw) - beta * grid.real_energy(base, h.n());
        (e_mean / n, -log_z / (beta * n))
    };
    let last = &hists[hists.len() - 1];
    let (u_last, f_last) = finite(last);
    let (u_inf, f_inf) = if hists.len() >= 2 {
        let prev = &hists[hists.len() - 2];
        let (u_prev, f_prev) = finite(prev);
        let (n1, n2) = (prev.n() as f64, last.n() as f64);
        let extrap = |x1: f64, x2: f64| (n2 * x2 - n1 * x1) / (n2 - n1);
        (extrap(u_prev, u_last), extrap(f_prev, f_last))
    } else {
        (u_last, f_last)
    };
    Ok(ThermoPotentials { u_tilde: u_inf, f_tilde: f_inf, s_tilde: beta * (u_inf - f_inf), beta })
}
