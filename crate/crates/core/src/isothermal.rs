//! Isothermal work extraction against a finite bath of size M, in
//! regularized (per-site) variables.

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::shells::linear_fit;
use crate::spectrum::{gibbs_state, potentials, rational_to_f64, EnergyHistogram, SiteSpectrum, ThermoPotentials};

#[derive(Debug, Clone, PartialEq)]
pub struct BathModel {
    pub site: SiteSpectrum,
    pub m: f64,
}

impl BathModel {
    pub fn new(site: SiteSpectrum, m: f64) -> Result<Self> {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::OutOfRange { value: m, range: "M > 0".into() });
        }
        Ok(BathModel { site, m })
    }

    /// Copies of the reference site standing in for n system sites.
    pub fn sites_per_n(&self, n: u64) -> u64 {
        (self.m * n as f64).round() as u64
    }

    /// Ũ of the whole bath per system site.
    pub fn u_tilde(&self, beta: f64) -> Result<f64> {
        Ok(self.m * potentials(&self.site, beta)?.u_tilde)
    }

    pub fn s_tilde(&self, beta: f64) -> Result<f64> {
        Ok(self.m * potentials(&self.site, beta)?.s_tilde)
    }

    /// β²·Var(E)/n for round(M·n) copies at inverse temperature β.
    pub fn specific_heat(&self, beta: f64, n: u64) -> Result<f64> {
        let k = self.sites_per_n(n);
        let h = EnergyHistogram::from_levels(&self.site.grid_levels(), k, Execution::Sequential)?;
        let st = gibbs_state(&h, beta, self.site.grid_unit())?;
        let unit = rational_to_f64(&self.site.grid_unit());
        let (mut m1, mut m2) = (0.0, 0.0);
        for b in st.blocks() {
            let e = b.energy.unwrap_or(0) as f64 * unit;
            let w = b.mass();
            m1 += w * e;
            m2 += w * e * e;
        }
        Ok(beta * beta * (m2 - m1 * m1) / n as f64)
    }
}

/// Per-site mean energy at infinite temperature.
fn hot_limit(site: &SiteSpectrum) -> f64 {
    let num: f64 = site.energies().iter().zip(site.degeneracies()).map(|(e, &d)| rational_to_f64(e) * d as f64).sum();
    num / site.dimension() as f64
}

/// β with Ũ_bath(β) = u_target, for u_target per system site.
pub fn beta_inverse(bath: &BathModel, u_target: f64) -> Result<f64> {
    let u = u_target / bath.m;
    let ground = rational_to_f64(&bath.site.energies()[0]);
    let hot = hot_limit(&bath.site);
    if !(u > ground && u < hot) {
        return Err(Error::OutOfRange { value: u_target, range: format!("({}, {})", ground * bath.m, hot * bath.m) });
    }
    let mean = |b: f64| potentials(&bath.site, b).map(|p| p.u_tilde);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while mean(hi)? > u {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::OutOfRange { value: u_target, range: "bath too close to its ground energy".into() });
        }
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-15 * hi {
            return Ok(hi);
        }
        if mid > 0.0 && mean(mid)? > u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsothermalScenario {
    pub system_src: SiteSpectrum,
    pub system_dst: SiteSpectrum,
    pub beta: f64,
    pub bath_site: SiteSpectrum,
}

impl IsothermalScenario {
    fn system(&self) -> Result<(ThermoPotentials, ThermoPotentials)> {
        Ok((potentials(&self.system_src, self.beta)?, potentials(&self.system_dst, self.beta)?))
    }

    pub fn delta_f(&self) -> Result<f64> {
        let (a, b) = self.system()?;
        Ok(b.f_tilde - a.f_tilde)
    }

    pub fn delta_u(&self) -> Result<f64> {
        let (a, b) = self.system()?;
        Ok(b.u_tilde - a.u_tilde)
    }

    pub fn delta_s(&self) -> Result<f64> {
        let (a, b) = self.system()?;
        Ok(b.s_tilde - a.s_tilde)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxWorkPoint {
    pub m: f64,
    pub w_max: f64,
    pub minus_delta_f: f64,
    /// −ΔF̃_S − W_max(M).
    pub residual: f64,
    pub beta_prime: f64,
    /// Bath energy loss at W_max.
    pub q: f64,
}

/// Bath temperature after extracting `work`, and the total entropy change.
fn settle(scn: &IsothermalScenario, bath: &BathModel, work: f64, du: f64, ds: f64) -> Result<(f64, f64)> {
    let u0 = bath.u_tilde(scn.beta)?;
    let bp = beta_inverse(bath, u0 - work - du)?;
    Ok((bp, ds + bath.s_tilde(bp)? - bath.s_tilde(scn.beta)?))
}

fn max_work_at(scn: &IsothermalScenario, m: f64) -> Result<MaxWorkPoint> {
    let bath = BathModel::new(scn.bath_site.clone(), m)?;
    let (du, ds, df) = (scn.delta_u()?, scn.delta_s()?, scn.delta_f()?);
    let u0 = bath.u_tilde(scn.beta)?;
    let ground = rational_to_f64(&bath.site.energies()[0]) * m;
    let hot = hot_limit(&bath.site) * m;
    // Feasible works keep the bath energy strictly inside (ground, hot).
    let span = hot - ground;
    let mut lo = u0 - hot - du + 1e-9 * span;
    let mut hi = u0 - ground - du - 1e-9 * span;
    if settle(scn, &bath, lo, du, ds)?.1 < 0.0 {
        return Err(Error::InfeasibleAtThisM { m, work: lo });
    }
    if settle(scn, &bath, hi, du, ds)?.1 >= 0.0 {
        lo = hi;
    }
    while hi - lo > 1e-14 * (1.0 + lo.abs()) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if settle(scn, &bath, mid, du, ds)?.1 >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (bp, _) = settle(scn, &bath, lo, du, ds)?;
    Ok(MaxWorkPoint {
        m,
        w_max: lo,
        minus_delta_f: -df,
        residual: -df - lo,
        beta_prime: bp,
        q: u0 - bath.u_tilde(bp)?,
    })
}

pub fn max_work(scn: &IsothermalScenario, m_list: &[f64]) -> Result<Vec<MaxWorkPoint>> {
    exec::map(Execution::default(), m_list, |&m| max_work_at(scn, m)).into_iter().collect()
}

/// Least-squares C in residual ≈ C/M, and the spread max/min of M·residual.
pub fn finite_bath_constant(points: &[MaxWorkPoint]) -> (f64, f64) {
    let num: f64 = points.iter().map(|p| p.residual / p.m).sum();
    let den: f64 = points.iter().map(|p| 1.0 / (p.m * p.m)).sum();
    let scaled: Vec<f64> = points.iter().map(|p| p.residual * p.m).collect();
    let max = scaled.iter().cloned().fold(f64::MIN, f64::max);
    let min = scaled.iter().cloned().fold(f64::MAX, f64::min);
    (num / den, max / min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// W̃_M = W̃ − 1/√M.
    InvSqrt,
    /// W̃_M = W̃ − 1/M.
    Inv,
}

impl Schedule {
    pub fn offset(&self, m: f64) -> f64 {
        match self {
            Schedule::InvSqrt => 1.0 / m.sqrt(),
            Schedule::Inv => 1.0 / m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstLawPoint {
    pub m: f64,
    pub work: f64,
    pub heat: f64,
    pub beta_prime: f64,
    /// W̃_M − (Q̃_M − ΔŨ_S).
    pub residual: f64,
}

pub fn first_law_decomposition(scn: &IsothermalScenario, m: f64, target_work: f64, schedule: Schedule) -> Result<FirstLawPoint> {
    let bath = BathModel::new(scn.bath_site.clone(), m)?;
    let (du, ds) = (scn.delta_u()?, scn.delta_s()?);
    let work = target_work - schedule.offset(m);
    let (bp, dst) = match settle(scn, &bath, work, du, ds) {
        Ok(v) => v,
        Err(Error::OutOfRange { .. }) => return Err(Error::InfeasibleAtThisM { m, work }),
        Err(e) => return Err(e),
    };
    if dst < 0.0 {
        return Err(Error::InfeasibleAtThisM { m, work });
    }
    let heat = bath.u_tilde(scn.beta)? - bath.u_tilde(bp)?;
    Ok(FirstLawPoint { m, work, heat, beta_prime: bp, residual: work - (heat - du) })
}

/// Intercept of Q̃_M against the schedule offset.
pub fn q_limit(points: &[FirstLawPoint], schedule: Schedule) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| schedule.offset(p.m)).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.heat).collect();
    linear_fit(&xs, &ys).1
}
