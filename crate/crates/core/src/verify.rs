//! Reports for the direct and converse parts of the conversion theorem and
//! the bookkeeping inequalities behind them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::logmath::{binary_entropy, log_close, log_sub};
use crate::majorize::{closest_majorized, tv_distance, TransferStep};
use crate::protocol::{
    admissible_params, build_adiabatic_plan_with_ladder, execute_plan, reduced_storage, reduced_system, JointState,
    Macrostate, ProtocolParams, ProtocolPlan, Sector,
};
use crate::shells::{shell_project, Shell};
use crate::spectrum::{EnergyGrid, ThermoPotentials};
use crate::state::{Block, DiagonalState};
use crate::storage::{microcanonical, LadderState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamChoice {
    Auto { delta_prime: f64 },
    Explicit(ProtocolParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectScenario {
    pub src: Macrostate,
    pub dst: Macrostate,
    pub params: ParamChoice,
    pub num_rungs: Option<u64>,
}

impl DirectScenario {
    pub fn grid(&self) -> EnergyGrid {
        let mut sites = self.src.sites();
        sites.extend(self.dst.sites());
        EnergyGrid::common(&sites)
    }

    pub fn resolved_params(&self) -> Result<ProtocolParams> {
        let (ps, pd) = (self.src.potentials()?, self.dst.potentials()?);
        match self.params {
            ParamChoice::Auto { delta_prime } => admissible_params(&ps, &pd, delta_prime, self.grid().unit),
            ParamChoice::Explicit(p) => {
                if self.src != self.dst {
                    crate::protocol::validate_params(&p, &ps, &pd)?;
                }
                Ok(p)
            }
        }
    }

    /// (ΔS̃, ΔŨ) per site, destination minus source.
    pub fn differences(&self) -> Result<(f64, f64)> {
        let (us, _, ss) = ThermoPotentials::total(&self.src.potentials()?);
        let (ud, _, sd) = ThermoPotentials::total(&self.dst.potentials()?);
        Ok((sd - ss, ud - us))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubadditivityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    pub n: u64,
    /// Trace norm ‖σ_I − ρ_dst‖₁.
    pub tv_system: f64,
    /// Trace norm ‖σ_W − π(Ũ_W + W̃, δ)‖₁.
    pub tv_storage: f64,
    pub entropy_gap_rate: f64,
    pub work_measured: f64,
    pub work_expected: f64,
    pub concentration_mass: f64,
    /// ε + ε′ + 2δ + (1 − kept_src)·|ΔŨ| + 2(1 − concentration)·ladder height per site.
    pub first_law_bound: f64,
    pub kept_src: f64,
    pub kept_dst: f64,
    pub reached_tv: f64,
    pub steps: usize,
    pub energy_violations: u64,
    pub energy_entries_checked: u64,
    pub histogram_drift: f64,
    pub subadditivity: SubadditivityReport,
    pub storage_entropy: f64,
    pub reference_entropy: f64,
    pub shifted_reference_entropy: f64,
}

/// Probability mass of rungs within n(center ± width).
pub fn work_concentration_check(sigma_storage: &LadderState, expected_center: f64, width: f64, n: u64, unit: f64) -> f64 {
    let lo = n as f64 * (expected_center - width) / unit;
    let hi = n as f64 * (expected_center + width) / unit;
    let lo = (lo - 1e-9 * lo.abs().max(1.0)).ceil() as i64;
    let hi = (hi + 1e-9 * hi.abs().max(1.0)).floor() as i64;
    if lo > hi {
        return 0.0;
    }
    sigma_storage.mass_in(lo, hi)
}

fn marginal_entropy(joint: &JointState) -> f64 {
    joint
        .blocks
        .iter()
        .zip(&joint.storage)
        .map(|(b, s)| {
            let m = s.total_mass();
            if m > 0.0 {
                -m * (m.ln() - b.log_count)
            } else {
                0.0
            }
        })
        .sum()
}

/// S(σ_I) + S(σ_W) ≥ S(ρ_I) + S(π) for a product input.
pub fn subadditivity_check(before: &JointState, after: &JointState) -> SubadditivityReport {
    let lhs = marginal_entropy(after) + reduced_storage(after).entropy();
    let rhs = marginal_entropy(before) + reduced_storage(before).entropy();
    SubadditivityReport { lhs, rhs, holds: lhs >= rhs - 1e-9, strict: lhs > rhs + 1e-9 }
}

/// ‖σ_I − ρ_dst‖₁ with σ_I the system marginal of `joint`.
pub fn system_trace_distance(plan: &ProtocolPlan, joint: &JointState, rho_dst: &DiagonalState) -> f64 {
    let mut used = vec![false; rho_dst.len()];
    let mut by_key: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, b) in rho_dst.blocks().iter().enumerate() {
        by_key.entry(b.energy.unwrap_or(i64::MIN)).or_default().push(i);
    }
    let mut find = |energy: i64, log_count: f64, used: &mut Vec<bool>| -> Option<usize> {
        let c = by_key.get_mut(&energy)?;
        let pos = c.iter().position(|&i| !used[i] && log_close(rho_dst.blocks()[i].log_count, log_count, 1e-9))?;
        let i = c[pos];
        used[i] = true;
        Some(i)
    };
    let mut acc = 0.0;
    let mut groups: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for (b, s) in joint.blocks.iter().zip(&joint.storage) {
        let m = s.total_mass();
        match (b.sector, b.dst_block) {
            (Sector::Dst, Some(i)) => groups.entry(i).or_default().push((b.log_count, m)),
            (Sector::Dst, None) => match find(b.energy, b.log_count, &mut used) {
                Some(i) => acc += (m - rho_dst.blocks()[i].mass()).abs(),
                None => acc += m,
            },
            (Sector::Src, _) => acc += m,
        }
    }
    for (i, segs) in groups {
        let pb = &plan.dst_blocks[i];
        let _ = find(pb.energy, pb.log_count, &mut used);
        let mut covered = 0.0;
        for (lc, m) in &segs {
            acc += (m - (pb.log_p + lc).exp()).abs();
            covered += (lc - pb.log_count).exp();
        }
        acc += (1.0 - covered).max(0.0) * (pb.log_p + pb.log_count).exp();
    }
    for (i, b) in rho_dst.blocks().iter().enumerate() {
        if !used[i] {
            acc += b.mass();
        }
    }
    acc
}

fn direct_point(scn: &DirectScenario, params: &ProtocolParams, n: u64, du: f64) -> Result<Theorem1Report> {
    let plan = build_adiabatic_plan_with_ladder(&scn.src, &scn.dst, n, params, scn.num_rungs)?;
    let rho = scn.src.gibbs(&plan.grid, n)?;
    let rho_dst = scn.dst.gibbs(&plan.grid, n)?;
    let pi = LadderState::uniform(plan.window);
    let joint = execute_plan(&plan, &rho, &pi)?;
    let before = JointState::product(&rho, &pi, Sector::Src)?;
    let storage = reduced_storage(&joint);
    let unit = plan.ladder.unit_f64();
    let w_expected = -du;
    let shifted_ref = microcanonical(&plan.ladder, n, params.u_w + w_expected, params.delta)?;
    let tv_storage = 2.0 * storage.tv(&shifted_ref);
    let tv_system = if plan.identity { 2.0 * tv_distance_same(&reduced_system(&joint), &rho_dst) } else { system_trace_distance(&plan, &joint, &rho_dst) };
    let conc = work_concentration_check(&storage, params.u_w + w_expected, 4.0 * params.delta, n, unit);
    let e_range = plan.ladder.num_rungs as f64 * unit / n as f64;
    Ok(Theorem1Report {
        n,
        tv_system,
        tv_storage,
        entropy_gap_rate: (storage.entropy() - pi.entropy()).abs() / n as f64,
        work_measured: (storage.mean_rung() - pi.mean_rung()) * unit / n as f64,
        work_expected: w_expected,
        concentration_mass: conc,
        first_law_bound: params.eps
            + params.eps_prime
            + 2.0 * params.delta
            + (1.0 - plan.kept_src) * du.abs()
            + 2.0 * (1.0 - conc) * e_range,
        kept_src: plan.kept_src,
        kept_dst: plan.kept_dst,
        reached_tv: plan.reached_tv,
        steps: plan.steps.len(),
        energy_violations: joint.audit.violations,
        energy_entries_checked: joint.audit.checked_entries,
        histogram_drift: joint.audit.histogram_drift,
        subadditivity: subadditivity_check(&before, &joint),
        storage_entropy: storage.entropy(),
        reference_entropy: pi.entropy(),
        shifted_reference_entropy: shifted_ref.entropy(),
    })
}

fn tv_distance_same(a: &DiagonalState, b: &DiagonalState) -> f64 {
    let mut acc = 0.0;
    let mut used = vec![false; b.len()];
    for x in a.blocks() {
        match b.blocks().iter().enumerate().find(|(i, y)| !used[*i] && y.energy == x.energy && log_close(y.log_count, x.log_count, 1e-9)) {
            Some((i, y)) => {
                used[i] = true;
                acc += (x.mass() - y.mass()).abs();
            }
            None => acc += x.mass(),
        }
    }
    acc += b.blocks().iter().enumerate().filter(|(i, _)| !used[*i]).map(|(_, y)| y.mass()).sum::<f64>();
    0.5 * acc
}

pub fn theorem1_direct(scn: &DirectScenario, n_grid: &[u64]) -> Result<Vec<Theorem1Report>> {
    theorem1_direct_with(scn, n_grid, Execution::default())
}

pub fn theorem1_direct_with(scn: &DirectScenario, n_grid: &[u64], exec: Execution) -> Result<Vec<Theorem1Report>> {
    let (ds, du) = scn.differences()?;
    if ds < 0.0 {
        return Err(Error::InfeasibleDeltaPrime(format!("entropy decreases by {:.6}", -ds)));
    }
    let params = scn.resolved_params()?;
    exec::map(exec, n_grid, |&n| direct_point(scn, &params, n, du)).into_iter().collect()
}

/// Smallest T in [0, 1 − 1/D] with T·ln(D−1) + h(T) ≥ gap.
pub fn fannes_inverse(gap: f64, log_dim: f64) -> f64 {
    if gap <= 0.0 || log_dim <= 0.0 {
        return 0.0;
    }
    let t_max = 1.0 - (-log_dim).exp();
    if gap >= log_dim {
        return t_max;
    }
    let ln_dm1 = log_sub(log_dim, 0.0);
    let f = |t: f64| t * ln_dm1 + binary_entropy(t);
    let (mut lo, mut hi) = (0.0, t_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= gap {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConverseScenario {
    pub src: Macrostate,
    pub dst: Macrostate,
    pub eps: f64,
    pub eps_prime: f64,
    /// Entropy the storage may absorb, subtracted from the deficit.
    pub storage_slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConverseReport {
    pub n: u64,
    pub delta_s_rate: f64,
    pub entropy_deficit: f64,
    pub log_dim: f64,
    /// Lower bound on half the trace distance, on the destination shell.
    pub t_min: f64,
    pub full_deficit: f64,
    pub full_log_dim: f64,
    /// The same bound for the untruncated states on the full space.
    pub full_t_min: f64,
}

/// (ΔS̃ per site, full deficit, full log-dimension, full T_min).
pub fn full_space_bound(scn: &ConverseScenario, n: u64) -> Result<(f64, f64, f64, f64)> {
    let (_, _, ss) = ThermoPotentials::total(&scn.src.potentials()?);
    let (_, _, sd) = ThermoPotentials::total(&scn.dst.potentials()?);
    let ds = sd - ss;
    if ds >= 0.0 {
        return Err(Error::NotAConverseCase);
    }
    let log_dim = n as f64 * scn.src.log_site_dim().max(scn.dst.log_site_dim());
    let deficit = -(n as f64) * ds;
    Ok((ds, deficit, log_dim, fannes_inverse(deficit, log_dim)))
}

pub fn converse_bound(scn: &ConverseScenario, n: u64) -> Result<ConverseReport> {
    let (ds, full_deficit, full_log_dim, full_t_min) = full_space_bound(scn, n)?;
    let mut sites = scn.src.sites();
    sites.extend(scn.dst.sites());
    let grid = EnergyGrid::common(&sites);
    let (us, _, _) = ThermoPotentials::total(&scn.src.potentials()?);
    let (ud, _, _) = ThermoPotentials::total(&scn.dst.potentials()?);
    let rho = scn.src.gibbs(&grid, n)?;
    let rho_dst = scn.dst.gibbs(&grid, n)?;
    let (t_src, _) = shell_project(&rho, &Shell::around(us, scn.eps, n, &grid))?;
    let (t_dst, _) = shell_project(&rho_dst, &Shell::around(ud, scn.eps_prime, n, &grid))?;
    let deficit = t_src.entropy() - t_dst.entropy() - scn.storage_slack;
    let log_dim = t_dst.log_dimension();
    Ok(ConverseReport {
        n,
        delta_s_rate: ds,
        entropy_deficit: deficit,
        log_dim,
        t_min: fannes_inverse(deficit, log_dim),
        full_deficit,
        full_log_dim,
        full_t_min,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySearchReport {
    pub n: u64,
    pub best_tv: f64,
    pub bound: f64,
    pub plans_checked: u64,
}

fn sorted_tv(log_counts: &[f64], values: &[f64], log_total: f64, target: &DiagonalState) -> f64 {
    let blocks = log_counts
        .iter()
        .zip(values)
        .map(|(&lc, &v)| Block::new(if v > 0.0 { v.ln() - log_total } else { f64::NEG_INFINITY }, lc, None))
        .collect();
    match DiagonalState::normalized(blocks) {
        Ok(s) => tv_distance(&s, target).unwrap_or(f64::INFINITY),
        Err(_) => f64::INFINITY,
    }
}

/// Exhaustive search over chains of block-level T-transforms (depth ≤ `depth`,
/// weights in `weights`) applied to the source Gibbs state at small n; the best
/// half trace distance reached must respect the full-space Fannes bound.
pub fn toy_exhaustive_search(scn: &ConverseScenario, n: u64, depth: usize, weights: &[f64]) -> Result<ToySearchReport> {
    let (_, _, _, bound) = full_space_bound(scn, n)?;
    let mut sites = scn.src.sites();
    sites.extend(scn.dst.sites());
    let grid = EnergyGrid::common(&sites);
    let rho = scn.src.gibbs(&grid, n)?;
    let target = scn.dst.gibbs(&grid, n)?;
    let log_total = rho.log_dimension();
    let log_counts: Vec<f64> = rho.blocks().iter().map(|b| b.log_count).collect();
    let start: Vec<f64> = rho.blocks().iter().map(|b| (b.log_p + log_total).exp()).collect();
    let m = start.len();
    let moves: Vec<TransferStep> = (0..m)
        .flat_map(|j| (j + 1..m).map(move |k| (j, k)))
        .flat_map(|(j, k)| {
            weights.iter().map(move |&w| TransferStep { weight: w, source_block: j, dest_block: k, moved_log_count: 0.0 })
        })
        .collect();
    fn dfs(
        v: &[f64],
        d: usize,
        moves: &[TransferStep],
        lc: &[f64],
        lt: f64,
        target: &DiagonalState,
        best: &mut f64,
        count: &mut u64,
    ) {
        *count += 1;
        *best = best.min(sorted_tv(lc, v, lt, target));
        if d == 0 {
            return;
        }
        for mv in moves {
            let mut w = v.to_vec();
            mv.apply(lc, &mut w);
            dfs(&w, d - 1, moves, lc, lt, target, best, count);
        }
    }
    let results = exec::map(Execution::default(), &moves, |mv| {
        let mut w = start.clone();
        mv.apply(&log_counts, &mut w);
        let mut best = f64::INFINITY;
        let mut count = 0u64;
        dfs(&w, depth.saturating_sub(1), &moves, &log_counts, log_total, &target, &mut best, &mut count);
        (best, count)
    });
    let mut best = sorted_tv(&log_counts, &start, log_total, &target);
    let mut checked = 1u64;
    for (b, c) in results {
        best = best.min(b);
        checked += c;
    }
    let capped = closest_majorized(&target, &rho)?;
    best = best.min(tv_distance(&capped, &target)?);
    Ok(ToySearchReport { n, best_tv: best, bound, plans_checked: checked + 1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::SiteSpectrum;
    use num_rational::Ratio;

    fn qubit() -> SiteSpectrum {
        SiteSpectrum::new(&[(Ratio::new(0, 1), 1), (Ratio::new(1, 1), 1)]).unwrap()
    }

    fn heating() -> DirectScenario {
        DirectScenario {
            src: Macrostate::single(qubit(), 1.0),
            dst: Macrostate::single(qubit(), 0.5),
            params: ParamChoice::Explicit(ProtocolParams { eps: 0.02, eps_prime: 0.02, delta: 0.041, delta_prime: 0.0805, u_w: 0.5 }),
            num_rungs: None,
        }
    }

    #[test]
    fn fannes_inverse_round_trip() {
        let ld = 10f64.ln();
        let t = fannes_inverse(0.7, ld);
        let f = t * 9f64.ln() + binary_entropy(t);
        assert!((f - 0.7).abs() < 1e-9);
        assert_eq!(fannes_inverse(-1.0, ld), 0.0);
        assert!((fannes_inverse(5.0, ld) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn concentration_edges() {
        let s = LadderState::uniform(crate::storage::Window { lo: 10, hi: 12 });
        assert_eq!(work_concentration_check(&s, 5.0, 0.1, 10, 1.0), 0.0);
        assert!((work_concentration_check(&s, 1.1, 1.0, 10, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_scenario_has_zero_metrics() {
        let mut scn = heating();
        scn.dst = scn.src.clone();
        let r = theorem1_direct(&scn, &[40]).unwrap();
        assert!(r[0].tv_system < 1e-12, "{r:?}");
        assert_eq!(r[0].work_measured, 0.0);
        assert!(r[0].entropy_gap_rate < 1e-12);
        let sub = r[0].subadditivity;
        assert!(sub.holds && !sub.strict);
    }

    #[test]
    fn direct_heating_reports() {
        let r = theorem1_direct(&heating(), &[40, 80]).unwrap();
        for x in &r {
            assert_eq!(x.energy_violations, 0);
            assert!(x.subadditivity.holds);
            assert!(x.tv_system >= 0.0 && x.tv_system <= 2.0);
            assert!((x.work_expected + 0.108600).abs() < 1e-6);
        }
    }

    #[test]
    fn parallel_sweep_matches_sequential() {
        let a = theorem1_direct_with(&heating(), &[40, 60], Execution::Sequential).unwrap();
        let b = theorem1_direct_with(&heating(), &[40, 60], Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_block_mixing_is_strict() {
        let st = DiagonalState::new(vec![
            Block::new(0.9f64.ln(), 0.0, Some(0)),
            Block::new(0.1f64.ln(), 0.0, Some(0)),
        ])
        .unwrap();
        let pi = LadderState::uniform(crate::storage::Window { lo: 3, hi: 3 });
        let before = JointState::product(&st, &pi, Sector::Src).unwrap();
        let mixed = DiagonalState::new(vec![Block::new(0.5f64.ln(), 2f64.ln(), Some(0))]).unwrap();
        let after = JointState::product(&mixed, &pi, Sector::Dst).unwrap();
        let r = subadditivity_check(&before, &after);
        assert!(r.holds && r.strict);
    }

    #[test]
    fn converse_requires_entropy_drop() {
        let scn = ConverseScenario {
            src: Macrostate::single(qubit(), 1.0),
            dst: Macrostate::single(qubit(), 1.0),
            eps: 0.005,
            eps_prime: 0.005,
            storage_slack: 0.0,
        };
        assert_eq!(converse_bound(&scn, 100).unwrap_err(), Error::NotAConverseCase);
    }

    #[test]
    fn cooling_bound_is_positive() {
        let scn = ConverseScenario {
            src: Macrostate::single(qubit(), 0.5),
            dst: Macrostate::single(qubit(), 1.0),
            eps: 0.005,
            eps_prime: 0.005,
            storage_slack: 0.0,
        };
        let r = converse_bound(&scn, 200).unwrap();
        assert!(r.t_min > 0.0 && r.full_t_min > 0.0);
        let toy = toy_exhaustive_search(&scn, 4, 2, &[0.25, 0.5, 1.0]).unwrap();
        assert!(toy.best_tv >= toy.bound);
    }
}
