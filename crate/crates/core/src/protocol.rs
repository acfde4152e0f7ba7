//! Adiabatic work extraction: shell truncation, relabeling into the
//! destination shell, and a T-transform chain whose every branch pays for
//! system energy changes with exact ladder shifts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::majorize::{chain_on_segments, closest_majorized, tv_distance, union_boundaries, TransferStep};
use crate::shells::{shell_project, Shell};
use crate::spectrum::{gibbs_state, potentials, EnergyGrid, EnergyHistogram, Rational, SiteSpectrum, ThermoPotentials};
use crate::state::{Block, DiagonalState};
use crate::storage::{default_num_rungs, ladder_new, window, Ladder, LadderState, Window};
use crate::Execution;

/// One species of sites at its own inverse temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub site: SiteSpectrum,
    pub beta: f64,
}

/// A composite Gibbs macrostate: n copies of every part.
#[derive(Debug, Clone, PartialEq)]
pub struct Macrostate {
    pub parts: Vec<Part>,
}

impl Macrostate {
    pub fn new(parts: Vec<Part>) -> Self {
        Macrostate { parts }
    }

    pub fn single(site: SiteSpectrum, beta: f64) -> Self {
        Macrostate { parts: vec![Part { site, beta }] }
    }

    pub fn potentials(&self) -> Result<Vec<ThermoPotentials>> {
        self.parts.iter().map(|p| potentials(&p.site, p.beta)).collect()
    }

    pub fn max_beta(&self) -> f64 {
        self.parts.iter().map(|p| p.beta).fold(0.0, f64::max)
    }

    pub fn sites(&self) -> Vec<&SiteSpectrum> {
        self.parts.iter().map(|p| &p.site).collect()
    }

    /// ln of the single-copy dimension, summed over parts.
    pub fn log_site_dim(&self) -> f64 {
        self.parts.iter().map(|p| (p.site.dimension() as f64).ln()).sum()
    }

    /// Gibbs state of n copies of every part, energies on `grid`.
    pub fn gibbs(&self, grid: &EnergyGrid, n: u64) -> Result<DiagonalState> {
        let mut acc: Option<DiagonalState> = None;
        for p in &self.parts {
            let levels = grid.levels_of(&p.site)?;
            let h = EnergyHistogram::from_levels(&levels, n, Execution::Sequential)?;
            let g = gibbs_state(&h, p.beta, grid.unit)?;
            acc = Some(match acc {
                None => g,
                Some(a) => a.product(&g),
            });
        }
        acc.ok_or(Error::EmptySpectrum)
    }

    /// Total energy span of n copies, in grid units.
    pub fn span_units(&self, grid: &EnergyGrid, n: u64) -> Result<i64> {
        let mut span = 0i64;
        for p in &self.parts {
            let lv = grid.levels_of(&p.site)?;
            let lo = lv.iter().map(|l| l.0).min().unwrap();
            let hi = lv.iter().map(|l| l.0).max().unwrap();
            span += (hi - lo) * n as i64;
        }
        Ok(span)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolParams {
    pub eps: f64,
    pub eps_prime: f64,
    pub delta: f64,
    pub delta_prime: f64,
    pub u_w: f64,
}

fn differences(src: &[ThermoPotentials], dst: &[ThermoPotentials]) -> (f64, f64, f64) {
    let (us, _, ss) = ThermoPotentials::total(src);
    let (ud, _, sd) = ThermoPotentials::total(dst);
    let beta = src.iter().chain(dst).map(|p| p.beta).fold(0.0, f64::max);
    (sd - ss, ud - us, beta)
}

/// ε = ε′ = δ′/(8β″), δ = δ′/β″, Ũ_W = |ΔŨ| + 8δ + one grid unit.
pub fn admissible_params(
    src: &[ThermoPotentials],
    dst: &[ThermoPotentials],
    delta_prime: f64,
    grid_unit: Rational,
) -> Result<ProtocolParams> {
    let (ds, du, beta) = differences(src, dst);
    if ds <= 0.0 {
        return Err(Error::InfeasibleDeltaPrime(format!("entropy difference {ds:.6} is not positive")));
    }
    if !(delta_prime > 0.0 && delta_prime < ds) {
        return Err(Error::InfeasibleDeltaPrime(format!(
            "delta' = {delta_prime} must lie in (0, {ds:.6})"
        )));
    }
    let eps = delta_prime / (8.0 * beta);
    let delta = delta_prime / beta;
    Ok(ProtocolParams {
        eps,
        eps_prime: eps,
        delta,
        delta_prime,
        u_w: du.abs() + 8.0 * delta + crate::spectrum::rational_to_f64(&grid_unit),
    })
}

/// Checks explicitly chosen parameters against the same inequalities.
pub fn validate_params(params: &ProtocolParams, src: &[ThermoPotentials], dst: &[ThermoPotentials]) -> Result<()> {
    let (ds, du, beta) = differences(src, dst);
    let p = params;
    let fail = |m: String| Err(Error::InvalidParams(m));
    if !(p.eps > 0.0 && p.eps_prime > 0.0 && p.delta > 0.0 && p.delta_prime > 0.0) {
        return fail("eps, eps_prime, delta, delta_prime must be positive".into());
    }
    if ds <= 0.0 {
        return Err(Error::InfeasibleDeltaPrime(format!("entropy difference {ds:.6} is not positive")));
    }
    if p.delta_prime >= ds {
        return Err(Error::InfeasibleDeltaPrime(format!("delta' = {} must be below {ds:.6}", p.delta_prime)));
    }
    if 2.0 * beta * (p.eps + p.eps_prime) >= p.delta_prime {
        return fail(format!("2·beta_max·(eps + eps') = {} must be below delta'", 2.0 * beta * (p.eps + p.eps_prime)));
    }
    if p.delta_prime >= 2.0 * beta * p.delta {
        return fail(format!("delta' must be below 2·beta_max·delta = {}", 2.0 * beta * p.delta));
    }
    if p.u_w <= du.abs() + 8.0 * p.delta {
        return fail(format!("u_w must exceed |dU| + 8·delta = {}", du.abs() + 8.0 * p.delta));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanBlock {
    pub energy: i64,
    pub log_count: f64,
    /// Per-state log probability in the untruncated Gibbs state.
    pub log_p: f64,
}

/// A piece of the destination shell's index range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub log_count: f64,
    /// Source block relabeled onto this piece, if any.
    pub src_block: Option<usize>,
    pub dst_block: usize,
    /// Per-state density of the reached state, scaled by the shell dimension.
    pub target_density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolPlan {
    pub n: u64,
    pub grid: EnergyGrid,
    pub params: ProtocolParams,
    pub identity: bool,
    pub shell_src: Shell,
    pub shell_dst: Shell,
    pub ladder: Ladder,
    pub window: Window,
    pub log_total: f64,
    pub log_dim_src: f64,
    pub kept_src: f64,
    pub kept_dst: f64,
    /// Half-L1 distance between the reached state and the truncated target.
    pub reached_tv: f64,
    pub src_blocks: Vec<PlanBlock>,
    pub dst_blocks: Vec<PlanBlock>,
    pub segments: Vec<Segment>,
    pub steps: Vec<TransferStep>,
}

impl ProtocolPlan {
    pub fn branch_count(&self) -> usize {
        2 * self.steps.len()
    }

    pub fn segment_log_counts(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.log_count).collect()
    }

    /// Ladder shift paid when content moves from segment `from` to `to`.
    pub fn step_shift(&self, from: usize, to: usize) -> i64 {
        self.dst_blocks[self.segments[from].dst_block].energy - self.dst_blocks[self.segments[to].dst_block].energy
    }

    /// Ladder shift of the relabeling onto segment `s`.
    pub fn relabel_shift(&self, s: usize) -> Option<i64> {
        let seg = &self.segments[s];
        seg.src_block.map(|b| self.src_blocks[b].energy - self.dst_blocks[seg.dst_block].energy)
    }
}

fn plan_blocks(truncated: &DiagonalState, log_kept: f64) -> Vec<PlanBlock> {
    truncated
        .blocks()
        .iter()
        .map(|b| PlanBlock { energy: b.energy.unwrap(), log_count: b.log_count, log_p: b.log_p + log_kept })
        .collect()
}

fn cumulative(log_counts: impl Iterator<Item = f64>, log_total: f64) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = vec![0.0];
    for lc in log_counts {
        acc += (lc - log_total).exp();
        out.push(acc);
    }
    out
}

fn locate(bounds: &[f64], x: f64) -> Option<usize> {
    if x > *bounds.last().unwrap() {
        return None;
    }
    Some(bounds.partition_point(|&b| b <= x).clamp(1, bounds.len() - 1) - 1)
}

pub fn build_adiabatic_plan(
    src: &Macrostate,
    dst: &Macrostate,
    n: u64,
    params: &ProtocolParams,
) -> Result<ProtocolPlan> {
    build_adiabatic_plan_with_ladder(src, dst, n, params, None)
}

pub fn build_adiabatic_plan_with_ladder(
    src: &Macrostate,
    dst: &Macrostate,
    n: u64,
    params: &ProtocolParams,
    num_rungs: Option<u64>,
) -> Result<ProtocolPlan> {
    let identity = src == dst;
    let ps = src.potentials()?;
    let pd = dst.potentials()?;
    if !identity {
        validate_params(params, &ps, &pd)?;
    }
    let mut sites = src.sites();
    sites.extend(dst.sites());
    let grid = EnergyGrid::common(&sites);
    let (us, _, _) = ThermoPotentials::total(&ps);
    let (ud, _, _) = ThermoPotentials::total(&pd);

    let rho = src.gibbs(&grid, n)?;
    let shell_src = Shell::around(us, params.eps, n, &grid);
    let rho_dst = dst.gibbs(&grid, n)?;
    let shell_dst = Shell::around(ud, params.eps_prime, n, &grid);
    let projected_src = shell_project(&rho, &shell_src);
    let projected_dst = shell_project(&rho_dst, &shell_dst);
    let dim_of = |r: &Result<(DiagonalState, f64)>| r.as_ref().map_or(f64::NEG_INFINITY, |(t, _)| t.log_dimension());
    let (log_dim_src, log_total) = (dim_of(&projected_src), dim_of(&projected_dst));
    if !identity && log_dim_src >= log_total {
        return Err(Error::DimOrderViolated { log_src: log_dim_src, log_dst: log_total });
    }
    let (trunc_src, kept_src) = projected_src?;
    let (trunc_dst, kept_dst) = projected_dst?;

    let span = src.span_units(&grid, n)?.max(dst.span_units(&grid, n)?);
    let rungs = num_rungs.unwrap_or_else(|| default_num_rungs(grid.unit, n, params.u_w, ud - us, params.delta, span));
    let ladder = ladder_new(grid.unit, rungs)?;
    let win = window(&ladder, n, params.u_w, params.delta).map_err(|e| match e {
        Error::WindowTouchesTop { .. } => Error::LadderTooSmall {
            num_rungs: rungs,
            detail: format!("storage window n(u_w ± delta) does not fit below rung {rungs}"),
        },
        other => other,
    })?;

    let src_blocks = plan_blocks(&trunc_src, kept_src.ln());
    let dst_blocks = plan_blocks(&trunc_dst, kept_dst.ln());
    if identity {
        return Ok(ProtocolPlan {
            n,
            grid,
            params: *params,
            identity,
            shell_src,
            shell_dst,
            ladder,
            window: win,
            log_total,
            log_dim_src,
            kept_src,
            kept_dst,
            reached_tv: 0.0,
            src_blocks,
            dst_blocks,
            segments: Vec::new(),
            steps: Vec::new(),
        });
    }

    let padded = trunc_src.padded_to(log_total)?;
    let reached = closest_majorized(&trunc_dst, &padded)?;
    let reached_tv = tv_distance(&reached, &trunc_dst)?;

    let bs = cumulative(trunc_src.blocks().iter().map(|b| b.log_count), log_total);
    let bd = cumulative(trunc_dst.blocks().iter().map(|b| b.log_count), log_total);
    let bq = cumulative(reached.blocks().iter().map(|b| b.log_count), log_total);
    let mut bd_norm = bd.clone();
    let last = *bd.last().unwrap();
    bd_norm.iter_mut().for_each(|b| *b /= last);
    let mut bq_norm = bq.clone();
    let lastq = *bq.last().unwrap();
    bq_norm.iter_mut().for_each(|b| *b /= lastq);
    let mut all = bs.clone();
    all.extend(&bq_norm);
    let bounds = union_boundaries(&all, &bd_norm);

    let mut segments = Vec::with_capacity(bounds.len());
    let mut lens = Vec::with_capacity(bounds.len());
    let mut p = Vec::with_capacity(bounds.len());
    let mut q = Vec::with_capacity(bounds.len());
    for w in bounds.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let len = w[1] - w[0];
        let sb = locate(&bs, mid);
        let db = locate(&bd_norm, mid).expect("inside destination range");
        let qb = locate(&bq_norm, mid).expect("inside destination range");
        let qblk = reached.blocks()[qb];
        let dens_q = if qblk.log_p == f64::NEG_INFINITY { 0.0 } else { (qblk.log_p + log_total).exp() };
        let dens_p = sb.map_or(0.0, |i| (trunc_src.blocks()[i].log_p + log_total).exp());
        segments.push(Segment { log_count: len.ln() + log_total, src_block: sb, dst_block: db, target_density: dens_q });
        lens.push(len);
        p.push(dens_p);
        q.push(dens_q);
    }
    let log_counts: Vec<f64> = segments.iter().map(|s| s.log_count).collect();
    let steps = chain_on_segments(&lens, &log_counts, &p, &q)?;

    Ok(ProtocolPlan {
        n,
        grid,
        params: *params,
        identity,
        shell_src,
        shell_dst,
        ladder,
        window: win,
        log_total,
        log_dim_src,
        kept_src,
        kept_dst,
        reached_tv,
        src_blocks,
        dst_blocks,
        segments,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Sector {
    Src,
    Dst,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemBlock {
    pub sector: Sector,
    pub energy: i64,
    pub log_count: f64,
    pub dst_block: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyAudit {
    pub branches: u64,
    pub checked_entries: u64,
    pub violations: u64,
    /// Largest deviation of the total-energy distribution from its initial value.
    pub histogram_drift: f64,
}

/// Joint diagonal state of system blocks and storage rungs.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub blocks: Vec<SystemBlock>,
    /// Per block: absolute probability mass on each rung.
    pub storage: Vec<LadderState>,
    pub audit: EnergyAudit,
}

impl JointState {
    /// ρ ⊗ π with every system block in one sector.
    pub fn product(rho: &DiagonalState, pi: &LadderState, sector: Sector) -> Result<JointState> {
        let mut blocks = Vec::new();
        let mut storage = Vec::new();
        for b in rho.blocks() {
            let e = b.energy.ok_or(Error::NonThermalState)?;
            blocks.push(SystemBlock { sector, energy: e, log_count: b.log_count, dst_block: None });
            storage.push(scaled(pi, b.mass()));
        }
        Ok(JointState { blocks, storage, audit: EnergyAudit::default() })
    }

    pub fn log_prob(&self, block: usize, rung: i64) -> f64 {
        self.storage[block].prob(rung).ln()
    }

    pub fn total_mass(&self) -> f64 {
        self.storage.iter().map(|s| s.total_mass()).sum()
    }

    pub fn sector_mass(&self, sector: Sector) -> f64 {
        self.blocks
            .iter()
            .zip(&self.storage)
            .filter(|(b, _)| b.sector == sector)
            .map(|(_, s)| s.total_mass())
            .sum()
    }

    /// Distribution of system + storage energy in grid units.
    pub fn total_energy_histogram(&self) -> BTreeMap<i64, f64> {
        let mut h = BTreeMap::new();
        for (b, s) in self.blocks.iter().zip(&self.storage) {
            if let Some((lo, _)) = s.support() {
                for (i, &m) in s.probs().iter().enumerate() {
                    if m != 0.0 {
                        *h.entry(b.energy + lo + i as i64).or_insert(0.0) += m;
                    }
                }
            }
        }
        h
    }

    /// Mean of system + storage energy in grid units.
    pub fn mean_total_energy(&self) -> f64 {
        self.total_energy_histogram().iter().map(|(e, m)| *e as f64 * m).sum()
    }
}

fn scaled(s: &LadderState, f: f64) -> LadderState {
    LadderState::from_dense(s.offset(), s.probs().iter().map(|p| p * f).collect())
}

fn shifted(s: &LadderState, by: i64, f: f64) -> LadderState {
    LadderState::from_dense(s.offset() + by, s.probs().iter().map(|p| p * f).collect())
}

fn add(a: &LadderState, b: &LadderState) -> LadderState {
    let (sa, sb) = (a.support(), b.support());
    let (lo, hi) = match (sa, sb) {
        (None, None) => return LadderState::from_dense(0, Vec::new()),
        (Some(x), None) | (None, Some(x)) => x,
        (Some(x), Some(y)) => (x.0.min(y.0), x.1.max(y.1)),
    };
    LadderState::from_dense(lo, (lo..=hi).map(|r| a.prob(r) + b.prob(r)).collect())
}

fn check_rungs(s: &LadderState, shift: i64, ladder: &Ladder) -> Result<()> {
    if let Some((lo, hi)) = s.support() {
        for r in [lo, hi] {
            if !ladder.contains(r + shift) {
                return Err(Error::LadderBoundaryHit { rung: r, shift, num_rungs: ladder.num_rungs });
            }
        }
    }
    Ok(())
}

fn audit_branch(audit: &mut EnergyAudit, content: &LadderState, e_from: i64, e_to: i64, shift: i64) {
    audit.branches += 1;
    if let Some((lo, hi)) = content.support() {
        for r in lo..=hi {
            if content.prob(r) == 0.0 {
                continue;
            }
            audit.checked_entries += 1;
            if e_from + r != e_to + r + shift {
                audit.violations += 1;
            }
        }
    }
}

/// Matches plan source blocks to blocks of `rho` by energy and count.
fn match_source(plan: &ProtocolPlan, rho: &DiagonalState) -> Result<(Vec<Block>, Vec<Block>)> {
    let mut used = vec![false; rho.len()];
    let mut matched = Vec::with_capacity(plan.src_blocks.len());
    for pb in &plan.src_blocks {
        let hit = rho.blocks().iter().enumerate().find(|(i, b)| {
            !used[*i] && b.energy == Some(pb.energy) && crate::logmath::log_close(b.log_count, pb.log_count, 1e-9)
        });
        match hit {
            Some((i, b)) => {
                used[i] = true;
                matched.push(*b);
            }
            None => {
                return Err(Error::PlanMismatch(format!(
                    "no block with energy {} and e^{:.4} states",
                    pb.energy, pb.log_count
                )))
            }
        }
    }
    let rest = rho.blocks().iter().enumerate().filter(|(i, _)| !used[*i]).map(|(_, b)| *b).collect();
    Ok((matched, rest))
}

/// Exact propagation of ρ ⊗ π through the plan.
pub fn execute_plan(plan: &ProtocolPlan, rho_src: &DiagonalState, pi_init: &LadderState) -> Result<JointState> {
    if !rho_src.has_energies() {
        return Err(Error::NonThermalState);
    }
    if let Some((lo, hi)) = pi_init.support() {
        if !plan.ladder.contains(lo) || !plan.ladder.contains(hi) {
            return Err(Error::LadderBoundaryHit { rung: hi, shift: 0, num_rungs: plan.ladder.num_rungs });
        }
    }
    if plan.identity {
        let mut j = JointState::product(rho_src, pi_init, Sector::Dst)?;
        j.audit.branches = 1;
        return Ok(j);
    }
    let before = JointState::product(rho_src, pi_init, Sector::Src)?.total_energy_histogram();
    let (matched, rest) = match_source(plan, rho_src)?;
    let mut audit = EnergyAudit::default();

    let mut content: Vec<LadderState> = Vec::with_capacity(plan.segments.len());
    for (s, seg) in plan.segments.iter().enumerate() {
        match seg.src_block {
            Some(b) => {
                let mass = (matched[b].log_p + seg.log_count).exp();
                let shift = plan.relabel_shift(s).unwrap();
                let c = scaled(pi_init, mass);
                check_rungs(&c, shift, &plan.ladder)?;
                audit_branch(&mut audit, &c, plan.src_blocks[b].energy, plan.dst_blocks[seg.dst_block].energy, shift);
                content.push(shifted(&c, shift, 1.0));
            }
            None => content.push(LadderState::from_dense(0, Vec::new())),
        }
    }

    let log_counts = plan.segment_log_counts();
    for step in &plan.steps {
        let (j, k) = (step.source_block, step.dest_block);
        let (a_j, a_k) = step.coefficients(&log_counts);
        let out_jk = a_k * (log_counts[k] - log_counts[j]).exp();
        let out_kj = a_j * (log_counts[j] - log_counts[k]).exp();
        let s_jk = plan.step_shift(j, k);
        let (ej, ek) = (plan.dst_blocks[plan.segments[j].dst_block].energy, plan.dst_blocks[plan.segments[k].dst_block].energy);
        check_rungs(&content[j], s_jk, &plan.ladder)?;
        check_rungs(&content[k], -s_jk, &plan.ladder)?;
        audit_branch(&mut audit, &content[j], ej, ek, s_jk);
        audit_branch(&mut audit, &content[k], ek, ej, -s_jk);
        let moved_jk = shifted(&content[j], s_jk, out_jk);
        let moved_kj = shifted(&content[k], -s_jk, out_kj);
        let stay_j = scaled(&content[j], 1.0 - out_jk);
        let stay_k = scaled(&content[k], 1.0 - out_kj);
        content[j] = add(&stay_j, &moved_kj);
        content[k] = add(&stay_k, &moved_jk);
    }

    let mut blocks = Vec::with_capacity(plan.segments.len() + rest.len());
    let mut storage = Vec::with_capacity(plan.segments.len() + rest.len());
    for (seg, c) in plan.segments.iter().zip(content) {
        blocks.push(SystemBlock {
            sector: Sector::Dst,
            energy: plan.dst_blocks[seg.dst_block].energy,
            log_count: seg.log_count,
            dst_block: Some(seg.dst_block),
        });
        storage.push(c);
    }
    for b in rest {
        audit.branches += 0;
        blocks.push(SystemBlock { sector: Sector::Src, energy: b.energy.unwrap(), log_count: b.log_count, dst_block: None });
        storage.push(scaled(pi_init, b.mass()));
    }
    let mut joint = JointState { blocks, storage, audit };
    let after = joint.total_energy_histogram();
    let keys: std::collections::BTreeSet<i64> = before.keys().chain(after.keys()).copied().collect();
    joint.audit.histogram_drift = keys
        .iter()
        .map(|e| (before.get(e).copied().unwrap_or(0.0) - after.get(e).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max);
    Ok(joint)
}

/// Marginal on the system: one block per system block.
pub fn reduced_system(joint: &JointState) -> DiagonalState {
    let blocks = joint
        .blocks
        .iter()
        .zip(&joint.storage)
        .map(|(b, s)| {
            let m = s.total_mass();
            let lp = if m > 0.0 { m.ln() - b.log_count } else { f64::NEG_INFINITY };
            Block::new(lp, b.log_count, Some(b.energy))
        })
        .collect();
    DiagonalState::from_blocks(blocks)
}

/// Marginal on the storage ladder.
pub fn reduced_storage(joint: &JointState) -> LadderState {
    joint.storage.iter().fold(LadderState::from_dense(0, Vec::new()), |acc, s| add(&acc, s))
}

/// One point of the staged path β′_m(1 − 1/t) used when ΔS̃ = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedPoint {
    pub t: f64,
    pub beta_last: f64,
    pub delta_s: f64,
    /// Smallest n of the grid admitting a plan, if any.
    pub n: Option<u64>,
}

/// Destination with the last inverse temperature scaled by (1 − 1/t).
pub fn staged_destination(dst: &Macrostate, t: f64) -> Macrostate {
    let mut d = dst.clone();
    if let Some(last) = d.parts.last_mut() {
        last.beta *= 1.0 - 1.0 / t;
    }
    d
}

/// Sweeps t; per t, picks δ′ as `fraction`·ΔS̃_t and reports the first n admitting a plan.
pub fn staged_sequence(
    src: &Macrostate,
    dst: &Macrostate,
    t_values: &[f64],
    fraction: f64,
    n_grid: &[u64],
) -> Result<Vec<StagedPoint>> {
    let ps = src.potentials()?;
    let mut sites = src.sites();
    sites.extend(dst.sites());
    let unit = EnergyGrid::common(&sites).unit;
    let mut out = Vec::new();
    for &t in t_values {
        let d = staged_destination(dst, t);
        let pd = d.potentials()?;
        let (ds, _, _) = differences(&ps, &pd);
        let params = admissible_params(&ps, &pd, fraction * ds, unit)?;
        let n = n_grid.iter().copied().find(|&n| build_adiabatic_plan(src, &d, n, &params).is_ok());
        out.push(StagedPoint { t, beta_last: d.parts.last().map_or(0.0, |p| p.beta), delta_s: ds, n });
    }
    Ok(out)
}

/// Samples per-site work values of single trajectories.
pub fn sample_work(
    plan: &ProtocolPlan,
    rho_src: &DiagonalState,
    pi_init: &LadderState,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = plan.ladder.unit_f64();
    let n = plan.n as f64;
    let (matched, rest) = if plan.identity { (Vec::new(), rho_src.blocks().to_vec()) } else { match_source(plan, rho_src)? };
    let mut weights: Vec<f64> = matched.iter().map(|b| b.mass()).collect();
    weights.push(rest.iter().map(|b| b.mass()).sum::<f64>().max(0.0));
    let pick_block = WeightedIndex::new(&weights).map_err(|e| Error::PlanMismatch(e.to_string()))?;
    let per_block: Vec<Vec<usize>> = (0..matched.len())
        .map(|b| (0..plan.segments.len()).filter(|&s| plan.segments[s].src_block == Some(b)).collect())
        .collect();
    let log_counts = plan.segment_log_counts();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let b = pick_block.sample(&mut rng);
        if b == matched.len() {
            out.push(0.0);
            continue;
        }
        let segs = &per_block[b];
        let w: Vec<f64> = segs.iter().map(|&s| (log_counts[s] - plan.src_blocks[b].log_count).exp()).collect();
        let mut s = segs[WeightedIndex::new(&w).map_err(|e| Error::PlanMismatch(e.to_string()))?.sample(&mut rng)];
        let mut shift = plan.relabel_shift(s).unwrap();
        for step in &plan.steps {
            let (j, k) = (step.source_block, step.dest_block);
            let (a_j, a_k) = step.coefficients(&log_counts);
            let u: f64 = rand::Rng::gen(&mut rng);
            if s == j && u < a_k * (log_counts[k] - log_counts[j]).exp() {
                shift += plan.step_shift(j, k);
                s = k;
            } else if s == k && u < a_j * (log_counts[j] - log_counts[k]).exp() {
                shift += plan.step_shift(k, j);
                s = j;
            }
        }
        let _ = pi_init;
        out.push(shift as f64 * unit / n);
    }
    Ok(out)
}

fn fmt_f(x: f64) -> String {
    format!("{x:e}")
}

impl ProtocolPlan {
    /// Line-oriented text form; floats round-trip exactly.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        let _ = writeln!(s, "ldthermo-plan 1");
        let _ = writeln!(s, "n {}", self.n);
        let _ = writeln!(s, "identity {}", self.identity);
        let _ = writeln!(s, "grid {} {}", self.grid.unit, self.grid.origin);
        let _ = writeln!(
            s,
            "params {} {} {} {} {}",
            fmt_f(p.eps),
            fmt_f(p.eps_prime),
            fmt_f(p.delta),
            fmt_f(p.delta_prime),
            fmt_f(p.u_w)
        );
        for (name, sh) in [("shell_src", &self.shell_src), ("shell_dst", &self.shell_dst)] {
            let _ = writeln!(s, "{name} {} {} {} {}", fmt_f(sh.center), fmt_f(sh.half_width), sh.lo_units, sh.hi_units);
        }
        let _ = writeln!(s, "ladder {} {}", self.ladder.unit, self.ladder.num_rungs);
        let _ = writeln!(s, "window {} {}", self.window.lo, self.window.hi);
        let _ = writeln!(
            s,
            "dims {} {} {} {} {}",
            fmt_f(self.log_total),
            fmt_f(self.log_dim_src),
            fmt_f(self.kept_src),
            fmt_f(self.kept_dst),
            fmt_f(self.reached_tv)
        );
        for b in &self.src_blocks {
            let _ = writeln!(s, "src_block {} {} {}", b.energy, fmt_f(b.log_count), fmt_f(b.log_p));
        }
        for b in &self.dst_blocks {
            let _ = writeln!(s, "dst_block {} {} {}", b.energy, fmt_f(b.log_count), fmt_f(b.log_p));
        }
        for g in &self.segments {
            let src = g.src_block.map_or("-".to_string(), |b| b.to_string());
            let _ = writeln!(s, "segment {} {} {} {}", fmt_f(g.log_count), src, g.dst_block, fmt_f(g.target_density));
        }
        for (i, st) in self.steps.iter().enumerate() {
            let _ = writeln!(
                s,
                "step {} {} {} {} shift {}",
                fmt_f(st.weight),
                st.source_block,
                st.dest_block,
                fmt_f(st.moved_log_count),
                self.step_shift(st.source_block, st.dest_block)
            );
            let _ = i;
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<ProtocolPlan> {
        let mut plan = ProtocolPlan {
            n: 0,
            grid: EnergyGrid { unit: Rational::from_integer(1), origin: Rational::from_integer(0) },
            params: ProtocolParams { eps: 0.0, eps_prime: 0.0, delta: 0.0, delta_prime: 0.0, u_w: 0.0 },
            identity: false,
            shell_src: Shell { center: 0.0, half_width: 0.0, lo_units: 0, hi_units: 0 },
            shell_dst: Shell { center: 0.0, half_width: 0.0, lo_units: 0, hi_units: 0 },
            ladder: Ladder { unit: Rational::from_integer(1), num_rungs: 1 },
            window: Window { lo: 0, hi: 0 },
            log_total: 0.0,
            log_dim_src: 0.0,
            kept_src: 0.0,
            kept_dst: 0.0,
            reached_tv: 0.0,
            src_blocks: Vec::new(),
            dst_blocks: Vec::new(),
            segments: Vec::new(),
            steps: Vec::new(),
        };
        let mut seen_header = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: &str| Error::Manifest { line, msg: msg.to_string() };
            let toks: Vec<&str> = raw.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            let f = |k: usize| -> Result<f64> {
                toks.get(k).and_then(|t| t.parse::<f64>().ok()).ok_or_else(|| err("expected a number"))
            };
            let int = |k: usize| -> Result<i64> {
                toks.get(k).and_then(|t| t.parse::<i64>().ok()).ok_or_else(|| err("expected an integer"))
            };
            let rat = |k: usize| -> Result<Rational> {
                toks.get(k).and_then(|t| crate::spectrum::parse_rational(t)).ok_or_else(|| err("expected a rational"))
            };
            match toks[0] {
                "ldthermo-plan" => {
                    if toks.get(1) != Some(&"1") {
                        return Err(err("unsupported manifest version"));
                    }
                    seen_header = true;
                }
                _ if !seen_header => return Err(err("missing header")),
                "n" => plan.n = int(1)? as u64,
                "identity" => plan.identity = toks.get(1) == Some(&"true"),
                "grid" => plan.grid = EnergyGrid { unit: rat(1)?, origin: rat(2)? },
                "params" => {
                    plan.params = ProtocolParams { eps: f(1)?, eps_prime: f(2)?, delta: f(3)?, delta_prime: f(4)?, u_w: f(5)? }
                }
                "shell_src" | "shell_dst" => {
                    let sh = Shell { center: f(1)?, half_width: f(2)?, lo_units: int(3)?, hi_units: int(4)? };
                    if toks[0] == "shell_src" {
                        plan.shell_src = sh;
                    } else {
                        plan.shell_dst = sh;
                    }
                }
                "ladder" => plan.ladder = Ladder { unit: rat(1)?, num_rungs: int(2)? as u64 },
                "window" => plan.window = Window { lo: int(1)?, hi: int(2)? },
                "dims" => {
                    plan.log_total = f(1)?;
                    plan.log_dim_src = f(2)?;
                    plan.kept_src = f(3)?;
                    plan.kept_dst = f(4)?;
                    plan.reached_tv = f(5)?;
                }
                "src_block" | "dst_block" => {
                    let b = PlanBlock { energy: int(1)?, log_count: f(2)?, log_p: f(3)? };
                    if toks[0] == "src_block" {
                        plan.src_blocks.push(b);
                    } else {
                        plan.dst_blocks.push(b);
                    }
                }
                "segment" => {
                    let src_block = match toks.get(2) {
                        Some(&"-") => None,
                        _ => Some(int(2)? as usize),
                    };
                    plan.segments.push(Segment {
                        log_count: f(1)?,
                        src_block,
                        dst_block: int(3)? as usize,
                        target_density: f(4)?,
                    });
                }
                "step" => plan.steps.push(TransferStep {
                    weight: f(1)?,
                    source_block: int(2)? as usize,
                    dest_block: int(3)? as usize,
                    moved_log_count: f(4)?,
                }),
                _ => return Err(err("unknown record")),
            }
        }
        if !seen_header {
            return Err(Error::Manifest { line: 0, msg: "empty manifest".into() });
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    fn qubit() -> SiteSpectrum {
        SiteSpectrum::new(&[(Ratio::new(0, 1), 1), (Ratio::new(1, 1), 1)]).unwrap()
    }

    fn heating() -> (Macrostate, Macrostate) {
        (Macrostate::single(qubit(), 1.0), Macrostate::single(qubit(), 0.5))
    }

    fn explicit() -> ProtocolParams {
        ProtocolParams { eps: 0.02, eps_prime: 0.02, delta: 0.041, delta_prime: 0.0805, u_w: 0.5 }
    }

    #[test]
    fn auto_params_example() {
        let (s, d) = heating();
        let p = admissible_params(&s.potentials().unwrap(), &d.potentials().unwrap(), 0.04, Ratio::new(1, 1)).unwrap();
        assert!((p.eps - 0.005).abs() < 1e-15);
        assert!((p.delta - 0.04).abs() < 1e-15);
        assert!((p.u_w - (0.108600 + 0.32 + 1.0)).abs() < 1e-5);
        validate_params(&p, &s.potentials().unwrap(), &d.potentials().unwrap()).unwrap();
    }

    #[test]
    fn infeasible_delta_prime() {
        let (s, d) = heating();
        let (ps, pd) = (s.potentials().unwrap(), d.potentials().unwrap());
        assert!(matches!(admissible_params(&ps, &pd, 0.09, Ratio::new(1, 1)), Err(Error::InfeasibleDeltaPrime(_))));
        assert!(matches!(admissible_params(&ps, &ps, 0.01, Ratio::new(1, 1)), Err(Error::InfeasibleDeltaPrime(_))));
    }

    #[test]
    fn small_n_violates_dimension_order() {
        let (s, d) = heating();
        let p = admissible_params(&s.potentials().unwrap(), &d.potentials().unwrap(), 0.04, Ratio::new(1, 1)).unwrap();
        let r = build_adiabatic_plan(&s, &d, 4, &p);
        assert!(matches!(r, Err(Error::DimOrderViolated { .. })), "{r:?}");
    }

    #[test]
    fn plan_conserves_energy_and_mass() {
        let (s, d) = heating();
        let plan = build_adiabatic_plan(&s, &d, 60, &explicit()).unwrap();
        assert!(!plan.steps.is_empty());
        assert!(plan.branch_count() <= 2 * (plan.src_blocks.len() + plan.dst_blocks.len()));
        let rho = s.gibbs(&plan.grid, 60).unwrap();
        let pi = LadderState::uniform(plan.window);
        let joint = execute_plan(&plan, &rho, &pi).unwrap();
        assert_eq!(joint.audit.violations, 0);
        assert!(joint.audit.checked_entries > 0);
        assert!(joint.audit.histogram_drift < 1e-12);
        assert!((joint.total_mass() - 1.0).abs() < 1e-9);
        let before = JointState::product(&rho, &pi, Sector::Src).unwrap();
        assert!((before.mean_total_energy() - joint.mean_total_energy()).abs() < 1e-9);
        assert!((reduced_storage(&joint).total_mass() - 1.0).abs() < 1e-9);
        assert!((reduced_system(&joint).log_total_mass()).abs() < 1e-9);
    }

    #[test]
    fn reached_state_matches_target_segments() {
        let (s, d) = heating();
        let plan = build_adiabatic_plan(&s, &d, 80, &explicit()).unwrap();
        let rho = s.gibbs(&plan.grid, 80).unwrap();
        let pi = LadderState::uniform(plan.window);
        let joint = execute_plan(&plan, &rho, &pi).unwrap();
        let mut err = 0.0;
        for (seg, st) in plan.segments.iter().zip(&joint.storage) {
            let want = plan.kept_src * seg.target_density * (seg.log_count - plan.log_total).exp();
            err += (st.total_mass() - want).abs();
        }
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn identity_plan_is_product() {
        let (s, _) = heating();
        let plan = build_adiabatic_plan(&s, &s, 40, &explicit()).unwrap();
        assert!(plan.identity && plan.steps.is_empty());
        let rho = s.gibbs(&plan.grid, 40).unwrap();
        let pi = LadderState::uniform(plan.window);
        let joint = execute_plan(&plan, &rho, &pi).unwrap();
        let st = reduced_storage(&joint);
        assert_eq!(st.support(), pi.support());
        assert!(st.probs().iter().zip(pi.probs()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(reduced_system(&joint).len(), rho.len());
    }

    #[test]
    fn uniform_is_a_fixed_point() {
        let (s, d) = heating();
        let plan = build_adiabatic_plan(&s, &d, 60, &explicit()).unwrap();
        let lc = plan.segment_log_counts();
        let mut ones = vec![1.0; lc.len()];
        for st in &plan.steps {
            st.apply(&lc, &mut ones);
        }
        assert!(ones.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn output_is_majorized_by_input() {
        let (s, d) = heating();
        let plan = build_adiabatic_plan(&s, &d, 60, &explicit()).unwrap();
        let blocks: Vec<Block> = plan
            .src_blocks
            .iter()
            .map(|b| Block::new(-plan.log_dim_src, b.log_count, Some(b.energy)))
            .collect();
        let uni = DiagonalState::new(blocks).unwrap();
        let joint = execute_plan(&plan, &uni, &LadderState::uniform(plan.window)).unwrap();
        let out = reduced_system(&joint);
        assert!(crate::majorize::majorizes(&uni, &out).unwrap());
        assert!(out.entropy() >= uni.entropy() - 1e-9);
    }

    #[test]
    fn tiny_ladder_hits_boundary() {
        let (s, d) = heating();
        let plan = build_adiabatic_plan_with_ladder(&s, &d, 60, &explicit(), Some(34)).unwrap();
        let rho = s.gibbs(&plan.grid, 60).unwrap();
        let low = LadderState::uniform(Window { lo: 2, hi: 4 });
        let r = execute_plan(&plan, &rho, &low);
        assert!(matches!(r, Err(Error::LadderBoundaryHit { .. })), "{r:?}");
        let r = build_adiabatic_plan_with_ladder(&s, &d, 60, &explicit(), Some(20));
        assert!(matches!(r, Err(Error::LadderTooSmall { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let (s, d) = heating();
        let plan = build_adiabatic_plan(&s, &d, 40, &explicit()).unwrap();
        let text = plan.to_manifest();
        let back = ProtocolPlan::from_manifest(&text).unwrap();
        assert_eq!(back, plan);
        assert!(matches!(ProtocolPlan::from_manifest("n 3\n"), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn sampler_is_seeded() {
        let (s, d) = heating();
        let plan = build_adiabatic_plan(&s, &d, 40, &explicit()).unwrap();
        let rho = s.gibbs(&plan.grid, 40).unwrap();
        let pi = LadderState::uniform(plan.window);
        let a = sample_work(&plan, &rho, &pi, 500, 7).unwrap();
        let b = sample_work(&plan, &rho, &pi, 500, 7).unwrap();
        assert_eq!(a, b);
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let joint = execute_plan(&plan, &rho, &pi).unwrap();
        let exact = (reduced_storage(&joint).mean_rung() - pi.mean_rung()) / 40.0;
        assert!((mean - exact).abs() < 0.02, "{mean} vs {exact}");
    }

    #[test]
    fn staged_path_for_equal_entropy() {
        let (s, _) = heating();
        let pts = staged_sequence(&s, &s, &[2.0, 4.0], 0.5, &[40, 80, 160, 320]).unwrap();
        assert!((pts[0].beta_last - 0.5).abs() < 1e-15);
        assert!((pts[1].beta_last - 0.75).abs() < 1e-15);
        assert!(pts[0].delta_s > pts[1].delta_s);
    }
}
