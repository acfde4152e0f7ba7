//! Majorization between block distributions, closest majorized targets and
//! chains of generalized T-transforms.
//!
//! Counts are handled relative to the common dimension `D`: a block of
//! `c` states with per-state probability `p` becomes a piece of length
//! `c/D` and density `p·D`. This keeps every quantity O(1) while the
//! dimension itself stays in the log domain.

use crate::error::{Error, Result};
use crate::logmath::log_close;
use crate::state::{Block, DiagonalState};

const LORENZ_TOL: f64 = 1e-12;
const CHAIN_TOL: f64 = 1e-10;
const MAX_LOG_DIM: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Piece {
    len: f64,
    density: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Profile {
    log_total: f64,
    pieces: Vec<Piece>,
}

impl Profile {
    fn of(state: &DiagonalState, log_total: f64) -> Result<Profile> {
        if log_total > MAX_LOG_DIM {
            return Err(Error::Overflow(format!("dimension e^{log_total} exceeds e^{MAX_LOG_DIM}")));
        }
        let padded = state.padded_to(log_total)?.merged_by_probability();
        let pieces = padded
            .blocks()
            .iter()
            .map(|b| Piece {
                len: (b.log_count - log_total).exp(),
                density: if b.log_p == f64::NEG_INFINITY { 0.0 } else { (b.log_p + log_total).exp() },
            })
            .collect();
        Ok(Profile { log_total, pieces })
    }

    fn boundaries(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = vec![0.0];
        for p in &self.pieces {
            acc += p.len;
            out.push(acc);
        }
        let last = acc;
        for b in &mut out {
            *b /= last;
        }
        out
    }

    fn masses(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = vec![0.0];
        for p in &self.pieces {
            acc += p.len * p.density;
            out.push(acc);
        }
        out
    }
}

fn common_log_total(a: &DiagonalState, b: &DiagonalState) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::DimensionMismatch("empty state".into()));
    }
    let (da, db) = (a.log_dimension(), b.log_dimension());
    if !da.is_finite() || !db.is_finite() {
        return Err(Error::DimensionMismatch(format!("dimensions e^{da}, e^{db}")));
    }
    Ok(da.max(db))
}

/// Piecewise-linear cumulative mass against cumulative state count.
#[derive(Debug, Clone, PartialEq)]
pub struct LorenzCurve {
    /// `(ln cumulative count, cumulative mass)`, starting after the first block.
    pub breakpoints: Vec<(f64, f64)>,
    pub log_total: f64,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl LorenzCurve {
    fn from_profile(p: &Profile) -> LorenzCurve {
        let xs = p.boundaries();
        let ys = p.masses();
        let breakpoints = xs
            .iter()
            .zip(&ys)
            .skip(1)
            .map(|(x, y)| (x.ln() + p.log_total, *y))
            .collect();
        LorenzCurve { breakpoints, log_total: p.log_total, xs, ys }
    }

    /// Cumulative mass after a fraction `x` of all states.
    pub fn eval(&self, x: f64) -> f64 {
        eval_curve(&self.xs, &self.ys, x)
    }

    pub fn total_mass(&self) -> f64 {
        *self.ys.last().unwrap()
    }
}

fn eval_curve(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return *ys.last().unwrap();
    }
    let i = xs.partition_point(|&b| b <= x).clamp(1, xs.len() - 1);
    let (x0, x1) = (xs[i - 1], xs[i]);
    if x1 <= x0 {
        return ys[i];
    }
    ys[i - 1] + (ys[i] - ys[i - 1]) * (x - x0) / (x1 - x0)
}

pub fn lorenz(state: &DiagonalState) -> Result<LorenzCurve> {
    Ok(LorenzCurve::from_profile(&Profile::of(state, state.log_dimension())?))
}

pub(crate) fn union_boundaries(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut out: Vec<f64> = Vec::with_capacity(all.len());
    for x in all {
        match out.last() {
            Some(&l) if x - l <= 1e-13 * x => {}
            _ => out.push(x),
        }
    }
    *out.last_mut().unwrap() = 1.0;
    out
}

fn density_at(bounds: &[f64], p: &Profile, mid: f64) -> f64 {
    let i = bounds.partition_point(|&b| b <= mid).clamp(1, bounds.len() - 1);
    p.pieces[i - 1].density
}

fn lorenz_dominates(p: &Profile, q: &Profile, tol: f64) -> bool {
    let (bp, bq) = (p.boundaries(), q.boundaries());
    let (mp, mq) = (p.masses(), q.masses());
    union_boundaries(&bp, &bq)
        .iter()
        .all(|&x| eval_curve(&bp, &mp, x) >= eval_curve(&bq, &mq, x) - tol)
}

/// True iff p ≻ q; the smaller state is padded with zero-probability states.
pub fn majorizes(p: &DiagonalState, q: &DiagonalState) -> Result<bool> {
    let lt = common_log_total(p, q)?;
    Ok(lorenz_dominates(&Profile::of(p, lt)?, &Profile::of(q, lt)?, LORENZ_TOL))
}

/// Half the L1 distance between the decreasingly sorted distributions.
pub fn tv_distance(p: &DiagonalState, q: &DiagonalState) -> Result<f64> {
    let lt = common_log_total(p, q)?;
    let (pp, pq) = (Profile::of(p, lt)?, Profile::of(q, lt)?);
    let (bp, bq) = (pp.boundaries(), pq.boundaries());
    let u = union_boundaries(&bp, &bq);
    Ok(0.5
        * u.windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                (w[1] - w[0]) * (density_at(&bp, &pp, mid) - density_at(&bq, &pq, mid)).abs()
            })
            .sum::<f64>())
}

fn profile_to_state(log_total: f64, pieces: &[Piece]) -> Result<DiagonalState> {
    let blocks = pieces
        .iter()
        .filter(|p| p.len > 0.0)
        .map(|p| {
            let log_p = if p.density > 0.0 { p.density.ln() - log_total } else { f64::NEG_INFINITY };
            Block::new(log_p, p.len.ln() + log_total, None)
        })
        .collect();
    DiagonalState::normalized(blocks)
}

/// The distribution whose Lorenz curve is the pointwise minimum of the
/// target's and the source's; majorized by the source and equal to the
/// target whenever the source already majorizes it.
pub fn closest_majorized(target: &DiagonalState, source: &DiagonalState) -> Result<DiagonalState> {
    let lt = common_log_total(target, source)?;
    let (pt, ps) = (Profile::of(target, lt)?, Profile::of(source, lt)?);
    if lorenz_dominates(&ps, &pt, LORENZ_TOL) {
        return Ok(target.clone());
    }
    let (bt, bs) = (pt.boundaries(), ps.boundaries());
    let (mt, ms) = (pt.masses(), ps.masses());
    let base = union_boundaries(&bt, &bs);
    let mut xs = vec![base[0]];
    for w in base.windows(2) {
        let d0 = eval_curve(&bt, &mt, w[0]) - eval_curve(&bs, &ms, w[0]);
        let d1 = eval_curve(&bt, &mt, w[1]) - eval_curve(&bs, &ms, w[1]);
        if (d0 > LORENZ_TOL && d1 < -LORENZ_TOL) || (d0 < -LORENZ_TOL && d1 > LORENZ_TOL) {
            let x = w[0] + (w[1] - w[0]) * d0 / (d0 - d1);
            if x > w[0] && x < w[1] {
                xs.push(x);
            }
        }
        xs.push(w[1]);
    }
    let pieces: Vec<Piece> = xs
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            let lower_is_target = eval_curve(&bt, &mt, mid) <= eval_curve(&bs, &ms, mid);
            let density = if lower_is_target { density_at(&bt, &pt, mid) } else { density_at(&bs, &ps, mid) };
            Piece { len: w[1] - w[0], density }
        })
        .collect();
    profile_to_state(lt, &pieces)
}

/// One generalized T-transform between two segments: with probability
/// `weight` the smaller segment is swapped with a uniformly random
/// equal-size part of the larger one, otherwise nothing happens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferStep {
    pub weight: f64,
    /// Segment losing probability (higher density).
    pub source_block: usize,
    /// Segment gaining probability.
    pub dest_block: usize,
    pub moved_log_count: f64,
}

impl TransferStep {
    /// Mixing coefficients (a_src, a_dst) for segment lengths.
    pub fn coefficients(&self, log_counts: &[f64]) -> (f64, f64) {
        let (cj, ck) = (log_counts[self.source_block], log_counts[self.dest_block]);
        let a_src = if cj <= ck { self.weight } else { self.weight * (ck - cj).exp() };
        let a_dst = if ck <= cj { self.weight } else { self.weight * (cj - ck).exp() };
        (a_src, a_dst)
    }

    /// Expected per-state densities after the two-branch mixture.
    pub fn apply(&self, log_counts: &[f64], values: &mut [f64]) {
        let (j, k) = (self.source_block, self.dest_block);
        let (vj, vk) = (values[j], values[k]);
        let (a_j, a_k) = self.coefficients(log_counts);
        values[j] = vj + a_j * (vk - vj);
        values[k] = vk + a_k * (vj - vk);
    }
}

/// A sequence of T-transforms acting on a fixed segmentation of the states.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferChain {
    pub log_total: f64,
    /// Absolute log-counts of the segments.
    pub log_counts: Vec<f64>,
    /// Source densities (probability per state times the dimension).
    pub source: Vec<f64>,
    pub steps: Vec<TransferStep>,
}

impl TransferChain {
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let mut v = values.to_vec();
        for s in &self.steps {
            s.apply(&self.log_counts, &mut v);
        }
        v
    }

    pub fn output(&self) -> Vec<f64> {
        self.apply(&self.source)
    }

    /// A block state for segment densities.
    pub fn to_state(&self, values: &[f64]) -> Result<DiagonalState> {
        let blocks = self
            .log_counts
            .iter()
            .zip(values)
            .map(|(&lc, &v)| Block::new(if v > 0.0 { v.ln() - self.log_total } else { f64::NEG_INFINITY }, lc, None))
            .collect();
        DiagonalState::normalized(blocks)
    }
}

/// Builds the steps taking densities `p` to `q` on segments of relative
/// lengths `lens`; both sequences must be non-increasing with q ≺ p.
pub fn chain_on_segments(lens: &[f64], log_counts: &[f64], p: &[f64], q: &[f64]) -> Result<Vec<TransferStep>> {
    let n = lens.len();
    let mut v = p.to_vec();
    let tol = |i: usize, v: &[f64]| CHAIN_TOL * (v[i].abs() + q[i].abs()) + 1e-15 / lens[i];
    let mut steps = Vec::new();
    for _ in 0..=2 * n {
        let j = match (0..n).rev().find(|&i| v[i] - q[i] > tol(i, &v)) {
            Some(j) => j,
            None => break,
        };
        let k = match (j + 1..n).find(|&i| q[i] - v[i] > tol(i, &v)) {
            Some(k) => k,
            None => {
                // Majorization leaves no real excess without a later deficit.
                v[j] = q[j];
                continue;
            }
        };
        let gap = v[j] - v[k];
        let mass_j = (v[j] - q[j]) * lens[j];
        let mass_k = (q[k] - v[k]) * lens[k];
        let m = mass_j.min(mass_k);
        let weight = (m / (lens[j].min(lens[k]) * gap)).clamp(0.0, 1.0);
        let step = TransferStep {
            weight,
            source_block: j,
            dest_block: k,
            moved_log_count: log_counts[j].min(log_counts[k]),
        };
        step.apply(log_counts, &mut v);
        if mass_j <= mass_k {
            v[j] = q[j];
        }
        if mass_k <= mass_j {
            v[k] = q[k];
        }
        steps.push(step);
    }
    Ok(steps)
}

/// Segments of the common refinement of two states' sorted blocks.
fn refine(a: &Profile, b: &Profile) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ba, bb) = (a.boundaries(), b.boundaries());
    let u = union_boundaries(&ba, &bb);
    let mut lens = Vec::new();
    let mut da = Vec::new();
    let mut db = Vec::new();
    for w in u.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        lens.push(w[1] - w[0]);
        da.push(density_at(&ba, a, mid));
        db.push(density_at(&bb, b, mid));
    }
    (lens, da, db)
}

/// T-transform chain mapping `source` onto `reached` (which must be majorized by it).
pub fn t_transform_chain(source: &DiagonalState, reached: &DiagonalState) -> Result<TransferChain> {
    let (ls, lr) = (source.log_dimension(), reached.log_dimension());
    if !log_close(ls, lr, 1e-12) {
        return Err(Error::DimensionMismatch(format!("e^{ls} vs e^{lr}")));
    }
    let lt = ls.max(lr);
    let (ps, pr) = (Profile::of(source, lt)?, Profile::of(reached, lt)?);
    if !lorenz_dominates(&ps, &pr, CHAIN_TOL) {
        return Err(Error::NotMajorized);
    }
    let (lens, p, q) = refine(&ps, &pr);
    let log_counts: Vec<f64> = lens.iter().map(|l| l.ln() + lt).collect();
    let steps = chain_on_segments(&lens, &log_counts, &p, &q)?;
    Ok(TransferChain { log_total: lt, log_counts, source: p, steps })
}
