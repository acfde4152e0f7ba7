use crate::error::{Error, Result};
use crate::logmath::{log_close, log_sum_exp};

/// A set of `exp(log_count)` states sharing the probability `exp(log_p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub log_p: f64,
    pub log_count: f64,
    /// Energy in grid units, or `None` once blocks of different energies were merged.
    pub energy: Option<i64>,
}

impl Block {
    pub fn new(log_p: f64, log_count: f64, energy: Option<i64>) -> Self {
        Block { log_p, log_count, energy }
    }

    pub fn log_mass(&self) -> f64 {
        if self.log_p == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.log_p + self.log_count
        }
    }

    pub fn mass(&self) -> f64 {
        self.log_mass().exp()
    }
}

const TIE_REL: f64 = 1e-12;

/// Diagonal density matrix stored as probability blocks, sorted by
/// decreasing probability and, within ties, by increasing energy.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalState {
    blocks: Vec<Block>,
}

impl DiagonalState {
    /// Builds a normalized state; fails if the mass differs from 1 by more than 1e-9.
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let s = Self::from_blocks(blocks);
        let total = s.log_total_mass().exp();
        if !((total - 1.0).abs() <= 1e-9) {
            return Err(Error::NotNormalized(total));
        }
        Ok(s)
    }

    /// Builds a state and rescales it to unit mass.
    pub fn normalized(blocks: Vec<Block>) -> Result<Self> {
        let mut s = Self::from_blocks(blocks);
        let lm = s.log_total_mass();
        if !lm.is_finite() {
            return Err(Error::NotNormalized(lm.exp()));
        }
        for b in &mut s.blocks {
            b.log_p -= lm;
        }
        Ok(s)
    }

    /// Sorts and merges without checking normalization.
    pub(crate) fn from_blocks(mut blocks: Vec<Block>) -> Self {
        blocks.retain(|b| b.log_count > f64::NEG_INFINITY);
        blocks.sort_by(|a, b| {
            b.log_p
                .partial_cmp(&a.log_p)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.energy.cmp(&b.energy))
        });
        let mut out: Vec<Block> = Vec::with_capacity(blocks.len());
        for b in blocks {
            if let Some(last) = out.last_mut() {
                let tie = (last.log_p == f64::NEG_INFINITY && b.log_p == f64::NEG_INFINITY)
                    || log_close(last.log_p, b.log_p, TIE_REL);
                if tie && last.energy == b.energy {
                    last.log_count = crate::logmath::log_add(last.log_count, b.log_count);
                    continue;
                }
            }
            out.push(b);
        }
        DiagonalState { blocks: out }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn log_total_mass(&self) -> f64 {
        let v: Vec<f64> = self.blocks.iter().map(Block::log_mass).collect();
        log_sum_exp(&v)
    }

    /// Log of the number of states, zero-probability states included.
    pub fn log_dimension(&self) -> f64 {
        let v: Vec<f64> = self.blocks.iter().map(|b| b.log_count).collect();
        log_sum_exp(&v)
    }

    /// Von Neumann entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.blocks
            .iter()
            .filter(|b| b.log_p > f64::NEG_INFINITY)
            .map(|b| -b.mass() * b.log_p)
            .sum()
    }

    pub fn has_energies(&self) -> bool {
        self.blocks.iter().all(|b| b.energy.is_some())
    }

    /// Mean energy in grid units.
    pub fn mean_energy_units(&self) -> Result<f64> {
        let mut acc = 0.0;
        for b in &self.blocks {
            let e = b.energy.ok_or(Error::NonThermalState)?;
            acc += b.mass() * e as f64;
        }
        Ok(acc)
    }

    /// Merges blocks of equal probability regardless of energy; the energy
    /// label survives only when all merged blocks share it.
    pub fn merged_by_probability(&self) -> DiagonalState {
        let mut out: Vec<Block> = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            if let Some(last) = out.last_mut() {
                let tie = (last.log_p == f64::NEG_INFINITY && b.log_p == f64::NEG_INFINITY)
                    || log_close(last.log_p, b.log_p, TIE_REL);
                if tie {
                    last.log_count = crate::logmath::log_add(last.log_count, b.log_count);
                    if last.energy != b.energy {
                        last.energy = None;
                    }
                    continue;
                }
            }
            out.push(*b);
        }
        DiagonalState { blocks: out }
    }

    /// Appends zero-probability states until the dimension reaches `exp(log_dim)`.
    pub fn padded_to(&self, log_dim: f64) -> Result<DiagonalState> {
        let own = self.log_dimension();
        if own > log_dim && !log_close(own, log_dim, 1e-12) {
            return Err(Error::DimensionMismatch(format!(
                "cannot pad dimension e^{own} down to e^{log_dim}"
            )));
        }
        if log_close(own, log_dim, 1e-12) {
            return Ok(self.clone());
        }
        let extra = crate::logmath::log_sub(log_dim, own);
        let mut blocks = self.blocks.clone();
        blocks.push(Block::new(f64::NEG_INFINITY, extra, None));
        Ok(DiagonalState::from_blocks(blocks))
    }

    /// Tensor product; energies add.
    pub fn product(&self, other: &DiagonalState) -> DiagonalState {
        let mut blocks = Vec::with_capacity(self.len() * other.len());
        for a in &self.blocks {
            for b in &other.blocks {
                let energy = match (a.energy, b.energy) {
                    (Some(x), Some(y)) => Some(x + y),
                    _ => None,
                };
                blocks.push(Block::new(a.log_p + b.log_p, a.log_count + b.log_count, energy));
            }
        }
        DiagonalState::from_blocks(blocks)
    }
}
