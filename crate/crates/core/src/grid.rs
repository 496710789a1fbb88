//! Sidelink time-frequency grid: subchannel to PRB mapping, the PSSCH
//! subframe pool and transport block footprints.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// PRBs occupied by one SCI.
pub const SCI_PRBS: usize = 2;
/// SCI payload length in bits.
pub const SCI_BITS: usize = 32;
/// Upper bound on the PRBs a grid may span (20 MHz carrier).
pub const MAX_GRID_PRBS: usize = 110;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_subch: usize,
    pub subch_size: usize,
    pub subch_rb_start: usize,
    /// SCI placed on the PRBs directly adjacent to the TB.
    pub adjacency: bool,
    pub beta: usize,
    pub slss_period_ticks: u64,
    pub bytes_per_prb: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n_subch: 4,
            subch_size: 12,
            subch_rb_start: 0,
            adjacency: true,
            beta: 2,
            slss_period_ticks: 160,
            bytes_per_prb: 36,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SimError::Config(m));
        if self.n_subch < 1 {
            return err("grid.n_subch must be >= 1".into());
        }
        if self.subch_size < SCI_PRBS {
            return err(format!(
                "grid.subch_size must be >= {SCI_PRBS} to hold an SCI, got {}",
                self.subch_size
            ));
        }
        if !self.adjacency {
            return err("grid.adjacency = false (non-adjacent SCI/TB) is not supported".into());
        }
        if self.beta != SCI_PRBS {
            return err(format!(
                "grid.beta must be {SCI_PRBS} in adjacency mode, got {}",
                self.beta
            ));
        }
        let top = self.subch_rb_start + self.n_subch * self.subch_size + self.beta;
        if top > MAX_GRID_PRBS {
            return err(format!(
                "grid spans PRBs up to {top}, more than the {MAX_GRID_PRBS} PRB limit"
            ));
        }
        if self.slss_period_ticks == 0 {
            return err("grid.slss_period must be > 0".into());
        }
        if self.bytes_per_prb == 0 {
            return err("grid.bytes_per_prb must be > 0".into());
        }
        Ok(())
    }

    pub fn is_slss(&self, tick: u64) -> bool {
        tick.is_multiple_of(self.slss_period_ticks)
    }

    /// Largest transport block (bytes, headers included) that one subframe
    /// can carry when every subchannel is used.
    pub fn subframe_capacity_bytes(&self) -> usize {
        (self.n_subch * self.subch_size - SCI_PRBS) * self.bytes_per_prb
    }
}

/// PRB index of offset `j` inside subchannel `m` (adjacent SCI/TB layout):
/// `n_PRB = n_subCHRBStart + m * n_subCHsize + j + beta`.
pub fn prb_index(m: usize, j: usize, cfg: &GridConfig) -> Result<usize> {
    if m >= cfg.n_subch {
        return Err(SimError::IndexOutOfGrid(format!(
            "subchannel {m} >= n_subch {}",
            cfg.n_subch
        )));
    }
    if j >= cfg.subch_size {
        return Err(SimError::IndexOutOfGrid(format!(
            "PRB offset {j} >= subch_size {}",
            cfg.subch_size
        )));
    }
    if !cfg.adjacency {
        return Err(SimError::IndexOutOfGrid(
            "non-adjacent layout has no PRB mapping".into(),
        ));
    }
    Ok(cfg.subch_rb_start + m * cfg.subch_size + j + cfg.beta)
}

/// PSSCH subframes in `[start, end)`: every slot except SLSS slots.
pub fn build_pssch_pool(start: u64, end: u64, cfg: &GridConfig) -> Vec<u64> {
    (start..end).filter(|&t| !cfg.is_slss(t)).collect()
}

/// Candidate single-subframe resource: one subframe and a run of
/// contiguous subchannels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Csr {
    pub subframe: u64,
    pub subch_start: usize,
    pub l_subch: usize,
}

impl Csr {
    pub fn new(
        subframe: u64,
        subch_start: usize,
        l_subch: usize,
        cfg: &GridConfig,
    ) -> Result<Self> {
        if l_subch == 0 || subch_start + l_subch > cfg.n_subch {
            return Err(SimError::IndexOutOfGrid(format!(
                "subchannels {subch_start}..{} exceed n_subch {}",
                subch_start + l_subch,
                cfg.n_subch
            )));
        }
        if cfg.is_slss(subframe) {
            return Err(SimError::IndexOutOfGrid(format!(
                "subframe {subframe} carries SLSS"
            )));
        }
        Ok(Csr {
            subframe,
            subch_start,
            l_subch,
        })
    }

    pub fn subch_end(&self) -> usize {
        self.subch_start + self.l_subch
    }

    pub fn subchannels(&self) -> std::ops::Range<usize> {
        self.subch_start..self.subch_end()
    }

    pub fn overlaps_subch(&self, start: usize, len: usize) -> bool {
        self.subch_start < start + len && start < self.subch_end()
    }

    /// Same subframe and at least one shared subchannel.
    pub fn collides(&self, other: &Csr) -> bool {
        self.subframe == other.subframe && self.overlaps_subch(other.subch_start, other.l_subch)
    }

    pub fn at(&self, subframe: u64) -> Csr {
        Csr { subframe, ..*self }
    }
}

/// SCI resource footprint; always two PRBs in the TB's subframe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SciFootprint {
    pub prb_count: usize,
    pub bits: usize,
    pub colocated_subframe: bool,
}

impl SciFootprint {
    pub const fn new() -> Self {
        SciFootprint {
            prb_count: SCI_PRBS,
            bits: SCI_BITS,
            colocated_subframe: true,
        }
    }
}

impl Default for SciFootprint {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TbFootprint {
    /// PRBs for the TB alone.
    pub prbs: usize,
    /// Subchannels for SCI + TB.
    pub l_subch: usize,
}

/// PRBs and subchannels needed for a payload plus protocol headers. The SCI
/// shares the first subchannel with the TB.
pub fn tb_prbs_required(
    payload_bytes: usize,
    header_bytes: usize,
    cfg: &GridConfig,
) -> Result<TbFootprint> {
    if payload_bytes == 0 {
        return Err(SimError::Config("payload must be at least one byte".into()));
    }
    let bytes = payload_bytes + header_bytes;
    let prbs = bytes.div_ceil(cfg.bytes_per_prb);
    let l_subch = (prbs + SCI_PRBS).div_ceil(cfg.subch_size);
    if l_subch > cfg.n_subch {
        return Err(SimError::OversizedTb {
            bytes,
            needed: l_subch,
            available: cfg.n_subch,
        });
    }
    Ok(TbFootprint { prbs, l_subch })
}
