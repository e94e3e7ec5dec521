//! Resolution-branch plumbing: pad a `[B, I, V]` series to a whole number of
//! periods, cut it into non-overlapping patches, resample patches to the model
//! width and back, then flatten and truncate to the original length.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Patch layout of one branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchGeometry {
    pub period: usize,
    pub num_patches: usize,
    pub pad_len: usize,
    pub model_width: usize,
}

impl BranchGeometry {
    pub fn new(len: usize, period: usize, model_width: usize) -> Result<Self> {
        if period == 0 || len == 0 {
            return Err(Error::contract("period and series length must be positive"));
        }
        let num_patches = len.div_ceil(period);
        Ok(BranchGeometry {
            period,
            num_patches,
            pad_len: num_patches * period - len,
            model_width,
        })
    }
}

/// Appends copies of the final time step until the length is a multiple of
/// `period`.
pub fn pad_to_multiple(g: &mut Graph, x: Var, period: usize) -> Result<Var> {
    let &[batch, len, variates] = g.shape(x) else {
        return Err(Error::contract(format!(
            "expected [B, I, V], got {:?}",
            g.shape(x)
        )));
    };
    let geom = BranchGeometry::new(len, period, 0)?;
    if geom.pad_len == 0 {
        return Ok(x);
    }
    let last = g.slice(x, 1, len - 1, 1)?;
    let tail = g.expand(last, &[batch, geom.pad_len, variates])?;
    g.concat(&[x, tail], 1)
}

/// `[B, L, V] -> [B, V, L/period, period]`.
pub fn segment(g: &mut Graph, x: Var, period: usize) -> Result<Var> {
    let &[batch, len, variates] = g.shape(x) else {
        return Err(Error::contract(format!(
            "expected [B, L, V], got {:?}",
            g.shape(x)
        )));
    };
    if period == 0 || len % period != 0 {
        return Err(Error::contract(format!(
            "series length {len} is not a multiple of period {period}; pad first"
        )));
    }
    let by_variate = g.permute(x, &[0, 2, 1])?;
    g.reshape(by_variate, &[batch, variates, len / period, period])
}

/// Endpoint-aligned linear resampling of the last (intra-patch) axis.
pub fn resize_linear(g: &mut Graph, patches: Var, target: usize) -> Result<Var> {
    g.resample(patches, target)
}

/// `[B, V, NP, p] -> [B, I, V]`, dropping the trailing `NP·p − I` steps.
pub fn flatten_truncate(g: &mut Graph, patches: Var, original_len: usize) -> Result<Var> {
    let &[batch, variates, num_patches, period] = g.shape(patches) else {
        return Err(Error::contract(format!(
            "expected [B, V, NP, p], got {:?}",
            g.shape(patches)
        )));
    };
    let total = num_patches * period;
    if total < original_len || original_len == 0 {
        return Err(Error::contract(format!(
            "{num_patches} patches of length {period} cannot cover {original_len} steps"
        )));
    }
    let flat = g.reshape(patches, &[batch, variates, total])?;
    let kept = g.slice(flat, 2, 0, original_len)?;
    g.permute(kept, &[0, 2, 1])
}
