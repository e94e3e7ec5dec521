use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

/// Endpoint-aligned linear resampling from `source` samples to `target`
/// samples, stored as a sparse weight matrix with at most two non-zeros per
/// output row.
///
/// For `target > 1`, output `j` samples position `j * (source - 1) / (target - 1)`.
/// For `target == 1` the single output samples the midpoint `(source - 1) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResamplePlan {
    source: usize,
    target: usize,
    taps: Vec<(usize, usize, f64, f64)>,
}

impl ResamplePlan {
    pub fn new(source: usize, target: usize) -> Self {
        assert!(
            source >= 1 && target >= 1,
            "resample lengths must be positive"
        );
        let taps = (0..target)
            .map(|j| {
                if source == 1 {
                    return (0, 0, 1.0, 0.0);
                }
                let pos = if target == 1 {
                    (source - 1) as f64 / 2.0
                } else if source == target {
                    j as f64
                } else {
                    j as f64 * (source - 1) as f64 / (target - 1) as f64
                };
                let lo = (pos.floor() as usize).min(source - 1);
                let frac = pos - lo as f64;
                if lo + 1 >= source || frac == 0.0 {
                    (lo, lo, 1.0, 0.0)
                } else {
                    (lo, lo + 1, 1.0 - frac, frac)
                }
            })
            .collect();
        ResamplePlan {
            source,
            target,
            taps,
        }
    }

    /// Shared plan for a `(source, target)` pair from a process-wide cache.
    pub fn cached(source: usize, target: usize) -> Arc<ResamplePlan> {
        type PlanCache = RwLock<HashMap<(usize, usize), Arc<ResamplePlan>>>;
        static CACHE: OnceLock<PlanCache> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        if let Some(plan) = cache.read().unwrap().get(&(source, target)) {
            return Arc::clone(plan);
        }
        let plan = Arc::new(ResamplePlan::new(source, target));
        Arc::clone(
            cache
                .write()
                .unwrap()
                .entry((source, target))
                .or_insert(plan),
        )
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// Resamples every contiguous `source`-length row of `input`.
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let rows = input.len() / self.source;
        let mut out = Vec::with_capacity(rows * self.target);
        for row in input.chunks_exact(self.source) {
            out.extend(
                self.taps
                    .iter()
                    .map(|&(i0, i1, w0, w1)| w0 * row[i0] + w1 * row[i1]),
            );
        }
        out
    }

    /// Transpose of [`apply`](Self::apply): scatters `target`-length rows back
    /// onto `source`-length rows with the same weights.
    pub fn apply_adjoint(&self, upstream: &[f64]) -> Vec<f64> {
        let rows = upstream.len() / self.target;
        let mut out = vec![0.0; rows * self.source];
        for (row_out, row_in) in out
            .chunks_exact_mut(self.source)
            .zip(upstream.chunks_exact(self.target))
        {
            for (&(i0, i1, w0, w1), &g) in self.taps.iter().zip(row_in) {
                row_out[i0] += w0 * g;
                row_out[i1] += w1 * g;
            }
        }
        out
    }
}
