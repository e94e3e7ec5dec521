use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{mse_loss, relative_error};
use crate::error::{Error, Result};
use crate::model::MultiResFormer;
use crate::spectral::PeriodicitySet;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Above this many coordinates a seeded random subset is checked.
    pub max_coords: usize,
    pub seed: u64,
    /// Restrict the check to these parameter names.
    pub only: Option<Vec<String>>,
    /// Corrupt one adjoint on purpose (negative control).
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 10_000,
            seed: 0,
            only: None,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Offender {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub coords_total: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// Every coordinate above tolerance.
    pub offenders: Vec<Offender>,
}

fn loss_at(
    model: &MultiResFormer,
    x: &Tensor,
    y: &Tensor,
    frozen: &[PeriodicitySet],
) -> Result<f64> {
    let mut g = Graph::eval();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let out = model.forward_with(&mut g, xv, Some(frozen))?;
    let loss = mse_loss(&mut g, out.prediction, yv)?;
    Ok(g.value(loss).item())
}

/// Compares reverse-mode gradients of the eval-mode MSE on `(x, y)` with
/// central finite differences. The periodicities detected on the unperturbed
/// input are held fixed while perturbing, matching their treatment as
/// constants in the backward pass.
pub fn gradient_check(
    model: &MultiResFormer,
    x: &Tensor,
    y: &Tensor,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut g = if opts.inject_fault {
        Graph::eval().with_adjoint_fault()
    } else {
        Graph::eval()
    };
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let out = model.forward(&mut g, xv)?;
    let frozen = out.periodicities;
    let loss = mse_loss(&mut g, out.prediction, yv)?;
    g.backward(loss)?;
    let mut store = model.params.store.clone();
    store.zero_grad();
    store.accumulate_grads(&g);

    let mut coords = Vec::new();
    for (id, p) in store.iter() {
        if opts
            .only
            .as_ref()
            .is_some_and(|names| !names.iter().any(|n| n == p.name()))
        {
            continue;
        }
        coords.extend((0..p.tensor().numel()).map(|i| (id, i)));
    }
    if coords.is_empty() {
        return Err(Error::contract("no parameter coordinates selected"));
    }
    let total = coords.len();
    if total > opts.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked = sample(&mut rng, total, opts.max_coords).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let mut probe = model.clone();
    let mut sum = 0.0;
    let mut worst = (f64::NEG_INFINITY, String::new(), 0);
    let mut offenders = Vec::new();
    for &(id, i) in &coords {
        let original = probe.params.store.get(id).tensor().data()[i];
        let set = |m: &mut MultiResFormer, v: f64| {
            m.params.store.get_mut(id).tensor_mut().data_mut()[i] = v
        };
        set(&mut probe, original + opts.step);
        let up = loss_at(&probe, x, y, &frozen)?;
        set(&mut probe, original - opts.step);
        let down = loss_at(&probe, x, y, &frozen)?;
        set(&mut probe, original);
        let numeric = (up - down) / (2.0 * opts.step);
        let param = store.get(id);
        let analytic = param.tensor().grad().map_or(0.0, |g| g[i]);
        let err = relative_error(analytic, numeric);
        sum += err;
        if err > worst.0 {
            worst = (err, param.name().to_string(), i);
        }
        if !(err <= opts.tolerance) {
            offenders.push(Offender {
                param: param.name().to_string(),
                index: i,
                analytic,
                numeric,
                rel_error: err,
            });
        }
    }
    Ok(GradCheckReport {
        coords_checked: coords.len(),
        coords_total: total,
        max_rel_error: worst.0,
        mean_rel_error: sum / coords.len() as f64,
        worst_param: worst.1,
        worst_index: worst.2,
        tolerance: opts.tolerance,
        passed: offenders.is_empty(),
        offenders,
    })
}
