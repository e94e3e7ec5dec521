//! Forecast error metrics, naive reference forecasts and linear CKA.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_shapes(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(op, pred.shape(), target.shape()));
    }
    Ok(())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_shapes("mse", pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok(sum / pred.numel() as f64)
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_shapes("mae", pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Mean of `200·|y − ŷ| / (|y| + |ŷ|)`, with `0/0` terms counted as 0.
pub fn smape(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_shapes("smape", pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let denom = p.abs() + t.abs();
            if denom == 0.0 {
                0.0
            } else {
                200.0 * (t - p).abs() / denom
            }
        })
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// MAE scaled by the in-sample seasonal-naive MAE at season `m`.
pub fn mase(pred: &Tensor, target: &Tensor, insample: &[f64], m: usize) -> Result<f64> {
    if m == 0 || insample.len() <= m {
        return Err(Error::contract(format!(
            "in-sample length {} must exceed season {m} ≥ 1",
            insample.len()
        )));
    }
    let denom = insample
        .windows(m + 1)
        .map(|w| (w[m] - w[0]).abs())
        .sum::<f64>()
        / (insample.len() - m) as f64;
    if denom == 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "in-sample series is constant at season {m}"
        )));
    }
    Ok(mae(pred, target)? / denom)
}

/// `0.5·(smape / smape_ref + mase / mase_ref)`.
pub fn owa(smape: f64, mase: f64, smape_ref: f64, mase_ref: f64) -> Result<f64> {
    if !(smape_ref > 0.0 && mase_ref > 0.0) {
        return Err(Error::contract(format!(
            "reference values must be positive, got {smape_ref} and {mase_ref}"
        )));
    }
    Ok(0.5 * (smape / smape_ref + mase / mase_ref))
}

fn centered_columns(m: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let &[n, p] = m.shape() else {
        return Err(Error::contract(format!(
            "expected an n × p matrix, got {:?}",
            m.shape()
        )));
    };
    let mut data = m.data().to_vec();
    for c in 0..p {
        let mean = (0..n).map(|r| data[r * p + c]).sum::<f64>() / n as f64;
        (0..n).for_each(|r| data[r * p + c] -= mean);
    }
    Ok((n, p, data))
}

/// `‖XᵀY‖²_F` for row-major `X: n×p` and `Y: n×q`.
fn cross_frobenius_sq(n: usize, x: &[f64], p: usize, y: &[f64], q: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..q {
            let dot: f64 = (0..n).map(|r| x[r * p + i] * y[r * q + j]).sum();
            total += dot * dot;
        }
    }
    total
}

/// Linear centered kernel alignment between `a: [n, p]` and `b: [n, q]`.
pub fn linear_cka(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, p, x) = centered_columns(a)?;
    let (nb, q, y) = centered_columns(b)?;
    if n != nb {
        return Err(Error::shape("linear_cka", a.shape(), b.shape()));
    }
    if n < 2 {
        return Err(Error::contract("linear_cka needs at least two rows"));
    }
    let xx = cross_frobenius_sq(n, &x, p, &x, p).sqrt();
    let yy = cross_frobenius_sq(n, &y, q, &y, q).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::UndefinedMetric(
            "a representation has zero variance".into(),
        ));
    }
    Ok(cross_frobenius_sq(n, &x, p, &y, q) / (xx * yy))
}

/// MSE at each horizon step of `[B, O, V]` forecasts.
pub fn per_horizon_mse(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    check_shapes("per_horizon_mse", pred, target)?;
    let &[batch, horizon, variates] = pred.shape() else {
        return Err(Error::contract(format!(
            "expected [B, O, V], got {:?}",
            pred.shape()
        )));
    };
    let mut out = vec![0.0; horizon];
    for b in 0..batch {
        for (o, slot) in out.iter_mut().enumerate() {
            for v in 0..variates {
                let i = (b * horizon + o) * variates + v;
                *slot += (pred.data()[i] - target.data()[i]).powi(2);
            }
        }
    }
    let count = (batch * variates) as f64;
    out.iter_mut().for_each(|x| *x /= count);
    Ok(out)
}

/// Writes `step,mse` rows, steps numbered from 1.
pub fn write_per_horizon_csv(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "mse"])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([(i + 1).to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Repeats the last look-back value: `[B, I, V] -> [B, O, V]`.
pub fn naive_forecast(x: &Tensor, horizon: usize) -> Result<Tensor> {
    seasonal_naive_forecast(x, horizon, 1)
}

/// `ŷ[o] = x[I − m + (o mod m)]`: the last observed season, repeated.
pub fn seasonal_naive_forecast(x: &Tensor, horizon: usize, m: usize) -> Result<Tensor> {
    let &[batch, len, variates] = x.shape() else {
        return Err(Error::contract(format!(
            "expected [B, I, V], got {:?}",
            x.shape()
        )));
    };
    if m == 0 || m > len || horizon == 0 {
        return Err(Error::contract(format!(
            "season {m} and horizon {horizon} must be positive with season ≤ {len}"
        )));
    }
    let mut out = Vec::with_capacity(batch * horizon * variates);
    for b in 0..batch {
        for o in 0..horizon {
            let t = len - m + o % m;
            out.extend_from_slice(
                &x.data()[(b * len + t) * variates..(b * len + t + 1) * variates],
            );
        }
    }
    Tensor::new([batch, horizon, variates], out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smape: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mase: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub owa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_horizon: Option<Vec<f64>>,
}

impl MetricReport {
    pub fn long_term(pred: &Tensor, target: &Tensor) -> Result<Self> {
        Ok(MetricReport {
            mse: mse(pred, target)?,
            mae: mae(pred, target)?,
            ..MetricReport::default()
        })
    }

    pub fn with_per_horizon(mut self, pred: &Tensor, target: &Tensor) -> Result<Self> {
        self.per_horizon = Some(per_horizon_mse(pred, target)?);
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
