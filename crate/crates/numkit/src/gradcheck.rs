//! Central finite differences, used as the independent oracle for every
//! reverse-mode gradient in the workspace.

use std::collections::BTreeMap;

use crate::array::RealArray;
use crate::error::{NumError, Result};
use crate::params::{GradientRecord, ParamSet};

/// Denominator floor for [`relative_error`]. Below this magnitude the
/// comparison degrades to an absolute one.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central-difference estimate of d loss / d p for every coordinate of every
/// parameter. `loss_fn` must be deterministic.
pub fn finite_diff_gradient<F>(loss_fn: F, params: &ParamSet, h: f64) -> Result<GradientRecord>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(NumError::Invalid(format!(
            "step size must be positive, got {h}"
        )));
    }
    let base = checked(loss_fn(params)?)?;
    let mut work = params.clone();
    let mut grads = BTreeMap::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.require(&name)?.len();
        let mut g = vec![0.0; n];
        for i in 0..n {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = checked(loss_fn(&work)?)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = checked(loss_fn(&work)?)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        let shape = params.require(&name)?.shape().to_vec();
        grads.insert(name, RealArray::new(shape, g)?);
    }
    Ok(GradientRecord::from_map(base, grads))
}

fn checked(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NumError::NonFinite {
            op: "finite_diff loss",
        })
    }
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest coordinate-wise relative error between two gradient records.
/// Names present in only one record compare against zero.
pub fn max_relative_error(a: &GradientRecord, b: &GradientRecord) -> f64 {
    let mut worst = 0.0f64;
    let names: std::collections::BTreeSet<&String> = a
        .iter()
        .map(|(k, _)| k)
        .chain(b.iter().map(|(k, _)| k))
        .collect();
    for name in names {
        match (a.get(name), b.get(name)) {
            (Some(x), Some(y)) => {
                for (p, q) in x.data().iter().zip(y.data()) {
                    worst = worst.max(relative_error(*p, *q));
                }
            }
            (Some(x), None) | (None, Some(x)) => {
                for p in x.data() {
                    worst = worst.max(relative_error(*p, 0.0));
                }
            }
            (None, None) => unreachable!(),
        }
    }
    worst
}
