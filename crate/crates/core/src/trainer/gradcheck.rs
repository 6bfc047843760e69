//! Central-difference verification of the analytic gradients.

use rand::seq::index::sample;
use serde::Serialize;

use crate::losses::LossWeights;
use crate::model::{ModelState, ParamGroup};
use crate::par::Execution;
use crate::rng;

use super::{batch_gradients, PreparedSample, TrainError};

/// Agreement between analytic and numeric gradients on one group.
#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub coords: usize,
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude among the sampled coordinates.
    pub max_abs_grad: f64,
    /// Analytic and numeric values at the worst coordinate.
    pub worst: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub groups: Vec<GroupCheck>,
    /// Gradient slots that exist for the target encoder. The target is
    /// bound only as constants, so this is zero by construction.
    pub target_gradient_slots: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

/// Gradients below this magnitude on both sides count as zero. Central
/// differences of an f64 loss of order one carry noise around 1e-13, and
/// some coordinates (key biases, for one) have an exactly zero gradient that
/// the analytic path reproduces only up to rounding.
pub const ZERO_GRAD: f64 = 1e-10;

/// Relative error, with two effectively zero values counted as agreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ZERO_GRAD {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compare the gradient of the composite loss over `batch` with central
/// differences at `coords` random coordinates of every parameter group.
pub fn grad_check(
    model: &ModelState<f64>,
    batch: &[PreparedSample],
    weights: &LossWeights,
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    let exec = Execution::Sequential;
    let analytic = batch_gradients(model, batch, weights, false, exec)?;
    let mut work = model.clone();
    let mut groups = Vec::new();
    for (gi, group) in ParamGroup::ALL.into_iter().enumerate() {
        let range = model.layout.range(group);
        let sizes: Vec<usize> = range.clone().map(|i| model.params[i].len()).collect();
        let n: usize = sizes.iter().sum();
        let picks = sample(&mut rng::stream(seed, "gradcheck", &[gi as u64]), n, coords.min(n)).into_vec();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut worst = (0.0, 0.0);
        for flat in picks {
            let (mut t, mut off) = (0, flat);
            while off >= sizes[t] {
                off -= sizes[t];
                t += 1;
            }
            let p = range.start + t;
            let a = analytic.grads.get(p).map_or(0.0, |g| g.as_slice()[off]);
            let orig = work.params[p].as_slice()[off];
            work.params[p].as_mut_slice()[off] = orig + epsilon;
            let up = batch_gradients(&work, batch, weights, false, exec)?.losses.total;
            work.params[p].as_mut_slice()[off] = orig - epsilon;
            let down = batch_gradients(&work, batch, weights, false, exec)?.losses.total;
            work.params[p].as_mut_slice()[off] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let rel = relative_error(a, numeric);
            if rel > max_rel {
                max_rel = rel;
                worst = (a, numeric);
            }
            max_abs = max_abs.max(a.abs());
        }
        groups.push(GroupCheck {
            group,
            coords: coords.min(n),
            max_rel_err: max_rel,
            max_abs_grad: max_abs,
            worst,
        });
    }
    Ok(GradCheckReport {
        epsilon,
        groups,
        target_gradient_slots: analytic.grads.len().saturating_sub(model.params.len()),
    })
}
