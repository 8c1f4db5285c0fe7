//! Central finite-difference verification of reverse-mode gradients.

use super::{backward, logprob, Precision, PolicySnapshot, TokenBatch};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Floor applied to relative-error denominators.
    pub floor: f64,
}

impl GradCheckOptions {
    /// Step 1e-5 for 64-bit math, 1e-2 for 32-bit.
    pub fn for_precision(p: Precision) -> Self {
        match p {
            Precision::F64 => Self { h: 1e-5, floor: 1e-8 },
            Precision::F32 => Self { h: 1e-2, floor: 1e-8 },
        }
    }
}

/// Max over `coords` of `|g - fd| / max(|g|, |fd|, floor)` where `fd` is the
/// central difference of `f` at `theta`.
pub fn max_relative_error(
    f: impl Fn(&[f64]) -> f64,
    theta: &[f64],
    grad: &[f64],
    coords: &[usize],
    opts: GradCheckOptions,
) -> f64 {
    let mut work = theta.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = work[i];
        work[i] = orig + opts.h;
        let up = f(&work);
        work[i] = orig - opts.h;
        let down = f(&work);
        work[i] = orig;
        let fd = (up - down) / (2.0 * opts.h);
        let denom = grad[i].abs().max(fd.abs()).max(opts.floor);
        worst = worst.max((grad[i] - fd).abs() / denom);
    }
    worst
}

/// Checks [`backward`] for the objective `sum loss_weight * logprob`.
pub fn finite_diff_check(
    snap: &PolicySnapshot,
    batch: &TokenBatch,
    coords: &[usize],
) -> crate::Result<f64> {
    let scalars: Vec<f64> = batch
        .loss_weight
        .iter()
        .zip(&batch.mask)
        .map(|(&w, &m)| if m == 1 { w } else { 0.0 })
        .collect();
    let grad = backward(snap, batch, &scalars)?;
    finite_diff_check_grad(snap, batch, &scalars, &grad, coords)
}

/// Like [`finite_diff_check`] but compares a caller-supplied gradient (used to
/// demonstrate that a corrupted gradient is caught).
pub fn finite_diff_check_grad(
    snap: &PolicySnapshot,
    batch: &TokenBatch,
    scalars: &[f64],
    grad: &[f64],
    coords: &[usize],
) -> crate::Result<f64> {
    if let Some(&bad) = coords.iter().find(|&&c| c >= snap.num_params()) {
        return crate::error::input(format!("coordinate {bad} out of range"));
    }
    let f = |theta: &[f64]| {
        let s = snap.with_params(theta.to_vec(), snap.step);
        let lp = logprob(&s, batch).expect("validated batch");
        lp.values.iter().zip(scalars).map(|(l, w)| l * w).sum::<f64>()
    };
    Ok(max_relative_error(
        f,
        &snap.params,
        grad,
        coords,
        GradCheckOptions::for_precision(snap.arch.precision),
    ))
}
