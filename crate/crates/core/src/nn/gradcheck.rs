//! Central finite-difference checks for hand-written backward passes.

use super::tensor::{Parameterized, Tensor};

/// Gradients whose norms both fall below this (times `max(1, |f|)` in
/// [`check_params`]) are treated as zero; some parameters, such as key
/// biases under softmax, have an exactly vanishing gradient and the
/// finite difference only sees roundoff.
pub const ZERO_FLOOR: f64 = 1e-5;

/// `‖a − n‖ / max(‖a‖, ‖n‖, ZERO_FLOOR)`.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    relative_error_floor(a, n, ZERO_FLOOR)
}

pub fn relative_error_floor(a: &[f64], n: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}

/// Numeric gradient of `f` at `x`.
pub fn numeric_input_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + h;
            let fp = f(&x);
            x[i] = x0 - h;
            let fm = f(&x);
            x[i] = x0;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn nudge<M: Parameterized<f64>>(m: &mut M, tensor: usize, index: usize, delta: f64) {
    let mut k = 0;
    m.visit_mut("", &mut |_, t: &mut Tensor<f64>| {
        if k == tensor {
            t.data_mut()[index] += delta;
        }
        k += 1;
    });
}

/// Per-tensor `(name, relative error)` between the gradients accumulated
/// in `m` and central differences of `f`. `stride` subsamples entries
/// (1 checks every entry).
pub fn check_params<M: Parameterized<f64> + Clone>(
    m: &M,
    h: f64,
    stride: usize,
    f: impl Fn(&M) -> f64,
) -> Vec<(String, f64)> {
    let mut tensors: Vec<(String, usize, Vec<f64>)> = Vec::new();
    m.visit("", &mut |name, t| {
        let g = t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        tensors.push((name.to_string(), t.len(), g));
    });
    let floor = ZERO_FLOOR * f(m).abs().max(1.0);
    let mut probe = m.clone();
    tensors
        .into_iter()
        .enumerate()
        .map(|(ti, (name, len, grad))| {
            let idx: Vec<usize> = (0..len).step_by(stride.max(1)).collect();
            let numeric: Vec<f64> = idx
                .iter()
                .map(|&i| {
                    nudge(&mut probe, ti, i, h);
                    let fp = f(&probe);
                    nudge(&mut probe, ti, i, -2.0 * h);
                    let fm = f(&probe);
                    nudge(&mut probe, ti, i, h);
                    (fp - fm) / (2.0 * h)
                })
                .collect();
            let analytic: Vec<f64> = idx.iter().map(|&i| grad[i]).collect();
            (name, relative_error_floor(&analytic, &numeric, floor))
        })
        .collect()
}
