//! First-order (piecewise-linear) monotone spline as tape operations with
//! hand-derived backward rules.
//!
//! The spline maps `[-R, R]` onto itself through `K` bins whose widths and
//! heights come from a softmax over raw parameters, so monotonicity holds
//! for every parameter setting. Outside the range the map is the identity.

use crate::numerics::Tensor;

/// Softmax floor keeping every bin non-degenerate.
pub(crate) const MIN_BIN: f64 = 1e-3;

/// Normalised bin sizes and cumulative knots for one raw parameter vector.
pub(crate) fn knots(raw: &[f64], half_range: f64) -> (Vec<f64>, Vec<f64>) {
    let k = raw.len();
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|r| (r - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let total = 2.0 * half_range;
    let sizes: Vec<f64> = exps
        .iter()
        .map(|e| total * (MIN_BIN + (1.0 - k as f64 * MIN_BIN) * e / z))
        .collect();
    let mut cum = Vec::with_capacity(k + 1);
    cum.push(-half_range);
    let mut acc = -half_range;
    for s in &sizes {
        acc += s;
        cum.push(acc);
    }
    (sizes, cum)
}

fn softmax(raw: &[f64]) -> Vec<f64> {
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|r| (r - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Chain dL/d(sizes) through the softmax parametrisation to dL/d(raw).
fn chain_softmax(d_sizes: &[f64], raw: &[f64], half_range: f64) -> Vec<f64> {
    let k = raw.len() as f64;
    let s = softmax(raw);
    let factor = 2.0 * half_range * (1.0 - k * MIN_BIN);
    let dot: f64 = d_sizes.iter().zip(&s).map(|(d, si)| d * si).sum();
    s.iter()
        .zip(d_sizes)
        .map(|(si, di)| factor * si * (di - dot))
        .collect()
}

fn find_bin(cum: &[f64], v: f64) -> usize {
    let k = cum.len() - 1;
    cum[1..k].partition_point(|&edge| edge <= v).min(k - 1)
}

/// Evaluate the spline (or its inverse) elementwise.
///
/// In the forward direction the input is partitioned by the width knots and
/// mapped onto the height knots; the inverse swaps the two roles.
pub(crate) fn apply(
    input: &Tensor,
    widths_raw: &Tensor,
    heights_raw: &Tensor,
    half_range: f64,
    inverse: bool,
) -> Tensor {
    let wr = widths_raw.data();
    let hr = heights_raw.data();
    let (w, xk) = knots(&wr, half_range);
    let (h, yk) = knots(&hr, half_range);
    // dom_* partitions the input axis, co_* parametrises the output axis.
    let (dom_sizes, dom_knots, co_sizes, co_knots) = if inverse {
        (h.clone(), yk.clone(), w.clone(), xk.clone())
    } else {
        (w.clone(), xk.clone(), h.clone(), yk.clone())
    };
    let data = input.data();
    let mut out = Vec::with_capacity(data.len());
    for &e in &data {
        if e <= -half_range || e >= half_range {
            out.push(e);
        } else {
            let b = find_bin(&dom_knots, e);
            out.push(co_knots[b] + (e - dom_knots[b]) * co_sizes[b] / dom_sizes[b]);
        }
    }
    let shape = input.shape();
    Tensor::from_op(
        shape,
        out,
        vec![input.clone(), widths_raw.clone(), heights_raw.clone()],
        Box::new(move |_, grad, parents| {
            let data = parents[0].data();
            let mut d_input = vec![0.0; data.len()];
            let mut d_dom = vec![0.0; dom_sizes.len()];
            let mut d_co = vec![0.0; co_sizes.len()];
            for (i, &e) in data.iter().enumerate() {
                let g = grad[i];
                if e <= -half_range || e >= half_range {
                    d_input[i] += g;
                    continue;
                }
                let b = find_bin(&dom_knots, e);
                let slope = co_sizes[b] / dom_sizes[b];
                let theta = (e - dom_knots[b]) / dom_sizes[b];
                d_input[i] += g * slope;
                // out = co_knots[b] + theta * co_sizes[b]
                for j in 0..b {
                    d_co[j] += g;
                    d_dom[j] += -g * slope;
                }
                d_co[b] += g * theta;
                d_dom[b] += -g * theta * slope;
            }
            let wr = parents[1].data();
            let hr = parents[2].data();
            let (d_w, d_h) = if inverse { (d_co, d_dom) } else { (d_dom, d_co) };
            parents[0].accumulate_from(&d_input);
            parents[1].accumulate_from(&chain_softmax(&d_w, &wr, half_range));
            parents[2].accumulate_from(&chain_softmax(&d_h, &hr, half_range));
        }),
    )
}

/// Elementwise log|slope| at the input's bin: `log(h_b/w_b)` in the forward
/// direction, `log(w_b/h_b)` for the inverse, zero outside the range.
pub(crate) fn log_det(
    input: &Tensor,
    widths_raw: &Tensor,
    heights_raw: &Tensor,
    half_range: f64,
    inverse: bool,
) -> Tensor {
    let wr = widths_raw.data();
    let hr = heights_raw.data();
    let (w, xk) = knots(&wr, half_range);
    let (h, yk) = knots(&hr, half_range);
    let (dom_sizes, dom_knots, co_sizes) = if inverse {
        (h.clone(), yk, w.clone())
    } else {
        (w.clone(), xk, h.clone())
    };
    let data = input.data();
    let mut out = Vec::with_capacity(data.len());
    for &e in &data {
        if e <= -half_range || e >= half_range {
            out.push(0.0);
        } else {
            let b = find_bin(&dom_knots, e);
            out.push(co_sizes[b].ln() - dom_sizes[b].ln());
        }
    }
    let shape = input.shape();
    Tensor::from_op(
        shape,
        out,
        vec![input.clone(), widths_raw.clone(), heights_raw.clone()],
        Box::new(move |_, grad, parents| {
            let data = parents[0].data();
            let mut d_dom = vec![0.0; dom_sizes.len()];
            let mut d_co = vec![0.0; co_sizes.len()];
            for (i, &e) in data.iter().enumerate() {
                if e <= -half_range || e >= half_range {
                    continue;
                }
                let b = find_bin(&dom_knots, e);
                d_co[b] += grad[i] / co_sizes[b];
                d_dom[b] += -grad[i] / dom_sizes[b];
            }
            let wr = parents[1].data();
            let hr = parents[2].data();
            let (d_w, d_h) = if inverse { (d_co, d_dom) } else { (d_dom, d_co) };
            // the slope is locally constant in the input, so no d_input term
            parents[1].accumulate_from(&chain_softmax(&d_w, &wr, half_range));
            parents[2].accumulate_from(&chain_softmax(&d_h, &hr, half_range));
        }),
    )
}
