//! Bijection library for invertible mechanisms.
//!
//! Every transform provides a differentiable forward map, an exact inverse,
//! and the log-absolute-determinant of its Jacobian in both directions, so
//! densities can be evaluated by inverting observed data and gradients reach
//! the parameters through the inverse path.

mod spline;

use crate::distributions::Prng;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Context network predicting transform parameters from conditioning inputs.
///
/// A dense stack of linear layers with leaky-relu between them; a network
/// without hidden layers is a plain linear map.
#[derive(Debug, Clone)]
pub struct ContextNetwork {
    pub layers: Vec<Linear>,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ContextNetwork {
    /// Random initialisation for layer sizes `in -> hidden... -> out`.
    pub fn new(dims: &[usize], leaky_slope: f64, rng: &mut Prng, name: &str) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Context(format!(
                "context network {name} needs at least input and output sizes"
            )));
        }
        let mut layers = Vec::new();
        for (l, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.standard_normal() * scale)
                .collect();
            layers.push(Linear {
                weight: Tensor::param(&[fan_in, fan_out], w, &format!("{name}.w{l}"))?,
                bias: Tensor::param(&[fan_out], vec![0.0; fan_out], &format!("{name}.b{l}"))?,
            });
        }
        Ok(ContextNetwork { layers, leaky_slope })
    }

    /// Single linear layer with explicit weights (row-major `[in, out]`).
    pub fn from_weights(weight: Vec<Vec<f64>>, bias: Vec<f64>, name: &str) -> Result<Self> {
        let fan_in = weight.len();
        let fan_out = bias.len();
        let flat: Vec<f64> = weight.into_iter().flatten().collect();
        if flat.len() != fan_in * fan_out {
            return Err(Error::Context(format!("{name}: ragged weight matrix")));
        }
        Ok(ContextNetwork {
            layers: vec![Linear {
                weight: Tensor::param(&[fan_in, fan_out], flat, &format!("{name}.w0"))?,
                bias: Tensor::param(&[fan_out], bias, &format!("{name}.b0"))?,
            }],
            leaky_slope: 0.1,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().bias.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?.add(&layer.bias)?;
            if l < last {
                h = h.leaky_relu(self.leaky_slope);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }
}

/// Whether a fixed normalisation rescales a doubly bounded variable or
/// whitens a singly bounded one in log-space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundsKind {
    Doubly,
    Singly,
}

/// Fixed affine `x = scale * y + shift` fitted from data statistics.
#[derive(Debug, Clone)]
pub struct AffineNorm {
    pub scale: f64,
    pub shift: f64,
    pub bounds: BoundsKind,
}

/// Fit a normalisation transform from data, per bounds kind:
/// doubly bounded uses bias `min(Y)` and scale `max(Y) - min(Y)` (applied
/// after a sigmoid); singly bounded whitens in log-space (applied before an
/// exp).
pub fn affine_normalisation_fit(data: &[f64], bounds: BoundsKind) -> Result<AffineNorm> {
    affine_normalisation_fit_padded(data, bounds, 0.0)
}

/// Same fit with the doubly-bounded range expanded by `pad` (fraction of the
/// observed range on each side) so held-out data a hair outside the observed
/// extremes still inverts.
pub fn affine_normalisation_fit_padded(
    data: &[f64],
    bounds: BoundsKind,
    pad: f64,
) -> Result<AffineNorm> {
    if data.is_empty() {
        return Err(Error::Transform {
            op: "affine-normalisation-fit",
            message: "empty data".into(),
        });
    }
    match bounds {
        BoundsKind::Doubly => {
            let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max <= min {
                return Err(Error::Transform {
                    op: "affine-normalisation-fit",
                    message: format!("degenerate data: max ({max}) <= min ({min})"),
                });
            }
            let range = max - min;
            Ok(AffineNorm {
                scale: range * (1.0 + 2.0 * pad),
                shift: min - pad * range,
                bounds,
            })
        }
        BoundsKind::Singly => {
            if data.iter().any(|&v| v <= 0.0) {
                return Err(Error::Transform {
                    op: "affine-normalisation-fit",
                    message: "singly bounded fit requires positive data".into(),
                });
            }
            let logs: Vec<f64> = data.iter().map(|v| v.ln()).collect();
            let mean = logs.iter().sum::<f64>() / logs.len() as f64;
            let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>()
                / logs.len() as f64;
            let sd = var.sqrt();
            if sd == 0.0 {
                return Err(Error::Transform {
                    op: "affine-normalisation-fit",
                    message: "degenerate data: zero spread in log-space".into(),
                });
            }
            Ok(AffineNorm {
                scale: sd,
                shift: mean,
                bounds,
            })
        }
    }
}

/// Learnable elementwise affine with positively parametrised scale.
#[derive(Debug, Clone)]
pub struct ElementAffine {
    pub raw_scale: Tensor,
    pub shift: Tensor,
}

impl ElementAffine {
    pub fn new(dim: usize, name: &str) -> Result<Self> {
        Ok(ElementAffine {
            raw_scale: Tensor::param(&[dim], vec![0.0; dim], &format!("{name}.raw_scale"))?,
            shift: Tensor::param(&[dim], vec![0.0; dim], &format!("{name}.shift"))?,
        })
    }
}

/// Affine whose raw-scale and shift are predicted by a context network.
#[derive(Debug, Clone)]
pub struct ConditionalAffine {
    pub net: ContextNetwork,
    pub dim: usize,
}

impl ConditionalAffine {
    pub fn new(net: ContextNetwork, dim: usize) -> Result<Self> {
        if net.output_dim() != 2 * dim {
            return Err(Error::Context(format!(
                "conditional affine over {dim} dims needs a context network with {} outputs, got {}",
                2 * dim,
                net.output_dim()
            )));
        }
        Ok(ConditionalAffine { net, dim })
    }

    fn scale_shift(&self, ctx: &Tensor) -> Result<(Tensor, Tensor)> {
        let p = self.net.forward(ctx)?;
        let raw = p.narrow_last(0, self.dim)?;
        let shift = p.narrow_last(self.dim, self.dim)?;
        Ok((raw, shift))
    }
}

/// Monotone piecewise-linear spline on `[-half_range, half_range]` with
/// identity tails.
#[derive(Debug, Clone)]
pub struct LinearSpline {
    pub bins: usize,
    pub half_range: f64,
    pub widths_raw: Tensor,
    pub heights_raw: Tensor,
}

impl LinearSpline {
    /// Identity initialisation: uniform knots.
    pub fn new(bins: usize, half_range: f64, name: &str) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Transform {
                op: "spline",
                message: "need at least 2 bins".into(),
            });
        }
        Ok(LinearSpline {
            bins,
            half_range,
            widths_raw: Tensor::param(&[bins], vec![0.0; bins], &format!("{name}.widths"))?,
            heights_raw: Tensor::param(&[bins], vec![0.0; bins], &format!("{name}.heights"))?,
        })
    }
}

/// A conditional bijection with forward, inverse, and log-det-Jacobian.
#[derive(Debug, Clone)]
pub enum Transform {
    Affine(ElementAffine),
    ConditionalAffine(ConditionalAffine),
    Exp,
    Sigmoid,
    AffineNorm(AffineNorm),
    Spline(LinearSpline),
    /// Members listed in application order: the first acts on the noise.
    Composition(Vec<Transform>),
}

impl Transform {
    pub fn is_conditional(&self) -> bool {
        match self {
            Transform::ConditionalAffine(_) => true,
            Transform::Composition(parts) => parts.iter().any(|t| t.is_conditional()),
            _ => false,
        }
    }

    /// Context width expected by conditional members, if any.
    pub fn context_dim(&self) -> Option<usize> {
        match self {
            Transform::ConditionalAffine(c) => Some(c.net.input_dim()),
            Transform::Composition(parts) => parts.iter().find_map(|t| t.context_dim()),
            _ => None,
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        match self {
            Transform::Affine(a) => vec![a.raw_scale.clone(), a.shift.clone()],
            Transform::ConditionalAffine(c) => c.net.params(),
            Transform::Spline(s) => vec![s.widths_raw.clone(), s.heights_raw.clone()],
            Transform::Composition(parts) => parts.iter().flat_map(|t| t.params()).collect(),
            _ => Vec::new(),
        }
    }

    fn check_context(&self, ctx: Option<&Tensor>) -> Result<()> {
        match (self.is_conditional(), ctx) {
            (true, None) => Err(Error::Context(
                "missing context for conditional transform".into(),
            )),
            (false, Some(_)) => Err(Error::Context(
                "superfluous context for unconditional transform".into(),
            )),
            _ => Ok(()),
        }
    }

    /// x = f(eps; context), differentiable in parameters and eps.
    pub fn forward(&self, eps: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        self.check_context(ctx)?;
        Ok(self.forward_ld(eps, ctx, false)?.0)
    }

    /// Forward map together with the elementwise log|df/deps|.
    pub fn forward_logdet(&self, eps: &Tensor, ctx: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        self.check_context(ctx)?;
        let (x, ld) = self.forward_ld(eps, ctx, true)?;
        Ok((x, ld.expect("logdet requested")))
    }

    /// Exact inverse. Errors when x lies outside the image of the forward map.
    pub fn inverse(&self, x: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        self.check_context(ctx)?;
        Ok(self.inverse_ld(x, ctx, false)?.0)
    }

    /// Inverse together with the elementwise log|d eps/dx|.
    pub fn inverse_logdet(&self, x: &Tensor, ctx: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        self.check_context(ctx)?;
        let (eps, ld) = self.inverse_ld(x, ctx, true)?;
        Ok((eps, ld.expect("logdet requested")))
    }

    /// log|det df/deps| summed over event dimensions, shape `[batch, 1]`.
    pub fn log_abs_det_jacobian(&self, eps: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        let (_, ld) = self.forward_logdet(eps, ctx)?;
        Ok(ld.sum_last())
    }

    fn forward_ld(
        &self,
        eps: &Tensor,
        ctx: Option<&Tensor>,
        want_ld: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        match self {
            Transform::Affine(a) => {
                let x = eps.mul(&a.raw_scale.exp())?.add(&a.shift)?;
                let ld = if want_ld {
                    Some(Tensor::zeros(&eps.shape()).add(&a.raw_scale)?)
                } else {
                    None
                };
                Ok((x, ld))
            }
            Transform::ConditionalAffine(c) => {
                let ctx = ctx.ok_or_else(|| Error::Context("missing context".into()))?;
                let (raw, shift) = c.scale_shift(ctx)?;
                let x = eps.mul(&raw.exp())?.add(&shift)?;
                Ok((x, want_ld.then(|| raw.clone())))
            }
            Transform::Exp => {
                let x = eps.exp();
                Ok((x, want_ld.then(|| eps.clone())))
            }
            Transform::Sigmoid => {
                let x = eps.sigmoid();
                let ld = if want_ld {
                    Some(eps.softplus().add(&eps.neg().softplus())?.neg())
                } else {
                    None
                };
                Ok((x, ld))
            }
            Transform::AffineNorm(n) => {
                let x = eps.mul_scalar(n.scale).add_scalar(n.shift);
                let ld = want_ld.then(|| {
                    Tensor::zeros(&eps.shape()).add_scalar(n.scale.abs().ln())
                });
                Ok((x, ld))
            }
            Transform::Spline(s) => {
                let x = spline::apply(eps, &s.widths_raw, &s.heights_raw, s.half_range, false);
                let ld = want_ld.then(|| {
                    spline::log_det(eps, &s.widths_raw, &s.heights_raw, s.half_range, false)
                });
                Ok((x, ld))
            }
            Transform::Composition(parts) => {
                let mut value = eps.clone();
                let mut total_ld: Option<Tensor> = None;
                for part in parts {
                    let (next, ld) = part.forward_ld(&value, ctx, want_ld)?;
                    value = next;
                    if let Some(ld) = ld {
                        total_ld = Some(match total_ld {
                            Some(acc) => acc.add(&ld)?,
                            None => ld,
                        });
                    }
                }
                if want_ld && total_ld.is_none() {
                    total_ld = Some(Tensor::zeros(&value.shape()));
                }
                Ok((value, total_ld))
            }
        }
    }

    fn inverse_ld(
        &self,
        x: &Tensor,
        ctx: Option<&Tensor>,
        want_ld: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        match self {
            Transform::Affine(a) => {
                let inv_scale = a.raw_scale.neg().exp();
                let eps = x.sub(&a.shift)?.mul(&inv_scale)?;
                let ld = if want_ld {
                    Some(Tensor::zeros(&x.shape()).sub(&a.raw_scale)?)
                } else {
                    None
                };
                Ok((eps, ld))
            }
            Transform::ConditionalAffine(c) => {
                let ctx = ctx.ok_or_else(|| Error::Context("missing context".into()))?;
                let (raw, shift) = c.scale_shift(ctx)?;
                let eps = x.sub(&shift)?.mul(&raw.neg().exp())?;
                Ok((eps, want_ld.then(|| raw.neg())))
            }
            Transform::Exp => {
                if x.data().iter().any(|&v| v <= 0.0) {
                    return Err(Error::Transform {
                        op: "exp-inverse",
                        message: "input outside image (0, inf)".into(),
                    });
                }
                let eps = x.log()?;
                let ld = want_ld.then(|| eps.neg());
                Ok((eps, ld))
            }
            Transform::Sigmoid => {
                if x.data().iter().any(|&v| v <= 0.0 || v >= 1.0) {
                    return Err(Error::Transform {
                        op: "sigmoid-inverse",
                        message: "input outside image (0, 1); boundary maps to +/-inf".into(),
                    });
                }
                let one_minus = x.neg().add_scalar(1.0);
                let eps = x.log()?.sub(&one_minus.log()?)?;
                let ld = if want_ld {
                    Some(x.log()?.add(&one_minus.log()?)?.neg())
                } else {
                    None
                };
                Ok((eps, ld))
            }
            Transform::AffineNorm(n) => {
                let eps = x.add_scalar(-n.shift).mul_scalar(1.0 / n.scale);
                let ld = want_ld.then(|| {
                    Tensor::zeros(&x.shape()).add_scalar(-n.scale.abs().ln())
                });
                Ok((eps, ld))
            }
            Transform::Spline(s) => {
                let eps = spline::apply(x, &s.widths_raw, &s.heights_raw, s.half_range, true);
                let ld = want_ld.then(|| {
                    spline::log_det(x, &s.widths_raw, &s.heights_raw, s.half_range, true)
                });
                Ok((eps, ld))
            }
            Transform::Composition(parts) => {
                let mut value = x.clone();
                let mut total_ld: Option<Tensor> = None;
                for part in parts.iter().rev() {
                    let (next, ld) = part.inverse_ld(&value, ctx, want_ld)?;
                    value = next;
                    if let Some(ld) = ld {
                        total_ld = Some(match total_ld {
                            Some(acc) => acc.add(&ld)?,
                            None => ld,
                        });
                    }
                }
                if want_ld && total_ld.is_none() {
                    total_ld = Some(Tensor::zeros(&value.shape()));
                }
                Ok((value, total_ld))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn affine(scale: f64, shift: f64) -> Transform {
        let a = ElementAffine::new(1, "a").unwrap();
        a.raw_scale.set_data(&[scale.ln()]).unwrap();
        a.shift.set_data(&[shift]).unwrap();
        Transform::Affine(a)
    }

    #[test]
    fn affine_forward_value() {
        let t = affine(2.0, 3.0);
        let x = t.forward(&Tensor::scalar(1.0), None).unwrap();
        assert_close(x.item(), 5.0, 1e-12);
        let ld = t.log_abs_det_jacobian(&Tensor::scalar(1.0), None).unwrap();
        assert_close(ld.item(), 2.0f64.ln(), 1e-12);
    }

    /// The intensity mechanism of the reference generator: a linear context
    /// network with weights (0, 2) and biases (ln 0.5, -5) reproduces
    /// i = 191*sigmoid(0.5*eps + 2t - 5) + 64.
    #[test]
    fn conditional_affine_with_linear_context() {
        let net = ContextNetwork::from_weights(
            vec![vec![0.0, 2.0]],
            vec![0.5f64.ln(), -5.0],
            "f_i",
        )
        .unwrap();
        let flow = Transform::Composition(vec![
            Transform::ConditionalAffine(ConditionalAffine::new(net, 1).unwrap()),
            Transform::Sigmoid,
            Transform::AffineNorm(AffineNorm {
                scale: 191.0,
                shift: 64.0,
                bounds: BoundsKind::Doubly,
            }),
        ]);
        let t = Tensor::new(&[1, 1], vec![2.5]).unwrap();
        let eps = Tensor::new(&[1, 1], vec![0.0]).unwrap();
        let x = flow.forward(&eps, Some(&t)).unwrap();
        assert_close(x.item(), 159.5, 1e-9);
    }

    #[test]
    fn spline_identity_at_init() {
        let s = Transform::Spline(LinearSpline::new(8, 3.0, "s").unwrap());
        for v in [-2.9, -1.0, 0.0, 0.7, 2.99, 3.5, -4.0] {
            let x = s.forward(&Tensor::scalar(v), None).unwrap();
            assert_close(x.item(), v, 1e-12);
        }
    }

    #[test]
    fn exp_inverse_at_one() {
        let t = Transform::Exp;
        assert_close(t.inverse(&Tensor::scalar(1.0), None).unwrap().item(), 0.0, 1e-12);
        assert!(t.inverse(&Tensor::scalar(-1.0), None).is_err());
    }

    #[test]
    fn exp_logdet_at_zero() {
        let t = Transform::Exp;
        let ld = t.log_abs_det_jacobian(&Tensor::scalar(0.0), None).unwrap();
        assert_close(ld.item(), 0.0, 1e-12);
    }

    #[test]
    fn doubly_bounded_boundary_errors() {
        // inverting the doubly-bounded stack at the upper bound hits the
        // sigmoid boundary, which maps to +inf
        let stack = Transform::Composition(vec![
            Transform::Sigmoid,
            Transform::AffineNorm(AffineNorm {
                scale: 191.0,
                shift: 64.0,
                bounds: BoundsKind::Doubly,
            }),
        ]);
        let err = stack.inverse(&Tensor::scalar(255.0), None).unwrap_err();
        assert!(err.to_string().contains("boundary"), "{err}");
        assert!(stack.inverse(&Tensor::scalar(200.0), None).is_ok());
    }

    #[test]
    fn fit_doubly_examples() {
        let data: Vec<f64> = (64..=255).map(|v| v as f64).collect();
        let n = affine_normalisation_fit(&data, BoundsKind::Doubly).unwrap();
        assert_close(n.shift, 64.0, 1e-12);
        assert_close(n.scale, 191.0, 1e-12);
        // sigmoid output 0.5 maps to the midpoint
        let t = Transform::AffineNorm(n);
        let mid = t.forward(&Tensor::scalar(0.5), None).unwrap();
        assert_close(mid.item(), (64.0 + 255.0) / 2.0, 1e-12);
        assert!(affine_normalisation_fit(&[3.0, 3.0], BoundsKind::Doubly).is_err());
    }

    #[test]
    fn fit_singly_whitens_log_space() {
        let mut rng = Prng::seed_from(3);
        let data: Vec<f64> = (0..10_000)
            .map(|_| (0.4 + 0.3 * rng.standard_normal()).exp())
            .collect();
        let n = affine_normalisation_fit(&data, BoundsKind::Singly).unwrap();
        let whitened: Vec<f64> = data.iter().map(|v| (v.ln() - n.shift) / n.scale).collect();
        let mean = whitened.iter().sum::<f64>() / whitened.len() as f64;
        let sd = (whitened.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / whitened.len() as f64)
            .sqrt();
        assert_close(mean, 0.0, 1e-9);
        assert_close(sd, 1.0, 1e-9);
    }

    fn random_flow(rng: &mut Prng) -> Transform {
        let spline = LinearSpline::new(8, 3.0, "s").unwrap();
        let wr: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
        let hr: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
        spline.widths_raw.set_data(&wr).unwrap();
        spline.heights_raw.set_data(&hr).unwrap();
        let aff = ElementAffine::new(1, "a").unwrap();
        aff.raw_scale.set_data(&[0.3 * rng.standard_normal()]).unwrap();
        aff.shift.set_data(&[rng.standard_normal()]).unwrap();
        Transform::Composition(vec![
            Transform::Spline(spline),
            Transform::Affine(aff),
            Transform::Exp,
        ])
    }

    #[test]
    fn roundtrip_over_random_flows() {
        let mut rng = Prng::seed_from(17);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let flow = random_flow(&mut rng);
            let eps: Vec<f64> = (0..500).map(|_| rng.standard_normal() * 2.0).collect();
            let eps_t = Tensor::new(&[500, 1], eps.clone()).unwrap();
            let x = flow.forward(&eps_t, None).unwrap();
            let back = flow.inverse(&x, None).unwrap();
            for (a, b) in eps.iter().zip(back.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst <= 1e-5, "max roundtrip error {worst}");
    }

    #[test]
    fn conditional_roundtrip() {
        let mut rng = Prng::seed_from(23);
        let net = ContextNetwork::new(&[2, 8, 16, 2], 0.1, &mut rng, "ctx").unwrap();
        let flow = Transform::ConditionalAffine(ConditionalAffine::new(net, 1).unwrap());
        let n = 300;
        let eps: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let ctx: Vec<f64> = (0..2 * n).map(|_| rng.standard_normal()).collect();
        let eps_t = Tensor::new(&[n, 1], eps.clone()).unwrap();
        let ctx_t = Tensor::new(&[n, 2], ctx).unwrap();
        let x = flow.forward(&eps_t, Some(&ctx_t)).unwrap();
        let back = flow.inverse(&x, Some(&ctx_t)).unwrap();
        for (a, b) in eps.iter().zip(back.data()) {
            assert_close(*a, b, 1e-9);
        }
    }

    #[test]
    fn monotone_on_sorted_grid() {
        let mut rng = Prng::seed_from(29);
        for _ in 0..10 {
            let flow = random_flow(&mut rng);
            let grid: Vec<f64> = (0..200).map(|i| -4.0 + i as f64 * 0.04).collect();
            let out = flow
                .forward(&Tensor::new(&[200, 1], grid).unwrap(), None)
                .unwrap()
                .data();
            for w in out.windows(2) {
                assert!(w[1] > w[0], "not strictly monotone: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn composition_logdet_is_sum_of_parts() {
        let mut rng = Prng::seed_from(31);
        let flow = random_flow(&mut rng);
        let parts = match &flow {
            Transform::Composition(p) => p.clone(),
            _ => unreachable!(),
        };
        let eps = Tensor::new(&[5, 1], vec![-1.2, -0.3, 0.0, 0.8, 2.1]).unwrap();
        let (_, total) = flow.forward_logdet(&eps, None).unwrap();
        let mut value = eps.clone();
        let mut manual = Tensor::zeros(&[5, 1]);
        for p in &parts {
            let (next, ld) = p.forward_logdet(&value, None).unwrap();
            manual = manual.add(&ld).unwrap();
            value = next;
        }
        for (a, b) in total.data().iter().zip(manual.data()) {
            assert_close(*a, b, 1e-12);
        }
    }

    #[test]
    fn context_arity_is_checked() {
        let t = affine(1.0, 0.0);
        let ctx = Tensor::scalar(1.0);
        assert!(t.forward(&Tensor::scalar(0.0), Some(&ctx)).is_err());
        let mut rng = Prng::seed_from(1);
        let net = ContextNetwork::new(&[1, 2], 0.1, &mut rng, "c").unwrap();
        let cond = Transform::ConditionalAffine(ConditionalAffine::new(net, 1).unwrap());
        assert!(cond.forward(&Tensor::scalar(0.0), None).is_err());
    }

    /// Spline log-det matches the log of a finite-difference derivative on
    /// random configurations, in both directions.
    #[test]
    fn spline_logdet_matches_finite_differences() {
        let mut rng = Prng::seed_from(37);
        for trial in 0..100 {
            let spline = LinearSpline::new(8, 3.0, "s").unwrap();
            let wr: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
            let hr: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
            spline.widths_raw.set_data(&wr).unwrap();
            spline.heights_raw.set_data(&hr).unwrap();
            let t = Transform::Spline(spline);
            let e = rng.uniform_in(-2.8, 2.8);
            let h = 1e-6;
            for inverse in [false, true] {
                let f = |v: f64| {
                    let x = Tensor::scalar(v);
                    if inverse {
                        t.inverse(&x, None).unwrap().item()
                    } else {
                        t.forward(&x, None).unwrap().item()
                    }
                };
                let fd = ((f(e + h) - f(e - h)) / (2.0 * h)).ln();
                let ld = if inverse {
                    t.inverse_logdet(&Tensor::scalar(e), None).unwrap().1.item()
                } else {
                    t.forward_logdet(&Tensor::scalar(e), None).unwrap().1.item()
                };
                assert!(
                    (fd - ld).abs() < 1e-4,
                    "trial {trial} inverse={inverse}: fd {fd} vs ld {ld}"
                );
            }
        }
    }

    /// Gradients of spline outputs w.r.t. raw parameters match finite
    /// differences through both the map and its log-det.
    #[test]
    fn spline_parameter_gradients() {
        let mut rng = Prng::seed_from(41);
        for _ in 0..20 {
            let wr: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
            let hr: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
            let eps: Vec<f64> = (0..6).map(|_| rng.uniform_in(-2.8, 2.8)).collect();
            let eval = |w: &Tensor, h: &Tensor, inverse: bool, logdet: bool| -> Tensor {
                let s = LinearSpline {
                    bins: 8,
                    half_range: 3.0,
                    widths_raw: w.clone(),
                    heights_raw: h.clone(),
                };
                let t = Transform::Spline(s);
                let x = Tensor::new(&[6, 1], eps.clone()).unwrap();
                let (out, ld) = if inverse {
                    t.inverse_logdet(&x, None).unwrap()
                } else {
                    t.forward_logdet(&x, None).unwrap()
                };
                if logdet {
                    ld.sum()
                } else {
                    out.sum()
                }
            };
            for inverse in [false, true] {
                for logdet in [false, true] {
                    let w = Tensor::param(&[8], wr.clone(), "w").unwrap();
                    let h = Tensor::param(&[8], hr.clone(), "h").unwrap();
                    eval(&w, &h, inverse, logdet).backward().unwrap();
                    let fd_w = finite_diff_grad(
                        |wt| eval(wt, &Tensor::new(&[8], hr.clone()).unwrap(), inverse, logdet),
                        &w.detach(),
                        1e-6,
                    );
                    for (a, b) in w.grad().unwrap().iter().zip(fd_w.data()) {
                        assert!(
                            (a - b).abs() / b.abs().max(1e-6) < 1e-4,
                            "inverse={inverse} logdet={logdet}: {a} vs {b}"
                        );
                    }
                    let fd_h = finite_diff_grad(
                        |ht| eval(&Tensor::new(&[8], wr.clone()).unwrap(), ht, inverse, logdet),
                        &h.detach(),
                        1e-6,
                    );
                    for (a, b) in h.grad().unwrap().iter().zip(fd_h.data()) {
                        assert!(
                            (a - b).abs() / b.abs().max(1e-6) < 1e-4,
                            "inverse={inverse} logdet={logdet}: {a} vs {b}"
                        );
                    }
                }
            }
        }
    }

    /// Change of variables: a composed flow over a standard normal base
    /// integrates to one.
    #[test]
    fn flow_density_integrates_to_one() {
        use crate::distributions::Distribution;
        let mut rng = Prng::seed_from(43);
        let flow = random_flow(&mut rng);
        let base = Distribution::StandardNormal;
        // integrate exp(log p(x)) over the image of the flow
        let n = 40_000;
        let (lo, hi) = (1e-9, 200.0);
        let step = (hi - lo) / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
        let xt = Tensor::new(&[n, 1], xs).unwrap();
        let (eps, ild) = flow.inverse_logdet(&xt, None).unwrap();
        let lp = base.log_prob(&eps).unwrap().add(&ild).unwrap().data();
        let mut total = 0.0;
        for (i, l) in lp.iter().enumerate() {
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            total += w * l.exp() * step;
        }
        assert!((total - 1.0).abs() < 1e-2, "integral {total}");
    }
}
