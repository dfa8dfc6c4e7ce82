//! Per-node structural assignments: invertible flows, amortised
//! encoder/decoder mechanisms, discrete Gumbel-max mechanisms, and plain
//! root distributions. Each class defines sampling, its likelihood or
//! evidence-lower-bound term, and abduction of its exogenous noise.

use crate::distributions::{Distribution, Prng, LN_2PI};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::transforms::{ContextNetwork, Transform};

/// Clamp margin of the pixel preprocessing: pixels in [0, 255] map affinely
/// into [margin, 1 - margin] and then through a logit, so the whole pixel
/// range stays exactly invertible.
pub const PREPROC_MARGIN: f64 = 1e-3;
pub const PIXEL_MAX: f64 = 255.0;

/// Pixel value to unbounded (logit) space.
pub fn px_to_logit(x: f64) -> f64 {
    let p = PREPROC_MARGIN + (1.0 - 2.0 * PREPROC_MARGIN) * (x / PIXEL_MAX);
    (p / (1.0 - p)).ln()
}

/// Unbounded (logit) space back to pixel values.
pub fn logit_to_px(y: f64) -> f64 {
    let p = 1.0 / (1.0 + (-y).exp());
    (p - PREPROC_MARGIN) * PIXEL_MAX / (1.0 - 2.0 * PREPROC_MARGIN)
}

/// log |d logit / d pixel| at a pixel value; the change-of-variables term of
/// the reconstruction likelihood.
pub fn log_preproc_deriv(x: f64) -> f64 {
    let p = PREPROC_MARGIN + (1.0 - 2.0 * PREPROC_MARGIN) * (x / PIXEL_MAX);
    ((1.0 - 2.0 * PREPROC_MARGIN) / PIXEL_MAX).ln() - p.ln() - (1.0 - p).ln()
}

/// Abduction result for a single node.
#[derive(Debug, Clone)]
pub enum NodePosterior {
    /// Deterministic, exact noise value (invertible and root nodes), one row
    /// per record.
    Exact(Tensor),
    /// `s` (z, u) pairs per record, record-major: rows `b*s..(b+1)*s` belong
    /// to record `b`.
    Amortised { z: Tensor, u: Tensor, s: usize },
    /// `s` exact-posterior Gumbel noise vectors per record, record-major.
    DiscreteExact { eps: Tensor, s: usize },
}

/// Root node: a fixed distribution, no transform. Noise equals the value.
#[derive(Debug, Clone)]
pub struct RootMechanism {
    pub dist: Distribution,
}

/// Invertible explicit-likelihood mechanism: a (conditional) normalising
/// flow over a base noise distribution.
#[derive(Debug, Clone)]
pub struct InvertibleMechanism {
    pub flow: Transform,
    pub noise: Distribution,
}

/// Amortised explicit-likelihood mechanism for high-dimensional nodes: a
/// probabilistic decoder predicts the location of a fixed-variance affine
/// reparametrisation in preprocessed space, and an encoder amortises the
/// posterior over the high-level noise.
#[derive(Debug, Clone)]
pub struct AmortisedMechanism {
    /// `[latent + parents] -> event` network emitting the decoder mean in
    /// preprocessed space.
    pub decoder: ContextNetwork,
    /// `[event + parents] -> 2 * latent` network emitting the mean and
    /// log-variance of q(z | x, pa).
    pub encoder: ContextNetwork,
    pub latent_dim: usize,
    pub event_len: usize,
    /// Fixed decoder log-variance.
    pub fixed_logvar: f64,
}

/// Discrete mechanism over `categories` outcomes with a Gumbel-max
/// parametrisation; logits come from a context network over the parents.
#[derive(Debug, Clone)]
pub struct GumbelMechanism {
    pub logit_net: ContextNetwork,
    pub categories: usize,
}

#[derive(Debug, Clone)]
pub enum Mechanism {
    Root(RootMechanism),
    Invertible(InvertibleMechanism),
    Amortised(AmortisedMechanism),
    Gumbel(GumbelMechanism),
}

impl Mechanism {
    /// Values per event at this node.
    pub fn event_len(&self) -> usize {
        match self {
            Mechanism::Root(_) | Mechanism::Invertible(_) => 1,
            Mechanism::Amortised(m) => m.event_len,
            Mechanism::Gumbel(_) => 1,
        }
    }

    /// Noise values per event.
    pub fn noise_len(&self) -> usize {
        match self {
            Mechanism::Root(_) | Mechanism::Invertible(_) => 1,
            Mechanism::Amortised(m) => m.latent_dim + m.event_len,
            Mechanism::Gumbel(m) => m.categories,
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.context_dim().is_some()
    }

    /// Total width of the conditioning context this mechanism expects, if
    /// it is conditional at all.
    pub fn context_dim(&self) -> Option<usize> {
        match self {
            Mechanism::Root(_) => None,
            Mechanism::Invertible(m) => m.flow.context_dim(),
            Mechanism::Amortised(m) => {
                let extra = m.decoder.input_dim() - m.latent_dim;
                (extra > 0).then_some(extra)
            }
            Mechanism::Gumbel(m) => {
                let d = m.logit_net.input_dim();
                (d > 0).then_some(d)
            }
        }
    }

    /// Learnable parameters split into the covariate-flow group and the
    /// encoder/decoder group.
    pub fn params_grouped(&self) -> (Vec<Tensor>, Vec<Tensor>) {
        match self {
            Mechanism::Root(_) => (Vec::new(), Vec::new()),
            Mechanism::Invertible(m) => (m.flow.params(), Vec::new()),
            Mechanism::Amortised(m) => {
                let mut p = m.decoder.params();
                p.extend(m.encoder.params());
                (Vec::new(), p)
            }
            Mechanism::Gumbel(m) => (m.logit_net.params(), Vec::new()),
        }
    }

    /// Draw the exogenous noise for `n` events.
    pub fn sample_noise(&self, rng: &mut Prng, n: usize) -> Result<Tensor> {
        match self {
            Mechanism::Root(m) => m.dist.sample(rng, n),
            Mechanism::Invertible(m) => m.noise.sample(rng, n),
            Mechanism::Amortised(m) => {
                let cols = m.latent_dim + m.event_len;
                let data: Vec<f64> = (0..n * cols).map(|_| rng.standard_normal()).collect();
                Tensor::new(&[n, cols], data)
            }
            Mechanism::Gumbel(m) => {
                let data: Vec<f64> = (0..n * m.categories).map(|_| rng.gumbel()).collect();
                Tensor::new(&[n, m.categories], data)
            }
        }
    }

    /// Structural assignment: value from noise and parents. Deterministic.
    pub fn sample(&self, noise: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        let shape = noise.shape();
        if shape.len() != 2 || shape[1] != self.noise_len() {
            return Err(Error::Mechanism(format!(
                "noise shape {shape:?} does not match expected [n, {}]",
                self.noise_len()
            )));
        }
        match self {
            Mechanism::Root(_) => {
                if ctx.is_some() {
                    return Err(Error::Mechanism("root mechanism takes no parents".into()));
                }
                Ok(noise.clone())
            }
            Mechanism::Invertible(m) => m.flow.forward(noise, ctx),
            Mechanism::Amortised(m) => {
                let z = noise.narrow_last(0, m.latent_dim)?;
                let u = noise.narrow_last(m.latent_dim, m.event_len)?;
                m.decode_with_noise(&z, &u, ctx)
            }
            Mechanism::Gumbel(m) => {
                let logits = m.logits(ctx, shape[0])?;
                let ld = logits.data();
                let nd = noise.data();
                let k = m.categories;
                let mut out = Vec::with_capacity(shape[0]);
                for b in 0..shape[0] {
                    let row = b * k;
                    out.push(argmax_lowest(&ld[row..row + k], &nd[row..row + k]) as f64);
                }
                Tensor::new(&[shape[0], 1], out)
            }
        }
    }

    /// Exact conditional log-density, `[n, 1]`. Not available for amortised
    /// mechanisms, whose likelihood is bounded by [`Mechanism::elbo`].
    pub fn log_prob(&self, x: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        match self {
            Mechanism::Root(m) => Ok(m.dist.log_prob(x)?.sum_last()),
            Mechanism::Invertible(m) => {
                let (eps, ild) = m.flow.inverse_logdet(x, ctx)?;
                Ok(m.noise.log_prob(&eps)?.add(&ild)?.sum_last())
            }
            Mechanism::Gumbel(m) => m.log_prob(x, ctx),
            Mechanism::Amortised(_) => Err(Error::Mechanism(
                "amortised mechanisms have no tractable log-prob; use elbo".into(),
            )),
        }
    }

    /// Monte-Carlo evidence lower bound on log p(x | pa), `[n, 1]`.
    pub fn elbo(
        &self,
        x: &Tensor,
        ctx: Option<&Tensor>,
        particles: usize,
        rng: &mut Prng,
    ) -> Result<Tensor> {
        match self {
            Mechanism::Amortised(m) => m.elbo(x, ctx, particles, rng),
            _ => Err(Error::Mechanism("elbo is defined for amortised mechanisms".into())),
        }
    }

    /// Per-record objective term: exact log-prob where tractable, ELBO at
    /// amortised nodes.
    pub fn objective_term(
        &self,
        x: &Tensor,
        ctx: Option<&Tensor>,
        particles: usize,
        rng: &mut Prng,
    ) -> Result<Tensor> {
        match self {
            Mechanism::Amortised(m) => m.elbo(x, ctx, particles, rng),
            _ => self.log_prob(x, ctx),
        }
    }

    /// Noise posterior given a full observation of the node and its parents.
    pub fn abduct(
        &self,
        x: &Tensor,
        ctx: Option<&Tensor>,
        rng: &mut Prng,
        s: usize,
    ) -> Result<NodePosterior> {
        match self {
            Mechanism::Root(_) => Ok(NodePosterior::Exact(x.detach())),
            Mechanism::Invertible(m) => Ok(NodePosterior::Exact(m.flow.inverse(x, ctx)?.detach())),
            Mechanism::Amortised(m) => {
                let (z, u) = m.abduct(x, ctx, rng, s)?;
                Ok(NodePosterior::Amortised { z, u, s })
            }
            Mechanism::Gumbel(m) => {
                let n = x.shape()[0];
                let logits = m.logits(ctx, n)?.data();
                let xs = x.data();
                let k = m.categories;
                let mut eps = Vec::with_capacity(n * s * k);
                for b in 0..n {
                    let observed = xs[b] as usize;
                    let row = &logits[b * k..(b + 1) * k];
                    for _ in 0..s {
                        eps.extend(gumbel_posterior_sample(row, observed, rng)?);
                    }
                }
                Ok(NodePosterior::DiscreteExact {
                    eps: Tensor::new(&[n * s, k], eps)?,
                    s,
                })
            }
        }
    }

    /// Normalise a parent value for use as conditioning context: invert the
    /// fixed constraint head of the node's own flow. Identity for roots and
    /// discrete nodes.
    pub fn normalise_parent(&self, value: &Tensor) -> Result<Tensor> {
        match self {
            Mechanism::Root(_) | Mechanism::Gumbel(_) => Ok(value.detach()),
            Mechanism::Invertible(m) => {
                let head = fixed_head(&m.flow);
                let mut v = value.detach();
                for t in head.iter().rev() {
                    v = t.inverse(&v, None)?;
                }
                Ok(v)
            }
            Mechanism::Amortised(_) => Err(Error::Mechanism(
                "amortised nodes cannot be used as conditioning parents".into(),
            )),
        }
    }
}

/// Maximal parameter-free suffix of a flow: the normalisation and constraint
/// layers whose inverse defines the node's normalised value.
fn fixed_head(flow: &Transform) -> Vec<Transform> {
    let parts: Vec<Transform> = match flow {
        Transform::Composition(parts) => parts.clone(),
        other => vec![other.clone()],
    };
    let mut head = Vec::new();
    for t in parts.into_iter().rev() {
        if t.params().is_empty() && !t.is_conditional() {
            head.insert(0, t);
        } else {
            break;
        }
    }
    head
}

fn argmax_lowest(logits: &[f64], noise: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (k, (l, e)) in logits.iter().zip(noise).enumerate() {
        let v = l + e;
        if v > best_v {
            best_v = v;
            best = k;
        }
    }
    best
}

impl AmortisedMechanism {
    pub fn new(
        latent_dim: usize,
        event_len: usize,
        parent_dim: usize,
        encoder_hidden: &[usize],
        decoder_hidden: &[usize],
        fixed_logvar: f64,
        rng: &mut Prng,
        name: &str,
    ) -> Result<Self> {
        let mut enc_dims = vec![event_len + parent_dim];
        enc_dims.extend_from_slice(encoder_hidden);
        enc_dims.push(2 * latent_dim);
        let mut dec_dims = vec![latent_dim + parent_dim];
        dec_dims.extend_from_slice(decoder_hidden);
        dec_dims.push(event_len);
        Ok(AmortisedMechanism {
            decoder: ContextNetwork::new(&dec_dims, 0.1, rng, &format!("{name}.decoder"))?,
            encoder: ContextNetwork::new(&enc_dims, 0.1, rng, &format!("{name}.encoder"))?,
            latent_dim,
            event_len,
            fixed_logvar,
        })
    }

    fn sigma(&self) -> f64 {
        (0.5 * self.fixed_logvar).exp()
    }

    fn with_context(&self, a: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        match ctx {
            Some(c) => Tensor::concat_last(&[a, c]),
            None => Ok(a.clone()),
        }
    }

    /// Decoder mean in preprocessed space.
    pub fn decode_mean(&self, z: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        self.decoder.forward(&self.with_context(z, ctx)?)
    }

    /// Full low-level mechanism: x = preproc^-1(mu(z; pa) + sigma * u).
    pub fn decode_with_noise(&self, z: &Tensor, u: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        let mu = self.decode_mean(z, ctx)?;
        let y = mu.add(&u.mul_scalar(self.sigma()))?;
        let px: Vec<f64> = y.data().into_iter().map(logit_to_px).collect();
        Tensor::new(&y.shape(), px)
    }

    /// Posterior parameters (mean, log-variance) of q(z | x, pa).
    pub fn encode(&self, x: &Tensor, ctx: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let xin = x.mul_scalar(1.0 / PIXEL_MAX);
        let h = self.encoder.forward(&self.with_context(&xin, ctx)?)?;
        let mean = h.narrow_last(0, self.latent_dim)?;
        let logvar = h.narrow_last(self.latent_dim, self.latent_dim)?;
        Ok((mean, logvar))
    }

    /// Monte-Carlo ELBO: mean over particles of the reconstruction term via
    /// the change of variables through the low-level mechanism, minus the
    /// analytic KL between the diagonal-normal posterior and the prior.
    pub fn elbo(
        &self,
        x: &Tensor,
        ctx: Option<&Tensor>,
        particles: usize,
        rng: &mut Prng,
    ) -> Result<Tensor> {
        if particles == 0 {
            return Err(Error::Mechanism("elbo needs at least one particle".into()));
        }
        let n = x.shape()[0];
        let (mean, logvar) = self.encode(x, ctx)?;
        let sd = logvar.mul_scalar(0.5).exp();
        // constants of the observed data
        let xd = x.data();
        let px: Vec<f64> = xd.iter().map(|&v| px_to_logit(v)).collect();
        let px_t = Tensor::new(&x.shape(), px)?;
        let mut ldp_rows = vec![0.0; n];
        for (i, v) in xd.iter().enumerate() {
            ldp_rows[i / self.event_len] += log_preproc_deriv(*v);
        }
        let ldp = Tensor::new(&[n, 1], ldp_rows)?;
        let inv_sigma = 1.0 / self.sigma();
        let per_pixel_const = -0.5 * LN_2PI - 0.5 * self.fixed_logvar;
        let mut recon: Option<Tensor> = None;
        for _ in 0..particles {
            let eta: Vec<f64> = (0..n * self.latent_dim)
                .map(|_| rng.standard_normal())
                .collect();
            let eta = Tensor::new(&[n, self.latent_dim], eta)?;
            let z = mean.add(&sd.mul(&eta)?)?;
            let mu = self.decode_mean(&z, ctx)?;
            let u = px_t.sub(&mu)?.mul_scalar(inv_sigma);
            // sum over pixels of log N(u; 0, 1) - log sigma, plus the
            // preprocessing jacobian
            let term = u
                .square()
                .mul_scalar(-0.5)
                .add_scalar(per_pixel_const)
                .sum_last()
                .add(&ldp)?;
            recon = Some(match recon {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let recon = recon.unwrap().mul_scalar(1.0 / particles as f64);
        // KL(q || N(0, I)) = 0.5 * sum(mean^2 + var - 1 - logvar)
        let kl = mean
            .square()
            .add(&logvar.exp())?
            .add_scalar(-1.0)
            .sub(&logvar)?
            .mul_scalar(0.5)
            .sum_last();
        recon.sub(&kl)
    }

    /// S posterior noise pairs per record: z from q(z | x, pa) and the
    /// deterministic u = h^-1(x; g(z; pa), pa). Record-major rows.
    pub fn abduct(
        &self,
        x: &Tensor,
        ctx: Option<&Tensor>,
        rng: &mut Prng,
        s: usize,
    ) -> Result<(Tensor, Tensor)> {
        if s == 0 {
            return Err(Error::Mechanism("abduction needs at least one sample".into()));
        }
        let n = x.shape()[0];
        let (mean, logvar) = self.encode(x, ctx)?;
        let mean = mean.data();
        let sd: Vec<f64> = logvar.data().iter().map(|lv| (0.5 * lv).exp()).collect();
        let mut z = Vec::with_capacity(n * s * self.latent_dim);
        for b in 0..n {
            for _ in 0..s {
                for l in 0..self.latent_dim {
                    let idx = b * self.latent_dim + l;
                    z.push(mean[idx] + sd[idx] * rng.standard_normal());
                }
            }
        }
        let z = Tensor::new(&[n * s, self.latent_dim], z)?;
        let ctx_rep = ctx.map(|c| repeat_rows(c, s)).transpose()?;
        let mu = self.decode_mean(&z, ctx_rep.as_ref())?.data();
        let xd = x.data();
        let inv_sigma = 1.0 / self.sigma();
        let mut u = Vec::with_capacity(n * s * self.event_len);
        for b in 0..n {
            let px_row: Vec<f64> = xd[b * self.event_len..(b + 1) * self.event_len]
                .iter()
                .map(|&v| px_to_logit(v))
                .collect();
            for si in 0..s {
                let mu_row = &mu[(b * s + si) * self.event_len..(b * s + si + 1) * self.event_len];
                for (pv, mv) in px_row.iter().zip(mu_row) {
                    u.push((pv - mv) * inv_sigma);
                }
            }
        }
        Ok((z, Tensor::new(&[n * s, self.event_len], u)?))
    }

    /// Counterfactual pixels under new parents, anchored at the observation:
    /// the decoder-mean difference is applied in preprocessed space, so an
    /// unchanged context returns the observation bit-for-bit. Contexts are
    /// given at sample granularity (`n * s` rows), since parents may vary
    /// across posterior samples.
    pub fn counterfactual_pixels(
        &self,
        x: &Tensor,
        z: &Tensor,
        ctx_old: Option<&Tensor>,
        ctx_new: Option<&Tensor>,
        s: usize,
    ) -> Result<Tensor> {
        let n = x.shape()[0];
        let mu_old = self.decode_mean(z, ctx_old)?.data();
        let mu_new = self.decode_mean(z, ctx_new)?.data();
        let xd = x.data();
        let d = self.event_len;
        let mut out = Vec::with_capacity(n * s * d);
        for b in 0..n {
            for si in 0..s {
                let row = (b * s + si) * d;
                for p in 0..d {
                    let xv = xd[b * d + p];
                    let delta = mu_new[row + p] - mu_old[row + p];
                    if delta == 0.0 {
                        out.push(xv);
                    } else {
                        let base = px_to_logit(xv);
                        out.push(xv + (logit_to_px(base + delta) - logit_to_px(base)));
                    }
                }
            }
        }
        Tensor::new(&[n * s, d], out)
    }

    /// Monte-Carlo reconstruction: mean over `s` posterior draws of the
    /// decoded mean, mapped back to pixel space.
    pub fn reconstruct(
        &self,
        x: &Tensor,
        ctx: Option<&Tensor>,
        rng: &mut Prng,
        s: usize,
    ) -> Result<Tensor> {
        let n = x.shape()[0];
        let (z, _) = self.abduct(x, ctx, rng, s)?;
        let ctx_rep = ctx.map(|c| repeat_rows(c, s)).transpose()?;
        let mu = self.decode_mean(&z, ctx_rep.as_ref())?.data();
        let d = self.event_len;
        let mut out = vec![0.0; n * d];
        for b in 0..n {
            for si in 0..s {
                let row = (b * s + si) * d;
                for p in 0..d {
                    out[b * d + p] += logit_to_px(mu[row + p]) / s as f64;
                }
            }
        }
        Tensor::new(&[n, d], out)
    }
}

/// Repeat each row of a rank-2 tensor `s` times (record-major expansion).
pub fn repeat_rows(t: &Tensor, s: usize) -> Result<Tensor> {
    let shape = t.shape();
    let (n, d) = (shape[0], shape[1]);
    let data = t.data();
    let mut out = Vec::with_capacity(n * s * d);
    for b in 0..n {
        for _ in 0..s {
            out.extend_from_slice(&data[b * d..(b + 1) * d]);
        }
    }
    Tensor::new(&[n * s, d], out)
}

impl GumbelMechanism {
    pub fn new(
        categories: usize,
        parent_dim: usize,
        hidden: &[usize],
        rng: &mut Prng,
        name: &str,
    ) -> Result<Self> {
        let mut dims = vec![parent_dim];
        dims.extend_from_slice(hidden);
        dims.push(categories);
        Ok(GumbelMechanism {
            logit_net: ContextNetwork::new(&dims, 0.1, rng, name)?,
            categories,
        })
    }

    /// Logits for a batch; a parent-free node gets an empty context.
    pub fn logits(&self, ctx: Option<&Tensor>, n: usize) -> Result<Tensor> {
        match ctx {
            Some(c) => self.logit_net.forward(c),
            None => {
                let empty = Tensor::new(&[n, 0], Vec::new())?;
                self.logit_net.forward(&empty)
            }
        }
    }

    fn log_prob(&self, x: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        let n = x.shape()[0];
        let logits = self.logits(ctx, n)?;
        let lsm = logits.sub(&logits.logsumexp_last()?)?;
        let xs = x.data();
        let mut onehot = vec![0.0; n * self.categories];
        for (b, v) in xs.iter().enumerate() {
            let k = *v as usize;
            if *v < 0.0 || v.fract() != 0.0 || k >= self.categories {
                return Err(Error::Mechanism(format!(
                    "category {v} out of range 0..{}",
                    self.categories
                )));
            }
            onehot[b * self.categories + k] = 1.0;
        }
        let onehot = Tensor::new(&[n, self.categories], onehot)?;
        Ok(lsm.mul(&onehot)?.sum_last())
    }
}

/// Exact posterior sample of the Gumbel noise given an observed category,
/// stabilised with log-sum-exp identities. The top noise value is tied to
/// the observed category by construction.
pub fn gumbel_posterior_sample(logits: &[f64], observed: usize, rng: &mut Prng) -> Result<Vec<f64>> {
    let k = logits.len();
    if observed >= k {
        return Err(Error::Mechanism(format!(
            "observed category {observed} out of range 0..{k}"
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Mechanism("logits must be finite".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let g_top = rng.gumbel();
    let eps_top = g_top + lse - logits[observed];
    // -(eps_top + logits[observed]) = -(g_top + lse)
    let neg_top = -(g_top + lse);
    let mut eps = vec![0.0; k];
    for (l, eps_l) in eps.iter_mut().enumerate() {
        if l == observed {
            *eps_l = eps_top;
        } else {
            let g = rng.gumbel();
            *eps_l = -log_add_exp(-g - logits[l], neg_top) - logits[l];
        }
    }
    Ok(eps)
}

/// Counterfactual outcome under new logits with the abducted noise held
/// fixed; ties break to the lowest index.
pub fn gumbel_counterfactual(eps: &[f64], new_logits: &[f64]) -> usize {
    argmax_lowest(new_logits, eps)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{AffineNorm, BoundsKind, ConditionalAffine};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    /// Thickness mechanism of the reference generator: t = 0.5 + eps.
    fn true_thickness() -> Mechanism {
        Mechanism::Invertible(InvertibleMechanism {
            flow: Transform::AffineNorm(AffineNorm {
                scale: 1.0,
                shift: 0.5,
                bounds: BoundsKind::Singly,
            }),
            noise: Distribution::Gamma { shape: 10.0, rate: 5.0 },
        })
    }

    #[test]
    fn invertible_sample_value() {
        let m = true_thickness();
        let t = m
            .sample(&Tensor::new(&[1, 1], vec![1.5]).unwrap(), None)
            .unwrap();
        assert_close(t.item(), 2.0, 1e-12);
    }

    #[test]
    fn invertible_abduction_roundtrip() {
        let m = true_thickness();
        let mut rng = Prng::seed_from(2);
        let eps = m.sample_noise(&mut rng, 100).unwrap();
        let x = m.sample(&eps, None).unwrap();
        match m.abduct(&x, None, &mut rng, 1).unwrap() {
            NodePosterior::Exact(e) => {
                for (a, b) in e.data().iter().zip(eps.data()) {
                    assert_close(*a, b, 1e-5);
                }
            }
            _ => panic!("expected exact posterior"),
        }
    }

    #[test]
    fn affine_flow_log_prob() {
        // pure affine(scale s) over a standard normal at x = shift:
        // log p = -0.5 ln 2pi - ln s
        let s = 2.5;
        let m = Mechanism::Invertible(InvertibleMechanism {
            flow: Transform::AffineNorm(AffineNorm {
                scale: s,
                shift: 1.0,
                bounds: BoundsKind::Singly,
            }),
            noise: Distribution::StandardNormal,
        });
        let lp = m
            .log_prob(&Tensor::new(&[1, 1], vec![1.0]).unwrap(), None)
            .unwrap();
        assert_close(lp.item(), -0.5 * LN_2PI - s.ln(), 1e-12);
    }

    #[test]
    fn preprocessing_roundtrip() {
        for x in [0.0, 0.01, 1.0, 127.5, 254.0, 255.0] {
            assert_close(logit_to_px(px_to_logit(x)), x, 1e-9);
        }
    }

    fn toy_amortised(event: usize, parents: usize, rng: &mut Prng) -> AmortisedMechanism {
        AmortisedMechanism::new(2, event, parents, &[8], &[8], -5.0, rng, "toy").unwrap()
    }

    #[test]
    fn amortised_sample_at_zero_noise() {
        let mut rng = Prng::seed_from(5);
        let m = toy_amortised(4, 0, &mut rng);
        let noise = Tensor::zeros(&[1, 6]);
        let x = m
            .decode_with_noise(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 4]), None)
            .unwrap();
        let mech = Mechanism::Amortised(m);
        let x2 = mech.sample(&noise, None).unwrap();
        assert_eq!(x.data(), x2.data());
        // x = preprocess^-1 of the decoder mean at z = 0
    }

    #[test]
    fn gumbel_dominant_logit() {
        let mut rng = Prng::seed_from(6);
        let m = GumbelMechanism::new(3, 0, &[], &mut rng, "y").unwrap();
        m.logit_net.layers[0]
            .bias
            .set_data(&[10.0, 0.0, 0.0])
            .unwrap();
        let mech = Mechanism::Gumbel(m);
        for _ in 0..50 {
            let eps: Vec<f64> = (0..3).map(|_| rng.uniform_in(-4.0, 4.0)).collect();
            let y = mech
                .sample(&Tensor::new(&[1, 3], eps).unwrap(), None)
                .unwrap();
            assert_eq!(y.item(), 0.0);
        }
    }

    /// A decoder that reproduces the observation exactly with a prior-matching
    /// posterior has ELBO = sum of log p(u = 0) terms and zero KL.
    #[test]
    fn elbo_at_exact_reconstruction() {
        let mut rng = Prng::seed_from(7);
        let event = 4;
        let m = toy_amortised(event, 0, &mut rng);
        // zero out the encoder so q = N(0, I) = prior
        for l in &m.encoder.layers {
            l.weight.set_data(&vec![0.0; l.weight.len()]).unwrap();
            l.bias.set_data(&vec![0.0; l.bias.len()]).unwrap();
        }
        // decoder ignores z and outputs exactly the preprocessed observation
        let x: Vec<f64> = vec![10.0, 100.0, 200.0, 37.0];
        for l in &m.decoder.layers {
            l.weight.set_data(&vec![0.0; l.weight.len()]).unwrap();
            l.bias.set_data(&vec![0.0; l.bias.len()]).unwrap();
        }
        let bias: Vec<f64> = x.iter().map(|&v| px_to_logit(v)).collect();
        m.decoder.layers.last().unwrap().bias.set_data(&bias).unwrap();
        let xt = Tensor::new(&[1, event], x.clone()).unwrap();
        let elbo = m.elbo(&xt, None, 3, &mut rng).unwrap().item();
        let expected: f64 = x
            .iter()
            .map(|&v| -0.5 * LN_2PI + 2.5 + log_preproc_deriv(v))
            .sum();
        assert_close(elbo, expected, 1e-9);
    }

    /// ELBO never exceeds an importance-sampled estimate of the true
    /// log-likelihood on a toy mechanism.
    #[test]
    fn elbo_is_a_lower_bound() {
        let mut rng = Prng::seed_from(8);
        let m = toy_amortised(4, 0, &mut rng);
        let mech = Mechanism::Amortised(m.clone());
        // a data point sampled from the model itself
        let noise = mech.sample_noise(&mut rng, 1).unwrap();
        let x = mech.sample(&noise, None).unwrap();
        let elbo = m.elbo(&x, None, 64, &mut rng).unwrap().item();
        // importance sampling with q as proposal:
        // log p(x) = logmeanexp[ log p(x|z) + log p(z) - log q(z|x) ]
        let particles = 10_000;
        let (mean, logvar) = m.encode(&x, None).unwrap();
        let (mean, logvar) = (mean.data(), logvar.data());
        let px: Vec<f64> = x.data().iter().map(|&v| px_to_logit(v)).collect();
        let ldp: f64 = x.data().iter().map(|&v| log_preproc_deriv(v)).sum();
        let sigma = (0.5 * -5.0f64).exp();
        let mut log_ws = Vec::with_capacity(particles);
        for _ in 0..particles {
            let z: Vec<f64> = (0..2)
                .map(|l| mean[l] + (0.5 * logvar[l]).exp() * rng.standard_normal())
                .collect();
            let zt = Tensor::new(&[1, 2], z.clone()).unwrap();
            let mu = m.decode_mean(&zt, None).unwrap().data();
            let mut log_px_z = ldp;
            for (pv, mv) in px.iter().zip(&mu) {
                let u = (pv - mv) / sigma;
                log_px_z += -0.5 * u * u - 0.5 * LN_2PI - sigma.ln();
            }
            let log_pz: f64 = z.iter().map(|v| -0.5 * v * v - 0.5 * LN_2PI).sum();
            let log_qz: f64 = z
                .iter()
                .enumerate()
                .map(|(l, v)| {
                    let sd = (0.5 * logvar[l]).exp();
                    let e = (v - mean[l]) / sd;
                    -0.5 * e * e - 0.5 * LN_2PI - sd.ln()
                })
                .sum();
            log_ws.push(log_px_z + log_pz - log_qz);
        }
        let mx = log_ws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_is = mx + (log_ws.iter().map(|w| (w - mx).exp()).sum::<f64>() / particles as f64).ln();
        // allow MC noise on the IS side
        assert!(
            elbo <= log_is + 0.05,
            "elbo {elbo} exceeds IS estimate {log_is}"
        );
    }

    #[test]
    fn elbo_particle_count_reduces_variance() {
        let mut rng = Prng::seed_from(9);
        let m = toy_amortised(4, 0, &mut rng);
        let mech = Mechanism::Amortised(m.clone());
        let noise = mech.sample_noise(&mut rng, 1).unwrap();
        let x = mech.sample(&noise, None).unwrap();
        let spread = |p: usize, rng: &mut Prng| -> f64 {
            let vals: Vec<f64> = (0..100)
                .map(|_| m.elbo(&x, None, p, rng).unwrap().item())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64
        };
        let v1 = spread(1, &mut rng);
        let v4 = spread(4, &mut rng);
        assert!(v4 < v1, "var with 4 particles {v4} vs 1 particle {v1}");
    }

    /// Replaying abducted (z, u) pairs through the unchanged mechanism
    /// reconstructs the observation.
    #[test]
    fn amortised_abduction_replays_exactly() {
        let mut rng = Prng::seed_from(10);
        let m = toy_amortised(6, 1, &mut rng);
        let ctx = Tensor::new(&[2, 1], vec![0.3, -0.8]).unwrap();
        let x = Tensor::new(&[2, 6], vec![5.0, 50.0, 120.0, 250.0, 33.0, 7.0,
                                           80.0, 10.0, 90.0, 140.0, 200.0, 1.0]).unwrap();
        let s = 5;
        let (z, u) = m.abduct(&x, Some(&ctx), &mut rng, s).unwrap();
        let ctx_rep = repeat_rows(&ctx, s).unwrap();
        let replay = m.decode_with_noise(&z, &u, Some(&ctx_rep)).unwrap();
        let xd = x.data();
        for b in 0..2 {
            for si in 0..s {
                for p in 0..6 {
                    let got = replay.data()[(b * s + si) * 6 + p];
                    assert_close(got, xd[b * 6 + p], 1e-9);
                }
            }
        }
        // the anchored counterfactual with unchanged parents is bitwise exact
        let cf = m
            .counterfactual_pixels(&x, &z, Some(&ctx_rep), Some(&ctx_rep), s)
            .unwrap();
        for b in 0..2 {
            for si in 0..s {
                for p in 0..6 {
                    assert_eq!(cf.data()[(b * s + si) * 6 + p], xd[b * 6 + p]);
                }
            }
        }
    }

    #[test]
    fn gumbel_posterior_reproduces_observation() {
        let mut rng = Prng::seed_from(11);
        let logits = [0.7, -1.2, 0.1, 2.0];
        for _ in 0..20_000 {
            let k = rng.usize_below(4);
            let eps = gumbel_posterior_sample(&logits, k, &mut rng).unwrap();
            assert_eq!(gumbel_counterfactual(&eps, &logits), k);
        }
    }

    #[test]
    fn gumbel_posterior_k1_is_unconstrained() {
        let mut rng = Prng::seed_from(12);
        let n = 200_000;
        let mean: f64 = (0..n)
            .map(|_| gumbel_posterior_sample(&[0.0], 0, &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        // plain Gumbel(0,1) mean is the Euler-Mascheroni constant
        assert_close(mean, 0.5772156649, 0.01);
    }

    #[test]
    fn gumbel_posterior_uniform_two_class_mean() {
        // uniform logits (0,0), observed 0: eps^0 is Gumbel shifted by ln 2
        let mut rng = Prng::seed_from(13);
        let n = 1_000_000;
        let mean: f64 = (0..n)
            .map(|_| gumbel_posterior_sample(&[0.0, 0.0], 0, &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert_close(mean, 0.5772156649 + 2.0f64.ln(), 0.01);
    }

    #[test]
    fn gumbel_counterfactual_null_and_permutation() {
        let mut rng = Prng::seed_from(14);
        let logits = [0.3, 1.1, -0.4];
        let perm = [2usize, 0, 1]; // new position of each old index
        for _ in 0..5_000 {
            let k = rng.usize_below(3);
            let eps = gumbel_posterior_sample(&logits, k, &mut rng).unwrap();
            assert_eq!(gumbel_counterfactual(&eps, &logits), k, "null intervention");
            let mut p_logits = [0.0; 3];
            let mut p_eps = [0.0; 3];
            for (old, &new) in perm.iter().enumerate() {
                p_logits[new] = logits[old];
                p_eps[new] = eps[old];
            }
            assert_eq!(
                gumbel_counterfactual(&p_eps, &p_logits),
                perm[k],
                "permutation equivariance"
            );
        }
    }

    #[test]
    fn gumbel_counterfactual_monotone_stability() {
        let mut rng = Prng::seed_from(15);
        let logits = [0.5, -0.2, 1.0];
        for _ in 0..2_000 {
            let k = rng.usize_below(3);
            let eps = gumbel_posterior_sample(&logits, k, &mut rng).unwrap();
            for inc in 1..=10 {
                let mut boosted = logits;
                boosted[k] += 0.3 * inc as f64;
                assert_eq!(gumbel_counterfactual(&eps, &boosted), k);
            }
        }
    }

    #[test]
    fn gumbel_forward_frequencies_match_softmax() {
        let mut rng = Prng::seed_from(16);
        let m = GumbelMechanism::new(3, 0, &[], &mut rng, "y").unwrap();
        let logits = [0.4, -0.6, 1.1];
        m.logit_net.layers[0].bias.set_data(&logits).unwrap();
        let mech = Mechanism::Gumbel(m);
        let n = 100_000;
        let noise = mech.sample_noise(&mut rng, n).unwrap();
        let y = mech.sample(&noise, None).unwrap().data();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for k in 0..3 {
            let freq = y.iter().filter(|&&v| v == k as f64).count() as f64 / n as f64;
            let p = logits[k].exp() / z;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() < 3.0 * se, "class {k}: {freq} vs {p}");
        }
    }

    #[test]
    fn normalise_parent_inverts_fixed_head() {
        // learned-style thickness flow: spline, then log-space whitening,
        // then exp; the hat value is the whitened log
        use crate::transforms::LinearSpline;
        let flow = Transform::Composition(vec![
            Transform::Spline(LinearSpline::new(8, 3.0, "s").unwrap()),
            Transform::AffineNorm(AffineNorm {
                scale: 0.3,
                shift: 0.7,
                bounds: BoundsKind::Singly,
            }),
            Transform::Exp,
        ]);
        let m = Mechanism::Invertible(InvertibleMechanism {
            flow,
            noise: Distribution::StandardNormal,
        });
        let t = 2.0f64;
        let hat = m
            .normalise_parent(&Tensor::new(&[1, 1], vec![t]).unwrap())
            .unwrap();
        assert_close(hat.item(), (t.ln() - 0.7) / 0.3, 1e-12);
    }

    #[test]
    fn conditional_mechanism_log_prob_matches_manual() {
        // i = 191*sigmoid(0.5 eps + 2t - 5) + 64 over a standard normal
        let net = ContextNetwork::from_weights(
            vec![vec![0.0, 2.0]],
            vec![0.5f64.ln(), -5.0],
            "f_i",
        )
        .unwrap();
        let m = Mechanism::Invertible(InvertibleMechanism {
            flow: Transform::Composition(vec![
                Transform::ConditionalAffine(ConditionalAffine::new(net, 1).unwrap()),
                Transform::Sigmoid,
                Transform::AffineNorm(AffineNorm {
                    scale: 191.0,
                    shift: 64.0,
                    bounds: BoundsKind::Doubly,
                }),
            ]),
            noise: Distribution::StandardNormal,
        });
        let (t, eps) = (2.3, 0.7);
        let w: f64 = 0.5 * eps + 2.0 * t - 5.0;
        let sig = 1.0 / (1.0 + (-w).exp());
        let i = 191.0 * sig + 64.0;
        let manual = -0.5 * eps * eps - 0.5 * LN_2PI - (191.0 * 0.5 * sig * (1.0 - sig)).ln();
        let lp = m
            .log_prob(
                &Tensor::new(&[1, 1], vec![i]).unwrap(),
                Some(&Tensor::new(&[1, 1], vec![t]).unwrap()),
            )
            .unwrap();
        assert_close(lp.item(), manual, 1e-9);
    }
}
