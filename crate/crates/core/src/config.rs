//! Declarative graph configuration: nodes, parents, mechanism specs, and
//! training hyperparameters, parsed from JSON with unknown keys rejected.
//!
//! Normalisation statistics are resolved from training data once and then
//! travel inside the config, so a resolved config rebuilds its graph without
//! touching the dataset again.

use crate::distributions::{Distribution, Prng};
use crate::error::{Error, Result};
use crate::mechanisms::{
    px_to_logit, AmortisedMechanism, GumbelMechanism, InvertibleMechanism, Mechanism,
    RootMechanism,
};
use crate::scm::{Node, Observation, Scm};
use crate::transforms::{
    affine_normalisation_fit_padded, AffineNorm, BoundsKind, ConditionalAffine, ContextNetwork,
    ElementAffine, LinearSpline, Transform,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub name: String,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub training: TrainingSpec,
    #[serde(default)]
    pub data: DataSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default)]
    pub parents: Vec<String>,
    pub mechanism: MechanismSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MechanismSpec {
    /// Invertible flow over a base noise distribution; transforms listed in
    /// application order (the first acts on the noise).
    Flow {
        base: DistSpec,
        transforms: Vec<TransformSpec>,
    },
    /// Plain distribution, no transform.
    Root { base: DistSpec },
    /// Amortised encoder/decoder mechanism for high-dimensional nodes.
    Amortised {
        latent_dim: usize,
        encoder_hidden: Vec<usize>,
        decoder_hidden: Vec<usize>,
        #[serde(default = "default_fixed_logvar")]
        fixed_logvar: f64,
        event: [usize; 2],
    },
    /// Discrete Gumbel-max mechanism.
    Gumbel {
        categories: usize,
        #[serde(default)]
        context_hidden: Vec<usize>,
    },
    /// Declared for completeness; constructing one is an error.
    AmortisedImplicit {},
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DistSpec {
    StandardNormal,
    Gamma { shape: f64, rate: f64 },
    Uniform { low: f64, high: f64 },
    Gumbel { loc: f64, scale: f64 },
    Bernoulli { p: f64 },
    Categorical { logits: Vec<f64> },
}

impl DistSpec {
    fn to_distribution(&self) -> Distribution {
        match self {
            DistSpec::StandardNormal => Distribution::StandardNormal,
            DistSpec::Gamma { shape, rate } => Distribution::Gamma {
                shape: *shape,
                rate: *rate,
            },
            DistSpec::Uniform { low, high } => Distribution::Uniform {
                low: *low,
                high: *high,
            },
            DistSpec::Gumbel { loc, scale } => Distribution::Gumbel {
                loc: *loc,
                scale: *scale,
            },
            DistSpec::Bernoulli { p } => Distribution::Bernoulli { p: *p },
            DistSpec::Categorical { logits } => Distribution::Categorical {
                logits: logits.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TransformSpec {
    Spline {
        #[serde(default = "default_bins")]
        bins: usize,
        #[serde(default = "default_half_range")]
        half_range: f64,
    },
    Affine,
    ConditionalAffine { context: ContextSpec },
    Exp,
    Sigmoid,
    AffineNormalisation {
        bounds: BoundsSpec,
        #[serde(default = "default_pad")]
        pad_fraction: f64,
        /// Filled in when the config is resolved against training data.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shift: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum BoundsSpec {
    Singly,
    Doubly,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: ActivationSpec,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationSpec {
    Linear,
    LeakyRelu,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_particles")]
    pub particles: usize,
    /// Learning rate for covariate flows and discrete mechanisms.
    #[serde(default = "default_lr_flows")]
    pub lr_flows: f64,
    /// Learning rate for amortised encoder/decoder networks.
    #[serde(default = "default_lr_encoder_decoder")]
    pub lr_encoder_decoder: f64,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        TrainingSpec {
            seed: 0,
            batch_size: default_batch(),
            epochs: default_epochs(),
            particles: default_particles(),
            lr_flows: default_lr_flows(),
            lr_encoder_decoder: default_lr_encoder_decoder(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

fn default_bins() -> usize {
    8
}
fn default_half_range() -> f64 {
    3.0
}
fn default_pad() -> f64 {
    0.01
}
fn default_fixed_logvar() -> f64 {
    -5.0
}
fn default_activation() -> ActivationSpec {
    ActivationSpec::LeakyRelu
}
fn default_batch() -> usize {
    256
}
fn default_epochs() -> usize {
    100
}
fn default_particles() -> usize {
    4
}
fn default_lr_flows() -> f64 {
    5e-3
}
fn default_lr_encoder_decoder() -> f64 {
    1e-4
}

impl GraphConfig {
    /// Parse with field context in errors; unknown keys are rejected.
    pub fn parse(json: &str) -> Result<Self> {
        serde_json::from_str(json)
            .map_err(|e| Error::Config(format!("graph config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Content hash of the canonical serialisation.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn node_event_len(&self, name: &str) -> Result<usize> {
        let spec = self
            .nodes
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| Error::Config(format!("unknown parent {name:?}")))?;
        Ok(match &spec.mechanism {
            MechanismSpec::Amortised { event, .. } => event[0] * event[1],
            _ => 1,
        })
    }

    /// Fill normalisation statistics from training data. Already-resolved
    /// entries are left alone.
    pub fn resolve(&self, fit: &Observation) -> Result<GraphConfig> {
        let mut out = self.clone();
        for node in &mut out.nodes {
            if let MechanismSpec::Flow { transforms, .. } = &mut node.mechanism {
                for t in transforms {
                    if let TransformSpec::AffineNormalisation {
                        bounds,
                        pad_fraction,
                        scale,
                        shift,
                    } = t
                    {
                        if scale.is_some() && shift.is_some() {
                            continue;
                        }
                        let data = fit.get(&node.name)?.data();
                        let fitted = match bounds {
                            BoundsSpec::Doubly => affine_normalisation_fit_padded(
                                &data,
                                BoundsKind::Doubly,
                                *pad_fraction,
                            )?,
                            BoundsSpec::Singly => affine_normalisation_fit_padded(
                                &data,
                                BoundsKind::Singly,
                                0.0,
                            )?,
                        };
                        *scale = Some(fitted.scale);
                        *shift = Some(fitted.shift);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Construct the graph. Normalisation layers must be resolved. When
    /// training data is given, amortised decoder output biases start at the
    /// per-pixel mean of the preprocessed images.
    pub fn build(&self, fit: Option<&Observation>, rng: &mut Prng) -> Result<Scm> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for spec in &self.nodes {
            let mut parent_dim = 0usize;
            for p in &spec.parents {
                parent_dim += self.node_event_len(p)?;
            }
            let mechanism = self.build_mechanism(spec, parent_dim, fit, rng)?;
            let parents: Vec<&str> = spec.parents.iter().map(String::as_str).collect();
            nodes.push(Node::new(&spec.name, &parents, mechanism));
        }
        Scm::new(&self.name, nodes)
    }

    fn build_mechanism(
        &self,
        spec: &NodeSpec,
        parent_dim: usize,
        fit: Option<&Observation>,
        rng: &mut Prng,
    ) -> Result<Mechanism> {
        let name = &spec.name;
        match &spec.mechanism {
            MechanismSpec::Root { base } => {
                if parent_dim != 0 {
                    return Err(Error::Config(format!(
                        "root node {name:?} cannot declare parents"
                    )));
                }
                let dist = base.to_distribution();
                dist.validate()?;
                Ok(Mechanism::Root(RootMechanism { dist }))
            }
            MechanismSpec::Flow { base, transforms } => {
                let mut parts = Vec::with_capacity(transforms.len());
                for (k, t) in transforms.iter().enumerate() {
                    parts.push(self.build_transform(t, name, k, parent_dim, rng)?);
                }
                let flow = if parts.len() == 1 {
                    parts.pop().unwrap()
                } else {
                    Transform::Composition(parts)
                };
                let noise = base.to_distribution();
                noise.validate()?;
                Ok(Mechanism::Invertible(InvertibleMechanism { flow, noise }))
            }
            MechanismSpec::Amortised {
                latent_dim,
                encoder_hidden,
                decoder_hidden,
                fixed_logvar,
                event,
            } => {
                let event_len = event[0] * event[1];
                let mech = AmortisedMechanism::new(
                    *latent_dim,
                    event_len,
                    parent_dim,
                    encoder_hidden,
                    decoder_hidden,
                    *fixed_logvar,
                    rng,
                    name,
                )?;
                if let Some(obs) = fit {
                    if let Ok(x) = obs.get(name) {
                        let data = x.data();
                        let n = data.len() / event_len;
                        let mut bias = vec![0.0; event_len];
                        for (k, v) in data.iter().enumerate() {
                            bias[k % event_len] += px_to_logit(*v) / n as f64;
                        }
                        mech.decoder.layers.last().unwrap().bias.set_data(&bias)?;
                    }
                }
                Ok(Mechanism::Amortised(mech))
            }
            MechanismSpec::Gumbel {
                categories,
                context_hidden,
            } => Ok(Mechanism::Gumbel(GumbelMechanism::new(
                *categories,
                parent_dim,
                context_hidden,
                rng,
                name,
            )?)),
            MechanismSpec::AmortisedImplicit {} => Err(Error::Unimplemented),
        }
    }

    fn build_transform(
        &self,
        t: &TransformSpec,
        node: &str,
        position: usize,
        parent_dim: usize,
        rng: &mut Prng,
    ) -> Result<Transform> {
        Ok(match t {
            TransformSpec::Spline { bins, half_range } => Transform::Spline(LinearSpline::new(
                *bins,
                *half_range,
                &format!("{node}.{position}.spline"),
            )?),
            TransformSpec::Affine => {
                Transform::Affine(ElementAffine::new(1, &format!("{node}.{position}.affine"))?)
            }
            TransformSpec::ConditionalAffine { context } => {
                if parent_dim == 0 {
                    return Err(Error::Config(format!(
                        "node {node:?} uses a conditional affine but declares no parents"
                    )));
                }
                let net_name = format!("{node}.{position}.context");
                let net = match context.activation {
                    ActivationSpec::Linear if context.hidden.is_empty() => {
                        // a simple linear transform
                        ContextNetwork::new(&[parent_dim, 2], 0.1, rng, &net_name)?
                    }
                    ActivationSpec::Linear => {
                        return Err(Error::Config(format!(
                            "node {node:?}: linear context networks take no hidden layers"
                        )))
                    }
                    ActivationSpec::LeakyRelu => {
                        let mut dims = vec![parent_dim];
                        dims.extend_from_slice(&context.hidden);
                        dims.push(2);
                        ContextNetwork::new(&dims, 0.1, rng, &net_name)?
                    }
                };
                Transform::ConditionalAffine(ConditionalAffine::new(net, 1)?)
            }
            TransformSpec::Exp => Transform::Exp,
            TransformSpec::Sigmoid => Transform::Sigmoid,
            TransformSpec::AffineNormalisation {
                bounds,
                scale,
                shift,
                ..
            } => {
                let (scale, shift) = match (scale, shift) {
                    (Some(s), Some(b)) => (*s, *b),
                    _ => {
                        return Err(Error::Config(format!(
                            "node {node:?}: affine-normalisation statistics are unresolved; train first or provide scale/shift"
                        )))
                    }
                };
                Transform::AffineNorm(AffineNorm {
                    scale,
                    shift,
                    bounds: match bounds {
                        BoundsSpec::Singly => BoundsKind::Singly,
                        BoundsSpec::Doubly => BoundsKind::Doubly,
                    },
                })
            }
        })
    }
}

/// The three bundled graph variants.
pub const INDEPENDENT_CONFIG: &str = include_str!("../configs/independent.json");
pub const CONDITIONAL_CONFIG: &str = include_str!("../configs/conditional.json");
pub const FULL_CONFIG: &str = include_str!("../configs/full.json");

/// Resolve `--config` values: a bundled name or a file path.
pub fn load_config(arg: &str) -> Result<GraphConfig> {
    match arg {
        "independent" => GraphConfig::parse(INDEPENDENT_CONFIG),
        "conditional" => GraphConfig::parse(CONDITIONAL_CONFIG),
        "full" => GraphConfig::parse(FULL_CONFIG),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {path:?}: {e}"))
            })?;
            GraphConfig::parse(&text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata;

    #[test]
    fn bundled_configs_parse_and_build() {
        let records = synthdata::generate_records(3, synthdata::Split::Train, 0..200);
        let obs = synthdata::records_to_observation(&records, true).unwrap();
        for raw in [INDEPENDENT_CONFIG, CONDITIONAL_CONFIG, FULL_CONFIG] {
            let cfg = GraphConfig::parse(raw).unwrap();
            let resolved = cfg.resolve(&obs).unwrap();
            let scm = resolved
                .build(Some(&obs), &mut Prng::seed_from(0))
                .unwrap();
            assert_eq!(scm.order().first().map(String::as_str), Some("t"));
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = r#"{"name":"x","nodes":[],"bogus":1}"#;
        let err = GraphConfig::parse(bad).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn parse_errors_carry_position() {
        let bad = "{\n  \"name\": \"x\",\n  \"nodes\": 5\n}";
        let err = GraphConfig::parse(bad).unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn amortised_implicit_is_not_constructible() {
        let raw = r#"{
            "name": "g",
            "nodes": [
                {"name": "x", "mechanism": {"kind": "amortised-implicit"}}
            ]
        }"#;
        let cfg = GraphConfig::parse(raw).unwrap();
        let err = cfg.build(None, &mut Prng::seed_from(0)).unwrap_err();
        assert!(matches!(err, Error::Unimplemented));
    }

    #[test]
    fn unresolved_normalisation_is_an_error() {
        let cfg = GraphConfig::parse(FULL_CONFIG).unwrap();
        let err = cfg.build(None, &mut Prng::seed_from(0)).unwrap_err();
        assert!(err.to_string().contains("unresolved"), "{err}");
    }

    #[test]
    fn hash_changes_with_content() {
        let a = GraphConfig::parse(FULL_CONFIG).unwrap();
        let mut b = a.clone();
        b.training.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), GraphConfig::parse(FULL_CONFIG).unwrap().hash());
    }

    /// The brain-style five-node graph (a, s, b, v, x) is expressible in the
    /// config format even though it ships unbundled.
    #[test]
    fn five_node_graph_is_expressible() {
        let raw = r#"{
            "name": "brain-style",
            "nodes": [
                {"name": "a", "mechanism": {"kind": "flow", "base": {"kind": "standard-normal"},
                    "transforms": [
                        {"kind": "spline"},
                        {"kind": "affine-normalisation", "bounds": "singly", "scale": 0.2, "shift": 4.0},
                        {"kind": "exp"}]}},
                {"name": "s", "mechanism": {"kind": "gumbel", "categories": 2}},
                {"name": "b", "parents": ["s", "a"], "mechanism": {"kind": "flow",
                    "base": {"kind": "standard-normal"},
                    "transforms": [
                        {"kind": "conditional-affine", "context": {"hidden": [8, 16]}},
                        {"kind": "affine-normalisation", "bounds": "singly", "scale": 0.1, "shift": 7.0},
                        {"kind": "exp"}]}},
                {"name": "v", "parents": ["a", "b"], "mechanism": {"kind": "flow",
                    "base": {"kind": "standard-normal"},
                    "transforms": [
                        {"kind": "conditional-affine", "context": {"hidden": [8, 16]}},
                        {"kind": "affine-normalisation", "bounds": "singly", "scale": 0.3, "shift": 2.0},
                        {"kind": "exp"}]}},
                {"name": "x", "parents": ["v", "b"], "mechanism": {"kind": "amortised",
                    "latent_dim": 16, "encoder_hidden": [128, 64], "decoder_hidden": [128, 64],
                    "event": [28, 28]}}
            ]
        }"#;
        let cfg = GraphConfig::parse(raw).unwrap();
        let scm = cfg.build(None, &mut Prng::seed_from(1)).unwrap();
        let order = scm.order();
        let pos = |n: &str| order.iter().position(|v| v == n).unwrap();
        assert!(pos("a") < pos("b") && pos("s") < pos("b"));
        assert!(pos("b") < pos("v") && pos("v") < pos("x"));
        // ancestral sampling works across flow, gumbel, and amortised kinds
        let samples = scm
            .ancestral_sample(8, &mut Prng::seed_from(2))
            .unwrap();
        assert_eq!(samples.get("x").unwrap().shape(), vec![8, 784]);
        for v in samples.get("s").unwrap().data() {
            assert!(v == 0.0 || v == 1.0);
        }
    }
}
