//! The causal-graph engine: DAG validation, ancestral sampling, joint
//! likelihood, interventions, abduction, counterfactual inference, and 1-D
//! posterior conditioning.

use crate::error::{Error, Result};
use crate::mechanisms::{repeat_rows, Mechanism, NodePosterior};
use crate::numerics::Tensor;
use crate::distributions::Prng;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

/// A node's assignment: a mechanism, or a constant after an atomic
/// intervention (disconnected from parents and noise).
#[derive(Debug, Clone)]
pub enum Assignment {
    Mechanism(Rc<Mechanism>),
    /// Event values: either one event (broadcast over records) or one event
    /// per record.
    Clamped(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub parents: Vec<String>,
    pub assignment: Assignment,
    /// The normaliser children condition on, captured from the mechanism the
    /// node had when the graph was built. Interventions replace the
    /// assignment but never this: children keep the scale they learned.
    hat: Option<Rc<Mechanism>>,
}

impl Node {
    pub fn new(name: &str, parents: &[&str], mechanism: Mechanism) -> Self {
        Node {
            name: name.to_string(),
            parents: parents.iter().map(|p| p.to_string()).collect(),
            assignment: Assignment::Mechanism(Rc::new(mechanism)),
            hat: None,
        }
    }

    pub fn mechanism(&self) -> Option<&Rc<Mechanism>> {
        match &self.assignment {
            Assignment::Mechanism(m) => Some(m),
            Assignment::Clamped(_) => None,
        }
    }

    fn event_len(&self) -> usize {
        match &self.assignment {
            Assignment::Mechanism(m) => m.event_len(),
            Assignment::Clamped(_) => 1,
        }
    }
}

/// Complete observation of every node, one row per record.
#[derive(Debug, Clone)]
pub struct Observation {
    values: BTreeMap<String, Tensor>,
    n: usize,
}

impl Observation {
    pub fn new(values: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut n = None;
        for (name, t) in &values {
            let shape = t.shape();
            if shape.len() != 2 {
                return Err(Error::Graph(format!(
                    "observation for {name} must be rank-2, got {shape:?}"
                )));
            }
            match n {
                None => n = Some(shape[0]),
                Some(m) if m != shape[0] => {
                    return Err(Error::Graph(format!(
                        "observation row counts differ: {m} vs {} at {name}",
                        shape[0]
                    )))
                }
                _ => {}
            }
        }
        Ok(Observation {
            values,
            n: n.unwrap_or(0),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values
            .get(name)
            .ok_or_else(|| Error::IncompleteObservation(name.to_string()))
    }

    pub fn insert(&mut self, name: String, value: Tensor) {
        self.n = value.shape()[0];
        self.values.insert(name, value);
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.values.iter()
    }

    /// Select records by index.
    pub fn rows(&self, indices: &[usize]) -> Result<Observation> {
        let mut values = BTreeMap::new();
        for (name, t) in &self.values {
            values.insert(name.clone(), t.index_rows(indices)?);
        }
        Observation::new(values)
    }
}

/// Target of one intervention entry.
#[derive(Debug, Clone)]
pub enum InterventionTarget {
    /// Atomic: clamp to a constant event (len = event_len) or to per-record
    /// events (len = n * event_len).
    Constant(Vec<f64>),
    /// Surrogate mechanism with its own parent list.
    Mechanism {
        parents: Vec<String>,
        mechanism: Rc<Mechanism>,
    },
}

/// A set of simultaneous interventions keyed by node name.
#[derive(Debug, Clone, Default)]
pub struct Intervention {
    pub targets: BTreeMap<String, InterventionTarget>,
}

impl Intervention {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn constant(node: &str, value: f64) -> Self {
        let mut iv = Self::default();
        iv.targets
            .insert(node.to_string(), InterventionTarget::Constant(vec![value]));
        iv
    }

    pub fn constant_per_record(node: &str, values: Vec<f64>) -> Self {
        let mut iv = Self::default();
        iv.targets
            .insert(node.to_string(), InterventionTarget::Constant(values));
        iv
    }

    pub fn and_constant(mut self, node: &str, value: f64) -> Self {
        self.targets
            .insert(node.to_string(), InterventionTarget::Constant(vec![value]));
        self
    }
}

/// Factorised noise posterior across nodes.
#[derive(Debug, Clone)]
pub struct NoisePosterior {
    pub per_node: BTreeMap<String, NodePosterior>,
    pub s: usize,
}

/// Counterfactual output: `s` samples per record plus the per-node mean.
#[derive(Debug, Clone)]
pub struct Counterfactuals {
    pub samples: Observation,
    pub mean: Observation,
    pub s: usize,
}

/// Normalised 1-D density on a grid.
#[derive(Debug, Clone)]
pub struct DensityTable {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64) -> Self {
        GridSpec { lo, hi, points: 2048 }
    }
}

/// Total variation distance between two densities on the same grid.
pub fn tv_distance(a: &DensityTable, b: &DensityTable) -> Result<f64> {
    if a.grid.len() != b.grid.len() {
        return Err(Error::Evaluation("grids differ in length".into()));
    }
    let mut total = 0.0;
    for i in 0..a.grid.len() - 1 {
        let h = a.grid[i + 1] - a.grid[i];
        let d0 = (a.density[i] - b.density[i]).abs();
        let d1 = (a.density[i + 1] - b.density[i + 1]).abs();
        total += 0.5 * h * 0.5 * (d0 + d1);
    }
    Ok(total)
}

/// A named DAG of mechanisms.
#[derive(Debug, Clone)]
pub struct Scm {
    pub name: String,
    nodes: Vec<Node>,
    order: Vec<usize>,
    index: BTreeMap<String, usize>,
}

impl Scm {
    /// Build and validate: parents resolve, the graph is acyclic, and each
    /// mechanism's context width matches its declared parents.
    pub fn new(name: &str, nodes: Vec<Node>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if index.insert(node.name.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate node {:?}", node.name)));
            }
        }
        for node in &nodes {
            for p in &node.parents {
                if !index.contains_key(p) {
                    return Err(Error::Graph(format!(
                        "node {:?} references unknown parent {:?}",
                        node.name, p
                    )));
                }
            }
            if let Assignment::Mechanism(m) = &node.assignment {
                let declared: usize = node
                    .parents
                    .iter()
                    .map(|p| nodes[index[p]].event_len())
                    .sum();
                match m.context_dim() {
                    Some(d) if d != declared => {
                        return Err(Error::Graph(format!(
                            "node {:?} declares parents of total width {declared} but its mechanism expects {d}",
                            node.name
                        )));
                    }
                    None if !node.parents.is_empty() => {
                        return Err(Error::Graph(format!(
                            "node {:?} declares parents but its mechanism is unconditional",
                            node.name
                        )));
                    }
                    _ => {}
                }
            }
        }
        let order = topological_order(&nodes, &index)?;
        let mut nodes = nodes;
        for node in &mut nodes {
            if node.hat.is_none() {
                if let Assignment::Mechanism(m) = &node.assignment {
                    node.hat = Some(m.clone());
                }
            }
        }
        Ok(Scm {
            name: name.to_string(),
            nodes,
            order,
            index,
        })
    }

    pub fn node(&self, name: &str) -> Result<&Node> {
        self.index
            .get(name)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Node names in topological order.
    pub fn order(&self) -> Vec<String> {
        self.order.iter().map(|&i| self.nodes[i].name.clone()).collect()
    }

    fn check_complete(&self, obs: &Observation) -> Result<()> {
        let missing: Vec<String> = self
            .nodes
            .iter()
            .filter(|n| obs.values.get(&n.name).is_none())
            .map(|n| n.name.clone())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompleteObservation(missing.join(", ")))
        }
    }

    /// Assemble the normalised-parent context for a node from a value map.
    /// Normalisers always come from this graph's own mechanisms, so an
    /// intervened graph keeps conditioning on the scale its children were
    /// trained with.
    fn context_from(
        &self,
        node: &Node,
        values: &BTreeMap<String, Tensor>,
    ) -> Result<Option<Tensor>> {
        if node.parents.is_empty() {
            return Ok(None);
        }
        let mut parts = Vec::with_capacity(node.parents.len());
        for p in node.parents.iter() {
            let value = values
                .get(p)
                .ok_or_else(|| Error::Graph(format!("missing parent value {p:?}")))?;
            parts.push(self.normalise_value(p, value)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Some(Tensor::concat_last(&refs)?))
    }

    /// Normalised ("hat") value of a node, per the mechanism the node was
    /// built with; stable across interventions.
    pub fn normalise_value(&self, name: &str, value: &Tensor) -> Result<Tensor> {
        let node = self.node(name)?;
        match (&node.hat, &node.assignment) {
            (Some(m), _) => m.normalise_parent(value),
            (None, Assignment::Mechanism(m)) => m.normalise_parent(value),
            (None, Assignment::Clamped(_)) => Ok(value.detach()),
        }
    }

    /// Sample each node in topological order from its mechanism.
    pub fn ancestral_sample(&self, n: usize, rng: &mut Prng) -> Result<Observation> {
        if n == 0 {
            return Err(Error::Graph("sample count must be >= 1".into()));
        }
        let mut values: BTreeMap<String, Tensor> = BTreeMap::new();
        for &i in &self.order {
            let node = &self.nodes[i];
            let value = match &node.assignment {
                Assignment::Clamped(c) => clamped_tensor(c, n, 1, &node.name)?,
                Assignment::Mechanism(m) => {
                    let ctx = self.context_from(node, &values)?;
                    let noise = m.sample_noise(rng, n)?;
                    m.sample(&noise, ctx.as_ref())?
                }
            };
            values.insert(node.name.clone(), value);
        }
        Observation::new(values)
    }

    /// Mean per-record log-likelihood lower bound: the sum over nodes of the
    /// exact log-prob (invertible, discrete, root) or the ELBO (amortised).
    /// The training loss is its negation.
    pub fn joint_objective(
        &self,
        obs: &Observation,
        particles: usize,
        rng: &mut Prng,
    ) -> Result<Tensor> {
        self.check_complete(obs)?;
        let mut total: Option<Tensor> = None;
        for &i in &self.order {
            let node = &self.nodes[i];
            let m = match &node.assignment {
                Assignment::Mechanism(m) => m,
                Assignment::Clamped(_) => continue,
            };
            let ctx = self.context_from(node, &obs.values)?;
            let term = m.objective_term(obs.get(&node.name)?, ctx.as_ref(), particles, rng)?;
            total = Some(match total {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let total = total.ok_or_else(|| Error::Graph("empty graph".into()))?;
        Ok(total.mean())
    }

    /// Per-node mean objective terms (log-probs and ELBOs), for reporting.
    pub fn per_node_objective(
        &self,
        obs: &Observation,
        particles: usize,
        rng: &mut Prng,
    ) -> Result<BTreeMap<String, f64>> {
        self.check_complete(obs)?;
        let mut out = BTreeMap::new();
        for &i in &self.order {
            let node = &self.nodes[i];
            let m = match &node.assignment {
                Assignment::Mechanism(m) => m,
                Assignment::Clamped(_) => continue,
            };
            let ctx = self.context_from(node, &obs.values)?;
            let term = m.objective_term(obs.get(&node.name)?, ctx.as_ref(), particles, rng)?;
            out.insert(node.name.clone(), term.mean().item());
        }
        Ok(out)
    }

    /// Apply an intervention, returning the modified graph. Constants sever
    /// parent edges and ignore noise; the original graph is unchanged.
    pub fn intervened(&self, iv: &Intervention) -> Result<Scm> {
        for name in iv.targets.keys() {
            if !self.index.contains_key(name) {
                return Err(Error::UnknownNode(name.clone()));
            }
        }
        let mut nodes = self.nodes.clone();
        for (name, target) in &iv.targets {
            let i = self.index[name];
            match target {
                InterventionTarget::Constant(v) => {
                    nodes[i].parents = Vec::new();
                    nodes[i].assignment = Assignment::Clamped(v.clone());
                }
                InterventionTarget::Mechanism { parents, mechanism } => {
                    nodes[i].parents = parents.clone();
                    nodes[i].assignment = Assignment::Mechanism(mechanism.clone());
                }
            }
        }
        Scm::new(&self.name, nodes)
    }

    /// Surrogate-mechanism intervention that keeps a node's own flow and
    /// noise but shifts the output by a constant.
    pub fn noise_shift_intervention(&self, node: &str, shift: f64) -> Result<Intervention> {
        use crate::mechanisms::InvertibleMechanism;
        use crate::transforms::{AffineNorm, BoundsKind, Transform};
        let n = self.node(node)?;
        let m = n.mechanism().ok_or_else(|| {
            Error::Graph(format!("node {node:?} is clamped; nothing to shift"))
        })?;
        let inv = match m.as_ref() {
            Mechanism::Invertible(inv) => inv,
            _ => {
                return Err(Error::Graph(format!(
                    "noise-shift interventions need an invertible mechanism at {node:?}"
                )))
            }
        };
        let shifted = Transform::Composition(vec![
            inv.flow.clone(),
            Transform::AffineNorm(AffineNorm {
                scale: 1.0,
                shift,
                bounds: BoundsKind::Singly,
            }),
        ]);
        let mut iv = Intervention::default();
        iv.targets.insert(
            node.to_string(),
            InterventionTarget::Mechanism {
                parents: n.parents.clone(),
                mechanism: Rc::new(Mechanism::Invertible(InvertibleMechanism {
                    flow: shifted,
                    noise: inv.noise.clone(),
                })),
            },
        );
        Ok(iv)
    }

    /// Per-node noise posterior given a complete observation; factorised
    /// across nodes given the observed parents.
    pub fn abduct(&self, obs: &Observation, rng: &mut Prng, s: usize) -> Result<NoisePosterior> {
        self.abduct_except(obs, rng, s, &BTreeSet::new())
    }

    fn abduct_except(
        &self,
        obs: &Observation,
        rng: &mut Prng,
        s: usize,
        skip: &BTreeSet<String>,
    ) -> Result<NoisePosterior> {
        self.check_complete(obs)?;
        let mut per_node = BTreeMap::new();
        for &i in &self.order {
            let node = &self.nodes[i];
            if skip.contains(&node.name) {
                continue;
            }
            let m = match &node.assignment {
                Assignment::Mechanism(m) => m,
                Assignment::Clamped(_) => continue,
            };
            let ctx = self.context_from(node, &obs.values)?;
            let post = m.abduct(obs.get(&node.name)?, ctx.as_ref(), rng, s)?;
            per_node.insert(node.name.clone(), post);
        }
        Ok(NoisePosterior { per_node, s })
    }

    /// Three-step counterfactual: abduct the noise, apply the intervention,
    /// and re-propagate in topological order reusing the abducted noise.
    /// Nodes whose value cannot change (no intervened ancestor in the
    /// modified graph) are returned unchanged.
    pub fn counterfactual(
        &self,
        obs: &Observation,
        iv: &Intervention,
        rng: &mut Prng,
        s: usize,
    ) -> Result<Counterfactuals> {
        self.check_complete(obs)?;
        let n = obs.len();
        // abduction is skipped entirely for atomically clamped nodes: their
        // noise is discarded by definition
        let skip: BTreeSet<String> = iv
            .targets
            .iter()
            .filter(|(_, t)| matches!(t, InterventionTarget::Constant(_)))
            .map(|(k, _)| k.clone())
            .collect();
        let posterior = self.abduct_except(obs, rng, s, &skip)?;
        let tilde = self.intervened(iv)?;

        // nodes whose value may differ from the observation
        let mut changed: BTreeSet<String> = iv.targets.keys().cloned().collect();
        for &i in &tilde.order {
            let node = &tilde.nodes[i];
            if changed.contains(&node.name) {
                continue;
            }
            if node.parents.iter().any(|p| changed.contains(p)) {
                changed.insert(node.name.clone());
            }
        }

        let mut rep_values: BTreeMap<String, Tensor> = BTreeMap::new();
        for &i in &tilde.order {
            let node = &tilde.nodes[i];
            let obs_value = obs.get(&node.name)?;
            if !changed.contains(&node.name) {
                rep_values.insert(node.name.clone(), repeat_rows(obs_value, s)?);
                continue;
            }
            let value = match &node.assignment {
                Assignment::Clamped(c) => {
                    let per_record = clamped_tensor(c, n, 1, &node.name)?;
                    repeat_rows(&per_record, s)?
                }
                Assignment::Mechanism(m) => {
                    // hats of parent values come from the original graph so
                    // children keep the conditioning scale they learned
                    let ctx_new = self.context_at_samples(node, &rep_values)?;
                    match posterior.per_node.get(&node.name) {
                        Some(NodePosterior::Exact(eps)) => {
                            m.sample(&repeat_rows(eps, s)?, ctx_new.as_ref())?
                        }
                        Some(NodePosterior::DiscreteExact { eps, .. }) => {
                            m.sample(eps, ctx_new.as_ref())?
                        }
                        Some(NodePosterior::Amortised { z, .. }) => {
                            let am = match m.as_ref() {
                                Mechanism::Amortised(am) => am,
                                _ => {
                                    return Err(Error::Mechanism(
                                        "amortised posterior on a non-amortised node".into(),
                                    ))
                                }
                            };
                            let orig_node = self.node(&node.name)?;
                            let ctx_old = self
                                .context_from(orig_node, &obs.values)?
                                .map(|c| repeat_rows(&c, s))
                                .transpose()?;
                            am.counterfactual_pixels(
                                obs_value,
                                z,
                                ctx_old.as_ref(),
                                ctx_new.as_ref(),
                                s,
                            )?
                        }
                        None => {
                            return Err(Error::Mechanism(format!(
                                "no abducted noise for node {:?}",
                                node.name
                            )))
                        }
                    }
                }
            };
            rep_values.insert(node.name.clone(), value);
        }

        let samples = Observation::new(rep_values)?;
        let mut mean_values = BTreeMap::new();
        for (name, t) in samples.iter() {
            mean_values.insert(name.clone(), mean_over_samples(t, n, s)?);
        }
        Ok(Counterfactuals {
            samples,
            mean: Observation::new(mean_values)?,
            s,
        })
    }

    /// Context for a node whose parent values are already at sample
    /// granularity, with hats from this graph's original mechanisms.
    fn context_at_samples(
        &self,
        node: &Node,
        values: &BTreeMap<String, Tensor>,
    ) -> Result<Option<Tensor>> {
        if node.parents.is_empty() {
            return Ok(None);
        }
        let mut parts = Vec::with_capacity(node.parents.len());
        for p in node.parents.iter() {
            let value = values
                .get(p)
                .ok_or_else(|| Error::Graph(format!("missing parent value {p:?}")))?;
            parts.push(self.normalise_value(p, value)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Some(Tensor::concat_last(&refs)?))
    }

    /// Normalised grid density p(target | evidence) by 1-D quadrature.
    /// Every involved node must be scalar with an exact likelihood, and the
    /// parents of each involved node must be pinned by the target or the
    /// evidence. Clamped nodes contribute a constant factor and are skipped.
    pub fn posterior_grid_1d(
        &self,
        target: &str,
        evidence: &BTreeMap<String, f64>,
        grid: GridSpec,
    ) -> Result<DensityTable> {
        let target_node = self.node(target)?;
        if evidence.contains_key(target) {
            return Err(Error::Graph(format!(
                "target {target:?} also appears in the evidence"
            )));
        }
        let mut involved: Vec<&Node> = vec![target_node];
        for name in evidence.keys() {
            involved.push(self.node(name)?);
        }
        for node in &involved {
            if let Assignment::Mechanism(m) = &node.assignment {
                if matches!(m.as_ref(), Mechanism::Amortised(_)) {
                    return Err(Error::Graph(format!(
                        "node {:?} is amortised; grid conditioning supports exact likelihoods only",
                        node.name
                    )));
                }
                for p in &node.parents {
                    if p != target && !evidence.contains_key(p) {
                        return Err(Error::Graph(format!(
                            "parent {p:?} of {:?} is neither the target nor evidence",
                            node.name
                        )));
                    }
                }
            }
        }
        let g = grid.points;
        let step = (grid.hi - grid.lo) / (g - 1) as f64;
        let xs: Vec<f64> = (0..g).map(|i| grid.lo + step * i as f64).collect();
        let mut logw = vec![0.0f64; g];
        let mut known: BTreeMap<String, Tensor> = BTreeMap::new();
        known.insert(target.to_string(), Tensor::new(&[g, 1], xs.clone())?);
        for (name, &v) in evidence {
            known.insert(name.clone(), Tensor::new(&[g, 1], vec![v; g])?);
        }
        for node in &involved {
            let m = match &node.assignment {
                Assignment::Mechanism(m) => m,
                Assignment::Clamped(_) => continue,
            };
            let ctx = self.context_from(node, &known)?;
            let x = known.get(&node.name).expect("involved values are known");
            let term = m.log_prob(x, ctx.as_ref())?.data();
            for (w, t) in logw.iter_mut().zip(term) {
                *w += t;
            }
        }
        let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !mx.is_finite() {
            return Err(Error::Graph("posterior weight vanished on the whole grid".into()));
        }
        let mut density: Vec<f64> = logw.iter().map(|w| (w - mx).exp()).collect();
        let mut mass = 0.0;
        for i in 0..g - 1 {
            mass += 0.5 * (density[i] + density[i + 1]) * step;
        }
        for d in density.iter_mut() {
            *d /= mass;
        }
        Ok(DensityTable { grid: xs, density })
    }
}

fn clamped_tensor(c: &[f64], n: usize, event_len: usize, name: &str) -> Result<Tensor> {
    if c.len() == event_len {
        let mut data = Vec::with_capacity(n * event_len);
        for _ in 0..n {
            data.extend_from_slice(c);
        }
        Tensor::new(&[n, event_len], data)
    } else if c.len() == n * event_len {
        Tensor::new(&[n, event_len], c.to_vec())
    } else {
        Err(Error::Graph(format!(
            "clamped value for {name:?} has {} values; expected {event_len} or {}",
            c.len(),
            n * event_len
        )))
    }
}

fn mean_over_samples(t: &Tensor, n: usize, s: usize) -> Result<Tensor> {
    let shape = t.shape();
    let d = shape[1];
    let data = t.data();
    let mut out = vec![0.0; n * d];
    for b in 0..n {
        for si in 0..s {
            let row = (b * s + si) * d;
            for c in 0..d {
                out[b * d + c] += data[row + c] / s as f64;
            }
        }
    }
    Tensor::new(&[n, d], out)
}

/// Kahn's algorithm; on failure, reports one concrete cycle path.
fn topological_order(nodes: &[Node], index: &BTreeMap<String, usize>) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indegree = vec![0usize; n];
    for (i, node) in nodes.iter().enumerate() {
        for p in &node.parents {
            children[index[p]].push(i);
            indegree[i] += 1;
        }
    }
    let mut queue: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    queue.sort();
    let mut order = Vec::with_capacity(n);
    let mut head = 0;
    while head < queue.len() {
        let i = queue[head];
        head += 1;
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                queue.push(c);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // walk parent links among the leftover nodes until a repeat shows up
    let leftover: Vec<usize> = (0..n).filter(|i| !order.contains(i)).collect();
    let start = leftover[0];
    let mut path = vec![start];
    let mut seen = BTreeSet::new();
    seen.insert(start);
    let mut cur = start;
    loop {
        let next = nodes[cur]
            .parents
            .iter()
            .map(|p| index[p])
            .find(|i| leftover.contains(i))
            .expect("cyclic node must have a cyclic parent");
        path.push(next);
        if !seen.insert(next) {
            break;
        }
        cur = next;
    }
    let names: Vec<String> = path.iter().rev().map(|&i| nodes[i].name.clone()).collect();
    Err(Error::Cycle(names.join(" -> ")))
}
