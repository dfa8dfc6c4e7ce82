//! Metrics and reports: association tables, interventional density
//! comparison, covariate fidelity, and counterfactual error benchmarks.

use crate::distributions::Prng;
use crate::error::{Error, Result};
use crate::mechanisms::Mechanism;
use crate::numerics::Tensor;
use crate::scm::{Intervention, Observation, Scm};
use crate::synthdata::{
    self, measure_intensity, measure_thickness, RefIntervention, SyntheticRecord, IMAGE_LEN,
};
use std::collections::BTreeMap;

/// Mean absolute error between two equally shaped batches of images.
pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mae",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (da, db) = (a.data(), b.data());
    if da.is_empty() {
        return Err(Error::Evaluation("mae of empty batches".into()));
    }
    Ok(da.iter().zip(&db).map(|(x, y)| (x - y).abs()).sum::<f64>() / da.len() as f64)
}

/// Two-sample Kolmogorov-Smirnov statistic: the sup-norm distance between
/// empirical CDFs.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Evaluation("ks_distance of an empty sample".into()));
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|p, q| p.partial_cmp(q).unwrap());
    xb.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut sup: f64 = 0.0;
    while ia < xa.len() && ib < xb.len() {
        // advance both CDFs past the smaller value, including ties, before
        // measuring the gap, so ks(a, a) is exactly zero
        let v = xa[ia].min(xb[ib]);
        while ia < xa.len() && xa[ia] == v {
            ia += 1;
        }
        while ib < xb.len() && xb[ib] == v {
            ib += 1;
        }
        sup = sup.max((ia as f64 / na - ib as f64 / nb).abs());
    }
    Ok(sup)
}

/// Sliced KS for 2-D samples: the mean 1-D KS over `dirs` fixed-seed random
/// unit directions.
pub fn sliced_ks_2d(a: &[(f64, f64)], b: &[(f64, f64)], dirs: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Evaluation("sliced ks of an empty sample".into()));
    }
    let mut rng = Prng::substream(seed, 13 << 40);
    let mut total = 0.0;
    for _ in 0..dirs {
        let angle = rng.uniform_in(0.0, std::f64::consts::PI);
        let (c, s) = (angle.cos(), angle.sin());
        let pa: Vec<f64> = a.iter().map(|(x, y)| c * x + s * y).collect();
        let pb: Vec<f64> = b.iter().map(|(x, y)| c * x + s * y).collect();
        total += ks_distance(&pa, &pb)?;
    }
    Ok(total / dirs as f64)
}

/// 2-D histogram table for density comparisons, as (x_lo, y_lo, count) rows.
pub struct Histogram2d {
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    pub counts: Vec<Vec<u64>>,
}

pub fn histogram_2d(samples: &[(f64, f64)], bins: usize, x_range: (f64, f64), y_range: (f64, f64)) -> Histogram2d {
    let xe: Vec<f64> = (0..=bins)
        .map(|k| x_range.0 + (x_range.1 - x_range.0) * k as f64 / bins as f64)
        .collect();
    let ye: Vec<f64> = (0..=bins)
        .map(|k| y_range.0 + (y_range.1 - y_range.0) * k as f64 / bins as f64)
        .collect();
    let mut counts = vec![vec![0u64; bins]; bins];
    for &(x, y) in samples {
        if x < x_range.0 || x >= x_range.1 || y < y_range.0 || y >= y_range.1 {
            continue;
        }
        let bx = ((x - x_range.0) / (x_range.1 - x_range.0) * bins as f64) as usize;
        let by = ((y - y_range.0) / (y_range.1 - y_range.0) * bins as f64) as usize;
        counts[bx.min(bins - 1)][by.min(bins - 1)] += 1;
    }
    Histogram2d {
        x_edges: xe,
        y_edges: ye,
        counts,
    }
}

impl Histogram2d {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_lo,y_lo,count\n");
        for (bx, row) in self.counts.iter().enumerate() {
            for (by, c) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", self.x_edges[bx], self.y_edges[by], c));
            }
        }
        out
    }
}

/// One row of the association report.
#[derive(Debug, Clone)]
pub struct AssociationRow {
    pub model: String,
    /// Sum over nodes of per-node terms (a lower bound at amortised nodes).
    pub joint_lower_bound: f64,
    /// The image node's conditional lower bound.
    pub image_cond_lower_bound: f64,
    pub log_p_t: f64,
    /// log p(i | t) for graphs with the t -> i edge, log p(i) otherwise.
    pub log_p_i: f64,
    pub reconstruction_mae: f64,
    /// joint - (image + t + i) terms; zero up to MC error by construction.
    pub additivity_gap: f64,
}

#[derive(Debug, Clone, Default)]
pub struct AssociationReport {
    pub rows: Vec<AssociationRow>,
}

impl AssociationReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("model,joint_lb,image_cond_lb,log_p_t,log_p_i,recon_mae,additivity_gap\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.model,
                r.joint_lower_bound,
                r.image_cond_lower_bound,
                r.log_p_t,
                r.log_p_i,
                r.reconstruction_mae,
                r.additivity_gap
            ));
        }
        out
    }
}

/// Evaluate each model's per-node terms on a held-out set, with the
/// reconstruction error estimated from `recon_samples` posterior draws.
pub fn association_report(
    models: &[(String, &Scm)],
    test: &Observation,
    particles: usize,
    recon_samples: usize,
    seed: u64,
) -> Result<AssociationReport> {
    let mut report = AssociationReport::default();
    for (name, scm) in models {
        let mut rng = Prng::substream(seed, 21 << 40);
        let per_node = scm.per_node_objective(test, particles, &mut rng)?;
        let joint: f64 = per_node.values().sum();
        let image_term = *per_node.get("x").ok_or_else(|| {
            Error::Evaluation(format!("model {name} has no image node named x"))
        })?;
        let t_term = *per_node
            .get("t")
            .ok_or_else(|| Error::Evaluation(format!("model {name} has no node t")))?;
        let i_term = *per_node
            .get("i")
            .ok_or_else(|| Error::Evaluation(format!("model {name} has no node i")))?;
        let recon = reconstruction_mae(scm, test, recon_samples, &mut rng)?;
        report.rows.push(AssociationRow {
            model: name.clone(),
            joint_lower_bound: joint,
            image_cond_lower_bound: image_term,
            log_p_t: t_term,
            log_p_i: i_term,
            reconstruction_mae: recon,
            additivity_gap: joint - image_term - t_term - i_term,
        });
    }
    Ok(report)
}

/// Monte-Carlo reconstruction error of the image node over a test set,
/// processed in record chunks to bound memory.
pub fn reconstruction_mae(
    scm: &Scm,
    test: &Observation,
    samples: usize,
    rng: &mut Prng,
) -> Result<f64> {
    let node = scm.node("x")?;
    let mech = node
        .mechanism()
        .ok_or_else(|| Error::Evaluation("image node is clamped".into()))?;
    let am = match mech.as_ref() {
        Mechanism::Amortised(am) => am,
        _ => return Err(Error::Evaluation("image node is not amortised".into())),
    };
    let n = test.len();
    let chunk = 64;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let part = test.rows(&idx)?;
        let x = part.get("x")?;
        let ctx = context_for_image(scm, &part)?;
        let recon = am.reconstruct(x, ctx.as_ref(), rng, samples)?;
        let (xd, rd) = (x.data(), recon.data());
        total += xd.iter().zip(&rd).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += xd.len();
        start += chunk;
    }
    Ok(total / count as f64)
}

fn context_for_image(scm: &Scm, obs: &Observation) -> Result<Option<Tensor>> {
    let node = scm.node("x")?;
    if node.parents.is_empty() {
        return Ok(None);
    }
    let mut parts = Vec::new();
    for p in &node.parents {
        parts.push(scm.normalise_value(p, obs.get(p)?)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Some(Tensor::concat_last(&refs)?))
}

/// Conditional image sampling at covariate targets, measured back with the
/// dataset's measurement operators.
#[derive(Debug, Clone)]
pub struct FidelityPoint {
    pub target_t: f64,
    pub target_i: f64,
    pub measured_t: f64,
    pub measured_i: f64,
}

pub fn covariate_fidelity(
    scm: &Scm,
    targets: &[(f64, f64)],
    per_target: usize,
    seed: u64,
) -> Result<Vec<FidelityPoint>> {
    let node = scm.node("x")?;
    let mech = node
        .mechanism()
        .ok_or_else(|| Error::Evaluation("image node is clamped".into()))?;
    let mut rng = Prng::substream(seed, 23 << 40);
    let mut out = Vec::new();
    for &(tt, ti) in targets {
        let mut values = BTreeMap::new();
        values.insert("t".to_string(), Tensor::new(&[per_target, 1], vec![tt; per_target])?);
        values.insert("i".to_string(), Tensor::new(&[per_target, 1], vec![ti; per_target])?);
        let obs = Observation::new(values)?;
        let ctx = context_for_image(scm, &obs)?;
        let noise = mech.sample_noise(&mut rng, per_target)?;
        let images = mech.sample(&noise, ctx.as_ref())?;
        let data = images.data();
        let mut mt = 0.0;
        let mut mi = 0.0;
        for k in 0..per_target {
            let img = &data[k * IMAGE_LEN..(k + 1) * IMAGE_LEN];
            mt += measure_thickness(img)?;
            mi += measure_intensity(img)?;
        }
        out.push(FidelityPoint {
            target_t: tt,
            target_i: ti,
            measured_t: mt / per_target as f64,
            measured_i: mi / per_target as f64,
        });
    }
    Ok(out)
}

pub fn fidelity_csv(points: &[FidelityPoint]) -> String {
    let mut out = String::from("target_t,target_i,measured_t,measured_i\n");
    for p in points {
        out.push_str(&format!(
            "{:.6},{:.6},{:.6},{:.6}\n",
            p.target_t, p.target_i, p.measured_t, p.measured_i
        ));
    }
    out
}

/// A model that can answer image counterfactual queries for benchmark
/// records. Implemented by trained graphs and by the exact generator.
pub trait CounterfactualModel {
    fn name(&self) -> String;
    /// Mean counterfactual image for one record under do(t := t + shift).
    fn counterfactual_image(
        &self,
        record: &SyntheticRecord,
        shift: f64,
        s: usize,
        rng: &mut Prng,
    ) -> Result<Vec<f64>>;
}

/// A trained graph over (t, i, x).
pub struct TrainedModel<'a> {
    pub label: String,
    pub scm: &'a Scm,
}

impl CounterfactualModel for TrainedModel<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn counterfactual_image(
        &self,
        record: &SyntheticRecord,
        shift: f64,
        s: usize,
        rng: &mut Prng,
    ) -> Result<Vec<f64>> {
        let obs = synthdata::records_to_observation(std::slice::from_ref(record), true)?;
        let iv = if shift == 0.0 {
            Intervention::empty()
        } else {
            Intervention::constant("t", record.t + shift)
        };
        let cf = self.scm.counterfactual(&obs, &iv, rng, s)?;
        Ok(cf.mean.get("x")?.data())
    }
}

/// The generator's own law used as a model: scalar counterfactuals through
/// the encoded exact graph, image through the renderer.
pub struct ExactModel {
    scm: Scm,
}

impl ExactModel {
    pub fn new() -> Self {
        ExactModel {
            scm: synthdata::true_scm(),
        }
    }

    pub fn scm(&self) -> &Scm {
        &self.scm
    }
}

impl Default for ExactModel {
    fn default() -> Self {
        Self::new()
    }
}

impl CounterfactualModel for ExactModel {
    fn name(&self) -> String {
        "exact".into()
    }

    fn counterfactual_image(
        &self,
        record: &SyntheticRecord,
        shift: f64,
        s: usize,
        rng: &mut Prng,
    ) -> Result<Vec<f64>> {
        if shift == 0.0 {
            return Ok(record.image.clone());
        }
        let obs = synthdata::records_to_observation(std::slice::from_ref(record), false)?;
        let iv = Intervention::constant("t", record.t + shift);
        let cf = self.scm.counterfactual(&obs, &iv, rng, s)?;
        let t_new = cf.mean.get("t")?.item();
        let i_new = cf.mean.get("i")?.item();
        synthdata::render(&record.identity, t_new, i_new)
    }
}

/// Per-model MAE against rendered reference counterfactuals under
/// do(t := t + shift).
pub fn counterfactual_mae_benchmark(
    models: &[&dyn CounterfactualModel],
    records: &[SyntheticRecord],
    shift: f64,
    s: usize,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    if records.is_empty() {
        return Err(Error::Evaluation("no benchmark records".into()));
    }
    // reference images once
    let mut references = Vec::with_capacity(records.len());
    for r in records {
        references.push(reference_image(r, shift)?);
    }
    let mut out = Vec::new();
    for model in models {
        let mut rng = Prng::substream(seed, 29 << 40);
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, reference) in records.iter().zip(&references) {
            let img = model.counterfactual_image(r, shift, s, &mut rng)?;
            total += img
                .iter()
                .zip(reference)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            count += img.len();
        }
        out.push((model.name(), total / count as f64));
    }
    Ok(out)
}

fn reference_image(record: &SyntheticRecord, shift: f64) -> Result<Vec<f64>> {
    if shift == 0.0 {
        return Ok(record.image.clone());
    }
    let cf = synthdata::reference_counterfactual(record, RefIntervention::Thickness(record.t + shift))?;
    Ok(cf.image)
}
