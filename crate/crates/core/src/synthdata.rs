//! Synthetic stroke dataset with a known causal structure.
//!
//! Generates (thickness, intensity, image) triples where thickness causes
//! intensity and both render into a 28x28 anti-aliased straight stroke.
//! Because the renderer is deterministic and exactly re-runnable, reference
//! counterfactuals are available for every record, which real datasets never
//! provide.
//!
//! The scalar laws are
//!   t = 0.5 + eps_t,                      eps_t ~ Gamma(10, 5)
//!   i = 191 * sigmoid(0.5*eps_i + 2t - 5) + 64,  eps_i ~ N(0, 1)
//! and the image sets the stroke's thickness to t (in px) and its masked
//! median intensity to i.

use crate::distributions::{Distribution, Prng};
use crate::error::{Error, Result};
use crate::mechanisms::{InvertibleMechanism, Mechanism};
use crate::numerics::Tensor;
use crate::scm::{Node, Observation, Scm};
use crate::transforms::{AffineNorm, BoundsKind, ConditionalAffine, ContextNetwork, Transform};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CANVAS: usize = 28;
pub const IMAGE_LEN: usize = CANVAS * CANVAS;
pub const STROKE_LEN: f64 = 20.0;
pub const SHAPE_CLASSES: u8 = 10;
pub const OFFSET_BOUND: f64 = 2.0;
/// Mask extraction threshold as a fraction of the image maximum.
pub const MASK_REL_THRESHOLD: f64 = 0.5;
/// Renderer thickness range; generation redraws the (~3e-5 mass) gamma tail
/// beyond it.
pub const THICKNESS_RANGE: (f64, f64) = (0.5, 6.0);
pub const INTENSITY_RANGE: (f64, f64) = (64.0, 255.0);

/// Scalar laws of the generator.
pub struct TrueScmParams;

impl TrueScmParams {
    pub const T_SHIFT: f64 = 0.5;
    pub const GAMMA_SHAPE: f64 = 10.0;
    pub const GAMMA_RATE: f64 = 5.0;
    pub const I_SCALE: f64 = 191.0;
    pub const I_SHIFT: f64 = 64.0;
    pub const EPS_I_SCALE: f64 = 0.5;
    pub const T_WEIGHT: f64 = 2.0;
    pub const T_BIAS: f64 = -5.0;

    pub fn intensity(t: f64, eps_i: f64) -> f64 {
        let w = Self::EPS_I_SCALE * eps_i + Self::T_WEIGHT * t + Self::T_BIAS;
        Self::I_SCALE / (1.0 + (-w).exp()) + Self::I_SHIFT
    }
}

/// Stroke identity: the non-causal content of the image (plays the role of
/// the digit identity).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrokeIdentity {
    /// One of ten straight-segment angles.
    pub class: u8,
    pub offset_x: f64,
    pub offset_y: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticRecord {
    pub index: u64,
    pub t: f64,
    pub i: f64,
    pub eps_t: f64,
    pub eps_i: f64,
    pub identity: StrokeIdentity,
    pub image: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Render an anti-aliased straight stroke of length 20 px and width `t` px
/// whose masked median intensity equals `i`; background 0, clamped to
/// [0, 255].
pub fn render(identity: &StrokeIdentity, t: f64, i: f64) -> Result<Vec<f64>> {
    if !(THICKNESS_RANGE.0..=THICKNESS_RANGE.1).contains(&t) {
        return Err(Error::Render(format!(
            "thickness {t} outside supported range {THICKNESS_RANGE:?}"
        )));
    }
    if !(INTENSITY_RANGE.0..=INTENSITY_RANGE.1).contains(&i) {
        return Err(Error::Render(format!(
            "intensity {i} outside supported range {INTENSITY_RANGE:?}"
        )));
    }
    if identity.class >= SHAPE_CLASSES {
        return Err(Error::Render(format!(
            "shape class {} out of range 0..{SHAPE_CLASSES}",
            identity.class
        )));
    }
    if identity.offset_x.abs() > OFFSET_BOUND || identity.offset_y.abs() > OFFSET_BOUND {
        return Err(Error::Render("offset outside canvas-safe bound".into()));
    }
    let coverage = coverage_field(identity, t);
    // The stroke body renders flat at exactly i, so the masked median is i
    // for every geometry and nothing can clamp. Sub-threshold coverage
    // becomes a proportional skirt strictly below i/2: it carries the
    // sub-pixel edge information without entering the mask, whose boundary
    // stays at the 50% coverage crossing (perp = t/2).
    let cov_max = coverage.iter().cloned().fold(0.0f64, f64::max);
    if cov_max <= 0.0 {
        return Err(Error::Render("stroke produced an empty mask".into()));
    }
    // the 50% coverage crossing marks the true stroke boundary; only
    // sub-pixel strokes, which never reach it, fall back to a relative cut
    let pivot = if cov_max > 0.5 { 0.5 } else { MASK_REL_THRESHOLD * cov_max };
    Ok(coverage
        .into_iter()
        .map(|c| {
            let v = if c > pivot { i } else { i * c / (2.0 * pivot) };
            v.clamp(0.0, 255.0)
        })
        .collect())
}

/// Keeps every class a few degrees off the pixel axes: the stroke boundary
/// then sweeps across lattice rows along its length, so the binary mask
/// area responds continuously to sub-pixel thickness changes instead of
/// quantising.
const ANGLE_DITHER_RAD: f64 = 0.06;

/// Signed-distance coverage with a half-pixel linear edge on each side of
/// the stroke rectangle; the 50% crossing sits exactly on the true boundary.
fn coverage_field(identity: &StrokeIdentity, t: f64) -> Vec<f64> {
    const AA: f64 = 0.5;
    let angle =
        identity.class as f64 * std::f64::consts::PI / SHAPE_CLASSES as f64 + ANGLE_DITHER_RAD;
    let (dx, dy) = (angle.cos(), angle.sin());
    let centre = (
        (CANVAS as f64 - 1.0) / 2.0 + identity.offset_x,
        (CANVAS as f64 - 1.0) / 2.0 + identity.offset_y,
    );
    let edge = |v: f64| (v / AA + 0.5).clamp(0.0, 1.0);
    let mut out = Vec::with_capacity(IMAGE_LEN);
    for row in 0..CANVAS {
        for col in 0..CANVAS {
            let rx = col as f64 - centre.0;
            let ry = row as f64 - centre.1;
            let along = (rx * dx + ry * dy).abs();
            let perp = (-rx * dy + ry * dx).abs();
            out.push(edge(STROKE_LEN / 2.0 - along) * edge(t / 2.0 - perp));
        }
    }
    out
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn extract_mask(image: &[f64]) -> Result<Vec<f64>> {
    let max = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::Measure("empty mask: image has no positive pixels".into()));
    }
    let threshold = MASK_REL_THRESHOLD * max;
    let masked: Vec<f64> = image.iter().cloned().filter(|&v| v > threshold).collect();
    if masked.is_empty() {
        return Err(Error::Measure("empty mask above threshold".into()));
    }
    Ok(masked)
}

/// Median intensity of pixels within the extracted binary mask.
pub fn measure_intensity(image: &[f64]) -> Result<f64> {
    let mut masked = extract_mask(image)?;
    masked.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(median_of_sorted(&masked))
}

/// Mask area divided by the stroke length; exact for straight strokes.
pub fn measure_thickness(image: &[f64]) -> Result<f64> {
    let masked = extract_mask(image)?;
    Ok(masked.len() as f64 / STROKE_LEN)
}

/// Deterministic per-record generation: record `index` of a split draws from
/// its own RNG stream, so any subset regenerates independently.
pub fn generate_record(seed: u64, split: Split, index: u64) -> SyntheticRecord {
    let mut rng = Prng::substream(seed, (split.tag() << 48) | index);
    loop {
        // redraw the far gamma tail that the renderer cannot express
        let eps_t = loop {
            let e = rng.gamma(TrueScmParams::GAMMA_SHAPE, TrueScmParams::GAMMA_RATE);
            if TrueScmParams::T_SHIFT + e <= THICKNESS_RANGE.1 {
                break e;
            }
        };
        let t = TrueScmParams::T_SHIFT + eps_t;
        let eps_i = rng.standard_normal();
        let i = TrueScmParams::intensity(t, eps_i);
        let identity = StrokeIdentity {
            class: rng.usize_below(SHAPE_CLASSES as usize) as u8,
            offset_x: rng.uniform_in(-OFFSET_BOUND, OFFSET_BOUND),
            offset_y: rng.uniform_in(-OFFSET_BOUND, OFFSET_BOUND),
        };
        // a hair above the minimum thickness, a pathological lattice phase
        // can zero out the whole stroke; redraw the record
        match render(&identity, t, i) {
            Ok(image) => {
                return SyntheticRecord {
                    index,
                    t,
                    i,
                    eps_t,
                    eps_i,
                    identity,
                    image,
                }
            }
            Err(_) => continue,
        }
    }
}

pub fn generate_records(seed: u64, split: Split, range: std::ops::Range<u64>) -> Vec<SyntheticRecord> {
    range.map(|k| generate_record(seed, split, k)).collect()
}

/// `n` i.i.d. training records under `seed`.
pub fn generate_dataset(n: u64, seed: u64) -> Vec<SyntheticRecord> {
    generate_records(seed, Split::Train, 0..n)
}

/// Intervention kinds the reference oracle answers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RefIntervention {
    Thickness(f64),
    Intensity(f64),
}

/// Ground-truth counterfactual: reuse the stored noise and identity, apply
/// the scalar law under the intervention, and re-render.
pub fn reference_counterfactual(
    record: &SyntheticRecord,
    iv: RefIntervention,
) -> Result<SyntheticRecord> {
    let mut out = record.clone();
    match iv {
        RefIntervention::Thickness(t_new) => {
            out.t = t_new;
            out.i = TrueScmParams::intensity(t_new, record.eps_i);
            out.image = render(&record.identity, out.t, out.i)?;
        }
        RefIntervention::Intensity(i_new) => {
            out.i = i_new;
            out.image = render(&record.identity, record.t, i_new)?;
        }
    }
    Ok(out)
}

/// Scalar interventions for population-level (interventional) comparisons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleIntervention {
    Observational,
    /// do(t := f_T(eps_T) + c): resample noise, shift the mechanism.
    ThicknessShift(f64),
    ThicknessConst(f64),
    IntensityConst(f64),
}

/// Samples of (t, i) from the true generator under an intervention.
pub fn oracle_scalar_samples(iv: OracleIntervention, n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = Prng::substream(seed, 7 << 48);
    (0..n)
        .map(|_| {
            let eps_t = loop {
                let e = rng.gamma(TrueScmParams::GAMMA_SHAPE, TrueScmParams::GAMMA_RATE);
                if TrueScmParams::T_SHIFT + e <= THICKNESS_RANGE.1 {
                    break e;
                }
            };
            let mut t = TrueScmParams::T_SHIFT + eps_t;
            match iv {
                OracleIntervention::ThicknessShift(c) => t += c,
                OracleIntervention::ThicknessConst(c) => t = c,
                _ => {}
            }
            let eps_i = rng.standard_normal();
            let i = match iv {
                OracleIntervention::IntensityConst(c) => c,
                _ => TrueScmParams::intensity(t, eps_i),
            };
            (t, i)
        })
        .collect()
}

/// The generator's scalar laws encoded directly as an invertible-mechanism
/// graph: t = 0.5 + eps over a Gamma base, i through the exact conditional
/// sigmoid law with a linear context on raw t.
pub fn true_scm() -> Scm {
    let t_mech = Mechanism::Invertible(InvertibleMechanism {
        flow: Transform::AffineNorm(AffineNorm {
            scale: 1.0,
            shift: TrueScmParams::T_SHIFT,
            bounds: BoundsKind::Singly,
        }),
        noise: Distribution::Gamma {
            shape: TrueScmParams::GAMMA_SHAPE,
            rate: TrueScmParams::GAMMA_RATE,
        },
    });
    // the t node's fixed head is the affine itself, so children condition on
    // hat(t) = t - 0.5; fold that into the context weights
    let net = ContextNetwork::from_weights(
        vec![vec![0.0, TrueScmParams::T_WEIGHT]],
        vec![
            TrueScmParams::EPS_I_SCALE.ln(),
            TrueScmParams::T_BIAS + TrueScmParams::T_WEIGHT * TrueScmParams::T_SHIFT,
        ],
        "true_i_ctx",
    )
    .expect("static weights");
    let i_mech = Mechanism::Invertible(InvertibleMechanism {
        flow: Transform::Composition(vec![
            Transform::ConditionalAffine(ConditionalAffine::new(net, 1).expect("static net")),
            Transform::Sigmoid,
            Transform::AffineNorm(AffineNorm {
                scale: TrueScmParams::I_SCALE,
                shift: TrueScmParams::I_SHIFT,
                bounds: BoundsKind::Doubly,
            }),
        ]),
        noise: Distribution::StandardNormal,
    });
    Scm::new(
        "true-scalar",
        vec![Node::new("t", &[], t_mech), Node::new("i", &["t"], i_mech)],
    )
    .expect("static graph is valid")
}

/// Records as an observation map (`t`, `i` as `[n,1]`, `x` as `[n,784]`).
pub fn records_to_observation(records: &[SyntheticRecord], with_images: bool) -> Result<Observation> {
    let n = records.len();
    let mut values = BTreeMap::new();
    values.insert(
        "t".to_string(),
        Tensor::new(&[n, 1], records.iter().map(|r| r.t).collect())?,
    );
    values.insert(
        "i".to_string(),
        Tensor::new(&[n, 1], records.iter().map(|r| r.i).collect())?,
    );
    if with_images {
        let mut pixels = Vec::with_capacity(n * IMAGE_LEN);
        for r in records {
            pixels.extend_from_slice(&r.image);
        }
        values.insert("x".to_string(), Tensor::new(&[n, IMAGE_LEN], pixels)?);
    }
    Observation::new(values)
}

// ----------------------------------------------------------------------
// dataset files: covariate CSV + little-endian f32 image blob with a JSON
// sidecar header
// ----------------------------------------------------------------------

pub const COVARIATE_HEADER: &str = "index,t,i,eps_t,eps_i,shape_class,offset_x,offset_y";

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ImageHeader {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Mask binarisation threshold used by the measurement operations, as a
    /// fraction of the image maximum.
    pub mask_threshold_str: String,
}

impl ImageHeader {
    fn new(count: usize) -> Self {
        ImageHeader {
            count,
            height: CANVAS,
            width: CANVAS,
            mask_threshold_str: format!("{MASK_REL_THRESHOLD}"),
        }
    }
}

/// Covariate row as stored on disk (images live in the blob).
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateRow {
    pub index: u64,
    pub t: f64,
    pub i: f64,
    pub eps_t: f64,
    pub eps_i: f64,
    pub identity: StrokeIdentity,
}

impl From<&SyntheticRecord> for CovariateRow {
    fn from(r: &SyntheticRecord) -> Self {
        CovariateRow {
            index: r.index,
            t: r.t,
            i: r.i,
            eps_t: r.eps_t,
            eps_i: r.eps_i,
            identity: r.identity,
        }
    }
}

pub fn write_covariates_csv(path: &Path, rows: &[CovariateRow]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 64);
    out.push_str(COVARIATE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.index,
            r.t,
            r.i,
            r.eps_t,
            r.eps_i,
            r.identity.class,
            r.identity.offset_x,
            r.identity.offset_y
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_covariates_csv(path: &Path) -> Result<Vec<CovariateRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == COVARIATE_HEADER => {}
        other => {
            return Err(Error::Config(format!(
                "covariate file {path:?} has header {other:?}, expected {COVARIATE_HEADER:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Config(format!(
                "covariate file {path:?} line {}: expected 8 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|e| {
                Error::Config(format!(
                    "covariate file {path:?} line {}: bad {what}: {e}",
                    lineno + 2
                ))
            })
        };
        rows.push(CovariateRow {
            index: parse(fields[0], "index")? as u64,
            t: parse(fields[1], "t")?,
            i: parse(fields[2], "i")?,
            eps_t: parse(fields[3], "eps_t")?,
            eps_i: parse(fields[4], "eps_i")?,
            identity: StrokeIdentity {
                class: parse(fields[5], "shape_class")? as u8,
                offset_x: parse(fields[6], "offset_x")?,
                offset_y: parse(fields[7], "offset_y")?,
            },
        });
    }
    Ok(rows)
}

/// Write images as a flat little-endian f32 blob plus a JSON header. Paths
/// are `<stem>.bin` and `<stem>.json`.
pub fn write_images(stem: &Path, images: &[Vec<f64>]) -> Result<()> {
    let header = ImageHeader::new(images.len());
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(stem.with_extension("bin"))?);
    for image in images {
        for &v in image {
            file.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn read_images(stem: &Path) -> Result<Vec<Vec<f64>>> {
    let header: ImageHeader =
        serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
    let len = header.height * header.width;
    let mut bytes = Vec::new();
    std::fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut bytes)?;
    if bytes.len() != header.count * len * 4 {
        return Err(Error::Config(format!(
            "image blob {:?} has {} bytes; header promises {}",
            stem.with_extension("bin"),
            bytes.len(),
            header.count * len * 4
        )));
    }
    let mut images = Vec::with_capacity(header.count);
    for k in 0..header.count {
        let mut img = Vec::with_capacity(len);
        for p in 0..len {
            let at = (k * len + p) * 4;
            img.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64);
        }
        images.push(img);
    }
    Ok(images)
}

/// Write one split (covariates.csv + images.bin/json) into a directory.
pub fn write_split(dir: &Path, records: &[SyntheticRecord]) -> Result<()> {
    let mut writer = SplitWriter::create(dir)?;
    writer.append(records)?;
    writer.finish()
}

/// Incremental split writer so large datasets never sit in memory whole.
pub struct SplitWriter {
    dir: std::path::PathBuf,
    rows: Vec<CovariateRow>,
    blob: std::io::BufWriter<std::fs::File>,
    count: usize,
}

impl SplitWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let blob = std::io::BufWriter::new(std::fs::File::create(dir.join("images.bin"))?);
        Ok(SplitWriter {
            dir: dir.to_path_buf(),
            rows: Vec::new(),
            blob,
            count: 0,
        })
    }

    pub fn append(&mut self, records: &[SyntheticRecord]) -> Result<()> {
        for r in records {
            self.rows.push(CovariateRow::from(r));
            for &v in &r.image {
                self.blob.write_all(&(v as f32).to_le_bytes())?;
            }
            self.count += 1;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.blob.flush()?;
        write_covariates_csv(&self.dir.join("covariates.csv"), &self.rows)?;
        let header = ImageHeader::new(self.count);
        std::fs::write(
            self.dir.join("images.json"),
            serde_json::to_string_pretty(&header)?,
        )?;
        Ok(())
    }
}

/// Load a split back into an observation plus the raw covariate rows.
pub fn read_split(dir: &Path, with_images: bool) -> Result<(Observation, Vec<CovariateRow>)> {
    let rows = read_covariates_csv(&dir.join("covariates.csv"))?;
    let n = rows.len();
    let mut values = BTreeMap::new();
    values.insert(
        "t".to_string(),
        Tensor::new(&[n, 1], rows.iter().map(|r| r.t).collect())?,
    );
    values.insert(
        "i".to_string(),
        Tensor::new(&[n, 1], rows.iter().map(|r| r.i).collect())?,
    );
    if with_images {
        let images = read_images(&dir.join("images"))?;
        if images.len() != n {
            return Err(Error::Config(format!(
                "{dir:?}: {n} covariate rows but {} images",
                images.len()
            )));
        }
        let mut pixels = Vec::with_capacity(n * IMAGE_LEN);
        for img in &images {
            pixels.extend_from_slice(img);
        }
        values.insert("x".to_string(), Tensor::new(&[n, IMAGE_LEN], pixels)?);
    }
    Ok((Observation::new(values)?, rows))
}
