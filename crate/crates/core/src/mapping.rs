//! Semantic sliders: a linear map between human-readable body attributes
//! and shape coefficients.
//!
//! Attributes are measured on the T-pose mesh (height, weight from volume,
//! and three convex-hull girths). Muscularity has no geometric observable;
//! it rides through the map as a score that is recovered by projecting β
//! onto the map's muscularity column.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::body::{BodyModel, BodyModelError, ShapeParams};
use crate::measure::{circumference, mesh_volume, vertical_range, MeasureError};

/// Attribute labels in canonical order.
pub const ATTRIBUTE_NAMES: [&str; 6] = ["height", "weight", "chest", "waist", "hips", "muscularity"];

/// Near-water average body density, kg/m³.
pub const DEFAULT_DENSITY: f64 = 985.0;
pub const DEFAULT_RIDGE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum MappingError {
    #[error(transparent)]
    Body(#[from] BodyModelError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("need at least {needed} samples to fit {attributes} attributes, got {got}")]
    TooFewSamples { needed: usize, got: usize, attributes: usize },
    #[error("attribute system is singular at ridge lambda {lambda}; use a ridge lambda > 0")]
    Singular { lambda: f64 },
    #[error("ridge lambda must be finite and >= 0, got {0}")]
    BadLambda(f64),
    #[error("invalid attribute map: {0}")]
    InvalidMap(String),
    #[error("invalid edit `{0}`; expected name=value, name=+delta or name=-delta")]
    BadEdit(String),
}

pub type Result<T, E = MappingError> = std::result::Result<T, E>;

/// Named body attributes. Lengths in meters, weight in kilograms,
/// muscularity a score in [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttributeVector {
    pub height: f64,
    pub weight: f64,
    pub chest: f64,
    pub waist: f64,
    pub hips: f64,
    #[serde(default)]
    pub muscularity: f64,
}

impl AttributeVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "height" => self.height,
            "weight" => self.weight,
            "chest" => self.chest,
            "waist" => self.waist,
            "hips" => self.hips,
            "muscularity" => self.muscularity,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = match name {
            "height" => &mut self.height,
            "weight" => &mut self.weight,
            "chest" => &mut self.chest,
            "waist" => &mut self.waist,
            "hips" => &mut self.hips,
            "muscularity" => &mut self.muscularity,
            _ => return Err(MappingError::UnknownAttribute(name.into())),
        };
        *slot = value;
        Ok(())
    }
}

/// How attributes are read off a mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementConfig {
    /// kg/m³
    pub density: f64,
    pub chest_fraction: f64,
    pub waist_fraction: f64,
    pub hips_fraction: f64,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        Self { density: DEFAULT_DENSITY, chest_fraction: 0.72, waist_fraction: 0.62, hips_fraction: 0.52 }
    }
}

/// Measures the T-pose body for `beta`. Muscularity is always 0 here.
pub fn measure(model: &BodyModel, beta: &ShapeParams, config: &MeasurementConfig) -> Result<AttributeVector> {
    let mesh = model.shaped_template(beta)?;
    let (lo, hi) = vertical_range(&mesh).ok_or(MeasureError::NoExtent)?;
    let volume = mesh_volume(&mesh)?;
    Ok(AttributeVector {
        height: hi - lo,
        weight: volume * config.density,
        chest: circumference(&mesh, config.chest_fraction)?,
        waist: circumference(&mesh, config.waist_fraction)?,
        hips: circumference(&mesh, config.hips_fraction)?,
        muscularity: 0.0,
    })
}

/// One (β, attributes) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSample {
    pub beta: ShapeParams,
    pub attributes: AttributeVector,
}

/// Measures `count` random shapes with β drawn uniformly from
/// `[-beta_range, beta_range]`. Muscularity scores are drawn independently
/// from [-1, 1].
pub fn generate_corpus(
    model: &BodyModel,
    count: usize,
    beta_range: f64,
    seed: u64,
    config: &MeasurementConfig,
) -> Result<Vec<AttributeSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let beta = ShapeParams((0..model.num_betas()).map(|_| rng.gen_range(-beta_range..=beta_range)).collect());
            let mut attributes = measure(model, &beta, config)?;
            attributes.muscularity = rng.gen_range(-1.0..=1.0);
            Ok(AttributeSample { beta, attributes })
        })
        .collect()
}

/// β as an affine function of normalized attributes:
/// `β = beta0 + A · ((a - attr_mean) / attr_scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearAttributeMap {
    pub attribute_names: Vec<String>,
    pub num_betas: usize,
    /// Row-major `num_betas x K`.
    pub a: Vec<f64>,
    pub beta0: Vec<f64>,
    pub attr_mean: Vec<f64>,
    pub attr_scale: Vec<f64>,
    /// Corpus extremes, used to bound slider ranges.
    pub attr_min: Vec<f64>,
    pub attr_max: Vec<f64>,
    pub measurement: MeasurementConfig,
    pub ridge_lambda: f64,
    /// RMS β residual of the fit.
    pub fit_residual: f64,
}

impl LinearAttributeMap {
    pub fn num_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.attribute_names.iter().position(|n| n == name)
    }

    pub fn coefficient(&self, beta: usize, attr: usize) -> f64 {
        self.a[beta * self.num_attributes() + attr]
    }

    /// Checks internal consistency, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_attributes();
        let bad = |m: String| Err(MappingError::InvalidMap(m));
        if k == 0 {
            return bad("no attributes".into());
        }
        for n in &self.attribute_names {
            if !ATTRIBUTE_NAMES.contains(&n.as_str()) {
                return Err(MappingError::UnknownAttribute(n.clone()));
            }
        }
        if self.a.len() != self.num_betas * k {
            return bad(format!("A has {} entries, expected {}x{k}", self.a.len(), self.num_betas));
        }
        for (name, len) in [
            ("beta0", self.beta0.len()),
            ("attr_mean", self.attr_mean.len()),
            ("attr_scale", self.attr_scale.len()),
            ("attr_min", self.attr_min.len()),
            ("attr_max", self.attr_max.len()),
        ] {
            let want = if name == "beta0" { self.num_betas } else { k };
            if len != want {
                return bad(format!("{name} has {len} entries, expected {want}"));
            }
        }
        if let Some(i) = self.attr_scale.iter().position(|&s| s <= 0.0 || !s.is_finite()) {
            return bad(format!("attr_scale[{i}] must be positive"));
        }
        Ok(())
    }

    fn normalize(&self, a: &AttributeVector) -> Vec<f64> {
        self.attribute_names
            .iter()
            .enumerate()
            .map(|(i, n)| (a.get(n).expect("validated name") - self.attr_mean[i]) / self.attr_scale[i])
            .collect()
    }

    /// Evaluates the map at absolute attribute values.
    pub fn beta_for(&self, a: &AttributeVector) -> ShapeParams {
        let z = self.normalize(a);
        let k = self.num_attributes();
        ShapeParams(
            (0..self.num_betas)
                .map(|b| self.beta0[b] + (0..k).map(|i| self.a[b * k + i] * z[i]).sum::<f64>())
                .collect(),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: Self = serde_json::from_str(s).map_err(|e| MappingError::InvalidMap(e.to_string()))?;
        map.validate()?;
        Ok(map)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub ridge_lambda: f64,
    pub attribute_names: Vec<String>,
    pub measurement: MeasurementConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            ridge_lambda: DEFAULT_RIDGE,
            attribute_names: ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect(),
            measurement: MeasurementConfig::default(),
        }
    }
}

/// Ridge least-squares fit of β against normalized attributes. The
/// intercept is not penalized.
pub fn fit_map(samples: &[AttributeSample], options: &FitOptions) -> Result<LinearAttributeMap> {
    let lambda = options.ridge_lambda;
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(MappingError::BadLambda(lambda));
    }
    let names = &options.attribute_names;
    if let Some(n) = names.iter().find(|n| !ATTRIBUTE_NAMES.contains(&n.as_str())) {
        return Err(MappingError::UnknownAttribute(n.clone()));
    }
    let k = names.len();
    if samples.len() < k + 1 {
        return Err(MappingError::TooFewSamples { needed: k + 1, got: samples.len(), attributes: k });
    }
    let nb = samples[0].beta.len();
    if let Some(s) = samples.iter().find(|s| s.beta.len() != nb) {
        return Err(MappingError::Body(BodyModelError::Dimension(format!(
            "samples mix beta lengths {nb} and {}",
            s.beta.len()
        ))));
    }
    let n = samples.len();
    let raw = DMatrix::from_fn(n, k, |r, c| samples[r].attributes.get(&names[c]).expect("checked"));
    let mut mean = vec![0.0; k];
    let mut scale = vec![0.0; k];
    let mut min = vec![0.0; k];
    let mut max = vec![0.0; k];
    for c in 0..k {
        let col = raw.column(c);
        mean[c] = col.sum() / n as f64;
        let var = col.iter().map(|x| (x - mean[c]).powi(2)).sum::<f64>() / n as f64;
        scale[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        min[c] = col.min();
        max[c] = col.max();
    }

    let x = DMatrix::from_fn(n, k + 1, |r, c| if c == k { 1.0 } else { (raw[(r, c)] - mean[c]) / scale[c] });
    let y = DMatrix::from_fn(n, nb, |r, c| samples[r].beta.0[c]);
    let mut gram = x.transpose() * &x;
    for c in 0..k {
        gram[(c, c)] += lambda;
    }
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::MAX, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e.abs())));
    if lo.is_nan() || lo <= 1e-12 * hi {
        return Err(MappingError::Singular { lambda });
    }
    let w = gram.cholesky().ok_or(MappingError::Singular { lambda })?.solve(&(x.transpose() * &y));
    let resid = &x * &w - &y;
    let fit_residual = (resid.norm_squared() / (n * nb) as f64).sqrt();

    Ok(LinearAttributeMap {
        attribute_names: names.clone(),
        num_betas: nb,
        a: (0..nb).flat_map(|b| (0..k).map(move |c| (b, c))).map(|(b, c)| w[(c, b)]).collect(),
        beta0: (0..nb).map(|b| w[(k, b)]).collect(),
        attr_mean: mean,
        attr_scale: scale,
        attr_min: min,
        attr_max: max,
        measurement: options.measurement,
        ridge_lambda: lambda,
        fit_residual,
    })
}

/// Attribute values the sliders should show for `beta`.
pub fn slider_state(model: &BodyModel, map: &LinearAttributeMap, beta: &ShapeParams) -> Result<AttributeVector> {
    check_dims(model, map, beta)?;
    let mut attrs = measure(model, beta, &map.measurement)?;
    if let Some(m) = map.index_of("muscularity") {
        attrs.muscularity = project_muscularity(map, beta, &attrs, m);
    }
    Ok(attrs)
}

/// Least-squares muscularity score explaining the part of β that the
/// geometric attributes leave unexplained.
fn project_muscularity(map: &LinearAttributeMap, beta: &ShapeParams, attrs: &AttributeVector, m: usize) -> f64 {
    let k = map.num_attributes();
    let z = map.normalize(attrs);
    let mut num = 0.0;
    let mut col_sq = 0.0;
    let mut all_sq = 0.0;
    for b in 0..map.num_betas {
        let mut r = beta.0[b] - map.beta0[b];
        for i in (0..k).filter(|&i| i != m) {
            r -= map.a[b * k + i] * z[i];
        }
        let am = map.a[b * k + m];
        num += am * r;
        col_sq += am * am;
        all_sq += map.a[b * k..(b + 1) * k].iter().map(|x| x * x).sum::<f64>();
    }
    let zm = if col_sq > 1e-12 * all_sq / k as f64 { num / col_sq } else { 0.0 };
    (map.attr_mean[m] + map.attr_scale[m] * zm).clamp(-1.0, 1.0)
}

fn check_dims(model: &BodyModel, map: &LinearAttributeMap, beta: &ShapeParams) -> Result<()> {
    if map.num_betas != model.num_betas() || beta.len() != model.num_betas() {
        return Err(MappingError::Body(BodyModelError::Dimension(format!(
            "map has {} betas, model {}, beta {}",
            map.num_betas,
            model.num_betas(),
            beta.len()
        ))));
    }
    Ok(())
}

/// A slider move: either an absolute value or a relative change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditValue {
    Set(f64),
    Delta(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeEdit {
    pub attribute: String,
    #[serde(flatten)]
    pub value: EditValue,
}

impl AttributeEdit {
    pub fn set(attribute: &str, v: f64) -> Self {
        Self { attribute: attribute.into(), value: EditValue::Set(v) }
    }

    pub fn delta(attribute: &str, v: f64) -> Self {
        Self { attribute: attribute.into(), value: EditValue::Delta(v) }
    }
}

/// `weight=+10` and `weight=-3` are deltas, `height=1.8` is absolute.
impl FromStr for AttributeEdit {
    type Err = MappingError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || MappingError::BadEdit(s.into());
        let (name, value) = s.split_once('=').ok_or_else(bad)?;
        let name = name.trim();
        let value = value.trim();
        if name.is_empty() {
            return Err(bad());
        }
        let num: f64 = value.parse().map_err(|_| bad())?;
        if !num.is_finite() {
            return Err(bad());
        }
        Ok(if value.starts_with('+') || value.starts_with('-') { Self::delta(name, num) } else { Self::set(name, num) })
    }
}

impl fmt::Display for AttributeEdit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.value {
            EditValue::Set(v) => write!(f, "{}={v}", self.attribute),
            EditValue::Delta(v) => write!(f, "{}={v:+}", self.attribute),
        }
    }
}

/// New β whose attributes are the current ones with `edits` applied.
pub fn attributes_to_beta(
    model: &BodyModel,
    map: &LinearAttributeMap,
    beta: &ShapeParams,
    edits: &[AttributeEdit],
) -> Result<ShapeParams> {
    for e in edits {
        if map.index_of(&e.attribute).is_none() {
            return Err(MappingError::UnknownAttribute(e.attribute.clone()));
        }
    }
    let mut target = slider_state(model, map, beta)?;
    for e in edits {
        let current = target.get(&e.attribute).expect("validated");
        let v = match e.value {
            EditValue::Set(v) => v,
            EditValue::Delta(d) => current + d,
        };
        target.set(&e.attribute, v)?;
    }
    Ok(map.beta_for(&target))
}
