//! Descriptive statistics and a GUM-style uncertainty budget.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSeries {
    pub label: String,
    pub values_mm: Vec<f64>,
}

impl MeasurementSeries {
    pub fn new(label: impl Into<String>, values_mm: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            values_mm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvaluationType {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyComponent {
    pub name: String,
    pub symbol: String,
    #[serde(rename = "type")]
    pub kind: EvaluationType,
    pub u_mm: f64,
    pub note: String,
}

impl UncertaintyComponent {
    pub fn new(name: impl Into<String>, kind: EvaluationType, u_mm: f64, note: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            symbol: String::new(),
            kind,
            u_mm,
            note: note.into(),
        }
    }

    pub fn with_symbol(mut self, symbol: impl Into<String>) -> Self {
        self.symbol = symbol.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBudget {
    pub components: Vec<UncertaintyComponent>,
    pub combined_mm: f64,
    pub coverage_factor: f64,
    /// k·u_c from the unrounded combined uncertainty.
    pub expanded_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub count: usize,
    pub mean_mm: f64,
    /// n − 1 denominator; NaN for a single value.
    pub std_mm: f64,
    pub min_mm: f64,
    pub max_mm: f64,
}

/// Rounds half away from zero to `decimals` places.
pub fn round_half_away(value: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (value * scale).round() / scale
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn series_summary(series: &MeasurementSeries) -> Result<SeriesSummary> {
    let v = &series.values_mm;
    if v.is_empty() {
        return Err(Error::InsufficientData(format!("series {:?} is empty", series.label)));
    }
    Ok(SeriesSummary {
        count: v.len(),
        mean_mm: v.iter().sum::<f64>() / v.len() as f64,
        std_mm: if v.len() > 1 { sample_std(v) } else { f64::NAN },
        min_mm: v.iter().copied().fold(f64::INFINITY, f64::min),
        max_mm: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// u = s/√n with the sample STD of the series.
pub fn type_a_uncertainty(series: &MeasurementSeries) -> Result<UncertaintyComponent> {
    let n = series.values_mm.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "series {:?} has {n} values; a dispersion needs at least 2",
            series.label
        )));
    }
    let s = sample_std(&series.values_mm);
    type_a_from_std(&series.label, s, n)
}

/// u = s/√n when only the sample STD and count are known.
pub fn type_a_from_std(name: &str, std_mm: f64, n: usize) -> Result<UncertaintyComponent> {
    if n < 2 {
        return Err(Error::InsufficientData(format!("{name}: n = {n}, at least 2 required")));
    }
    if !(std_mm >= 0.0) {
        return Err(Error::Domain(format!("{name}: standard deviation must be non-negative")));
    }
    Ok(UncertaintyComponent::new(
        name,
        EvaluationType::A,
        std_mm / (n as f64).sqrt(),
        format!("s = {std_mm} mm, n = {n}"),
    ))
}

/// u = a/√3 for a rectangular distribution of half-width `a`.
pub fn type_b_uniform(name: &str, half_width_mm: f64) -> Result<UncertaintyComponent> {
    if !(half_width_mm >= 0.0) {
        return Err(Error::Domain(format!("{name}: half-width must be non-negative, got {half_width_mm}")));
    }
    Ok(UncertaintyComponent::new(
        name,
        EvaluationType::B,
        half_width_mm / 3f64.sqrt(),
        format!("a = {half_width_mm} mm, rectangular"),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageUncertainty {
    pub u_stage_mm: f64,
    /// Depth change for one stage step.
    pub delta_z_eff_mm: f64,
}

/// Depth uncertainty from the angular resolution Δα of the rotation stage.
pub fn stage_uncertainty(s_eff_mm_per_rad: f64, theta_h_deg: f64, resolution_deg: f64) -> Result<StageUncertainty> {
    if !(s_eff_mm_per_rad > 0.0 && theta_h_deg > 0.0) || !(resolution_deg >= 0.0) {
        return Err(Error::Domain(format!(
            "stage uncertainty needs S_eff > 0, θ_h > 0, Δα ≥ 0; got {s_eff_mm_per_rad}, {theta_h_deg}°, {resolution_deg}°"
        )));
    }
    let delta_z = s_eff_mm_per_rad * (TAU / theta_h_deg.to_radians()) * resolution_deg.to_radians();
    Ok(StageUncertainty {
        u_stage_mm: delta_z / 12f64.sqrt(),
        delta_z_eff_mm: delta_z,
    })
}

/// Root-sum-square combination of independent components; U = k·u_c.
pub fn combine_budget(components: Vec<UncertaintyComponent>, coverage_factor: f64) -> Result<UncertaintyBudget> {
    if components.is_empty() {
        return Err(Error::EmptyBudget);
    }
    if let Some(bad) = components.iter().find(|c| !(c.u_mm >= 0.0)) {
        return Err(Error::Domain(format!("component {:?} has negative uncertainty", bad.name)));
    }
    if !(coverage_factor > 0.0) {
        return Err(Error::Domain("coverage factor must be positive".into()));
    }
    let combined = components.iter().map(|c| c.u_mm * c.u_mm).sum::<f64>().sqrt();
    Ok(UncertaintyBudget {
        components,
        combined_mm: combined,
        coverage_factor,
        expanded_mm: coverage_factor * combined,
    })
}

/// Where a budget component's standard uncertainty comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ComponentSource {
    TypeAStats { std_mm: f64, n: usize },
    TypeASeries { values_mm: Vec<f64> },
    TypeBUniform { half_width_mm: f64 },
    Stage { s_eff_mm_per_rad: f64, theta_h_deg: f64, stage_resolution_deg: f64 },
    Direct { u_mm: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub name: String,
    #[serde(default)]
    pub symbol: String,
    /// Overrides the evaluation type implied by the source.
    #[serde(default, rename = "type")]
    pub kind: Option<EvaluationType>,
    #[serde(flatten)]
    pub source: ComponentSource,
}

fn default_coverage() -> f64 {
    2.0
}

fn default_rounding() -> Option<u32> {
    Some(3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub components: Vec<ComponentSpec>,
    #[serde(default = "default_coverage")]
    pub coverage_factor: f64,
    /// Components are rounded to this many decimals before combining, as when
    /// a budget is assembled from reported table values. `None` keeps full precision.
    #[serde(default = "default_rounding")]
    pub round_components_decimals: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetOutcome {
    pub budget: UncertaintyBudget,
    /// Unrounded component values, in spec order.
    pub raw_components_mm: Vec<f64>,
    pub stage: Option<StageUncertainty>,
}

impl ComponentSpec {
    fn evaluate(&self) -> Result<(UncertaintyComponent, Option<StageUncertainty>)> {
        let (mut component, stage) = match &self.source {
            ComponentSource::TypeAStats { std_mm, n } => (type_a_from_std(&self.name, *std_mm, *n)?, None),
            ComponentSource::TypeASeries { values_mm } => {
                (type_a_uncertainty(&MeasurementSeries::new(self.name.clone(), values_mm.clone()))?, None)
            }
            ComponentSource::TypeBUniform { half_width_mm } => (type_b_uniform(&self.name, *half_width_mm)?, None),
            ComponentSource::Stage {
                s_eff_mm_per_rad,
                theta_h_deg,
                stage_resolution_deg,
            } => {
                let stage = stage_uncertainty(*s_eff_mm_per_rad, *theta_h_deg, *stage_resolution_deg)?;
                let note = format!(
                    "S_eff = {s_eff_mm_per_rad} mm/rad, θ_h = {theta_h_deg}°, Δα = {stage_resolution_deg}°, ΔZ_eff = {} mm",
                    stage.delta_z_eff_mm
                );
                (UncertaintyComponent::new(&self.name, EvaluationType::B, stage.u_stage_mm, note), Some(stage))
            }
            ComponentSource::Direct { u_mm } => (
                UncertaintyComponent::new(&self.name, EvaluationType::A, *u_mm, "given directly"),
                None,
            ),
        };
        if let Some(kind) = self.kind {
            component.kind = kind;
        }
        component.symbol.clone_from(&self.symbol);
        Ok((component, stage))
    }
}

impl BudgetSpec {
    pub fn evaluate(&self) -> Result<BudgetOutcome> {
        if self.components.is_empty() {
            return Err(Error::EmptyBudget);
        }
        let mut components = Vec::with_capacity(self.components.len());
        let mut raw = Vec::with_capacity(self.components.len());
        let mut stage = None;
        for spec in &self.components {
            let (mut c, s) = spec.evaluate()?;
            raw.push(c.u_mm);
            if let Some(d) = self.round_components_decimals {
                c.u_mm = round_half_away(c.u_mm, d);
            }
            stage = stage.or(s);
            components.push(c);
        }
        Ok(BudgetOutcome {
            budget: combine_budget(components, self.coverage_factor)?,
            raw_components_mm: raw,
            stage,
        })
    }
}
