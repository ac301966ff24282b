//! Pipeline configuration: a JSON document whose sections mirror the core
//! settings, with dotted-path overrides.

use std::path::{Path, PathBuf};

use facegaze_core::fitting::{FitConfig, RobustKernel};
use facegaze_core::pipeline::{RenderSettings, Shading};
use facegaze_core::pointcloud::{CameraIntrinsics, OutlierFilter};
use facegaze_core::synth::{HalfSpace, ScreenGeometry, TrackSpec};
use facegaze_core::Vec3;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::formats::read_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub fit: FitSection,
    pub render: RenderSection,
    pub regress: RegressSection,
    pub scenario: ScenarioSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelName {
    Tukey,
    TukeySquared,
    Unit,
}

impl From<KernelName> for RobustKernel {
    fn from(k: KernelName) -> Self {
        match k {
            KernelName::Tukey => RobustKernel::Tukey,
            KernelName::TukeySquared => RobustKernel::TukeySquared,
            KernelName::Unit => RobustKernel::Unit,
        }
    }
}

/// Where each fit starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Identity rotation, zero shape, centroids aligned.
    Centroid,
    /// The recorded true pose disturbed by a random rotation and shift of
    /// fixed size; stands in for a facial-landmark pose detector.
    PerturbedTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub omega1_init: f64,
    pub omega1_final: f64,
    pub omega2_final: f64,
    pub tukey_threshold: f64,
    pub threshold_init: f64,
    pub threshold_decay: f64,
    pub kernel: KernelName,
    pub point_weight: f64,
    pub ramp_iters: usize,
    pub stage_tol: f64,
    pub conv_tol: f64,
    pub window: usize,
    pub max_iters: usize,
    pub source_samples: usize,
    pub sample_seed: u64,
    pub adaptive: bool,
    /// Neighbors used to estimate scan normals.
    pub normal_k: usize,
    /// Statistical outlier removal on the scan before fitting.
    pub outlier_filter: bool,
    pub filter_k: usize,
    pub filter_std_ratio: f64,
    pub init: InitMode,
    pub init_rotation_deg: f64,
    pub init_translation: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        let c = FitConfig::default();
        let f = OutlierFilter::default();
        Self {
            omega1_init: c.omega1_init,
            omega1_final: c.omega1_final,
            omega2_final: c.omega2_final,
            tukey_threshold: c.tukey_threshold,
            threshold_init: c.threshold_init,
            threshold_decay: c.threshold_decay,
            kernel: KernelName::Tukey,
            point_weight: c.point_weight,
            ramp_iters: c.ramp_iters,
            stage_tol: c.stage_tol,
            conv_tol: c.conv_tol,
            window: c.window,
            max_iters: c.max_iters,
            source_samples: c.source_samples,
            sample_seed: c.sample_seed,
            adaptive: c.adaptive,
            normal_k: 30,
            outlier_filter: true,
            filter_k: f.k,
            filter_std_ratio: f.std_ratio,
            init: InitMode::PerturbedTruth,
            init_rotation_deg: 5.0,
            init_translation: 0.02,
        }
    }
}

impl FitSection {
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            omega1_init: self.omega1_init,
            omega1_final: self.omega1_final,
            omega2_final: self.omega2_final,
            tukey_threshold: self.tukey_threshold,
            threshold_init: self.threshold_init,
            threshold_decay: self.threshold_decay,
            kernel: self.kernel.into(),
            point_weight: self.point_weight,
            ramp_iters: self.ramp_iters,
            stage_tol: self.stage_tol,
            conv_tol: self.conv_tol,
            window: self.window,
            max_iters: self.max_iters,
            source_samples: self.source_samples,
            sample_seed: self.sample_seed,
            adaptive: self.adaptive,
        }
    }

    pub fn filter(&self) -> Option<OutlierFilter> {
        self.outlier_filter.then_some(OutlierFilter { k: self.filter_k, std_ratio: self.filter_std_ratio })
    }

    fn validate(&self) -> Result<()> {
        self.fit_config().validate()?;
        if self.normal_k < 3 {
            return Err(Error::config("fit.normal_k must be at least 3"));
        }
        if self.outlier_filter && (self.filter_k == 0 || !(self.filter_std_ratio >= 0.0)) {
            return Err(Error::config("fit.filter_k must be positive and filter_std_ratio nonnegative"));
        }
        if !(self.init_rotation_deg >= 0.0) || !(self.init_translation >= 0.0) {
            return Err(Error::config("initial perturbation sizes must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl From<CameraIntrinsics> for Intrinsics {
    fn from(c: CameraIntrinsics) -> Self {
        Self { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, width: c.width, height: c.height }
    }
}

impl From<Intrinsics> for CameraIntrinsics {
    fn from(c: Intrinsics) -> Self {
        Self { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, width: c.width, height: c.height }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    /// Camera that captures the sensed frames.
    pub sensed: Intrinsics,
    /// Virtual camera of the frontal re-render.
    pub canonical: Intrinsics,
    /// Depth `z0` of the face in the frontal re-render, meters.
    pub canonical_distance: f64,
    pub patch_margin: f64,
    pub skin: f64,
    pub background: f64,
}

impl Default for RenderSection {
    fn default() -> Self {
        let r = RenderSettings::default();
        let s = Shading::default();
        Self {
            sensed: r.sensed.into(),
            canonical: r.canonical.into(),
            canonical_distance: r.canonical_distance,
            patch_margin: r.margin,
            skin: s.skin,
            background: s.background,
        }
    }
}

impl RenderSection {
    pub fn settings(&self) -> RenderSettings {
        RenderSettings {
            sensed: self.sensed.into(),
            canonical: self.canonical.into(),
            canonical_distance: self.canonical_distance,
            margin: self.patch_margin,
        }
    }

    fn validate(&self) -> Result<()> {
        self.settings().validate()?;
        for (name, v) in [("skin", self.skin), ("background", self.background)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("render.{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressSection {
    /// Neighbors for kNN.
    pub k: usize,
    /// Reconstruction tolerance for adaptive linear regression.
    pub eps: f64,
    /// Side of the screen grid used for sparse training selection.
    pub grid: usize,
}

impl Default for RegressSection {
    fn default() -> Self {
        Self { k: 3, eps: 0.05, grid: 17 }
    }
}

impl RegressSection {
    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("regress.k must be positive"));
        }
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::config("regress.eps must be finite and nonnegative"));
        }
        if self.grid == 0 {
            return Err(Error::config("regress.grid must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackKind {
    Lissajous,
    Raster,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackSection {
    pub kind: TrackKind,
    pub a: f64,
    pub b: f64,
    pub phase: f64,
    pub rows: usize,
    pub grid: usize,
}

impl Default for TrackSection {
    fn default() -> Self {
        Self { kind: TrackKind::Lissajous, a: 5.0, b: 7.0, phase: 0.25, rows: 10, grid: 17 }
    }
}

impl TrackSection {
    pub fn spec(&self) -> TrackSpec {
        match self.kind {
            TrackKind::Lissajous => TrackSpec::Lissajous { a: self.a, b: self.b, phase: self.phase },
            TrackKind::Raster => TrackSpec::Raster { rows: self.rows },
            TrackKind::Grid => TrackSpec::Grid { g: self.grid },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Screen {
    pub width: f64,
    pub height: f64,
    pub distance: f64,
}

impl Default for Screen {
    fn default() -> Self {
        let g = ScreenGeometry::default();
        Self { width: g.width, height: g.height, distance: g.distance }
    }
}

impl From<Screen> for ScreenGeometry {
    fn from(s: Screen) -> Self {
        Self { width: s.width, height: s.height, distance: s.distance }
    }
}

/// Scan points with `normal · p > offset` are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occlusion {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl From<Occlusion> for HalfSpace {
    fn from(o: Occlusion) -> Self {
        Self { normal: Vec3::from(o.normal), offset: o.offset }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub model_vertices: usize,
    pub model_modes: usize,
    /// Spread of the true shape coefficients in units of the mode scales.
    pub coeff_spread: f64,
    pub frames: usize,
    pub track: TrackSection,
    pub screen: Screen,
    /// Side of the square eye-appearance patch in pixels.
    pub appearance_size: usize,
    pub appearance_noise: f64,
    pub scan_noise: f64,
    pub scan_size: usize,
    pub outlier_fraction: f64,
    pub occlusion: Option<Occlusion>,
    /// Adds a section with a random head pose per frame next to the
    /// static-head section.
    pub moving_head: bool,
    /// Head yaw and pitch are drawn uniformly from `±head_range_deg`.
    pub head_range_deg: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            model_vertices: 4000,
            model_modes: 10,
            coeff_spread: 1.0,
            frames: 300,
            track: TrackSection::default(),
            screen: Screen::default(),
            appearance_size: 32,
            appearance_noise: 0.0,
            scan_noise: 0.0,
            scan_size: 5000,
            outlier_fraction: 0.0,
            occlusion: None,
            moving_head: false,
            head_range_deg: 20.0,
        }
    }
}

impl ScenarioSection {
    fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::config("scenario.frames must be positive: the suite would be empty"));
        }
        if self.model_vertices < 50 || self.model_modes == 0 {
            return Err(Error::config("scenario needs model_vertices >= 50 and model_modes >= 1"));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::config("scenario.outlier_fraction must lie in [0, 1)"));
        }
        for (name, v) in [
            ("scan_noise", self.scan_noise),
            ("appearance_noise", self.appearance_noise),
            ("coeff_spread", self.coeff_spread),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("scenario.{name} must be finite and nonnegative")));
            }
        }
        if self.scan_size == 0 {
            return Err(Error::config("scenario.scan_size must be positive"));
        }
        if self.appearance_size < 5 {
            return Err(Error::config("scenario.appearance_size must be at least 5"));
        }
        if !(self.head_range_deg >= 0.0 && self.head_range_deg < 90.0) {
            return Err(Error::config("scenario.head_range_deg must lie in [0, 90)"));
        }
        let s = self.screen;
        if !(s.width > 0.0 && s.height > 0.0 && s.distance > 0.0) {
            return Err(Error::config("scenario.screen sizes must be positive"));
        }
        if let Some(o) = self.occlusion {
            if Vec3::from(o.normal).norm() == 0.0 {
                return Err(Error::config("scenario.occlusion.normal must be nonzero"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Suite directory read by `pipeline`.
    pub suite: Option<PathBuf>,
    /// Output directory; `--out` overrides it.
    pub output: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Numeric invariants of every section. Paths are checked by the
    /// commands that use them.
    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        self.render.validate()?;
        self.regress.validate()?;
        self.scenario.validate()
    }

    /// Applies `section.key=value` overrides. The value is read as JSON when
    /// it parses, else as a string. Unknown keys are rejected.
    pub fn apply_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for item in overrides {
            let (key, raw) =
                item.split_once('=').ok_or_else(|| Error::config(format!("override '{item}' is not KEY=VALUE")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                let obj = slot
                    .as_object_mut()
                    .ok_or_else(|| Error::config(format!("'{key}': '{part}' is not inside a section")))?;
                slot = obj.get_mut(part).ok_or_else(|| Error::config(format!("unknown config key '{key}'")))?;
            }
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| Error::config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), c);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"seed": 4, "fit": {"max_iters": 7}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.fit.max_iters, 7);
        assert_eq!(c.fit.tukey_threshold, FitSection::default().tukey_threshold);
    }

    #[test]
    fn overrides_set_nested_values() {
        let c = PipelineConfig::default()
            .apply_overrides(&[
                "fit.max_iters=1".into(),
                "fit.kernel=unit".into(),
                "scenario.occlusion={\"normal\":[1,0,0],\"offset\":0.02}".into(),
            ])
            .unwrap();
        assert_eq!(c.fit.max_iters, 1);
        assert_eq!(c.fit.kernel, KernelName::Unit);
        assert_eq!(c.scenario.occlusion.unwrap().offset, 0.02);
    }

    #[test]
    fn unknown_or_mistyped_overrides_fail() {
        let c = PipelineConfig::default();
        assert!(c.apply_overrides(&["fit.nope=1".into()]).is_err());
        assert!(c.apply_overrides(&["fit.max_iters=many".into()]).is_err());
        assert!(c.apply_overrides(&["seed".into()]).is_err());
    }

    #[test]
    fn invariant_violations_are_validation_errors() {
        let mut c = PipelineConfig::default();
        c.scenario.outlier_fraction = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = PipelineConfig::default();
        c.fit.tukey_threshold = -1.0;
        assert_eq!(c.validate().unwrap_err().exit_code(), crate::error::exit::VALIDATION);
        let mut c = PipelineConfig::default();
        c.scenario.frames = 0;
        assert!(c.validate().is_err());
    }
}
