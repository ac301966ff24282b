//! End-to-end evaluation: fit, pose normalization, frontal render and eye
//! features for every frame, sparse train/test split, kNN and adaptive
//! linear regression, and the evaluation report.

use facegaze_core::fitting::rotation::{axis_angle, rotation_angle_between};
use facegaze_core::fitting::{fit, FitInit, FitResult, TargetScan};
use facegaze_core::model::MorphableModel;
use facegaze_core::pipeline::{extract_features, FrameFeatures};
use facegaze_core::pointcloud::PointSet;
use facegaze_core::regress::{alr_predict, gaze_error, knn_predict, select_sparse_indices, GazeDirection, TrainingSet};
use facegaze_core::render::{normalize_pose, EyeFeature, Image};
use facegaze_core::{Mat3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{InitMode, PipelineConfig};
use crate::error::{Error, Result};
use crate::formats::{sha256_hex, to_json_string, SampleRecord};
use crate::report::*;
use crate::suite::{derive_seed, stream, FrameSource, FrameTruth, SectionKind, Suite};

/// Uniform random unit vector.
fn random_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// The true pose rotated by `angle_deg` about a random axis and shifted by
/// `shift` meters in a random direction, with zero shape coefficients.
pub fn perturbed_init(
    rotation: &Mat3,
    translation: &Vec3,
    modes: usize,
    angle_deg: f64,
    shift: f64,
    seed: u64,
) -> FitInit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = random_direction(&mut rng);
    let dir = random_direction(&mut rng);
    FitInit {
        rotation: axis_angle(&axis, angle_deg.to_radians()) * rotation,
        translation: translation + dir * shift,
        coeffs: vec![0.0; modes],
    }
}

/// Initial pose for one frame as configured.
pub fn frame_init(
    config: &PipelineConfig,
    model: &MorphableModel,
    target: &TargetScan,
    truth: Option<&FrameTruth>,
    seed: u64,
) -> Result<FitInit> {
    match config.fit.init {
        InitMode::Centroid => Ok(FitInit::centroid(model, target.cloud(), &config.fit.fit_config())?),
        InitMode::PerturbedTruth => {
            let t = truth.ok_or_else(|| Error::config("perturbed_truth initialization needs the frame's true pose"))?;
            Ok(perturbed_init(
                &t.rotation(),
                &t.translation(),
                model.n_modes(),
                config.fit.init_rotation_deg,
                config.fit.init_translation,
                seed,
            ))
        }
    }
}

/// Normals, optional outlier filtering and the fit of one scan.
pub fn fit_scan(
    config: &PipelineConfig,
    model: &MorphableModel,
    scan: PointSet,
    truth: Option<&FrameTruth>,
    seed: u64,
) -> Result<FitResult> {
    let filter = config.fit.filter();
    let target = TargetScan::prepare(scan, config.fit.normal_k, &Vec3::zeros(), filter.as_ref())?;
    let init = frame_init(config, model, &target, truth, seed)?;
    Ok(fit(model, &target, &init, &config.fit.fit_config())?)
}

/// What happened to one frame before regression.
#[derive(Debug, Clone)]
pub struct FrameOutcome {
    pub truth: FrameTruth,
    pub fit: Option<FrameFit>,
    /// Fitted head rotation, used to move gaze between camera and head frame.
    pub rotation: Option<Mat3>,
    pub features: Option<FrameFeatures>,
    pub failure: Option<FrameFailure>,
}

fn failure(stage: FailedStage, e: &Error) -> FrameFailure {
    FrameFailure { stage, kind: e.kind().into(), message: e.to_string() }
}

/// Fits, normalizes and extracts features for one frame. Stage errors are
/// recorded in the outcome rather than returned.
pub fn process_frame(
    config: &PipelineConfig,
    model: &MorphableModel,
    truth: &FrameTruth,
    scan: PointSet,
    sensed: &Image,
    init_seed: u64,
) -> FrameOutcome {
    let mut out = FrameOutcome { truth: *truth, fit: None, rotation: None, features: None, failure: None };
    let result = match fit_scan(config, model, scan, Some(truth), init_seed) {
        Ok(r) => r,
        Err(e) => {
            out.failure = Some(failure(FailedStage::Fit, &e));
            return out;
        }
    };
    out.fit = Some(FrameFit {
        converged: result.converged,
        iterations: result.iterations,
        rotation_error_deg: rotation_angle_between(&result.rotation, &truth.rotation()).to_degrees(),
        translation_error_mm: (result.translation - truth.translation()).norm() * 1e3,
    });
    out.rotation = Some(result.rotation);
    let settings = config.render.settings();
    if let Err(e) = normalize_pose(&result, model, settings.canonical_distance) {
        out.failure = Some(failure(FailedStage::Normalize, &e.into()));
        return out;
    }
    match extract_features(model, &result, sensed, &settings) {
        Ok((f, _)) => out.features = Some(f),
        Err(e) => out.failure = Some(failure(FailedStage::Extraction, &e.into())),
    }
    out
}

fn vec3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Head-frame training pairs of one eye for the given frames.
fn training_set(outcomes: &[FrameOutcome], idx: &[usize], left: bool) -> facegaze_core::Result<TrainingSet> {
    let mut features = Vec::with_capacity(idx.len());
    let mut targets = Vec::with_capacity(idx.len());
    let mut screens = Vec::with_capacity(idx.len());
    for &i in idx {
        let o = &outcomes[i];
        let f = o.features.expect("training frames have features");
        features.push(if left { f.left } else { f.right });
        let r = o.rotation.expect("training frames have a fit");
        targets.push(GazeDirection::new(r.transpose() * o.truth.gaze().vector())?);
        screens.push(o.truth.screen);
    }
    TrainingSet::new(features, targets, Some(screens))
}

fn estimate(
    regressor: Regressor,
    config: &PipelineConfig,
    train: &TrainingSet,
    feature: &EyeFeature,
    rotation: &Mat3,
    truth: &GazeDirection,
) -> EyeEstimate {
    let head = match regressor {
        Regressor::Knn => knn_predict(train, feature, config.regress.k),
        Regressor::Alr => alr_predict(train, feature, config.regress.eps),
    };
    let camera = head.and_then(|g| GazeDirection::new(rotation * g.vector()));
    match camera {
        Ok(g) => EyeEstimate { gaze: Some(vec3(g.vector())), error_deg: Some(gaze_error(&g, truth)), failure: None },
        Err(e) => EyeEstimate { gaze: None, error_deg: None, failure: Some(e.to_string()) },
    }
}

/// Splits the successful frames by sparse screen selection, runs both
/// regressors on the rest and summarizes.
pub fn evaluate_section(config: &PipelineConfig, kind: SectionKind, outcomes: &[FrameOutcome]) -> SectionReport {
    let ok: Vec<usize> = (0..outcomes.len()).filter(|&i| outcomes[i].features.is_some()).collect();
    let mut split = vec![Split::Failed; outcomes.len()];
    let mut train_idx = Vec::new();
    if !ok.is_empty() {
        let screens: Vec<[f64; 2]> = ok.iter().map(|&i| outcomes[i].truth.screen).collect();
        let picked = select_sparse_indices(&screens, config.regress.grid).expect("nonempty track and grid");
        train_idx = picked.iter().map(|&p| ok[p]).collect();
        for &i in &ok {
            split[i] = Split::Test;
        }
        for &i in &train_idx {
            split[i] = Split::Train;
        }
    }
    let test_idx: Vec<usize> = ok.iter().copied().filter(|&i| split[i] == Split::Test).collect();

    let sets = [true, false].map(|left| training_set(outcomes, &train_idx, left));
    let mut estimates: Vec<Vec<FrameEstimate>> = vec![Vec::new(); outcomes.len()];
    let mut results = Vec::new();
    for regressor in [Regressor::Knn, Regressor::Alr] {
        let mut errs = [Vec::new(), Vec::new()];
        let mut failures = 0;
        for &i in &test_idx {
            let o = &outcomes[i];
            let f = o.features.expect("test frames have features");
            let r = o.rotation.expect("test frames have a fit");
            let truth = o.truth.gaze();
            let per_eye = [(&sets[0], &f.left), (&sets[1], &f.right)].map(|(set, feat)| match set {
                Ok(train) => estimate(regressor, config, train, feat, &r, &truth),
                Err(e) => EyeEstimate { gaze: None, error_deg: None, failure: Some(e.to_string()) },
            });
            for (eye, est) in per_eye.iter().enumerate() {
                match est.error_deg {
                    Some(e) => errs[eye].push(e),
                    None => failures += 1,
                }
            }
            let [left, right] = per_eye;
            estimates[i].push(FrameEstimate { regressor, left, right });
        }
        let (left, right) = (Stats::of(&errs[0]), Stats::of(&errs[1]));
        results.push(RegressorResult {
            regressor,
            parameter: match regressor {
                Regressor::Knn => config.regress.k as f64,
                Regressor::Alr => config.regress.eps,
            },
            left,
            right,
            mean: MeanColumn::of(&left, &right),
            failures,
        });
    }

    let mut failures = FailureCounts::default();
    for o in outcomes {
        if let Some(f) = &o.failure {
            match f.stage {
                FailedStage::Fit => failures.fit += 1,
                FailedStage::Normalize => failures.normalize += 1,
                FailedStage::Extraction => failures.extraction += 1,
            }
            failures.total += 1;
        }
    }
    let fits: Vec<&FrameFit> = outcomes.iter().filter_map(|o| o.fit.as_ref()).collect();
    let fit = FitSummary {
        attempted: outcomes.len(),
        converged: fits.iter().filter(|f| f.converged).count(),
        iterations: Stats::of(&fits.iter().map(|f| f.iterations as f64).collect::<Vec<_>>()),
        rotation_error_deg: Stats::of(&fits.iter().map(|f| f.rotation_error_deg).collect::<Vec<_>>()),
        translation_error_mm: Stats::of(&fits.iter().map(|f| f.translation_error_mm).collect::<Vec<_>>()),
    };
    let per_frame = outcomes
        .iter()
        .zip(estimates)
        .zip(&split)
        .map(|((o, est), &s)| FrameRecord {
            index: o.truth.index,
            screen: o.truth.screen,
            gaze: o.truth.gaze,
            split: s,
            fit: o.fit.clone(),
            failure: o.failure.clone(),
            estimates: est,
        })
        .collect();
    SectionReport {
        name: kind,
        frames: outcomes.len(),
        train_frames: train_idx.len(),
        test_frames: test_idx.len(),
        failures,
        fit,
        results,
        per_frame,
    }
}

/// Processes every frame of one section; frames run in parallel, results
/// keep frame order.
pub fn process_section(config: &PipelineConfig, suite: &Suite, section: usize) -> Result<Vec<FrameOutcome>> {
    let s = &suite.truth.sections[section];
    let model = &suite.truth.model;
    (0..s.frames.len())
        .into_par_iter()
        .map(|pos| -> Result<FrameOutcome> {
            let truth = &s.frames[pos];
            let frame = suite.frame(section, pos)?;
            let seed = derive_seed(config.seed, &[stream::INIT, s.kind as u64, truth.index as u64]);
            Ok(process_frame(config, model, truth, frame.scan, &frame.sensed, seed))
        })
        .collect()
}

/// Runs the whole suite. I/O failures abort; per-frame processing failures
/// are counted in the report.
pub fn run_pipeline(config: &PipelineConfig, suite: &Suite) -> Result<EvaluationReport> {
    Ok(run_pipeline_with_outcomes(config, suite)?.0)
}

/// Like [`run_pipeline`], also returning each section's frame outcomes.
pub fn run_pipeline_with_outcomes(
    config: &PipelineConfig,
    suite: &Suite,
) -> Result<(EvaluationReport, Vec<Vec<FrameOutcome>>)> {
    config.validate()?;
    if suite.truth.sections.iter().all(|s| s.frames.is_empty()) {
        return Err(Error::config("suite has no frames"));
    }
    if suite.sensed_camera() != config.render.sensed {
        return Err(Error::config("render.sensed differs from the camera the suite was generated with"));
    }
    let mut sections = Vec::new();
    let mut all = Vec::new();
    for (i, s) in suite.truth.sections.iter().enumerate() {
        let outcomes = process_section(config, suite, i)?;
        sections.push(evaluate_section(config, s.kind, &outcomes));
        all.push(outcomes);
    }
    let suite_info = match &suite.source {
        FrameSource::Synthetic(_) => SuiteInfo {
            source: "synthetic".into(),
            manifest_sha256: None,
            model_vertices: suite.truth.model.n_vertices(),
            model_modes: suite.truth.model.n_modes(),
        },
        FrameSource::Directory { dir, manifest } => SuiteInfo {
            source: dir.display().to_string(),
            manifest_sha256: Some(sha256_hex(to_json_string(manifest.as_ref()).as_bytes())),
            model_vertices: suite.truth.model.n_vertices(),
            model_modes: suite.truth.model.n_modes(),
        },
    };
    let report = EvaluationReport {
        schema: REPORT_SCHEMA.into(),
        tool: ToolInfo::default(),
        config: config.clone(),
        suite: suite_info,
        sections,
    };
    Ok((report, all))
}

/// Head-frame samples of one eye from successful frames, in the training-set
/// file layout.
pub fn sample_records(outcomes: &[FrameOutcome], left: bool) -> Vec<SampleRecord> {
    outcomes
        .iter()
        .filter_map(|o| {
            let f = o.features?;
            let r = o.rotation?;
            let g = r.transpose() * o.truth.gaze().vector();
            Some(SampleRecord {
                feature: (if left { f.left } else { f.right }).values().to_vec(),
                gaze: vec3(&g),
                screen: o.truth.screen,
            })
        })
        .collect()
}
