//! Two-stage weight schedule: rigid-only until a local minimum, then a linear
//! ramp trading rigidity weight for model weight, then fixed final weights.

use super::{FitConfig, FitState, Stage};

/// Relative decrease `(first − last) / first` across the last `window`
/// entries of `history`.
fn relative_decrease(history: &[f64], window: usize) -> Option<f64> {
    if window == 0 || history.len() < window {
        return None;
    }
    let first = history[history.len() - window];
    let last = history[history.len() - 1];
    if first == 0.0 {
        return Some(0.0);
    }
    Some((first - last) / first.abs())
}

/// True once `history` holds at least `window` entries and the relative
/// decrease across them is below `stage_tol`.
pub fn detect_stage_transition(history: &[f64], stage_tol: f64, window: usize) -> bool {
    relative_decrease(history, window).is_some_and(|d| d < stage_tol)
}

/// Convergence test: relative change (either sign) across the window below `tol`.
pub fn detect_convergence(history: &[f64], tol: f64, window: usize) -> bool {
    relative_decrease(history, window).is_some_and(|d| d.abs() < tol)
}

/// `(ω₁, ω₂)` for the iteration about to run.
pub fn update_weights(state: &FitState, config: &FitConfig) -> (f64, f64) {
    match state.stage {
        Stage::RigidOnly => (config.omega1_init, 0.0),
        Stage::Ramp => {
            let f = state.ramp_step.min(config.ramp_iters) as f64 / config.ramp_iters as f64;
            (config.omega1_init + f * (config.omega1_final - config.omega1_init), f * config.omega2_final)
        }
        Stage::Joint => (config.omega1_final, config.omega2_final),
    }
}
