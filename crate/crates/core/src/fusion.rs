//! Feasible-direction fusion of a task gradient and a diversity gradient.
//!
//! The update direction is the angular bisector `d = Z(Z(g_t) + Z(g_d))` of
//! the two gradients, where `Z(x) = x / ||x||`. Its length is the mean of the
//! two projections onto `d`, with the diversity projection capped at the task
//! projection:
//!
//! ```text
//! g_final = (g_t·d + min(g_d·d, g_t·d)) / 2 · d
//! ```
//!
//! Because `d` bisects the angle, it has a positive inner product with both
//! gradients whenever they are not exactly opposed, so a small step along
//! `g_final` improves both objectives to first order.

use crate::error::{DiceError, Result};
use crate::numerics::ParamVector;

/// Below this norm `Z(g_t) + Z(g_d)` is treated as zero (opposed gradients).
pub const OPPOSED_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degeneracy {
    /// `||g_d|| = 0`: the task gradient is used unchanged.
    ZeroDiversity,
    /// `||g_t|| = 0`: no update.
    ZeroTask,
    /// The gradients point in exactly opposite directions: task gradient used.
    Opposed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    /// Unit bisector (or the unit task direction on degenerate paths; zero
    /// when the task gradient is zero).
    pub direction: ParamVector,
    pub proj_task: f64,
    pub proj_div: f64,
    /// The diversity projection exceeded the task projection and was capped.
    pub clipped: bool,
    pub g_final: ParamVector,
    /// Cosine of the angle between `g_t` and `g_d` (zero if either is zero).
    pub cosine: f64,
    pub degenerate: Option<Degeneracy>,
}

/// `x / ||x||`, or `None` for the zero vector.
pub fn normalize(x: &ParamVector) -> Option<ParamVector> {
    let norm = x.norm();
    if norm == 0.0 || !norm.is_finite() {
        None
    } else {
        Some(x.scaled(1.0 / norm))
    }
}

/// Unit angular bisector of two non-zero, non-opposed vectors.
pub fn bisector(g_t: &ParamVector, g_d: &ParamVector) -> Result<ParamVector> {
    g_d.check_len("bisector", g_t.len())?;
    let (zt, zd) = match (normalize(g_t), normalize(g_d)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(DiceError::Contract("bisector of a zero vector".into())),
    };
    let sum = zt.add(&zd);
    if sum.norm() < OPPOSED_EPS {
        return Err(DiceError::Contract("bisector of opposed vectors".into()));
    }
    Ok(normalize(&sum).expect("non-zero sum"))
}

/// Fuses the task and diversity gradients.
///
/// With `floor_at_zero` the final magnitude is floored at zero; the literal
/// rule (default) never needs it since both projections onto the bisector
/// are non-negative, but the option is kept for experiments.
pub fn fuse(g_t: &ParamVector, g_d: &ParamVector, floor_at_zero: bool) -> Result<FusionResult> {
    g_d.check_len("fuse", g_t.len())?;
    if !g_t.is_finite() || !g_d.is_finite() {
        return Err(DiceError::NonFinite {
            what: "fusion input gradient".into(),
            agent: None,
        });
    }
    let cosine = g_t.cosine(g_d);
    let task_norm = g_t.norm();

    let task_only = |reason: Degeneracy| {
        let direction = normalize(g_t).unwrap_or_else(|| ParamVector::zeros(g_t.len()));
        FusionResult {
            direction,
            proj_task: task_norm,
            proj_div: 0.0,
            clipped: false,
            g_final: g_t.clone(),
            cosine,
            degenerate: Some(reason),
        }
    };

    let Some(zt) = normalize(g_t) else {
        return Ok(FusionResult {
            direction: ParamVector::zeros(g_t.len()),
            proj_task: 0.0,
            proj_div: 0.0,
            clipped: false,
            g_final: ParamVector::zeros(g_t.len()),
            cosine,
            degenerate: Some(Degeneracy::ZeroTask),
        });
    };
    let Some(zd) = normalize(g_d) else {
        return Ok(task_only(Degeneracy::ZeroDiversity));
    };
    let sum = zt.add(&zd);
    if sum.norm() < OPPOSED_EPS {
        log::debug!("fusion: opposed task and diversity gradients, using task gradient");
        return Ok(task_only(Degeneracy::Opposed));
    }
    let direction = normalize(&sum).expect("non-zero sum");
    let proj_task = g_t.dot(&direction);
    let proj_div = g_d.dot(&direction);
    let clipped = proj_div > proj_task;
    let mut magnitude = (proj_task + proj_div.min(proj_task)) / 2.0;
    if floor_at_zero {
        magnitude = magnitude.max(0.0);
    }
    let g_final = direction.scaled(magnitude);
    Ok(FusionResult {
        direction,
        proj_task,
        proj_div,
        clipped,
        g_final,
        cosine,
        degenerate: None,
    })
}
