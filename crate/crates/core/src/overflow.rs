//! Repeated reweighting of one activation through a stack of layers, in
//! binary16 and in f64, to show where unbounded routing weights overflow.

use std::fmt;

use crate::numerics::half::to_half;

/// How the per-layer routing weight becomes a multiplicative factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scaling {
    /// `1 + w`.
    Raw,
    /// `1 + α·tanh(w)`.
    TanhNorm { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverflowOutcome {
    pub label: String,
    pub weight: f64,
    /// Per-layer factor as seen in f64.
    pub factor: f64,
    /// 1-based layer at which the binary16 value first became infinite.
    pub half_overflow: Option<usize>,
    pub f64_overflow: Option<usize>,
    pub final_half: f64,
    pub final_f64: f64,
}

impl OverflowOutcome {
    pub fn stable_in_half(&self) -> bool {
        self.half_overflow.is_none()
    }
}

fn factor(scaling: Scaling, w: f64, round: impl Fn(f64) -> f64) -> f64 {
    match scaling {
        Scaling::Raw => round(1.0 + round(w)),
        Scaling::TanhNorm { alpha } => round(1.0 + round(round(alpha) * round(w.tanh()))),
    }
}

/// Scales `x0` by the factor derived from `w` once per layer.
pub fn simulate(label: &str, scaling: Scaling, w: f64, x0: f64, n_layers: usize) -> OverflowOutcome {
    let f_half = factor(scaling, w, to_half);
    let f_wide = factor(scaling, w, |v| v);
    let (mut xh, mut xw) = (to_half(x0), x0);
    let (mut half_overflow, mut f64_overflow) = (None, None);
    for l in 1..=n_layers {
        xh = to_half(xh * f_half);
        xw *= f_wide;
        if half_overflow.is_none() && !xh.is_finite() {
            half_overflow = Some(l);
        }
        if f64_overflow.is_none() && !xw.is_finite() {
            f64_overflow = Some(l);
        }
    }
    OverflowOutcome {
        label: label.to_string(),
        weight: w,
        factor: f_wide,
        half_overflow,
        f64_overflow,
        final_half: xh,
        final_f64: xw,
    }
}

/// Large enough that `tanh(w)` rounds to 1 in binary16.
pub const SATURATING_WEIGHT: f64 = 10.0;

/// The three cases: raw weights at `w = 1`, and TanhNorm at α = 1 and α = 0.2
/// with saturated weights.
pub fn overflow_demo(n_layers: usize) -> Vec<OverflowOutcome> {
    vec![
        simulate("no normalization", Scaling::Raw, 1.0, 1.0, n_layers),
        simulate("tanh_norm alpha=1", Scaling::TanhNorm { alpha: 1.0 }, SATURATING_WEIGHT, 1.0, n_layers),
        simulate("tanh_norm alpha=0.2", Scaling::TanhNorm { alpha: 0.2 }, SATURATING_WEIGHT, 1.0, n_layers),
    ]
}

impl fmt::Display for OverflowOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = |v: Option<usize>| match v {
            Some(l) => format!("OVERFLOW at layer {l}"),
            None => "stable".to_string(),
        };
        write!(
            f,
            "{:<20} factor {:.6}  16-bit: {:<22} 64-bit: {:<22} final {:e}",
            self.label,
            self.factor,
            status(self.half_overflow),
            status(self.f64_overflow),
            self.final_f64
        )
    }
}
