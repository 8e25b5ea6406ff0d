use crate::numerics::{matmul, Matrix};
use crate::model::Predictor;

use super::{PmodError, ReweightMode};

/// Default TanhNorm gating factor.
pub const DEFAULT_ALPHA: f64 = 0.2;

/// Gating factor α of `f(w) = α·tanh(w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TanhNormConfig {
    pub alpha: f64,
}

impl Default for TanhNormConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl TanhNormConfig {
    pub fn new(alpha: f64) -> Result<Self, PmodError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(PmodError::InvalidAlpha(alpha));
        }
        Ok(Self { alpha })
    }
}

/// `α·tanh(w)`: odd, zero at zero, bounded by ±α.
#[inline]
pub fn tanh_norm(cfg: TanhNormConfig, w: f64) -> f64 {
    cfg.alpha * w.tanh()
}

/// Reweighting factor `f(w)` for a mode and its derivative `f'(w)`.
#[inline]
pub(crate) fn normalize(mode: ReweightMode, alpha: f64, w: f64) -> (f64, f64) {
    match mode {
        ReweightMode::VanillaMoD => (w, 1.0),
        ReweightMode::TanhNormOnly | ReweightMode::TanhNormSTRing => {
            let t = w.tanh();
            (alpha * t, alpha * (1.0 - t * t))
        }
    }
}

/// Routing decision of one layer over the vision tokens of one sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RouterState {
    /// Predictor output per vision token.
    pub raw_weights: Vec<f64>,
    /// Reweighting factor per vision token (`α·tanh(w)`, or `w` for vanilla MoD).
    pub normalized_weights: Vec<f64>,
    /// Processed vision tokens, ascending.
    pub selected: Vec<usize>,
    /// Skipped vision tokens, ascending.
    pub skipped: Vec<usize>,
    /// Smallest selected raw weight (the k-th largest weight).
    pub threshold: f64,
}

impl RouterState {
    pub fn is_selected(&self) -> Vec<bool> {
        let mut mask = vec![false; self.raw_weights.len()];
        for &i in &self.selected {
            mask[i] = true;
        }
        mask
    }
}

/// Number of vision tokens a layer keeps: `max(1, ⌊n_vision·ratio⌋)`.
///
/// A `1e-9` slack absorbs products such as `100 × 0.29 = 28.999…`.
pub fn retained_count(n_vision: usize, ratio: f64) -> usize {
    if n_vision == 0 {
        return 0;
    }
    let k = (n_vision as f64 * ratio + 1e-9).floor() as usize;
    k.clamp(1, n_vision)
}

/// Router weights `w = X_v·p + b` for the first `n_vision` rows of `x`.
pub fn predict_weights(
    predictor: &Predictor,
    x: &Matrix,
    n_vision: usize,
) -> Result<RouterState, PmodError> {
    if predictor.weight.shape() != (x.cols(), 1) || predictor.bias.shape() != (1, 1) {
        return Err(PmodError::PredictorShape {
            width: x.cols(),
            weight: predictor.weight.shape(),
        });
    }
    if n_vision > x.rows() {
        return Err(PmodError::TooManyVision {
            n_vision,
            len: x.rows(),
        });
    }
    let idx: Vec<usize> = (0..n_vision).collect();
    let xv = x.gather_rows(&idx);
    let w = matmul(&xv, &predictor.weight).expect("predictor shape checked");
    let b = predictor.bias[(0, 0)];
    Ok(RouterState {
        raw_weights: w.data().iter().map(|v| v + b).collect(),
        ..RouterState::default()
    })
}

/// Exact-count top-k over raw weights; ties go to the lower index.
pub fn select_topk(mut state: RouterState, ratio: f64) -> Result<RouterState, PmodError> {
    let n = state.raw_weights.len();
    if n == 0 {
        return Err(PmodError::NoVisionTokens);
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(PmodError::InvalidRatio(ratio));
    }
    let k = retained_count(n, ratio);
    let w = &state.raw_weights;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    let mut selected = order[..k].to_vec();
    let mut skipped = order[k..].to_vec();
    selected.sort_unstable();
    skipped.sort_unstable();
    state.threshold = w[order[k - 1]];
    state.selected = selected;
    state.skipped = skipped;
    Ok(state)
}
