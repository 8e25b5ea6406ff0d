//! Progressive mixture-of-depths layers: routing weights, exact-count vision
//! token selection, TanhNorm and symmetric token reweighting.

mod layer;
mod router;

use serde::{Deserialize, Serialize};

pub use layer::{layer_backward, layer_forward, PmodActs, RoutedLayer};
pub use router::{
    predict_weights, retained_count, select_topk, tanh_norm, RouterState, TanhNormConfig,
    DEFAULT_ALPHA,
};

use crate::schedule::RatioSchedule;

/// How routing weights rescale tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReweightMode {
    /// Raw weights scale selected tokens only.
    #[serde(rename = "vanilla_mod")]
    VanillaMoD,
    /// `α·tanh(w)` scales selected tokens only.
    TanhNormOnly,
    /// `α·tanh(w)` scales selected and skipped tokens alike.
    #[serde(rename = "tanh_norm_string")]
    TanhNormSTRing,
}

impl ReweightMode {
    pub const ALL: [ReweightMode; 3] = [
        ReweightMode::VanillaMoD,
        ReweightMode::TanhNormOnly,
        ReweightMode::TanhNormSTRing,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ReweightMode::VanillaMoD => "vanilla_mod",
            ReweightMode::TanhNormOnly => "tanh_norm_only",
            ReweightMode::TanhNormSTRing => "tanh_norm_string",
        }
    }
}

impl std::str::FromStr for ReweightMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReweightMode::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| format!("unknown reweight mode `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PmodError {
    #[error("no vision tokens to route")]
    NoVisionTokens,
    #[error("retention ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("gating factor {0} must be positive")]
    InvalidAlpha(f64),
    #[error("predictor of shape {weight:?} cannot score width-{width} tokens")]
    PredictorShape { width: usize, weight: (usize, usize) },
    #[error("{n_vision} vision tokens in a sequence of {len}")]
    TooManyVision { n_vision: usize, len: usize },
}

/// Whether a layer routes, and at which retention ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerPlan {
    Dense,
    Routed { ratio: f64 },
}

/// Per-model routing configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    pub mode: ReweightMode,
    pub alpha: f64,
    pub plan: Vec<LayerPlan>,
}

impl Routing {
    /// Every layer dense: the vanilla decoder.
    pub fn dense(n_layers: usize) -> Self {
        Self {
            mode: ReweightMode::TanhNormSTRing,
            alpha: DEFAULT_ALPHA,
            plan: vec![LayerPlan::Dense; n_layers],
        }
    }

    /// Layers with ratio 1 stay dense; the rest route at their ratio.
    pub fn from_schedule(schedule: &RatioSchedule, mode: ReweightMode, alpha: f64) -> Self {
        Self::from_ratios(schedule.ratios(), mode, alpha)
    }

    pub fn from_ratios(ratios: &[f64], mode: ReweightMode, alpha: f64) -> Self {
        let plan = ratios
            .iter()
            .map(|&r| {
                if r >= 1.0 {
                    LayerPlan::Dense
                } else {
                    LayerPlan::Routed { ratio: r }
                }
            })
            .collect();
        Self { mode, alpha, plan }
    }

    /// Retention ratio of every layer, 1 for dense layers.
    pub fn ratios(&self) -> Vec<f64> {
        self.plan
            .iter()
            .map(|p| match p {
                LayerPlan::Dense => 1.0,
                LayerPlan::Routed { ratio } => *ratio,
            })
            .collect()
    }

    pub fn routed_layers(&self) -> Vec<usize> {
        self.plan
            .iter()
            .enumerate()
            .filter(|(_, p)| matches!(p, LayerPlan::Routed { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn layer_spec(&self, l: usize) -> Option<RoutedLayer> {
        match self.plan[l] {
            LayerPlan::Dense => None,
            LayerPlan::Routed { ratio } => Some(RoutedLayer {
                mode: self.mode,
                alpha: self.alpha,
                ratio,
            }),
        }
    }
}
