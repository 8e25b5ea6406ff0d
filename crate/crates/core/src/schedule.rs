//! Per-layer token retention schedules.
//!
//! The progressive schedule is a shifted cosine, `R_l = ½·cos(πl/L) + β` for
//! `l = 1..=L`, followed by clamping: `R_l ≥ max` makes layer `l` dense
//! (ratio 1), `R_l ≤ min` is raised to `min`. Constant, interleaved, stepped
//! and linear schedules are provided for comparison and go through the same
//! clamp.

use std::f64::consts::PI;
use std::io::Write;

/// Grid step of [`search_thresholds`].
pub const GRID_STEP: f64 = 0.01;
/// Accepted distance between achieved and target mean retention.
pub const SEARCH_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("layer index {l} outside 1..={n_layers}")]
    LayerOutOfRange { l: usize, n_layers: usize },
    #[error("shift factor beta = {0} outside (0, 1]")]
    InvalidBeta(f64),
    #[error("thresholds must satisfy 0 <= min <= max <= 1, got min {min}, max {max}")]
    InvalidThresholds { min: f64, max: f64 },
    #[error("schedule needs at least one layer")]
    NoLayers,
    #[error("invalid {variant} parameters: {reason}")]
    InvalidVariant { variant: &'static str, reason: String },
    #[error("prd_ratio applies to the cosine variant only")]
    NotCosine,
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleVariant {
    /// Shifted cosine decay driven by `beta`.
    Cosine,
    /// Affine from `start` at layer 1 to `end` at layer L.
    Linear { start: f64, end: f64 },
    /// Equal-size layer groups, one non-increasing level each.
    Stepped { levels: Vec<f64> },
    /// Odd layers dense, even layers at `low`.
    Interleaved { low: f64 },
    Constant { ratio: f64 },
}

impl ScheduleVariant {
    pub fn label(&self) -> &'static str {
        match self {
            ScheduleVariant::Cosine => "cosine",
            ScheduleVariant::Linear { .. } => "linear",
            ScheduleVariant::Stepped { .. } => "stepped",
            ScheduleVariant::Interleaved { .. } => "interleaved",
            ScheduleVariant::Constant { .. } => "constant",
        }
    }

    /// Whether the schedule is non-increasing by construction.
    pub fn is_decaying(&self) -> bool {
        matches!(
            self,
            ScheduleVariant::Cosine | ScheduleVariant::Linear { .. } | ScheduleVariant::Stepped { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub variant: ScheduleVariant,
    pub beta: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub n_layers: usize,
    /// When false the schedule keeps the raw ratios, which may fall to zero
    /// or below. Such schedules are for analysis only and cannot route.
    pub clamp: bool,
}

impl ScheduleConfig {
    /// Cosine schedule.
    pub fn cosine(beta: f64, min_ratio: f64, max_ratio: f64, n_layers: usize) -> Self {
        Self {
            variant: ScheduleVariant::Cosine,
            beta,
            min_ratio,
            max_ratio,
            n_layers,
            clamp: true,
        }
    }

    /// Cosine schedule that keeps the raw ratios.
    pub fn cosine_unclamped(beta: f64, n_layers: usize) -> Self {
        Self {
            clamp: false,
            ..Self::cosine(beta, 0.0, 1.0, n_layers)
        }
    }

    pub fn with_variant(variant: ScheduleVariant, min_ratio: f64, max_ratio: f64, n_layers: usize) -> Self {
        Self {
            variant,
            beta: 0.5,
            min_ratio,
            max_ratio,
            n_layers,
            clamp: true,
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.n_layers == 0 {
            return Err(ScheduleError::NoLayers);
        }
        let (min, max) = (self.min_ratio, self.max_ratio);
        if !(0.0..=1.0).contains(&min) || !(0.0..=1.0).contains(&max) || min > max {
            return Err(ScheduleError::InvalidThresholds { min, max });
        }
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        let bad = |reason: String| ScheduleError::InvalidVariant {
            variant: self.variant.label(),
            reason,
        };
        match &self.variant {
            ScheduleVariant::Cosine => {
                if !unit(self.beta) {
                    return Err(ScheduleError::InvalidBeta(self.beta));
                }
            }
            ScheduleVariant::Linear { start, end } => {
                if !unit(*start) || !unit(*end) || end > start {
                    return Err(bad(format!("need 0 < end <= start <= 1, got {start} -> {end}")));
                }
            }
            ScheduleVariant::Stepped { levels } => {
                if levels.is_empty() || levels.len() > self.n_layers {
                    return Err(bad(format!("{} levels for {} layers", levels.len(), self.n_layers)));
                }
                if !levels.iter().all(|&v| unit(v)) || levels.windows(2).any(|w| w[1] > w[0]) {
                    return Err(bad(format!("levels {levels:?} must be non-increasing in (0, 1]")));
                }
            }
            ScheduleVariant::Interleaved { low } => {
                if !unit(*low) {
                    return Err(bad(format!("low ratio {low} outside (0, 1]")));
                }
            }
            ScheduleVariant::Constant { ratio } => {
                if !unit(*ratio) {
                    return Err(bad(format!("ratio {ratio} outside (0, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// Per-layer retention ratios with the raw values they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioSchedule {
    raw: Vec<f64>,
    ratios: Vec<f64>,
    config: Option<ScheduleConfig>,
}

impl RatioSchedule {
    /// Schedule from explicit ratios (no clamping, no generating config).
    pub fn from_ratios(ratios: Vec<f64>) -> Self {
        Self {
            raw: ratios.clone(),
            ratios,
            config: None,
        }
    }

    pub fn all_ones(n_layers: usize) -> Self {
        Self::from_ratios(vec![1.0; n_layers])
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn config(&self) -> Option<&ScheduleConfig> {
        self.config.as_ref()
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    /// CSV with columns `layer,raw_ratio,clamped_ratio`, layers 1-based.
    pub fn write_csv(&self, mut w: impl Write) -> Result<(), ScheduleError> {
        let csv_err = |e: csv::Error| ScheduleError::Csv(e.to_string());
        crate::schema_line(&mut w, "schedule").map_err(|e| ScheduleError::Csv(e.to_string()))?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "raw_ratio", "clamped_ratio"]).map_err(csv_err)?;
        for (l, (raw, r)) in self.raw.iter().zip(&self.ratios).enumerate() {
            out.write_record([(l + 1).to_string(), raw.to_string(), r.to_string()])
                .map_err(csv_err)?;
        }
        out.flush().map_err(|e| ScheduleError::Csv(e.to_string()))?;
        Ok(())
    }
}

/// Unclamped cosine ratio of 1-based layer `l`.
pub fn prd_ratio(cfg: &ScheduleConfig, l: usize) -> Result<f64, ScheduleError> {
    if cfg.variant != ScheduleVariant::Cosine {
        return Err(ScheduleError::NotCosine);
    }
    if l == 0 || l > cfg.n_layers {
        return Err(ScheduleError::LayerOutOfRange {
            l,
            n_layers: cfg.n_layers,
        });
    }
    Ok(0.5 * (PI * l as f64 / cfg.n_layers as f64).cos() + cfg.beta)
}

/// `1` at or above `max`, `min` at or below `min`, otherwise unchanged.
pub fn clamp_ratio(cfg: &ScheduleConfig, r: f64) -> f64 {
    if r >= cfg.max_ratio {
        1.0
    } else if r <= cfg.min_ratio {
        cfg.min_ratio
    } else {
        r
    }
}

fn raw_ratio(cfg: &ScheduleConfig, l: usize) -> Result<f64, ScheduleError> {
    let n = cfg.n_layers;
    Ok(match &cfg.variant {
        ScheduleVariant::Cosine => prd_ratio(cfg, l)?,
        ScheduleVariant::Linear { start, end } => {
            if n == 1 {
                *start
            } else {
                start + (end - start) * (l - 1) as f64 / (n - 1) as f64
            }
        }
        ScheduleVariant::Stepped { levels } => levels[stepped_group(l - 1, n, levels.len())],
        ScheduleVariant::Interleaved { low } => {
            if l % 2 == 1 {
                1.0
            } else {
                *low
            }
        }
        ScheduleVariant::Constant { ratio } => *ratio,
    })
}

/// Group of 0-based layer `i` when `n` layers split into `g` near-equal
/// consecutive groups, larger groups first (8 into 3 gives 3/3/2).
pub fn stepped_group(i: usize, n: usize, g: usize) -> usize {
    let base = n / g;
    let extra = n % g;
    let big = extra * (base + 1);
    if i < big {
        i / (base + 1)
    } else {
        extra + (i - big) / base
    }
}

pub fn build_schedule(cfg: &ScheduleConfig) -> Result<RatioSchedule, ScheduleError> {
    cfg.validate()?;
    let raw = (1..=cfg.n_layers)
        .map(|l| raw_ratio(cfg, l))
        .collect::<Result<Vec<_>, _>>()?;
    let ratios = if cfg.clamp {
        raw.iter().map(|&r| clamp_ratio(cfg, r)).collect()
    } else {
        raw.clone()
    };
    Ok(RatioSchedule {
        raw,
        ratios,
        config: Some(cfg.clone()),
    })
}

/// Arithmetic mean of the clamped ratios.
pub fn mean_retention(s: &RatioSchedule) -> f64 {
    if s.ratios.is_empty() {
        return 0.0;
    }
    s.ratios.iter().sum::<f64>() / s.ratios.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSearch {
    pub config: ScheduleConfig,
    pub achieved: f64,
    pub within_tolerance: bool,
}

/// Grid search over `(min, max)` thresholds of a cosine schedule for the pair
/// whose mean retention is closest to `target`. Ties keep the first pair in
/// (min ascending, max ascending) order.
pub fn search_thresholds(target: f64, beta: f64, n_layers: usize) -> Result<ThresholdSearch, ScheduleError> {
    let probe = ScheduleConfig::cosine_unclamped(beta, n_layers);
    probe.validate()?;
    let raw = (1..=n_layers)
        .map(|l| prd_ratio(&probe, l))
        .collect::<Result<Vec<_>, _>>()?;
    let steps = (1.0 / GRID_STEP).round() as usize;
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for i in 0..=steps {
        let min = i as f64 / steps as f64;
        for j in i..=steps {
            let max = j as f64 / steps as f64;
            let cfg = ScheduleConfig::cosine(beta, min, max, n_layers);
            let mean = raw.iter().map(|&r| clamp_ratio(&cfg, r)).sum::<f64>() / n_layers as f64;
            let err = (mean - target).abs();
            if best.is_none_or(|b| err < b.0 - 1e-12) {
                best = Some((err, min, max, mean));
            }
        }
    }
    let (err, min, max, achieved) = best.expect("grid is non-empty");
    Ok(ThresholdSearch {
        config: ScheduleConfig::cosine(beta, min, max, n_layers),
        achieved,
        within_tolerance: err <= SEARCH_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prd_ratio_values() {
        let c = ScheduleConfig::cosine_unclamped(0.5, 32);
        assert_eq!(prd_ratio(&c, 16).unwrap(), 0.5 + 0.5 * (PI / 2.0).cos());
        assert!((prd_ratio(&c, 16).unwrap() - 0.5).abs() < 1e-16);
        assert_eq!(prd_ratio(&c, 32).unwrap(), 0.0);
        let oracle = 0.5 * (PI / 32.0).cos() + 0.5;
        assert_eq!(prd_ratio(&c, 1).unwrap(), oracle);
        // the quoted six-digit value 0.997595 is off by about 3e-6
        assert!((oracle - 0.9975924).abs() < 1e-7);
        assert!((oracle - 0.997595).abs() < 5e-6);
        assert!(matches!(prd_ratio(&c, 0), Err(ScheduleError::LayerOutOfRange { .. })));
        assert!(prd_ratio(&c, 33).is_err());
    }

    #[test]
    fn clamp_examples() {
        let c = ScheduleConfig::cosine(0.5, 0.1, 0.9, 8);
        assert_eq!(clamp_ratio(&c, 0.95), 1.0);
        assert_eq!(clamp_ratio(&c, 0.9), 1.0);
        assert_eq!(clamp_ratio(&c, 0.02), 0.1);
        assert_eq!(clamp_ratio(&c, 0.5), 0.5);
    }

    #[test]
    fn variant_examples() {
        let s = build_schedule(&ScheduleConfig::with_variant(
            ScheduleVariant::Constant { ratio: 0.54 },
            0.0,
            1.0,
            4,
        ))
        .unwrap();
        assert_eq!(s.ratios(), &[0.54; 4]);
        let s = build_schedule(&ScheduleConfig::with_variant(
            ScheduleVariant::Interleaved { low: 0.08 },
            0.0,
            1.0,
            4,
        ))
        .unwrap();
        assert_eq!(s.ratios(), &[1.0, 0.08, 1.0, 0.08]);
        let s = build_schedule(&ScheduleConfig::with_variant(
            ScheduleVariant::Stepped { levels: vec![0.9, 0.5, 0.2] },
            0.0,
            1.0,
            8,
        ))
        .unwrap();
        assert_eq!(s.ratios(), &[0.9, 0.9, 0.9, 0.5, 0.5, 0.5, 0.2, 0.2]);
        let s = build_schedule(&ScheduleConfig::with_variant(
            ScheduleVariant::Linear { start: 0.8, end: 0.1 },
            0.0,
            1.0,
            8,
        ))
        .unwrap();
        assert!((s.ratios()[0] - 0.8).abs() < 1e-15 && (s.ratios()[7] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn clamped_cosine_layer_values() {
        let s = build_schedule(&ScheduleConfig::cosine(0.5, 0.1, 1.0, 32)).unwrap();
        assert!((s.ratios()[15] - 0.5).abs() < 1e-15);
        assert_eq!(s.ratios()[31], 0.1);
        assert!(s.ratios().windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn unclamped_mean_closed_form() {
        for &(beta, want) in &[(0.5, 0.484375), (0.4, 0.384375)] {
            let cfg = ScheduleConfig::cosine_unclamped(beta, 32);
            let s = build_schedule(&cfg).unwrap();
            // direct summation oracle
            let direct: f64 = (1..=32)
                .map(|l| 0.5 * (PI * l as f64 / 32.0).cos() + beta)
                .sum::<f64>()
                / 32.0;
            assert!((mean_retention(&s) - direct).abs() < 1e-14);
            assert!((mean_retention(&s) - want).abs() < 1e-12);
            assert!((want - (beta - 1.0 / 64.0)).abs() < 1e-15);
        }
        assert_eq!(mean_retention(&RatioSchedule::all_ones(5)), 1.0);
    }

    #[test]
    fn search_examples() {
        let r = search_thresholds(0.484375, 0.5, 32).unwrap();
        assert_eq!((r.config.min_ratio, r.config.max_ratio), (0.0, 1.0));
        assert!((r.achieved - 0.484375).abs() < 1e-12);

        let r = search_thresholds(0.537, 0.5, 32).unwrap();
        assert!(r.within_tolerance && (0.532..=0.542).contains(&r.achieved));

        let r = search_thresholds(1.0, 0.5, 32).unwrap();
        assert_eq!(r.achieved, 1.0);
        let s = build_schedule(&r.config).unwrap();
        assert!(s.ratios().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn invalid_configs() {
        assert_eq!(
            ScheduleConfig::cosine(0.0, 0.1, 0.9, 8).validate(),
            Err(ScheduleError::InvalidBeta(0.0))
        );
        assert!(ScheduleConfig::cosine(1.5, 0.1, 0.9, 8).validate().is_err());
        assert!(ScheduleConfig::cosine(0.5, 0.6, 0.5, 8).validate().is_err());
        assert!(ScheduleConfig::cosine(0.5, 0.1, 0.9, 0).validate().is_err());
        let stepped_up = ScheduleConfig::with_variant(
            ScheduleVariant::Stepped { levels: vec![0.2, 0.5] },
            0.0,
            1.0,
            4,
        );
        assert!(stepped_up.validate().is_err());
    }

    #[test]
    fn stepped_groups_split_evenly() {
        let groups: Vec<usize> = (0..8).map(|i| stepped_group(i, 8, 3)).collect();
        assert_eq!(groups, vec![0, 0, 0, 1, 1, 1, 2, 2]);
        let groups: Vec<usize> = (0..6).map(|i| stepped_group(i, 6, 3)).collect();
        assert_eq!(groups, vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn csv_layout() {
        let s = build_schedule(&ScheduleConfig::cosine(0.5, 0.1, 0.9, 4)).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# pmod schedule v1");
        assert_eq!(lines[1], "layer,raw_ratio,clamped_ratio");
        assert_eq!(lines.len(), 6);
        assert!(lines[5].starts_with("4,0,0.1"));
    }

    proptest! {
        #[test]
        fn clamped_cosine_invariants(
            beta in 0.05f64..1.0,
            lo in 0usize..=100,
            hi in 0usize..=100,
            layers in 1usize..64,
        ) {
            let (min, max) = (lo.min(hi) as f64 / 100.0, lo.max(hi) as f64 / 100.0);
            let s = build_schedule(&ScheduleConfig::cosine(beta, min, max, layers)).unwrap();
            for w in s.ratios().windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            for w in s.raw().windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-15);
            }
            for &r in s.ratios() {
                prop_assert!(r == 1.0 || (min..=max).contains(&r));
            }
        }

        #[test]
        fn beta_orders_mean(b1 in 0.05f64..1.0, b2 in 0.05f64..1.0, layers in 1usize..64, lo in 0usize..50, hi in 50usize..=100) {
            let (lo_b, hi_b) = (b1.min(b2), b1.max(b2));
            let (min, max) = (lo as f64 / 100.0, hi as f64 / 100.0);
            let m1 = mean_retention(&build_schedule(&ScheduleConfig::cosine(lo_b, min, max, layers)).unwrap());
            let m2 = mean_retention(&build_schedule(&ScheduleConfig::cosine(hi_b, min, max, layers)).unwrap());
            prop_assert!(m1 <= m2 + 1e-12);
        }
    }
}
