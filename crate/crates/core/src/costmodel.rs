//! Analytic inference cost of dense and routed decoders.
//!
//! Conventions:
//!
//! * One multiply-accumulate (MAC) is 2 FLOPs. MAC counts match, exactly,
//!   what the instrumented kernels in [`crate::numerics`] record during a
//!   forward pass.
//! * A block processing `t` new tokens with `p` entries already cached does
//!   `t·(4d² + 3d·d_ff)` projection/MLP MACs and `2d` MACs per visible
//!   (query, key) pair, with `t·p + t(t+1)/2` pairs under causal masking.
//! * Element-wise work is charged per element: RMSNorm 4 (two per block),
//!   rotary 3 per query/key coordinate, residual add 1, SiLU gate 5 per
//!   hidden unit, 5 per attention score per head (scale + softmax).
//! * A routed layer adds the predictor (`d` MACs per vision token) and one
//!   multiply per coordinate of every vision token for reweighting.
//! * The LM head (final norm + `d·vocab` MACs) runs once for the last
//!   prompt position and once per decoded token. Embedding lookup is free.
//! * KV bytes = 2 (K and V) × d × bytes-per-element × cached entries.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::pmod::retained_count;
use crate::schedule::RatioSchedule;

const NORM_FLOPS: u64 = 4;
const ROPE_FLOPS: u64 = 3;
const GATE_FLOPS: u64 = 5;
const SCORE_FLOPS: u64 = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("schedule has {schedule} layers, model has {layers}")]
    LengthMismatch { schedule: usize, layers: usize },
    #[error("csv: {0}")]
    Csv(String),
}

/// Input/output token counts of one inference request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub n_vision: usize,
    pub n_text_prompt: usize,
    pub n_decode: usize,
    #[serde(default = "default_bytes")]
    pub bytes_per_element: usize,
}

fn default_bytes() -> usize {
    2
}

impl WorkloadSpec {
    /// High-resolution request: 2880 vision tokens, 64 prompt tokens, 16 decoded.
    pub const HIGH_RES: WorkloadSpec = WorkloadSpec {
        n_vision: 2880,
        n_text_prompt: 64,
        n_decode: 16,
        bytes_per_element: 2,
    };

    pub fn kv_bytes_per_token_per_layer(&self, cfg: &ModelConfig) -> u64 {
        2 * cfg.d_model as u64 * self.bytes_per_element as u64
    }
}

/// Causal (query, key) pairs for `t` new tokens behind `prefix` cached entries.
pub fn attention_pairs(t: u64, prefix: u64) -> u64 {
    t * prefix + t * (t + 1) / 2
}

/// MACs of one block on `t` tokens with `kv_prefix` cached entries visible.
pub fn layer_macs(cfg: &ModelConfig, t: usize, kv_prefix: usize) -> u64 {
    let (d, ff) = (cfg.d_model as u64, cfg.d_ff as u64);
    let t = t as u64;
    t * (4 * d * d + 3 * d * ff) + 2 * d * attention_pairs(t, kv_prefix as u64)
}

/// FLOPs of one block: `2 × MACs` plus element-wise work.
pub fn layer_flops(cfg: &ModelConfig, t: usize, kv_prefix: usize) -> u64 {
    let (d, ff, h) = (cfg.d_model as u64, cfg.d_ff as u64, cfg.n_heads as u64);
    let tt = t as u64;
    let elementwise = tt * (2 * NORM_FLOPS * d + 2 * ROPE_FLOPS * d + 2 * d + GATE_FLOPS * ff)
        + SCORE_FLOPS * h * attention_pairs(tt, kv_prefix as u64);
    2 * layer_macs(cfg, t, kv_prefix) + elementwise
}

/// MLP share of [`layer_flops`], linear in `d_ff`.
pub fn mlp_flops(cfg: &ModelConfig, t: usize) -> u64 {
    let (d, ff) = (cfg.d_model as u64, cfg.d_ff as u64);
    t as u64 * (2 * 3 * d * ff + GATE_FLOPS * ff)
}

/// Predictor MACs of a routed layer.
pub fn router_macs(cfg: &ModelConfig, n_vision: usize) -> u64 {
    (n_vision * cfg.d_model) as u64
}

pub fn router_flops(cfg: &ModelConfig, n_vision: usize) -> u64 {
    2 * router_macs(cfg, n_vision) + (n_vision * cfg.d_model) as u64
}

/// LM head MACs for `rows` positions.
pub fn head_macs(cfg: &ModelConfig, rows: usize) -> u64 {
    (rows * cfg.d_model * cfg.vocab_size) as u64
}

pub fn head_flops(cfg: &ModelConfig, rows: usize) -> u64 {
    2 * head_macs(cfg, rows) + NORM_FLOPS * (rows * cfg.d_model) as u64
}

/// MACs of one full forward over `n_vision + n_text` tokens with no cache:
/// every layer, the routers of routed layers, and the LM head on every row.
pub fn forward_macs(cfg: &ModelConfig, ratios: &[f64], n_vision: usize, n_text: usize) -> u64 {
    let layers: u64 = ratios
        .iter()
        .map(|&r| {
            let t = processed_vision(n_vision, r) + n_text;
            let router = if r < 1.0 && n_vision > 0 { router_macs(cfg, n_vision) } else { 0 };
            layer_macs(cfg, t, 0) + router
        })
        .sum();
    layers + head_macs(cfg, n_vision + n_text)
}

/// Vision tokens layer processes at retention `ratio` (all of them when dense).
pub fn processed_vision(n_vision: usize, ratio: f64) -> usize {
    if ratio >= 1.0 {
        n_vision
    } else {
        retained_count(n_vision, ratio)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    /// 1-based.
    pub layer: usize,
    pub ratio: f64,
    pub vision_processed: usize,
    pub prefill_tokens: usize,
    pub prefill_flops: u64,
    pub decode_flops: u64,
    pub flops: u64,
    pub kv_entries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub per_layer: Vec<LayerCost>,
    pub head_flops: u64,
    /// `Σ per_layer.flops + head_flops`.
    pub total_flops: u64,
    pub total_kv_bytes: u64,
    pub baseline_flops: u64,
    pub baseline_kv_bytes: u64,
    pub ratio_vs_baseline_flops: f64,
    /// Whole-sequence KV ratio (vision, prompt and decoded tokens).
    pub ratio_vs_baseline_kv: f64,
    /// KV ratio over the vision tokens alone.
    pub vision_kv_ratio: f64,
}

struct Totals {
    per_layer: Vec<LayerCost>,
    head: u64,
    flops: u64,
    kv_bytes: u64,
    vision_entries: usize,
}

fn accumulate(cfg: &ModelConfig, ratios: &[f64], w: &WorkloadSpec) -> Totals {
    let per_token = w.kv_bytes_per_token_per_layer(cfg);
    let mut per_layer = Vec::with_capacity(ratios.len());
    let mut vision_entries = 0;
    for (l, &ratio) in ratios.iter().enumerate() {
        let vision = processed_vision(w.n_vision, ratio);
        let t = vision + w.n_text_prompt;
        let mut prefill = layer_flops(cfg, t, 0);
        if ratio < 1.0 && w.n_vision > 0 {
            prefill += router_flops(cfg, w.n_vision);
        }
        let decode: u64 = (0..w.n_decode).map(|j| layer_flops(cfg, 1, t + j)).sum();
        vision_entries += vision;
        per_layer.push(LayerCost {
            layer: l + 1,
            ratio,
            vision_processed: vision,
            prefill_tokens: t,
            prefill_flops: prefill,
            decode_flops: decode,
            flops: prefill + decode,
            kv_entries: t + w.n_decode,
        });
    }
    let head = head_flops(cfg, 1 + w.n_decode);
    let flops = per_layer.iter().map(|c| c.flops).sum::<u64>() + head;
    let kv_bytes = per_layer.iter().map(|c| c.kv_entries as u64 * per_token).sum();
    Totals {
        per_layer,
        head,
        flops,
        kv_bytes,
        vision_entries,
    }
}

/// Prefill + decode cost of `cfg` under `sched`, against the dense baseline.
pub fn model_cost(cfg: &ModelConfig, sched: &RatioSchedule, w: &WorkloadSpec) -> Result<CostReport, CostError> {
    if sched.len() != cfg.n_layers {
        return Err(CostError::LengthMismatch {
            schedule: sched.len(),
            layers: cfg.n_layers,
        });
    }
    let routed = accumulate(cfg, sched.ratios(), w);
    let dense = accumulate(cfg, &vec![1.0; cfg.n_layers], w);
    let vision_kv_ratio = if w.n_vision == 0 {
        1.0
    } else {
        routed.vision_entries as f64 / dense.vision_entries as f64
    };
    Ok(CostReport {
        per_layer: routed.per_layer,
        head_flops: routed.head,
        total_flops: routed.flops,
        total_kv_bytes: routed.kv_bytes,
        baseline_flops: dense.flops,
        baseline_kv_bytes: dense.kv_bytes,
        ratio_vs_baseline_flops: routed.flops as f64 / dense.flops as f64,
        ratio_vs_baseline_kv: routed.kv_bytes as f64 / dense.kv_bytes as f64,
        vision_kv_ratio,
    })
}

/// `Σ_l k(n_vision, R′_l) / (L · n_vision)`: KV storage ratio of the vision tokens.
pub fn kv_ratio(sched: &RatioSchedule, n_vision: usize) -> f64 {
    if n_vision == 0 || sched.is_empty() {
        return 1.0;
    }
    let kept: usize = sched.ratios().iter().map(|&r| processed_vision(n_vision, r)).sum();
    kept as f64 / (sched.len() * n_vision) as f64
}

impl CostReport {
    /// Per-layer CSV followed by a `total` row.
    pub fn write_csv(&self, mut w: impl Write) -> Result<(), CostError> {
        let err = |e: csv::Error| CostError::Csv(e.to_string());
        crate::schema_line(&mut w, "cost").map_err(|e| CostError::Csv(e.to_string()))?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "layer",
            "ratio",
            "vision_processed",
            "prefill_tokens",
            "prefill_flops",
            "decode_flops",
            "flops",
            "kv_entries",
        ])
        .map_err(err)?;
        for c in &self.per_layer {
            out.write_record([
                c.layer.to_string(),
                c.ratio.to_string(),
                c.vision_processed.to_string(),
                c.prefill_tokens.to_string(),
                c.prefill_flops.to_string(),
                c.decode_flops.to_string(),
                c.flops.to_string(),
                c.kv_entries.to_string(),
            ])
            .map_err(err)?;
        }
        let entries: usize = self.per_layer.iter().map(|c| c.kv_entries).sum();
        out.write_record([
            "total".to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            self.head_flops.to_string(),
            self.total_flops.to_string(),
            entries.to_string(),
        ])
        .map_err(err)?;
        out.flush().map_err(|e| CostError::Csv(e.to_string()))
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5} {:>7} {:>7} {:>14} {:>9}", "layer", "ratio", "vision", "TFLOPs", "kv")?;
        for c in &self.per_layer {
            writeln!(
                f,
                "{:>5} {:>7.4} {:>7} {:>14.6} {:>9}",
                c.layer,
                c.ratio,
                c.vision_processed,
                c.flops as f64 / 1e12,
                c.kv_entries
            )?;
        }
        writeln!(f, "head TFLOPs            {:.6}", self.head_flops as f64 / 1e12)?;
        writeln!(f, "total TFLOPs           {:.4}", self.total_flops as f64 / 1e12)?;
        writeln!(f, "baseline TFLOPs        {:.4}", self.baseline_flops as f64 / 1e12)?;
        writeln!(f, "FLOPs ratio            {:.4}", self.ratio_vs_baseline_flops)?;
        writeln!(f, "KV bytes               {}", self.total_kv_bytes)?;
        writeln!(f, "KV ratio (all tokens)  {:.4}", self.ratio_vs_baseline_kv)?;
        write!(f, "KV ratio (vision)      {:.4}", self.vision_kv_ratio)
    }
}
