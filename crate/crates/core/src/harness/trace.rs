use std::io::Write;

use serde::Serialize;

use crate::model::{Model, TokenSequence};

use super::{schema_line, HarnessError};

/// Selection of one routed layer for one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub sample: usize,
    /// 1-based.
    pub layer: usize,
    /// Ascending vision indices the layer processed.
    pub selected: Vec<usize>,
    /// Normalized weight of every vision token.
    pub normalized_weights: Vec<f64>,
}

/// One record per routed layer, in layer order.
pub fn emit_trace(model: &Model, seq: &TokenSequence, sample: usize) -> Result<Vec<TraceRecord>, HarnessError> {
    let (_, acts) = model.forward(seq)?;
    Ok((0..model.cfg.n_layers)
        .filter_map(|l| {
            acts.router(l).map(|r| TraceRecord {
                sample,
                layer: l + 1,
                selected: r.selected.clone(),
                normalized_weights: r.normalized_weights.clone(),
            })
        })
        .collect())
}

/// Long format: `sample,layer,token_index,selected,normalized_weight`, one
/// row per (routed layer, vision token).
pub fn write_trace_csv(records: &[TraceRecord], mut w: impl Write) -> Result<(), HarnessError> {
    schema_line(&mut w, "trace")?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sample", "layer", "token_index", "selected", "normalized_weight"])?;
    for r in records {
        let mut chosen = vec![false; r.normalized_weights.len()];
        for &i in &r.selected {
            chosen[i] = true;
        }
        for (i, w) in r.normalized_weights.iter().enumerate() {
            out.write_record([
                r.sample.to_string(),
                r.layer.to_string(),
                i.to_string(),
                u8::from(chosen[i]).to_string(),
                w.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::Rng;
    use crate::pmod::{retained_count, ReweightMode, Routing};

    #[test]
    fn one_row_per_routed_layer_and_vision_token() {
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 8,
            max_seq: 32,
        };
        let mut m = Model::init(cfg, 4).unwrap();
        let mut rng = Rng::new(4);
        for p in &mut m.params.predictors {
            p.weight = rng.normal_matrix(16, 1, 1.0);
        }
        let ratios = [1.0, 0.5, 0.25];
        let m = m
            .with_routing(Routing::from_ratios(&ratios, ReweightMode::TanhNormSTRing, 0.2))
            .unwrap();
        let seq = TokenSequence::with_prefix(rng.normal_matrix(10, 16, 1.0), 9).unwrap();
        let recs = emit_trace(&m, &seq, 7).unwrap();
        assert_eq!(recs.iter().map(|r| r.layer).collect::<Vec<_>>(), [2, 3]);
        for (r, &ratio) in recs.iter().zip(&ratios[1..]) {
            assert_eq!(r.selected.len(), retained_count(9, ratio));
            assert!(r.normalized_weights.iter().all(|w| w.abs() < 0.2));
        }
        let mut buf = Vec::new();
        write_trace_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# pmod trace v1");
        assert_eq!(lines[1], "sample,layer,token_index,selected,normalized_weight");
        assert_eq!(lines.len(), 2 + 2 * 9);
        let ones = lines[2..].iter().filter(|l| l.split(',').nth(3) == Some("1")).count();
        assert_eq!(ones, retained_count(9, 0.5) + retained_count(9, 0.25));
    }
}
