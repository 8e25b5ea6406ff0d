use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{model_cost, WorkloadSpec};
use crate::model::{Model, ModelConfig};
use crate::pmod::{LayerPlan, ReweightMode, Routing};
use crate::schedule::{build_schedule, mean_retention, search_thresholds, RatioSchedule, ScheduleConfig, ScheduleVariant};

use super::metrics::kl_logits;
use super::task::{gen_task, Split, SynthTask};
use super::train::{evaluate, layer_groups, train, TrainConfig};
use super::{schema_line, HarnessError};

/// Matched-retention tolerance between compared runs.
pub const RETENTION_MATCH: f64 = 0.01;

/// Everything one training run needs apart from routing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub model: ModelConfig,
    pub task: SynthTask,
    pub train: TrainConfig,
    pub alpha: f64,
    /// Seeds model initialization; the task keeps its own seed.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub label: String,
    pub seed: u64,
    pub accuracy: f64,
    pub router_auc: Option<f64>,
    pub mean_retention: f64,
    pub flops_ratio: f64,
    pub final_loss: f64,
    pub diverged: bool,
}

/// FLOPs of one prompt (vision prefix plus the query token) relative to dense.
pub fn task_flops_ratio(cfg: &ModelConfig, ratios: &[f64], n_vision: usize) -> Result<f64, HarnessError> {
    let w = WorkloadSpec {
        n_vision,
        n_text_prompt: 1,
        n_decode: 0,
        bytes_per_element: 2,
    };
    Ok(model_cost(cfg, &RatioSchedule::from_ratios(ratios.to_vec()), &w)?.ratio_vs_baseline_flops)
}

/// Initializes, trains and evaluates one model. Divergence yields a row
/// flagged `diverged` with zero accuracy.
pub fn run_one(exp: &Experiment, label: &str, routing: Routing) -> Result<(Model, AblationResult), HarnessError> {
    let ratios = routing.ratios();
    let mut model = Model::init(exp.model, exp.seed)?.with_routing(routing)?;
    let flops_ratio = task_flops_ratio(&exp.model, &ratios, exp.task.n_vision)?;
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let mut row = AblationResult {
        label: label.to_string(),
        seed: exp.seed,
        accuracy: 0.0,
        router_auc: None,
        mean_retention: mean,
        flops_ratio,
        final_loss: f64::NAN,
        diverged: false,
    };
    match train(&mut model, &exp.task, &exp.train) {
        Ok(_) => {
            let e = evaluate(&model, &exp.task, exp.train.eval_samples)?;
            row.accuracy = e.accuracy;
            row.router_auc = e.deep_auc;
            row.final_loss = e.loss;
        }
        Err(HarnessError::Diverged { .. }) => row.diverged = true,
        Err(e) => return Err(e),
    }
    Ok((model, row))
}

fn check_matched(rows: &[(String, f64)], target: f64) -> Result<(), HarnessError> {
    for (label, mean) in rows {
        if (mean - target).abs() > RETENTION_MATCH {
            return Err(HarnessError::UnmatchedRetention {
                label: label.clone(),
                mean: *mean,
                target,
            });
        }
    }
    Ok(())
}

/// Routings of the reweighting ablation: vanilla, TanhNorm and TanhNorm+STRing
/// at a constant ratio equal to the PRD schedule's mean, then
/// TanhNorm+STRing under the PRD schedule itself.
pub fn reweight_arms(prd: &ScheduleConfig, alpha: f64) -> Result<Vec<(String, Routing)>, HarnessError> {
    let decay = build_schedule(prd)?;
    let mean = mean_retention(&decay);
    let constant = build_schedule(&ScheduleConfig::with_variant(
        ScheduleVariant::Constant { ratio: mean },
        0.0,
        1.0,
        prd.n_layers,
    ))?;
    let arms = vec![
        ("vanilla_mod".to_string(), Routing::from_schedule(&constant, ReweightMode::VanillaMoD, alpha)),
        ("tanh_norm".to_string(), Routing::from_schedule(&constant, ReweightMode::TanhNormOnly, alpha)),
        ("tanh_norm_string".to_string(), Routing::from_schedule(&constant, ReweightMode::TanhNormSTRing, alpha)),
        ("tanh_norm_string+prd".to_string(), Routing::from_schedule(&decay, ReweightMode::TanhNormSTRing, alpha)),
    ];
    let means: Vec<(String, f64)> = arms
        .iter()
        .map(|(l, r)| (l.clone(), r.ratios().iter().sum::<f64>() / r.ratios().len() as f64))
        .collect();
    check_matched(&means, mean)?;
    Ok(arms)
}

/// The five compared schedules, all tuned to mean retention `target`.
pub fn schedule_arms(target: f64, beta: f64, n_layers: usize) -> Result<Vec<(String, RatioSchedule)>, HarnessError> {
    let l = n_layers;
    let dense = l.div_ceil(2) as f64;
    let low = (target * l as f64 - dense) / (l / 2).max(1) as f64;
    let groups = layer_groups(l);
    let delta = 0.3;
    let (n1, n3) = (groups[0].len() as f64, groups[2].len().max(1) as f64);
    let levels = vec![target + delta, target, target - delta * n1 / n3];
    let floor = 0.01;
    let variants = [
        ScheduleVariant::Constant { ratio: target },
        ScheduleVariant::Interleaved { low },
        ScheduleVariant::Stepped { levels },
        ScheduleVariant::Linear {
            start: 1.0,
            end: 2.0 * target - 1.0,
        },
    ];
    let mut arms = Vec::new();
    for v in variants {
        let label = v.label().to_string();
        let s = build_schedule(&ScheduleConfig::with_variant(v, floor, 1.0, l))?;
        arms.push((label, s));
    }
    let found = search_thresholds(target, beta, l)?;
    arms.push(("cosine".to_string(), build_schedule(&found.config)?));
    let means: Vec<(String, f64)> = arms.iter().map(|(n, s)| (n.clone(), mean_retention(s))).collect();
    check_matched(&means, target)?;
    Ok(arms)
}

fn run_arms(exp: &Experiment, arms: Vec<(String, Routing)>, parallel: bool) -> Result<Vec<AblationResult>, HarnessError> {
    let go = |(label, routing): &(String, Routing)| run_one(exp, label, routing.clone()).map(|(_, r)| r);
    if parallel {
        arms.par_iter().map(go).collect()
    } else {
        arms.iter().map(go).collect()
    }
}

pub fn run_reweight_ablation(
    exp: &Experiment,
    prd: &ScheduleConfig,
    parallel: bool,
) -> Result<Vec<AblationResult>, HarnessError> {
    run_arms(exp, reweight_arms(prd, exp.alpha)?, parallel)
}

pub fn run_schedule_ablation(
    exp: &Experiment,
    target: f64,
    beta: f64,
    parallel: bool,
) -> Result<Vec<AblationResult>, HarnessError> {
    let arms = schedule_arms(target, beta, exp.model.n_layers)?
        .into_iter()
        .map(|(l, s)| (l, Routing::from_schedule(&s, ReweightMode::TanhNormSTRing, exp.alpha)))
        .collect();
    run_arms(exp, arms, parallel)
}

pub fn write_ablation_csv(rows: &[AblationResult], mut w: impl Write) -> Result<(), HarnessError> {
    schema_line(&mut w, "ablation")?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "label",
        "seed",
        "accuracy",
        "router_auc",
        "mean_retention",
        "flops_ratio",
        "final_loss",
        "diverged",
    ])?;
    for r in rows {
        out.write_record([
            r.label.clone(),
            r.seed.to_string(),
            r.accuracy.to_string(),
            r.router_auc.map_or(String::new(), |v| v.to_string()),
            r.mean_retention.to_string(),
            r.flops_ratio.to_string(),
            r.final_loss.to_string(),
            r.diverged.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerGroup {
    Shallow,
    Middle,
    Deep,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 3] = [LayerGroup::Shallow, LayerGroup::Middle, LayerGroup::Deep];

    pub fn label(self) -> &'static str {
        match self {
            LayerGroup::Shallow => "shallow",
            LayerGroup::Middle => "middle",
            LayerGroup::Deep => "deep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbePoint {
    pub group: LayerGroup,
    pub ratio: f64,
    pub accuracy: f64,
    /// Mean KL of the probed model's answer distribution from the unprobed one.
    pub kl: f64,
}

/// Routing of `base` with every layer of `group` routed at `ratio`.
pub fn with_group_ratio(base: &Routing, n_layers: usize, group: LayerGroup, ratio: f64) -> Routing {
    let mut r = base.clone();
    for &l in &layer_groups(n_layers)[group as usize] {
        r.plan[l] = if ratio >= 1.0 {
            LayerPlan::Dense
        } else {
            LayerPlan::Routed { ratio }
        };
    }
    r
}

/// Lowers the retention ratio of one layer group at a time, without
/// retraining, and measures accuracy and answer-logit KL against `model`.
pub fn probe_layer_groups(
    model: &Model,
    task: &SynthTask,
    ratios: &[f64],
    n_eval: usize,
) -> Result<Vec<ProbePoint>, HarnessError> {
    let samples = gen_task(task, model.cfg.d_model, Split::Eval, 0, n_eval);
    let mut base = Vec::with_capacity(samples.len());
    for ts in &samples {
        let (logits, _) = model.forward(&model.sequence(&ts.sample)?)?;
        base.push(logits);
    }
    let mut points = Vec::new();
    for group in LayerGroup::ALL {
        for &ratio in ratios {
            let routing = with_group_ratio(&model.routing, model.cfg.n_layers, group, ratio);
            let probed = model.clone().with_routing(routing)?;
            let (mut kl, mut correct) = (0.0, 0usize);
            for (ts, b) in samples.iter().zip(&base) {
                let (logits, _) = probed.forward(&probed.sequence(&ts.sample)?)?;
                let (row, label) = ts.sample.answers[0];
                kl += kl_logits(b.row(row), logits.row(row));
                if crate::model::argmax(logits.row(row)) == label {
                    correct += 1;
                }
            }
            let n = samples.len().max(1) as f64;
            points.push(ProbePoint {
                group,
                ratio,
                accuracy: correct as f64 / n,
                kl: kl / n,
            });
        }
    }
    Ok(points)
}

/// Trains the probe subject: TanhNorm+STRing at `ratio` in every layer.
pub fn train_probe_model(exp: &Experiment, ratio: f64) -> Result<(Model, AblationResult), HarnessError> {
    let routing = Routing::from_ratios(&vec![ratio; exp.model.n_layers], ReweightMode::TanhNormSTRing, exp.alpha);
    run_one(exp, "probe_base", routing)
}

pub fn write_probe_csv(points: &[ProbePoint], mut w: impl Write) -> Result<(), HarnessError> {
    schema_line(&mut w, "probe")?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["group", "ratio", "accuracy", "kl"])?;
    for p in points {
        out.write_record([
            p.group.label().to_string(),
            p.ratio.to_string(),
            p.accuracy.to_string(),
            p.kl.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;

    #[test]
    fn reweight_arms_share_retention() {
        let prd = ScheduleConfig::cosine(0.5, 0.1, 0.9, 8);
        let arms = reweight_arms(&prd, 0.2).unwrap();
        assert_eq!(arms.len(), 4);
        let means: Vec<f64> = arms.iter().map(|(_, r)| r.ratios().iter().sum::<f64>() / 8.0).collect();
        for m in &means {
            assert!((m - means[3]).abs() <= RETENTION_MATCH);
        }
        assert_eq!(arms[0].1.mode, ReweightMode::VanillaMoD);
        assert_eq!(arms[3].1.mode, ReweightMode::TanhNormSTRing);
    }

    #[test]
    fn schedule_arms_match_target() {
        let arms = schedule_arms(0.54, 0.5, 8).unwrap();
        let labels: Vec<&str> = arms.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["constant", "interleaved", "stepped", "linear", "cosine"]);
        for (l, s) in &arms {
            assert!((mean_retention(s) - 0.54).abs() <= RETENTION_MATCH, "{l}");
        }
        let inter = arms[1].1.ratios();
        assert_eq!((inter[0], inter[2]), (1.0, 1.0));
        assert!((inter[1] - 0.08).abs() < 1e-12 && inter[1] == inter[3]);
        for (_, s) in &arms[2..] {
            assert!(s.ratios().windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn unreachable_target_is_refused() {
        assert!(matches!(
            schedule_arms(0.3, 0.5, 8),
            Err(HarnessError::UnmatchedRetention { .. }) | Err(HarnessError::Schedule(_))
        ));
    }

    #[test]
    fn group_override_touches_only_that_group() {
        let base = Routing::from_ratios(&[0.7; 8], ReweightMode::TanhNormSTRing, 0.2);
        let r = with_group_ratio(&base, 8, LayerGroup::Deep, 0.1);
        assert_eq!(r.ratios(), vec![0.7, 0.7, 0.7, 0.7, 0.7, 0.7, 0.1, 0.1]);
        let r = with_group_ratio(&base, 8, LayerGroup::Shallow, 1.0);
        assert_eq!(r.ratios()[..4], [1.0, 1.0, 1.0, 0.7]);
    }
}
