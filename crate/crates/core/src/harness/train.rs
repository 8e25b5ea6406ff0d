use serde::{Deserialize, Serialize};

use crate::model::{argmax, Model, ModelError, Params};
use crate::schedule::stepped_group;

use super::metrics::auc;
use super::task::{gen_task, Split, SynthTask};
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Momentum coefficient, or Adam's first-moment decay.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables it.
    #[serde(default)]
    pub clip_norm: f64,
    pub eval_samples: usize,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr: 3e-3,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            clip_norm: 1.0,
            eval_samples: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.clip_norm < 0.0 {
            return Err(HarnessError::InvalidTrain(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss before each update.
    pub loss_curve: Vec<f64>,
}

struct OptState {
    m: Params,
    v: Params,
    t: i32,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn step(model: &mut Model, cfg: &TrainConfig, state: &mut OptState, grads: &Params) {
    match cfg.optimizer {
        Optimizer::Sgd => model.params.axpy(-cfg.lr, grads),
        Optimizer::Momentum => {
            state.m.scale(cfg.momentum);
            state.m.axpy(1.0, grads);
            model.params.axpy(-cfg.lr, &state.m);
        }
        Optimizer::Adam => {
            state.t += 1;
            let b1 = cfg.momentum;
            let c1 = 1.0 - b1.powi(state.t);
            let c2 = 1.0 - ADAM_BETA2.powi(state.t);
            let tensors = model
                .params
                .named_mut()
                .into_iter()
                .zip(state.m.named_mut())
                .zip(state.v.named_mut())
                .zip(grads.named());
            for ((((_, p), (_, m)), (_, v)), (_, g)) in tensors {
                let it = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
                for (((p, m), v), &g) in it {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

fn diverged(step: usize, e: ModelError) -> HarnessError {
    match e {
        ModelError::NonFiniteParameter(name) => HarnessError::Diverged {
            step,
            detail: format!("parameter {name} is not finite"),
        },
        other => HarnessError::Model(other),
    }
}

/// Trains `model` in place on the task's training stream. Step `s` uses
/// training samples `s·batch .. (s+1)·batch`.
pub fn train(model: &mut Model, task: &SynthTask, cfg: &TrainConfig) -> Result<TrainReport, HarnessError> {
    cfg.validate()?;
    task.validate(model.cfg.d_model, model.cfg.vocab_size)?;
    let mut state = OptState {
        m: Params::zeros(&model.cfg),
        v: Params::zeros(&model.cfg),
        t: 0,
    };
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for s in 0..cfg.steps {
        let batch = gen_task(task, model.cfg.d_model, Split::Train, s * cfg.batch_size, cfg.batch_size);
        let mut grads = Params::zeros(&model.cfg);
        let mut loss = 0.0;
        for ts in &batch {
            let (l, g, _) = model.loss_and_grad(&ts.sample).map_err(|e| diverged(s, e))?;
            loss += l;
            grads.axpy(1.0, &g);
        }
        let inv = 1.0 / cfg.batch_size as f64;
        loss *= inv;
        grads.scale(inv);
        if !loss.is_finite() {
            return Err(HarnessError::Diverged {
                step: s,
                detail: format!("loss {loss}"),
            });
        }
        if cfg.clip_norm > 0.0 {
            let n = grads.norm();
            if n > cfg.clip_norm {
                grads.scale(cfg.clip_norm / n);
            }
        }
        loss_curve.push(loss);
        step(model, cfg, &mut state, &grads);
    }
    Ok(TrainReport { loss_curve })
}

/// Layer index ranges (0-based) of the shallow, middle and deep groups:
/// three consecutive near-equal groups, larger first (8 layers: 3/3/2).
pub fn layer_groups(n_layers: usize) -> [Vec<usize>; 3] {
    let mut g: [Vec<usize>; 3] = Default::default();
    for l in 0..n_layers {
        g[stepped_group(l, n_layers, 3.min(n_layers))].push(l);
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    /// Signal-vs-noise AUC of raw router weights per layer (None when dense).
    pub layer_auc: Vec<Option<f64>>,
    /// AUC of each token's mean raw weight over the routed deep-group layers.
    pub deep_auc: Option<f64>,
}

/// Accuracy, loss and router AUC on the first `n` evaluation samples.
pub fn evaluate(model: &Model, task: &SynthTask, n: usize) -> Result<Evaluation, HarnessError> {
    let l_count = model.cfg.n_layers;
    let mut pos: Vec<Vec<f64>> = vec![Vec::new(); l_count];
    let mut neg: Vec<Vec<f64>> = vec![Vec::new(); l_count];
    let deep: Vec<usize> = layer_groups(l_count)[2].clone();
    let (mut deep_pos, mut deep_neg) = (Vec::new(), Vec::new());
    let (mut correct, mut loss) = (0usize, 0.0);
    for ts in gen_task(task, model.cfg.d_model, Split::Eval, 0, n) {
        let seq = model.sequence(&ts.sample)?;
        let (logits, acts) = model.forward(&seq)?;
        let (row, label) = ts.sample.answers[0];
        if argmax(logits.row(row)) == label {
            correct += 1;
        }
        loss += crate::model::cross_entropy(&logits, &ts.sample.answers)?.0;
        let mask = ts.is_signal();
        for l in 0..l_count {
            if let Some(r) = acts.router(l) {
                for (&w, &sig) in r.raw_weights.iter().zip(&mask) {
                    if sig {
                        pos[l].push(w);
                    } else {
                        neg[l].push(w);
                    }
                }
            }
        }
        let routed: Vec<_> = deep.iter().filter_map(|&l| acts.router(l)).collect();
        if !routed.is_empty() {
            for (i, &sig) in mask.iter().enumerate() {
                let m = routed.iter().map(|r| r.raw_weights[i]).sum::<f64>() / routed.len() as f64;
                if sig {
                    deep_pos.push(m);
                } else {
                    deep_neg.push(m);
                }
            }
        }
    }
    let layer_auc = (0..l_count).map(|l| auc(&pos[l], &neg[l])).collect();
    let denom = n.max(1) as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / denom,
        loss: loss / denom,
        layer_auc,
        deep_auc: auc(&deep_pos, &deep_neg),
    })
}
