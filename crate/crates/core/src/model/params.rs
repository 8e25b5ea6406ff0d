use crate::numerics::{Matrix, Rng};

use super::ModelConfig;

/// Weights of one pre-norm decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub norm_attn: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub norm_mlp: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

/// Linear map from a token embedding to one routing weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    /// `d × 1`
    pub weight: Matrix,
    /// `1 × 1`
    pub bias: Matrix,
}

impl Predictor {
    pub fn zeros(d: usize) -> Self {
        Self {
            weight: Matrix::zeros(d, 1),
            bias: Matrix::zeros(1, 1),
        }
    }
}

/// Full parameter set. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub predictors: Vec<Predictor>,
    pub norm_final: Matrix,
    pub lm_head: Matrix,
}

impl LayerParams {
    fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        let s_in = 1.0 / (d as f64).sqrt();
        let s_out = s_in / (2.0 * cfg.n_layers as f64).sqrt();
        Self {
            norm_attn: Matrix::filled(1, d, 1.0),
            wq: rng.normal_matrix(d, d, s_in),
            wk: rng.normal_matrix(d, d, s_in),
            wv: rng.normal_matrix(d, d, s_in),
            wo: rng.normal_matrix(d, d, s_out),
            norm_mlp: Matrix::filled(1, d, 1.0),
            w_gate: rng.normal_matrix(d, ff, s_in),
            w_up: rng.normal_matrix(d, ff, s_in),
            w_down: rng.normal_matrix(ff, d, 1.0 / (ff as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt()),
        }
    }

    fn zeros(cfg: &ModelConfig) -> Self {
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        Self {
            norm_attn: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            norm_mlp: Matrix::zeros(1, d),
            w_gate: Matrix::zeros(d, ff),
            w_up: Matrix::zeros(d, ff),
            w_down: Matrix::zeros(ff, d),
        }
    }

    fn tensors(&self) -> [(&'static str, &Matrix); 9] {
        [
            ("norm_attn", &self.norm_attn),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("norm_mlp", &self.norm_mlp),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 9] {
        [
            ("norm_attn", &mut self.norm_attn),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("norm_mlp", &mut self.norm_mlp),
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }
}

impl Params {
    /// Random initialization. Predictors start at zero so an inserted routed
    /// layer initially leaves every token's scale untouched.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let embed = rng.normal_matrix(cfg.vocab_size, d, 1.0);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams::init(cfg, rng))
            .collect();
        let lm_head = rng.normal_matrix(d, cfg.vocab_size, 1.0 / (d as f64).sqrt());
        Self {
            embed,
            layers,
            predictors: (0..cfg.n_layers).map(|_| Predictor::zeros(d)).collect(),
            norm_final: Matrix::filled(1, d, 1.0),
            lm_head,
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            embed: Matrix::zeros(cfg.vocab_size, d),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(cfg)).collect(),
            predictors: (0..cfg.n_layers).map(|_| Predictor::zeros(d)).collect(),
            norm_final: Matrix::zeros(1, d),
            lm_head: Matrix::zeros(d, cfg.vocab_size),
        }
    }

    /// Every tensor with its stable checkpoint name, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        for (i, p) in self.predictors.iter().enumerate() {
            out.push((format!("predictors.{i}.weight"), &p.weight));
            out.push((format!("predictors.{i}.bias"), &p.bias));
        }
        out.push(("norm_final".to_string(), &self.norm_final));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.tensors_mut() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        for (i, p) in self.predictors.iter_mut().enumerate() {
            out.push((format!("predictors.{i}.weight"), &mut p.weight));
            out.push((format!("predictors.{i}.bias"), &mut p.bias));
        }
        out.push(("norm_final".to_string(), &mut self.norm_final));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    pub fn first_non_finite(&self) -> Option<String> {
        self.named()
            .into_iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n)
    }

    /// `self += s * other`, tensor by tensor.
    pub fn axpy(&mut self, s: f64, other: &Params) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.axpy(s, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.named_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.named()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.data().len()).sum()
    }
}
