//! Toy causal decoder with exact manual backward and KV-cache decoding.

mod block;
mod cache;
pub mod checkpoint;
mod config;
mod params;
mod sequence;

pub use block::{block_backward, block_forward, BlockActs, RMS_EPS};
pub use cache::{KvCache, LayerCache};
pub use config::ModelConfig;
pub use params::{LayerParams, Params, Predictor};
pub use sequence::{Modality, Sample, TokenSequence};

use crate::numerics::{inv_rms, matmul, matmul_nt, matmul_tn, rmsnorm_backward, Matrix, NumericsError, Rng};
use crate::pmod::{layer_backward, layer_forward, PmodActs, PmodError, RouterState, Routing};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("parameter `{0}` is not finite")]
    NonFiniteParameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("routing plan covers {plan} layers but the model has {layers}")]
    RoutingMismatch { plan: usize, layers: usize },
    #[error("cache has {cache} layers but the model has {layers}")]
    CacheMismatch { cache: usize, layers: usize },
    #[error("decode expects one text token after position {last:?}, got {detail}")]
    BadDecodeToken { last: Option<usize>, detail: String },
    #[error("backward through a populated kv cache is not supported")]
    BackwardThroughCache,
    #[error("answer row {row} or label {label} out of range")]
    BadAnswer { row: usize, label: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Routing(#[from] PmodError),
}

#[derive(Debug, Clone)]
enum LayerActs {
    Dense(BlockActs),
    Routed(Box<PmodActs>),
}

/// Everything [`Model::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardActs {
    layers: Vec<LayerActs>,
    final_in: Matrix,
    final_inv: Vec<f64>,
    final_h: Matrix,
}

impl ForwardActs {
    /// Router decision of layer `l`, if it is routed.
    pub fn router(&self, l: usize) -> Option<&RouterState> {
        match &self.layers[l] {
            LayerActs::Dense(_) => None,
            LayerActs::Routed(a) => Some(a.router()),
        }
    }
}

/// Decoder parameters plus the routing plan they run under.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
    pub routing: Routing,
}

impl Model {
    pub fn new(cfg: ModelConfig, params: Params, routing: Routing) -> Result<Self, ModelError> {
        cfg.validate()?;
        if routing.plan.len() != cfg.n_layers {
            return Err(ModelError::RoutingMismatch {
                plan: routing.plan.len(),
                layers: cfg.n_layers,
            });
        }
        Ok(Self { cfg, params, routing })
    }

    /// Freshly initialized dense model.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let params = Params::init(&cfg, &mut Rng::new(seed));
        Self::new(cfg, params, Routing::dense(cfg.n_layers))
    }

    pub fn with_routing(mut self, routing: Routing) -> Result<Self, ModelError> {
        if routing.plan.len() != self.cfg.n_layers {
            return Err(ModelError::RoutingMismatch {
                plan: routing.plan.len(),
                layers: self.cfg.n_layers,
            });
        }
        self.routing = routing;
        Ok(self)
    }

    /// Vision rows followed by the embedding rows of `text`.
    pub fn sequence(&self, sample: &Sample) -> Result<TokenSequence, ModelError> {
        let d = self.cfg.d_model;
        if sample.vision.cols() != d && sample.vision.rows() > 0 {
            return Err(ModelError::Shape(format!(
                "vision embeddings have width {}, model width {d}",
                sample.vision.cols()
            )));
        }
        let mut data = sample.vision.data().to_vec();
        for &tok in &sample.text {
            if tok >= self.cfg.vocab_size {
                return Err(ModelError::InvalidSequence(format!("token {tok} outside vocabulary")));
            }
            data.extend_from_slice(self.params.embed.row(tok));
        }
        let emb = Matrix::from_vec(sample.len(), d, data)?;
        TokenSequence::with_prefix(emb, sample.n_vision())
    }

    fn check_inputs(&self, seq: &TokenSequence) -> Result<(), ModelError> {
        if seq.len() > self.cfg.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: seq.len(),
                max: self.cfg.max_seq,
            });
        }
        if seq.embeddings().cols() != self.cfg.d_model {
            return Err(ModelError::Shape(format!(
                "embeddings of width {}, model width {}",
                seq.embeddings().cols(),
                self.cfg.d_model
            )));
        }
        if let Some(name) = self.params.first_non_finite() {
            return Err(ModelError::NonFiniteParameter(name));
        }
        Ok(())
    }

    fn run(
        &self,
        seq: &TokenSequence,
        mut cache: Option<&mut KvCache>,
    ) -> Result<(Matrix, ForwardActs), ModelError> {
        self.check_inputs(seq)?;
        let nv = seq.n_vision();
        let pos = seq.positions();
        let mut h = seq.embeddings().clone();
        let mut layers = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let lc = cache.as_deref_mut().map(|c| c.layer_mut(l));
            let p = &self.params.layers[l];
            match self.routing.layer_spec(l) {
                None => {
                    let (y, a) = block_forward(&self.cfg, p, &h, pos, lc)?;
                    layers.push(LayerActs::Dense(a));
                    h = y;
                }
                Some(spec) => {
                    let (y, _, a) =
                        layer_forward(&self.cfg, p, &self.params.predictors[l], spec, &h, nv, pos, lc)?;
                    layers.push(LayerActs::Routed(Box::new(a)));
                    h = y;
                }
            }
        }
        let (logits, final_inv, final_h) = self.head(&h)?;
        Ok((
            logits,
            ForwardActs {
                layers,
                final_in: h,
                final_inv,
                final_h,
            },
        ))
    }

    fn head(&self, h: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix), ModelError> {
        let g = self.params.norm_final.row(0);
        let mut normed = Matrix::zeros(h.rows(), h.cols());
        let mut invs = Vec::with_capacity(h.rows());
        for i in 0..h.rows() {
            let inv = inv_rms(h.row(i), RMS_EPS);
            for (o, (v, gk)) in normed.row_mut(i).iter_mut().zip(h.row(i).iter().zip(g)) {
                *o = v * inv * gk;
            }
            invs.push(inv);
        }
        let logits = matmul(&normed, &self.params.lm_head)?;
        Ok((logits, invs, normed))
    }

    /// Causal forward over the full sequence; logits are `n × vocab`.
    pub fn forward(&self, seq: &TokenSequence) -> Result<(Matrix, ForwardActs), ModelError> {
        self.run(seq, None)
    }

    /// Forward that also fills a fresh cache with every processed token.
    pub fn prefill(&self, seq: &TokenSequence) -> Result<(Matrix, KvCache), ModelError> {
        let mut cache = KvCache::new(&self.cfg);
        let (logits, _) = self.run(seq, Some(&mut cache))?;
        Ok((logits, cache))
    }

    /// Logits for one appended text token, attending to each layer's cache.
    pub fn decode_step(&self, cache: &mut KvCache, token: &TokenSequence) -> Result<Matrix, ModelError> {
        if cache.n_layers() != self.cfg.n_layers {
            return Err(ModelError::CacheMismatch {
                cache: cache.n_layers(),
                layers: self.cfg.n_layers,
            });
        }
        let last = (0..cache.n_layers()).filter_map(|l| cache.layer(l).last_position()).max();
        if token.len() != 1 || token.modality()[0] != Modality::Text {
            return Err(ModelError::BadDecodeToken {
                last,
                detail: format!("{} tokens, modality {:?}", token.len(), token.modality()),
            });
        }
        if last.is_some_and(|p| token.positions()[0] <= p) {
            return Err(ModelError::BadDecodeToken {
                last,
                detail: format!("position {}", token.positions()[0]),
            });
        }
        let (logits, _) = self.run(token, Some(cache))?;
        Ok(logits)
    }

    /// Exact parameter gradients and `∂L/∂embeddings` given `∂L/∂logits`.
    pub fn backward(&self, acts: &ForwardActs, d_logits: &Matrix) -> Result<(Params, Matrix), ModelError> {
        let n = acts.final_in.rows();
        if d_logits.shape() != (n, self.cfg.vocab_size) {
            return Err(ModelError::Shape(format!(
                "logit gradient {:?}, expected {:?}",
                d_logits.shape(),
                (n, self.cfg.vocab_size)
            )));
        }
        let mut grads = Params::zeros(&self.cfg);
        grads.lm_head = matmul_tn(&acts.final_h, d_logits)?;
        let d_normed = matmul_nt(d_logits, &self.params.lm_head)?;
        let mut dh = Matrix::zeros(n, self.cfg.d_model);
        for i in 0..n {
            let g = rmsnorm_backward(
                acts.final_in.row(i),
                self.params.norm_final.row(0),
                acts.final_inv[i],
                d_normed.row(i),
                grads.norm_final.row_mut(0),
            );
            dh.row_mut(i).copy_from_slice(&g);
        }
        for l in (0..self.cfg.n_layers).rev() {
            let p = &self.params.layers[l];
            match &acts.layers[l] {
                LayerActs::Dense(a) => {
                    let (g, dx) = block_backward(&self.cfg, p, a, &dh)?;
                    grads.layers[l] = g;
                    dh = dx;
                }
                LayerActs::Routed(a) => {
                    let (g, gp, dx) = layer_backward(&self.cfg, p, &self.params.predictors[l], a, &dh)?;
                    grads.layers[l] = g;
                    grads.predictors[l] = gp;
                    dh = dx;
                }
            }
        }
        Ok((grads, dh))
    }

    /// Mean cross-entropy over the sample's answer rows, with full gradients
    /// (text embedding rows included).
    pub fn loss_and_grad(&self, sample: &Sample) -> Result<(f64, Params, ForwardActs), ModelError> {
        let seq = self.sequence(sample)?;
        let (logits, acts) = self.forward(&seq)?;
        let (loss, d_logits) = cross_entropy(&logits, &sample.answers)?;
        let (mut grads, d_emb) = self.backward(&acts, &d_logits)?;
        let nv = sample.n_vision();
        for (r, &tok) in sample.text.iter().enumerate() {
            for (g, &u) in grads.embed.row_mut(tok).iter_mut().zip(d_emb.row(nv + r)) {
                *g += u;
            }
        }
        Ok((loss, grads, acts))
    }

    pub fn loss(&self, sample: &Sample) -> Result<f64, ModelError> {
        let seq = self.sequence(sample)?;
        let (logits, _) = self.forward(&seq)?;
        Ok(cross_entropy(&logits, &sample.answers)?.0)
    }

    /// Greedy continuation using the KV cache.
    pub fn greedy_decode(&self, prompt: &TokenSequence, steps: usize) -> Result<Vec<usize>, ModelError> {
        let (logits, mut cache) = self.prefill(prompt)?;
        let mut next = argmax(logits.row(logits.rows() - 1));
        let mut pos = prompt.positions().last().map_or(0, |p| p + 1);
        let mut out = Vec::with_capacity(steps);
        for step in 0..steps {
            out.push(next);
            if step + 1 == steps {
                break;
            }
            let tok = self.text_token(next, pos)?;
            let l = self.decode_step(&mut cache, &tok)?;
            next = argmax(l.row(0));
            pos += 1;
        }
        Ok(out)
    }

    /// Greedy continuation by re-running the full forward at every step.
    pub fn greedy_decode_uncached(&self, prompt: &TokenSequence, steps: usize) -> Result<Vec<usize>, ModelError> {
        let mut seq = prompt.clone();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (logits, _) = self.forward(&seq)?;
            let next = argmax(logits.row(logits.rows() - 1));
            out.push(next);
            let pos = seq.positions().last().map_or(0, |p| p + 1);
            seq = append(&seq, &self.text_token(next, pos)?)?;
        }
        Ok(out)
    }

    pub fn text_token(&self, token: usize, position: usize) -> Result<TokenSequence, ModelError> {
        if token >= self.cfg.vocab_size {
            return Err(ModelError::InvalidSequence(format!("token {token} outside vocabulary")));
        }
        TokenSequence::new(
            Matrix::row_vector(self.params.embed.row(token)),
            vec![Modality::Text],
            vec![position],
            0,
        )
    }
}

/// Concatenates two sequences, keeping their positions.
pub fn append(a: &TokenSequence, b: &TokenSequence) -> Result<TokenSequence, ModelError> {
    let emb = a.embeddings().vstack(b.embeddings())?;
    let modality = a.modality().iter().chain(b.modality()).copied().collect();
    let positions = a.positions().iter().chain(b.positions()).copied().collect();
    TokenSequence::new(emb, modality, positions, a.batch_id)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Log-softmax of a logit row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean cross-entropy over `(row, label)` pairs and its logit gradient.
pub fn cross_entropy(logits: &Matrix, answers: &[(usize, usize)]) -> Result<(f64, Matrix), ModelError> {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    if answers.is_empty() {
        return Ok((0.0, grad));
    }
    let m = answers.len() as f64;
    let mut loss = 0.0;
    for &(row, label) in answers {
        if row >= logits.rows() || label >= logits.cols() {
            return Err(ModelError::BadAnswer { row, label });
        }
        let lp = log_softmax(logits.row(row));
        loss -= lp[label] / m;
        for (g, l) in grad.row_mut(row).iter_mut().zip(&lp) {
            *g += l.exp() / m;
        }
        grad[(row, label)] -= 1.0 / m;
    }
    Ok((loss, grad))
}
