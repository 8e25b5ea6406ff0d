//! Key-value retrieval over a noisy vision prefix.
//!
//! Each sample plants `n_signal` signal tokens among `n_vision` vision rows.
//! A signal token is `marker + key_code[k] + value_code[v]` with distinct
//! keys per sample; the rest are isotropic Gaussian noise. A noise token is
//! a distractor with probability `distractor_rate`: it also carries a random
//! key and value code, but no marker. Marker and codes are mutually
//! orthogonal with norm `signal_scale`. The text suffix is
//! a single query token naming one planted key, and the answer at that row
//! is the value token bound to it.
//!
//! Text vocabulary: query tokens `0..n_keys`, value tokens
//! `n_keys..n_keys + n_values`.

use serde::{Deserialize, Serialize};

use crate::model::Sample;
use crate::numerics::{Matrix, Rng};

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTask {
    pub n_vision: usize,
    pub n_signal: usize,
    pub n_keys: usize,
    pub n_values: usize,
    pub noise_std: f64,
    /// Norm of the marker and of every key and value code.
    pub signal_scale: f64,
    #[serde(default)]
    pub distractor_rate: f64,
    pub seed: u64,
}

impl SynthTask {
    pub const TOY: SynthTask = SynthTask {
        n_vision: 64,
        n_signal: 8,
        n_keys: 8,
        n_values: 16,
        noise_std: 1.0,
        signal_scale: 5.0,
        distractor_rate: 0.5,
        seed: 0,
    };

    pub fn validate(&self, d_model: usize, vocab_size: usize) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidTask(m));
        if self.n_vision == 0 || self.n_signal == 0 {
            return bad("need at least one vision and one signal token".into());
        }
        if self.n_signal > self.n_vision {
            return bad(format!("{} signal tokens exceed {} vision tokens", self.n_signal, self.n_vision));
        }
        if self.n_signal > self.n_keys {
            return bad(format!("{} signal tokens need distinct keys, only {}", self.n_signal, self.n_keys));
        }
        if self.n_values == 0 {
            return bad("need at least one value".into());
        }
        if self.n_keys + self.n_values > vocab_size {
            return bad(format!(
                "{} keys + {} values exceed vocabulary {vocab_size}",
                self.n_keys, self.n_values
            ));
        }
        if !(self.noise_std >= 0.0 && self.signal_scale > 0.0) {
            return bad("noise_std must be >= 0 and signal_scale > 0".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad(format!("distractor_rate {} outside [0, 1]", self.distractor_rate));
        }
        if 1 + self.n_keys + self.n_values > d_model {
            return bad(format!(
                "width {d_model} cannot hold {} orthogonal codes",
                1 + self.n_keys + self.n_values
            ));
        }
        Ok(())
    }

    pub fn query_token(&self, key: usize) -> usize {
        key
    }

    pub fn value_token(&self, value: usize) -> usize {
        self.n_keys + value
    }
}

/// Fixed random directions shared by every sample of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub marker: Vec<f64>,
    pub keys: Matrix,
    pub values: Matrix,
}

/// `rows` random orthogonal directions of norm `norm` (Gram-Schmidt).
fn orthogonal_rows(rng: &mut Rng, rows: usize, d: usize, norm: f64) -> Matrix {
    assert!(rows <= d, "{rows} orthogonal rows need width >= {rows}, got {d}");
    let mut m = rng.normal_matrix(rows, d, 1.0);
    for i in 0..rows {
        for j in 0..i {
            let proj: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum::<f64>() / (norm * norm);
            let prev = m.row(j).to_vec();
            for (v, p) in m.row_mut(i).iter_mut().zip(prev) {
                *v -= proj * p;
            }
        }
        let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in m.row_mut(i) {
            *v *= norm / n;
        }
    }
    m
}

impl Codebook {
    pub fn new(task: &SynthTask, d: usize) -> Self {
        let mut rng = Rng::new(task.seed).fork(0);
        let all = orthogonal_rows(&mut rng, 1 + task.n_keys + task.n_values, d, task.signal_scale);
        let kend = 1 + task.n_keys;
        Self {
            marker: all.row(0).to_vec(),
            keys: all.gather_rows(&(1..kend).collect::<Vec<_>>()),
            values: all.gather_rows(&(kend..all.rows()).collect::<Vec<_>>()),
        }
    }
}

/// One generated sample with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub sample: Sample,
    /// Vision rows that carry signal, ascending.
    pub signal_positions: Vec<usize>,
    /// `(key, value)` planted at each entry of `signal_positions`.
    pub bindings: Vec<(usize, usize)>,
    pub query_key: usize,
    pub label: usize,
}

impl TaskSample {
    pub fn is_signal(&self) -> Vec<bool> {
        let mut mask = vec![false; self.sample.n_vision()];
        for &p in &self.signal_positions {
            mask[p] = true;
        }
        mask
    }
}

/// Which independent sample stream to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Samples `offset..offset + count` of `split`. Each sample depends only on
/// `(task.seed, split, index)`.
pub fn gen_task(task: &SynthTask, d: usize, split: Split, offset: usize, count: usize) -> Vec<TaskSample> {
    let book = Codebook::new(task, d);
    let stream = Rng::new(task.seed).fork(match split {
        Split::Train => 1,
        Split::Eval => 2,
    });
    (offset..offset + count)
        .map(|i| gen_one(task, &book, d, &mut stream.fork(i as u64)))
        .collect()
}

fn gen_one(task: &SynthTask, book: &Codebook, d: usize, rng: &mut Rng) -> TaskSample {
    let mut slots: Vec<usize> = (0..task.n_vision).collect();
    rng.shuffle(&mut slots);
    let mut signal_positions = slots[..task.n_signal].to_vec();
    signal_positions.sort_unstable();
    let mut keys: Vec<usize> = (0..task.n_keys).collect();
    rng.shuffle(&mut keys);
    let bindings: Vec<(usize, usize)> = keys[..task.n_signal]
        .iter()
        .map(|&k| (k, rng.below(task.n_values)))
        .collect();

    let mut vision = rng.normal_matrix(task.n_vision, d, task.noise_std);
    for &p in &slots[task.n_signal..] {
        if rng.uniform() < task.distractor_rate {
            let (k, v) = (rng.below(task.n_keys), rng.below(task.n_values));
            for (j, x) in vision.row_mut(p).iter_mut().enumerate() {
                *x += book.keys[(k, j)] + book.values[(v, j)];
            }
        }
    }
    for (&p, &(k, v)) in signal_positions.iter().zip(&bindings) {
        let row = vision.row_mut(p);
        for (j, x) in row.iter_mut().enumerate() {
            *x = book.marker[j] + book.keys[(k, j)] + book.values[(v, j)];
        }
    }
    let (query_key, value) = bindings[rng.below(task.n_signal)];
    let label = task.value_token(value);
    TaskSample {
        sample: Sample {
            vision,
            text: vec![task.query_token(query_key)],
            answers: vec![(task.n_vision, label)],
        },
        signal_positions,
        bindings,
        query_key,
        label,
    }
}

/// Answers a sample from its vision rows alone: signal tokens are those
/// with the largest marker projection, and keys and values are decoded by
/// nearest code.
pub fn lookup_oracle(task: &SynthTask, book: &Codebook, s: &TaskSample) -> Option<usize> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let nearest = |codes: &Matrix, x: &[f64]| {
        (0..codes.rows())
            .map(|i| {
                let dist: f64 = codes.row(i).iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum();
                (i, dist)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    };
    let v = &s.sample.vision;
    let mut order: Vec<usize> = (0..v.rows()).collect();
    order.sort_by(|&a, &b| dot(v.row(b), &book.marker).total_cmp(&dot(v.row(a), &book.marker)));
    for &p in order.iter().take(task.n_signal) {
        let rest: Vec<f64> = v.row(p).iter().zip(&book.marker).map(|(x, m)| x - m).collect();
        let key = (0..task.n_keys)
            .max_by(|&a, &b| dot(&rest, book.keys.row(a)).total_cmp(&dot(&rest, book.keys.row(b))))?;
        if key == s.query_key {
            let value: Vec<f64> = rest.iter().zip(book.keys.row(key)).map(|(x, k)| x - k).collect();
            return nearest(&book.values, &value).map(|i| task.value_token(i));
        }
    }
    None
}
