//! One pre-norm decoder block `T`: rotary multi-head causal attention and a
//! SiLU-gated MLP, each wrapped in an RMSNorm residual branch.

use crate::numerics::{
    counter, dot, inv_rms, matmul, matmul_nt, matmul_tn, rmsnorm_backward, silu, silu_grad,
    softmax_in_place, Matrix,
};

use super::{LayerCache, LayerParams, ModelConfig, ModelError};

pub const RMS_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

/// Intermediates saved by [`block_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockActs {
    x: Matrix,
    positions: Vec<usize>,
    prefix: usize,
    inv1: Vec<f64>,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention probabilities, indexed `[i * n_heads + h]`.
    probs: Vec<Vec<f64>>,
    attn: Matrix,
    x1: Matrix,
    inv2: Vec<f64>,
    h2: Matrix,
    gate: Matrix,
    up: Matrix,
    act: Matrix,
}

impl BlockActs {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

fn norm_rows(x: &Matrix, gain: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut invs = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let inv = inv_rms(x.row(i), RMS_EPS);
        for (o, (v, g)) in out.row_mut(i).iter_mut().zip(x.row(i).iter().zip(gain.row(0))) {
            *o = v * inv * g;
        }
        invs.push(inv);
    }
    (out, invs)
}

fn norm_rows_backward(
    x: &Matrix,
    gain: &Matrix,
    invs: &[f64],
    dy: &Matrix,
    d_gain: &mut Matrix,
) -> Matrix {
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let g = rmsnorm_backward(x.row(i), gain.row(0), invs[i], dy.row(i), d_gain.row_mut(0));
        dx.row_mut(i).copy_from_slice(&g);
    }
    dx
}

/// Rotates coordinate pairs of every head by angle `pos · base^(−2m/head_dim)`.
/// `inverse` applies the transpose rotation, used by the backward pass.
pub(crate) fn rope_row(row: &mut [f64], pos: usize, n_heads: usize, inverse: bool) {
    let hd = row.len() / n_heads;
    for h in 0..n_heads {
        let head = &mut row[h * hd..(h + 1) * hd];
        for m in 0..hd / 2 {
            let freq = ROPE_BASE.powf(-(2.0 * m as f64) / hd as f64);
            let (sin, cos) = (pos as f64 * freq).sin_cos();
            let sin = if inverse { -sin } else { sin };
            let (a, b) = (head[2 * m], head[2 * m + 1]);
            head[2 * m] = a * cos - b * sin;
            head[2 * m + 1] = a * sin + b * cos;
        }
    }
}

/// Runs the block over `x` (rows in causal order). With a cache, each row also
/// attends to every cached entry, and the new keys/values are appended.
pub fn block_forward(
    cfg: &ModelConfig,
    p: &LayerParams,
    x: &Matrix,
    positions: &[usize],
    mut cache: Option<&mut LayerCache>,
) -> Result<(Matrix, BlockActs), ModelError> {
    let t = x.rows();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    if x.cols() != d || positions.len() != t {
        return Err(ModelError::Shape(format!(
            "block input {:?} with {} positions, expected width {d}",
            x.shape(),
            positions.len()
        )));
    }
    let prefix = cache.as_ref().map_or(0, |c| c.len());
    let scale = 1.0 / (hd as f64).sqrt();

    let (h1, inv1) = norm_rows(x, &p.norm_attn);
    let mut q = matmul(&h1, &p.wq)?;
    let mut k = matmul(&h1, &p.wk)?;
    let v = matmul(&h1, &p.wv)?;
    for (i, &pos) in positions.iter().enumerate() {
        rope_row(q.row_mut(i), pos, heads, false);
        rope_row(k.row_mut(i), pos, heads, false);
    }

    let key_at = |j: usize| -> &[f64] {
        if j < prefix {
            cache.as_deref().expect("prefix implies cache").key(j)
        } else {
            k.row(j - prefix)
        }
    };
    let mut probs = Vec::with_capacity(t * heads);
    let mut attn = Matrix::zeros(t, d);
    for i in 0..t {
        let visible = prefix + i + 1;
        for h in 0..heads {
            let span = h * hd..(h + 1) * hd;
            let qh = &q.row(i)[span.clone()];
            let mut scores: Vec<f64> = (0..visible)
                .map(|j| dot(qh, &key_at(j)[span.clone()]) * scale)
                .collect();
            softmax_in_place(&mut scores);
            let out = &mut attn.row_mut(i)[span.clone()];
            for (j, &pj) in scores.iter().enumerate() {
                let vj = if j < prefix {
                    &cache.as_deref().expect("prefix implies cache").value(j)[span.clone()]
                } else {
                    &v.row(j - prefix)[span.clone()]
                };
                for (o, &vv) in out.iter_mut().zip(vj) {
                    *o += pj * vv;
                }
            }
            counter::record_macs((visible * hd) as u64);
            probs.push(scores);
        }
    }
    if let Some(c) = cache {
        for i in 0..t {
            c.push(k.row(i), v.row(i), positions[i]);
        }
    }

    let o = matmul(&attn, &p.wo)?;
    let x1 = x.add(&o)?;
    let (h2, inv2) = norm_rows(&x1, &p.norm_mlp);
    let gate = matmul(&h2, &p.w_gate)?;
    let up = matmul(&h2, &p.w_up)?;
    let mut act = Matrix::zeros(t, cfg.d_ff);
    for ((a, &g), &u) in act.data_mut().iter_mut().zip(gate.data()).zip(up.data()) {
        *a = silu(g) * u;
    }
    let m = matmul(&act, &p.w_down)?;
    let y = x1.add(&m)?;

    let acts = BlockActs {
        x: x.clone(),
        positions: positions.to_vec(),
        prefix,
        inv1,
        h1,
        q,
        k,
        v,
        probs,
        attn,
        x1,
        inv2,
        h2,
        gate,
        up,
        act,
    };
    Ok((y, acts))
}

/// Exact gradients of the block. Returns parameter gradients and `∂L/∂x`.
pub fn block_backward(
    cfg: &ModelConfig,
    p: &LayerParams,
    acts: &BlockActs,
    dy: &Matrix,
) -> Result<(LayerParams, Matrix), ModelError> {
    if acts.prefix != 0 {
        return Err(ModelError::BackwardThroughCache);
    }
    if dy.shape() != acts.x.shape() {
        return Err(ModelError::Shape(format!(
            "upstream gradient {:?} does not match block output {:?}",
            dy.shape(),
            acts.x.shape()
        )));
    }
    let t = acts.x.rows();
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut g_norm_attn = Matrix::zeros(1, cfg.d_model);
    let mut g_norm_mlp = Matrix::zeros(1, cfg.d_model);

    // MLP branch
    let g_w_down = matmul_tn(&acts.act, dy)?;
    let d_act = matmul_nt(dy, &p.w_down)?;
    let mut d_gate = Matrix::zeros(t, cfg.d_ff);
    let mut d_up = Matrix::zeros(t, cfg.d_ff);
    for idx in 0..d_act.data().len() {
        let g = acts.gate.data()[idx];
        let da = d_act.data()[idx];
        d_gate.data_mut()[idx] = da * acts.up.data()[idx] * silu_grad(g);
        d_up.data_mut()[idx] = da * silu(g);
    }
    let g_w_gate = matmul_tn(&acts.h2, &d_gate)?;
    let g_w_up = matmul_tn(&acts.h2, &d_up)?;
    let mut d_h2 = matmul_nt(&d_gate, &p.w_gate)?;
    d_h2.add_assign(&matmul_nt(&d_up, &p.w_up)?);
    let mut d_x1 = dy.clone();
    d_x1.add_assign(&norm_rows_backward(&acts.x1, &p.norm_mlp, &acts.inv2, &d_h2, &mut g_norm_mlp));

    // attention branch
    let g_wo = matmul_tn(&acts.attn, &d_x1)?;
    let d_attn = matmul_nt(&d_x1, &p.wo)?;
    let mut d_q = Matrix::zeros(t, cfg.d_model);
    let mut d_k = Matrix::zeros(t, cfg.d_model);
    let mut d_v = Matrix::zeros(t, cfg.d_model);
    for i in 0..t {
        for h in 0..heads {
            let span = h * hd..(h + 1) * hd;
            let pr = &acts.probs[i * heads + h];
            let d_out = &d_attn.row(i)[span.clone()];
            let dp: Vec<f64> = (0..=i)
                .map(|j| {
                    let vj = &acts.v.row(j)[span.clone()];
                    d_out.iter().zip(vj).map(|(a, b)| a * b).sum()
                })
                .collect();
            let weighted: f64 = pr.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..=i {
                let pj = pr[j];
                for (dvv, &g) in d_v.row_mut(j)[span.clone()].iter_mut().zip(d_out) {
                    *dvv += pj * g;
                }
                let ds = pj * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in span.clone() {
                    d_q[(i, c)] += ds * acts.k[(j, c)];
                    d_k[(j, c)] += ds * acts.q[(i, c)];
                }
            }
        }
    }
    for (i, &pos) in acts.positions.iter().enumerate() {
        rope_row(d_q.row_mut(i), pos, heads, true);
        rope_row(d_k.row_mut(i), pos, heads, true);
    }
    let g_wq = matmul_tn(&acts.h1, &d_q)?;
    let g_wk = matmul_tn(&acts.h1, &d_k)?;
    let g_wv = matmul_tn(&acts.h1, &d_v)?;
    let mut d_h1 = matmul_nt(&d_q, &p.wq)?;
    d_h1.add_assign(&matmul_nt(&d_k, &p.wk)?);
    d_h1.add_assign(&matmul_nt(&d_v, &p.wv)?);
    let mut d_x = d_x1;
    d_x.add_assign(&norm_rows_backward(&acts.x, &p.norm_attn, &acts.inv1, &d_h1, &mut g_norm_attn));

    let grads = LayerParams {
        norm_attn: g_norm_attn,
        wq: g_wq,
        wk: g_wk,
        wv: g_wv,
        wo: g_wo,
        norm_mlp: g_norm_mlp,
        w_gate: g_w_gate,
        w_up: g_w_up,
        w_down: g_w_down,
    };
    Ok((grads, d_x))
}
