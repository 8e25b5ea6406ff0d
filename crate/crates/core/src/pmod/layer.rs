//! Routed layer: predict, select, gather, run the block, scatter, reweight.
//!
//! For a vision token `i` with factor `fᵢ = f(wᵢ)` and block output `T(X)ᵢ`:
//!
//! | mode            | selected            | skipped        |
//! |-----------------|---------------------|----------------|
//! | VanillaMoD      | `wᵢ·T(X)ᵢ + T(X)ᵢ`  | `Xᵢ`           |
//! | TanhNormOnly    | `fᵢ·T(X)ᵢ + T(X)ᵢ`  | `Xᵢ`           |
//! | TanhNormSTRing  | `fᵢ·T(X)ᵢ + T(X)ᵢ`  | `fᵢ·Xᵢ + Xᵢ`   |
//!
//! Text tokens are always processed and never reweighted.

use crate::model::{
    block_backward, block_forward, BlockActs, LayerCache, LayerParams, ModelConfig, ModelError,
    Predictor,
};
use crate::numerics::Matrix;

use super::router::{normalize, predict_weights, select_topk, RouterState};
use super::ReweightMode;

/// Settings of one routed layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutedLayer {
    pub mode: ReweightMode,
    pub alpha: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct PmodActs {
    x: Matrix,
    n_vision: usize,
    mode: ReweightMode,
    state: RouterState,
    /// `f'(wᵢ)` per vision token.
    slopes: Vec<f64>,
    /// Sequence rows fed to the block, ascending.
    gathered: Vec<usize>,
    z: Matrix,
    block: BlockActs,
}

impl PmodActs {
    pub fn router(&self) -> &RouterState {
        &self.state
    }
}

/// Forward pass of a routed layer over the whole sequence `x`, whose first
/// `n_vision` rows are vision tokens. Only gathered rows write to `cache`.
pub fn layer_forward(
    cfg: &ModelConfig,
    layer: &LayerParams,
    predictor: &Predictor,
    spec: RoutedLayer,
    x: &Matrix,
    n_vision: usize,
    positions: &[usize],
    cache: Option<&mut LayerCache>,
) -> Result<(Matrix, RouterState, PmodActs), ModelError> {
    let n = x.rows();
    let (state, gathered) = if n_vision == 0 {
        (RouterState::default(), (0..n).collect::<Vec<_>>())
    } else {
        let state = predict_weights(predictor, x, n_vision)?;
        let state = select_topk(state, spec.ratio)?;
        let gathered: Vec<usize> = state.selected.iter().copied().chain(n_vision..n).collect();
        (state, gathered)
    };
    let mut state = state;
    let (factors, slopes): (Vec<f64>, Vec<f64>) = state
        .raw_weights
        .iter()
        .map(|&w| normalize(spec.mode, spec.alpha, w))
        .unzip();
    state.normalized_weights = factors;

    let xg = x.gather_rows(&gathered);
    let pos_g: Vec<usize> = gathered.iter().map(|&i| positions[i]).collect();
    let (z, block) = block_forward(cfg, layer, &xg, &pos_g, cache)?;

    let mut out = x.clone();
    for (r, &i) in gathered.iter().enumerate() {
        let s = if i < n_vision {
            1.0 + state.normalized_weights[i]
        } else {
            1.0
        };
        for (o, &zv) in out.row_mut(i).iter_mut().zip(z.row(r)) {
            *o = s * zv;
        }
    }
    if spec.mode == ReweightMode::TanhNormSTRing {
        for &i in &state.skipped {
            let s = 1.0 + state.normalized_weights[i];
            for o in out.row_mut(i) {
                *o *= s;
            }
        }
    }

    let acts = PmodActs {
        x: x.clone(),
        n_vision,
        mode: spec.mode,
        state: state.clone(),
        slopes,
        gathered,
        z,
        block,
    };
    Ok((out, state, acts))
}

/// Exact backward of [`layer_forward`]; the selection itself is treated as a
/// constant. Returns block gradients, predictor gradients and `∂L/∂x`.
pub fn layer_backward(
    cfg: &ModelConfig,
    layer: &LayerParams,
    predictor: &Predictor,
    acts: &PmodActs,
    dy: &Matrix,
) -> Result<(LayerParams, Predictor, Matrix), ModelError> {
    if dy.shape() != acts.x.shape() {
        return Err(ModelError::Shape(format!(
            "upstream gradient {:?} does not match layer output {:?}",
            dy.shape(),
            acts.x.shape()
        )));
    }
    let nv = acts.n_vision;
    let factors = &acts.state.normalized_weights;
    let mut d_factor = vec![0.0; nv];
    let mut dz = Matrix::zeros(acts.z.rows(), acts.z.cols());
    for (r, &i) in acts.gathered.iter().enumerate() {
        let s = if i < nv { 1.0 + factors[i] } else { 1.0 };
        for (g, &u) in dz.row_mut(r).iter_mut().zip(dy.row(i)) {
            *g = s * u;
        }
        if i < nv {
            d_factor[i] = dy.row(i).iter().zip(acts.z.row(r)).map(|(a, b)| a * b).sum();
        }
    }

    let mut dx = Matrix::zeros(acts.x.rows(), acts.x.cols());
    for &i in &acts.state.skipped {
        if acts.mode == ReweightMode::TanhNormSTRing {
            let s = 1.0 + factors[i];
            for (g, &u) in dx.row_mut(i).iter_mut().zip(dy.row(i)) {
                *g = s * u;
            }
            d_factor[i] = dy.row(i).iter().zip(acts.x.row(i)).map(|(a, b)| a * b).sum();
        } else {
            dx.row_mut(i).copy_from_slice(dy.row(i));
        }
    }

    let (grads, dxg) = block_backward(cfg, layer, &acts.block, &dz)?;
    for (r, &i) in acts.gathered.iter().enumerate() {
        for (g, &u) in dx.row_mut(i).iter_mut().zip(dxg.row(r)) {
            *g += u;
        }
    }

    let d = acts.x.cols();
    let mut g_pred = Predictor::zeros(d);
    for i in 0..nv {
        let dw = d_factor[i] * acts.slopes[i];
        if dw == 0.0 {
            continue;
        }
        g_pred.bias[(0, 0)] += dw;
        for c in 0..d {
            g_pred.weight[(c, 0)] += dw * acts.x[(i, c)];
            dx[(i, c)] += dw * predictor.weight[(c, 0)];
        }
    }
    Ok((grads, g_pred, dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Params;
    use crate::numerics::{fd_grad, relative_error, Rng};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            vocab_size: 8,
            max_seq: 64,
        }
    }

    fn setup(seed: u64) -> (LayerParams, Predictor, Matrix, Vec<usize>) {
        let c = cfg();
        let mut rng = Rng::new(seed);
        let p = Params::init(&c, &mut rng);
        let pred = Predictor {
            weight: rng.normal_matrix(16, 1, 0.5),
            bias: Matrix::from_rows(&[vec![0.1]]),
        };
        let x = rng.normal_matrix(12, 16, 1.0);
        (p.layers[0].clone(), pred, x, (0..12).collect())
    }

    fn spec(mode: ReweightMode, ratio: f64) -> RoutedLayer {
        RoutedLayer {
            mode,
            alpha: 0.2,
            ratio,
        }
    }

    #[test]
    fn zero_predictor_selected_rows_equal_block_on_gathered() {
        let (layer, _, x, pos) = setup(3);
        let pred = Predictor::zeros(16);
        for &ratio in &[0.25, 0.5, 1.0] {
            let (out, state, _) = layer_forward(
                &cfg(), &layer, &pred, spec(ReweightMode::TanhNormSTRing, ratio), &x, 8, &pos, None,
            )
            .unwrap();
            let gathered: Vec<usize> = state.selected.iter().copied().chain(8..12).collect();
            let (z, _) = block_forward(&cfg(), &layer, &x.gather_rows(&gathered), &gathered, None).unwrap();
            for (r, &i) in gathered.iter().enumerate() {
                assert_eq!(out.row(i), z.row(r));
            }
            for &i in &state.skipped {
                assert_eq!(out.row(i), x.row(i));
            }
        }
    }

    #[test]
    fn full_ratio_zero_predictor_equals_dense_block() {
        let (layer, _, x, pos) = setup(4);
        let pred = Predictor::zeros(16);
        let (out, _, _) = layer_forward(
            &cfg(), &layer, &pred, spec(ReweightMode::TanhNormSTRing, 1.0), &x, 8, &pos, None,
        )
        .unwrap();
        let (dense, _) = block_forward(&cfg(), &layer, &x, &pos, None).unwrap();
        assert_eq!(out, dense);
    }

    #[test]
    fn skipped_rows_scaled_within_alpha_band() {
        for seed in 0..20 {
            let (layer, mut pred, x, pos) = setup(seed);
            pred.weight = pred.weight.scale(1.5);
            let (out, state, _) = layer_forward(
                &cfg(), &layer, &pred, spec(ReweightMode::TanhNormSTRing, 0.5), &x, 8, &pos, None,
            )
            .unwrap();
            for &i in &state.skipped {
                let ratio = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
                    / x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(ratio > 0.8 && ratio < 1.2, "ratio {ratio}");
            }
        }
    }

    #[test]
    fn text_rows_never_reweighted() {
        let (layer, mut pred, x, pos) = setup(5);
        pred.weight = pred.weight.scale(10.0);
        let (out, state, _) = layer_forward(
            &cfg(), &layer, &pred, spec(ReweightMode::VanillaMoD, 0.5), &x, 8, &pos, None,
        )
        .unwrap();
        let gathered: Vec<usize> = state.selected.iter().copied().chain(8..12).collect();
        let (z, _) = block_forward(&cfg(), &layer, &x.gather_rows(&gathered), &gathered, None).unwrap();
        for (r, &i) in gathered.iter().enumerate().filter(|(_, &i)| i >= 8) {
            assert_eq!(out.row(i), z.row(r));
        }
    }

    fn loss_on(
        layer: &LayerParams,
        pred: &Predictor,
        x: &Matrix,
        mode: ReweightMode,
        up: &Matrix,
    ) -> f64 {
        let (out, _, _) =
            layer_forward(&cfg(), layer, pred, spec(mode, 0.5), x, 8, &(0..12).collect::<Vec<_>>(), None)
                .unwrap();
        out.hadamard(up).unwrap().sum()
    }

    #[test]
    fn gradients_match_finite_differences_in_every_mode() {
        for mode in [
            ReweightMode::VanillaMoD,
            ReweightMode::TanhNormOnly,
            ReweightMode::TanhNormSTRing,
        ] {
            let (layer, pred, x, pos) = setup(11);
            let mut rng = Rng::new(99);
            let up = rng.normal_matrix(12, 16, 1.0);
            let (_, state, acts) =
                layer_forward(&cfg(), &layer, &pred, spec(mode, 0.5), &x, 8, &pos, None).unwrap();
            let (_, g_pred, dx) = layer_backward(&cfg(), &layer, &pred, &acts, &up).unwrap();

            let w_fd = fd_grad(
                |m| loss_on(&layer, &Predictor { weight: m.clone(), bias: pred.bias.clone() }, &x, mode, &up),
                &pred.weight,
                1e-5,
            );
            for (a, n) in g_pred.weight.data().iter().zip(w_fd.data()) {
                assert!(relative_error(*a, *n, 1e-6) < 1e-4, "{mode:?} predictor {a} vs {n}");
            }
            // the selection must not flip across the x perturbations
            let x_fd = fd_grad(
                |m| {
                    let s = predict_weights(&pred, m, 8).unwrap();
                    assert_eq!(select_topk(s, 0.5).unwrap().selected, state.selected);
                    loss_on(&layer, &pred, m, mode, &up)
                },
                &x,
                1e-5,
            );
            for (a, n) in dx.data().iter().zip(x_fd.data()) {
                assert!(relative_error(*a, *n, 1e-6) < 1e-4, "{mode:?} input {a} vs {n}");
            }
        }
    }

    #[test]
    fn skipped_token_gradient_path() {
        let (layer, pred, x, pos) = setup(12);
        for mode in [
            ReweightMode::VanillaMoD,
            ReweightMode::TanhNormOnly,
            ReweightMode::TanhNormSTRing,
        ] {
            let (_, state, acts) =
                layer_forward(&cfg(), &layer, &pred, spec(mode, 0.5), &x, 8, &pos, None).unwrap();
            let target = state.skipped[0];
            let mut up = Matrix::zeros(12, 16);
            for c in 0..16 {
                up[(target, c)] = 1.0 + c as f64;
            }
            let (_, g_pred, _) = layer_backward(&cfg(), &layer, &pred, &acts, &up).unwrap();
            let norm = g_pred.weight.frobenius_norm() + g_pred.bias.frobenius_norm();
            if mode == ReweightMode::TanhNormSTRing {
                assert!(norm > 1e-8);
            } else {
                assert_eq!(norm, 0.0);
            }
        }
    }
}
