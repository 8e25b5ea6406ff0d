//! C interface to pmod-core.
//!
//! Every function returns a [`PmodStatus`] and writes results through out
//! pointers. On failure, [`pmod_last_error`] returns a message for the
//! calling thread. Schedules and cost reports are opaque handles owned by
//! the caller and released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, UnwindSafe};
use std::ptr;

use pmod_core::costmodel::{model_cost, CostReport, WorkloadSpec};
use pmod_core::model::ModelConfig;
use pmod_core::pmod::{select_topk, tanh_norm, RouterState, TanhNormConfig};
use pmod_core::schedule::{
    build_schedule, mean_retention, prd_ratio, search_thresholds, RatioSchedule, ScheduleConfig, ScheduleVariant,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmodStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Panic = 4,
}

/// Opaque per-layer retention schedule.
pub struct PmodSchedule(RatioSchedule);

/// Opaque cost report.
pub struct PmodCostReport(CostReport);

/// Decoder shape used by the cost model.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PmodModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PmodWorkload {
    pub n_vision: usize,
    pub n_text_prompt: usize,
    pub n_decode: usize,
    pub bytes_per_element: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PmodThresholds {
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub achieved: f64,
    pub within_tolerance: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PmodCostSummary {
    pub total_flops: u64,
    pub baseline_flops: u64,
    pub head_flops: u64,
    pub total_kv_bytes: u64,
    pub baseline_kv_bytes: u64,
    pub flops_ratio: f64,
    pub kv_ratio: f64,
    pub vision_kv_ratio: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

type Outcome = Result<(), (PmodStatus, String)>;

fn invalid(e: impl std::fmt::Display) -> (PmodStatus, String) {
    (PmodStatus::InvalidArgument, e.to_string())
}

fn guard(f: impl FnOnce() -> Outcome + UnwindSafe) -> PmodStatus {
    match catch_unwind(f) {
        Ok(Ok(())) => {
            set_error("");
            PmodStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PmodStatus::Panic
        }
    }
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, (PmodStatus, String)> {
    p.as_mut().ok_or((PmodStatus::NullPointer, format!("{name} is null")))
}

unsafe fn in_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, (PmodStatus, String)> {
    p.as_ref().ok_or((PmodStatus::NullPointer, format!("{name} is null")))
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn pmod_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// `alpha·tanh(w)`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn pmod_tanh_norm(alpha: f64, w: f64, out: *mut f64) -> PmodStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let cfg = TanhNormConfig::new(alpha).map_err(invalid)?;
        *out = tanh_norm(cfg, w);
        Ok(())
    })
}

/// Unclamped cosine ratio `½·cos(πl/L) + beta` of 1-based layer `l`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn pmod_prd_ratio(beta: f64, n_layers: usize, l: usize, out: *mut f64) -> PmodStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let cfg = ScheduleConfig::cosine_unclamped(beta, n_layers);
        cfg.validate().map_err(invalid)?;
        *out = prd_ratio(&cfg, l).map_err(invalid)?;
        Ok(())
    })
}

/// Top-k selection over `n` routing weights: writes 1 to `mask[i]` for kept
/// tokens and 0 otherwise, and the kept count to `k`.
///
/// # Safety
/// `weights` must point to `n` readable doubles and `mask` to `n` writable
/// bytes; `k` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn pmod_select_topk(
    weights: *const f64,
    n: usize,
    ratio: f64,
    mask: *mut u8,
    k: *mut usize,
) -> PmodStatus {
    guard(|| {
        if weights.is_null() || mask.is_null() {
            return Err((PmodStatus::NullPointer, "weights or mask is null".into()));
        }
        let k = out_ref(k, "k")?;
        let w = std::slice::from_raw_parts(weights, n);
        let state = RouterState {
            raw_weights: w.to_vec(),
            ..Default::default()
        };
        let state = select_topk(state, ratio).map_err(invalid)?;
        let m = std::slice::from_raw_parts_mut(mask, n);
        for (dst, sel) in m.iter_mut().zip(state.is_selected()) {
            *dst = sel as u8;
        }
        *k = state.selected.len();
        Ok(())
    })
}

fn publish<T>(value: T, out: &mut *mut T) {
    *out = Box::into_raw(Box::new(value));
}

/// Cosine schedule. With `clamp` false, raw ratios are kept and
/// `min_ratio` / `max_ratio` are ignored.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn pmod_schedule_cosine(
    beta: f64,
    min_ratio: f64,
    max_ratio: f64,
    n_layers: usize,
    clamp: bool,
    out: *mut *mut PmodSchedule,
) -> PmodStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let cfg = if clamp {
            ScheduleConfig::cosine(beta, min_ratio, max_ratio, n_layers)
        } else {
            ScheduleConfig::cosine_unclamped(beta, n_layers)
        };
        let s = build_schedule(&cfg).map_err(invalid)?;
        publish(PmodSchedule(s), out);
        Ok(())
    })
}

/// The same ratio in every layer.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn pmod_schedule_constant(ratio: f64, n_layers: usize, out: *mut *mut PmodSchedule) -> PmodStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let cfg = ScheduleConfig::with_variant(ScheduleVariant::Constant { ratio }, 0.0, 1.0, n_layers);
        let s = build_schedule(&cfg).map_err(invalid)?;
        publish(PmodSchedule(s), out);
        Ok(())
    })
}

/// Grid search for cosine thresholds reaching mean retention `target`.
/// When `schedule` is non-null it receives the resulting schedule.
///
/// # Safety
/// `result` must be null or writable; `schedule` may be null.
#[no_mangle]
pub unsafe extern "C" fn pmod_search_thresholds(
    target: f64,
    beta: f64,
    n_layers: usize,
    result: *mut PmodThresholds,
    schedule: *mut *mut PmodSchedule,
) -> PmodStatus {
    guard(|| {
        let result = out_ref(result, "result")?;
        if let Some(s) = schedule.as_mut() {
            *s = ptr::null_mut();
        }
        let found = search_thresholds(target, beta, n_layers).map_err(invalid)?;
        *result = PmodThresholds {
            min_ratio: found.config.min_ratio,
            max_ratio: found.config.max_ratio,
            achieved: found.achieved,
            within_tolerance: found.within_tolerance,
        };
        if let Some(s) = schedule.as_mut() {
            let built = build_schedule(&found.config).map_err(invalid)?;
            publish(PmodSchedule(built), s);
        }
        Ok(())
    })
}

/// # Safety
/// `schedule` must be a live handle or null; `n` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmod_schedule_len(schedule: *const PmodSchedule, n: *mut usize) -> PmodStatus {
    guard(|| {
        let s = in_ref(schedule, "schedule")?;
        *out_ref(n, "n")? = s.0.len();
        Ok(())
    })
}

/// Copies the per-layer ratios into `buf`, which must hold
/// `pmod_schedule_len` values.
///
/// # Safety
/// `buf` must point to `cap` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pmod_schedule_ratios(schedule: *const PmodSchedule, buf: *mut f64, cap: usize) -> PmodStatus {
    guard(|| {
        let s = in_ref(schedule, "schedule")?;
        if buf.is_null() {
            return Err((PmodStatus::NullPointer, "buf is null".into()));
        }
        let r = s.0.ratios();
        if cap < r.len() {
            return Err((PmodStatus::BufferTooSmall, format!("need {} values, got {cap}", r.len())));
        }
        std::slice::from_raw_parts_mut(buf, r.len()).copy_from_slice(r);
        Ok(())
    })
}

/// # Safety
/// `schedule` must be a live handle or null; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmod_schedule_mean(schedule: *const PmodSchedule, out: *mut f64) -> PmodStatus {
    guard(|| {
        let s = in_ref(schedule, "schedule")?;
        *out_ref(out, "out")? = mean_retention(&s.0);
        Ok(())
    })
}

/// # Safety
/// `schedule` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pmod_schedule_free(schedule: *mut PmodSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Prefill and decode cost of `shape` under `schedule` for `workload`.
///
/// # Safety
/// Pointers must be valid or null; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmod_cost(
    shape: *const PmodModelShape,
    schedule: *const PmodSchedule,
    workload: *const PmodWorkload,
    out: *mut *mut PmodCostReport,
) -> PmodStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let shape = in_ref(shape, "shape")?;
        let s = in_ref(schedule, "schedule")?;
        let w = in_ref(workload, "workload")?;
        let cfg = ModelConfig {
            n_layers: shape.n_layers,
            d_model: shape.d_model,
            n_heads: shape.n_heads,
            d_ff: shape.d_ff,
            vocab_size: shape.vocab_size,
            max_seq: 1,
        };
        cfg.validate().map_err(invalid)?;
        let spec = WorkloadSpec {
            n_vision: w.n_vision,
            n_text_prompt: w.n_text_prompt,
            n_decode: w.n_decode,
            bytes_per_element: w.bytes_per_element,
        };
        let report = model_cost(&cfg, &s.0, &spec).map_err(invalid)?;
        publish(PmodCostReport(report), out);
        Ok(())
    })
}

/// # Safety
/// `report` must be a live handle or null; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmod_cost_summary(report: *const PmodCostReport, out: *mut PmodCostSummary) -> PmodStatus {
    guard(|| {
        let r = &in_ref(report, "report")?.0;
        *out_ref(out, "out")? = PmodCostSummary {
            total_flops: r.total_flops,
            baseline_flops: r.baseline_flops,
            head_flops: r.head_flops,
            total_kv_bytes: r.total_kv_bytes,
            baseline_kv_bytes: r.baseline_kv_bytes,
            flops_ratio: r.ratio_vs_baseline_flops,
            kv_ratio: r.ratio_vs_baseline_kv,
            vision_kv_ratio: r.vision_kv_ratio,
        };
        Ok(())
    })
}

/// Per-layer FLOPs (prefill plus decode) into `buf`.
///
/// # Safety
/// `buf` must point to `cap` writable values.
#[no_mangle]
pub unsafe extern "C" fn pmod_cost_layer_flops(report: *const PmodCostReport, buf: *mut u64, cap: usize) -> PmodStatus {
    guard(|| {
        let r = &in_ref(report, "report")?.0;
        if buf.is_null() {
            return Err((PmodStatus::NullPointer, "buf is null".into()));
        }
        if cap < r.per_layer.len() {
            return Err((PmodStatus::BufferTooSmall, format!("need {} values, got {cap}", r.per_layer.len())));
        }
        let dst = std::slice::from_raw_parts_mut(buf, r.per_layer.len());
        for (d, l) in dst.iter_mut().zip(&r.per_layer) {
            *d = l.flops;
        }
        Ok(())
    })
}

/// # Safety
/// `report` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pmod_cost_free(report: *mut PmodCostReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
