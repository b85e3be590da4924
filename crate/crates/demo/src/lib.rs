//! Interactive views over the core crate, exported to JavaScript.
//!
//! Every exported function has a plain Rust twin so the logic runs and is
//! tested natively.

use sora_core::alignment::info_nce;
use sora_core::anchors::{hard_labels, margin_fn, soft_labels, train_anchors, AnchorTrainConfig};
use sora_core::corpus::{generate_synthetic_corpus, CorpusConfig, OrganOverlap};
use sora_core::eval::{organ_correlation_matrix, probability_overlay};
use sora_core::volume::{generate_volumes, VolumeConfig};
use sora_core::{Result, Tensor};
use wasm_bindgen::prelude::*;

pub const N_ORGANS: usize = 7;
pub const SLICE: usize = 32;
pub const DEPTH: usize = 8;

/// Organ-by-organ correlation of soft (or hard) labels on a small corpus with
/// organs 0 and 1 sharing symptoms at `overlap`. Row-major `N × N`.
pub fn label_correlation(alpha: f64, noise: f64, overlap: f64, hard: bool, seed: u64) -> Result<Vec<f64>> {
    let corpus = generate_synthetic_corpus(&CorpusConfig {
        n_organs: N_ORGANS,
        per_organ: 40,
        d_txt: 16,
        noise_sigma: noise,
        mixture_alpha: alpha,
        seed,
        overlaps: if overlap > 0.0 {
            vec![OrganOverlap {
                a: 0,
                b: 1,
                weight: overlap,
            }]
        } else {
            Vec::new()
        },
    })?;
    let labels = if hard {
        hard_labels(&corpus, N_ORGANS)
    } else {
        let cfg = AnchorTrainConfig {
            epochs: 150,
            learning_rate: 0.01,
            seed,
            ..Default::default()
        };
        soft_labels(&train_anchors(&corpus, N_ORGANS, &cfg)?.anchors, &corpus)?
    };
    Ok(organ_correlation_matrix(&labels)?.into_data())
}

/// `margin_fn(s⁺, s⁻; m)` over `points` values of s⁺ evenly spaced in [-1, 1].
pub fn margin_curve(s_minus: f64, margin: f64, points: usize) -> Vec<f64> {
    grid(points).map(|s| margin_fn(s, s_minus, margin)).collect()
}

/// InfoNCE over `N × N` similarities with `diag` on the diagonal and `off`
/// elsewhere, for τ evenly spaced in [0.02, 1].
pub fn info_nce_curve(diag: f64, off: f64, points: usize) -> Result<Vec<f64>> {
    let mut s = Tensor::full(&[N_ORGANS, N_ORGANS], off);
    for i in 0..N_ORGANS {
        s.data_mut()[i * N_ORGANS + i] = diag;
    }
    grid(points).map(|x| info_nce(&s, 0.02 + 0.49 * (x + 1.0))).collect()
}

/// One axial slice of the probability overlay for a synthetic case: every
/// voxel takes the highest score among the organs covering it.
pub fn overlay_slice(scores: &[f64], slice: usize, seed: u64) -> Result<Vec<f64>> {
    let vols = generate_volumes(&VolumeConfig {
        n_organs: N_ORGANS,
        depth: DEPTH,
        height: SLICE,
        width: SLICE,
        train_cases: 1,
        test_cases: 1,
        intensity_noise: 0.05,
        seed,
    })?;
    let case: Vec<_> = vols.into_iter().filter(|v| v.case == 0).collect();
    let overlay = probability_overlay(&case, scores)?;
    let l = slice.min(DEPTH - 1);
    Ok(overlay.data()[l * SLICE * SLICE..(l + 1) * SLICE * SLICE].to_vec())
}

fn grid(points: usize) -> impl Iterator<Item = f64> {
    let step = 2.0 / (points.max(2) - 1) as f64;
    (0..points).map(move |i| -1.0 + step * i as f64)
}

fn js(e: sora_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen(js_name = labelCorrelation)]
pub fn label_correlation_js(
    alpha: f64,
    noise: f64,
    overlap: f64,
    hard: bool,
    seed: u32,
) -> std::result::Result<Vec<f64>, JsValue> {
    label_correlation(alpha, noise, overlap, hard, seed as u64).map_err(js)
}

#[wasm_bindgen(js_name = marginCurve)]
pub fn margin_curve_js(s_minus: f64, margin: f64, points: usize) -> Vec<f64> {
    margin_curve(s_minus, margin, points)
}

#[wasm_bindgen(js_name = infoNceCurve)]
pub fn info_nce_curve_js(diag: f64, off: f64, points: usize) -> std::result::Result<Vec<f64>, JsValue> {
    info_nce_curve(diag, off, points).map_err(js)
}

#[wasm_bindgen(js_name = overlaySlice)]
pub fn overlay_slice_js(scores: Vec<f64>, slice: usize, seed: u32) -> std::result::Result<Vec<f64>, JsValue> {
    overlay_slice(&scores, slice, seed as u64).map_err(js)
}
