//! Browser bindings for the demo page. Every entry point returns a JSON
//! string so the page needs no generated TypeScript glue.

use std::path::Path;

use binleak::craft::{BinVector, BrightnessCdf};
use binleak::data::{brightness, synth_images};
use binleak::harness::{execute, ExperimentConfig, Recovered};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn config(v: Value) -> Result<ExperimentConfig, JsValue> {
    let c: ExperimentConfig = serde_json::from_value(v).map_err(js_err)?;
    c.validate().map_err(js_err)?;
    Ok(c)
}

/// Bin edges cut from the brightness CDF of `aux` synthetic images, plus the
/// sorted brightness values themselves for plotting.
#[wasm_bindgen]
pub fn bin_edges(k: usize, aux: usize, seed: u64) -> Result<String, JsValue> {
    let images = synth_images(aux, 28, 10, seed);
    let bins = BinVector::new(&BrightnessCdf::from_images(&images).map_err(js_err)?, k).map_err(js_err)?;
    let mut values: Vec<f64> = images.iter().map(|s| brightness(&s.pixels).unwrap_or(0.0)).collect();
    values.sort_by(f64::total_cmp);
    Ok(json!({ "edges": bins.edges(), "brightness": values }).to_string())
}

/// One secure-aggregation round against synthetic 28x28 images. Returns the
/// match summary and, for up to `show` matched bins, the original and
/// recovered pixels.
#[wasm_bindgen]
pub fn image_attack(k: usize, n_clients: usize, batch: usize, seed: u64, show: usize) -> Result<String, JsValue> {
    let c = config(json!({
        "modality": "image",
        "dataset": { "source": "synthetic", "count": (n_clients * batch * 2).max(600), "side": 28, "classes": 10 },
        "n_clients": n_clients,
        "k": k,
        "local_epochs": 1,
        "lr": 0.01,
        "batch": batch,
        "seed": seed,
        "w2_row_scale": 10.0,
        "zero_gradient_bias": "input_bound"
    }))?;
    let report = execute(&c, Path::new(".")).map_err(js_err)?;
    let Recovered::Image {
        side,
        batch: rec,
        truth,
    } = &report.recovered
    else {
        return Err(js_err("expected an image run"));
    };
    let pairs: Vec<Value> = report
        .matches
        .pairs
        .iter()
        .filter_map(|p| {
            let original = truth.iter().find(|s| s.source_id == p.source_id)?;
            let recovered = rec.items.get(p.bin - 1)?.vector.as_ref()?;
            Some(json!({
                "bin": p.bin,
                "success": p.success,
                "psnr": p.psnr,
                "ssim": p.ssim,
                "original": original.pixels,
                "recovered": recovered,
            }))
        })
        .take(show)
        .collect();
    let s = &report.summary;
    Ok(json!({
        "side": side,
        "rate": s.rates.rate,
        "successes": s.rates.successes,
        "total": s.rates.total,
        "bins_recovered": s.bins_recovered,
        "occupancy": s.occupancy,
        "seconds": s.timing.total_seconds,
        "pairs": pairs,
    })
    .to_string())
}

/// One round against synthetic token sequences; recovered records are
/// inverted through the published embedding by nearest row.
#[wasm_bindgen]
pub fn text_attack(k: usize, batch: usize, len: usize, seed: u64) -> Result<String, JsValue> {
    let c = config(json!({
        "modality": "text",
        "dataset": { "source": "synthetic_text", "count": 200, "vocab_size": 500, "min_len": len, "max_len": len, "classes": 4 },
        "n_clients": 3,
        "k": k,
        "local_epochs": 1,
        "lr": 0.01,
        "batch": batch,
        "seed": seed,
        "embed_dim": 32,
        "w2_row_scale": 1.0
    }))?;
    let report = execute(&c, Path::new(".")).map_err(js_err)?;
    let Recovered::Text {
        records, truth, vocab, ..
    } = &report.recovered
    else {
        return Err(js_err("expected a text run"));
    };
    let pairs: Vec<Value> = report
        .matches
        .pairs
        .iter()
        .filter_map(|p| {
            let original = truth.iter().find(|r| r.source_id == p.source_id)?;
            let recovered = records.iter().find(|r| r.bin == p.bin)?;
            Some(json!({
                "bin": p.bin,
                "success": p.success,
                "wer": p.wer,
                "original": vocab.decode(&original.tokens),
                "recovered": recovered.text,
            }))
        })
        .collect();
    let s = &report.summary;
    Ok(json!({
        "rate": s.rates.rate,
        "successes": s.rates.successes,
        "total": s.rates.total,
        "seconds": s.timing.total_seconds,
        "pairs": pairs,
    })
    .to_string())
}
