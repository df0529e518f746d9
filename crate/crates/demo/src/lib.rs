//! wasm-bindgen surface for `www/index.html`.

use wasm_bindgen::prelude::*;

use mtsnet::attention::{AttentionConfig, AttentionKind, PositionMode, Variant};
use mtsnet::data::{synth_subject_with, SynthConfig, WindowSpec, CLIP_FRAMES};
use mtsnet::model::{count_parameters, Backbone, Model, ModelSpec};

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// All frames of a synthetic subject, `frames × size × size` grey pixels
/// in frame-major order.
#[wasm_bindgen]
pub fn synth_clip(seed: u64, label: u8, size: usize) -> Result<Vec<u8>, JsValue> {
    if label > 1 || !(16..=256).contains(&size) {
        return Err(js_err("label must be 0 or 1 and size within 16..=256"));
    }
    let rec = synth_subject_with(seed, label, SynthConfig { size, frames: CLIP_FRAMES });
    Ok(rec.frames.iter().flat_map(|f| f.pixels.iter().copied()).collect())
}

#[wasm_bindgen]
pub fn clip_frames() -> usize {
    CLIP_FRAMES
}

/// Grey level for each HU value under the given window.
#[wasm_bindgen]
pub fn hu_window(center: f64, width: f64, hu: &[f64]) -> Result<Vec<u8>, JsValue> {
    let w = WindowSpec::new(center, width).map_err(js_err)?;
    Ok(hu.iter().map(|&v| w.apply(v)).collect())
}

/// Parameter table for a backbone/attention pairing at full width.
#[wasm_bindgen]
pub fn param_table(backbone: &str, attention: &str, variant: &str, position: bool) -> Result<String, JsValue> {
    let backbone = match backbone {
        "r2p1d" => Backbone::R2plus1d,
        "r3d" => Backbone::R3d,
        other => return Err(js_err(format!("unknown backbone {other}"))),
    };
    let kind: AttentionKind = attention.parse().map_err(js_err)?;
    let mut cfg = AttentionConfig::new(kind);
    if kind == AttentionKind::DepMhsa {
        cfg.variant = variant.parse::<Variant>().map_err(js_err)?;
    }
    if kind.takes_position() {
        cfg.position = if position { PositionMode::Dual } else { PositionMode::Off };
    }
    let spec = ModelSpec::baseline(backbone).with_attention(cfg);
    let model = Model::<f32>::build(&spec, 0).map_err(js_err)?;
    Ok(count_parameters(&model).to_string())
}
