//! Browser demo: DET/EER explorer, learning-rate schedule plot and corpus
//! sampler. Every export returns a JSON string; failures come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use ddsd_core::corpus::{synthesize, CorpusSpec, Label};
use ddsd_core::eval::{compute_det, det_svg, ScoredExample};
use ddsd_core::signals::{DecoderSignals, MinMaxScaler};
use ddsd_core::tokenizer::Tokenizer;
use ddsd_core::train::lr_at;

fn respond(result: Result<Value, String>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

fn parse_label(s: &str) -> Option<Label> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "d" | "y" | "yes" => Some(Label::Directed),
        "0" | "n" | "no" => Some(Label::NonDirected),
        other => Label::parse(other),
    }
}

/// Parses `label,score` lines (comma, tab or space separated). Labels may
/// be `directed`/`non_directed`, `1`/`0`, `yes`/`no` or `d`/`n`.
pub fn parse_scores(text: &str) -> Result<Vec<ScoredExample>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let [label, score] = fields[..] else {
            return Err(format!("line {}: expected `label,score`", i + 1));
        };
        let label = parse_label(label).ok_or_else(|| format!("line {}: unknown label `{label}`", i + 1))?;
        let score: f64 = score
            .parse()
            .map_err(|_| format!("line {}: bad score `{score}`", i + 1))?;
        out.push(ScoredExample::new(format!("row{i}"), label, score).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

/// DET curve and EER of pasted scores, with an SVG plot clipped at `clip`.
#[wasm_bindgen]
pub fn det_explorer(scores: &str, clip: f64) -> String {
    respond((|| {
        let scored = parse_scores(scores)?;
        let curve = compute_det(&scored).map_err(|e| e.to_string())?;
        let svg = det_svg(&curve, clip).map_err(|e| e.to_string())?;
        Ok(json!({
            "eer": curve.eer,
            "threshold": curve.eer_threshold,
            "n": scored.len(),
            "points": curve.points.len(),
            "svg": svg,
        }))
    })())
}

/// Warmup-then-decay learning rate for every update of a run.
#[wasm_bindgen]
pub fn lr_schedule(total_steps: u32, peak_lr: f64, warmup_fraction: f64) -> String {
    respond((|| {
        if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
            return Err("warmup fraction must be in (0, 1)".to_string());
        }
        if !(peak_lr > 0.0) {
            return Err("peak learning rate must be positive".to_string());
        }
        let total = total_steps as usize;
        let lrs = (0..=total)
            .map(|s| lr_at(s, total, peak_lr, warmup_fraction))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let warmup = (warmup_fraction * total as f64).round() as usize;
        Ok(json!({ "lrs": lrs, "warmup_steps": warmup, "svg": schedule_svg(&lrs, peak_lr) }))
    })())
}

fn schedule_svg(lrs: &[f64], peak: f64) -> String {
    let (w, h, pad) = (420.0, 220.0, 30.0);
    let n = (lrs.len() - 1).max(1) as f64;
    let pts: Vec<String> = lrs
        .iter()
        .enumerate()
        .map(|(i, lr)| {
            let x = pad + (w - 2.0 * pad) * i as f64 / n;
            let y = h - pad - (h - 2.0 * pad) * lr / peak;
            format!("{x:.1},{y:.1}")
        })
        .collect();
    format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}"><rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/><polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/><text x="{pad}" y="{}" font-size="11">0</text><text x="{}" y="{}" font-size="11" text-anchor="end">{} steps</text><text x="{}" y="{}" font-size="11">{peak:e}</text></svg>"#,
        w - 2.0 * pad,
        h - 2.0 * pad,
        pts.join(" "),
        h - pad + 14.0,
        w - pad,
        h - pad + 14.0,
        lrs.len() - 1,
        pad + 4.0,
        pad + 12.0,
    )
}

/// A few synthetic utterances with their ambiguity flags and decoder
/// signals, raw and min-max scaled over the sample.
#[wasm_bindgen]
pub fn sample_corpus(seed: u32, per_class: u32, p_text_ambiguous: f64, p_audio_ambiguous: f64) -> String {
    respond((|| {
        if per_class == 0 || per_class > 200 {
            return Err("samples per class must be in 1..=200".to_string());
        }
        let spec = CorpusSpec {
            n_directed: per_class as usize,
            n_non_directed: per_class as usize,
            p_text_ambiguous,
            p_audio_ambiguous,
            seed: seed as u64,
            ..CorpusSpec::default()
        };
        let utts = synthesize(&spec).map_err(|e| e.to_string())?;
        let raw: Vec<DecoderSignals> = utts
            .iter()
            .map(|u| DecoderSignals(u.record.decoder_signals_raw))
            .collect();
        let scaler = MinMaxScaler::fit(&raw).map_err(|e| e.to_string())?;
        let rows = utts
            .iter()
            .zip(&raw)
            .map(|(u, r)| {
                let scaled = scaler.transform(r).map_err(|e| e.to_string())?;
                Ok(json!({
                    "id": u.record.id,
                    "label": u.record.label.as_str(),
                    "transcript": u.record.transcript,
                    "tokens": Tokenizer.tokenize(&u.record.transcript).len(),
                    "frames": u.frames.nrows(),
                    "text_ambiguous": u.assignment.text_ambiguous,
                    "audio_ambiguous": u.assignment.audio_ambiguous,
                    "trigger": u.record.has_trigger_phrase,
                    "ds_raw": r.0,
                    "ds_scaled": scaled.0,
                }))
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(json!({ "utterances": rows }))
    })())
}
