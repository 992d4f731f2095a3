//! Browser bindings for the demo page in `www/`.
//!
//! Each exported function takes plain numbers or comma-separated lists and
//! returns a JSON string, so the page needs no bundler or generated types.

use heterosag::analysis::{bandwidth_expansion, privacy_leakage_prob, sigma_heterosag_plus, ErrorBoundInput};
use heterosag::plan::{
    build_ss_matrix_hetero, inference_robustness_bruteforce, inference_robustness_closed_form, verify_properties, Cell,
    MAX_BRUTE_FORCE_COLUMNS,
};
use heterosag::quantize::QuantizerSpec;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("{what}: cannot parse `{s}`")))
        .collect()
}

/// SS matrix, structural checks and inference robustness for a subgroup
/// layout such as `"1,2,2"` (or `"1,1,1,1,1"` for five plain groups).
pub fn matrix_report(subgroups: &str) -> Result<Value, String> {
    let layout: Vec<usize> = parse_list(subgroups, "subgroups")?;
    let matrix = build_ss_matrix_hetero(&layout).map_err(|e| e.to_string())?;
    let uniform = matrix.is_uniform();
    let rows: Vec<Vec<String>> = (0..matrix.dim())
        .map(|l| {
            matrix
                .row(l)
                .iter()
                .map(|cell| match cell {
                    Cell::Star => "*".to_string(),
                    Cell::Label(id) if uniform => id.group.to_string(),
                    Cell::Label(id) => format!("{},{}", id.group, id.subgroup),
                })
                .collect()
        })
        .collect();
    let columns: Vec<String> = matrix
        .columns()
        .iter()
        .map(|c| {
            if uniform {
                c.group.to_string()
            } else {
                format!("{},{}", c.group, c.subgroup)
            }
        })
        .collect();
    let report = verify_properties(&matrix);
    let robustness = if matrix.dim() <= MAX_BRUTE_FORCE_COLUMNS {
        let r = inference_robustness_bruteforce(&matrix).map_err(|e| e.to_string())?;
        json!({ "delta": r.delta, "undecodable": r.undecodable, "subset": r.subset })
    } else {
        Value::Null
    };
    Ok(json!({
        "columns": columns,
        "rows": rows,
        "properties": report,
        "robustness": robustness,
        "closed_form": inference_robustness_closed_form(matrix.dim()),
    }))
}

/// Grid points and worst-case variance curve of each quantizer, plus the
/// aggregate error bound for `G` groups of `group_size` users.
pub fn quantizer_report(
    levels: &str,
    lower: f64,
    upper: f64,
    group_size: usize,
    model_len: usize,
) -> Result<Value, String> {
    let levels: Vec<u64> = parse_list(levels, "levels")?;
    let samples = 201;
    let mut curves = Vec::new();
    for &k in &levels {
        let spec = QuantizerSpec::new(k, lower, upper).map_err(|e| e.to_string())?;
        let delta = spec.interval();
        let grid: Vec<f64> = if k <= 64 {
            (0..k).map(|l| spec.grid_point(l)).collect()
        } else {
            Vec::new()
        };
        let xs: Vec<f64> = (0..samples)
            .map(|i| lower + (upper - lower) * i as f64 / (samples - 1) as f64)
            .collect();
        // Stochastic rounding between T(l) and T(l+1) has variance
        // (x - T(l)) (T(l+1) - x).
        let variance: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let l = (((x - lower) / delta).floor() as u64).min(k - 2);
                let (lo, hi) = (spec.grid_point(l), spec.grid_point(l + 1));
                ((x - lo) * (hi - x)).max(0.0)
            })
            .collect();
        curves.push(json!({
            "levels": k,
            "interval": delta,
            "max_variance": delta * delta / 4.0,
            "grid": grid,
            "x": xs,
            "variance": variance,
        }));
    }
    let input = ErrorBoundInput::uniform(levels.len(), group_size, model_len, levels.clone()).with_range(lower, upper);
    let bound = sigma_heterosag_plus(&input).map_err(|e| e.to_string())?;
    let homogeneous =
        ErrorBoundInput::uniform(1, group_size * levels.len(), model_len, vec![levels[0]]).with_range(lower, upper);
    let baseline = sigma_heterosag_plus(&homogeneous).map_err(|e| e.to_string())?;
    Ok(json!({ "quantizers": curves, "error_bound": bound, "all_lowest_bound": baseline }))
}

/// Single-survivor leakage probability against dropout rate for subgroup
/// sizes `1..=max_subgroup`, and bandwidth expansion against coalition size
/// for each quantizer.
pub fn leakage_bandwidth_report(max_subgroup: usize, levels: &str, max_coalition: usize) -> Result<Value, String> {
    let levels: Vec<u64> = parse_list(levels, "levels")?;
    if levels.iter().any(|&k| k < 2) {
        return Err("levels must be at least 2".into());
    }
    let ps: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
    let leakage: Vec<Value> = (1..=max_subgroup.max(1))
        .map(|n| {
            let probs: Vec<f64> = ps
                .iter()
                .map(|&p| privacy_leakage_prob(n, p).unwrap_or(f64::NAN))
                .collect();
            json!({ "subgroup_size": n, "prob": probs })
        })
        .collect();
    let sizes: Vec<usize> = (1..=max_coalition.max(1)).collect();
    let bandwidth: Vec<Value> = levels
        .iter()
        .map(|&k| {
            let ratio: Vec<f64> = sizes.iter().map(|&s| bandwidth_expansion(s, k).ratio).collect();
            json!({ "levels": k, "ratio": ratio })
        })
        .collect();
    Ok(json!({ "p": ps, "leakage": leakage, "coalition_size": sizes, "bandwidth": bandwidth }))
}

fn to_js(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn ss_matrix(subgroups: &str) -> Result<String, JsError> {
    to_js(matrix_report(subgroups))
}

#[wasm_bindgen]
pub fn quantizer_curves(
    levels: &str,
    lower: f64,
    upper: f64,
    group_size: usize,
    model_len: usize,
) -> Result<String, JsError> {
    to_js(quantizer_report(levels, lower, upper, group_size, model_len))
}

#[wasm_bindgen]
pub fn leakage_bandwidth(max_subgroup: usize, levels: &str, max_coalition: usize) -> Result<String, JsError> {
    to_js(leakage_bandwidth_report(max_subgroup, levels, max_coalition))
}
