//! On-disk stroke-3 records.
//!
//! A record is either a flat JSON array of `[dx, dy, p]` triples, or the
//! QuickDraw per-stroke form `[[x0, x1, ...], [y0, y1, ...]]` with absolute
//! coordinates (a third timing list is ignored). Records may also be wrapped
//! in an object carrying `drawing` plus optional `word`/`category` and
//! `key_id`/`id`/`sketch_id` fields, as in QuickDraw `.ndjson` exports.

use std::fs;
use std::path::Path;

use serde_json::{Number, Value};

use super::stroke3::{parse_stroke3, VectorSketch};
use super::{Result, SketchError};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SketchRecord<T> {
    pub sketch: VectorSketch<T>,
    pub category: Option<String>,
}

fn malformed(msg: impl Into<String>) -> SketchError {
    SketchError::Malformed(msg.into())
}

fn as_number<T: Scalar>(v: &Value) -> Result<T> {
    v.as_f64().map(T::of).ok_or_else(|| malformed(format!("expected a number, found {v}")))
}

/// Parses the `drawing` payload in either flat or nested form.
pub fn drawing_from_json<T: Scalar>(value: &Value) -> Result<VectorSketch<T>> {
    let items = value.as_array().ok_or_else(|| malformed("drawing is not an array"))?;
    let Some(first) = items.first() else { return Err(SketchError::EmptySketch) };
    let nested = first.as_array().and_then(|a| a.first()).is_some_and(Value::is_array);
    if nested {
        let mut strokes = Vec::with_capacity(items.len());
        for (k, stroke) in items.iter().enumerate() {
            let lists = stroke.as_array().ok_or_else(|| malformed(format!("stroke {k} is not an array")))?;
            let (Some(xs), Some(ys)) = (lists.first().and_then(Value::as_array), lists.get(1).and_then(Value::as_array)) else {
                return Err(malformed(format!("stroke {k} lacks x and y lists")));
            };
            if xs.len() != ys.len() {
                return Err(malformed(format!("stroke {k} has {} x values and {} y values", xs.len(), ys.len())));
            }
            let pts = xs.iter().zip(ys).map(|(x, y)| Ok((as_number(x)?, as_number(y)?))).collect::<Result<Vec<_>>>()?;
            strokes.push(pts);
        }
        VectorSketch::from_absolute_strokes(&strokes)
    } else {
        let raw = items
            .iter()
            .enumerate()
            .map(|(k, t)| match t.as_array().map(Vec::as_slice) {
                Some([dx, dy, p]) => Ok([as_number(dx)?, as_number(dy)?, as_number(p)?]),
                _ => Err(malformed(format!("move {k} is not a [dx, dy, p] triple"))),
            })
            .collect::<Result<Vec<_>>>()?;
        parse_stroke3(&raw)
    }
}

/// Parses one record; `fallback_id` names it when the record has no id.
pub fn record_from_json<T: Scalar>(value: &Value, fallback_id: &str) -> Result<SketchRecord<T>> {
    match value {
        Value::Array(_) => Ok(SketchRecord { sketch: drawing_from_json(value)?.with_source_id(fallback_id), category: None }),
        Value::Object(map) => {
            let drawing = map.get("drawing").ok_or_else(|| malformed("record object lacks a drawing field"))?;
            let id = ["key_id", "id", "sketch_id"]
                .iter()
                .find_map(|k| map.get(*k))
                .map(|v| v.as_str().map_or_else(|| v.to_string(), str::to_owned))
                .unwrap_or_else(|| fallback_id.to_owned());
            let category = ["word", "category"].iter().find_map(|k| map.get(*k)).and_then(Value::as_str).map(str::to_owned);
            Ok(SketchRecord { sketch: drawing_from_json(drawing)?.with_source_id(id), category })
        }
        other => Err(malformed(format!("unexpected record {other}"))),
    }
}

fn number_json<T: Scalar>(v: T) -> Value {
    let f = v.f64();
    if f.fract() == 0.0 && f.abs() < 9.0e15 {
        Value::Number(Number::from(f as i64))
    } else {
        Number::from_f64(f).map_or(Value::Null, Value::Number)
    }
}

/// Flat stroke-3 JSON; integral offsets are written as integers.
pub fn sketch_to_json<T: Scalar>(sketch: &VectorSketch<T>) -> Value {
    Value::Array(sketch.to_stroke3().iter().map(|t| Value::Array(vec![number_json(t[0]), number_json(t[1]), number_json(t[2])])).collect())
}

pub fn sketch_to_string<T: Scalar>(sketch: &VectorSketch<T>) -> String {
    sketch_to_json(sketch).to_string()
}

/// Rounds absolute points onto an integer grid of `scale` units per canvas
/// side and re-derives offsets, so rounding never accumulates drift.
pub fn quantize<T: Scalar>(sketch: &VectorSketch<T>, scale: T) -> VectorSketch<T> {
    let strokes: Vec<Vec<(T, T)>> =
        sketch.stroke_points().iter().map(|s| s.iter().map(|&(x, y)| ((x * scale).round(), (y * scale).round())).collect()).collect();
    VectorSketch::from_absolute_strokes(&strokes).expect("quantising keeps every point").with_source_id(sketch.source_id.clone())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SketchError {
    SketchError::Io { path: path.display().to_string(), message: e.to_string() }
}

pub fn save_sketch<T: Scalar>(path: &Path, sketch: &VectorSketch<T>) -> Result<()> {
    fs::write(path, sketch_to_string(sketch)).map_err(|e| io_err(path, e))
}

/// Loads every record of a `.json` (one record) or `.ndjson`/`.jsonl` (one
/// record per non-blank line) file.
pub fn load_file<T: Scalar>(path: &Path) -> Result<Vec<SketchRecord<T>>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
    if ext == "ndjson" || ext == "jsonl" {
        let mut out = Vec::new();
        for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let value: Value = serde_json::from_str(line).map_err(|e| malformed(format!("{}:{}: {e}", path.display(), line_no + 1)))?;
            let mut rec = record_from_json(&value, &format!("{stem}-{line_no:05}"))?;
            if rec.category.is_none() {
                rec.category = Some(stem.clone());
            }
            out.push(rec);
        }
        Ok(out)
    } else {
        let value: Value = serde_json::from_str(&text).map_err(|e| malformed(format!("{}: {e}", path.display())))?;
        let mut rec = record_from_json(&value, &stem)?;
        if rec.category.is_none() {
            rec.category = Some(category_from_stem(&stem));
        }
        Ok(vec![rec])
    }
}

/// `cat_03` → `cat`: trailing `_<digits>` / `-<digits>` is an instance suffix.
fn category_from_stem(stem: &str) -> String {
    match stem.rsplit_once(['_', '-']) {
        Some((head, tail)) if !head.is_empty() && tail.chars().all(|c| c.is_ascii_digit()) => head.to_owned(),
        _ => stem.to_owned(),
    }
}

/// Loads all sketch files of a directory in file-name order.
pub fn load_dir<T: Scalar>(dir: &Path) -> Result<Vec<SketchRecord<T>>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file() && p.extension().is_some_and(|e| matches!(e.to_string_lossy().to_ascii_lowercase().as_str(), "json" | "ndjson" | "jsonl"))
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_file(&p)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip_text() {
        let text = "[[10,0,0],[0,10,0],[-10,0,1],[5,5,0],[1,1,1]]";
        let v: Value = serde_json::from_str(text).unwrap();
        let s: VectorSketch<f64> = drawing_from_json(&v).unwrap();
        assert_eq!(sketch_to_string(&s), text);
    }

    #[test]
    fn nested_form_converts_to_offsets() {
        let v: Value = serde_json::from_str("[[[10,20],[5,5]],[[0],[0],[123]]]").unwrap();
        let s: VectorSketch<f64> = drawing_from_json(&v).unwrap();
        assert_eq!(s.to_stroke3(), vec![[10.0, 5.0, 0.0], [10.0, 0.0, 1.0], [-20.0, -5.0, 1.0]]);
    }

    #[test]
    fn quickdraw_object_record() {
        let v: Value = serde_json::from_str(r#"{"word":"cat","key_id":"42","drawing":[[[0,3],[0,4]]]}"#).unwrap();
        let r: SketchRecord<f32> = record_from_json(&v, "x").unwrap();
        assert_eq!(r.category.as_deref(), Some("cat"));
        assert_eq!(r.sketch.source_id, "42");
    }

    #[test]
    fn malformed_records() {
        for bad in ["[[1,2]]", "{\"word\":\"x\"}", "[[[1,2],[3]]]", "[]", "3"] {
            let v: Value = serde_json::from_str(bad).unwrap();
            assert!(record_from_json::<f64>(&v, "x").is_err(), "{bad} should fail");
        }
    }

    #[test]
    fn quantize_keeps_grid_points() {
        let s = VectorSketch::from_absolute_strokes(&[vec![(0.101, 0.2), (0.5, 0.5)], vec![(0.9, 0.9)]]).unwrap();
        let q = quantize(&s, 256.0);
        let pts: Vec<(f64, f64)> = q.absolute_points().iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(pts, vec![(26.0, 51.0), (128.0, 128.0), (230.0, 230.0)]);
    }

    #[test]
    fn category_suffix_stripping() {
        assert_eq!(category_from_stem("cat_03"), "cat");
        assert_eq!(category_from_stem("hot-air-balloon-2"), "hot-air-balloon");
        assert_eq!(category_from_stem("house"), "house");
    }
}
