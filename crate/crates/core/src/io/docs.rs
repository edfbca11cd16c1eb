//! JSON documents: annotations and propagation results.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::geometry::Canvas;
use crate::maskops::InteriorLevel;
use crate::matching::MatchResult;

/// Version string written into every propagation document.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedPoint {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub label: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl AnnotatedPoint {
    pub fn new(x: f64, y: f64, label: impl Into<String>) -> Self {
        AnnotatedPoint {
            x,
            y,
            label: label.into(),
            extra: Map::new(),
        }
    }
}

/// Points or a mask drawn on one frame. Point order is meaningful and is
/// preserved through propagation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDoc {
    pub video_id: String,
    pub frame: usize,
    pub canvas: Canvas,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<AnnotatedPoint>>,
    /// Path of a mask PGM, relative to the document's directory unless absolute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ref: Option<String>,
    /// Fields this version does not know about, kept for the round trip.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl AnnotationDoc {
    pub fn validate(&self) -> Result<()> {
        let c = self.canvas;
        if c.width == 0 || c.height == 0 {
            return Err(Error::schema("canvas", "canvas must be non-empty"));
        }
        let has_points = self.points.as_ref().is_some_and(|p| !p.is_empty());
        if !has_points && self.mask_ref.is_none() {
            return Err(Error::schema(".", "annotation has no payload"));
        }
        for (i, p) in self.points.iter().flatten().enumerate() {
            for (axis, v, n) in [("x", p.x, c.width), ("y", p.y, c.height)] {
                if !(v >= 0.0 && v < n as f64) {
                    return Err(Error::schema(
                        format!("points[{i}].{axis}"),
                        format!("{axis} = {v} lies outside the canvas [0, {n})"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn point_coords(&self) -> Vec<[f64; 2]> {
        self.points.iter().flatten().map(|p| [p.x, p.y]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub video_id: String,
    pub frame: usize,
    /// Where the source annotation was read from, if it came from a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub frame: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    Points,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskOutputs {
    pub mask_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability_ref: Option<String>,
    pub interior_level: InteriorLevel,
    pub interior_count: usize,
    pub foreground_count: usize,
}

/// Output of one propagation run. `configs` and `seed` are enough to
/// reproduce it exactly, so both are required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationDoc {
    pub engine_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub configs: Option<Map<String, Value>>,
    pub source: SourceRef,
    pub target: FrameRef,
    pub mode: PropagationMode,
    pub results: Vec<MatchResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskOutputs>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl PropagationDoc {
    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(Error::Validation("propagation document has no seed".into()));
        }
        if self.configs.as_ref().is_none_or(Map::is_empty) {
            return Err(Error::Validation("propagation document has no config echo".into()));
        }
        if self.engine_version.is_empty() {
            return Err(Error::Validation("propagation document has no engine version".into()));
        }
        if self.mode == PropagationMode::Mask && self.mask.is_none() {
            return Err(Error::Validation("mask propagation without mask outputs".into()));
        }
        Ok(())
    }
}

/// Deserializes JSON, naming the offending field path on failure.
pub fn from_json<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::schema(path, e.into_inner().to_string())
    })
}

/// Pretty JSON with a trailing newline. Output is deterministic for equal values.
pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("document serializes");
    out.push(b'\n');
    out
}

pub fn decode_annotation(bytes: &[u8]) -> Result<AnnotationDoc> {
    let doc: AnnotationDoc = from_json(bytes)?;
    doc.validate()?;
    Ok(doc)
}

pub fn encode_annotation(doc: &AnnotationDoc) -> Result<Vec<u8>> {
    doc.validate()?;
    Ok(to_json(doc))
}

pub fn decode_propagation(bytes: &[u8]) -> Result<PropagationDoc> {
    let doc: PropagationDoc = from_json(bytes)?;
    doc.validate()?;
    Ok(doc)
}

pub fn encode_propagation(doc: &PropagationDoc) -> Result<Vec<u8>> {
    doc.validate()?;
    Ok(to_json(doc))
}

pub fn read_annotation(path: impl AsRef<Path>) -> Result<AnnotationDoc> {
    let path = path.as_ref();
    decode_annotation(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_annotation(doc: &AnnotationDoc, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_annotation(doc)?)
}

pub fn read_propagation(path: impl AsRef<Path>) -> Result<PropagationDoc> {
    let path = path.as_ref();
    decode_propagation(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_propagation(doc: &PropagationDoc, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_propagation(doc)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn annotation() -> AnnotationDoc {
        AnnotationDoc {
            video_id: "v1".into(),
            frame: 0,
            canvas: Canvas::new(64, 48),
            points: Some(vec![AnnotatedPoint::new(3.5, 10.0, "apex"), AnnotatedPoint::new(0.0, 47.9, "")]),
            mask_ref: None,
            extra: Map::new(),
        }
    }

    fn schema_path(r: Result<impl std::fmt::Debug>) -> String {
        match r {
            Err(Error::Schema { path, .. }) => path,
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn annotation_round_trip() {
        let doc = annotation();
        let bytes = encode_annotation(&doc).unwrap();
        assert_eq!(decode_annotation(&bytes).unwrap(), doc);
    }

    #[test]
    fn unknown_fields_survive() {
        let text = json!({
            "video_id": "v", "frame": 2, "canvas": {"width": 8, "height": 8},
            "points": [{"x": 1.0, "y": 2.0, "label": "a", "color": "red"}],
            "annotator": {"name": "kim", "tool": 3}
        });
        let doc = decode_annotation(text.to_string().as_bytes()).unwrap();
        assert_eq!(doc.extra["annotator"]["tool"], 3);
        assert_eq!(doc.points.as_ref().unwrap()[0].extra["color"], "red");
        let again: Value = serde_json::from_slice(&encode_annotation(&doc).unwrap()).unwrap();
        assert_eq!(again, text);
    }

    #[test]
    fn point_on_right_edge_is_out_of_canvas() {
        let mut doc = annotation();
        doc.points.as_mut().unwrap()[1].x = 64.0;
        assert_eq!(schema_path(doc.validate().map(|_| ())), "points[1].x");
    }

    #[test]
    fn no_payload() {
        let text = br#"{"video_id": "v", "frame": 0, "canvas": {"width": 4, "height": 4}}"#;
        let err = decode_annotation(text).unwrap_err();
        assert!(err.to_string().contains("annotation has no payload"), "{err}");
        let text = br#"{"video_id": "v", "frame": 0, "canvas": {"width": 4, "height": 4}, "mask_ref": "m.pgm"}"#;
        assert!(decode_annotation(text).is_ok());
    }

    #[test]
    fn type_errors_name_the_path() {
        let text = br#"{"video_id": "v", "frame": 0, "canvas": {"width": 4, "height": 4},
            "points": [{"x": 1, "y": 1}, {"x": "left", "y": 1}]}"#;
        assert_eq!(schema_path(decode_annotation(text)), "points[1].x");
        let text = br#"{"video_id": "v", "frame": -1, "canvas": {"width": 4, "height": 4}, "mask_ref": "m"}"#;
        assert_eq!(schema_path(decode_annotation(text)), "frame");
        let text = br#"{"video_id": "v", "frame": 0, "canvas": {"width": 4}, "mask_ref": "m"}"#;
        assert_eq!(schema_path(decode_annotation(text)), "canvas");
    }

    fn propagation() -> PropagationDoc {
        let mut configs = Map::new();
        configs.insert("match".into(), json!({"sigma": null, "search_stride": 1.0}));
        PropagationDoc {
            engine_version: ENGINE_VERSION.into(),
            seed: Some(7),
            configs: Some(configs),
            source: SourceRef {
                video_id: "v1".into(),
                frame: 0,
                path: Some("ann.json".into()),
            },
            target: FrameRef {
                video_id: "v1".into(),
                frame: 3,
            },
            mode: PropagationMode::Points,
            results: vec![MatchResult {
                source: [1.0, 2.0],
                predicted: [3.0, 4.0],
                score: 0.75,
                cosine: 0.8,
                flow_center: [2.9, 4.2],
            }],
            mask: None,
            extra: Map::new(),
        }
    }

    #[test]
    fn propagation_round_trip_is_byte_stable() {
        let doc = propagation();
        let a = encode_propagation(&doc).unwrap();
        assert_eq!(decode_propagation(&a).unwrap(), doc);
        assert_eq!(encode_propagation(&decode_propagation(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn missing_reproducibility_fields_fail_validation() {
        let mut doc = propagation();
        doc.seed = None;
        assert!(matches!(encode_propagation(&doc), Err(Error::Validation(_))));
        let bytes = to_json(&doc);
        assert!(matches!(decode_propagation(&bytes), Err(Error::Validation(_))));
        let mut doc = propagation();
        doc.configs = Some(Map::new());
        assert!(matches!(doc.validate(), Err(Error::Validation(_))));
    }
}
