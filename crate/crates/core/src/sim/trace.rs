//! JSON-Lines lifelog traces.
//!
//! Line 1 is a header `{"trace_version":1}`; every following line is one
//! frame. Frames must be in non-decreasing time order.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::geo::GeoPoint;
use crate::recall::{Detection, FrameObservation, FrameQuery};
use crate::store::ResponseSource;

use super::SimError;

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceHeader {
    pub trace_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub label: String,
    pub conf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub referent: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default = "static_source")]
    pub source: String,
}

fn static_source() -> String {
    "static".into()
}

/// One frame line as it appears on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub ts: i64,
    #[serde(default)]
    pub tz_min: i32,
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub acc_m: f64,
    pub scene: String,
    pub activity: String,
    #[serde(default)]
    pub detections: Vec<DetectionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<QueryRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_case: Option<String>,
}

/// The user query carried by a frame, with its canned response.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceQuery {
    pub referent: String,
    pub text: String,
    pub response: Option<String>,
    pub source: ResponseSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFrame {
    pub line: usize,
    pub observation: FrameObservation,
    pub query: Option<TraceQuery>,
    pub use_case: Option<String>,
}

impl FrameRecord {
    fn into_frame(self, line: usize) -> Result<TraceFrame, String> {
        let geo = GeoPoint::new(self.lat, self.lon, self.acc_m).map_err(|e| e.to_string())?;
        let ts = Timestamp::new(self.ts, self.tz_min).map_err(|e| e.to_string())?;
        if self.scene.trim().is_empty() || self.activity.trim().is_empty() {
            return Err("scene and activity must not be empty".into());
        }
        let mut detections = Vec::with_capacity(self.detections.len());
        for d in self.detections {
            if !(0.0..=1.0).contains(&d.conf) {
                return Err(format!("confidence {} outside [0, 1]", d.conf));
            }
            detections.push(Detection::new(d.label, d.conf));
        }
        let query = match self.query {
            None => None,
            Some(q) => {
                if q.referent.trim().is_empty() || q.text.trim().is_empty() {
                    return Err("query referent and text must not be empty".into());
                }
                let source: ResponseSource = q.source.parse()?;
                if q.response.is_none() && source == ResponseSource::StaticKnowledge {
                    return Err("static query needs a response".into());
                }
                Some(TraceQuery { referent: q.referent, text: q.text, response: q.response, source })
            }
        };
        let observation = FrameObservation {
            ts,
            geo,
            detections,
            scene_text: self.scene,
            activity_text: self.activity,
            query: query
                .as_ref()
                .map(|q| FrameQuery { referent_label: q.referent.clone(), query_text: q.text.clone() }),
        };
        Ok(TraceFrame { line, observation, query, use_case: self.use_case })
    }
}

/// Parses a whole trace. An empty input is a valid trace with no frames.
pub fn parse_trace(reader: impl BufRead) -> Result<Vec<TraceFrame>, SimError> {
    let mut frames: Vec<TraceFrame> = Vec::new();
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| SimError::Parse { line: line_no, reason: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| SimError::Parse { line: line_no, reason };
        if !saw_header {
            let header: TraceHeader =
                serde_json::from_str(&line).map_err(|e| parse_err(format!("bad trace header: {e}")))?;
            if header.trace_version != TRACE_VERSION {
                return Err(parse_err(format!("unsupported trace version {}", header.trace_version)));
            }
            saw_header = true;
            continue;
        }
        let record: FrameRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let frame = record.into_frame(line_no).map_err(parse_err)?;
        if let Some(prev) = frames.last() {
            if frame.observation.ts.epoch_s() < prev.observation.ts.epoch_s() {
                return Err(parse_err("timestamps must be non-decreasing".into()));
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// Serializes frames as a trace, header first.
pub fn write_trace(name: Option<&str>, frames: &[FrameRecord]) -> String {
    let header = TraceHeader { trace_version: TRACE_VERSION, name: name.map(str::to_string) };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for f in frames {
        out.push_str(&serde_json::to_string(f).expect("frame serializes"));
        out.push('\n');
    }
    out
}
