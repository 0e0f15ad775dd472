//! Readers and writers for the on-disk formats.
//!
//! Text numbers use Rust's shortest round-trip formatting, so every `f64`
//! reads back bit for bit. Text readers skip blank lines and `#` comments
//! and report errors with 1-based line numbers and the byte offset of the
//! line start.

use std::fmt::Write as _;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::association::{Match, MatchSet};
use crate::descriptor::{FeatureMap, LineDescriptor};
use crate::evaluation::Trajectory;
use crate::geometry::{LineSegment2D, Pose};
use crate::simulator::{Keypoint, StageTimings};
use crate::weighting::WeightedMatch;

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
const FMAP_HEADER_BYTES: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("line {line} (byte {offset}): {message}")]
    Syntax { line: usize, offset: usize, message: String },
    #[error("feature map: bad magic {found:?}, expected \"FMAP\"")]
    BadMagic { found: [u8; 4] },
    #[error("feature map: expected {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },
    #[error("feature map: {0}")]
    Invalid(String),
}

fn syntax(line: usize, offset: usize, message: impl Into<String>) -> FormatError {
    FormatError::Syntax {
        line,
        offset,
        message: message.into(),
    }
}

/// A non-empty, non-comment line with its position.
struct Record<'a> {
    line: usize,
    offset: usize,
    fields: Vec<&'a str>,
}

impl Record<'_> {
    fn err(&self, message: impl Into<String>) -> FormatError {
        syntax(self.line, self.offset, message)
    }

    fn expect_len(&self, n: usize, what: &str) -> Result<(), FormatError> {
        if self.fields.len() != n {
            return Err(self.err(format!("expected {n} fields ({what}), found {}", self.fields.len())));
        }
        Ok(())
    }

    fn f64(&self, k: usize) -> Result<f64, FormatError> {
        let s = self.fields[k];
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(format!("field {}: `{s}` is not a finite number", k + 1)))
    }

    fn uint<T: std::str::FromStr>(&self, k: usize) -> Result<T, FormatError> {
        let s = self.fields[k];
        s.parse::<T>()
            .map_err(|_| self.err(format!("field {}: `{s}` is not a non-negative integer", k + 1)))
    }
}

/// Splits text into records; comment lines are passed to `on_comment`.
fn records<'a>(
    text: &'a str,
    mut on_comment: impl FnMut(usize, usize, &'a str) -> Result<(), FormatError>,
) -> Result<Vec<Record<'a>>, FormatError> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (idx, raw) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += raw.len();
        let content = raw.trim();
        if content.is_empty() {
            continue;
        }
        if let Some(comment) = content.strip_prefix('#') {
            on_comment(idx + 1, start, comment.trim())?;
            continue;
        }
        out.push(Record {
            line: idx + 1,
            offset: start,
            fields: content.split_whitespace().collect(),
        });
    }
    Ok(out)
}

fn plain_records(text: &str) -> Result<Vec<Record<'_>>, FormatError> {
    records(text, |_, _, _| Ok(()))
}

pub fn write_feature_map(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(FMAP_HEADER_BYTES + 4 * map.data().len());
    out.extend_from_slice(FMAP_MAGIC);
    for v in [map.depth(), map.height(), map.width()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(map.scale() as f32).to_le_bytes());
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads a feature map; the scale is stored as `f32`.
pub fn read_feature_map(bytes: &[u8]) -> Result<FeatureMap, FormatError> {
    if bytes.len() < FMAP_HEADER_BYTES {
        return Err(FormatError::Length {
            expected: FMAP_HEADER_BYTES,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != FMAP_MAGIC {
        return Err(FormatError::BadMagic { found: magic });
    }
    let word = |k: usize| -> [u8; 4] { bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes") };
    let (d, h, w) = (
        u32::from_le_bytes(word(0)) as usize,
        u32::from_le_bytes(word(1)) as usize,
        u32::from_le_bytes(word(2)) as usize,
    );
    let scale = f32::from_le_bytes(word(3));
    let expected = d
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(FMAP_HEADER_BYTES))
        .ok_or_else(|| FormatError::Invalid(format!("dimensions {d}×{h}×{w} overflow")))?;
    if bytes.len() != expected {
        return Err(FormatError::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[FMAP_HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FeatureMap::new(d, h, w, scale as f64, data).map_err(|e| FormatError::Invalid(e.to_string()))
}

/// `id x_s y_s x_e y_e` per segment; segments without an id are written
/// with their index.
pub fn write_segments(segs: &[LineSegment2D]) -> String {
    let mut out = String::new();
    for (k, s) in segs.iter().enumerate() {
        let id = s.track_id.unwrap_or(k as u64);
        let _ = writeln!(out, "{id} {} {} {} {}", s.start[0], s.start[1], s.end[0], s.end[1]);
    }
    out
}

pub fn read_segments(text: &str) -> Result<Vec<LineSegment2D>, FormatError> {
    plain_records(text)?
        .iter()
        .map(|r| {
            r.expect_len(5, "id x_s y_s x_e y_e")?;
            let seg = LineSegment2D::new(Vector2::new(r.f64(1)?, r.f64(2)?), Vector2::new(r.f64(3)?, r.f64(4)?));
            Ok(seg.with_track_id(r.uint(0)?))
        })
        .collect()
}

pub fn write_keypoints(kps: &[Keypoint]) -> String {
    let mut out = String::new();
    for k in kps {
        let _ = writeln!(out, "{} {} {}", k.id, k.uv[0], k.uv[1]);
    }
    out
}

pub fn read_keypoints(text: &str) -> Result<Vec<Keypoint>, FormatError> {
    plain_records(text)?
        .iter()
        .map(|r| {
            r.expect_len(3, "id u v")?;
            Ok(Keypoint {
                id: r.uint(0)?,
                uv: Vector2::new(r.f64(1)?, r.f64(2)?),
            })
        })
        .collect()
}

/// TUM trajectory: `t tx ty tz qx qy qz qw`, camera-to-world.
pub fn write_tum(traj: &Trajectory) -> String {
    let mut out = String::new();
    for (t, pose) in traj.iter() {
        let p = pose.translation();
        let q = pose.quaternion();
        let _ = writeln!(out, "{t} {} {} {} {} {} {} {}", p[0], p[1], p[2], q.i, q.j, q.k, q.w);
    }
    out
}

pub fn read_tum(text: &str) -> Result<Trajectory, FormatError> {
    let mut traj = Trajectory::default();
    for r in plain_records(text)? {
        r.expect_len(8, "t tx ty tz qx qy qz qw")?;
        let t = r.f64(0)?;
        if traj.stamps().last().is_some_and(|&last| t <= last) {
            return Err(r.err(format!("timestamp {t} does not increase")));
        }
        let q = Quaternion::new(r.f64(7)?, r.f64(4)?, r.f64(5)?, r.f64(6)?);
        if !(q.norm() > 1e-6) {
            return Err(r.err("zero quaternion"));
        }
        let pose = Pose::from_quaternion(UnitQuaternion::from_quaternion(q), Vector3::new(r.f64(1)?, r.f64(2)?, r.f64(3)?));
        traj.push(t, pose).map_err(|e| r.err(e.to_string()))?;
    }
    Ok(traj)
}

fn index_list(items: &[usize]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

/// `i j T_ij` per accepted pair, then the unmatched indices of each side.
pub fn write_matches(ms: &MatchSet) -> String {
    let mut out = String::new();
    for p in &ms.pairs {
        let _ = writeln!(out, "{} {} {}", p.i, p.j, p.confidence);
    }
    let _ = writeln!(out, "# unmatched_a: {}", index_list(&ms.unmatched_a));
    let _ = writeln!(out, "# unmatched_b: {}", index_list(&ms.unmatched_b));
    out
}

pub fn read_matches(text: &str) -> Result<MatchSet, FormatError> {
    let mut unmatched_a = Vec::new();
    let mut unmatched_b = Vec::new();
    let recs = records(text, |line, offset, comment| {
        let (target, rest) = if let Some(rest) = comment.strip_prefix("unmatched_a:") {
            (&mut unmatched_a, rest)
        } else if let Some(rest) = comment.strip_prefix("unmatched_b:") {
            (&mut unmatched_b, rest)
        } else {
            return Ok(());
        };
        for tok in rest.split_whitespace() {
            target.push(tok.parse().map_err(|_| syntax(line, offset, format!("`{tok}` is not an index")))?);
        }
        Ok(())
    })?;
    let pairs = recs
        .iter()
        .map(|r| {
            r.expect_len(3, "i j T_ij")?;
            Ok(Match {
                i: r.uint(0)?,
                j: r.uint(1)?,
                confidence: r.f64(2)?,
            })
        })
        .collect::<Result<Vec<_>, FormatError>>()?;
    Ok(MatchSet {
        pairs,
        unmatched_a,
        unmatched_b,
        warning: None,
    })
}

/// `i j T_ij w_ij` per weighted match.
pub fn write_weights(ws: &[WeightedMatch]) -> String {
    let mut out = String::new();
    for w in ws {
        let _ = writeln!(out, "{} {} {} {}", w.i, w.j, w.confidence, w.weight);
    }
    out
}

pub fn read_weights(text: &str) -> Result<Vec<WeightedMatch>, FormatError> {
    plain_records(text)?
        .iter()
        .map(|r| {
            r.expect_len(4, "i j T_ij w_ij")?;
            Ok(WeightedMatch {
                i: r.uint(0)?,
                j: r.uint(1)?,
                confidence: r.f64(2)?,
                weight: r.f64(3)?,
            })
        })
        .collect()
}

/// `id γ_line γ_pt v_1 … v_n` per segment.
pub fn write_descriptors(ids: &[u64], descs: &[LineDescriptor]) -> String {
    let mut out = String::new();
    for (id, d) in ids.iter().zip(descs) {
        let _ = write!(out, "{id} {} {}", d.gamma_line, d.gamma_pt);
        for v in d.vector.iter() {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

pub fn read_descriptors(text: &str) -> Result<(Vec<u64>, Vec<LineDescriptor>), FormatError> {
    let mut ids = Vec::new();
    let mut descs = Vec::new();
    let mut dim = None;
    for r in plain_records(text)? {
        if r.fields.len() < 4 {
            return Err(r.err("expected `id γ_line γ_pt` followed by descriptor values"));
        }
        let n = r.fields.len() - 3;
        if dim.is_some_and(|d| d != n) {
            return Err(r.err(format!("descriptor has {n} values, earlier rows have {}", dim.unwrap_or(0))));
        }
        dim = Some(n);
        let values = (3..r.fields.len()).map(|k| r.f64(k)).collect::<Result<Vec<_>, _>>()?;
        ids.push(r.uint(0)?);
        descs.push(LineDescriptor {
            vector: nalgebra::DVector::from_vec(values),
            gamma_line: r.f64(1)?,
            gamma_pt: r.f64(2)?,
        });
    }
    Ok((ids, descs))
}

/// One row of the metrics CSV. Missing values are written as empty cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub ate_rmse_cm: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub mean_runtime_ms: Option<f64>,
    pub stages: Option<StageTimings>,
}

pub const METRICS_COLUMNS: [&str; 5] = ["run_id", "ate_rmse_cm", "precision", "recall", "mean_runtime_ms"];
pub const STAGE_COLUMNS: [&str; 4] = ["render_ms", "describe_ms", "associate_ms", "optimize_ms"];

pub fn metrics_header(with_stages: bool) -> String {
    let mut cols: Vec<&str> = METRICS_COLUMNS.to_vec();
    if with_stages {
        cols.extend(STAGE_COLUMNS);
    }
    cols.join(",")
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self, with_stages: bool) -> String {
        let mut out = format!(
            "{},{},{},{},{}",
            self.run_id,
            cell(self.ate_rmse_cm),
            self.precision,
            self.recall,
            cell(self.mean_runtime_ms)
        );
        if with_stages {
            let frames = self.stages.map(|s| s.frames.max(1) as f64);
            let per = |f: fn(&StageTimings) -> f64| cell(self.stages.as_ref().zip(frames).map(|(s, n)| f(s) / n));
            for v in [per(|s| s.render_ms), per(|s| s.describe_ms), per(|s| s.associate_ms), per(|s| s.optimize_ms)] {
                out.push(',');
                out.push_str(&v);
            }
        }
        out
    }
}

/// Rows of a metrics CSV as `(header, cells)`.
pub fn read_metrics(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>), FormatError> {
    let mut lines = text.split_inclusive('\n');
    let header: Vec<String> = lines
        .next()
        .map(|h| h.trim().split(',').map(str::to_string).collect())
        .ok_or_else(|| syntax(1, 0, "missing header"))?;
    if header.len() < METRICS_COLUMNS.len() || header[..METRICS_COLUMNS.len()] != METRICS_COLUMNS {
        return Err(syntax(1, 0, format!("header must start with {}", METRICS_COLUMNS.join(","))));
    }
    let mut rows = Vec::new();
    let mut offset = text.split_inclusive('\n').next().map_or(0, str::len);
    for (idx, raw) in lines.enumerate() {
        let start = offset;
        offset += raw.len();
        let content = raw.trim();
        if content.is_empty() {
            continue;
        }
        let cells: Vec<String> = content.split(',').map(str::to_string).collect();
        if cells.len() != header.len() {
            return Err(syntax(idx + 2, start, format!("expected {} cells, found {}", header.len(), cells.len())));
        }
        rows.push(cells);
    }
    Ok((header, rows))
}
