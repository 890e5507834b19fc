//! World feature map export as binary little-endian PLY.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use mlio_core::features::FeatureCloud;
use mlio_core::Posed;

use crate::PipelineError;

pub const LABEL_EDGE: u8 = 1;
pub const LABEL_PLANE: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub xyz: [f32; 3],
    pub label: u8,
}

/// World-frame points of a body-frame feature cloud placed at `pose`.
pub fn map_points(cloud: &FeatureCloud, pose: &Posed) -> Vec<MapPoint> {
    let tag = |label| {
        move |f: &mlio_core::features::FeaturePoint| {
            let p = pose.apply(&f.p);
            MapPoint { xyz: [p.x as f32, p.y as f32, p.z as f32], label }
        }
    };
    cloud.edges.iter().map(tag(LABEL_EDGE)).chain(cloud.planes.iter().map(tag(LABEL_PLANE))).collect()
}

const HEADER_TAIL: &str = "property float x\nproperty float y\nproperty float z\nproperty uchar label\nend_header\n";

pub fn write_ply(path: &Path, points: &[MapPoint]) -> Result<(), PipelineError> {
    if points.is_empty() {
        return Err(PipelineError::Ply { path: path.to_path_buf(), msg: "map is empty".into() });
    }
    let io = |source| PipelineError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n{HEADER_TAIL}", points.len()).map_err(io)?;
    for p in points {
        for c in p.xyz {
            w.write_all(&c.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&[p.label]).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a file written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<Vec<MapPoint>, PipelineError> {
    let io = |source| PipelineError::Io { path: path.to_path_buf(), source };
    let bad = |msg: String| PipelineError::Ply { path: path.to_path_buf(), msg };
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut header = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(io)? == 0 {
            return Err(bad("header not terminated".into()));
        }
        let line = line.trim_end().to_string();
        if line == "end_header" {
            break;
        }
        header.push(line);
    }
    if header.first().map(String::as_str) != Some("ply") {
        return Err(bad("missing ply magic".into()));
    }
    if !header.iter().any(|l| l == "format binary_little_endian 1.0") {
        return Err(bad("unsupported format".into()));
    }
    let props: Vec<&str> = header.iter().filter(|l| l.starts_with("property")).map(String::as_str).collect();
    if props != HEADER_TAIL.lines().filter(|l| l.starts_with("property")).collect::<Vec<_>>() {
        return Err(bad(format!("unexpected properties {props:?}")));
    }
    let n: usize = header
        .iter()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad("missing vertex count".into()))?;
    let mut buf = vec![0u8; n * 13];
    r.read_exact(&mut buf).map_err(|_| bad(format!("expected {n} vertices")))?;
    Ok(buf
        .chunks_exact(13)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]);
            MapPoint { xyz: [f(0), f(4), f(8)], label: c[12] }
        })
        .collect())
}
