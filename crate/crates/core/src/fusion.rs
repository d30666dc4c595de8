//! Global point cloud from optimized node poses.
//!
//! For each view, the pass whose pointmap scores highest under the chosen
//! confidence reduction supplies that view's points, mapped to world
//! coordinates by the node pose: `s·R·P + t`.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Read, Write};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::PairMeasurement;
use crate::pose_graph::{NodeKey, PoseGraph};
use crate::sim3::Sim3;
use crate::two_view::LocalPointmap;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("measurement of pass {pass} references node {key}, which is not in the graph")]
    MissingNode { pass: u64, key: NodeKey },
    #[error("unknown confidence reduction {0:?} (expected mean, sum, or max)")]
    UnknownReduction(String),
    #[error("PLY: {0}")]
    Ply(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Summary of a pointmap's confidence used to pick a view's source pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
    Max,
}

impl std::str::FromStr for Reduction {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            "max" => Ok(Reduction::Max),
            other => Err(FusionError::UnknownReduction(other.to_string())),
        }
    }
}

impl Reduction {
    /// Over valid pixels; `−∞` for a pointmap without any.
    pub fn apply(&self, pm: &LocalPointmap) -> f64 {
        let conf = pm.valid_entries().map(|(_, _, c)| c);
        match self {
            Reduction::Sum => conf.sum(),
            Reduction::Max => conf.fold(f64::NEG_INFINITY, f64::max),
            Reduction::Mean => {
                let (sum, n) = conf.fold((0.0, 0usize), |(s, n), c| (s + c, n + 1));
                if n == 0 {
                    f64::NEG_INFINITY
                } else {
                    sum / n as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedPoint {
    pub position: Vector3<f64>,
    pub confidence: f64,
    pub view: usize,
}

/// Transforms `pm`'s valid points by `pose`.
pub fn transform_pointmap(pm: &LocalPointmap, pose: &Sim3, view: usize) -> Vec<FusedPoint> {
    pm.valid_entries()
        .map(|(_, p, c)| FusedPoint {
            position: pose.act(p),
            confidence: c,
            view,
        })
        .collect()
}

/// Picks one pass per view and concatenates the transformed points in view
/// order. Ties keep the earlier measurement.
pub fn fuse(
    graph: &PoseGraph,
    measurements: &[PairMeasurement],
    reduction: Reduction,
) -> Result<Vec<FusedPoint>, FusionError> {
    let mut best: BTreeMap<usize, (f64, &LocalPointmap, Sim3)> = BTreeMap::new();
    for m in measurements {
        let sides = [
            (m.view_i, m.view_j, &m.pointmap_i),
            (m.view_j, m.view_i, &m.pointmap_j),
        ];
        for (view, partner, pm) in sides {
            let key = NodeKey::new(view, partner);
            let node = graph
                .node(key)
                .filter(|n| n.pass_id == m.pass_id)
                .ok_or(FusionError::MissingNode { pass: m.pass_id, key })?;
            let score = reduction.apply(pm);
            match best.get(&view) {
                Some((s, _, _)) if *s >= score => {}
                _ => {
                    best.insert(view, (score, pm, node.pose));
                }
            }
        }
    }
    let per_view: Vec<Vec<FusedPoint>> = best
        .into_par_iter()
        .map(|(view, (_, pm, pose))| transform_pointmap(pm, &pose, view))
        .collect();
    Ok(per_view.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

const PLY_PROPERTIES: [&str; 5] = [
    "property double x",
    "property double y",
    "property double z",
    "property double confidence",
    "property int view_id",
];

pub fn write_ply(mut out: impl Write, points: &[FusedPoint], format: PlyFormat) -> Result<(), FusionError> {
    let name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(out, "ply\nformat {name} 1.0\nelement vertex {}", points.len())?;
    for p in PLY_PROPERTIES {
        writeln!(out, "{p}")?;
    }
    writeln!(out, "end_header")?;
    for p in points {
        let view = i32::try_from(p.view).map_err(|_| FusionError::Ply(format!("view id {} exceeds int range", p.view)))?;
        match format {
            PlyFormat::Ascii => writeln!(
                out,
                "{} {} {} {} {}",
                p.position.x, p.position.y, p.position.z, p.confidence, view
            )?,
            PlyFormat::BinaryLittleEndian => {
                for v in [p.position.x, p.position.y, p.position.z, p.confidence] {
                    out.write_all(&v.to_le_bytes())?;
                }
                out.write_all(&view.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads files written by [`write_ply`].
pub fn read_ply(input: impl Read) -> Result<Vec<FusedPoint>, FusionError> {
    let mut reader = io::BufReader::new(input);
    let mut line = String::new();
    let mut next_line = |reader: &mut io::BufReader<_>| -> Result<String, FusionError> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(FusionError::Ply("unexpected end of header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut reader)? != "ply" {
        return Err(FusionError::Ply("missing 'ply' magic".into()));
    }
    let format = match next_line(&mut reader)?.as_str() {
        "format ascii 1.0" => PlyFormat::Ascii,
        "format binary_little_endian 1.0" => PlyFormat::BinaryLittleEndian,
        other => return Err(FusionError::Ply(format!("unsupported format line '{other}'"))),
    };
    let count: usize = next_line(&mut reader)?
        .strip_prefix("element vertex ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| FusionError::Ply("expected 'element vertex <count>'".into()))?;
    for expected in PLY_PROPERTIES {
        let got = next_line(&mut reader)?;
        if got != expected {
            return Err(FusionError::Ply(format!("expected '{expected}', got '{got}'")));
        }
    }
    if next_line(&mut reader)? != "end_header" {
        return Err(FusionError::Ply("expected 'end_header'".into()));
    }
    let mut points = Vec::with_capacity(count);
    match format {
        PlyFormat::Ascii => {
            for (k, row) in reader.lines().enumerate().take(count) {
                let row = row?;
                let f: Vec<&str> = row.split_whitespace().collect();
                let bad = || FusionError::Ply(format!("vertex {k}: malformed row '{row}'"));
                if f.len() != 5 {
                    return Err(bad());
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
                points.push(FusedPoint {
                    position: Vector3::new(num(f[0])?, num(f[1])?, num(f[2])?),
                    confidence: num(f[3])?,
                    view: f[4].parse().map_err(|_| bad())?,
                });
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut buf = [0u8; 36];
            for k in 0..count {
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| FusionError::Ply(format!("vertex {k}: truncated data")))?;
                let d = |i: usize| f64::from_le_bytes(buf[8 * i..8 * i + 8].try_into().unwrap());
                let view = i32::from_le_bytes(buf[32..36].try_into().unwrap());
                points.push(FusedPoint {
                    position: Vector3::new(d(0), d(1), d(2)),
                    confidence: d(3),
                    view: usize::try_from(view).map_err(|_| FusionError::Ply(format!("vertex {k}: negative view id")))?,
                });
            }
        }
    }
    if points.len() != count {
        return Err(FusionError::Ply(format!("header declares {count} vertices, found {}", points.len())));
    }
    Ok(points)
}
