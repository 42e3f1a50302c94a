//! Read and write pose graphs in the g2o text format.
//!
//! Vertices are `VERTEX_SE3:QUAT id x y z qx qy qz qw`; edges are
//! `EDGE_SE3:QUAT from to x y z qx qy qz qw` followed by the upper triangle
//! of the 6x6 information matrix, row-major, in the file's
//! translation-then-rotation coordinate order. Internally twists put
//! rotation first, so information matrices are permuted on the way through.
//!
//! Floats are printed in Rust's shortest round-trip form, which preserves
//! every f64 bit pattern exactly and keeps output byte-stable across runs.
//! Vertex ids are packed keys (robot id in the top byte), written in
//! ascending order; odometry edges precede loop closures.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::graph::{EdgeKind, GlobalKey, MeasurementEdge};
use crate::se3::{Covariance6, Pose3};

const VERTEX_TAG: &str = "VERTEX_SE3:QUAT";
const EDGE_TAG: &str = "EDGE_SE3:QUAT";

/// Poses and measurements of a (possibly multi-robot) pose graph, as stored
/// in one g2o file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct G2oDocument {
    pub poses: BTreeMap<GlobalKey, Pose3>,
    pub edges: Vec<MeasurementEdge>,
}

/// File coordinate index for internal twist index: translation and rotation
/// blocks swap places.
fn file_axis(internal: usize) -> usize {
    (internal + 3) % 6
}

fn quaternion_of(rotation: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*rotation));
    let (qw, qx, qy, qz) = (q.w, q.i, q.j, q.k);
    // Canonical sign: non-negative scalar part, so equal rotations print
    // identically.
    if qw < 0.0 {
        [-qx, -qy, -qz, -qw]
    } else {
        [qx, qy, qz, qw]
    }
}

fn rotation_of(qx: f64, qy: f64, qz: f64, qw: f64, line: usize) -> Result<Matrix3<f64>> {
    let q = Quaternion::new(qw, qx, qy, qz);
    let norm = q.norm();
    if !(norm.is_finite() && (norm - 1.0).abs() < 1.0e-6) {
        return Err(Error::Parse {
            line,
            message: format!("quaternion norm {norm} is not 1"),
        });
    }
    Ok(*UnitQuaternion::new_normalize(q).to_rotation_matrix().matrix())
}

fn write_pose_fields<W: Write>(out: &mut W, pose: &Pose3) -> Result<()> {
    let t = &pose.translation;
    let [qx, qy, qz, qw] = quaternion_of(&pose.rotation);
    write!(out, " {} {} {} {} {} {} {}", t.x, t.y, t.z, qx, qy, qz, qw)?;
    Ok(())
}

pub fn write_g2o<W: Write>(out: &mut W, document: &G2oDocument) -> Result<()> {
    for (key, pose) in &document.poses {
        write!(out, "{VERTEX_TAG} {}", key.encode())?;
        write_pose_fields(out, pose)?;
        writeln!(out)?;
    }

    // Odometry first, then loop closures, each sorted by endpoint keys.
    let mut order: Vec<usize> = (0..document.edges.len()).collect();
    order.sort_by_key(|&i| {
        let e = &document.edges[i];
        (e.kind != EdgeKind::Odometry, e.from.encode(), e.to.encode())
    });
    for i in order {
        let edge = &document.edges[i];
        write!(out, "{EDGE_TAG} {} {}", edge.from.encode(), edge.to.encode())?;
        write_pose_fields(out, &edge.relative_pose)?;
        for row in 0..6 {
            for col in row..6 {
                let v = edge.information[(file_axis(row), file_axis(col))];
                write!(out, " {v}")?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

struct FieldParser<'a> {
    fields: std::str::SplitWhitespace<'a>,
    line: usize,
}

impl<'a> FieldParser<'a> {
    fn f64(&mut self, what: &str) -> Result<f64> {
        let raw = self.fields.next().ok_or_else(|| Error::Parse {
            line: self.line,
            message: format!("missing field: {what}"),
        })?;
        raw.parse().map_err(|_| Error::Parse {
            line: self.line,
            message: format!("field {what} is not a number: {raw:?}"),
        })
    }

    fn key(&mut self, what: &str) -> Result<GlobalKey> {
        let raw = self.fields.next().ok_or_else(|| Error::Parse {
            line: self.line,
            message: format!("missing field: {what}"),
        })?;
        let id: u64 = raw.parse().map_err(|_| Error::Parse {
            line: self.line,
            message: format!("field {what} is not a vertex id: {raw:?}"),
        })?;
        Ok(GlobalKey::decode(id))
    }

    fn finish(mut self) -> Result<()> {
        if let Some(extra) = self.fields.next() {
            return Err(Error::Parse {
                line: self.line,
                message: format!("unexpected trailing field: {extra:?}"),
            });
        }
        Ok(())
    }
}

pub fn read_g2o<R: BufRead>(input: R) -> Result<G2oDocument> {
    let mut document = G2oDocument::default();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        let trimmed = text.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let tag = fields.next().expect("non-empty line has a first field");
        let mut parser = FieldParser {
            fields,
            line: line_no,
        };
        match tag {
            VERTEX_TAG => {
                let key = parser.key("vertex id")?;
                let (x, y, z) = (parser.f64("x")?, parser.f64("y")?, parser.f64("z")?);
                let (qx, qy, qz) = (parser.f64("qx")?, parser.f64("qy")?, parser.f64("qz")?);
                let qw = parser.f64("qw")?;
                parser.finish()?;
                let rotation = rotation_of(qx, qy, qz, qw, line_no)?;
                if document
                    .poses
                    .insert(key, Pose3::new(rotation, Vector3::new(x, y, z)))
                    .is_some()
                {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("duplicate vertex {key}"),
                    });
                }
            }
            EDGE_TAG => {
                let from = parser.key("from id")?;
                let to = parser.key("to id")?;
                let (x, y, z) = (parser.f64("x")?, parser.f64("y")?, parser.f64("z")?);
                let (qx, qy, qz) = (parser.f64("qx")?, parser.f64("qy")?, parser.f64("qz")?);
                let qw = parser.f64("qw")?;
                let rotation = rotation_of(qx, qy, qz, qw, line_no)?;
                let mut information = Covariance6::zeros();
                for row in 0..6 {
                    for col in row..6 {
                        let v = parser.f64("information entry")?;
                        information[(file_axis(row), file_axis(col))] = v;
                        information[(file_axis(col), file_axis(row))] = v;
                    }
                }
                parser.finish()?;
                let kind = classify_edge(from, to, line_no)?;
                document.edges.push(MeasurementEdge {
                    from,
                    to,
                    relative_pose: Pose3::new(rotation, Vector3::new(x, y, z)),
                    information,
                    kind,
                });
            }
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unknown record tag {other:?}"),
                });
            }
        }
    }
    for edge in &document.edges {
        for key in [edge.from, edge.to] {
            if !document.poses.contains_key(&key) {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("edge endpoint {key} has no vertex"),
                });
            }
        }
    }
    Ok(document)
}

fn classify_edge(from: GlobalKey, to: GlobalKey, line: usize) -> Result<EdgeKind> {
    if from.robot_id != to.robot_id {
        Ok(EdgeKind::InterRobotLoopClosure)
    } else if to.keyframe_index == from.keyframe_index + 1 {
        Ok(EdgeKind::Odometry)
    } else {
        Err(Error::Parse {
            line,
            message: format!("same-robot edge {from} -> {to} is not a forward odometry step"),
        })
    }
}
