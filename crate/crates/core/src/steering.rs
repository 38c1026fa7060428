//! Tracked poses and pose-driven ATF selection.
//!
//! The device frame is +x forward, +y left, +z up. A [`Pose`] orientation is
//! the world-from-device rotation, so a world vector is brought into the
//! device frame with the inverse rotation.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::atf::{AtfSet, Direction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub time: f64,
    pub position: [f64; 3],
    orientation: UnitQuaternion<f64>,
}

impl Pose {
    /// `quaternion` is `[w, x, y, z]` and must have norm within 1e-6 of 1.
    pub fn new(time: f64, position: [f64; 3], quaternion: [f64; 4]) -> Result<Self> {
        if !time.is_finite() {
            return Err(Error::invalid("pose", format!("time {time}")));
        }
        if position.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose", format!("position {position:?}")));
        }
        let q = Quaternion::new(quaternion[0], quaternion[1], quaternion[2], quaternion[3]);
        let norm = q.norm();
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(Error::invalid(
                "pose",
                format!("quaternion norm {norm} is not 1"),
            ));
        }
        Ok(Self {
            time,
            position,
            orientation: UnitQuaternion::new_normalize(q),
        })
    }

    pub fn identity(time: f64, position: [f64; 3]) -> Self {
        Self {
            time,
            position,
            orientation: UnitQuaternion::identity(),
        }
    }

    /// Pose rotated by `yaw_rad` about world +z.
    pub fn from_yaw(time: f64, position: [f64; 3], yaw_rad: f64) -> Self {
        Self {
            time,
            position,
            orientation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw_rad),
        }
    }

    pub fn orientation(&self) -> &UnitQuaternion<f64> {
        &self.orientation
    }

    /// `[w, x, y, z]`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn with_orientation(mut self, orientation: UnitQuaternion<f64>) -> Self {
        self.orientation = orientation;
        self
    }
}

/// Time-ordered poses of one participant.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrack {
    pub participant_id: String,
    samples: Vec<Pose>,
}

impl PoseTrack {
    pub fn new(participant_id: impl Into<String>, samples: Vec<Pose>) -> Result<Self> {
        let participant_id = participant_id.into();
        if samples.is_empty() {
            return Err(Error::invalid(
                "pose track",
                format!("{participant_id}: no samples"),
            ));
        }
        if let Some(w) = samples.windows(2).find(|w| !(w[1].time > w[0].time)) {
            return Err(Error::invalid(
                "pose track",
                format!(
                    "{participant_id}: timestamps not strictly increasing at {}",
                    w[1].time
                ),
            ));
        }
        Ok(Self {
            participant_id,
            samples,
        })
    }

    pub fn samples(&self) -> &[Pose] {
        &self.samples
    }

    /// Zero-order hold: the latest sample with `time <= t`.
    pub fn pose_at(&self, t: f64) -> Result<&Pose> {
        let k = self.samples.partition_point(|p| p.time <= t);
        if k == 0 {
            return Err(Error::NoPoseYet {
                participant: self.participant_id.clone(),
                time: t,
                first: self.samples[0].time,
            });
        }
        Ok(&self.samples[k - 1])
    }
}

/// Direction of `target_position` as seen from the wearer's device.
pub fn relative_direction(wearer: &Pose, target_position: [f64; 3]) -> Result<Direction> {
    relative_direction_with_offset(wearer, target_position, [0.0; 3])
}

/// As [`relative_direction`], with the device origin displaced by
/// `marker_offset` (device frame) from the tracked marker center of mass.
pub fn relative_direction_with_offset(
    wearer: &Pose,
    target_position: [f64; 3],
    marker_offset: [f64; 3],
) -> Result<Direction> {
    let world = Vector3::from(target_position) - Vector3::from(wearer.position);
    if world.norm() <= 1e-6 {
        return Err(Error::DegenerateDirection);
    }
    let device = wearer.orientation.inverse_transform_vector(&world) - Vector3::from(marker_offset);
    Direction::from_vector([device.x, device.y, device.z]).ok_or(Error::DegenerateDirection)
}

/// Grid index of the ATF closest to the target's relative direction.
pub fn steer(set: &AtfSet, wearer: &Pose, target_position: [f64; 3]) -> Result<usize> {
    Ok(set.nearest_direction(&relative_direction(wearer, target_position)?))
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseRow {
    time_s: f64,
    participant_id: String,
    px: f64,
    py: f64,
    pz: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
}

/// Reads the pose CSV (`time_s,participant_id,px,py,pz,qw,qx,qy,qz`),
/// grouping rows by participant.
pub fn read_pose_csv(path: impl AsRef<Path>) -> Result<BTreeMap<String, PoseTrack>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pose_csv_from(file, &path.display().to_string())
}

pub fn read_pose_csv_from(
    reader: impl std::io::Read,
    name: &str,
) -> Result<BTreeMap<String, PoseTrack>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(name, 1, e))?.clone();
    let expected = [
        "time_s",
        "participant_id",
        "px",
        "py",
        "pz",
        "qw",
        "qx",
        "qy",
        "qz",
    ];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            path: name.to_string(),
            line: 1,
            reason: format!("header must be {}", expected.join(",")),
        });
    }
    let mut grouped: BTreeMap<String, Vec<Pose>> = BTreeMap::new();
    for (k, row) in rdr.deserialize::<PoseRow>().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| parse_err(name, line, e))?;
        let pose = Pose::new(
            row.time_s,
            [row.px, row.py, row.pz],
            [row.qw, row.qx, row.qy, row.qz],
        )
        .map_err(|e| parse_err(name, line, e))?;
        grouped.entry(row.participant_id).or_default().push(pose);
    }
    grouped
        .into_iter()
        .map(|(id, samples)| Ok((id.clone(), PoseTrack::new(id, samples)?)))
        .collect()
}

pub fn write_pose_csv(path: impl AsRef<Path>, tracks: &[&PoseTrack]) -> Result<()> {
    let mut rows: Vec<PoseRow> = tracks
        .iter()
        .flat_map(|t| {
            t.samples.iter().map(|p| {
                let q = p.quaternion();
                PoseRow {
                    time_s: p.time,
                    participant_id: t.participant_id.clone(),
                    px: p.position[0],
                    py: p.position[1],
                    pz: p.position[2],
                    qw: q[0],
                    qx: q[1],
                    qy: q[2],
                    qz: q[3],
                }
            })
        })
        .collect();
    rows.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
    crate::harness::write_atomically(path.as_ref(), |w| {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &rows {
            wtr.serialize(r).map_err(std::io::Error::other)?;
        }
        wtr.flush()
    })
}

fn parse_err(name: &str, line: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: name.to_string(),
        line,
        reason: e.to_string(),
    }
}
