//! Head tracklet association.
//!
//! Each frame, live trajectories are matched to head detections by solving
//!
//! ```text
//! min sum_ij (c_ij - t) x_ij   s.t. each row and column used at most once
//! ```
//!
//! where `c_ij` is the motion-compensated box distance plus `alpha` times the
//! appearance-feature distance. Only pairs with `c_ij < t` can lower the
//! objective, so the problem is a maximum-weight matching on weights
//! `t - c_ij` over those pairs, solved here with the Hungarian method.
//! Unmatched trajectories coast on the motion prediction while their life
//! lasts; finished trajectories are filtered by length and labeled by a
//! majority vote over the face IDs of their best-overlapping face boxes.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel box `(x1, y1)` top-left, `(x2, y2)` bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !(x1 < x2 && y1 < y2) || b.corners().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("box", format!("{b:?} is not well-ordered")));
        }
        Ok(b)
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub feature: Vec<f64>,
    pub frame: u64,
}

impl Detection {
    pub fn new(frame: u64, bbox: BBox, feature: Vec<f64>) -> Result<Self> {
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("detection", "non-finite feature"));
        }
        Ok(Self {
            bbox,
            feature,
            frame,
        })
    }
}

/// 2-D affine map `p' = A p + b` on pixel coordinates, row-major
/// `[[a11, a12, b1], [a21, a22, b2]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionTransform {
    m: [[f64; 3]; 2],
}

impl MotionTransform {
    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        let t = Self { m };
        if m.iter().flatten().any(|v| !v.is_finite()) || !(t.det().abs() > 1e-9) {
            return Err(Error::invalid(
                "motion transform",
                format!("{m:?} is not invertible"),
            ));
        }
        Ok(t)
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        self.m
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Self {
        let [[a, b, tx], [c, d, ty]] = self.m;
        let det = self.det();
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Self {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        }
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        let [[a, b, tx], [c, d, ty]] = self.m;
        (a * x + b * y + tx, c * x + d * y + ty)
    }

    /// Both corners mapped independently, as the 4-vector `(x1, y1, x2, y2)`.
    pub fn apply_corners(&self, b: &BBox) -> [f64; 4] {
        let (x1, y1) = self.apply_point(b.x1, b.y1);
        let (x2, y2) = self.apply_point(b.x2, b.y2);
        [x1, y1, x2, y2]
    }

    /// Predicted box: mapped corners re-ordered into a well-formed box.
    pub fn predict(&self, b: &BBox) -> BBox {
        let [x1, y1, x2, y2] = self.apply_corners(b);
        BBox {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    /// Least-squares affine fit taking `src` points to `dst` points.
    pub fn fit(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(Error::dim("point correspondences", src.len(), dst.len()));
        }
        if src.len() < 3 {
            return Err(Error::invalid(
                "motion fit",
                "need at least 3 correspondences",
            ));
        }
        let n = src.len();
        let mut a = DMatrix::<f64>::zeros(2 * n, 6);
        let mut rhs = DVector::<f64>::zeros(2 * n);
        for (k, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
            a.row_mut(2 * k)
                .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0]);
            a.row_mut(2 * k + 1)
                .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0]);
            rhs[2 * k] = u;
            rhs[2 * k + 1] = v;
        }
        let p = a
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::invalid("motion fit", e.to_string()))?;
        Self::new([[p[0], p[1], p[2]], [p[3], p[4], p[5]]])
    }
}

impl Default for MotionTransform {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Match threshold `t`, in cost units (pixels).
    pub threshold_t: f64,
    /// Pixels per unit of feature distance.
    pub alpha: f64,
    pub max_life: u32,
    pub min_track_len: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            threshold_t: 100.0,
            alpha: 50.0,
            max_life: 20,
            min_track_len: 5,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_t > 0.0) || !self.threshold_t.is_finite() {
            return Err(Error::invalid("tracker config", "threshold_t must be > 0"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid("tracker config", "alpha must be >= 0"));
        }
        if self.max_life < 1 || self.min_track_len < 1 {
            return Err(Error::invalid(
                "tracker config",
                "max_life and min_track_len must be >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub frame: u64,
    pub bbox: BBox,
    /// False when the box is a motion prediction rather than a detection.
    pub observed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub track_id: u64,
    pub last_box: BBox,
    pub last_feature: Vec<f64>,
    pub age: u32,
    pub life: u32,
    pub history: Vec<HistoryEntry>,
}

impl Trajectory {
    /// History with trailing predicted entries removed.
    pub fn trimmed_history(&self) -> &[HistoryEntry] {
        let end = self
            .history
            .iter()
            .rposition(|h| h.observed)
            .map_or(0, |k| k + 1);
        &self.history[..end]
    }
}

/// `||p_det - H(p_traj)||_2 + alpha * ||b_det - b_traj||_2`.
pub fn match_cost(
    traj: &Trajectory,
    det: &Detection,
    motion: &MotionTransform,
    alpha: f64,
) -> Result<f64> {
    if traj.last_feature.len() != det.feature.len() {
        return Err(Error::dim(
            "appearance feature",
            traj.last_feature.len(),
            det.feature.len(),
        ));
    }
    let p = motion.apply_corners(&traj.last_box);
    let q = det.bbox.corners();
    let geo = p
        .iter()
        .zip(q)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let app = traj
        .last_feature
        .iter()
        .zip(&det.feature)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(geo + alpha * app)
}

/// Optimal matching for the thresholded assignment problem. Every returned
/// pair has `costs[i][j] < threshold`. Among optimal matchings, the one
/// whose sorted pair list is lexicographically smallest is returned.
pub fn assign(costs: &[Vec<f64>], threshold: f64) -> Vec<(usize, usize)> {
    let n = costs.len();
    let m = costs.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let gain = |i: usize, j: usize| (costs[i][j] - threshold).min(0.0);
    let rows: Vec<usize> = (0..n).collect();
    let cols: Vec<usize> = (0..m).collect();
    let best = min_assignment_value(&rows, &cols, gain);
    let scale: f64 = 1.0
        + (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| gain(i, j).abs())
            .sum::<f64>();
    let eps = 1e-9 * scale;

    let mut out = Vec::new();
    let mut acc = 0.0;
    let mut free_cols = cols;
    for i in 0..n {
        let rest: Vec<usize> = (i + 1..n).collect();
        let mut fixed = None;
        for (pos, &j) in free_cols.iter().enumerate() {
            if !(costs[i][j] < threshold) {
                continue;
            }
            let mut remaining = free_cols.clone();
            remaining.remove(pos);
            let value = acc + gain(i, j) + min_assignment_value(&rest, &remaining, gain);
            if value <= best + eps {
                fixed = Some((pos, j));
                break;
            }
        }
        if let Some((pos, j)) = fixed {
            acc += gain(i, j);
            free_cols.remove(pos);
            out.push((i, j));
        }
    }
    out
}

/// Minimum total of `cost` over assignments of `rows` into distinct `cols`
/// where a row may stay unassigned at zero cost. `cost` must be <= 0.
fn min_assignment_value(rows: &[usize], cols: &[usize], cost: impl Fn(usize, usize) -> f64) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    // Pad columns with zero-cost "unassigned" slots so every row fits.
    let n = rows.len();
    let m = cols.len() + n;
    let c = |r: usize, k: usize| {
        if k < cols.len() {
            cost(rows[r], cols[k])
        } else {
            0.0
        }
    };
    hungarian(n, m, c)
}

/// Shortest augmenting path Hungarian method for an `n x m` (n <= m)
/// minimum-cost assignment; returns the optimal total cost.
fn hungarian(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> f64 {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| cost(p[j] - 1, j - 1))
        .sum()
}

/// Stateful tracker. Frames must be stepped consecutively.
#[derive(Debug, Clone)]
pub struct Tracker {
    config: TrackerConfig,
    active: Vec<Trajectory>,
    retired: Vec<Trajectory>,
    next_id: u64,
    last_frame: Option<u64>,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            active: Vec::new(),
            retired: Vec::new(),
            next_id: 0,
            last_frame: None,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn active(&self) -> &[Trajectory] {
        &self.active
    }

    pub fn last_frame(&self) -> Option<u64> {
        self.last_frame
    }

    /// Advances to `frame` with that frame's detections. `motion` maps
    /// pixel coordinates of the previous frame into this one; it is used
    /// both for matching costs and for coasting unmatched trajectories.
    pub fn step(
        &mut self,
        frame: u64,
        detections: &[Detection],
        motion: &MotionTransform,
    ) -> Result<()> {
        if let Some(last) = self.last_frame {
            if frame != last + 1 {
                return Err(Error::FrameOrder {
                    expected: last + 1,
                    got: frame,
                });
            }
        }
        if let Some(d) = detections.iter().find(|d| d.frame != frame) {
            return Err(Error::FrameOrder {
                expected: frame,
                got: d.frame,
            });
        }
        let costs = self
            .active
            .iter()
            .map(|t| {
                detections
                    .iter()
                    .map(|d| match_cost(t, d, motion, self.config.alpha))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let matches = assign(&costs, self.config.threshold_t);
        let mut det_of: HashMap<usize, usize> = matches.iter().copied().collect();
        let mut claimed = vec![false; detections.len()];
        for &(_, j) in &matches {
            claimed[j] = true;
        }

        let max_life = self.config.max_life;
        let mut keep = Vec::with_capacity(self.active.len());
        for (i, mut traj) in std::mem::take(&mut self.active).into_iter().enumerate() {
            if let Some(j) = det_of.remove(&i) {
                let det = &detections[j];
                traj.last_box = det.bbox;
                traj.last_feature = det.feature.clone();
                traj.age += 1;
                traj.life = max_life;
                traj.history.push(HistoryEntry {
                    frame,
                    bbox: det.bbox,
                    observed: true,
                });
                keep.push(traj);
            } else if traj.life > 0 {
                let predicted = motion.predict(&traj.last_box);
                traj.last_box = predicted;
                traj.age += 1;
                traj.life -= 1;
                traj.history.push(HistoryEntry {
                    frame,
                    bbox: predicted,
                    observed: false,
                });
                keep.push(traj);
            } else {
                self.retired.push(traj);
            }
        }
        for (_, det) in detections.iter().enumerate().filter(|(j, _)| !claimed[*j]) {
            keep.push(Trajectory {
                track_id: self.next_id,
                last_box: det.bbox,
                last_feature: det.feature.clone(),
                age: 1,
                life: max_life,
                history: vec![HistoryEntry {
                    frame,
                    bbox: det.bbox,
                    observed: true,
                }],
            });
            self.next_id += 1;
        }
        self.active = keep;
        self.last_frame = Some(frame);
        Ok(())
    }

    /// Every trajectory ever created, ordered by track id.
    pub fn into_trajectories(self) -> Vec<Trajectory> {
        let mut all = self.retired;
        all.extend(self.active);
        all.sort_by_key(|t| t.track_id);
        all
    }
}

/// One face detection used for labeling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceBox {
    pub bbox: BBox,
    pub face_id: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackFrame {
    pub frame: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub predicted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrack {
    pub track_id: u64,
    /// Majority face ID, `None` when no head box overlapped any face.
    pub face_id: Option<i64>,
    pub frames: Vec<TrackFrame>,
}

/// Face ID voted for by one head box: the face with maximum positive IoU,
/// lowest face ID on IoU ties.
pub fn best_face(head: &BBox, faces: &[FaceBox]) -> Option<i64> {
    let mut best: Option<(f64, i64)> = None;
    for f in faces {
        let v = iou(head, &f.bbox);
        if v <= 0.0 {
            continue;
        }
        best = match best {
            Some((bv, bid)) if bv > v || (bv == v && bid <= f.face_id) => Some((bv, bid)),
            _ => Some((v, f.face_id)),
        };
    }
    best.map(|(_, id)| id)
}

/// Drops short trajectories and labels the rest by majority vote.
///
/// Trailing predicted boxes (coasting after the last detection) are not
/// part of the output; interior predicted boxes are kept and flagged.
pub fn finalize(
    trajectories: &[Trajectory],
    face_boxes: &BTreeMap<u64, Vec<FaceBox>>,
    config: &TrackerConfig,
) -> Vec<LabeledTrack> {
    trajectories
        .iter()
        .filter_map(|t| {
            let history = t.trimmed_history();
            if history.len() < config.min_track_len {
                return None;
            }
            let mut votes: BTreeMap<i64, usize> = BTreeMap::new();
            for h in history.iter().filter(|h| h.observed) {
                let faces = face_boxes.get(&h.frame).map_or(&[][..], Vec::as_slice);
                if let Some(id) = best_face(&h.bbox, faces) {
                    *votes.entry(id).or_default() += 1;
                }
            }
            // ascending ids; a later id must strictly beat the count to win
            let face_id = votes
                .iter()
                .fold(None, |acc: Option<(i64, usize)>, (&id, &n)| match acc {
                    Some((_, bn)) if bn >= n => acc,
                    _ => Some((id, n)),
                })
                .map(|(id, _)| id);
            Some(LabeledTrack {
                track_id: t.track_id,
                face_id,
                frames: history
                    .iter()
                    .map(|h| TrackFrame {
                        frame: h.frame,
                        bbox: h.bbox.corners(),
                        predicted: !h.observed,
                    })
                    .collect(),
            })
        })
        .collect()
}

/// Runs the tracker over every frame from the first to the last detection
/// (frames without detections are stepped with an empty list).
pub fn track_all(
    detections: &[Detection],
    motions: &BTreeMap<u64, MotionTransform>,
    config: TrackerConfig,
) -> Result<Vec<Trajectory>> {
    let mut tracker = Tracker::new(config)?;
    let mut by_frame: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        by_frame.entry(d.frame).or_default().push(d.clone());
    }
    let (Some(&first), Some(&last)) = (by_frame.keys().next(), by_frame.keys().next_back()) else {
        return Ok(Vec::new());
    };
    let identity = MotionTransform::identity();
    for frame in first..=last {
        let dets = by_frame.get(&frame).map_or(&[][..], Vec::as_slice);
        tracker.step(frame, dets, motions.get(&frame).unwrap_or(&identity))?;
    }
    Ok(tracker.into_trajectories())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionLine {
    frame: u64,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    #[serde(default)]
    feature: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FaceLine {
    frame: u64,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    face_id: i64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MotionLine {
    frame: u64,
    #[serde(default)]
    affine: Option<[f64; 6]>,
    #[serde(default)]
    prev: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    curr: Option<Vec<(f64, f64)>>,
}

fn for_each_json_line<T: serde::de::DeserializeOwned>(
    reader: impl BufRead,
    name: &str,
    mut f: impl FnMut(T) -> Result<()>,
) -> Result<()> {
    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::Parse {
            path: name.to_string(),
            line: lineno,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let wrap = |reason: String| Error::Parse {
            path: name.to_string(),
            line: lineno,
            reason,
        };
        let value: T = serde_json::from_str(&line).map_err(|e| wrap(e.to_string()))?;
        f(value).map_err(|e| match e {
            Error::Parse { .. } => e,
            other => wrap(other.to_string()),
        })?;
    }
    Ok(())
}

/// Detection JSON lines: `{frame, x1, y1, x2, y2, feature: [...]}`.
pub fn read_detections(reader: impl BufRead, name: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for_each_json_line(reader, name, |l: DetectionLine| {
        out.push(Detection::new(
            l.frame,
            BBox::new(l.x1, l.y1, l.x2, l.y2)?,
            l.feature,
        )?);
        Ok(())
    })?;
    Ok(out)
}

/// Face JSON lines: `{frame, x1, y1, x2, y2, face_id}`.
pub fn read_face_boxes(reader: impl BufRead, name: &str) -> Result<BTreeMap<u64, Vec<FaceBox>>> {
    let mut out: BTreeMap<u64, Vec<FaceBox>> = BTreeMap::new();
    for_each_json_line(reader, name, |l: FaceLine| {
        out.entry(l.frame).or_default().push(FaceBox {
            bbox: BBox::new(l.x1, l.y1, l.x2, l.y2)?,
            face_id: l.face_id,
        });
        Ok(())
    })?;
    Ok(out)
}

/// Motion JSON lines, one per frame: either `{frame, affine: [a11, a12, b1,
/// a21, a22, b2]}` or `{frame, prev: [[x, y], ...], curr: [[x, y], ...]}`
/// point correspondences fitted by least squares.
pub fn read_motions(reader: impl BufRead, name: &str) -> Result<BTreeMap<u64, MotionTransform>> {
    let mut out = BTreeMap::new();
    for_each_json_line(reader, name, |l: MotionLine| {
        let t = match (l.affine, l.prev, l.curr) {
            (Some(a), None, None) => {
                MotionTransform::new([[a[0], a[1], a[2]], [a[3], a[4], a[5]]])?
            }
            (None, Some(p), Some(c)) => MotionTransform::fit(&p, &c)?,
            _ => {
                return Err(Error::invalid(
                    "motion line",
                    "give either `affine` or both `prev` and `curr`",
                ))
            }
        };
        out.insert(l.frame, t);
        Ok(())
    })?;
    Ok(out)
}
