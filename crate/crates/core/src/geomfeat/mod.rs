//! Per-frame geometric features: six landmarks per person, head yaw/pitch,
//! nose-to-nose distance, standardization and video-major reshaping.

mod pose;
mod scaler;

pub use pose::{
    estimate_head_pose, euler_from_rotation, project, rotation_from_euler, Camera, FaceModel,
    HeadPose, PoseSolution, PoseSolver,
};
pub use scaler::{fit_scaler, ScalerParams, SIGMA_FLOOR};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FEATURES_PER_FRAME, FRAMES_PER_VIDEO};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// A full 68-point annotation in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet(Vec<Point>);

impl LandmarkSet {
    pub const LEN: usize = 68;

    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != Self::LEN {
            return Err(Error::Validation(format!(
                "a landmark set has {} points, got {}",
                Self::LEN,
                points.len()
            )));
        }
        if let Some(k) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.y >= 0.0))
        {
            return Err(Error::Validation(format!(
                "landmark {} is not a finite non-negative pixel position",
                k + 1
            )));
        }
        Ok(LandmarkSet(points))
    }

    /// 1-based access, matching the usual 68-point chart.
    pub fn point(&self, one_based: usize) -> Point {
        self.0[one_based - 1]
    }

    pub fn points(&self) -> &[Point] {
        &self.0
    }
}

/// 1-based indices of nose tip, chin, left-eye-left corner, right-eye-right
/// corner, left and right mouth corners in the 68-point chart.
pub const SELECTED_LANDMARKS: [usize; 6] = [34, 9, 37, 46, 49, 55];

/// Six landmarks in fixed role order: nose tip, chin, left-eye-left corner,
/// right-eye-right corner, left mouth corner, right mouth corner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SixPoints(pub [Point; 6]);

impl SixPoints {
    pub fn nose_tip(&self) -> Point {
        self.0[0]
    }

    pub fn coords(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for (i, p) in self.0.iter().enumerate() {
            out[2 * i] = p.x;
            out[2 * i + 1] = p.y;
        }
        out
    }
}

pub fn select_landmarks(all: &LandmarkSet) -> SixPoints {
    SixPoints(SELECTED_LANDMARKS.map(|k| all.point(k)))
}

/// Head orientation in degrees; roll is dropped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseAngles {
    pub yaw: f64,
    pub pitch: f64,
}

/// Euclidean nose-to-nose distance in pixels.
pub fn relative_distance(victim_nose: Point, stalker_nose: Point) -> f64 {
    (victim_nose.x - stalker_nose.x).hypot(victim_nose.y - stalker_nose.y)
}

/// 29 values: victim landmarks (12), stalker landmarks (12), victim yaw,
/// victim pitch, stalker yaw, stalker pitch, distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatureVector(#[serde(with = "serde_arrays")] pub [f64; FEATURES_PER_FRAME]);

mod serde_arrays {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::model::FEATURES_PER_FRAME;

    pub fn serialize<S: Serializer>(v: &[f64; FEATURES_PER_FRAME], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; FEATURES_PER_FRAME], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<f64>| serde::de::Error::invalid_length(v.len(), &"29 values"))
    }
}

impl FrameFeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn assemble_features(
    victim: &SixPoints,
    stalker: &SixPoints,
    victim_pose: PoseAngles,
    stalker_pose: PoseAngles,
    distance: f64,
) -> FrameFeatureVector {
    let mut v = [0.0; FEATURES_PER_FRAME];
    v[..12].copy_from_slice(&victim.coords());
    v[12..24].copy_from_slice(&stalker.coords());
    v[24] = victim_pose.yaw;
    v[25] = victim_pose.pitch;
    v[26] = stalker_pose.yaw;
    v[27] = stalker_pose.pitch;
    v[28] = distance;
    FrameFeatureVector(v)
}

/// Both people of one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePersons {
    pub victim: SixPoints,
    pub stalker: SixPoints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedFrame {
    pub frame: usize,
    pub role: String,
    pub reason: String,
    /// Whether earlier angles of the same person were reused (otherwise zeros).
    pub reused_previous: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub rows: Vec<FrameFeatureVector>,
    pub flagged: Vec<FlaggedFrame>,
}

/// Features for consecutive frames of one video. When a pose solve fails the
/// person's last good angles in this video are reused, or zeros if none exist,
/// and the frame is flagged.
pub fn extract_video_features(frames: &[FramePersons], width: f64, height: f64, solver: &PoseSolver) -> VideoFeatures {
    let mut last: [Option<PoseAngles>; 2] = [None, None];
    let mut rows = Vec::with_capacity(frames.len());
    let mut flagged = Vec::new();
    for (i, fp) in frames.iter().enumerate() {
        let mut angles = [PoseAngles::default(); 2];
        for (slot, (role, pts)) in [("victim", &fp.victim), ("stalker", &fp.stalker)].iter().enumerate() {
            match solver.solve(pts, width, height) {
                Ok(sol) => {
                    let a = sol.angles();
                    last[slot] = Some(a);
                    angles[slot] = a;
                }
                Err(e) => {
                    angles[slot] = last[slot].unwrap_or_default();
                    flagged.push(FlaggedFrame {
                        frame: i,
                        role: role.to_string(),
                        reason: e.to_string(),
                        reused_previous: last[slot].is_some(),
                    });
                }
            }
        }
        let d = relative_distance(fp.victim.nose_tip(), fp.stalker.nose_tip());
        rows.push(assemble_features(&fp.victim, &fp.stalker, angles[0], angles[1], d));
    }
    VideoFeatures { rows, flagged }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRow {
    pub video_id: String,
    pub frame_name: String,
    pub features: FrameFeatureVector,
}

/// Frame rows grouped into a `V×5×29` array.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoMajor {
    pub video_ids: Vec<String>,
    pub data: Tensor,
}

impl VideoMajor {
    pub fn video(&self, index: usize) -> Tensor {
        crate::tensor::ops::select(&self.data, index).expect("video index")
    }
}

/// Groups rows by video id (sorted), orders frames by name within each video,
/// and requires exactly five frames per video.
pub fn dimension_transform(rows: Vec<FrameRow>) -> Result<VideoMajor> {
    let mut groups: BTreeMap<String, Vec<(String, FrameFeatureVector)>> = BTreeMap::new();
    for r in rows {
        groups
            .entry(r.video_id)
            .or_default()
            .push((r.frame_name, r.features));
    }
    if groups.is_empty() {
        return Err(Error::Cardinality("no frame rows".into()));
    }
    let mut ids = Vec::with_capacity(groups.len());
    let mut data = Vec::with_capacity(groups.len() * FRAMES_PER_VIDEO * FEATURES_PER_FRAME);
    for (id, mut frames) in groups {
        if frames.len() != FRAMES_PER_VIDEO {
            return Err(Error::Cardinality(format!(
                "video {id} has {} frames, expected {FRAMES_PER_VIDEO}",
                frames.len()
            )));
        }
        frames.sort_by(|a, b| a.0.cmp(&b.0));
        for (_, f) in frames {
            data.extend_from_slice(&f.0);
        }
        ids.push(id);
    }
    let v = ids.len();
    Ok(VideoMajor {
        video_ids: ids,
        data: Tensor::new(&[v, FRAMES_PER_VIDEO, FEATURES_PER_FRAME], data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diagonal_set() -> LandmarkSet {
        LandmarkSet::new((1..=68).map(|k| Point::new(k as f64, k as f64)).collect()).unwrap()
    }

    #[test]
    fn selection_by_index() {
        let six = select_landmarks(&diagonal_set());
        let want = [34.0, 9.0, 37.0, 46.0, 49.0, 55.0];
        for (p, w) in six.0.iter().zip(want) {
            assert_eq!(*p, Point::new(w, w));
        }
        let mut pts = vec![Point::new(1.0, 1.0); 68];
        pts[33] = Point::new(100.0, 120.0);
        let six = select_landmarks(&LandmarkSet::new(pts).unwrap());
        assert_eq!(six.nose_tip(), Point::new(100.0, 120.0));
        let same = select_landmarks(&LandmarkSet::new(vec![Point::new(3.0, 4.0); 68]).unwrap());
        assert!(same.0.iter().all(|p| *p == Point::new(3.0, 4.0)));
    }

    #[test]
    fn landmark_set_validation() {
        assert!(LandmarkSet::new(vec![Point::default(); 67]).is_err());
        let mut pts = vec![Point::default(); 68];
        pts[5].x = -1.0;
        assert!(LandmarkSet::new(pts).is_err());
    }

    #[test]
    fn distance_cases() {
        assert_eq!(relative_distance(Point::new(0.0, 0.0), Point::new(3.0, 4.0)), 5.0);
        assert_eq!(relative_distance(Point::new(2.0, 2.0), Point::new(2.0, 2.0)), 0.0);
        assert_eq!(relative_distance(Point::new(10.0, 10.0), Point::new(13.0, 14.0)), 5.0);
    }

    #[test]
    fn feature_layout() {
        let zero = SixPoints::default();
        let v = assemble_features(&zero, &zero, PoseAngles::default(), PoseAngles::default(), 0.0);
        assert_eq!(v.0, [0.0; 29]);
        let mut victim = SixPoints::default();
        victim.0[0] = Point::new(1.0, 2.0);
        let stalker = SixPoints([Point::new(7.0, 8.0); 6]);
        let v = assemble_features(
            &victim,
            &stalker,
            PoseAngles { yaw: 10.0, pitch: -5.0 },
            PoseAngles { yaw: 30.0, pitch: 2.0 },
            42.0,
        );
        assert_eq!(&v.0[..2], &[1.0, 2.0]);
        assert_eq!(&v.0[12..14], &[7.0, 8.0]);
        assert_eq!(&v.0[24..], &[10.0, -5.0, 30.0, 2.0, 42.0]);
        assert_eq!(12 + 12 + 4 + 1, FEATURES_PER_FRAME);
    }

    fn row(video: &str, frame: &str, tag: f64) -> FrameRow {
        FrameRow {
            video_id: video.into(),
            frame_name: frame.into(),
            features: FrameFeatureVector([tag; 29]),
        }
    }

    #[test]
    fn frames_sorted_by_name() {
        let rows = ["f3", "f1", "f5", "f2", "f4"]
            .iter()
            .map(|n| row("v", n, n[1..].parse().unwrap()))
            .collect();
        let vm = dimension_transform(rows).unwrap();
        assert_eq!(vm.data.shape(), &[1, 5, 29]);
        let firsts: Vec<f64> = (0..5).map(|f| vm.data.at(&[0, f, 0])).collect();
        assert_eq!(firsts, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn full_scale_reshape_and_cardinality() {
        let mut rows = Vec::new();
        for v in 0..238 {
            for f in 0..5 {
                rows.push(row(&format!("video{v:03}"), &format!("frame{f}"), v as f64));
            }
        }
        assert_eq!(rows.len(), 1190);
        let vm = dimension_transform(rows).unwrap();
        assert_eq!(vm.data.shape(), &[238, 5, 29]);

        let rows: Vec<FrameRow> = (0..4).map(|f| row("short", &format!("f{f}"), 0.0)).collect();
        let err = dimension_transform(rows).unwrap_err();
        assert!(matches!(err, Error::Cardinality(_)));
        assert!(err.to_string().contains("short"));
    }
}
