//! The 16-keypoint body model shared by the codec, generator and metrics.

use crate::error::{Error, Result};

pub const NUM_KEYPOINTS: usize = 16;

/// Canonical keypoints, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Keypoint {
    Head,
    Neck,
    Pelvis,
    Thorax,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
}

impl Keypoint {
    pub const ALL: [Keypoint; NUM_KEYPOINTS] = [
        Keypoint::Head,
        Keypoint::Neck,
        Keypoint::Pelvis,
        Keypoint::Thorax,
        Keypoint::LeftShoulder,
        Keypoint::RightShoulder,
        Keypoint::LeftElbow,
        Keypoint::RightElbow,
        Keypoint::LeftWrist,
        Keypoint::RightWrist,
        Keypoint::LeftHip,
        Keypoint::RightHip,
        Keypoint::LeftKnee,
        Keypoint::RightKnee,
        Keypoint::LeftAnkle,
        Keypoint::RightAnkle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Keypoint> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Keypoint::Head => "head",
            Keypoint::Neck => "neck",
            Keypoint::Pelvis => "pelvis",
            Keypoint::Thorax => "thorax",
            Keypoint::LeftShoulder => "l_shoulder",
            Keypoint::RightShoulder => "r_shoulder",
            Keypoint::LeftElbow => "l_elbow",
            Keypoint::RightElbow => "r_elbow",
            Keypoint::LeftWrist => "l_wrist",
            Keypoint::RightWrist => "r_wrist",
            Keypoint::LeftHip => "l_hip",
            Keypoint::RightHip => "r_hip",
            Keypoint::LeftKnee => "l_knee",
            Keypoint::RightKnee => "r_knee",
            Keypoint::LeftAnkle => "l_ankle",
            Keypoint::RightAnkle => "r_ankle",
        }
    }

    pub fn from_name(name: &str) -> Option<Keypoint> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    /// Skeleton neighbours of this keypoint.
    pub fn neighbors(self) -> impl Iterator<Item = Keypoint> {
        SKELETON.iter().filter_map(move |&(a, b)| {
            if a == self {
                Some(b)
            } else if b == self {
                Some(a)
            } else {
                None
            }
        })
    }
}

/// The 15 bones of the kinematic tree.
pub const SKELETON: [(Keypoint, Keypoint); 15] = [
    (Keypoint::Head, Keypoint::Neck),
    (Keypoint::Neck, Keypoint::Thorax),
    (Keypoint::Thorax, Keypoint::Pelvis),
    (Keypoint::Thorax, Keypoint::LeftShoulder),
    (Keypoint::Thorax, Keypoint::RightShoulder),
    (Keypoint::LeftShoulder, Keypoint::LeftElbow),
    (Keypoint::LeftElbow, Keypoint::LeftWrist),
    (Keypoint::RightShoulder, Keypoint::RightElbow),
    (Keypoint::RightElbow, Keypoint::RightWrist),
    (Keypoint::Pelvis, Keypoint::LeftHip),
    (Keypoint::Pelvis, Keypoint::RightHip),
    (Keypoint::LeftHip, Keypoint::LeftKnee),
    (Keypoint::LeftKnee, Keypoint::LeftAnkle),
    (Keypoint::RightHip, Keypoint::RightKnee),
    (Keypoint::RightKnee, Keypoint::RightAnkle),
];

/// Column groups of the per-part report table. Left and right sides share a column.
pub const PART_GROUPS: [(&str, &[Keypoint]); 7] = [
    ("Head", &[Keypoint::Head, Keypoint::Neck]),
    ("Shoulder", &[Keypoint::LeftShoulder, Keypoint::RightShoulder]),
    ("Elbow", &[Keypoint::LeftElbow, Keypoint::RightElbow]),
    ("Wrist", &[Keypoint::LeftWrist, Keypoint::RightWrist]),
    ("Hip", &[Keypoint::LeftHip, Keypoint::RightHip]),
    ("Knee", &[Keypoint::LeftKnee, Keypoint::RightKnee]),
    ("Ankle", &[Keypoint::LeftAnkle, Keypoint::RightAnkle]),
];

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Positions of all 16 keypoints in pixels plus per-point flags.
///
/// `visible` means annotated and inside the image; `occluded` marks annotated
/// points hidden behind an occluder.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub points: [Point; NUM_KEYPOINTS],
    pub visible: [bool; NUM_KEYPOINTS],
    pub occluded: [bool; NUM_KEYPOINTS],
}

impl Default for KeypointSet {
    fn default() -> Self {
        Self {
            points: [Point::default(); NUM_KEYPOINTS],
            visible: [false; NUM_KEYPOINTS],
            occluded: [false; NUM_KEYPOINTS],
        }
    }
}

impl KeypointSet {
    /// All points visible, none occluded.
    pub fn from_points(points: [Point; NUM_KEYPOINTS]) -> Self {
        Self {
            points,
            visible: [true; NUM_KEYPOINTS],
            occluded: [false; NUM_KEYPOINTS],
        }
    }

    pub fn point(&self, k: Keypoint) -> Point {
        self.points[k.index()]
    }

    pub fn is_visible(&self, k: Keypoint) -> bool {
        self.visible[k.index()]
    }

    pub fn is_occluded(&self, k: Keypoint) -> bool {
        self.occluded[k.index()]
    }

    /// Checks that every visible point lies inside a `width x height` image.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for k in Keypoint::ALL {
            let p = self.point(k);
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::invalid(format!("keypoint {} is not finite", k.name())));
            }
            if self.is_visible(k) && !(0.0..=(width as f64 - 1.0)).contains(&p.x)
                || self.is_visible(k) && !(0.0..=(height as f64 - 1.0)).contains(&p.y)
            {
                return Err(Error::invalid(format!(
                    "visible keypoint {} at ({}, {}) outside {width}x{height} image",
                    k.name(),
                    p.x,
                    p.y
                )));
            }
        }
        Ok(())
    }

    /// Keypoints flagged occluded whose skeleton neighbours are all visible
    /// and unoccluded.
    pub fn recoverable_occluded(&self) -> impl Iterator<Item = Keypoint> + '_ {
        Keypoint::ALL.into_iter().filter(move |&k| {
            self.is_visible(k)
                && self.is_occluded(k)
                && k.neighbors().all(|n| self.is_visible(n) && !self.is_occluded(n))
        })
    }
}
