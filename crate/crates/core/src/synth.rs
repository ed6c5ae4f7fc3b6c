//! Procedural articulated stick figures with exact keypoint groundtruth.
//!
//! Each figure is a 2-D kinematic tree rooted at the pelvis, facing the
//! viewer: the figure's left side is drawn on the image's right. Joint angles
//! are sampled parent-first, limbs are drawn as anti-aliased thick segments
//! with a disc at every joint, and an optional rectangular occluder is pasted
//! over a chosen keypoint. Unannotated low-contrast distractor figures may be
//! drawn behind the subject.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::{Keypoint, KeypointSet, Point, NUM_KEYPOINTS, SKELETON};
use crate::pck::{Annotated, PoseLabel};
use crate::render::{Canvas, Rgb};
use crate::tensor::Tensor;

pub type Range = (f64, f64);

/// Generator parameters. Lengths are in pixels and angles in radians.
#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    pub image_size: usize,
    pub torso: Range,
    pub neck: Range,
    pub head: Range,
    pub shoulder_half_width: Range,
    pub hip_half_width: Range,
    pub upper_arm: Range,
    pub forearm: Range,
    pub thigh: Range,
    pub shin: Range,
    /// Whole-body lean around the pelvis.
    pub lean: Range,
    pub head_tilt: Range,
    /// Upper arm angle away from hanging straight down, outward positive.
    pub upper_arm_angle: Range,
    /// Forearm angle relative to the upper arm, outward positive.
    pub elbow_bend: Range,
    pub thigh_angle: Range,
    pub knee_bend: Range,
    pub limb_thickness: Range,
    pub joint_radius: f64,
    pub occluder_prob: f64,
    /// Side length range of occluder rectangles.
    pub occluder_size: Range,
    /// Keypoints an occluder may be centred on.
    pub occluder_targets: Vec<Keypoint>,
    pub distractor_prob: f64,
    /// Contrast of distractor figures relative to the subject.
    pub distractor_contrast: f64,
    pub noise_amplitude: f64,
    /// Colour left and right limbs differently.
    pub color_sides: bool,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            image_size: 64,
            torso: (19.0, 22.0),
            neck: (3.0, 4.0),
            head: (6.0, 8.0),
            shoulder_half_width: (5.0, 7.0),
            hip_half_width: (3.0, 4.5),
            upper_arm: (7.5, 9.5),
            forearm: (6.5, 8.5),
            thigh: (8.5, 10.5),
            shin: (8.0, 10.0),
            lean: (-0.25, 0.25),
            head_tilt: (-0.3, 0.3),
            upper_arm_angle: (-0.3, 2.6),
            elbow_bend: (-1.6, 1.6),
            thigh_angle: (-0.1, 0.8),
            knee_bend: (-0.6, 0.9),
            limb_thickness: (1.6, 2.4),
            joint_radius: 1.6,
            occluder_prob: 0.3,
            occluder_size: (5.0, 9.0),
            occluder_targets: Keypoint::ALL.to_vec(),
            distractor_prob: 0.3,
            distractor_contrast: 0.35,
            noise_amplitude: 0.15,
            color_sides: false,
            seed: 0,
        }
    }
}

/// Axis-aligned pixel rectangle `[x, x + w) x [y, y + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    /// Whether the pixel nearest to `p` lies inside the rectangle.
    pub fn covers(&self, p: Point) -> bool {
        let (px, py) = ((p.x + 0.5).floor(), (p.y + 0.5).floor());
        px >= self.x as f64 && px < (self.x + self.w) as f64 && py >= self.y as f64 && py < (self.y + self.h) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    pub id: String,
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: PoseLabel,
    pub occluders: Vec<Rect>,
}

impl Annotated for PoseSample {
    fn label(&self) -> &PoseLabel {
        &self.label
    }
}

impl PoseSample {
    pub fn keypoints(&self) -> &KeypointSet {
        &self.label.keypoints
    }
}

fn check_range(name: &str, r: Range) -> Result<()> {
    if !(r.0 <= r.1) || !r.0.is_finite() || !r.1.is_finite() {
        return Err(Error::config(format!("range {name} = {r:?} is empty")));
    }
    Ok(())
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("torso", self.torso),
            ("neck", self.neck),
            ("head", self.head),
            ("shoulder_half_width", self.shoulder_half_width),
            ("hip_half_width", self.hip_half_width),
            ("upper_arm", self.upper_arm),
            ("forearm", self.forearm),
            ("thigh", self.thigh),
            ("shin", self.shin),
            ("lean", self.lean),
            ("head_tilt", self.head_tilt),
            ("upper_arm_angle", self.upper_arm_angle),
            ("elbow_bend", self.elbow_bend),
            ("thigh_angle", self.thigh_angle),
            ("knee_bend", self.knee_bend),
            ("limb_thickness", self.limb_thickness),
            ("occluder_size", self.occluder_size),
        ] {
            check_range(name, r)?;
        }
        for (name, p) in [
            ("occluder_prob", self.occluder_prob),
            ("distractor_prob", self.distractor_prob),
            ("distractor_contrast", self.distractor_contrast),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if self.occluder_prob > 0.0 && self.occluder_targets.is_empty() {
            return Err(Error::config("occluder_targets is empty"));
        }
        if self.torso.0 <= 0.0 || self.head.0 <= 0.0 {
            return Err(Error::config("torso and head lengths must be positive"));
        }
        let min_height = self.torso.0 + self.neck.0 + self.head.0 + 2.0 * self.margin();
        if min_height > self.image_size as f64 {
            return Err(Error::config(format!(
                "image size {} is too small for the limb lengths (needs at least {min_height:.1} px)",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Variant that puts exactly one occluder over an elbow or a knee of every
    /// figure; used to build occlusion test slices.
    pub fn occlusion_slice(&self) -> GenParams {
        use Keypoint::*;
        GenParams {
            occluder_prob: 1.0,
            occluder_targets: vec![LeftElbow, RightElbow, LeftKnee, RightKnee],
            ..self.clone()
        }
    }

    fn margin(&self) -> f64 {
        self.limb_thickness.1 / 2.0 + self.joint_radius + 0.5
    }

    /// Applies one `key=value` override. Ranges are written `lo:hi`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::config(format!("invalid value {value:?} for {key}"));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let range = |v: &str| -> Result<Range> {
            let (a, b) = v.split_once(':').ok_or_else(bad)?;
            Ok((num(a)?, num(b)?))
        };
        match key {
            "image_size" => self.image_size = value.trim().parse().map_err(|_| bad())?,
            "torso" => self.torso = range(value)?,
            "neck" => self.neck = range(value)?,
            "head" => self.head = range(value)?,
            "shoulder_half_width" => self.shoulder_half_width = range(value)?,
            "hip_half_width" => self.hip_half_width = range(value)?,
            "upper_arm" => self.upper_arm = range(value)?,
            "forearm" => self.forearm = range(value)?,
            "thigh" => self.thigh = range(value)?,
            "shin" => self.shin = range(value)?,
            "lean" => self.lean = range(value)?,
            "head_tilt" => self.head_tilt = range(value)?,
            "upper_arm_angle" => self.upper_arm_angle = range(value)?,
            "elbow_bend" => self.elbow_bend = range(value)?,
            "thigh_angle" => self.thigh_angle = range(value)?,
            "knee_bend" => self.knee_bend = range(value)?,
            "limb_thickness" => self.limb_thickness = range(value)?,
            "joint_radius" => self.joint_radius = num(value)?,
            "occluder_prob" => self.occluder_prob = num(value)?,
            "occluder_size" => self.occluder_size = range(value)?,
            "occluder_targets" => {
                self.occluder_targets = value
                    .split(',')
                    .map(|n| Keypoint::from_name(n.trim()).ok_or_else(bad))
                    .collect::<Result<_>>()?
            }
            "distractor_prob" => self.distractor_prob = num(value)?,
            "distractor_contrast" => self.distractor_contrast = num(value)?,
            "noise_amplitude" => self.noise_amplitude = num(value)?,
            "color_sides" => self.color_sides = value.trim().parse().map_err(|_| bad())?,
            "seed" => self.seed = value.trim().parse().map_err(|_| bad())?,
            _ => return Err(Error::config(format!("unknown data key {key:?}"))),
        }
        Ok(())
    }

    /// `key=value` lines covering every field.
    pub fn to_kv(&self) -> String {
        let r = |v: Range| format!("{}:{}", v.0, v.1);
        let targets: Vec<&str> = self.occluder_targets.iter().map(|k| k.name()).collect();
        [
            format!("image_size={}", self.image_size),
            format!("torso={}", r(self.torso)),
            format!("neck={}", r(self.neck)),
            format!("head={}", r(self.head)),
            format!("shoulder_half_width={}", r(self.shoulder_half_width)),
            format!("hip_half_width={}", r(self.hip_half_width)),
            format!("upper_arm={}", r(self.upper_arm)),
            format!("forearm={}", r(self.forearm)),
            format!("thigh={}", r(self.thigh)),
            format!("shin={}", r(self.shin)),
            format!("lean={}", r(self.lean)),
            format!("head_tilt={}", r(self.head_tilt)),
            format!("upper_arm_angle={}", r(self.upper_arm_angle)),
            format!("elbow_bend={}", r(self.elbow_bend)),
            format!("thigh_angle={}", r(self.thigh_angle)),
            format!("knee_bend={}", r(self.knee_bend)),
            format!("limb_thickness={}", r(self.limb_thickness)),
            format!("joint_radius={}", self.joint_radius),
            format!("occluder_prob={}", self.occluder_prob),
            format!("occluder_size={}", r(self.occluder_size)),
            format!("occluder_targets={}", targets.join(",")),
            format!("distractor_prob={}", self.distractor_prob),
            format!("distractor_contrast={}", self.distractor_contrast),
            format!("noise_amplitude={}", self.noise_amplitude),
            format!("color_sides={}", self.color_sides),
            format!("seed={}", self.seed),
        ]
        .join("\n")
            + "\n"
    }
}

fn sample(rng: &mut impl Rng, r: Range) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.gen_range(r.0..=r.1)
    }
}

fn rotate(v: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    Point::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

fn offset(p: Point, dir: Point, len: f64) -> Point {
    Point::new(p.x + dir.x * len, p.y + dir.y * len)
}

/// Unit limb direction `angle` radians away from straight down, toward `side`.
fn limb_dir(side: f64, angle: f64, lean: f64) -> Point {
    rotate(Point::new(side * angle.sin(), angle.cos()), lean)
}

/// A posed figure with the pelvis at the origin.
fn pose_figure(rng: &mut impl Rng, p: &GenParams, scale: f64) -> [Point; NUM_KEYPOINTS] {
    use Keypoint::*;
    let mut pts = [Point::default(); NUM_KEYPOINTS];
    let lean = sample(rng, p.lean);
    let up = rotate(Point::new(0.0, -1.0), lean);
    let across = rotate(Point::new(1.0, 0.0), lean);

    let pelvis = Point::new(0.0, 0.0);
    let thorax = offset(pelvis, up, scale * sample(rng, p.torso));
    let neck = offset(thorax, up, scale * sample(rng, p.neck));
    let head = offset(neck, rotate(up, sample(rng, p.head_tilt)), scale * sample(rng, p.head));
    pts[Pelvis.index()] = pelvis;
    pts[Thorax.index()] = thorax;
    pts[Neck.index()] = neck;
    pts[Head.index()] = head;

    // Left limbs sit on +x (the viewer's right).
    for (side, sh, el, wr, hip, kn, an) in [
        (1.0, LeftShoulder, LeftElbow, LeftWrist, LeftHip, LeftKnee, LeftAnkle),
        (-1.0, RightShoulder, RightElbow, RightWrist, RightHip, RightKnee, RightAnkle),
    ] {
        let shoulder = offset(thorax, across, side * scale * sample(rng, p.shoulder_half_width));
        let a1 = sample(rng, p.upper_arm_angle);
        let elbow = offset(shoulder, limb_dir(side, a1, lean), scale * sample(rng, p.upper_arm));
        let a2 = a1 + sample(rng, p.elbow_bend);
        let wrist = offset(elbow, limb_dir(side, a2, lean), scale * sample(rng, p.forearm));

        let hip_pt = offset(pelvis, across, side * scale * sample(rng, p.hip_half_width));
        let t1 = sample(rng, p.thigh_angle);
        let knee = offset(hip_pt, limb_dir(side, t1, lean), scale * sample(rng, p.thigh));
        let t2 = t1 + sample(rng, p.knee_bend);
        let ankle = offset(knee, limb_dir(side, t2, lean), scale * sample(rng, p.shin));

        pts[sh.index()] = shoulder;
        pts[el.index()] = elbow;
        pts[wr.index()] = wrist;
        pts[hip.index()] = hip_pt;
        pts[kn.index()] = knee;
        pts[an.index()] = ankle;
    }
    pts
}

fn bbox(pts: &[Point]) -> (f64, f64, f64, f64) {
    pts.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(x0, y0, x1, y1), p| (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y)),
    )
}

fn random_color(rng: &mut impl Rng, lo: f32, hi: f32) -> Rgb {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn draw_figure(canvas: &mut Canvas, pts: &[Point; NUM_KEYPOINTS], thickness: f64, joint_radius: f64, colors: [Rgb; 3]) {
    let [center, left, right] = colors;
    let color_of = |k: Keypoint| {
        if k.name().starts_with("l_") {
            left
        } else if k.name().starts_with("r_") {
            right
        } else {
            center
        }
    };
    let head = pts[Keypoint::Head.index()];
    let neck = pts[Keypoint::Neck.index()];
    let mid = Point::new((head.x + neck.x) / 2.0, (head.y + neck.y) / 2.0);
    canvas.disc(mid, head.dist(neck) / 2.0, center);
    for (a, b) in SKELETON {
        if (a, b) == (Keypoint::Head, Keypoint::Neck) {
            continue;
        }
        canvas.segment(pts[a.index()], pts[b.index()], thickness, color_of(b));
    }
    let bright = |c: Rgb| c.map(|v| v + 0.5 * (1.0 - v));
    for k in Keypoint::ALL {
        if k != Keypoint::Head {
            canvas.disc(pts[k.index()], joint_radius, bright(color_of(k)));
        }
    }
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 over (seed, index)
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const MAX_POSE_TRIES: usize = 200;

/// Generates one sample; `index` selects an independent random stream.
pub fn generate_one(params: &GenParams, index: usize) -> Result<PoseSample> {
    params.validate()?;
    let size = params.image_size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, index as u64));
    let margin = params.margin();

    let mut placed = None;
    for _ in 0..MAX_POSE_TRIES {
        let pts = pose_figure(&mut rng, params, 1.0);
        let (x0, y0, x1, y1) = bbox(&pts);
        // The head disc extends at most half a head length past the head keypoint.
        let (w, h) = (x1 - x0, y1 - y0);
        if w + 2.0 * margin > size - 1.0 || h + 2.0 * margin > size - 1.0 {
            continue;
        }
        let tx = rng.gen_range(margin - x0..=size - 1.0 - margin - x1);
        let ty = rng.gen_range(margin - y0..=size - 1.0 - margin - y1);
        placed = Some(pts.map(|p| Point::new(p.x + tx, p.y + ty)));
        break;
    }
    let pts = placed.ok_or_else(|| {
        Error::config(format!(
            "could not fit a figure into a {0}x{0} image; limb lengths are too large",
            params.image_size
        ))
    })?;

    // Background: a flat random tone with uniform noise.
    let n = params.image_size;
    let base = random_color(&mut rng, 0.0, 0.35);
    let mut canvas = Canvas::new(n, n, base);
    let amp = params.noise_amplitude as f32;
    for v in canvas.data.iter_mut() {
        *v = (*v + rng.gen_range(-amp..=amp)).clamp(0.0, 1.0);
    }

    if rng.gen_bool(params.distractor_prob) {
        let scale = rng.gen_range(0.7..1.0);
        let other = pose_figure(&mut rng, params, scale);
        let (x0, y0, x1, y1) = bbox(&other);
        let tx = rng.gen_range(-x0 - 0.3 * (x1 - x0)..size - x1 + 0.3 * (x1 - x0));
        let ty = rng.gen_range(-y0 - 0.2 * (y1 - y0)..size - y1 + 0.2 * (y1 - y0));
        let other = other.map(|p| Point::new(p.x + tx, p.y + ty));
        let c = params.distractor_contrast as f32;
        let fig = random_color(&mut rng, 0.6, 1.0);
        let dim = |col: Rgb| [0, 1, 2].map(|i| base[i] + c * (col[i] - base[i]));
        let thickness = sample(&mut rng, params.limb_thickness);
        draw_figure(&mut canvas, &other, thickness, params.joint_radius, [dim(fig); 3]);
    }

    let fig = random_color(&mut rng, 0.6, 1.0);
    let colors = if params.color_sides {
        [fig, [0.2, 0.9, 0.2], [0.9, 0.2, 0.2]]
    } else {
        [fig; 3]
    };
    let thickness = sample(&mut rng, params.limb_thickness);
    draw_figure(&mut canvas, &pts, thickness, params.joint_radius, colors);

    let mut occluders = Vec::new();
    if params.occluder_prob > 0.0 && rng.gen_bool(params.occluder_prob) {
        let target = *params.occluder_targets.choose(&mut rng).expect("validated non-empty");
        let c = pts[target.index()];
        let w = (sample(&mut rng, params.occluder_size).round() as usize).clamp(1, n);
        let h = (sample(&mut rng, params.occluder_size).round() as usize).clamp(1, n);
        let jx = rng.gen_range(-0.25..=0.25) * w as f64;
        let jy = rng.gen_range(-0.25..=0.25) * h as f64;
        let x = ((c.x + jx - w as f64 / 2.0).round().max(0.0) as usize).min(n - w);
        let y = ((c.y + jy - h as f64 / 2.0).round().max(0.0) as usize).min(n - h);
        let color = random_color(&mut rng, 0.0, 1.0);
        let tex: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-amp..=amp)).collect();
        canvas.fill_rect(x, y, w, h, |xx, yy| {
            let t = tex[(yy - y) * w + (xx - x)];
            color.map(|v| (v + t).clamp(0.0, 1.0))
        });
        occluders.push(Rect { x, y, w, h });
    }

    let mut keypoints = KeypointSet::from_points(pts);
    for k in Keypoint::ALL {
        keypoints.occluded[k.index()] = occluders.iter().any(|r| r.covers(keypoints.point(k)));
    }
    let head_size = keypoints.point(Keypoint::Head).dist(keypoints.point(Keypoint::Neck));
    let torso_size = keypoints.point(Keypoint::Thorax).dist(keypoints.point(Keypoint::Pelvis));
    Ok(PoseSample {
        id: format!("s{:06}", index),
        image: canvas.into_tensor(),
        label: PoseLabel {
            keypoints,
            head_size,
            torso_size,
        },
        occluders,
    })
}

/// Generates `count` samples with ids `s000000..`.
pub fn generate(params: &GenParams, count: usize) -> Result<Vec<PoseSample>> {
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    params.validate()?;
    (0..count).map(|i| generate_one(params, i)).collect()
}

/// Seeded shuffle split into `(train, test)`.
pub fn split<S: Clone>(samples: &[S], train_fraction: f64, seed: u64) -> Result<(Vec<S>, Vec<S>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (samples.len() as f64 * train_fraction).round() as usize;
    let train = idx[..n_train].iter().map(|&i| samples[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| samples[i].clone()).collect();
    Ok((train, test))
}

#[derive(Serialize, Deserialize)]
struct KeypointRecord {
    name: String,
    x: f64,
    y: f64,
    visible: bool,
    occluded: bool,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    image_file: String,
    head_size: f64,
    torso_size: f64,
    keypoints: Vec<KeypointRecord>,
}

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

/// Writes `dir/annotations.json` and one tensor file per image under `dir/images/`.
pub fn save_annotations(samples: &[PoseSample], dir: &Path) -> Result<PathBuf> {
    let image_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("{IMAGE_DIR}/{}.msst", s.id);
        let path = dir.join(&rel);
        fs::write(&path, s.image.encode()).map_err(|e| Error::io(&path, e))?;
        records.push(SampleRecord {
            id: s.id.clone(),
            image_file: rel,
            head_size: s.label.head_size,
            torso_size: s.label.torso_size,
            keypoints: Keypoint::ALL
                .iter()
                .map(|&k| {
                    let kp = &s.label.keypoints;
                    KeypointRecord {
                        name: k.name().to_string(),
                        x: kp.point(k).x,
                        y: kp.point(k).y,
                        visible: kp.is_visible(k),
                        occluded: kp.is_occluded(k),
                    }
                })
                .collect(),
        });
    }
    let path = dir.join(ANNOTATION_FILE);
    let json = serde_json::to_string_pretty(&records).expect("records serialize");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads an annotation file written by [`save_annotations`]; image paths are
/// resolved relative to the file's directory.
pub fn load_annotations(path: &Path) -> Result<Vec<PoseSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<SampleRecord> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, Some(e.line()), e.to_string()))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let field_err = |msg: String| Error::parse(path, None, format!("sample {i} ({}): {msg}", r.id));
            if r.keypoints.len() != NUM_KEYPOINTS {
                return Err(field_err(format!(
                    "field `keypoints` has {} entries, expected {NUM_KEYPOINTS}",
                    r.keypoints.len()
                )));
            }
            let mut kps = KeypointSet::default();
            for (j, (rec, k)) in r.keypoints.iter().zip(Keypoint::ALL).enumerate() {
                if rec.name != k.name() {
                    return Err(field_err(format!(
                        "field `keypoints[{j}].name` is {:?}, expected {:?}",
                        rec.name,
                        k.name()
                    )));
                }
                kps.points[j] = Point::new(rec.x, rec.y);
                kps.visible[j] = rec.visible;
                kps.occluded[j] = rec.occluded;
            }
            let img_path = dir.join(&r.image_file);
            let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
            let image = Tensor::<f32>::decode(&bytes).map_err(|e| Error::parse(&img_path, None, e.to_string()))?;
            if image.rank() != 3 || image.shape()[0] != 3 {
                return Err(Error::parse(&img_path, None, format!("image shape {:?} is not [3,H,W]", image.shape())));
            }
            Ok(PoseSample {
                id: r.id,
                image,
                label: PoseLabel {
                    keypoints: kps,
                    head_size: r.head_size,
                    torso_size: r.torso_size,
                },
                occluders: Vec::new(),
            })
        })
        .collect()
}
