//! Gaussian heatmap encoding of keypoints and argmax decoding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::keypoints::{Keypoint, KeypointSet, Point, NUM_KEYPOINTS};
use crate::tensor::{Scalar, Tensor};

/// Per-keypoint likelihood maps at one resolution.
///
/// `maps` is `[N, H, W]`. `scale` is the divisor relative to the base heatmap
/// resolution, and `frame` is the `(width, height)` of the coordinate frame that
/// decoded positions are expressed in.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack<T: Scalar> {
    pub maps: Tensor<T>,
    pub scale: usize,
    pub frame: (usize, usize),
    /// Set for keypoints that fell outside the map and were clamped to its border.
    pub clamped: Vec<bool>,
}

impl<T: Scalar> HeatmapStack<T> {
    pub fn new(maps: Tensor<T>, scale: usize, frame: (usize, usize)) -> Result<Self> {
        if maps.rank() != 3 {
            return Err(Error::shape(format!(
                "heatmap stack must be [N,H,W], got {:?}",
                maps.shape()
            )));
        }
        let n = maps.shape()[0];
        Ok(Self {
            maps,
            scale,
            frame,
            clamped: vec![false; n],
        })
    }

    pub fn channels(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn channel(&self, n: usize) -> &[T] {
        let plane = self.height() * self.width();
        &self.maps.data()[n * plane..(n + 1) * plane]
    }

    pub fn cast<U: Scalar>(&self) -> HeatmapStack<U> {
        HeatmapStack {
            maps: self.maps.cast(),
            scale: self.scale,
            frame: self.frame,
            clamped: self.clamped.clone(),
        }
    }

    /// Writes the maps as a tensor record at `path` and a text sidecar at
    /// `path` + `.txt` naming the keypoint order and scale.
    pub fn save_dump(&self, path: &Path) -> Result<()> {
        fs::write(path, self.maps.encode()).map_err(|e| Error::io(path, e))?;
        let names: Vec<String> = (0..self.channels())
            .map(|i| {
                Keypoint::from_index(i)
                    .map(|k| k.name().to_string())
                    .unwrap_or_else(|| format!("ch{i}"))
            })
            .collect();
        let header = format!(
            "keypoints={}\nscale={}\nmap={}x{}\nframe={}x{}\n",
            names.join(","),
            self.scale,
            self.width(),
            self.height(),
            self.frame.0,
            self.frame.1
        );
        let side = sidecar_path(path);
        fs::write(&side, header).map_err(|e| Error::io(side, e))
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    s.into()
}

/// Round half up, then clamp into `[0, len - 1]`. Returns the pixel and
/// whether clamping was needed.
fn quantize(v: f64, len: usize) -> (usize, bool) {
    let r = (v + 0.5).floor();
    if r < 0.0 {
        (0, true)
    } else if r > (len - 1) as f64 {
        (len - 1, true)
    } else {
        (r as usize, false)
    }
}

/// Encodes keypoints given in a `frame` = `(width, height)` pixel frame into an
/// unnormalised Gaussian per keypoint on a `map_w x map_h` grid.
///
/// Frames are aligned on pixel centres: frame coordinate `x` maps to
/// `(x + 0.5) * map_w / width - 0.5` before quantization.
pub fn encode(
    kps: &KeypointSet,
    frame: (usize, usize),
    map_w: usize,
    map_h: usize,
    sigma: f64,
) -> Result<HeatmapStack<f64>> {
    encode_at_scale(kps, frame, map_w, map_h, sigma, 1)
}

fn encode_at_scale(
    kps: &KeypointSet,
    frame: (usize, usize),
    map_w: usize,
    map_h: usize,
    sigma: f64,
    scale: usize,
) -> Result<HeatmapStack<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if map_w == 0 || map_h == 0 || frame.0 == 0 || frame.1 == 0 {
        return Err(Error::invalid("heatmap and frame extents must be positive"));
    }
    let plane = map_w * map_h;
    let mut data = vec![0.0; NUM_KEYPOINTS * plane];
    let mut clamped = vec![false; NUM_KEYPOINTS];
    let sx = map_w as f64 / frame.0 as f64;
    let sy = map_h as f64 / frame.1 as f64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for k in Keypoint::ALL {
        if !kps.is_visible(k) {
            continue;
        }
        let p = kps.point(k);
        let (cx, clx) = quantize((p.x + 0.5) * sx - 0.5, map_w);
        let (cy, cly) = quantize((p.y + 0.5) * sy - 0.5, map_h);
        if clx || cly {
            log::warn!("keypoint {} clamped to heatmap border", k.name());
            clamped[k.index()] = true;
        }
        let ch = &mut data[k.index() * plane..(k.index() + 1) * plane];
        for y in 0..map_h {
            let dy = y as f64 - cy as f64;
            for x in 0..map_w {
                let dx = x as f64 - cx as f64;
                ch[y * map_w + x] = (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    let mut stack = HeatmapStack::new(
        Tensor::from_vec(&[NUM_KEYPOINTS, map_h, map_w], data)?,
        scale,
        frame,
    )?;
    stack.clamped = clamped;
    Ok(stack)
}

/// Groundtruth pyramid: one stack per divisor, each encoded directly at its own
/// resolution `base / divisor` with `sigma` in that resolution's pixels.
pub fn pyramid(
    kps: &KeypointSet,
    frame: (usize, usize),
    base_w: usize,
    base_h: usize,
    sigma: f64,
    scales: &[usize],
) -> Result<Vec<HeatmapStack<f64>>> {
    scales
        .iter()
        .map(|&d| {
            if d == 0 || !base_w.is_multiple_of(d) || !base_h.is_multiple_of(d) {
                return Err(Error::invalid(format!(
                    "scale divisor {d} does not divide base heatmap {base_w}x{base_h}"
                )));
            }
            encode_at_scale(kps, frame, base_w / d, base_h / d, sigma, d)
        })
        .collect()
}

/// Argmax readout of one channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    /// Position in the stack's coordinate frame.
    pub point: Point,
    /// Map pixel `(x, y)` of the maximum.
    pub pixel: (usize, usize),
    pub confidence: f64,
    pub detected: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub peaks: Vec<Peak>,
}

impl Decoded {
    /// Keypoint set with `visible` set for detected channels.
    pub fn keypoints(&self) -> Result<KeypointSet> {
        if self.peaks.len() != NUM_KEYPOINTS {
            return Err(Error::shape(format!(
                "expected {NUM_KEYPOINTS} decoded channels, got {}",
                self.peaks.len()
            )));
        }
        let mut out = KeypointSet::default();
        for (i, p) in self.peaks.iter().enumerate() {
            out.points[i] = p.point;
            out.visible[i] = p.detected;
        }
        Ok(out)
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.peaks.iter().map(|p| p.confidence).collect()
    }
}

/// Per-channel argmax with ties broken toward the smallest row-major index.
/// Positions are rescaled from map pixels into the stack's frame (the inverse
/// of the pixel-centre mapping used by [`encode`]).
pub fn decode<T: Scalar>(hm: &HeatmapStack<T>) -> Decoded {
    let (h, w) = (hm.height(), hm.width());
    let sx = hm.frame.0 as f64 / w as f64;
    let sy = hm.frame.1 as f64 / h as f64;
    let peaks = (0..hm.channels())
        .map(|n| {
            let ch = hm.channel(n);
            let mut best = 0;
            for (i, v) in ch.iter().enumerate() {
                if *v > ch[best] {
                    best = i;
                }
            }
            let peak = ch.get(best).map(|v| v.as_f64()).unwrap_or(0.0);
            if peak == 0.0 && ch.iter().all(|v| v.is_zero()) {
                return Peak {
                    point: Point::default(),
                    pixel: (0, 0),
                    confidence: 0.0,
                    detected: false,
                };
            }
            let (px, py) = (best % w, best / w);
            Peak {
                point: Point::new((px as f64 + 0.5) * sx - 0.5, (py as f64 + 0.5) * sy - 0.5),
                pixel: (px, py),
                confidence: peak,
                detected: true,
            }
        })
        .collect();
    Decoded { peaks }
}
