//! Minimal raster drawing on `[3, H, W]` float images and binary PPM output.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::keypoints::{Keypoint, KeypointSet, Point, SKELETON};
use crate::tensor::Tensor;

pub type Rgb = [f32; 3];

/// RGB image with channel-planar storage and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in fill {
            data.extend(std::iter::repeat_n(c, width * height));
        }
        Self { width, height, data }
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match t.shape() {
            [3, h, w] | [1, 3, h, w] => Ok(Self {
                width: *w,
                height: *h,
                data: t.data().to_vec(),
            }),
            s => Err(Error::shape(format!("expected a [3,H,W] image, got {s:?}"))),
        }
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        Tensor::from_vec(&[3, self.height, self.width], self.data).expect("canvas shape")
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    /// Alpha-blends `color` into pixel `(x, y)` with coverage `a`.
    pub fn blend(&mut self, x: usize, y: usize, color: Rgb, a: f32) {
        if a <= 0.0 {
            return;
        }
        let a = a.min(1.0);
        let plane = self.width * self.height;
        let i = y * self.width + x;
        for (c, &v) in color.iter().enumerate() {
            let p = &mut self.data[c * plane + i];
            *p += a * (v - *p);
        }
    }

    /// Calls `f(x, y, distance)` for every pixel centre within `reach` of the
    /// bounding box `[x0, x1] x [y0, y1]`.
    fn for_each_near(&mut self, x0: f64, x1: f64, y0: f64, y1: f64, reach: f64, mut f: impl FnMut(&mut Self, usize, usize)) {
        let lo_x = (x0.min(x1) - reach).floor().max(0.0) as usize;
        let lo_y = (y0.min(y1) - reach).floor().max(0.0) as usize;
        let hi_x = (x0.max(x1) + reach).ceil().min(self.width as f64 - 1.0);
        let hi_y = (y0.max(y1) + reach).ceil().min(self.height as f64 - 1.0);
        if hi_x < 0.0 || hi_y < 0.0 {
            return;
        }
        for y in lo_y..=hi_y as usize {
            for x in lo_x..=hi_x as usize {
                f(self, x, y);
            }
        }
    }

    /// Anti-aliased segment of the given thickness.
    pub fn segment(&mut self, a: Point, b: Point, thickness: f64, color: Rgb) {
        let half = thickness / 2.0;
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len2 = dx * dx + dy * dy;
        self.for_each_near(a.x, b.x, a.y, b.y, half + 1.0, |c, x, y| {
            let (px, py) = (x as f64 - a.x, y as f64 - a.y);
            let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let d = (px - t * dx).hypot(py - t * dy);
            c.blend(x, y, color, (half + 0.5 - d).clamp(0.0, 1.0) as f32);
        });
    }

    /// Anti-aliased filled disc.
    pub fn disc(&mut self, center: Point, radius: f64, color: Rgb) {
        self.for_each_near(center.x, center.x, center.y, center.y, radius + 1.0, |c, x, y| {
            let d = (x as f64 - center.x).hypot(y as f64 - center.y);
            c.blend(x, y, color, (radius + 0.5 - d).clamp(0.0, 1.0) as f32);
        });
    }

    /// Fills pixels `[x, x + w) x [y, y + h)`, clipped to the canvas.
    pub fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, mut color: impl FnMut(usize, usize) -> Rgb) {
        for yy in y..(y + h).min(self.height) {
            for xx in x..(x + w).min(self.width) {
                self.blend(xx, yy, color(xx, yy), 1.0);
            }
        }
    }

    /// Nearest-neighbour enlargement.
    pub fn upscale(&self, factor: usize) -> Canvas {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut out = Canvas::new(w, h, [0.0; 3]);
        let (plane, oplane) = (self.width * self.height, w * h);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.data[c * oplane + y * w + x] = self.data[c * plane + (y / factor) * self.width + x / factor];
                }
            }
        }
        out
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        let plane = self.width * self.height;
        for i in 0..plane {
            for c in 0..3 {
                let v = self.data[c * plane + i].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }

    /// Parses a binary PPM (P6) with maxval up to 255.
    pub fn from_ppm(bytes: &[u8]) -> Result<Canvas> {
        let bad = |m: &str| Error::invalid(format!("not a P6 image: {m}"));
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("missing P6 magic"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("only 8-bit maxval is supported"));
        }
        let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
        if pixels.len() < 3 * w * h {
            return Err(bad("pixel data is truncated"));
        }
        let mut c = Canvas::new(w, h, [0.0; 3]);
        let plane = w * h;
        for i in 0..plane {
            for ch in 0..3 {
                c.data[ch * plane + i] = pixels[3 * i + ch] as f32 / maxval as f32;
            }
        }
        Ok(c)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

pub const LEFT_COLOR: Rgb = [0.1, 0.9, 0.2];
pub const RIGHT_COLOR: Rgb = [0.95, 0.2, 0.2];
pub const CENTER_COLOR: Rgb = [1.0, 0.9, 0.1];

fn side_color(k: Keypoint) -> Rgb {
    let name = k.name();
    if name.starts_with("l_") {
        LEFT_COLOR
    } else if name.starts_with("r_") {
        RIGHT_COLOR
    } else {
        CENTER_COLOR
    }
}

/// Draws the skeleton of `kps` over `image` enlarged by `factor`. Bones are
/// coloured by side and every visible keypoint gets a marker of its side colour.
pub fn pose_overlay(image: &Canvas, kps: &KeypointSet, factor: usize) -> Canvas {
    let mut out = image.upscale(factor);
    let f = factor as f64;
    let map = |p: Point| Point::new((p.x + 0.5) * f - 0.5, (p.y + 0.5) * f - 0.5);
    for (a, b) in SKELETON {
        if kps.is_visible(a) && kps.is_visible(b) {
            out.segment(map(kps.point(a)), map(kps.point(b)), 1.0, side_color(b));
        }
    }
    for k in Keypoint::ALL {
        if kps.is_visible(k) {
            out.disc(map(kps.point(k)), 1.5, side_color(k));
        }
    }
    out
}
