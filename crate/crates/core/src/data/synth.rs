//! Synthetic bi-temporal scenes: textured ground, vegetation patches and
//! rectangular buildings. Between the two epochs a fraction of buildings
//! appears or disappears (structural change, labeled) while global
//! brightness/tint, sensor noise and seasonal vegetation colour also shift
//! (pseudo-change, never labeled).

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Mask value of a changed pixel.
pub const CHANGED: u8 = 255;
/// Mask value of an unchanged pixel.
pub const UNCHANGED: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotometricJitter {
    /// Maximum absolute global brightness shift applied to the second epoch.
    pub brightness: f64,
    /// Standard deviation of per-pixel Gaussian sensor noise (both epochs).
    pub noise_std: f64,
    /// Seasonal strength in `[0, 1]`: global colour cast plus vegetation
    /// recolouring in the second epoch.
    pub tint: f64,
}

impl Default for PhotometricJitter {
    fn default() -> Self {
        Self {
            brightness: 0.12,
            noise_std: 0.02,
            tint: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePairSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of building counts.
    pub buildings: (usize, usize),
    /// Inclusive range of building side lengths in pixels.
    pub building_size: (usize, usize),
    pub change_fraction: f64,
    pub jitter: PhotometricJitter,
    pub seed: u64,
}

impl ScenePairSpec {
    pub fn new(size: usize, seed: u64) -> Self {
        let side = (size / 5).max(3);
        Self {
            width: size,
            height: size,
            buildings: (3, 8),
            building_size: ((side / 2).max(2), side),
            change_fraction: 0.4,
            jitter: PhotometricJitter::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("scene size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.change_fraction) {
            return Err(Error::InvalidConfig(format!(
                "change fraction {} outside [0, 1]",
                self.change_fraction
            )));
        }
        let (lo, hi) = self.building_size;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!("invalid building size range {lo}..={hi}")));
        }
        if hi > self.width.min(self.height) {
            return Err(Error::InvalidConfig(format!(
                "building size {hi} exceeds the {}x{} image",
                self.width, self.height
            )));
        }
        if self.buildings.0 > self.buildings.1 {
            return Err(Error::InvalidConfig("invalid building count range".into()));
        }
        let j = &self.jitter;
        if j.brightness < 0.0 || j.noise_std < 0.0 || !(0.0..=1.0).contains(&j.tint) {
            return Err(Error::InvalidConfig("invalid photometric jitter".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Presence {
    Both,
    FirstOnly,
    SecondOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Building {
    pub center: (f64, f64),
    pub half_extent: (f64, f64),
    /// Rotation in radians.
    pub angle: f64,
    pub color: [f64; 3],
    pub presence: Presence,
}

impl Building {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.half_extent.0 && v.abs() <= self.half_extent.1
    }

    /// Corners in counter-clockwise order (image coordinates).
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.angle.sin_cos();
        let (hw, hh) = self.half_extent;
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(u, v)| (self.center.0 + c * u - s * v, self.center.1 + s * u + c * v))
    }

    fn in_first(&self) -> bool {
        self.presence != Presence::SecondOnly
    }

    fn in_second(&self) -> bool {
        self.presence != Presence::FirstOnly
    }
}

#[derive(Clone, Debug)]
struct Blob {
    center: (f64, f64),
    radii: (f64, f64),
    spring: [f64; 3],
    autumn: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct ScenePair {
    pub t1: RgbImage,
    pub t2: RgbImage,
    pub gt: GrayImage,
    pub buildings: Vec<Building>,
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn generate_pair(spec: &ScenePairSpec) -> Result<ScenePair> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed);
    let (w, h) = (spec.width, spec.height);

    // Ground: base colour, low-frequency undulation and a fixed fine texture.
    let base = [
        rng.uniform_range(0.35, 0.55),
        rng.uniform_range(0.32, 0.48),
        rng.uniform_range(0.25, 0.40),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.uniform_range(0.01, 0.08),
                rng.uniform_range(0.01, 0.08),
                rng.uniform_range(0.0, std::f64::consts::TAU),
                rng.uniform_range(0.02, 0.05),
            )
        })
        .collect();
    let mut ground = vec![[0.0; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let undulation: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            let grain = 0.03 * rng.normal();
            ground[y * w + x] = base.map(|c| c + undulation + grain);
        }
    }

    let tint = spec.jitter.tint;
    let blobs: Vec<Blob> = (0..rng.int_range(2, 6))
        .map(|_| {
            let r = (w.min(h) as f64 / 10.0).max(2.0);
            let spring = [
                rng.uniform_range(0.12, 0.25),
                rng.uniform_range(0.38, 0.55),
                rng.uniform_range(0.10, 0.22),
            ];
            let autumn = [
                rng.uniform_range(0.50, 0.65),
                rng.uniform_range(0.35, 0.45),
                rng.uniform_range(0.12, 0.22),
            ];
            Blob {
                center: (rng.uniform_range(0.0, w as f64), rng.uniform_range(0.0, h as f64)),
                radii: (rng.uniform_range(r * 0.5, r * 1.6), rng.uniform_range(r * 0.5, r * 1.6)),
                spring,
                autumn: lerp3(spring, autumn, tint * rng.uniform_range(0.6, 1.0)),
            }
        })
        .collect();

    let count = rng.int_range(spec.buildings.0, spec.buildings.1);
    let mut buildings: Vec<Building> = (0..count)
        .map(|_| {
            let (lo, hi) = spec.building_size;
            let bw = rng.int_range(lo, hi) as f64;
            let bh = rng.int_range(lo, hi) as f64;
            let angle = if rng.bernoulli(0.5) {
                0.0
            } else {
                rng.uniform_range(0.0, std::f64::consts::FRAC_PI_2)
            };
            let color = match rng.int_range(0, 2) {
                0 => [rng.uniform_range(0.70, 0.92); 3],
                1 => [
                    rng.uniform_range(0.65, 0.85),
                    rng.uniform_range(0.18, 0.30),
                    rng.uniform_range(0.15, 0.25),
                ],
                _ => [
                    rng.uniform_range(0.20, 0.32),
                    rng.uniform_range(0.35, 0.50),
                    rng.uniform_range(0.65, 0.85),
                ],
            };
            Building {
                center: (rng.uniform_range(0.0, w as f64), rng.uniform_range(0.0, h as f64)),
                half_extent: (bw / 2.0, bh / 2.0),
                angle,
                color,
                presence: Presence::Both,
            }
        })
        .collect();
    let changed = (spec.change_fraction * count as f64).round() as usize;
    let mut order: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut order);
    for &i in order.iter().take(changed) {
        buildings[i].presence = if rng.bernoulli(0.5) {
            Presence::FirstOnly
        } else {
            Presence::SecondOnly
        };
    }

    // Second-epoch photometric state.
    let j = &spec.jitter;
    let shift = rng.uniform_range(-j.brightness, j.brightness);
    let cast = [0; 3].map(|_| rng.uniform_range(-0.08, 0.08) * tint);

    let mut t1 = RgbImage::new(w as u32, h as u32);
    let mut t2 = RgbImage::new(w as u32, h as u32);
    let mut gt = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut c1 = ground[y * w + x];
            let mut c2 = c1;
            for b in &blobs {
                let (dx, dy) = ((px - b.center.0) / b.radii.0, (py - b.center.1) / b.radii.1);
                if dx * dx + dy * dy <= 1.0 {
                    let texture = ground[y * w + x][1] - base[1];
                    c1 = b.spring.map(|v| v + texture);
                    c2 = b.autumn.map(|v| v + texture);
                }
            }
            // Topmost building per epoch; later buildings are drawn on top.
            let (mut top1, mut top2) = (None, None);
            for (i, b) in buildings.iter().enumerate() {
                if b.contains(px, py) {
                    if b.in_first() {
                        top1 = Some(i);
                    }
                    if b.in_second() {
                        top2 = Some(i);
                    }
                }
            }
            if let Some(i) = top1 {
                c1 = buildings[i].color;
            }
            if let Some(i) = top2 {
                c2 = buildings[i].color;
            }
            let n1 = [0; 3].map(|_| j.noise_std * rng.normal());
            let n2 = [0; 3].map(|_| j.noise_std * rng.normal());
            let p1 = [0, 1, 2].map(|k| quantize(c1[k] + n1[k]));
            let p2 = [0, 1, 2].map(|k| quantize(c2[k] + shift + cast[k] + n2[k]));
            t1.put_pixel(x as u32, y as u32, Rgb(p1));
            t2.put_pixel(x as u32, y as u32, Rgb(p2));
            let label = if top1 != top2 { CHANGED } else { UNCHANGED };
            gt.put_pixel(x as u32, y as u32, Luma([label]));
        }
    }
    Ok(ScenePair { t1, t2, gt, buildings })
}

/// An aligned crop of a scene pair.
#[derive(Clone, Debug)]
pub struct PatchTriple {
    pub origin: (u32, u32),
    pub t1: RgbImage,
    pub t2: RgbImage,
    pub gt: GrayImage,
}

/// `count` random windows, each applied identically to both epochs and the mask.
pub fn crop_patches(
    t1: &RgbImage,
    t2: &RgbImage,
    gt: &GrayImage,
    patch_size: u32,
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<PatchTriple>> {
    let (w, h) = t1.dimensions();
    if t2.dimensions() != (w, h) || gt.dimensions() != (w, h) {
        return Err(Error::shape(
            "crop_patches",
            &[w as usize, h as usize],
            &[t2.width() as usize, t2.height() as usize],
        ));
    }
    if patch_size == 0 || patch_size > w || patch_size > h {
        return Err(Error::InvalidArgument(format!(
            "patch {patch_size} does not fit the {w}x{h} image"
        )));
    }
    let crop = |img_origin: (u32, u32)| -> PatchTriple {
        let (x, y) = img_origin;
        PatchTriple {
            origin: img_origin,
            t1: image::imageops::crop_imm(t1, x, y, patch_size, patch_size).to_image(),
            t2: image::imageops::crop_imm(t2, x, y, patch_size, patch_size).to_image(),
            gt: image::imageops::crop_imm(gt, x, y, patch_size, patch_size).to_image(),
        }
    };
    Ok((0..count)
        .map(|_| {
            let x = rng.int_range(0, (w - patch_size) as usize) as u32;
            let y = rng.int_range(0, (h - patch_size) as usize) as u32;
            crop((x, y))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_specs_rejected() {
        let mut s = ScenePairSpec::new(32, 0);
        s.building_size = (10, 40);
        assert!(generate_pair(&s).is_err());
        let mut s = ScenePairSpec::new(32, 0);
        s.change_fraction = 1.5;
        assert!(generate_pair(&s).is_err());
    }

    #[test]
    fn masks_are_two_valued() {
        let p = generate_pair(&ScenePairSpec::new(48, 3)).unwrap();
        assert!(p.gt.pixels().all(|v| v.0[0] == CHANGED || v.0[0] == UNCHANGED));
    }

    #[test]
    fn corners_match_containment() {
        let b = Building {
            center: (10.0, 10.0),
            half_extent: (4.0, 2.0),
            angle: 0.3,
            color: [0.5; 3],
            presence: Presence::Both,
        };
        for (x, y) in b.corners() {
            // Just inside each corner along the diagonal towards the centre.
            assert!(b.contains(x + (10.0 - x) * 1e-6, y + (10.0 - y) * 1e-6));
            assert!(!b.contains(x + (x - 10.0) * 1e-3, y + (y - 10.0) * 1e-3));
        }
    }

    #[test]
    fn full_size_crop_is_the_image() {
        let p = generate_pair(&ScenePairSpec::new(32, 5)).unwrap();
        let crops = crop_patches(&p.t1, &p.t2, &p.gt, 32, 1, &mut RngStream::new(0)).unwrap();
        assert_eq!(crops[0].t1, p.t1);
        assert_eq!(crops[0].gt, p.gt);
        assert!(crop_patches(&p.t1, &p.t2, &p.gt, 33, 1, &mut RngStream::new(0)).is_err());
    }
}
