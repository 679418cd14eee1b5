//! Raster-scan tiling of large images into fixed-size windows, with
//! overlap averaging when the per-window predictions are stitched back.

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_PATCH: usize = 256;
pub const DEFAULT_STRIDE: usize = 128;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TilePlan {
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub stride: usize,
    pub x_origins: Vec<usize>,
    pub y_origins: Vec<usize>,
    /// Number of windows covering each pixel, row-major.
    #[serde(skip)]
    pub coverage: Vec<u32>,
}

/// Origins `0, stride, 2*stride, ...` plus a final window clamped to the edge.
fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if origins.last() != Some(&last) {
        origins.push(last);
    }
    origins
}

pub fn plan_tiles(width: usize, height: usize, patch: usize, stride: usize) -> Result<TilePlan> {
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch and stride must be positive".into()));
    }
    if stride > patch {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} exceeds patch {patch}; some pixels would not be covered"
        )));
    }
    if patch > width || patch > height {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} is larger than the {width}x{height} image"
        )));
    }
    let x_origins = axis_origins(width, patch, stride);
    let y_origins = axis_origins(height, patch, stride);
    let mut coverage = vec![0u32; width * height];
    for &y0 in &y_origins {
        for &x0 in &x_origins {
            for row in coverage[y0 * width..(y0 + patch) * width].chunks_mut(width) {
                for c in &mut row[x0..x0 + patch] {
                    *c += 1;
                }
            }
        }
    }
    Ok(TilePlan {
        width,
        height,
        patch,
        stride,
        x_origins,
        y_origins,
        coverage,
    })
}

impl TilePlan {
    /// Window origins `(x, y)` in raster order.
    pub fn windows(&self) -> Vec<(usize, usize)> {
        self.y_origins
            .iter()
            .flat_map(|&y| self.x_origins.iter().map(move |&x| (x, y)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.x_origins.len() * self.y_origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy the `patch x patch` window at `origin` out of a row-major,
    /// channel-interleaved image with `channels` values per pixel.
    pub fn extract<V: Copy>(&self, image: &[V], channels: usize, origin: (usize, usize)) -> Vec<V> {
        let (x0, y0) = origin;
        let mut out = Vec::with_capacity(self.patch * self.patch * channels);
        for y in y0..y0 + self.patch {
            let start = (y * self.width + x0) * channels;
            out.extend_from_slice(&image[start..start + self.patch * channels]);
        }
        out
    }
}

/// A window prediction: origin plus a row-major `patch x patch` map.
#[derive(Clone, Debug)]
pub struct PatchPrediction {
    pub origin: (usize, usize),
    pub values: Vec<f64>,
}

/// Average window predictions back onto the full image. The mean is kept
/// incrementally, so pixels whose windows agree get that value back exactly.
pub fn stitch(patches: &[PatchPrediction], plan: &TilePlan) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; plan.width * plan.height];
    let mut count = vec![0u32; plan.width * plan.height];
    let mut seen = vec![false; plan.len()];
    let index = |origin: (usize, usize)| -> Option<usize> {
        let xi = plan.x_origins.iter().position(|&x| x == origin.0)?;
        let yi = plan.y_origins.iter().position(|&y| y == origin.1)?;
        Some(yi * plan.x_origins.len() + xi)
    };
    for p in patches {
        let idx = index(p.origin)
            .ok_or_else(|| Error::InvalidArgument(format!("patch origin {:?} is not in the tile plan", p.origin)))?;
        if p.values.len() != plan.patch * plan.patch {
            return Err(Error::shape("stitch", &[p.values.len()], &[plan.patch * plan.patch]));
        }
        if seen[idx] {
            return Err(Error::InvalidArgument(format!("duplicate patch at {:?}", p.origin)));
        }
        seen[idx] = true;
        let (x0, y0) = p.origin;
        for (dy, row) in p.values.chunks(plan.patch).enumerate() {
            let start = (y0 + dy) * plan.width + x0;
            let cells = mean[start..start + plan.patch]
                .iter_mut()
                .zip(&mut count[start..start + plan.patch]);
            for ((m, k), &v) in cells.zip(row) {
                *k += 1;
                *m += (v - *m) / f64::from(*k);
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let (x, y) = plan.windows()[missing];
        return Err(Error::InvalidArgument(format!(
            "missing prediction for window at ({x}, {y})"
        )));
    }
    Ok(mean)
}

/// Binary map: changed iff the probability strictly exceeds `t`.
pub fn threshold(prob: &[f64], t: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside [0, 1]")));
    }
    Ok(prob.iter().map(|&p| p > t).collect())
}

/// Map generator output from `[-1, 1]` to `[0, 1]`, so that thresholding at
/// 0.5 is equivalent to thresholding the raw output at 0.
pub fn tanh_to_unit(v: f64) -> f64 {
    ((v + 1.0) / 2.0).clamp(0.0, 1.0)
}
