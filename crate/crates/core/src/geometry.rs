//! Position maps over token grids, camera transforms on those maps, and
//! 2D axial rotary embeddings driven by them.
//!
//! A grid of `H x W` tokens gets coordinates in `[-r_h, r_h] x [-r_w, r_w]`
//! where `r_h * r_w = 1` and `r_h / r_w = H / W`. Every grid therefore covers
//! the same area in coordinate space no matter its aspect ratio, and a crop
//! of an image carries the matching crop of its map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinate half-extents of a token grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AspectRanges {
    pub r_h: f64,
    pub r_w: f64,
}

pub fn compute_ranges(height: usize, width: usize) -> Result<AspectRanges> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimension(format!(
            "grid must be at least 1x1, got {height}x{width}"
        )));
    }
    let (h, w) = (height as f64, width as f64);
    Ok(AspectRanges {
        r_h: (h / w).sqrt(),
        r_w: (w / h).sqrt(),
    })
}

/// `n` evenly spaced points over `[-r, r]` with exact endpoints and an exact
/// zero midpoint for odd `n`. A single point sits at the axis midpoint.
pub fn symmetric_linspace(r: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| (2.0 * i as f64 - denom) / denom * r)
        .collect()
}

/// Per-token `(h, w)` coordinates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionMap {
    height: usize,
    width: usize,
    coords: Vec<[f64; 2]>,
}

impl PositionMap {
    pub fn from_axes(h_coords: &[f64], w_coords: &[f64]) -> Self {
        let mut coords = Vec::with_capacity(h_coords.len() * w_coords.len());
        for &h in h_coords {
            for &w in w_coords {
                coords.push([h, w]);
            }
        }
        Self {
            height: h_coords.len(),
            width: w_coords.len(),
            coords,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> [f64; 2] {
        self.coords[i * self.width + j]
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Rectangular window `[y0, y0 + h) x [x0, x0 + w)`.
    pub fn slice(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<PositionMap> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "window {h}x{w} at ({y0}, {x0}) exceeds map {}x{}",
                self.height, self.width
            )));
        }
        let mut coords = Vec::with_capacity(h * w);
        for i in y0..y0 + h {
            let row = i * self.width;
            coords.extend_from_slice(&self.coords[row + x0..row + x0 + w]);
        }
        Ok(PositionMap {
            height: h,
            width: w,
            coords,
        })
    }

    /// Same grid shape, coordinates passed through `f`.
    pub fn map_coords(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> PositionMap {
        PositionMap {
            height: self.height,
            width: self.width,
            coords: self.coords.iter().copied().map(f).collect(),
        }
    }

    /// Permutes the token order; coordinates travel with their tokens.
    pub fn permuted(&self, order: &[usize]) -> PositionMap {
        PositionMap {
            height: self.height,
            width: self.width,
            coords: order.iter().map(|&i| self.coords[i]).collect(),
        }
    }
}

pub fn make_position_map(height: usize, width: usize) -> Result<PositionMap> {
    let ranges = compute_ranges(height, width)?;
    Ok(PositionMap::from_axes(
        &symmetric_linspace(ranges.r_h, height),
        &symmetric_linspace(ranges.r_w, width),
    ))
}

/// Pan and zoom applied to a base position map at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraTransform {
    /// Offset added to w-coordinates; positive pans right.
    pub shift_x: f64,
    /// Offset added to h-coordinates; positive pans down.
    pub shift_y: f64,
    /// Greater than 1 zooms in, less than 1 zooms out.
    pub zoom: f64,
}

impl Default for CameraTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl CameraTransform {
    pub const IDENTITY: CameraTransform = CameraTransform {
        shift_x: 0.0,
        shift_y: 0.0,
        zoom: 1.0,
    };

    pub fn new(shift_x: f64, shift_y: f64, zoom: f64) -> Result<Self> {
        let cam = Self {
            shift_x,
            shift_y,
            zoom,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zoom > 0.0) || !self.zoom.is_finite() {
            return Err(Error::InvalidTransform(format!(
                "zoom must be a positive finite number, got {}",
                self.zoom
            )));
        }
        if !self.shift_x.is_finite() || !self.shift_y.is_finite() {
            return Err(Error::InvalidTransform("shifts must be finite".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Scale by `1 / zoom`, then shift.
    pub fn apply(&self, map: &PositionMap) -> Result<PositionMap> {
        self.validate()?;
        let (sx, sy, z) = (self.shift_x, self.shift_y, self.zoom);
        Ok(map.map_coords(|[h, w]| [h / z + sy, w / z + sx]))
    }
}

pub fn apply_camera(height: usize, width: usize, cam: &CameraTransform) -> Result<PositionMap> {
    cam.validate()?;
    cam.apply(&make_position_map(height, width)?)
}

/// Rotary frequency layout for one attention head.
///
/// The first `rotated_dims` features are rotated in consecutive pairs; the
/// first half of those pairs follows the h-coordinate and the second half
/// the w-coordinate. The remaining features pass through untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeFrequencies {
    head_dim: usize,
    rotated_dims: usize,
    base: f64,
    omegas: Vec<f64>,
}

impl RopeFrequencies {
    pub fn new(head_dim: usize, rotated_fraction: f64, base: f64) -> Result<Self> {
        if !head_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "rope head_dim must be even, got {head_dim}"
            )));
        }
        if !(0.0..=1.0).contains(&rotated_fraction) {
            return Err(Error::InvalidConfig(format!(
                "rotated fraction must be in [0, 1], got {rotated_fraction}"
            )));
        }
        if !(base > 0.0) {
            return Err(Error::InvalidConfig(format!("rope base must be positive, got {base}")));
        }
        let rotated_dims = (head_dim as f64 * rotated_fraction).round() as usize;
        if !rotated_dims.is_multiple_of(4) {
            return Err(Error::InvalidConfig(format!(
                "rotated dims ({rotated_dims}) must be divisible by 4 for 2D axial rope"
            )));
        }
        let axis_dims = rotated_dims / 2;
        let omegas = (0..axis_dims / 2)
            .map(|i| base.powf(-2.0 * i as f64 / axis_dims as f64))
            .collect();
        Ok(Self {
            head_dim,
            rotated_dims,
            base,
            omegas,
        })
    }

    /// Half of the head rotated, base 10000.
    pub fn standard(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, 0.5, 10_000.0)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn rotated_dims(&self) -> usize {
        self.rotated_dims
    }

    pub fn n_pairs(&self) -> usize {
        self.rotated_dims / 2
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Per-axis angular frequencies.
    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    /// Rotation angle of every pair for a token at `(h, w)`.
    pub fn angles(&self, position: [f64; 2]) -> Vec<f64> {
        let [h, w] = position;
        self.omegas
            .iter()
            .map(|o| h * o)
            .chain(self.omegas.iter().map(|o| w * o))
            .collect()
    }
}

pub fn rope_rotate(features: &[f64], position: [f64; 2], freqs: &RopeFrequencies) -> Result<Vec<f64>> {
    if features.len() != freqs.head_dim {
        return Err(Error::Shape(format!(
            "rope expects {} features, got {}",
            freqs.head_dim,
            features.len()
        )));
    }
    let mut out = features.to_vec();
    for (p, angle) in freqs.angles(position).into_iter().enumerate() {
        let (s, c) = angle.sin_cos();
        let (x1, x2) = (features[2 * p], features[2 * p + 1]);
        out[2 * p] = x1 * c - x2 * s;
        out[2 * p + 1] = x1 * s + x2 * c;
    }
    Ok(out)
}
