//! Rotated-box BEV geometry: crucial points, world/grid transforms and
//! Gaussian-like masks for foreground weighting.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("degenerate grid: x [{x_min}, {x_max}], y [{y_min}, {y_max}], {h}x{w} cells")]
    DegenerateGrid {
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        h: usize,
        w: usize,
    },
    #[error("invalid box dims: length {length}, width {width} (both must be > 0)")]
    BadBoxDims { length: f64, width: f64 },
}

/// Ground-truth object in the BEV world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    /// Center, meters.
    pub cx: f64,
    pub cy: f64,
    /// Extent along the box's own x axis, meters. > 0.
    pub length: f64,
    /// Extent along the box's own y axis, meters. > 0.
    pub width: f64,
    /// Radians in (-pi, pi].
    pub yaw: f64,
    pub class_id: usize,
}

impl RotatedBox {
    pub fn new(
        cx: f64,
        cy: f64,
        length: f64,
        width: f64,
        yaw: f64,
        class_id: usize,
    ) -> Result<Self, GeometryError> {
        if !(length > 0.0 && width > 0.0) {
            return Err(GeometryError::BadBoxDims { length, width });
        }
        Ok(RotatedBox {
            cx,
            cy,
            length,
            width,
            yaw,
            class_id,
        })
    }

    /// True if the world point lies inside the (optionally inflated) box.
    pub fn contains(&self, x: f64, y: f64, margin: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        // project into the box frame
        let bx = c * dx + s * dy;
        let by = -s * dx + c * dy;
        bx.abs() <= self.length / 2.0 + margin && by.abs() <= self.width / 2.0 + margin
    }
}

/// The 9 crucial points of a box, meters, in fixed order: 4 corners
/// counter-clockwise from (+l/2, +w/2) in the box frame, then the 4 edge
/// midpoints m12, m23, m34, m41, then the center. The ordering is shared by
/// teacher and student so relation-matrix entries pair the same points.
pub fn crucial_points(b: &RotatedBox) -> [(f64, f64); 9] {
    let hl = b.length / 2.0;
    let hw = b.width / 2.0;
    let corners = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
    let mids = [
        mid(corners[0], corners[1]),
        mid(corners[1], corners[2]),
        mid(corners[2], corners[3]),
        mid(corners[3], corners[0]),
    ];
    let (s, c) = b.yaw.sin_cos();
    let place = |p: (f64, f64)| -> (f64, f64) {
        (b.cx + c * p.0 - s * p.1, b.cy + s * p.0 + c * p.1)
    };
    [
        place(corners[0]),
        place(corners[1]),
        place(corners[2]),
        place(corners[3]),
        place(mids[0]),
        place(mids[1]),
        place(mids[2]),
        place(mids[3]),
        place((0.0, 0.0)),
    ]
}

fn mid(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0)
}

/// BEV region of interest and its discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Rows (y axis).
    pub h: usize,
    /// Columns (x axis).
    pub w: usize,
}

impl GridSpec {
    pub fn new(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        h: usize,
        w: usize,
    ) -> Result<Self, GeometryError> {
        if !(x_max > x_min && y_max > y_min) || h < 1 || w < 1 {
            return Err(GeometryError::DegenerateGrid {
                x_min,
                x_max,
                y_min,
                y_max,
                h,
                w,
            });
        }
        Ok(GridSpec {
            x_min,
            x_max,
            y_min,
            y_max,
            h,
            w,
        })
    }

    pub fn cell_w(&self) -> f64 {
        (self.x_max - self.x_min) / self.w as f64
    }

    pub fn cell_h(&self) -> f64 {
        (self.y_max - self.y_min) / self.h as f64
    }

    /// World point -> continuous (row, col) under the cell-center convention,
    /// plus an in-bounds flag for row in [0, H-1], col in [0, W-1].
    pub fn world_to_grid(&self, x: f64, y: f64) -> (f64, f64, bool) {
        let row = (y - self.y_min) / (self.y_max - self.y_min) * self.h as f64 - 0.5;
        let col = (x - self.x_min) / (self.x_max - self.x_min) * self.w as f64 - 0.5;
        let inside = row >= 0.0
            && row <= (self.h - 1) as f64
            && col >= 0.0
            && col <= (self.w - 1) as f64;
        (row, col, inside)
    }

    /// Inverse of [`GridSpec::world_to_grid`].
    pub fn grid_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        let y = (row + 0.5) / self.h as f64 * (self.y_max - self.y_min) + self.y_min;
        let x = (col + 0.5) / self.w as f64 * (self.x_max - self.x_min) + self.x_min;
        (x, y)
    }

    /// True if the world point lies inside the ROI rectangle.
    pub fn contains_world(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

/// Parameters of the Gaussian-like foreground mask. The construction is
/// center-style: a per-box radius from the minimum-overlap quadratics,
/// sigma = radius / sigma_divisor, truncated window, max-combine across
/// boxes, and values below `cutoff` zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub min_overlap: f64,
    pub sigma_divisor: f64,
    pub cutoff: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            min_overlap: 0.1,
            sigma_divisor: 3.0,
            cutoff: 1e-4,
        }
    }
}

/// H x W weight map over the grid, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMask {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl GaussianMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        GaussianMask {
            h,
            w,
            values: vec![0.0; h * w],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.w + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Center-style Gaussian radius in cells for a box's grid-projected extent:
/// the three minimum-overlap quadratics evaluated on the axis-aligned
/// bounding extent of the rotated box, floored at 1 cell.
pub fn gaussian_radius(b: &RotatedBox, g: &GridSpec, min_overlap: f64) -> f64 {
    let (s, c) = b.yaw.sin_cos();
    let ext_x = (c * b.length).abs() + (s * b.width).abs();
    let ext_y = (s * b.length).abs() + (c * b.width).abs();
    let width = ext_x / g.cell_w();
    let height = ext_y / g.cell_h();
    radius_for_extent(height, width, min_overlap).max(1.0)
}

/// Smallest of the three overlap-constraint roots, before the 1-cell floor.
pub fn radius_for_extent(height: f64, width: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;

    let a1 = 1.0;
    let b1 = height + width;
    let c1 = width * height * (1.0 - o) / (1.0 + o);
    let r1 = (b1 - (b1 * b1 - 4.0 * a1 * c1).sqrt()) / (2.0 * a1);

    let a2 = 4.0;
    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - o) * width * height;
    let r2 = (b2 - (b2 * b2 - 4.0 * a2 * c2).sqrt()) / (2.0 * a2);

    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (height + width);
    let c3 = (o - 1.0) * width * height;
    let r3 = (-b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / (2.0 * a3);

    r1.min(r2).min(r3)
}

/// Splats exp(-(dr^2 + dc^2) / (2 sigma^2)) with sigma = radius / divisor
/// over a (2 radius + 1)^2 window around the rounded center cell, combining
/// with the existing mask by elementwise max. Values below the cutoff are
/// zeroed. A center fully outside the grid is a no-op.
pub fn draw_gaussian(mask: &mut GaussianMask, center: (f64, f64), radius: f64, p: &MaskParams) {
    let ri = radius.floor().max(1.0) as i64;
    let cr = center.0.round() as i64;
    let cc = center.1.round() as i64;
    if cr < 0 || cr >= mask.h as i64 || cc < 0 || cc >= mask.w as i64 {
        return;
    }
    let sigma = radius / p.sigma_divisor;
    let denom = 2.0 * sigma * sigma;
    for dr in -ri..=ri {
        let r = cr + dr;
        if r < 0 || r >= mask.h as i64 {
            continue;
        }
        for dc in -ri..=ri {
            let c = cc + dc;
            if c < 0 || c >= mask.w as i64 {
                continue;
            }
            let mut v = (-((dr * dr + dc * dc) as f64) / denom).exp();
            if v < p.cutoff {
                v = 0.0;
            }
            let slot = &mut mask.values[r as usize * mask.w + c as usize];
            if v > *slot {
                *slot = v;
            }
        }
    }
}

/// One mask covering every box: per-box radius, max-combined splats.
pub fn boxes_mask(boxes: &[RotatedBox], g: &GridSpec, p: &MaskParams) -> GaussianMask {
    let mut mask = GaussianMask::zeros(g.h, g.w);
    for b in boxes {
        let radius = gaussian_radius(b, g, p.min_overlap);
        let (row, col, _) = g.world_to_grid(b.cx, b.cy);
        draw_gaussian(&mut mask, (row, col), radius, p);
    }
    mask
}
