//! Equirectangular conventions, Manhattan room layouts, horizon-depth ground
//! truth and a synthetic panorama renderer.
//!
//! Coordinates: the camera sits at the origin of the floor plan `(x, z)`,
//! `y` points up. Column `u` of a `W`-wide panorama looks along longitude
//! `θ = (u + 0.5)/W·2π − π`, row `v` of an `H`-tall panorama along latitude
//! `φ = π/2 − (v + 0.5)/H·π`. A unit view ray is
//! `(cos φ cos θ, sin φ, cos φ sin θ)`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Camera height used by the generator unless configured otherwise.
pub const DEFAULT_CAMERA_HEIGHT: f64 = 1.6;

/// Longitude of the centre of column `u`.
#[inline]
pub fn column_longitude(u: usize, width: usize) -> f64 {
    (u as f64 + 0.5) / width as f64 * TAU - PI
}

/// Latitude of the centre of row `v`.
#[inline]
pub fn row_latitude(v: usize, height: usize) -> f64 {
    FRAC_PI_2 - (v as f64 + 0.5) / height as f64 * PI
}

/// Continuous row coordinate (row centres at integers) of a latitude.
#[inline]
pub fn latitude_to_row(lat: f64, height: usize) -> f64 {
    (FRAC_PI_2 - lat) / PI * height as f64 - 0.5
}

/// Continuous column coordinate (column centres at integers) of a longitude.
#[inline]
pub fn longitude_to_col(theta: f64, width: usize) -> f64 {
    (theta + PI) / TAU * width as f64 - 0.5
}

// ---------------------------------------------------------------------------
// Panorama
// ---------------------------------------------------------------------------

/// Row-major `H×W×3` equirectangular image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Panorama {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Panorama {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || width % 2 != 0 {
            return Err(Error::invalid(format!(
                "panorama must have positive size and even width, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "panorama {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite pixel value {bad}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width * 3]).expect("valid constant panorama")
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * 3);
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, v: usize, u: usize, c: usize) -> f64 {
        self.data[(v * self.width + u) * 3 + c]
    }

    /// Channel `c` as a contiguous `H×W` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Rebuilds an image from three `H×W` planes.
    pub fn from_channels(height: usize, width: usize, planes: &[Vec<f64>; 3]) -> Self {
        let mut data = vec![0.0; height * width * 3];
        for (c, plane) in planes.iter().enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                data[i * 3 + c] = v;
            }
        }
        Self::from_raw(height, width, data)
    }

    /// Exact circular column shift: `out[u] = in[(u − n) mod W]`, i.e. the
    /// scene turns by `+2πn/W` about the vertical axis.
    pub fn shift_cols(&self, n: usize) -> Self {
        let w = self.width;
        let n = n % w;
        let mut data = vec![0.0; self.data.len()];
        for v in 0..self.height {
            let row = &self.data[v * w * 3..(v + 1) * w * 3];
            let out = &mut data[v * w * 3..(v + 1) * w * 3];
            for u in 0..w {
                let src = (u + w - n) % w;
                out[u * 3..u * 3 + 3].copy_from_slice(&row[src * 3..src * 3 + 3]);
            }
        }
        Self::from_raw(self.height, w, data)
    }

    /// Left-right mirror: `out[u] = in[W − 1 − u]` (longitude `θ ↦ −θ`).
    pub fn mirror_cols(&self) -> Self {
        let w = self.width;
        let mut data = vec![0.0; self.data.len()];
        for v in 0..self.height {
            for u in 0..w {
                let src = (v * w + (w - 1 - u)) * 3;
                let dst = (v * w + u) * 3;
                data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        Self::from_raw(self.height, w, data)
    }

    /// Rounds every value through `f32`, matching the on-disk precision.
    pub fn quantize_f32(&self) -> Self {
        Self::from_raw(
            self.height,
            self.width,
            self.data.iter().map(|&v| v as f32 as f64).collect(),
        )
    }
}

// ---------------------------------------------------------------------------
// Room layouts
// ---------------------------------------------------------------------------

/// Manhattan floor plan around a camera at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct RoomLayout {
    corners: Vec<[f64; 2]>,
    camera_height: f64,
    room_height: f64,
}

impl RoomLayout {
    /// Builds a layout, enforcing all invariants: even vertex count ≥ 4,
    /// axis-aligned edges, simple counter-clockwise polygon strictly
    /// containing the origin, and `0 < camera_height < room_height`.
    pub fn new(corners: Vec<[f64; 2]>, camera_height: f64, room_height: f64) -> Result<Self> {
        let layout = Self {
            corners,
            camera_height,
            room_height,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// Axis-aligned rectangle `[x0, x1] × [z0, z1]`.
    pub fn rectangle(x0: f64, x1: f64, z0: f64, z1: f64, camera_height: f64, room_height: f64) -> Result<Self> {
        Self::new(
            vec![[x0, z0], [x1, z0], [x1, z1], [x0, z1]],
            camera_height,
            room_height,
        )
    }

    pub fn corners(&self) -> &[[f64; 2]] {
        &self.corners
    }

    pub fn camera_height(&self) -> f64 {
        self.camera_height
    }

    pub fn room_height(&self) -> f64 {
        self.room_height
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.corners)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.corners.len();
        if n < 4 || n % 2 != 0 {
            return Err(Error::invalid(format!(
                "layout needs an even vertex count >= 4, got {n}"
            )));
        }
        if !(self.camera_height > 0.0 && self.camera_height < self.room_height)
            || !self.room_height.is_finite()
        {
            return Err(Error::invalid(format!(
                "need 0 < camera_height ({}) < room_height ({})",
                self.camera_height, self.room_height
            )));
        }
        for (i, p) in self.corners.iter().enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::invalid(format!("vertex {i} is not finite")));
            }
            let q = self.corners[(i + 1) % n];
            let same_x = p[0] == q[0];
            let same_z = p[1] == q[1];
            if same_x == same_z {
                return Err(Error::invalid(format!(
                    "edge {i} is not axis-aligned (or has zero length)"
                )));
            }
        }
        if !is_simple(&self.corners) {
            return Err(Error::invalid("layout polygon self-intersects"));
        }
        if polygon_area(&self.corners) <= 0.0 {
            return Err(Error::invalid("layout polygon is not counter-clockwise"));
        }
        if !point_in_polygon(&self.corners, [0.0, 0.0])
            || boundary_distance(&self.corners, [0.0, 0.0]) <= 1e-9
        {
            return Err(Error::invalid("camera (origin) is not strictly inside the layout"));
        }
        Ok(())
    }
}

/// Signed shoelace area of a closed polygon in `(x, z)`; positive when
/// counter-clockwise.
pub fn polygon_area(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    let mut acc = 0.0;
    for i in 0..n {
        let p = points[i];
        let q = points[(i + 1) % n];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc
}

fn point_in_polygon(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn segment_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * d[0] - p[0], a[1] + t * d[1] - p[1]];
    q[0].hypot(q[1])
}

fn boundary_distance(poly: &[[f64; 2]], p: [f64; 2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| segment_distance(poly[i], poly[(i + 1) % n], p))
        .fold(f64::INFINITY, f64::min)
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_touch(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0)) && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0)) {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

fn is_simple(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        // Adjacent edges may only share their common vertex.
        let c = poly[(i + 2) % n];
        if orient(a, b, c) == 0.0 {
            let back = (c[0] - b[0]) * (a[0] - b[0]) + (c[1] - b[1]) * (a[1] - b[1]);
            if back > 0.0 {
                return false;
            }
        }
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            if segments_touch(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// First wall hit along floor-plane azimuth `theta`: `(distance, edge index)`.
pub fn ray_hit(layout: &RoomLayout, theta: f64) -> (f64, usize) {
    let (s, c) = theta.sin_cos();
    let poly = layout.corners();
    let n = poly.len();
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let t = if a[0] == b[0] {
            if c == 0.0 {
                continue;
            }
            let t = a[0] / c;
            let z = t * s;
            if z < a[1].min(b[1]) - 1e-12 || z > a[1].max(b[1]) + 1e-12 {
                continue;
            }
            t
        } else {
            if s == 0.0 {
                continue;
            }
            let t = a[1] / s;
            let x = t * c;
            if x < a[0].min(b[0]) - 1e-12 || x > a[0].max(b[0]) + 1e-12 {
                continue;
            }
            t
        };
        if t > 0.0 && t < best.0 {
            best = (t, i);
        }
    }
    debug_assert!(best.0.is_finite(), "ray from an interior point must hit the boundary");
    best
}

/// Horizontal distance from the camera to the wall along azimuth `theta`.
pub fn depth_at(layout: &RoomLayout, theta: f64) -> f64 {
    ray_hit(layout, theta).0
}

/// Per-column horizon depth for a `width`-column panorama.
pub fn horizon_depth(layout: &RoomLayout, width: usize) -> Vec<f64> {
    (0..width)
        .map(|u| depth_at(layout, column_longitude(u, width)))
        .collect()
}

/// Floor and ceiling boundary latitudes for each depth sample.
pub fn boundary_latitudes(depth: &[f64], camera_height: f64, room_height: f64) -> (Vec<f64>, Vec<f64>) {
    let floor = depth.iter().map(|&d| (-camera_height / d).atan()).collect();
    let ceil = depth
        .iter()
        .map(|&d| ((room_height - camera_height) / d).atan())
        .collect();
    (floor, ceil)
}

/// Column holding the azimuth of a floor-plan point.
pub fn point_column(p: [f64; 2], width: usize) -> usize {
    let theta = p[1].atan2(p[0]);
    let u = ((theta + PI) / TAU * width as f64).floor() as isize;
    u.rem_euclid(width as isize) as usize
}

/// Supervision signal derived from a layout. Never stored; always recomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutTarget {
    pub depth: Vec<f64>,
    pub height: f64,
    pub camera_height: f64,
    pub lat_floor: Vec<f64>,
    pub lat_ceil: Vec<f64>,
    pub corner_cols: Vec<usize>,
}

impl LayoutTarget {
    pub fn from_layout(layout: &RoomLayout, width: usize) -> Self {
        let depth = horizon_depth(layout, width);
        let (lat_floor, lat_ceil) = boundary_latitudes(&depth, layout.camera_height, layout.room_height);
        let mut corner_cols: Vec<usize> = layout
            .corners()
            .iter()
            .map(|&p| point_column(p, width))
            .collect();
        corner_cols.sort_unstable();
        Self {
            depth,
            height: layout.room_height,
            camera_height: layout.camera_height,
            lat_floor,
            lat_ceil,
            corner_cols,
        }
    }

    pub fn width(&self) -> usize {
        self.depth.len()
    }
}

// ---------------------------------------------------------------------------
// Layout transforms
// ---------------------------------------------------------------------------

/// Scales the floor plan: `(x, z) ↦ (k_x·x, k_z·z)`, heights unchanged.
pub fn stretch_layout(layout: &RoomLayout, k_x: f64, k_z: f64) -> Result<RoomLayout> {
    for k in [k_x, k_z] {
        if !(0.5..=2.0).contains(&k) {
            return Err(Error::invalid(format!("stretch factor {k} outside [0.5, 2]")));
        }
    }
    RoomLayout::new(
        layout.corners.iter().map(|p| [k_x * p[0], k_z * p[1]]).collect(),
        layout.camera_height,
        layout.room_height,
    )
}

/// Rotates the floor plan by `r` radians about the vertical axis (a point at
/// azimuth `θ` moves to `θ + r`). Only multiples of π/2 keep the layout
/// Manhattan, so other angles are rejected; quarter turns are exact.
pub fn rotate_layout(layout: &RoomLayout, r: f64) -> Result<RoomLayout> {
    if !(0.0..TAU).contains(&r) {
        return Err(Error::invalid(format!("rotation {r} outside [0, 2π)")));
    }
    let quarters = r / FRAC_PI_2;
    let q = quarters.round();
    if (quarters - q).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "rotation {r} is not a multiple of π/2; Manhattan layouts only admit quarter turns"
        )));
    }
    Ok(rotate_layout_quarters(layout, q as usize))
}

/// Exact rotation by `quarters · π/2`.
pub fn rotate_layout_quarters(layout: &RoomLayout, quarters: usize) -> RoomLayout {
    let corners = layout
        .corners
        .iter()
        .map(|&[x, z]| match quarters % 4 {
            0 => [x, z],
            1 => [-z, x],
            2 => [-x, -z],
            _ => [z, -x],
        })
        .collect();
    RoomLayout {
        corners,
        camera_height: layout.camera_height,
        room_height: layout.room_height,
    }
}

/// Mirror matching a left-right image flip: azimuth `θ ↦ −θ`, i.e.
/// `z ↦ −z`, with vertex order reversed to stay counter-clockwise.
pub fn flip_layout(layout: &RoomLayout) -> RoomLayout {
    let corners = layout.corners.iter().rev().map(|&[x, z]| [x, -z]).collect();
    RoomLayout {
        corners,
        camera_height: layout.camera_height,
        room_height: layout.room_height,
    }
}

/// Floor-plan polygon `p_u = depth[u]·(cos θ_u, sin θ_u)` in column order.
pub fn depth_to_polygon(depth: &[f64]) -> Vec<[f64; 2]> {
    let w = depth.len();
    depth
        .iter()
        .enumerate()
        .map(|(u, &d)| {
            let (s, c) = column_longitude(u, w).sin_cos();
            [d * c, d * s]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Procedural rooms
// ---------------------------------------------------------------------------

/// Room generator ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub min_size: f64,
    pub max_size: f64,
    pub min_room_height: f64,
    pub max_room_height: f64,
    pub camera_height: f64,
    pub l_shape_prob: f64,
    pub camera_margin: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            min_size: 2.0,
            max_size: 8.0,
            min_room_height: 2.4,
            max_room_height: 3.5,
            camera_height: DEFAULT_CAMERA_HEIGHT,
            l_shape_prob: 0.4,
            camera_margin: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_size > 0.0
            && self.min_size <= self.max_size
            && self.min_room_height <= self.max_room_height
            && self.camera_height > 0.0
            && self.camera_height < self.min_room_height
            && (0.0..=1.0).contains(&self.l_shape_prob)
            && self.camera_margin >= 0.0
            && 2.0 * self.camera_margin < self.min_size;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid generator ranges: {self:?}")))
        }
    }
}

const CAMERA_ATTEMPTS: usize = 100;
const ROOM_ATTEMPTS: usize = 1000;

/// Draws a random Manhattan room (cuboid or L-shape) with the camera at the
/// origin. Deterministic per `seed`.
pub fn generate_room(seed: u64, cfg: &GenConfig) -> Result<RoomLayout> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, Stream::Room, 0);
    for _ in 0..ROOM_ATTEMPTS {
        let w = rng.random_range(cfg.min_size..=cfg.max_size);
        let d = rng.random_range(cfg.min_size..=cfg.max_size);
        let room_height = rng.random_range(cfg.min_room_height..=cfg.max_room_height);
        let l_shape = rng.random::<f64>() < cfg.l_shape_prob;
        let mut poly = if l_shape {
            let cw = rng.random_range(0.3..=0.7) * w;
            let cd = rng.random_range(0.3..=0.7) * d;
            vec![
                [0.0, 0.0],
                [w, 0.0],
                [w, d - cd],
                [w - cw, d - cd],
                [w - cw, d],
                [0.0, d],
            ]
        } else {
            vec![[0.0, 0.0], [w, 0.0], [w, d], [0.0, d]]
        };
        if l_shape {
            let quarters = rng.random_range(0..4usize);
            poly = poly
                .into_iter()
                .map(|[x, z]| match quarters {
                    0 => [x, z],
                    1 => [-z, x],
                    2 => [-x, -z],
                    _ => [z, -x],
                })
                .collect();
        }
        let (x_lo, x_hi) = poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[0]), b.max(p[0])));
        let (z_lo, z_hi) = poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[1]), b.max(p[1])));
        let m = cfg.camera_margin;
        for _ in 0..CAMERA_ATTEMPTS {
            let cx = rng.random_range(x_lo + m..=x_hi - m);
            let cz = rng.random_range(z_lo + m..=z_hi - m);
            let cam = [cx, cz];
            if !point_in_polygon(&poly, cam) || boundary_distance(&poly, cam) < m.max(1e-6) {
                continue;
            }
            let corners = poly.iter().map(|p| [p[0] - cx, p[1] - cz]).collect();
            if let Ok(layout) = RoomLayout::new(corners, cfg.camera_height, room_height) {
                return Ok(layout);
            }
        }
    }
    Err(Error::invalid(format!(
        "room generation failed after {ROOM_ATTEMPTS} attempts for seed {seed}"
    )))
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Appearance parameters of a synthetic room.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneStyle {
    pub wall_colors: Vec<[f64; 3]>,
    pub floor_color: [f64; 3],
    pub ceiling_color: [f64; 3],
    /// Fraction of brightness lost from the foot of a wall to its top.
    pub light_strength: f64,
    /// Cycles per metre along the wall and up the wall.
    pub texture_freq: [f64; 2],
    pub texture_amp: f64,
    /// Cycles per metre of the floor stripes.
    pub floor_freq: f64,
    /// Camera response: colour `x` is recorded as `(exposure·x)^gamma[c]`.
    pub exposure: f64,
    pub gamma: [f64; 3],
    pub noise_sigma: f64,
}

/// Multiplier for the last ceiling row above a wall and the last wall row
/// above the floor.
const BOUNDARY_SHADE: f64 = 0.85;

impl SceneStyle {
    /// Random style for a room with `n_walls` walls. Ceilings are pale, floors
    /// darker and warmer, walls anywhere in a mid-to-bright range.
    pub fn sample(seed: u64, n_walls: usize, noise_sigma: f64) -> Self {
        let mut rng = rng::stream(seed, Stream::Style, 0);
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..0.75));
        let wall_colors = (0..n_walls)
            .map(|_| {
                let jitter = rng.random_range(0.9..1.0);
                std::array::from_fn(|c| (base[c] * jitter + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0))
            })
            .collect();
        let f = rng.random_range(0.15..0.28);
        let floor_color = [f * 1.15, f * 0.9, f * 0.7].map(|v: f64| v.clamp(0.0, 1.0));
        let g = rng.random_range(0.85..0.97);
        let ceiling_color = [g, g, g * rng.random_range(0.95..1.0)];
        Self {
            wall_colors,
            floor_color,
            ceiling_color,
            light_strength: rng.random_range(0.25..0.4),
            texture_freq: [rng.random_range(0.2..0.8), rng.random_range(0.1..0.4)],
            texture_amp: rng.random_range(0.0..0.05),
            floor_freq: rng.random_range(1.0..3.0),
            exposure: rng.random_range(0.5..1.1),
            gamma: {
                let g = rng.random_range(0.6..1.6);
                std::array::from_fn(|_| g * rng.random_range(0.85..1.15))
            },
            noise_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let colors_ok = self
            .wall_colors
            .iter()
            .chain([&self.floor_color, &self.ceiling_color])
            .all(|c| c.iter().all(|v| (0.0..=1.0).contains(v)));
        let response_ok = self.exposure > 0.0 && self.gamma.iter().all(|g| *g > 0.0);
        if !colors_ok || !response_ok || self.wall_colors.is_empty() || !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid(
                "scene style colors must be in [0,1], exposure and gamma positive, noise sigma >= 0",
            ));
        }
        Ok(())
    }
}

/// Surface label of a pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Ceiling,
    Floor,
    Wall(usize),
}

/// Per-pixel surface classification by ray casting (row-major `H×W`).
pub fn classify_pixels(layout: &RoomLayout, height: usize, width: usize) -> Vec<Surface> {
    let mut labels = Vec::with_capacity(height * width);
    let hits: Vec<(f64, usize)> = (0..width)
        .map(|u| ray_hit(layout, column_longitude(u, width)))
        .collect();
    let (lat_floor, lat_ceil): (Vec<f64>, Vec<f64>) = {
        let depth: Vec<f64> = hits.iter().map(|h| h.0).collect();
        boundary_latitudes(&depth, layout.camera_height, layout.room_height)
    };
    for v in 0..height {
        let phi = row_latitude(v, height);
        for u in 0..width {
            labels.push(if phi > lat_ceil[u] {
                Surface::Ceiling
            } else if phi < lat_floor[u] {
                Surface::Floor
            } else {
                Surface::Wall(hits[u].1)
            });
        }
    }
    labels
}

/// Renders the room as seen from the camera.
pub fn render_panorama(layout: &RoomLayout, style: &SceneStyle, height: usize, width: usize, seed: u64) -> Result<Panorama> {
    layout.validate()?;
    style.validate()?;
    if height < 2 || width < 2 || width % 2 != 0 {
        return Err(Error::invalid(format!("bad panorama size {height}x{width}")));
    }
    let labels = classify_pixels(layout, height, width);
    let hits: Vec<(f64, usize)> = (0..width)
        .map(|u| ray_hit(layout, column_longitude(u, width)))
        .collect();
    let cam = layout.camera_height;
    let room_h = layout.room_height;
    let n_walls = style.wall_colors.len();
    let mut data = vec![0.0; height * width * 3];
    for v in 0..height {
        let phi = row_latitude(v, height);
        let tan_phi = phi.tan();
        for u in 0..width {
            let theta = column_longitude(u, width);
            let (s, c) = theta.sin_cos();
            let label = labels[v * width + u];
            let color = match label {
                Surface::Ceiling => {
                    let r = (room_h - cam) / tan_phi;
                    let fall = 1.0 - 0.05 * (r / (r + 3.0));
                    style.ceiling_color.map(|x| x * fall)
                }
                Surface::Floor => {
                    let r = cam / -tan_phi;
                    let (x, z) = (r * c, r * s);
                    // falloff keeps floor brightness monotone in distance; faint
                    // stripes fade out before they would alias near the horizon
                    let fall = 0.7 + 0.3 * (-r / 2.0).exp();
                    let amp = 0.03 * (-r / 1.5).exp();
                    let stripe = 1.0 + amp * (TAU * style.floor_freq * (0.8 * x + 0.6 * z)).sin();
                    style.floor_color.map(|f| f * fall * stripe)
                }
                Surface::Wall(edge) => {
                    let t = hits[u].0;
                    let y = cam + t * tan_phi;
                    let corners = layout.corners();
                    let a = corners[edge];
                    let along = if a[0] == corners[(edge + 1) % corners.len()][0] { t * s } else { t * c };
                    let light = 1.0 - style.light_strength * (y / room_h);
                    let tex = 1.0
                        + style.texture_amp
                            * (TAU * style.texture_freq[0] * along).sin()
                            * (TAU * style.texture_freq[1] * y).cos();
                    style.wall_colors[edge % n_walls].map(|w| w * light * tex)
                }
            };
            // The band sits on the brighter side of each edge (the last ceiling
            // row, the last wall row) and the palette keeps it brighter than
            // the far side, so every edge is a monotone step per channel.
            let below = (v + 1 < height).then(|| labels[(v + 1) * width + u]);
            let band = matches!(
                (label, below),
                (Surface::Ceiling, Some(Surface::Wall(_))) | (Surface::Wall(_), Some(Surface::Floor))
            );
            let color = if band { color.map(|x| x * BOUNDARY_SHADE) } else { color };
            let color: [f64; 3] = std::array::from_fn(|c| (style.exposure * color[c]).min(1.0).powf(style.gamma[c]));
            let base = (v * width + u) * 3;
            data[base..base + 3].copy_from_slice(&color);
        }
    }
    if style.noise_sigma > 0.0 {
        let mut rng = rng::stream(seed, Stream::Render, 0);
        let normal = Normal::new(0.0, style.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for x in data.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    for x in data.iter_mut() {
        *x = x.clamp(0.0, 1.0);
    }
    Panorama::new(height, width, data)
}

// ---------------------------------------------------------------------------
// Boundary location
// ---------------------------------------------------------------------------

/// Per-column boundary edges. Edge `e` lies between rows `e − 1` and `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryEdges {
    pub ceiling: Vec<usize>,
    pub floor: Vec<usize>,
}

/// Analytic edges: the ceiling edge is the first row not above `lat_ceil`,
/// the floor edge the first row below `lat_floor`.
pub fn boundary_edges_from_latitudes(lat_floor: &[f64], lat_ceil: &[f64], height: usize) -> BoundaryEdges {
    let count = |pred: &dyn Fn(f64) -> bool| (0..height).filter(|&v| pred(row_latitude(v, height))).count();
    BoundaryEdges {
        ceiling: lat_ceil.iter().map(|&lc| count(&|phi| phi > lc)).collect(),
        floor: lat_floor.iter().map(|&lf| count(&|phi| phi >= lf)).collect(),
    }
}

/// Image-space boundary locator: per column, the strongest vertical colour
/// step in the upper half (ceiling) and the lower half (floor).
pub fn locate_boundaries(img: &Panorama) -> BoundaryEdges {
    let (h, w) = (img.height(), img.width());
    let half = h / 2;
    let mut ceiling = Vec::with_capacity(w);
    let mut floor = Vec::with_capacity(w);
    for u in 0..w {
        let step = |v: usize| -> f64 { (0..3).map(|c| (img.get(v + 1, u, c) - img.get(v, u, c)).abs()).sum() };
        let argmax = |range: std::ops::Range<usize>| {
            let mut best = (f64::NEG_INFINITY, range.start);
            for v in range {
                let g = step(v);
                if g > best.0 {
                    best = (g, v);
                }
            }
            best.1 + 1
        };
        ceiling.push(argmax(0..half));
        floor.push(argmax(half - 1..h - 1));
    }
    BoundaryEdges { ceiling, floor }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(half: f64) -> RoomLayout {
        RoomLayout::rectangle(-half, half, -half, half, 1.6, 3.0).unwrap()
    }

    #[test]
    fn square_depths() {
        let sq = square(2.0);
        assert!((depth_at(&sq, 0.0) - 2.0).abs() < 1e-12);
        assert!((depth_at(&sq, PI / 4.0) - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn latitude_examples() {
        let (f, c) = boundary_latitudes(&[1.6], 1.6, 3.2);
        assert!((f[0] + PI / 4.0).abs() < 1e-15);
        assert!((c[0] - PI / 4.0).abs() < 1e-15);
        let (f, c) = boundary_latitudes(&[1.0, 10.0, 100.0, 1e6], 1.6, 3.0);
        for i in 1..4 {
            assert!(f[i] > f[i - 1] && c[i] < c[i - 1]);
        }
        assert!(f[3].abs() < 1e-5 && c[3].abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_layouts() {
        // clockwise
        assert!(RoomLayout::new(vec![[-1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [1.0, -1.0]], 1.6, 3.0).is_err());
        // origin outside
        assert!(RoomLayout::rectangle(1.0, 2.0, -1.0, 1.0, 1.6, 3.0).is_err());
        // diagonal edge
        assert!(RoomLayout::new(vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 2.0]], 1.6, 3.0).is_err());
        // camera above ceiling
        assert!(RoomLayout::rectangle(-1.0, 1.0, -1.0, 1.0, 3.0, 2.0).is_err());
        // odd count
        assert!(RoomLayout::new(vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0]], 1.6, 3.0).is_err());
        // self-intersecting bow-tie made of axis-aligned edges
        let bow = vec![
            [-2.0, -1.0],
            [2.0, -1.0],
            [2.0, 1.0],
            [1.0, 1.0],
            [1.0, -2.0],
            [-1.0, -2.0],
            [-1.0, 1.0],
            [-2.0, 1.0],
        ];
        assert!(RoomLayout::new(bow, 1.6, 3.0).is_err());
    }

    #[test]
    fn transforms() {
        let sq = square(2.0);
        assert_eq!(stretch_layout(&sq, 1.0, 1.0).unwrap(), sq);
        let st = stretch_layout(&sq, 2.0, 1.0).unwrap();
        assert!((depth_at(&st, 0.0) - 4.0).abs() < 1e-12);
        assert!((depth_at(&st, PI / 2.0) - 2.0).abs() < 1e-12);
        assert!(stretch_layout(&sq, 2.5, 1.0).is_err());
        assert!(stretch_layout(&sq, 1.0, 0.4).is_err());

        let l = generate_room(11, &GenConfig::default()).unwrap();
        let back = rotate_layout(&rotate_layout(&l, FRAC_PI_2).unwrap(), 3.0 * FRAC_PI_2).unwrap();
        for (a, b) in back.corners().iter().zip(l.corners()) {
            assert!((a[0] - b[0]).abs() <= 1e-12 && (a[1] - b[1]).abs() <= 1e-12);
        }
        assert!(rotate_layout(&l, 0.3).is_err());
        assert!(rotate_layout(&l, -FRAC_PI_2).is_err());
        assert!(flip_layout(&l).validate().is_ok());
        assert_eq!(flip_layout(&flip_layout(&l)), l);
    }

    #[test]
    fn flip_mirrors_depth() {
        let l = generate_room(5, &GenConfig::default()).unwrap();
        let w = 64;
        let d = horizon_depth(&l, w);
        let f = horizon_depth(&flip_layout(&l), w);
        for u in 0..w {
            assert!((f[u] - d[w - 1 - u]).abs() < 1e-12);
        }
    }

    #[test]
    fn target_consistency() {
        let l = generate_room(3, &GenConfig::default()).unwrap();
        let t = LayoutTarget::from_layout(&l, 128);
        for u in 0..128 {
            assert!(t.depth[u] > 0.0);
            assert!(t.lat_floor[u] < 0.0 && t.lat_ceil[u] > 0.0);
            assert!(((-t.lat_floor[u]).tan() * t.depth[u] - l.camera_height()).abs() < 1e-9);
            assert!((t.lat_ceil[u].tan() * t.depth[u] - (l.room_height() - l.camera_height())).abs() < 1e-9);
        }
        assert_eq!(t.corner_cols.len(), l.corners().len());
    }

    #[test]
    fn constant_depth_polygon_is_regular() {
        let poly = depth_to_polygon(&[1.5; 64]);
        for p in &poly {
            assert!((p[0].hypot(p[1]) - 1.5).abs() < 1e-12);
        }
        let exact = 0.5 * 64.0 * 1.5f64.powi(2) * (TAU / 64.0).sin();
        assert!((polygon_area(&poly) - exact).abs() < 1e-9);
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let l = generate_room(8, &GenConfig::default()).unwrap();
        let style = SceneStyle::sample(8, l.corners().len(), 0.0);
        let a = render_panorama(&l, &style, 32, 64, 1).unwrap();
        let b = render_panorama(&l, &style, 32, 64, 1).unwrap();
        assert_eq!(a, b);
        let noisy = SceneStyle { noise_sigma: 0.05, ..style };
        let c = render_panorama(&l, &noisy, 32, 64, 1).unwrap();
        assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn image_shift_and_mirror() {
        let data: Vec<f64> = (0..4 * 8 * 3).map(|i| i as f64 / 96.0).collect();
        let img = Panorama::new(4, 8, data).unwrap();
        assert_eq!(img.shift_cols(4).shift_cols(4), img);
        assert_eq!(img.shift_cols(3).get(1, 3, 2), img.get(1, 0, 2));
        assert_eq!(img.mirror_cols().mirror_cols(), img);
        assert_eq!(img.mirror_cols().get(2, 0, 1), img.get(2, 7, 1));
    }
}
