//! Geometric distortions that move pixels and boxes but keep every label.

use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{BoundingBox, Raster, TableSample};
use crate::error::{Error, Result};

pub type Point = (f64, f64);

/// Row-major 3×3 projective matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub const IDENTITY: Homography = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    /// The map taking each `src[k]` to `dst[k]`, or `None` when the four
    /// correspondences do not determine one.
    pub fn from_points(src: &[Point; 4], dst: &[Point; 4]) -> Option<Homography> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut rhs = SVector::<f64, 8>::zeros();
        for (k, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
            let r = 2 * k;
            a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            rhs[r] = u;
            rhs[r + 1] = v;
        }
        let h = a.lu().solve(&rhs)?;
        let m = Homography([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0]);
        (m.det().abs() > 1e-12 && m.0.iter().all(|v| v.is_finite())).then_some(m)
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn inverse(&self) -> Option<Homography> {
        let m = SMatrix::<f64, 3, 3>::from_row_slice(&self.0);
        let inv = m.try_inverse()?;
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = inv[(r, c)];
            }
        }
        Some(Homography(out))
    }

    pub fn apply(&self, (x, y): Point) -> Option<Point> {
        let m = &self.0;
        let w = m[6] * x + m[7] * y + m[8];
        if w.abs() < 1e-12 {
            return None;
        }
        Some(((m[0] * x + m[1] * y + m[2]) / w, (m[3] * x + m[4] * y + m[5]) / w))
    }
}

fn is_convex(q: &[Point; 4]) -> bool {
    let cross = |k: usize| {
        let (a, b, c) = (q[k], q[(k + 1) % 4], q[(k + 2) % 4]);
        (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0)
    };
    let signs: Vec<f64> = (0..4).map(cross).collect();
    signs.iter().all(|&s| s > 0.0) || signs.iter().all(|&s| s < 0.0)
}

/// Image corners moved by uniform jitter in `[-j, j]` per coordinate; the
/// image is resampled through the inverse map and each box becomes the
/// bounding rectangle of its four mapped corners.
pub fn distort_perspective(s: &TableSample, jitter: f64, seed: u64) -> Result<TableSample> {
    let (w, h) = (s.image.width as f64, s.image.height as f64);
    if !(jitter >= 0.0 && jitter < w.min(h) / 4.0) {
        return Err(Error::contract(format!(
            "corner jitter {jitter} must lie in [0, {})",
            w.min(h) / 4.0
        )));
    }
    if jitter == 0.0 {
        return Ok(s.clone());
    }
    let src = [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..10 {
        let dst = src.map(|(x, y)| (x + rng.random_range(-jitter..=jitter), y + rng.random_range(-jitter..=jitter)));
        if !is_convex(&dst) {
            continue;
        }
        let Some(fwd) = Homography::from_points(&src, &dst) else {
            continue;
        };
        let Some(inv) = fwd.inverse() else {
            continue;
        };
        if let Some(out) = apply_homography(s, &fwd, &inv) {
            return Ok(out);
        }
    }
    Err(Error::Numerical(
        "perspective distortion produced a degenerate mapping 10 times in a row".into(),
    ))
}

/// Warps `s` by `fwd`, resampling with `inv`; `None` if a box corner maps to
/// infinity.
pub fn apply_homography(s: &TableSample, fwd: &Homography, inv: &Homography) -> Option<TableSample> {
    let img = &s.image;
    let mut out = Raster::new(img.width, img.height, 255);
    for y in 0..img.height {
        for x in 0..img.width {
            let v = inv
                .apply((x as f64, y as f64))
                .and_then(|(sx, sy)| img.sample_bilinear(sx, sy))
                .unwrap_or(255.0);
            out.set(x, y, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    let (w, h) = (img.width as f64, img.height as f64);
    let mut elements = s.elements.clone();
    for e in &mut elements {
        let pts: Vec<Point> = e.bbox.corners().iter().map(|&p| fwd.apply(p)).collect::<Option<_>>()?;
        let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
        let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
        e.bbox = BoundingBox::from_corners(x0, y0, x1, y1).clipped(w, h);
    }
    Some(TableSample {
        image: out,
        elements,
        relations: s.relations.clone(),
    })
}

/// `(1−t)²P0 + 2t(1−t)P1 + t²P2`.
pub fn bezier_point(p: &[Point; 3], t: f64) -> Point {
    let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
    (
        a * p[0].0 + b * p[1].0 + c * p[2].0,
        a * p[0].1 + b * p[1].1 + c * p[2].1,
    )
}

/// Per-row quadratic curve bending: each image row `y` follows the curve
/// through `(0, y)`, `M + (0, b)` and `(W−1, y)`, where `M` is where the row
/// meets the axis line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BezierWarp {
    pub axis_point: Point,
    pub axis_dir: Point,
    pub b: f64,
    pub width: usize,
}

impl BezierWarp {
    /// Axis through a random point in the middle half of the image, tilted up
    /// to 30° from vertical.
    pub fn random(axis_seed: u64, width: usize, height: usize, b: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(axis_seed);
        let (w, h) = (width as f64, height as f64);
        let px = rng.random_range(0.25 * w..=0.75 * w);
        let py = rng.random_range(0.25 * h..=0.75 * h);
        let angle: f64 = rng.random_range(-0.5..=0.5);
        BezierWarp {
            axis_point: (px, py),
            axis_dir: (angle.sin(), angle.cos()),
            b,
            width,
        }
    }

    /// Intersection of row `y` with the axis; the row midpoint when the axis
    /// runs parallel to the rows.
    pub fn intersection(&self, y: f64) -> Point {
        let last = self.width.saturating_sub(1) as f64;
        let (px, py) = self.axis_point;
        let (dx, dy) = self.axis_dir;
        if dy.abs() < 1e-12 {
            return (0.5 * last, y);
        }
        ((px + (y - py) * dx / dy).clamp(0.0, last), y)
    }

    pub fn control_points(&self, y: f64) -> [Point; 3] {
        let last = self.width.saturating_sub(1) as f64;
        let m = self.intersection(y);
        [(0.0, y), (m.0, m.1 + self.b), (last, y)]
    }

    /// Curve parameter whose abscissa is `x` on row `y`.
    pub fn parameter_at(&self, x: f64, y: f64) -> f64 {
        let last = self.width.saturating_sub(1) as f64;
        let mx = self.intersection(y).0;
        // x(t) = (last − 2·mx)t² + 2·mx·t is monotone on [0, 1].
        let a = last - 2.0 * mx;
        let denom = mx + (mx * mx + a * x).max(0.0).sqrt();
        if denom <= 0.0 {
            0.0
        } else {
            (x / denom).clamp(0.0, 1.0)
        }
    }

    /// Vertical displacement of the pixel at `(x, y)`.
    pub fn displacement(&self, x: f64, y: f64) -> f64 {
        let t = self.parameter_at(x, y);
        bezier_point(&self.control_points(y), t).1 - y
    }
}

pub fn distort_bezier(s: &TableSample, axis_seed: u64, b: f64) -> Result<TableSample> {
    let (wi, hi) = (s.image.width, s.image.height);
    if !(b.abs() < hi as f64 / 4.0) {
        return Err(Error::contract(format!(
            "curve offset {b} must satisfy |b| < {}",
            hi as f64 / 4.0
        )));
    }
    let warp = BezierWarp::random(axis_seed, wi, hi, b);
    Ok(apply_bezier(s, &warp))
}

pub fn apply_bezier(s: &TableSample, warp: &BezierWarp) -> TableSample {
    let img = &s.image;
    let (wi, hi) = (img.width, img.height);
    let mut splat: Vec<Option<u8>> = vec![None; wi * hi];
    for y in 0..hi {
        for x in 0..wi {
            let ty = (y as f64 + warp.displacement(x as f64, y as f64)).round();
            if ty >= 0.0 && ty < hi as f64 {
                splat[ty as usize * wi + x] = Some(img.get(x, y));
            }
        }
    }
    let mut out = Raster::new(wi, hi, 255);
    for x in 0..wi {
        for y in 0..hi {
            let v = splat[y * wi + x].or_else(|| {
                (1..hi).find_map(|k| {
                    let up = y.checked_sub(k).and_then(|yy| splat[yy * wi + x]);
                    let down = (y + k < hi).then(|| splat[(y + k) * wi + x]).flatten();
                    up.or(down)
                })
            });
            out.set(x, y, v.unwrap_or(255));
        }
    }
    let (w, h) = (wi as f64, hi as f64);
    let mut elements = s.elements.clone();
    for e in &mut elements {
        let dy = warp.displacement(e.bbox.x, e.bbox.y);
        e.bbox = BoundingBox { y: e.bbox.y + dy, ..e.bbox }.clipped(w, h);
    }
    TableSample {
        image: out,
        elements,
        relations: s.relations.clone(),
    }
}
