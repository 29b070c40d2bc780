//! Ground-truth initial-pressure phantoms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::PressureImage;
use crate::{PatError, Result};

/// Binary raster, row-major. Any nonzero source pixel counts as vessel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    /// Builds a mask from a 2D raster given as `(shape, values)`.
    pub fn from_raster<T: Copy + Default + PartialEq>(shape: &[usize], values: &[T]) -> Result<Self> {
        if shape.len() != 2 {
            return Err(PatError::InvalidArgument(format!(
                "mask must be 2D, got {} dimensions",
                shape.len()
            )));
        }
        let (height, width) = (shape[0], shape[1]);
        if values.len() != height * width {
            return Err(PatError::shape(height * width, values.len()));
        }
        Ok(Self {
            width,
            height,
            data: values.iter().map(|&v| v != T::default()).collect(),
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Quadrant `q` (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right)
    /// of size `floor(h / 2) x floor(w / 2)`.
    pub fn quadrant(&self, q: usize) -> BinaryMask {
        let (h, w) = (self.height / 2, self.width / 2);
        let (r0, c0) = ((q / 2) * h, (q % 2) * w);
        let mut out = BinaryMask::new(h, w);
        for r in 0..h {
            for c in 0..w {
                out.set(r, c, self.get(r0 + r, c0 + c));
            }
        }
        out
    }

    /// Nearest-neighbour resample, which keeps the raster binary.
    pub fn resample_nearest(&self, height: usize, width: usize) -> BinaryMask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = BinaryMask::new(height, width);
        for r in 0..height {
            let sr = ((r as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for c in 0..width {
                let sc = ((c as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                out.set(r, c, self.get(sr.min(self.height - 1), sc.min(self.width - 1)));
            }
        }
        out
    }

    /// Counter-clockwise rotation by `quarter_turns * 90` degrees. Square only.
    pub fn rotated(&self, quarter_turns: usize) -> BinaryMask {
        assert_eq!(self.width, self.height, "rotation needs a square raster");
        let mut cur = self.clone();
        for _ in 0..quarter_turns % 4 {
            let n = cur.width;
            let mut next = BinaryMask::new(n, n);
            for r in 0..n {
                for c in 0..n {
                    // ccw: destination (r, c) takes source (c, n - 1 - r)
                    next.set(r, c, cur.get(c, n - 1 - r));
                }
            }
            cur = next;
        }
        cur
    }
}

/// One quadrant pick of the vessel composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadrantDraw {
    pub quadrant: usize,
    pub quarter_turns: usize,
}

/// The two `(quadrant, rotation)` picks made for `seed`, in draw order:
/// quadrant 1, rotation 1, quadrant 2, rotation 2, each uniform over `0..4`
/// from a ChaCha8 stream seeded with `seed`.
pub fn composition_draws(seed: u64) -> [QuadrantDraw; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || QuadrantDraw {
        quadrant: rng.random_range(0..4),
        quarter_turns: rng.random_range(0..4),
    };
    [draw(), draw()]
}

/// Vessel phantom of size `size x size` built from a full vessel mask.
///
/// The mask is cut into four equal quadrants; two are drawn with replacement,
/// each rotated by an independent multiple of 90 degrees, and the pair is
/// merged by pixelwise maximum. Quadrants whose size differs from `size` are
/// resampled with nearest neighbour first.
pub fn compose_vessel_phantom(mask: &BinaryMask, seed: u64, size: usize) -> Result<PressureImage> {
    if mask.count() == 0 {
        return Err(PatError::EmptyMask);
    }
    if mask.height < 2 || mask.width < 2 || size == 0 {
        return Err(PatError::InvalidArgument(format!(
            "cannot cut a {}x{} mask into {size}x{size} quadrants",
            mask.height, mask.width
        )));
    }
    let mut out = PressureImage::zeros(size, size);
    for d in composition_draws(seed) {
        let q = mask
            .quadrant(d.quadrant)
            .resample_nearest(size, size)
            .rotated(d.quarter_turns);
        for (o, &v) in out.values.iter_mut().zip(&q.data) {
            if v {
                *o = 1.0;
            }
        }
    }
    let peak = out.max_abs();
    if peak > 0.0 {
        out.values.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(out)
}

/// Image with value 1 on every pixel within `radius` of a center, 0 elsewhere.
/// Centers are `(row, col)`.
pub fn point_phantom(
    height: usize,
    width: usize,
    centers: &[(usize, usize)],
    radius: usize,
) -> Result<PressureImage> {
    let mut img = PressureImage::zeros(height, width);
    let r2 = (radius * radius) as isize;
    let rad = radius as isize;
    for &(cr, cc) in centers {
        if cr >= height || cc >= width {
            return Err(PatError::InvalidArgument(format!(
                "center ({cr}, {cc}) outside the {height}x{width} grid"
            )));
        }
        for dr in -rad..=rad {
            for dc in -rad..=rad {
                if dr * dr + dc * dc > r2 {
                    continue;
                }
                let (r, c) = (cr as isize + dr, cc as isize + dc);
                if (0..height as isize).contains(&r) && (0..width as isize).contains(&c) {
                    img.set(r as usize, c as usize, 1.0);
                }
            }
        }
    }
    Ok(img)
}

/// Default nine-point layout: five targets at depth 1/3 (columns k/6,
/// k = 1..5) and four at depth 2/3 staggered halfway between (columns
/// (k + 1/2)/6, k = 1..4).
pub fn nine_point_centers(height: usize, width: usize) -> Vec<(usize, usize)> {
    let row = |f: f64| (f * height as f64).round() as usize;
    let col = |f: f64| (f * width as f64).round() as usize;
    let mut v: Vec<(usize, usize)> = (1..=5).map(|k| (row(1.0 / 3.0), col(k as f64 / 6.0))).collect();
    v.extend((1..=4).map(|k| (row(2.0 / 3.0), col((k as f64 + 0.5) / 6.0))));
    v
}

/// Controls for [`procedural_vessel_mask`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VesselParams {
    /// Number of random walks (1..=64).
    pub branches: usize,
    /// Steps per walk (1..=4096).
    pub steps: usize,
    /// Step length in pixels, (0, 16].
    pub step_length: f64,
    /// Stamp diameter in pixels (1..=8).
    pub thickness: usize,
    /// Standard deviation of the heading change per step, radians (0..=0.5).
    pub turn_std: f64,
    /// Probability that a new walk starts on an existing one.
    pub branch_probability: f64,
    /// Mask edge length in pixels.
    pub size: usize,
}

impl Default for VesselParams {
    fn default() -> Self {
        Self {
            branches: 14,
            steps: 70,
            step_length: 2.5,
            thickness: 3,
            turn_std: 0.12,
            branch_probability: 0.6,
            size: 256,
        }
    }
}

impl VesselParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PatError::InvalidArgument(m));
        if !(1..=64).contains(&self.branches) {
            return bad(format!("branches must be in 1..=64, got {}", self.branches));
        }
        if !(1..=4096).contains(&self.steps) {
            return bad(format!("steps must be in 1..=4096, got {}", self.steps));
        }
        if !(self.step_length > 0.0 && self.step_length <= 16.0) {
            return bad(format!("step_length must be in (0, 16], got {}", self.step_length));
        }
        if !(1..=8).contains(&self.thickness) {
            return bad(format!("thickness must be in 1..=8, got {}", self.thickness));
        }
        if !(0.0..=0.5).contains(&self.turn_std) {
            return bad(format!("turn_std must be in [0, 0.5], got {}", self.turn_std));
        }
        if !(0.0..=1.0).contains(&self.branch_probability) {
            return bad("branch_probability must be in [0, 1]".into());
        }
        if self.size < 32 {
            return bad(format!("size must be at least 32, got {}", self.size));
        }
        Ok(())
    }
}

fn stamp(mask: &mut BinaryMask, x: f64, y: f64, thickness: usize) {
    let r = thickness as f64 / 2.0;
    let (cr, cc) = (y.round() as isize, x.round() as isize);
    let reach = (thickness / 2) as isize;
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            if ((dr * dr + dc * dc) as f64) > r * r && (dr, dc) != (0, 0) {
                continue;
            }
            let (rr, cc2) = (cr + dr, cc + dc);
            if (0..mask.height as isize).contains(&rr) && (0..mask.width as isize).contains(&cc2) {
                mask.set(rr as usize, cc2 as usize, true);
            }
        }
    }
}

/// Seeded branching random walks rasterized into a `size x size` mask.
///
/// Walks start uniformly inside the central 3/4 of the raster, or, with
/// probability `branch_probability`, at a random point of an earlier walk
/// with a heading turned 30 to 60 degrees off its parent. The heading changes
/// by a clamped normal increment each step and a walk stops when it leaves
/// the raster. Segments are stamped every half pixel.
pub fn procedural_vessel_mask(seed: u64, params: &VesselParams) -> Result<BinaryMask> {
    params.validate()?;
    let n = params.size;
    let mut mask = BinaryMask::new(n, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let turn = Normal::new(0.0, params.turn_std.max(1e-12))
        .map_err(|e| PatError::InvalidArgument(e.to_string()))?;
    // (x, y, heading) of visited points, for branching
    let mut visited: Vec<(f64, f64, f64)> = Vec::new();
    let lo = n as f64 / 8.0;
    let hi = n as f64 * 7.0 / 8.0;
    for _ in 0..params.branches {
        let (mut x, mut y, mut heading) =
            if !visited.is_empty() && rng.random::<f64>() < params.branch_probability {
                let (px, py, ph) = visited[rng.random_range(0..visited.len())];
                let off = rng.random_range(std::f64::consts::FRAC_PI_6..std::f64::consts::FRAC_PI_3);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                (px, py, ph + sign * off)
            } else {
                (
                    rng.random_range(lo..hi),
                    rng.random_range(lo..hi),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            };
        stamp(&mut mask, x, y, params.thickness);
        for _ in 0..params.steps {
            let dh: f64 = turn.sample(&mut rng);
            heading += dh.clamp(-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4);
            let nx = x + params.step_length * heading.cos();
            let ny = y + params.step_length * heading.sin();
            if !(0.0..=(n - 1) as f64).contains(&nx) || !(0.0..=(n - 1) as f64).contains(&ny) {
                break;
            }
            let sub = (params.step_length / 0.5).ceil() as usize;
            for k in 1..=sub {
                let f = k as f64 / sub as f64;
                stamp(&mut mask, x + f * (nx - x), y + f * (ny - y), params.thickness);
            }
            x = nx;
            y = ny;
            visited.push((x, y, heading));
        }
    }
    Ok(mask)
}
