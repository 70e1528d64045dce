//! Point clouds, noise sampling, rigid transforms and existing/missing splits.

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// A non-empty multiset of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { points })
    }

    /// Builds a cloud from an `n x 3` matrix.
    pub fn from_array(a: ArrayView2<'_, f64>) -> Result<Self> {
        if a.ncols() != 3 {
            return Err(Error::shape(format!("expected n x 3, got {:?}", a.shape())));
        }
        Self::new(a.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect())
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.points.len(), 3), |(i, j)| self.points[i][j])
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(norm).fold(0.0, f64::max)
    }

    /// Concatenates two clouds, `self` first.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        PointCloud { points }
    }

    pub fn translated(&self, t: Point) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}

pub fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(p: &Point) -> f64 {
    dot(p, p).sqrt()
}

pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Coordinate axis. `Y` is the vertical axis throughout the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn unit(self) -> Point {
        match self {
            Axis::X => [1.0, 0.0, 0.0],
            Axis::Y => [0.0, 1.0, 0.0],
            Axis::Z => [0.0, 0.0, 1.0],
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::invalid(format!("unknown axis {other:?}"))),
        }
    }
}

/// A plane `normal . x = offset` with a unit normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlane {
    pub normal: Point,
    pub offset: f64,
}

impl SplitPlane {
    pub fn new(normal: Point, offset: f64) -> Result<Self> {
        if !offset.is_finite() || (norm(&normal) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split plane needs a unit normal and finite offset, got {normal:?} / {offset}"
            )));
        }
        Ok(Self { normal, offset })
    }
}

/// A cloud split into an existing (visible) and a missing part.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedCloud {
    pub existing: PointCloud,
    pub missing: PointCloud,
    pub plane: SplitPlane,
    pub source_id: String,
}

impl PartitionedCloud {
    /// The source cloud reassembled as `existing ++ missing`.
    pub fn full(&self) -> PointCloud {
        self.existing.concat(&self.missing)
    }
}

/// Centers the cloud at the origin and scales it so the farthest point has norm 1.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    let c = cloud.centroid();
    let centered = cloud.translated([-c[0], -c[1], -c[2]]);
    let scale = centered.max_norm();
    let magnitude = cloud
        .points
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale <= 1e-12 * (1.0 + magnitude) {
        return Err(Error::DegenerateCloud);
    }
    Ok(PointCloud {
        points: centered
            .points
            .into_iter()
            .map(|p| p.map(|v| v / scale))
            .collect(),
    })
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Point {
    loop {
        let v: Point = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = norm(&v);
        if n > 1e-12 {
            return v.map(|c| c / n);
        }
    }
}

/// `n` points uniform on the unit sphere (normalized Gaussians).
pub fn sample_sphere_surface<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("cannot sample zero points"));
    }
    PointCloud::new((0..n).map(|_| random_direction(rng)).collect())
}

/// Noise for the target network, interpolating between the sphere
/// (`alpha = 0`) and the uniform unit ball (`alpha = 1`): the radius is
/// `1 - alpha * (1 - U^(1/3))`.
pub fn sample_ball_interior<R: Rng + ?Sized>(
    n: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("cannot sample zero points"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let points = (0..n)
        .map(|_| {
            let d = random_direction(rng);
            let u: f64 = rng.random();
            let r = 1.0 - alpha * (1.0 - u.cbrt());
            d.map(|c| c * r)
        })
        .collect();
    PointCloud::new(points)
}

/// Splits at the median projection onto `normal`: the lower `n / 2` points
/// (ties by input index) are missing, the rest existing. Both parts keep the
/// input order.
pub fn split_by_normal(cloud: &PointCloud, normal: Point, source_id: &str) -> Result<PartitionedCloud> {
    let n = cloud.len();
    if n < 2 {
        return Err(Error::invalid(format!("splitting needs at least 2 points, got {n}")));
    }
    let proj: Vec<f64> = cloud.points.iter().map(|p| dot(p, &normal)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
    let n_missing = n / 2;
    let offset = if n % 2 == 0 {
        0.5 * (proj[order[n_missing - 1]] + proj[order[n_missing]])
    } else {
        proj[order[n_missing]]
    };
    let mut is_missing = vec![false; n];
    for &i in &order[..n_missing] {
        is_missing[i] = true;
    }
    let (mut existing, mut missing) = (Vec::with_capacity(n - n_missing), Vec::with_capacity(n_missing));
    for (p, m) in cloud.points.iter().zip(is_missing) {
        if m {
            missing.push(*p);
        } else {
            existing.push(*p);
        }
    }
    Ok(PartitionedCloud {
        existing: PointCloud::new(existing)?,
        missing: PointCloud::new(missing)?,
        plane: SplitPlane::new(normal, offset)?,
        source_id: source_id.to_string(),
    })
}

/// Equal-halves split along a uniformly random plane normal.
pub fn split_random_plane<R: Rng + ?Sized>(
    cloud: &PointCloud,
    source_id: &str,
    rng: &mut R,
) -> Result<PartitionedCloud> {
    if cloud.len() < 2 {
        return Err(Error::invalid(format!(
            "splitting needs at least 2 points, got {}",
            cloud.len()
        )));
    }
    split_by_normal(cloud, random_direction(rng), source_id)
}

/// Deterministic left/right split across the plane orthogonal to `axis`.
pub fn split_left_right(cloud: &PointCloud, axis: Axis, source_id: &str) -> Result<PartitionedCloud> {
    split_by_normal(cloud, axis.unit(), source_id)
}

/// Rotation by `angle` radians about the vertical (y) axis.
pub fn rotate_vertical(cloud: &PointCloud, angle: f64) -> PointCloud {
    let (s, c) = angle.sin_cos();
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]])
            .collect(),
    }
}

/// Draws `n` points: without replacement when `n <= |cloud|`, with
/// replacement otherwise.
pub fn resample<R: Rng + ?Sized>(cloud: &PointCloud, n: usize, rng: &mut R) -> Result<PointCloud> {
    let len = cloud.len();
    if n == 0 {
        return Err(Error::invalid("cannot resample to zero points"));
    }
    let points = if n <= len {
        index::sample(rng, len, n)
            .into_iter()
            .map(|i| cloud.points[i])
            .collect()
    } else {
        (0..n).map(|_| cloud.points[rng.random_range(0..len)]).collect()
    };
    Ok(PointCloud { points })
}
