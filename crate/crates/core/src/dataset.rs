//! Synthetic parametric shape corpus and its on-disk layout.
//!
//! Every shape is a union of box, cylinder, frustum and disk surfaces,
//! sampled uniformly by area and normalized to the unit sphere. A corpus
//! directory holds `manifest.json`, one `clouds/<id>.xyz` file per sample
//! and, optionally, a `demo/` scene for floor adaptation.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{
    normalize_unit_sphere, resample, split_by_normal, split_left_right, split_random_plane, Axis, PartitionedCloud, Point,
    PointCloud, SplitPlane,
};
use crate::error::{Error, Result};
use crate::generation::View;
use crate::io::{format_plane, format_xyz, quantize, read_xyz};
use crate::seed;
use crate::training::TrainSample;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLOUD_DIR: &str = "clouds";
pub const DEMO_DIR: &str = "demo";
/// Random planes stored per train/val sample.
pub const PLANES_PER_SAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    BoxLid,
    CylinderLamp,
    Chair,
    Table,
    Plane,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::BoxLid,
        Family::CylinderLamp,
        Family::Chair,
        Family::Table,
        Family::Plane,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::BoxLid => "box_lid",
            Family::CylinderLamp => "cylinder_lamp",
            Family::Chair => "chair",
            Family::Table => "table",
            Family::Plane => "plane",
        }
    }

    /// `(name, min, max)` for every shape parameter, in vector order.
    pub fn param_ranges(self) -> &'static [(&'static str, f64, f64)] {
        match self {
            Family::BoxLid => &[
                ("width", 0.6, 1.2),
                ("depth", 0.6, 1.2),
                ("height", 0.3, 0.9),
                ("lid_thickness", 0.03, 0.08),
                ("lid_overhang", 0.0, 0.08),
            ],
            Family::CylinderLamp => &[
                ("base_radius", 0.2, 0.4),
                ("base_height", 0.03, 0.08),
                ("pole_radius", 0.015, 0.04),
                ("pole_height", 0.5, 1.1),
                ("shade_bottom_radius", 0.2, 0.45),
                ("shade_top_radius", 0.08, 0.25),
                ("shade_height", 0.15, 0.4),
            ],
            Family::Chair => &[
                ("seat_width", 0.4, 0.6),
                ("seat_depth", 0.4, 0.6),
                ("seat_thickness", 0.04, 0.08),
                ("leg_length", 0.35, 0.6),
                ("back_height", 0.3, 0.6),
                ("leg_thickness", 0.03, 0.06),
            ],
            Family::Table => &[
                ("top_width", 0.8, 1.6),
                ("top_depth", 0.5, 1.0),
                ("top_thickness", 0.03, 0.08),
                ("leg_length", 0.5, 0.8),
                ("leg_thickness", 0.04, 0.09),
            ],
            Family::Plane => &[
                ("fuselage_length", 1.2, 2.0),
                ("fuselage_radius", 0.06, 0.12),
                ("wing_span", 1.0, 1.8),
                ("wing_chord", 0.2, 0.4),
                ("tail_span", 0.3, 0.6),
                ("fin_height", 0.15, 0.3),
            ],
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape family {s:?}")))
    }
}

/// A family together with concrete parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: Family,
    pub params: Vec<f64>,
}

impl ShapeSpec {
    pub fn new(family: Family, params: Vec<f64>) -> Result<Self> {
        let ranges = family.param_ranges();
        if params.len() != ranges.len() {
            return Err(Error::invalid(format!(
                "{} takes {} parameters, got {}",
                family.name(),
                ranges.len(),
                params.len()
            )));
        }
        for (&v, &(name, lo, hi)) in params.iter().zip(ranges) {
            if !(lo..=hi).contains(&v) {
                return Err(Error::invalid(format!("{}: {name} = {v} outside [{lo}, {hi}]", family.name())));
            }
        }
        Ok(Self { family, params })
    }

    pub fn random<R: Rng + ?Sized>(family: Family, rng: &mut R) -> Self {
        let params = family
            .param_ranges()
            .iter()
            .map(|&(_, lo, hi)| rng.random_range(lo..=hi))
            .collect();
        Self { family, params }
    }

    /// Every parameter at the midpoint of its range.
    pub fn midpoint(family: Family) -> Self {
        let params = family.param_ranges().iter().map(|&(_, lo, hi)| 0.5 * (lo + hi)).collect();
        Self { family, params }
    }

    fn primitives(&self) -> Vec<Primitive> {
        let p = &self.params;
        match self.family {
            Family::BoxLid => {
                let (w, d, h, t, o) = (p[0], p[1], p[2], p[3], p[4]);
                vec![
                    Primitive::cuboid([0.0, h / 2.0, 0.0], [w, h, d]),
                    Primitive::cuboid([0.0, h + t / 2.0, 0.0], [w + 2.0 * o, t, d + 2.0 * o]),
                ]
            }
            Family::CylinderLamp => {
                let (rb, hb, rp, hp, rs0, rs1, hs) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);
                let top = hb + hp;
                vec![
                    Primitive::Cylinder {
                        center: [0.0, hb / 2.0, 0.0],
                        axis: Axis::Y,
                        radius: rb,
                        length: hb,
                        caps: true,
                    },
                    Primitive::Cylinder {
                        center: [0.0, hb + hp / 2.0, 0.0],
                        axis: Axis::Y,
                        radius: rp,
                        length: hp,
                        caps: false,
                    },
                    Primitive::Frustum {
                        base: [0.0, top - hs, 0.0],
                        bottom_radius: rs0,
                        top_radius: rs1,
                        height: hs,
                    },
                    Primitive::Disk {
                        center: [0.0, top, 0.0],
                        radius: rs1,
                    },
                ]
            }
            Family::Chair => {
                let (w, d, st, ll, bh, lt) = (p[0], p[1], p[2], p[3], p[4], p[5]);
                let mut parts = legs(w, d, ll, lt);
                parts.push(Primitive::cuboid([0.0, ll + st / 2.0, 0.0], [w, st, d]));
                parts.push(Primitive::cuboid(
                    [0.0, ll + st + bh / 2.0, -d / 2.0 + lt / 2.0],
                    [w, bh, lt],
                ));
                parts
            }
            Family::Table => {
                let (w, d, tt, ll, lt) = (p[0], p[1], p[2], p[3], p[4]);
                let inset = 0.05;
                let mut parts = legs(w - 2.0 * inset, d - 2.0 * inset, ll, lt);
                parts.push(Primitive::cuboid([0.0, ll + tt / 2.0, 0.0], [w, tt, d]));
                parts
            }
            Family::Plane => {
                let (fl, fr, ws, wc, ts, fh) = (p[0], p[1], p[2], p[3], p[4], p[5]);
                let thickness = 0.03;
                let tail_z = -fl / 2.0 + 0.1;
                vec![
                    Primitive::Cylinder {
                        center: [0.0; 3],
                        axis: Axis::Z,
                        radius: fr,
                        length: fl,
                        caps: true,
                    },
                    Primitive::cuboid([0.0, 0.0, 0.1 * fl], [ws, thickness, wc]),
                    Primitive::cuboid([0.0, 0.0, tail_z], [ts, thickness, 0.6 * wc]),
                    Primitive::cuboid([0.0, fr + fh / 2.0, tail_z], [thickness, fh + fr, 0.6 * wc]),
                ]
            }
        }
    }
}

/// Four legs of thickness `lt` and length `ll` under a `w x d` footprint.
fn legs(w: f64, d: f64, ll: f64, lt: f64) -> Vec<Primitive> {
    let (x, z) = (w / 2.0 - lt / 2.0, d / 2.0 - lt / 2.0);
    [(-x, -z), (-x, z), (x, -z), (x, z)]
        .into_iter()
        .map(|(cx, cz)| Primitive::cuboid([cx, ll / 2.0, cz], [lt, ll, lt]))
        .collect()
}

/// Surface primitives; `Y` is vertical.
#[derive(Clone, Debug, PartialEq)]
enum Primitive {
    /// Axis-aligned box surface given by its center and full edge lengths.
    Cuboid { center: Point, size: Point },
    Cylinder {
        center: Point,
        axis: Axis,
        radius: f64,
        length: f64,
        caps: bool,
    },
    /// Open lateral surface of a vertical truncated cone.
    Frustum {
        base: Point,
        bottom_radius: f64,
        top_radius: f64,
        height: f64,
    },
    /// Horizontal disk.
    Disk { center: Point, radius: f64 },
}

impl Primitive {
    fn cuboid(center: Point, size: Point) -> Self {
        Primitive::Cuboid { center, size }
    }

    fn area(&self) -> f64 {
        match *self {
            Primitive::Cuboid { size: [a, b, c], .. } => 2.0 * (a * b + b * c + a * c),
            Primitive::Cylinder {
                radius, length, caps, ..
            } => TAU * radius * length + if caps { TAU * radius * radius } else { 0.0 },
            Primitive::Frustum {
                bottom_radius: r0,
                top_radius: r1,
                height,
                ..
            } => PI * (r0 + r1) * ((r0 - r1).powi(2) + height * height).sqrt(),
            Primitive::Disk { radius, .. } => PI * radius * radius,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        match *self {
            Primitive::Cuboid { center, size } => {
                let [a, b, c] = size;
                // faces normal to x, y, z come in pairs of areas b*c, a*c, a*b
                let faces = [b * c, a * c, a * b];
                let mut pick = rng.random::<f64>() * (faces[0] + faces[1] + faces[2]);
                let mut axis = 0;
                while axis < 2 && pick >= faces[axis] {
                    pick -= faces[axis];
                    axis += 1;
                }
                let mut p = [0.0; 3];
                for (k, slot) in p.iter_mut().enumerate() {
                    *slot = if k == axis {
                        if rng.random::<bool>() {
                            size[k] / 2.0
                        } else {
                            -size[k] / 2.0
                        }
                    } else {
                        (rng.random::<f64>() - 0.5) * size[k]
                    };
                }
                add(center, p)
            }
            Primitive::Cylinder {
                center,
                axis,
                radius,
                length,
                caps,
            } => {
                let side = TAU * radius * length;
                let cap = if caps { TAU * radius * radius } else { 0.0 };
                let (r, along) = if rng.random::<f64>() * (side + cap) < side {
                    (radius, (rng.random::<f64>() - 0.5) * length)
                } else {
                    let end = if rng.random::<bool>() { 0.5 } else { -0.5 };
                    (radius * rng.random::<f64>().sqrt(), end * length)
                };
                let theta = rng.random::<f64>() * TAU;
                let (s, c) = theta.sin_cos();
                let local = match axis {
                    Axis::X => [along, r * c, r * s],
                    Axis::Y => [r * c, along, r * s],
                    Axis::Z => [r * c, r * s, along],
                };
                add(center, local)
            }
            Primitive::Frustum {
                base,
                bottom_radius: r0,
                top_radius: r1,
                height,
            } => {
                // rejection on the height fraction: density proportional to radius
                let rmax = r0.max(r1);
                let t = loop {
                    let t: f64 = rng.random();
                    if rng.random::<f64>() * rmax <= r0 + (r1 - r0) * t {
                        break t;
                    }
                };
                let r = r0 + (r1 - r0) * t;
                let (s, c) = (rng.random::<f64>() * TAU).sin_cos();
                add(base, [r * c, t * height, r * s])
            }
            Primitive::Disk { center, radius } => {
                let r = radius * rng.random::<f64>().sqrt();
                let (s, c) = (rng.random::<f64>() * TAU).sin_cos();
                add(center, [r * c, 0.0, r * s])
            }
        }
    }
}

fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Samples `n_points` uniformly by area over the shape's surface and
/// normalizes the result to the unit sphere.
pub fn gen_shape<R: Rng + ?Sized>(spec: &ShapeSpec, n_points: usize, rng: &mut R) -> Result<PointCloud> {
    let spec = ShapeSpec::new(spec.family, spec.params.clone())?;
    if n_points == 0 {
        return Err(Error::invalid("cannot sample zero points"));
    }
    let prims = spec.primitives();
    let mut cumulative = Vec::with_capacity(prims.len());
    let mut total = 0.0;
    for p in &prims {
        total += p.area();
        cumulative.push(total);
    }
    let points = (0..n_points)
        .map(|_| {
            let x = rng.random::<f64>() * total;
            let k = cumulative.partition_point(|&c| c <= x).min(prims.len() - 1);
            prims[k].sample(rng)
        })
        .collect();
    normalize_unit_sphere(&PointCloud::new(points)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// How one stored partition is reproduced from the cloud.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PartitionRecord {
    Plane { normal: Point, offset: f64 },
    Axis { axis: Axis },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub family: Family,
    pub split: Split,
    pub params: Vec<f64>,
    /// Relative to the corpus root.
    pub cloud: String,
    pub partitions: Vec<PartitionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub full: String,
    pub existing: String,
    pub missing: String,
    pub floor: String,
    pub plane: String,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub families: Vec<Family>,
    pub train_per_family: usize,
    pub val_per_family: usize,
    pub test_per_family: usize,
    pub n_points: usize,
    pub seed: u64,
    /// Also write the chair-on-floor adaptation scene.
    pub demo: bool,
    /// Floor grid resolution per side for the demo scene.
    pub demo_floor_grid: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            train_per_family: 120,
            val_per_family: 20,
            test_per_family: 20,
            n_points: 2048,
            seed: 0,
            demo: true,
            demo_floor_grid: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub samples: Vec<ManifestEntry>,
    pub demo: Option<DemoRecord>,
}

impl CorpusManifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }

    pub fn summary(&self) -> String {
        let count = |s| self.entries(s).count();
        format!(
            "{} samples ({} train, {} val, {} test) across {} families, {} points each",
            self.samples.len(),
            count(Split::Train),
            count(Split::Val),
            count(Split::Test),
            self.config.families.len(),
            self.config.n_points
        )
    }
}

struct Built {
    entry: ManifestEntry,
    text: String,
}

fn build_entry(config: &CorpusConfig, family: Family, split: Split, index: usize) -> Result<Built> {
    let id = format!("{}-{}-{:04}", family.name(), split.name(), index);
    let mut rng = seed::stream(config.seed, &format!("corpus/{id}"));
    let spec = ShapeSpec::random(family, &mut rng);
    let cloud = quantize(&gen_shape(&spec, config.n_points, &mut rng)?);
    let partitions = match split {
        Split::Train | Split::Val => (0..PLANES_PER_SAMPLE)
            .map(|_| {
                let part = split_random_plane(&cloud, &id, &mut rng)?;
                Ok(PartitionRecord::Plane {
                    normal: part.plane.normal,
                    offset: part.plane.offset,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        Split::Test => vec![PartitionRecord::Axis { axis: Axis::X }],
    };
    Ok(Built {
        entry: ManifestEntry {
            cloud: format!("{CLOUD_DIR}/{id}.xyz"),
            id,
            family,
            split,
            params: spec.params,
            partitions,
        },
        text: format_xyz(&cloud),
    })
}

/// The floor-adaptation scene: a long-legged chair whose lower half is
/// missing, plus a grid of floor points under its footprint.
pub struct DemoScene {
    pub spec: ShapeSpec,
    pub full: PointCloud,
    pub partition: PartitionedCloud,
    pub floor: PointCloud,
}

pub fn demo_scene(seed: u64, n_points: usize, floor_grid: usize) -> Result<DemoScene> {
    if floor_grid < 2 {
        return Err(Error::invalid("floor grid needs at least 2 points per side"));
    }
    let mut spec = ShapeSpec::midpoint(Family::Chair);
    let (_, _, leg_max) = Family::Chair.param_ranges()[3];
    spec.params[3] = leg_max;
    let mut rng = seed::stream(seed, "corpus/demo");
    let full = quantize(&gen_shape(&spec, n_points, &mut rng)?);
    let partition = split_by_normal(&full, Axis::Y.unit(), "demo")?;
    let pts = full.points();
    let fold = |k: usize, f: fn(f64, f64) -> f64, init: f64| pts.iter().map(|p| p[k]).fold(init, f);
    let (x0, x1) = (fold(0, f64::min, f64::INFINITY), fold(0, f64::max, f64::NEG_INFINITY));
    let (z0, z1) = (fold(2, f64::min, f64::INFINITY), fold(2, f64::max, f64::NEG_INFINITY));
    let y = fold(1, f64::min, f64::INFINITY);
    let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (floor_grid - 1) as f64;
    let floor = (0..floor_grid)
        .flat_map(|i| (0..floor_grid).map(move |j| (i, j)))
        .map(|(i, j)| [step(x0, x1, i), y, step(z0, z1, j)])
        .collect();
    Ok(DemoScene {
        spec,
        full,
        partition,
        floor: quantize(&PointCloud::new(floor)?),
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Generates every sample and writes the corpus under `root`. The output is
/// a pure function of `config`.
pub fn build_corpus(config: &CorpusConfig, root: impl AsRef<Path>) -> Result<CorpusManifest> {
    let root = root.as_ref();
    if config.families.is_empty()
        || config.train_per_family == 0
        || config.val_per_family == 0
        || config.test_per_family == 0
    {
        return Err(Error::invalid("corpus needs at least one family and one sample per split"));
    }
    if config.n_points < 2 {
        return Err(Error::invalid("clouds need at least 2 points"));
    }
    let mut jobs = Vec::new();
    for &family in &config.families {
        for (split, count) in [
            (Split::Train, config.train_per_family),
            (Split::Val, config.val_per_family),
            (Split::Test, config.test_per_family),
        ] {
            jobs.extend((0..count).map(|i| (family, split, i)));
        }
    }
    let built = jobs
        .par_iter()
        .map(|&(family, split, i)| build_entry(config, family, split, i))
        .collect::<Result<Vec<_>>>()?;

    let clouds = root.join(CLOUD_DIR);
    fs::create_dir_all(&clouds).map_err(|e| Error::io(&clouds, e))?;
    for b in &built {
        write(&root.join(&b.entry.cloud), &b.text)?;
    }

    let demo = if config.demo {
        let scene = demo_scene(config.seed, config.n_points, config.demo_floor_grid)?;
        let dir = root.join(DEMO_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rel = |name: &str| format!("{DEMO_DIR}/{name}");
        let record = DemoRecord {
            full: rel("full.xyz"),
            existing: rel("existing.xyz"),
            missing: rel("missing.xyz"),
            floor: rel("floor.xyz"),
            plane: rel("plane.txt"),
            params: scene.spec.params.clone(),
        };
        write(&root.join(&record.full), &format_xyz(&scene.full))?;
        write(&root.join(&record.existing), &format_xyz(&scene.partition.existing))?;
        write(&root.join(&record.missing), &format_xyz(&scene.partition.missing))?;
        write(&root.join(&record.floor), &format_xyz(&scene.floor))?;
        write(&root.join(&record.plane), &format_plane(&scene.partition.plane))?;
        Some(record)
    } else {
        None
    };

    let manifest = CorpusManifest {
        config: config.clone(),
        samples: built.into_iter().map(|b| b.entry).collect(),
        demo,
    };
    write(&root.join(MANIFEST_FILE), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(manifest)
}

/// Applies stored partition `split_index` of `entry` to its cloud.
pub fn partition(entry: &ManifestEntry, cloud: &PointCloud, split_index: usize) -> Result<PartitionedCloud> {
    let record = entry
        .partitions
        .get(split_index)
        .ok_or_else(|| out_of_range(entry, split_index))?;
    match *record {
        PartitionRecord::Plane { normal, .. } => split_by_normal(cloud, normal, &entry.id),
        PartitionRecord::Axis { axis } => split_left_right(cloud, axis, &entry.id),
    }
}

fn out_of_range(entry: &ManifestEntry, split_index: usize) -> Error {
    Error::invalid(format!(
        "sample {} has {} partitions, index {split_index} requested",
        entry.id,
        entry.partitions.len()
    ))
}

/// A corpus directory opened for reading.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            manifest: serde_json::from_str(&text)?,
            root,
        })
    }

    pub fn entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.manifest.entries(split).collect()
    }

    pub fn load_cloud(&self, entry: &ManifestEntry) -> Result<PointCloud> {
        read_xyz(self.root.join(&entry.cloud))
    }

    /// Reads the cloud of `entry` and applies partition `split_index`.
    pub fn load_sample(&self, entry: &ManifestEntry, split_index: usize) -> Result<PartitionedCloud> {
        if split_index >= entry.partitions.len() {
            return Err(out_of_range(entry, split_index));
        }
        partition(entry, &self.load_cloud(entry)?, split_index)
    }

    /// Partition `split_index` of every sample in `split`, in manifest order.
    pub fn partitions(&self, split: Split, split_index: usize) -> Result<Vec<PartitionedCloud>> {
        self.manifest
            .entries(split)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|e| self.load_sample(e, split_index))
            .collect()
    }

    pub fn train_samples(&self) -> Result<Vec<TrainSample>> {
        self.entries(Split::Train)
            .par_iter()
            .map(|e| {
                let planes = e
                    .partitions
                    .iter()
                    .map(|p| match *p {
                        PartitionRecord::Plane { normal, offset } => SplitPlane::new(normal, offset),
                        PartitionRecord::Axis { axis } => SplitPlane::new(axis.unit(), 0.0),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TrainSample {
                    id: e.id.clone(),
                    cloud: self.load_cloud(e)?,
                    planes,
                })
            })
            .collect()
    }

    /// Two views of each of the first `limit` samples of `split`: the stored
    /// partition 0 (split id 0) and a front/back cut along `z` (split id 1).
    pub fn two_views(&self, split: Split, limit: Option<usize>) -> Result<Vec<View>> {
        let entries = self.entries(split);
        let n = limit.unwrap_or(entries.len()).min(entries.len());
        let pairs: Vec<[View; 2]> = entries[..n]
            .par_iter()
            .map(|e| {
                let cloud = self.load_cloud(e)?;
                let view = |split_id, cloud| View {
                    sample_id: e.id.clone(),
                    split_id,
                    cloud,
                };
                Ok([
                    view(0, partition(e, &cloud, 0)?),
                    view(1, split_left_right(&cloud, Axis::Z, &e.id)?),
                ])
            })
            .collect::<Result<_>>()?;
        Ok(pairs.into_iter().flatten().collect())
    }

    pub fn demo(&self) -> Result<(PartitionedCloud, PointCloud)> {
        let demo = self
            .manifest
            .demo
            .as_ref()
            .ok_or_else(|| Error::invalid("corpus has no demo scene"))?;
        let existing = read_xyz(self.root.join(&demo.existing))?;
        let missing = read_xyz(self.root.join(&demo.missing))?;
        let plane_path = self.root.join(&demo.plane);
        let text = fs::read_to_string(&plane_path).map_err(|e| Error::io(&plane_path, e))?;
        let plane = crate::io::parse_plane(&text, &plane_path)?;
        let floor = read_xyz(self.root.join(&demo.floor))?;
        Ok((
            PartitionedCloud {
                existing,
                missing,
                plane,
                source_id: "demo".into(),
            },
            floor,
        ))
    }
}

/// Per-family reference clouds for the mean-shape baseline: the training
/// clouds of each family pooled into one empirical distribution and
/// resampled to `n_points`. This is the average of the member clouds taken
/// as point measures.
pub fn family_mean_clouds(corpus: &Corpus, n_points: usize, seed: u64) -> Result<Vec<(Family, PointCloud)>> {
    corpus
        .manifest
        .config
        .families
        .iter()
        .map(|&family| {
            let mut pooled = Vec::new();
            for e in corpus.manifest.entries(Split::Train).filter(|e| e.family == family) {
                pooled.extend_from_slice(corpus.load_cloud(e)?.points());
            }
            let pooled = PointCloud::new(pooled)?;
            let mut rng = seed::stream(seed, &format!("baseline/{}", family.name()));
            Ok((family, resample(&pooled, n_points, &mut rng)?))
        })
        .collect()
}
