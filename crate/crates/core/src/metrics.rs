//! Generative evaluation: JSD over voxelised marginals, coverage and minimum
//! matching distance, completion diversity (TMD) and fidelity (UHD).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{PartitionedCloud, PointCloud};
use crate::distances::{chamfer_indexed_with, emd_exact, uhd, Reduction};
use crate::error::{Error, Result};
use crate::generation::complete;
use crate::model::HyperPocket;
use crate::seed;

pub const DEFAULT_GRID: usize = 28;
/// Clouds are subsampled to this many points before exact EMD.
pub const DEFAULT_EMD_POINTS: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Cd,
    Emd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jsd {
    pub value: f64,
    /// Points that fell outside `[-1, 1]^3` and were moved to a boundary voxel.
    pub clamped: usize,
}

fn histogram(set: &[PointCloud], grid: usize, clamped: &mut usize) -> Vec<f64> {
    let mut h = vec![0.0; grid * grid * grid];
    let mut total = 0usize;
    for cloud in set {
        for p in cloud.points() {
            let mut idx = 0;
            for &c in p {
                if !(-1.0..=1.0).contains(&c) {
                    *clamped += 1;
                }
                let cell = (((c + 1.0) * 0.5 * grid as f64).floor().max(0.0) as usize).min(grid - 1);
                idx = idx * grid + cell;
            }
            h[idx] += 1.0;
            total += 1;
        }
    }
    h.iter_mut().for_each(|v| *v /= total as f64);
    h
}

/// Jensen-Shannon divergence (natural log) between the pooled point
/// distributions of two sets over `grid^3` voxels spanning `[-1, 1]^3`.
pub fn jsd(generated: &[PointCloud], reference: &[PointCloud], grid: usize) -> Result<Jsd> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::invalid("jsd needs two non-empty sets"));
    }
    if grid == 0 {
        return Err(Error::invalid("grid must be positive"));
    }
    let mut clamped = 0;
    let p = histogram(generated, grid, &mut clamped);
    let q = histogram(reference, grid, &mut clamped);
    if clamped > 0 {
        log::warn!("jsd: {clamped} coordinates outside [-1, 1] were clamped");
    }
    // 0 log 0 = 0; M > 0 wherever either side has mass
    let mut value = 0.0;
    for (a, b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        if *a > 0.0 {
            value += 0.5 * a * (a / m).ln();
        }
        if *b > 0.0 {
            value += 0.5 * b * (b / m).ln();
        }
    }
    // summation round-off can leave the value a few ulps outside its range
    Ok(Jsd {
        value: value.clamp(0.0, std::f64::consts::LN_2),
        clamped,
    })
}

/// Evenly strided subsample of at most `n` points.
pub fn subsample(cloud: &PointCloud, n: usize) -> PointCloud {
    let len = cloud.len();
    if len <= n {
        return cloud.clone();
    }
    let idx: Vec<usize> = (0..n).map(|i| i * len / n).collect();
    cloud.select(&idx).expect("indices in range")
}

/// `D(generated[i], reference[j])` for every pair. CD is mean-reduced; EMD
/// runs on `emd_points`-point subsamples.
pub fn distance_matrix(
    generated: &[PointCloud],
    reference: &[PointCloud],
    kind: DistanceKind,
    emd_points: usize,
) -> Result<Vec<Vec<f64>>> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::invalid("coverage and mmd need non-empty sets"));
    }
    let prep = |s: &[PointCloud]| -> Vec<PointCloud> {
        match kind {
            DistanceKind::Cd => s.to_vec(),
            DistanceKind::Emd => s.iter().map(|c| subsample(c, emd_points)).collect(),
        }
    };
    let (g, r) = (prep(generated), prep(reference));
    g.par_iter()
        .map(|x| {
            r.iter()
                .map(|y| match kind {
                    DistanceKind::Cd => Ok(chamfer_indexed_with(x, y, Reduction::Mean)),
                    DistanceKind::Emd => emd_exact(x, y),
                })
                .collect()
        })
        .collect()
}

fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v < row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of references that are the nearest reference of some generated
/// cloud.
pub fn coverage_from_matrix(d: &[Vec<f64>]) -> f64 {
    let n_ref = d[0].len();
    let mut hit = vec![false; n_ref];
    for row in d {
        hit[argmin(row)] = true;
    }
    hit.iter().filter(|h| **h).count() as f64 / n_ref as f64
}

/// Mean over references of the distance to the closest generated cloud.
pub fn mmd_from_matrix(d: &[Vec<f64>]) -> f64 {
    let n_ref = d[0].len();
    (0..n_ref)
        .map(|j| d.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / n_ref as f64
}

pub fn coverage(generated: &[PointCloud], reference: &[PointCloud], kind: DistanceKind) -> Result<f64> {
    Ok(coverage_from_matrix(&distance_matrix(generated, reference, kind, DEFAULT_EMD_POINTS)?))
}

pub fn mmd(generated: &[PointCloud], reference: &[PointCloud], kind: DistanceKind) -> Result<f64> {
    Ok(mmd_from_matrix(&distance_matrix(generated, reference, kind, DEFAULT_EMD_POINTS)?))
}

/// Sum over completions of the mean (mean-reduced) Chamfer distance to the
/// other completions.
pub fn tmd(completions: &[PointCloud]) -> Result<f64> {
    let k = completions.len();
    if k < 2 {
        return Err(Error::invalid(format!("tmd needs at least 2 completions, got {k}")));
    }
    let mut pair = vec![0.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            let d = chamfer_indexed_with(&completions[i], &completions[j], Reduction::Mean);
            pair[i * k + j] = d;
            pair[j * k + i] = d;
        }
    }
    Ok((0..k)
        .map(|i| pair[i * k..(i + 1) * k].iter().sum::<f64>() / (k - 1) as f64)
        .sum())
}

/// Mean UHD from `partial` into each completion.
pub fn mean_uhd(partial: &PointCloud, completions: &[PointCloud]) -> Result<f64> {
    if completions.is_empty() {
        return Err(Error::invalid("no completions"));
    }
    Ok(completions.iter().map(|c| uhd(partial, c)).sum::<f64>() / completions.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub jsd: f64,
    pub jsd_clamped: usize,
    pub cov_cd: f64,
    pub cov_emd: f64,
    pub mmd_cd: f64,
    pub mmd_emd: f64,
    /// Absent when `k < 2`.
    pub tmd: Option<f64>,
    pub uhd: f64,
    pub k: usize,
    pub n_reference: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ElementMetrics {
    pub index: usize,
    pub source_id: String,
    pub tmd: Option<f64>,
    pub uhd: f64,
    /// Smallest mean-reduced CD from a completion to the element's full cloud.
    pub best_cd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub sigma: f64,
    pub n_points: usize,
    pub grid: usize,
    pub emd_points: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            sigma: crate::generation::DEFAULT_SIGMA,
            n_points: 2048,
            grid: DEFAULT_GRID,
            emd_points: DEFAULT_EMD_POINTS,
            seed: 0,
        }
    }
}

/// Completes every test element `k` times. JSD compares all completions
/// pooled against the full test clouds; COV and MMD use the first completion
/// of each element so both sets have the same size. TMD and UHD are computed
/// per element and averaged.
pub fn eval_generation(
    model: &HyperPocket,
    test_set: &[PartitionedCloud],
    cfg: &EvalConfig,
) -> Result<(MetricReport, Vec<ElementMetrics>)> {
    if test_set.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let smallest = test_set.iter().map(|s| s.full().len()).min().unwrap_or(0).min(cfg.n_points);
    if cfg.emd_points == 0 || cfg.emd_points > smallest {
        return Err(Error::invalid(format!(
            "emd_points must be between 1 and {smallest} (the smallest generated or reference cloud), got {}",
            cfg.emd_points
        )));
    }
    if cfg.k < 2 {
        log::warn!("k = {} leaves diversity undefined; tmd is reported as absent", cfg.k);
    }
    let completions: Vec<Vec<PointCloud>> = test_set
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = seed::indexed_stream(cfg.seed, "eval-gen", i as u64);
            complete(model, &s.existing, cfg.k, cfg.sigma, cfg.n_points, &mut rng)
        })
        .collect::<Result<_>>()?;
    let reference: Vec<PointCloud> = test_set.iter().map(|s| s.full()).collect();
    let elements: Vec<ElementMetrics> = test_set
        .par_iter()
        .zip(&completions)
        .enumerate()
        .map(|(index, (s, c))| {
            let full = &reference[index];
            Ok(ElementMetrics {
                index,
                source_id: s.source_id.clone(),
                tmd: if c.len() >= 2 { Some(tmd(c)?) } else { None },
                uhd: mean_uhd(&s.existing, c)?,
                best_cd: c
                    .iter()
                    .map(|x| chamfer_indexed_with(x, full, Reduction::Mean))
                    .fold(f64::INFINITY, f64::min),
            })
        })
        .collect::<Result<_>>()?;
    let pooled: Vec<PointCloud> = completions.iter().flatten().cloned().collect();
    let j = jsd(&pooled, &reference, cfg.grid)?;
    let firsts: Vec<PointCloud> = completions.iter().map(|c| c[0].clone()).collect();
    let d_cd = distance_matrix(&firsts, &reference, DistanceKind::Cd, cfg.emd_points)?;
    let d_emd = distance_matrix(&firsts, &reference, DistanceKind::Emd, cfg.emd_points)?;
    let n = elements.len() as f64;
    let report = MetricReport {
        jsd: j.value,
        jsd_clamped: j.clamped,
        cov_cd: coverage_from_matrix(&d_cd),
        cov_emd: coverage_from_matrix(&d_emd),
        mmd_cd: mmd_from_matrix(&d_cd),
        mmd_emd: mmd_from_matrix(&d_emd),
        tmd: (cfg.k >= 2).then(|| elements.iter().filter_map(|e| e.tmd).sum::<f64>() / n),
        uhd: elements.iter().map(|e| e.uhd).sum::<f64>() / n,
        k: cfg.k,
        n_reference: reference.len(),
    };
    Ok((report, elements))
}
