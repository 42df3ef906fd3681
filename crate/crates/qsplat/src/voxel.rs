//! Voxelization of Gaussian scenes and de-voxelization of per-voxel
//! predictions back to per-Gaussian values.
//!
//! Sampling uses the center shape: each Gaussian contributes exactly one
//! voxel, the grid cell containing its center. Cells are deduplicated in
//! first-occurrence order. Each unique voxel carries a feature vector
//! [cell center xyz, rgb, alpha * exp(-dist / 2)] where dist is the
//! Mahalanobis distance from the cell center to the Gaussian. Negative
//! cell coordinates are allowed; there is no origin shift.

use nalgebra::Vector3;
use rayon::prelude::*;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scene::{evaluate_color, GaussianPrimitive, GaussianScene};

/// Width of a composed voxel feature: xyz + rgb + opacity.
pub const VOXEL_FEATURE_LEN: usize = 7;

/// Unique voxels sampled from a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSet {
    /// Unique integer cells in first-occurrence order.
    pub cells: Vec<[i64; 3]>,
    /// One composed feature per unique cell.
    pub features: Vec<[f64; VOXEL_FEATURE_LEN]>,
    /// For each sampled voxel, the index of its unique cell.
    pub inverse: Vec<usize>,
    /// Sampled voxels per Gaussian; sums to `inverse.len()`.
    pub counts: Vec<usize>,
    /// Cell edge length in scene units.
    pub grid_size: f64,
}

impl VoxelSet {
    pub fn unique_len(&self) -> usize {
        self.cells.len()
    }
}

/// Reduction used when mapping voxel predictions back to Gaussians.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

impl Reduce {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduce::Mean),
            "max" => Ok(Reduce::Max),
            other => Err(Error::Parse(format!("unknown reduce mode '{other}'"))),
        }
    }
}

fn cell_of(center: &Vector3<f64>, grid_size: f64) -> [i64; 3] {
    [
        (center.x / grid_size).floor() as i64,
        (center.y / grid_size).floor() as i64,
        (center.z / grid_size).floor() as i64,
    ]
}

fn cell_center(cell: [i64; 3], grid_size: f64) -> Vector3<f64> {
    Vector3::new(
        (cell[0] as f64 + 0.5) * grid_size,
        (cell[1] as f64 + 0.5) * grid_size,
        (cell[2] as f64 + 0.5) * grid_size,
    )
}

/// Feature of one voxel sampled from one Gaussian:
/// [voxel center xyz, rgb at degree 0, alpha * exp(-dist / 2)] with
/// dist the Mahalanobis distance from the voxel center to the Gaussian.
pub fn compose_voxel_features(
    g: &GaussianPrimitive,
    voxel_xyz: Vector3<f64>,
) -> Result<[f64; VOXEL_FEATURE_LEN]> {
    let cov = g.covariance();
    let inv = cov
        .try_inverse()
        .ok_or_else(|| Error::Domain("singular covariance in voxel composition".into()))?;
    let d = voxel_xyz - g.center;
    let dist = (d.transpose() * inv * d)[(0, 0)];
    let rgb = evaluate_color(&g.sh_coeffs, &Vector3::new(0.0, 0.0, 1.0));
    let opacity = g.opacity * (-0.5 * dist).exp();
    Ok([
        voxel_xyz.x, voxel_xyz.y, voxel_xyz.z, rgb[0], rgb[1], rgb[2], opacity,
    ])
}

/// Sample one voxel per Gaussian (the cell containing its center),
/// deduplicate in first-occurrence order, and compose features. The
/// first Gaussian to claim a cell supplies its feature.
pub fn voxelize(scene: &GaussianScene, grid_size: f64) -> Result<VoxelSet> {
    if !(grid_size > 0.0) {
        return Err(Error::Domain(format!("grid size must be positive, got {grid_size}")));
    }
    let sampled: Vec<([i64; 3], [f64; VOXEL_FEATURE_LEN])> = scene
        .gaussians
        .par_iter()
        .map(|g| {
            let cell = cell_of(&g.center, grid_size);
            let feature = compose_voxel_features(g, cell_center(cell, grid_size))?;
            Ok((cell, feature))
        })
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    let mut features = Vec::new();
    let mut inverse = Vec::with_capacity(sampled.len());
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    for (cell, feature) in sampled {
        let id = *index.entry(cell).or_insert_with(|| {
            cells.push(cell);
            features.push(feature);
            cells.len() - 1
        });
        inverse.push(id);
    }
    Ok(VoxelSet {
        cells,
        features,
        inverse,
        counts: vec![1; scene.gaussians.len()],
        grid_size,
    })
}

/// Map per-unique-voxel predictions back to per-Gaussian predictions:
/// scatter through the inverse indices, then segment-reduce consecutive
/// runs of `counts` sampled voxels per Gaussian.
pub fn devoxelize(
    predictions: &[Vec<f64>],
    inverse: &[usize],
    counts: &[usize],
    reduce: Reduce,
) -> Result<Vec<Vec<f64>>> {
    let total: usize = counts.iter().sum();
    if total != inverse.len() {
        return Err(Error::Contract(format!(
            "counts sum to {total} but {} voxels were sampled",
            inverse.len()
        )));
    }
    if let Some(&bad) = inverse.iter().find(|&&i| i >= predictions.len()) {
        return Err(Error::Contract(format!(
            "inverse index {bad} out of range for {} predictions",
            predictions.len()
        )));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Contract("every Gaussian must sample at least one voxel".into()));
    }
    let channels = predictions.first().map_or(0, Vec::len);
    if predictions.iter().any(|p| p.len() != channels) {
        return Err(Error::Contract("ragged prediction rows".into()));
    }
    let mut offsets = Vec::with_capacity(counts.len() + 1);
    offsets.push(0usize);
    for &c in counts {
        offsets.push(offsets.last().expect("non-empty") + c);
    }
    let mut out = Vec::with_capacity(counts.len());
    for w in offsets.windows(2) {
        let seg = &inverse[w[0]..w[1]];
        let mut acc = predictions[seg[0]].clone();
        for &id in &seg[1..] {
            for (a, v) in acc.iter_mut().zip(&predictions[id]) {
                match reduce {
                    Reduce::Mean => *a += v,
                    Reduce::Max => *a = a.max(*v),
                }
            }
        }
        if reduce == Reduce::Mean {
            let n = seg.len() as f64;
            for a in &mut acc {
                *a /= n;
            }
        }
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SyntheticSceneSpec};
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_gaussian(center: Vector3<f64>, opacity: f64) -> GaussianPrimitive {
        GaussianPrimitive::new(
            center,
            Vector3::new(1.0, 1.0, 1.0),
            [1.0, 0.0, 0.0, 0.0],
            opacity,
            vec![[0.0, 0.0, 0.0]],
        )
        .unwrap()
    }

    fn random_scene(count: usize, seed: u64) -> GaussianScene {
        let spec = SyntheticSceneSpec {
            count,
            extent: 4.0,
            scale_range: (0.05, 0.3),
            opacity_range: (0.2, 0.9),
            clusters: 5,
            seed,
        };
        generate_scene(&spec).0
    }

    #[test]
    fn single_gaussian_at_origin() {
        let scene = GaussianScene::new(vec![unit_gaussian(Vector3::zeros(), 0.5)]);
        let vs = voxelize(&scene, 0.1).unwrap();
        assert_eq!(vs.cells, vec![[0, 0, 0]]);
        assert_eq!(vs.counts, vec![1]);
        assert_eq!(vs.inverse, vec![0]);
    }

    #[test]
    fn shared_cell_deduplicates() {
        let scene = GaussianScene::new(vec![
            unit_gaussian(Vector3::new(0.01, 0.02, 0.03), 0.5),
            unit_gaussian(Vector3::new(0.09, 0.01, 0.05), 0.7),
        ]);
        let vs = voxelize(&scene, 0.1).unwrap();
        assert_eq!(vs.unique_len(), 1);
        assert_eq!(vs.inverse, vec![0, 0]);
        // First occurrence supplies the feature.
        assert_abs_diff_eq!(
            vs.features[0][6],
            compose_voxel_features(&scene.gaussians[0], cell_center([0, 0, 0], 0.1)).unwrap()[6],
            epsilon = 0.0
        );
    }

    #[test]
    fn scatter_reproduces_assignment() {
        let scene = random_scene(1000, 11);
        let vs = voxelize(&scene, 0.25).unwrap();
        assert_eq!(vs.inverse.len(), 1000);
        for (g, &id) in vs.inverse.iter().enumerate() {
            let cell = cell_of(&scene.gaussians[g].center, 0.25);
            assert_eq!(vs.cells[id], cell);
        }
    }

    #[test]
    fn opacity_at_center_is_alpha() {
        let g = unit_gaussian(Vector3::new(1.0, -2.0, 3.0), 0.37);
        let f = compose_voxel_features(&g, g.center).unwrap();
        assert_abs_diff_eq!(f[6], 0.37, epsilon = 1e-15);
    }

    #[test]
    fn opacity_one_sigma_offset() {
        let g = unit_gaussian(Vector3::zeros(), 1.0 - 1e-9);
        let f = compose_voxel_features(&g, Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(f[6], (-0.5f64).exp(), epsilon = 1e-8);
    }

    #[test]
    fn anisotropic_scale_keeps_center_opacity() {
        let g = GaussianPrimitive::new(
            Vector3::new(0.3, 0.3, 0.3),
            Vector3::new(0.01, 5.0, 0.7),
            [1.0, 0.0, 0.0, 0.0],
            0.42,
            vec![[0.0, 0.0, 0.0]],
        )
        .unwrap();
        let f = compose_voxel_features(&g, g.center).unwrap();
        assert_abs_diff_eq!(f[6], 0.42, epsilon = 1e-12);
    }

    #[test]
    fn devoxelize_center_sampling_is_scatter() {
        let preds = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let inverse = vec![1, 0, 1];
        let counts = vec![1, 1, 1];
        for reduce in [Reduce::Mean, Reduce::Max] {
            let out = devoxelize(&preds, &inverse, &counts, reduce).unwrap();
            assert_eq!(out, vec![vec![3.0, 4.0], vec![1.0, 2.0], vec![3.0, 4.0]]);
        }
    }

    #[test]
    fn devoxelize_two_voxel_segment() {
        let preds = vec![vec![1.0, 2.0], vec![3.0, 0.0]];
        let inverse = vec![0, 1];
        let counts = vec![2];
        let max = devoxelize(&preds, &inverse, &counts, Reduce::Max).unwrap();
        assert_eq!(max, vec![vec![3.0, 2.0]]);
        let mean = devoxelize(&preds, &inverse, &counts, Reduce::Mean).unwrap();
        assert_eq!(mean, vec![vec![2.0, 1.0]]);
    }

    #[test]
    fn devoxelize_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let uniques = rng.gen_range(1..8usize);
            let preds: Vec<Vec<f64>> = (0..uniques)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let gaussians = rng.gen_range(1..6usize);
            let counts: Vec<usize> = (0..gaussians).map(|_| rng.gen_range(1..4)).collect();
            let total: usize = counts.iter().sum();
            let inverse: Vec<usize> = (0..total).map(|_| rng.gen_range(0..uniques)).collect();
            for reduce in [Reduce::Mean, Reduce::Max] {
                let got = devoxelize(&preds, &inverse, &counts, reduce).unwrap();
                let mut offset = 0;
                for (g, &c) in counts.iter().enumerate() {
                    let mut want = vec![match reduce {
                        Reduce::Mean => 0.0,
                        Reduce::Max => f64::NEG_INFINITY,
                    }; 3];
                    for &id in &inverse[offset..offset + c] {
                        for (w, v) in want.iter_mut().zip(&preds[id]) {
                            match reduce {
                                Reduce::Mean => *w += v / c as f64,
                                Reduce::Max => *w = w.max(*v),
                            }
                        }
                    }
                    offset += c;
                    for (a, b) in got[g].iter().zip(&want) {
                        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn round_trip_under_center_sampling() {
        let scene = random_scene(300, 7);
        let vs = voxelize(&scene, 0.2).unwrap();
        let preds: Vec<Vec<f64>> = vs.features.iter().map(|f| f.to_vec()).collect();
        let back = devoxelize(&preds, &vs.inverse, &vs.counts, Reduce::Mean).unwrap();
        for (g, row) in back.iter().enumerate() {
            let own = &vs.features[vs.inverse[g]];
            assert_eq!(row.as_slice(), own.as_slice());
        }
    }

    #[test]
    fn finer_grid_never_fewer_uniques() {
        let scene = random_scene(500, 13);
        let mut last = 0;
        for grid in [1.0, 0.5, 0.25, 0.1] {
            let n = voxelize(&scene, grid).unwrap().unique_len();
            assert!(n >= last, "grid {grid}: {n} < {last}");
            last = n;
        }
    }

    #[test]
    fn dedup_order_is_first_occurrence() {
        let scene = GaussianScene::new(vec![
            unit_gaussian(Vector3::new(0.95, 0.0, 0.0), 0.5),
            unit_gaussian(Vector3::new(0.05, 0.0, 0.0), 0.5),
            unit_gaussian(Vector3::new(0.90, 0.0, 0.0), 0.5),
        ]);
        let vs = voxelize(&scene, 1.0).unwrap();
        assert_eq!(vs.cells, vec![[0, 0, 0]]);
        let spread = GaussianScene::new(vec![
            unit_gaussian(Vector3::new(1.5, 0.0, 0.0), 0.5),
            unit_gaussian(Vector3::new(0.5, 0.0, 0.0), 0.5),
        ]);
        let vs = voxelize(&spread, 1.0).unwrap();
        assert_eq!(vs.cells, vec![[1, 0, 0], [0, 0, 0]]);
    }

    #[test]
    fn bad_shapes_are_rejected() {
        let preds = vec![vec![1.0]];
        assert!(devoxelize(&preds, &[0, 0], &[1], Reduce::Mean).is_err());
        assert!(devoxelize(&preds, &[1], &[1], Reduce::Mean).is_err());
        assert!(voxelize(&GaussianScene::new(vec![]), 0.0).is_err());
    }
}
