//! Deterministic synthetic scenes, feature tables, cameras, and mask
//! samples for tests, benchmarks, and the distillation fixtures.

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::MaskSample;
use crate::error::Result;
use crate::integrators::{select, IntegratorConfig};
use crate::rasterizer::rasterize;
use crate::scene::{CameraModel, FeatureTable, GaussianPrimitive, GaussianScene};

/// Seeded generator spec; the seed fully determines the scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub count: usize,
    /// Edge length of the cube the clusters live in (scene units).
    pub extent: f64,
    pub scale_range: (f64, f64),
    pub opacity_range: (f64, f64),
    pub clusters: usize,
    pub seed: u64,
}

/// Generate a clustered Gaussian scene and per-Gaussian cluster labels.
pub fn generate_scene(spec: &SyntheticSceneSpec) -> (GaussianScene, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clusters = spec.clusters.max(1);
    let half = spec.extent / 2.0;
    let centers: Vec<Vector3<f64>> = (0..clusters)
        .map(|_| {
            Vector3::new(
                rng.gen_range(-half..half),
                rng.gen_range(-half..half),
                rng.gen_range(-half..half),
            )
        })
        .collect();
    let palette: Vec<[f64; 3]> = (0..clusters)
        .map(|_| {
            [
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
            ]
        })
        .collect();
    let spread = spec.extent / 8.0;
    // Balanced labels, shuffled, so per-cluster counts stay within one
    // of uniform for any seed.
    let mut labels: Vec<usize> = (0..spec.count).map(|i| i % clusters).collect();
    labels.shuffle(&mut rng);
    let mut gaussians = Vec::with_capacity(spec.count);
    for &label in &labels {
        let center = centers[label]
            + Vector3::new(
                rng.gen_range(-spread..spread),
                rng.gen_range(-spread..spread),
                rng.gen_range(-spread..spread),
            );
        let scale = Vector3::new(
            rng.gen_range(spec.scale_range.0..spec.scale_range.1),
            rng.gen_range(spec.scale_range.0..spec.scale_range.1),
            rng.gen_range(spec.scale_range.0..spec.scale_range.1),
        );
        let raw = Quaternion::new(
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let q = if raw.norm() < 1e-6 {
            Quaternion::new(1.0, 0.0, 0.0, 0.0)
        } else {
            *UnitQuaternion::from_quaternion(raw).quaternion()
        };
        let opacity = rng.gen_range(spec.opacity_range.0..spec.opacity_range.1);
        let dc: [f64; 3] = std::array::from_fn(|ch| {
            (palette[label][ch] + rng.gen_range(-0.05..0.05) - 0.5) / crate::scene::SH_C0
        });
        gaussians.push(
            GaussianPrimitive::new(center, scale, [q.w, q.i, q.j, q.k], opacity, vec![dc])
                .expect("generator stays inside the primitive's domain"),
        );
    }
    (GaussianScene::new(gaussians), labels)
}

/// Camera on the -z axis at `distance` from the origin, looking at the
/// origin with +z forward (identity rotation).
pub fn look_at_camera(distance: f64, width: u32, height: u32, focal: f64) -> CameraModel {
    let mut w2c = Matrix4::identity();
    w2c[(2, 3)] = distance;
    CameraModel::new(
        w2c,
        focal,
        focal,
        width as f64 / 2.0,
        height as f64 / 2.0,
        width,
        height,
        0.01,
    )
    .expect("valid fixture camera")
}

/// A ring of cameras around the origin in the xz-plane.
pub fn camera_ring(count: usize, distance: f64, width: u32, height: u32, focal: f64) -> Vec<CameraModel> {
    (0..count)
        .map(|i| {
            let angle = std::f64::consts::TAU * i as f64 / count as f64;
            let (s, c) = angle.sin_cos();
            // Rotate the world so the camera sits at angle `angle` on the
            // ring and looks at the origin.
            let mut w2c = Matrix4::identity();
            w2c[(0, 0)] = c;
            w2c[(0, 2)] = -s;
            w2c[(2, 0)] = s;
            w2c[(2, 2)] = c;
            w2c[(2, 3)] = distance;
            CameraModel::new(
                w2c,
                focal,
                focal,
                width as f64 / 2.0,
                height as f64 / 2.0,
                width,
                height,
                0.01,
            )
            .expect("valid ring camera")
        })
        .collect()
}

/// One unit target embedding per cluster, mutually orthogonal
/// (`channels` must be at least `clusters`).
pub fn cluster_targets(clusters: usize, channels: usize) -> Vec<Vec<f64>> {
    assert!(channels >= clusters, "need channels >= clusters for orthogonal targets");
    (0..clusters)
        .map(|i| {
            let mut v = vec![0.0; channels];
            v[i] = 1.0;
            v
        })
        .collect()
}

/// Per-Gaussian features: the cluster target plus seeded noise,
/// renormalized. Spatially smooth within clusters by construction.
pub fn cluster_features(
    labels: &[usize],
    clusters: usize,
    channels: usize,
    noise: f64,
    seed: u64,
) -> FeatureTable {
    let targets = cluster_targets(clusters, channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(labels.len() * channels);
    for &label in labels {
        let mut row: Vec<f64> = targets[label]
            .iter()
            .map(|&v| v + rng.gen_range(-noise..noise))
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut row {
                *v /= norm;
            }
        }
        data.extend_from_slice(&row);
    }
    FeatureTable::new(labels.len(), channels, data).expect("consistent shape")
}

/// Build one mask sample per cluster for a camera: each pixel is
/// assigned to the cluster holding the largest share of its dense blend
/// weight, and cluster `i`'s sample gets those pixels plus the
/// orthogonal target embedding `i`.
pub fn cluster_masks(
    scene: &GaussianScene,
    labels: &[usize],
    cam: &CameraModel,
    camera_index: usize,
    clusters: usize,
    channels: usize,
) -> Result<Vec<MaskSample>> {
    let grid = rasterize(scene, cam)?;
    let targets = cluster_targets(clusters, channels);
    let config = IntegratorConfig::volume();
    let mut pixel_sets: Vec<Vec<(u32, u32)>> = vec![Vec::new(); clusters];
    for y in 0..grid.height {
        for x in 0..grid.width {
            let ray = grid.ray(x, y);
            if ray.is_empty() {
                continue;
            }
            let (alphas, depths): (Vec<f64>, Vec<f64>) =
                ray.iter().map(|h| (h.alpha, h.depth)).unzip();
            let sel = select(&alphas, &depths, &config)?;
            let mut mass = vec![0.0; clusters];
            for &(i, w) in &sel.weights {
                mass[labels[ray[i].source]] += w;
            }
            let best = mass
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite mass"))
                .map(|(i, _)| i)
                .expect("non-empty mass");
            pixel_sets[best].push((x as u32, y as u32));
        }
    }
    Ok(pixel_sets
        .into_iter()
        .enumerate()
        .filter(|(_, pixels)| !pixels.is_empty())
        .map(|(i, pixels)| MaskSample {
            id: i,
            camera: camera_index,
            pixels,
            target: targets[i].clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSceneSpec {
            count: 32,
            extent: 2.0,
            scale_range: (0.05, 0.2),
            opacity_range: (0.3, 0.8),
            clusters: 4,
            seed: 17,
        };
        let (a, la) = generate_scene(&spec);
        let (b, lb) = generate_scene(&spec);
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn cluster_counts_roughly_uniform() {
        let spec = SyntheticSceneSpec {
            count: 2000,
            extent: 2.0,
            scale_range: (0.05, 0.2),
            opacity_range: (0.3, 0.8),
            clusters: 8,
            seed: 42,
        };
        let (_, labels) = generate_scene(&spec);
        let mut counts = vec![0usize; 8];
        for &l in &labels {
            counts[l] += 1;
        }
        for &c in &counts {
            assert!(
                (c as f64 - 250.0).abs() <= 25.0,
                "cluster count {c} outside 250 +/- 10%"
            );
        }
    }

    #[test]
    fn targets_are_orthonormal() {
        let t = cluster_targets(4, 8);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = t[i].iter().zip(&t[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(dot, want);
            }
        }
    }
}
