//! Screen-space projection (EWA splatting) and tile-based rasterization.
//!
//! Projection maps each 3D Gaussian to a 2D mean, a dilated 2x2
//! covariance, a view depth, and an SH-evaluated color. Rasterization
//! bins projected Gaussians into tiles and emits, per pixel, the
//! depth-ordered list of (source index, alpha') pairs consumed by the
//! integrators. Tiles are purely a performance device: membership is
//! decided per pixel, so the result is independent of tile size.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{evaluate_color, CameraModel, GaussianScene};

/// Per-pixel inclusion threshold on alpha' (3D-GS convention).
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Clamp on alpha' so transmittance never reaches zero exactly.
pub const ALPHA_MAX: f64 = 0.99;
/// Footprint cutoff: a pixel sees a Gaussian only within its 3-sigma ellipse.
pub const FOOTPRINT_SIGMA: f64 = 3.0;
/// Low-pass dilation added to the projected covariance diagonal (px^2).
pub const COV2D_DILATION: f64 = 0.3;
/// Default tile edge in pixels.
pub const TILE_SIZE: usize = 16;

/// A 3D Gaussian after projection to the image plane.
#[derive(Debug, Clone)]
pub struct ProjectedGaussian {
    pub source: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub color: [f64; 3],
}

/// One rasterized intersection along a pixel's ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub source: usize,
    pub depth: f64,
    pub alpha: f64,
}

/// Per-pixel depth-ordered intersection lists, row-major.
#[derive(Debug, Clone)]
pub struct IntersectionGrid {
    pub width: usize,
    pub height: usize,
    pub rays: Vec<Vec<RayHit>>,
}

impl IntersectionGrid {
    pub fn ray(&self, x: usize, y: usize) -> &[RayHit] {
        &self.rays[y * self.width + x]
    }

    pub fn mean_ray_len(&self) -> f64 {
        let total: usize = self.rays.iter().map(Vec::len).sum();
        total as f64 / self.rays.len() as f64
    }
}

/// Pixel center of the pixel with integer coordinates (x, y).
pub fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Project one Gaussian. Returns `None` when the Gaussian is culled:
/// camera-space depth at or behind the near plane, or the 3-sigma
/// footprint missing the image entirely.
pub fn project_gaussian(
    g: &crate::scene::GaussianPrimitive,
    cam: &CameraModel,
    source: usize,
) -> Option<ProjectedGaussian> {
    let p = cam.to_camera(&g.center);
    let z = p.z;
    if z <= cam.near {
        return None;
    }
    let mean2d = Vector2::new(cam.fx * p.x / z + cam.cx, cam.fy * p.y / z + cam.cy);

    // Perspective Jacobian of (x, y, z) -> (fx x/z + cx, fy y/z + cy).
    let j = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * p.x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * p.y / (z * z),
    );
    let w = cam.rotation();
    let cov3 = g.covariance();
    let jw = j * w;
    let mut cov2d = jw * cov3 * jw.transpose();
    cov2d[(0, 0)] += COV2D_DILATION;
    cov2d[(1, 1)] += COV2D_DILATION;
    cov2d = (cov2d + cov2d.transpose()) * 0.5;

    // Bounding circle of the 3-sigma ellipse for whole-image culling.
    let radius = FOOTPRINT_SIGMA * cov2d.symmetric_eigenvalues().max().max(0.0).sqrt();
    if mean2d.x + radius < 0.0
        || mean2d.y + radius < 0.0
        || mean2d.x - radius > cam.width as f64
        || mean2d.y - radius > cam.height as f64
    {
        return None;
    }

    let view_dir = (g.center - cam.position()).normalize();
    Some(ProjectedGaussian {
        source,
        mean2d,
        cov2d,
        depth: z,
        color: evaluate_color(&g.sh_coeffs, &view_dir),
    })
}

/// Effective alpha at a pixel: min(ALPHA_MAX, alpha * exp(-d^T cov^-1 d / 2)).
///
/// Returns `None` (below threshold) outside the 3-sigma footprint or when
/// the value falls under `ALPHA_MIN`.
pub fn evaluate_alpha(pg: &ProjectedGaussian, alpha: f64, pixel: Vector2<f64>) -> Option<f64> {
    let d = pixel - pg.mean2d;
    let inv = pg.cov2d.try_inverse().expect("dilated covariance is invertible");
    let maha2 = (d.transpose() * inv * d)[(0, 0)];
    if maha2 > FOOTPRINT_SIGMA * FOOTPRINT_SIGMA {
        return None;
    }
    let a = (alpha * (-0.5 * maha2).exp()).min(ALPHA_MAX);
    (a >= ALPHA_MIN).then_some(a)
}

/// Project every Gaussian and sort by (view depth, source index).
pub fn project_scene(scene: &GaussianScene, cam: &CameraModel) -> Vec<ProjectedGaussian> {
    let mut projected: Vec<ProjectedGaussian> = scene
        .gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, cam, i))
        .collect();
    projected.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .expect("finite depths")
            .then(a.source.cmp(&b.source))
    });
    projected
}

/// Rasterize a scene into per-pixel intersection lists.
pub fn rasterize(scene: &GaussianScene, cam: &CameraModel) -> Result<IntersectionGrid> {
    rasterize_with_tile_size(scene, cam, TILE_SIZE)
}

/// Same as [`rasterize`] with an explicit tile size; output must not
/// depend on it.
pub fn rasterize_with_tile_size(
    scene: &GaussianScene,
    cam: &CameraModel,
    tile_size: usize,
) -> Result<IntersectionGrid> {
    if tile_size == 0 {
        return Err(Error::Domain("tile size must be positive".into()));
    }
    let width = cam.width as usize;
    let height = cam.height as usize;
    if width == 0 || height == 0 {
        return Err(Error::Domain("zero-area image".into()));
    }
    let projected = project_scene(scene, cam);

    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); tiles_x * tiles_y];
    for (pi, pg) in projected.iter().enumerate() {
        // Exact axis-aligned bounding box of the 3-sigma ellipse.
        let rx = FOOTPRINT_SIGMA * pg.cov2d[(0, 0)].max(0.0).sqrt();
        let ry = FOOTPRINT_SIGMA * pg.cov2d[(1, 1)].max(0.0).sqrt();
        let x0 = (((pg.mean2d.x - rx) / tile_size as f64).floor().max(0.0)) as usize;
        let y0 = (((pg.mean2d.y - ry) / tile_size as f64).floor().max(0.0)) as usize;
        let x1 = ((pg.mean2d.x + rx) / tile_size as f64).floor() as isize;
        let y1 = ((pg.mean2d.y + ry) / tile_size as f64).floor() as isize;
        if x1 < 0 || y1 < 0 {
            continue;
        }
        let x1 = (x1 as usize).min(tiles_x - 1);
        let y1 = (y1 as usize).min(tiles_y - 1);
        if x0 >= tiles_x || y0 >= tiles_y {
            continue;
        }
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                bins[ty * tiles_x + tx].push(pi);
            }
        }
    }

    // Binning preserved the global depth order, so per-pixel pushes land
    // already sorted.
    let tile_results: Vec<(usize, Vec<Vec<RayHit>>)> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let tx = tile % tiles_x;
            let ty = tile / tiles_x;
            let x_range = tx * tile_size..((tx + 1) * tile_size).min(width);
            let y_range = ty * tile_size..((ty + 1) * tile_size).min(height);
            let mut lists =
                vec![Vec::new(); x_range.len() * y_range.len()];
            for &pi in &bins[tile] {
                let pg = &projected[pi];
                let alpha = scene.gaussians[pg.source].opacity;
                for (yi, y) in y_range.clone().enumerate() {
                    for (xi, x) in x_range.clone().enumerate() {
                        if let Some(a) = evaluate_alpha(pg, alpha, pixel_center(x, y)) {
                            lists[yi * x_range.len() + xi].push(RayHit {
                                source: pg.source,
                                depth: pg.depth,
                                alpha: a,
                            });
                        }
                    }
                }
            }
            (tile, lists)
        })
        .collect();

    let mut rays = vec![Vec::new(); width * height];
    for (tile, lists) in tile_results {
        let tx = tile % tiles_x;
        let ty = tile / tiles_x;
        let x0 = tx * tile_size;
        let y0 = ty * tile_size;
        let tw = ((tx + 1) * tile_size).min(width) - x0;
        for (li, list) in lists.into_iter().enumerate() {
            let x = x0 + li % tw;
            let y = y0 + li / tw;
            rays[y * width + x] = list;
        }
    }
    Ok(IntersectionGrid { width, height, rays })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GaussianPrimitive;
    use crate::synth::{generate_scene, look_at_camera, SyntheticSceneSpec};
    use nalgebra::Vector3;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix4;

    fn simple_camera(width: u32, height: u32) -> CameraModel {
        CameraModel::new(
            Matrix4::identity(),
            50.0,
            50.0,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            0.1,
        )
        .unwrap()
    }

    fn isotropic(center: Vector3<f64>, sigma: f64, opacity: f64) -> GaussianPrimitive {
        GaussianPrimitive::new(
            center,
            Vector3::new(sigma, sigma, sigma),
            [1.0, 0.0, 0.0, 0.0],
            opacity,
            vec![[0.0; 3]],
        )
        .unwrap()
    }

    #[test]
    fn on_axis_gaussian_projects_to_principal_point() {
        let cam = simple_camera(32, 32);
        let g = isotropic(Vector3::new(0.0, 0.0, 5.0), 0.2, 0.8);
        let pg = project_gaussian(&g, &cam, 0).unwrap();
        assert_abs_diff_eq!(pg.mean2d, Vector2::new(16.0, 16.0), epsilon = 1e-12);
        assert_abs_diff_eq!(pg.depth, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn isotropic_on_axis_covariance_matches_jacobian_formula() {
        // Oracle: (f sigma / z)^2 I before the 0.3 px^2 dilation.
        let cam = simple_camera(32, 32);
        let sigma = 0.3;
        let z = 4.0;
        let g = isotropic(Vector3::new(0.0, 0.0, z), sigma, 0.8);
        let pg = project_gaussian(&g, &cam, 0).unwrap();
        let expected = (cam.fx * sigma / z).powi(2);
        for (r, c) in [(0, 0), (1, 1)] {
            let undilated = pg.cov2d[(r, c)] - COV2D_DILATION;
            assert!(
                (undilated - expected).abs() / expected < 1e-6,
                "cov2d[{r},{c}] = {undilated}, want {expected}"
            );
        }
        assert_abs_diff_eq!(pg.cov2d[(0, 1)], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = simple_camera(32, 32);
        let g = isotropic(Vector3::new(0.0, 0.0, -1.0), 0.2, 0.8);
        assert!(project_gaussian(&g, &cam, 0).is_none());
    }

    #[test]
    fn far_off_screen_is_culled() {
        let cam = simple_camera(32, 32);
        let g = isotropic(Vector3::new(100.0, 0.0, 5.0), 0.05, 0.8);
        assert!(project_gaussian(&g, &cam, 0).is_none());
    }

    #[test]
    fn alpha_at_mean_and_at_mahalanobis_two() {
        let pg = ProjectedGaussian {
            source: 0,
            mean2d: Vector2::new(8.0, 8.0),
            cov2d: Matrix2::identity(),
            depth: 1.0,
            color: [0.0; 3],
        };
        assert_abs_diff_eq!(
            evaluate_alpha(&pg, 0.8, Vector2::new(8.0, 8.0)).unwrap(),
            0.8,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(evaluate_alpha(&pg, 1.0, Vector2::new(8.0, 8.0)).unwrap(), 0.99, epsilon = 1e-15);
        // d^2 = 2 with identity covariance at offset (sqrt(2), 0).
        let a = evaluate_alpha(&pg, 0.8, Vector2::new(8.0 + 2f64.sqrt(), 8.0)).unwrap();
        assert_abs_diff_eq!(a, 0.8 * (-1.0f64).exp(), epsilon = 1e-12);
        assert!(evaluate_alpha(&pg, 0.0, Vector2::new(8.0, 8.0)).is_none());
    }

    #[test]
    fn empty_scene_gives_empty_lists() {
        let cam = simple_camera(8, 8);
        let grid = rasterize(&GaussianScene::default(), &cam).unwrap();
        assert!(grid.rays.iter().all(Vec::is_empty));
    }

    #[test]
    fn gaussian_on_pixel_center_lands_in_that_list() {
        let cam = simple_camera(8, 8);
        // Pixel (4, 4) has center (4.5, 4.5); aim the projection there.
        let z = 5.0;
        let g = isotropic(
            Vector3::new(0.5 * z / cam.fx, 0.5 * z / cam.fy, z),
            0.2,
            0.8,
        );
        let grid = rasterize(&GaussianScene::new(vec![g]), &cam).unwrap();
        let list = grid.ray(4, 4);
        assert_eq!(list.len(), 1);
        assert_eq!(list[0].source, 0);
        assert_abs_diff_eq!(list[0].alpha, 0.8, epsilon = 1e-12);
    }

    /// Naive oracle: test every Gaussian against every pixel with the
    /// same per-pixel inclusion rule, no tiling.
    fn rasterize_naive(scene: &GaussianScene, cam: &CameraModel) -> IntersectionGrid {
        let projected = project_scene(scene, cam);
        let width = cam.width as usize;
        let height = cam.height as usize;
        let mut rays = vec![Vec::new(); width * height];
        for y in 0..height {
            for x in 0..width {
                for pg in &projected {
                    if let Some(a) =
                        evaluate_alpha(pg, scene.gaussians[pg.source].opacity, pixel_center(x, y))
                    {
                        rays[y * width + x].push(RayHit {
                            source: pg.source,
                            depth: pg.depth,
                            alpha: a,
                        });
                    }
                }
            }
        }
        IntersectionGrid { width, height, rays }
    }

    fn test_scene(seed: u64, count: usize) -> (GaussianScene, CameraModel) {
        let (scene, _) = generate_scene(&SyntheticSceneSpec {
            count,
            extent: 2.0,
            scale_range: (0.05, 0.4),
            opacity_range: (0.2, 0.9),
            clusters: 4,
            seed,
        });
        (scene, look_at_camera(2.0, 8, 8, 40.0))
    }

    #[test]
    fn tiled_equals_naive_oracle() {
        for seed in 0..5 {
            let (scene, cam) = test_scene(seed, 50);
            let tiled = rasterize(&scene, &cam).unwrap();
            let naive = rasterize_naive(&scene, &cam);
            assert_eq!(tiled.rays, naive.rays, "seed {seed}");
        }
    }

    #[test]
    fn result_independent_of_tile_size() {
        let (scene, cam) = test_scene(9, 60);
        let a = rasterize_with_tile_size(&scene, &cam, 16).unwrap();
        for ts in [1, 3, 5, 8, 64] {
            let b = rasterize_with_tile_size(&scene, &cam, ts).unwrap();
            assert_eq!(a.rays, b.rays, "tile size {ts}");
        }
    }

    #[test]
    fn lists_sorted_and_permutation_invariant() {
        let (scene, cam) = test_scene(13, 40);
        let grid = rasterize(&scene, &cam).unwrap();
        for list in &grid.rays {
            for w in list.windows(2) {
                assert!(
                    w[0].depth < w[1].depth
                        || (w[0].depth == w[1].depth && w[0].source < w[1].source)
                );
            }
            for hit in list {
                assert!(hit.alpha >= ALPHA_MIN && hit.alpha <= ALPHA_MAX);
            }
        }
        // Reversing storage order changes source ids but must produce the
        // same (depth, alpha) lists once ids are mapped back.
        let n = scene.len();
        let reversed = GaussianScene::new(scene.gaussians.iter().rev().cloned().collect());
        let rgrid = rasterize(&reversed, &cam).unwrap();
        for (a, b) in grid.rays.iter().zip(&rgrid.rays) {
            let mapped: Vec<RayHit> = b
                .iter()
                .map(|h| RayHit {
                    source: n - 1 - h.source,
                    ..*h
                })
                .collect();
            assert_eq!(*a, mapped);
        }
    }
}
