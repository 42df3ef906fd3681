//! Domain model for 3D Gaussian scenes: primitives, cameras, feature
//! tables, covariance math, spherical-harmonics color, PLY ingestion,
//! and global scene-scale alignment.

mod ply;
mod sh;

pub use ply::{load_ply, write_ply};
pub use sh::{evaluate_color, SH_C0};

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;

/// One anisotropic 3D Gaussian.
///
/// Stores the world-space center, per-axis scale (standard deviations),
/// a unit rotation quaternion in (w, x, y, z) order, an opacity in the
/// open interval (0, 1), and spherical-harmonics color coefficients of
/// degree 0..=3 ((d+1)^2 coefficients per color channel).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    pub sh_coeffs: Vec<[f64; 3]>,
}

impl GaussianPrimitive {
    pub fn new(
        center: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: [f64; 4],
        opacity: f64,
        sh_coeffs: Vec<[f64; 3]>,
    ) -> Result<Self> {
        if !(scale.x > 0.0 && scale.y > 0.0 && scale.z > 0.0) {
            return Err(Error::Domain(format!(
                "scale components must be strictly positive, got {:?}",
                scale
            )));
        }
        if !(opacity > 0.0 && opacity < 1.0) {
            return Err(Error::Domain(format!(
                "opacity must lie strictly inside (0, 1), got {opacity}"
            )));
        }
        match sh_coeffs.len() {
            1 | 4 | 9 | 16 => {}
            n => {
                return Err(Error::Domain(format!(
                    "sh coefficient count {n} does not match any degree in 0..=3"
                )))
            }
        }
        let q = Quaternion::new(rotation[0], rotation[1], rotation[2], rotation[3]);
        if q.norm() == 0.0 {
            return Err(Error::Domain("zero rotation quaternion".into()));
        }
        Ok(Self {
            center,
            scale,
            rotation: UnitQuaternion::from_quaternion(q),
            opacity,
            sh_coeffs,
        })
    }

    pub fn sh_degree(&self) -> usize {
        match self.sh_coeffs.len() {
            1 => 0,
            4 => 1,
            9 => 2,
            _ => 3,
        }
    }

    /// World-space covariance R S S^T R^T.
    pub fn covariance(&self) -> Matrix3<f64> {
        let q = self.rotation.quaternion();
        covariance_from(self.scale, [q.w, q.i, q.j, q.k]).expect("unit quaternion by construction")
    }
}

/// Covariance from per-axis scale and a unit quaternion (w, x, y, z).
///
/// Rejects quaternions whose norm deviates from 1 by more than 1e-6.
/// The result is symmetrized so round-off cannot break symmetry.
pub fn covariance_from(scale: Vector3<f64>, rotation: [f64; 4]) -> Result<Matrix3<f64>> {
    let q = Quaternion::new(rotation[0], rotation[1], rotation[2], rotation[3]);
    if (q.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::Contract(format!(
            "quaternion norm {} deviates from 1 beyond 1e-6",
            q.norm()
        )));
    }
    let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
    let s2 = Matrix3::from_diagonal(&scale.component_mul(&scale));
    let cov = r * s2 * r.transpose();
    Ok((cov + cov.transpose()) * 0.5)
}

/// An ordered collection of Gaussians, indexable by stable id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<GaussianPrimitive>,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<GaussianPrimitive>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

/// Per-Gaussian feature rows, N x C row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub rows: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureTable {
    pub fn new(rows: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Domain("feature table needs at least one channel".into()));
        }
        if data.len() != rows * channels {
            return Err(Error::Contract(format!(
                "feature data length {} does not equal rows {} x channels {}",
                data.len(),
                rows,
                channels
            )));
        }
        Ok(Self { rows, channels, data })
    }

    pub fn zeros(rows: usize, channels: usize) -> Self {
        Self {
            rows,
            channels,
            data: vec![0.0; rows * channels],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }
}

/// Pinhole camera with a rigid world-to-camera transform.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub world_to_camera: Matrix4<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        world_to_camera: Matrix4<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        near: f64,
    ) -> Result<Self> {
        if width < 1 || height < 1 {
            return Err(Error::Domain("image must be at least 1x1".into()));
        }
        if near <= 0.0 {
            return Err(Error::Domain("near plane must be positive".into()));
        }
        let r = world_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > UNIT_TOL {
            return Err(Error::Domain(format!(
                "world-to-camera rotation is not orthonormal (max deviation {err})"
            )));
        }
        Ok(Self {
            world_to_camera,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near,
        })
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }
}

/// Divide centers and scales by `a`, leaving rotation, opacity, and SH
/// coefficients untouched.
pub fn apply_scene_scale(scene: &GaussianScene, a: f64) -> Result<GaussianScene> {
    if a <= 0.0 {
        return Err(Error::Domain(format!("scene scale must be positive, got {a}")));
    }
    let gaussians = scene
        .gaussians
        .iter()
        .map(|g| GaussianPrimitive {
            center: g.center / a,
            scale: g.scale / a,
            rotation: g.rotation,
            opacity: g.opacity,
            sh_coeffs: g.sh_coeffs.clone(),
        })
        .collect();
    Ok(GaussianScene::new(gaussians))
}

/// L1-optimal global scale `a` for pairs of (monocular, rendered)
/// inverse depths: argmin_a sum_i |mono_i - a * rendered_i|.
///
/// The exact minimizer is the weighted median of the ratios
/// mono/rendered with weights equal to the rendered values.
pub fn fit_scene_scale(pairs: &[(f64, f64)]) -> Result<f64> {
    let mut weighted: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(_, d)| *d > 0.0)
        .map(|&(m, d)| (m / d, d))
        .collect();
    if weighted.is_empty() {
        return Err(Error::Estimation(
            "need at least one pair with positive rendered inverse depth".into(),
        ));
    }
    weighted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite ratios"));
    let total: f64 = weighted.iter().map(|(_, w)| w).sum();
    let mut acc = 0.0;
    for &(ratio, w) in &weighted {
        acc += w;
        if acc >= total * 0.5 {
            return Ok(ratio);
        }
    }
    Ok(weighted.last().expect("non-empty").0)
}
