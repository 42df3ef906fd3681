//! Per-ray blending strategies over depth-ordered intersection lists.
//!
//! All four strategies share one structure: a selection pass that looks
//! only at the effective alphas (never at the payload), followed by a
//! linear blend of the selected entries. Volume rendering selects every
//! entry with dense weights w_i = T_i * alpha'_i. Quantile rendering
//! walks the dense transmittance profile and picks the first Gaussian
//! crossing each of K uniform transmittance boundaries, blends the picks
//! with their own sparse transmittance, and normalizes by the blended
//! mass. Top-K picks the K largest dense weights and re-blends them in
//! depth order. Stratified-K places the boundary levels by z-score of
//! the depth-weight distribution instead of uniformly.
//!
//! Because selection never reads the payload, every strategy is linear
//! in the feature table for fixed geometry, and selections are identical
//! for any payload width.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rasterizer::{rasterize, IntersectionGrid, RayHit};
use crate::scene::{evaluate_color, CameraModel, FeatureTable, GaussianScene};

/// Default early-stop transmittance for dense volume rendering
/// (3D-GS convention). Zero disables early stopping.
pub const DEFAULT_EPS_T: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Volume,
    Quantile,
    TopK,
    Stratified,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Volume => "volume",
            Strategy::Quantile => "quantile",
            Strategy::TopK => "topk",
            Strategy::Stratified => "stratified",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "volume" => Ok(Strategy::Volume),
            "quantile" => Ok(Strategy::Quantile),
            "topk" => Ok(Strategy::TopK),
            "stratified" => Ok(Strategy::Stratified),
            other => Err(Error::Domain(format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub strategy: Strategy,
    /// Number of selected Gaussians for the sparse strategies; ignored by
    /// volume rendering.
    pub k: usize,
    /// Early-stop transmittance for volume rendering.
    pub eps_t: f64,
}

impl IntegratorConfig {
    pub fn new(strategy: Strategy, k: usize) -> Result<Self> {
        if strategy != Strategy::Volume && k == 0 {
            return Err(Error::Domain("K must be at least 1".into()));
        }
        Ok(Self {
            strategy,
            k,
            eps_t: DEFAULT_EPS_T,
        })
    }

    pub fn volume() -> Self {
        Self {
            strategy: Strategy::Volume,
            k: 0,
            eps_t: DEFAULT_EPS_T,
        }
    }
}

/// Result of a selection pass: blend weights per selected list position,
/// the strategy's residual transmittance, and whether the blend is
/// normalized by (1 - residual).
#[derive(Debug, Clone, PartialEq)]
pub struct RaySelection {
    pub weights: Vec<(usize, f64)>,
    pub residual: f64,
    pub normalized: bool,
}

impl RaySelection {
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Blend weights after normalization (the effective Jacobian diagonal
    /// of the rendered value with respect to each selected payload row).
    pub fn effective_weights(&self) -> Vec<(usize, f64)> {
        let scale = if self.normalized && !self.weights.is_empty() {
            1.0 / (1.0 - self.residual)
        } else {
            1.0
        };
        self.weights.iter().map(|&(i, w)| (i, w * scale)).collect()
    }

    /// Accumulate the blended payload into `out` (double precision).
    pub fn blend_into<'a>(&self, value_of: impl Fn(usize) -> &'a [f64], out: &mut [f64]) {
        out.fill(0.0);
        for &(i, w) in &self.weights {
            for (o, v) in out.iter_mut().zip(value_of(i)) {
                *o += w * v;
            }
        }
        if self.normalized && !self.weights.is_empty() {
            let inv = 1.0 / (1.0 - self.residual);
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
    }
}

/// Dense front-to-back blend weights with early stop at `eps_t`.
pub fn select_volume(alphas: &[f64], eps_t: f64) -> RaySelection {
    let mut t = 1.0;
    let mut weights = Vec::with_capacity(alphas.len());
    for (i, &a) in alphas.iter().enumerate() {
        if t < eps_t {
            break;
        }
        weights.push((i, t * a));
        t *= 1.0 - a;
    }
    RaySelection {
        weights,
        residual: t,
        normalized: false,
    }
}

/// Boundary-level selection shared by the quantile and stratified
/// strategies. `levels` is a strictly decreasing list of transmittance
/// boundaries; `floor` is the break threshold. A Gaussian is selected
/// when the dense test transmittance first drops below the next unmet
/// level; one Gaussian may cross several levels at once.
fn select_by_levels(alphas: &[f64], levels: &[f64], floor: f64) -> RaySelection {
    let mut t = 1.0;
    let mut t_sparse = 1.0;
    let mut k = 0;
    let mut weights = Vec::new();
    for (i, &a) in alphas.iter().enumerate() {
        let t_test = t * (1.0 - a);
        if k < levels.len() && t_test < levels[k] {
            k += 1;
            weights.push((i, t_sparse * a));
            t_sparse *= 1.0 - a;
            while k < levels.len() && t_test < levels[k] {
                k += 1;
            }
        }
        if t_test < floor {
            break;
        }
        t = t_test;
    }
    RaySelection {
        weights,
        residual: t_sparse,
        normalized: true,
    }
}

/// Quantile selection: uniform transmittance boundaries 1 - (k+1)/(K+1).
pub fn select_quantile(alphas: &[f64], k: usize) -> Result<RaySelection> {
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    let kp1 = (k + 1) as f64;
    let levels: Vec<f64> = (0..k).map(|j| 1.0 - (j + 1) as f64 / kp1).collect();
    Ok(select_by_levels(alphas, &levels, 1.0 / kp1))
}

/// Top-K selection: the K largest dense weights (ties to the smaller
/// index), re-blended in depth order with fresh transmittance.
pub fn select_topk(alphas: &[f64], k: usize) -> Result<RaySelection> {
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    let dense = select_volume(alphas, 0.0);
    let mut order: Vec<usize> = (0..dense.weights.len()).collect();
    order.sort_by(|&a, &b| {
        dense.weights[b]
            .1
            .partial_cmp(&dense.weights[a].1)
            .expect("finite weights")
            .then(dense.weights[a].0.cmp(&dense.weights[b].0))
    });
    let mut picked: Vec<usize> = order
        .into_iter()
        .take(k)
        .map(|p| dense.weights[p].0)
        .collect();
    picked.sort_unstable();

    let mut t = 1.0;
    let mut weights = Vec::with_capacity(picked.len());
    for i in picked {
        let a = alphas[i];
        weights.push((i, t * a));
        t *= 1.0 - a;
    }
    Ok(RaySelection {
        weights,
        residual: t,
        normalized: true,
    })
}

// Abramowitz & Stegun 7.1.26, |error| < 1.5e-7. Plenty for placing
// sampling levels.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Half-width of the z-score window used by stratified-K.
pub const STRATIFIED_Z_MAX: f64 = 2.0;

/// Stratified-K selection. Pass 1 estimates the mean and standard
/// deviation of depth under the dense weight distribution; pass 2 places
/// K transmittance levels by uniformly partitioning z-score space on
/// [-2, 2] and mapping each z through the normal CDF. Degenerate depth
/// spread falls back to the uniform quantile partition.
pub fn select_stratified(alphas: &[f64], depths: &[f64], k: usize) -> Result<RaySelection> {
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    if alphas.len() != depths.len() {
        return Err(Error::Contract(format!(
            "alphas ({}) and depths ({}) length mismatch",
            alphas.len(),
            depths.len()
        )));
    }
    let dense = select_volume(alphas, 0.0);
    let total: f64 = dense.weights.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return select_quantile(alphas, k);
    }
    let mean: f64 = dense.weights.iter().map(|&(i, w)| w * depths[i]).sum::<f64>() / total;
    let var: f64 = dense
        .weights
        .iter()
        .map(|&(i, w)| w * (depths[i] - mean).powi(2))
        .sum::<f64>()
        / total;
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return select_quantile(alphas, k);
    }
    let levels: Vec<f64> = (1..=k)
        .map(|j| {
            let z = -STRATIFIED_Z_MAX
                + 2.0 * STRATIFIED_Z_MAX * j as f64 / (k + 1) as f64;
            1.0 - normal_cdf(z)
        })
        .collect();
    let floor = 1.0 - normal_cdf(STRATIFIED_Z_MAX);
    Ok(select_by_levels(alphas, &levels, floor))
}

/// Run the configured selection over one ray.
pub fn select(alphas: &[f64], depths: &[f64], config: &IntegratorConfig) -> Result<RaySelection> {
    match config.strategy {
        Strategy::Volume => Ok(select_volume(alphas, config.eps_t)),
        Strategy::Quantile => select_quantile(alphas, config.k),
        Strategy::TopK => select_topk(alphas, config.k),
        Strategy::Stratified => select_stratified(alphas, depths, config.k),
    }
}

/// Rendered value plus diagnostics for one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub value: Vec<f64>,
    pub residual: f64,
    pub selected: Vec<usize>,
    pub no_selection: bool,
}

fn check_lengths(values: &[Vec<f64>], alphas: &[f64]) -> Result<usize> {
    if values.len() != alphas.len() {
        return Err(Error::Contract(format!(
            "values ({}) and alphas ({}) length mismatch",
            values.len(),
            alphas.len()
        )));
    }
    Ok(values.first().map_or(0, Vec::len))
}

fn finish(values: &[Vec<f64>], channels: usize, sel: RaySelection) -> RayRender {
    let mut value = vec![0.0; channels];
    sel.blend_into(|i| values[i].as_slice(), &mut value);
    RayRender {
        value,
        no_selection: sel.is_empty(),
        selected: sel.weights.iter().map(|&(i, _)| i).collect(),
        residual: sel.residual,
    }
}

/// Dense volume rendering (front-to-back alpha blending), no normalization.
pub fn v_render_ray(values: &[Vec<f64>], alphas: &[f64], eps_t: f64) -> Result<RayRender> {
    let channels = check_lengths(values, alphas)?;
    Ok(finish(values, channels, select_volume(alphas, eps_t)))
}

/// Quantile rendering with residual-transmittance normalization.
pub fn q_render_ray(values: &[Vec<f64>], alphas: &[f64], k: usize) -> Result<RayRender> {
    let channels = check_lengths(values, alphas)?;
    Ok(finish(values, channels, select_quantile(alphas, k)?))
}

/// Top-K baseline with the same normalization as quantile rendering.
pub fn topk_render_ray(values: &[Vec<f64>], alphas: &[f64], k: usize) -> Result<RayRender> {
    let channels = check_lengths(values, alphas)?;
    Ok(finish(values, channels, select_topk(alphas, k)?))
}

/// Stratified-K rendering.
pub fn stratified_render_ray(
    values: &[Vec<f64>],
    alphas: &[f64],
    depths: &[f64],
    k: usize,
) -> Result<RayRender> {
    let channels = check_lengths(values, alphas)?;
    Ok(finish(values, channels, select_stratified(alphas, depths, k)?))
}

/// H x W x C rendered map with a residual-transmittance plane and a
/// per-pixel coverage flag (false where no Gaussian was selected).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major pixel values, C per pixel, single-precision storage.
    pub data: Vec<f32>,
    pub residual: Vec<f32>,
    pub covered: Vec<bool>,
}

impl RenderedMap {
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// What gets blended per ray.
pub enum Payload<'a> {
    /// View-dependent RGB from each Gaussian's SH coefficients.
    Rgb,
    /// Rows of a per-Gaussian feature table.
    Features(&'a FeatureTable),
}

/// Integrate every pixel of a pre-rasterized grid. `rows` maps a source
/// Gaussian index to its payload row. Accumulation is double precision
/// per ray; storage is single precision.
pub fn render_rays<'a>(
    grid: &IntersectionGrid,
    channels: usize,
    rows: &(impl Fn(usize) -> &'a [f64] + Sync),
    config: &IntegratorConfig,
) -> Result<RenderedMap> {
    config_check(config)?;
    let mut data = vec![0.0f32; grid.rays.len() * channels];
    let mut residual = vec![0.0f32; grid.rays.len()];
    let mut covered = vec![false; grid.rays.len()];
    data.par_chunks_mut(channels)
        .zip(residual.par_iter_mut())
        .zip(covered.par_iter_mut())
        .zip(grid.rays.par_iter())
        .try_for_each(|(((px, res), cov), ray)| -> Result<()> {
            let (alphas, depths): (Vec<f64>, Vec<f64>) =
                ray.iter().map(|h| (h.alpha, h.depth)).unzip();
            let sel = select(&alphas, &depths, config)?;
            let mut out = vec![0.0f64; channels];
            sel.blend_into(|i| rows(ray[i].source), &mut out);
            for (p, v) in px.iter_mut().zip(&out) {
                *p = *v as f32;
            }
            *res = sel.residual as f32;
            *cov = !sel.is_empty();
            Ok(())
        })?;
    Ok(RenderedMap {
        width: grid.width,
        height: grid.height,
        channels,
        data,
        residual,
        covered,
    })
}

fn config_check(config: &IntegratorConfig) -> Result<()> {
    if config.strategy != Strategy::Volume && config.k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    Ok(())
}

/// View-dependent per-Gaussian colors for one camera.
pub fn scene_colors(scene: &GaussianScene, cam: &CameraModel) -> Vec<[f64; 3]> {
    let origin = cam.position();
    scene
        .gaussians
        .iter()
        .map(|g| {
            let d = g.center - origin;
            let n = d.norm();
            let dir = if n > 0.0 { d / n } else { nalgebra::Vector3::z() };
            evaluate_color(&g.sh_coeffs, &dir)
        })
        .collect()
}

/// Rasterize and integrate a full image.
pub fn render_image(
    scene: &GaussianScene,
    cam: &CameraModel,
    payload: Payload<'_>,
    config: &IntegratorConfig,
) -> Result<RenderedMap> {
    let grid = rasterize(scene, cam)?;
    render_grid(scene, cam, &grid, payload, config)
}

/// Integrate a pre-rasterized grid (lets callers reuse the geometry pass).
pub fn render_grid(
    scene: &GaussianScene,
    cam: &CameraModel,
    grid: &IntersectionGrid,
    payload: Payload<'_>,
    config: &IntegratorConfig,
) -> Result<RenderedMap> {
    match payload {
        Payload::Rgb => {
            let colors = scene_colors(scene, cam);
            render_rays(grid, 3, &|i| colors[i].as_slice(), config)
        }
        Payload::Features(table) => {
            if table.rows != scene.len() {
                return Err(Error::Contract(format!(
                    "feature rows {} do not match scene count {}",
                    table.rows,
                    scene.len()
                )));
            }
            render_rays(grid, table.channels, &|i| table.row(i), config)
        }
    }
}

/// One record of a per-ray transmittance trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub order: usize,
    pub source: usize,
    pub depth: f64,
    pub alpha: f64,
    pub t_before: f64,
    pub t_after: f64,
    pub selected_volume: bool,
    pub selected_quantile: bool,
    pub selected_topk: bool,
    pub selected_stratified: bool,
}

/// Dense transmittance profile of one pixel plus the selection flags of
/// every strategy at the configured K.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmittanceTrace {
    pub pixel: (u32, u32),
    pub records: Vec<TraceRecord>,
    /// Sparse residual transmittance of the quantile strategy.
    pub residual_quantile: f64,
}

pub fn trace_transmittance(
    scene: &GaussianScene,
    cam: &CameraModel,
    pixel: (u32, u32),
    config: &IntegratorConfig,
) -> Result<TransmittanceTrace> {
    if pixel.0 >= cam.width || pixel.1 >= cam.height {
        return Err(Error::Domain(format!(
            "pixel {pixel:?} out of bounds for {}x{} image",
            cam.width, cam.height
        )));
    }
    let grid = rasterize(scene, cam)?;
    trace_ray(grid.ray(pixel.0 as usize, pixel.1 as usize), pixel, config)
}

/// Build a trace from an already-rasterized ray.
pub fn trace_ray(
    ray: &[RayHit],
    pixel: (u32, u32),
    config: &IntegratorConfig,
) -> Result<TransmittanceTrace> {
    let k = if config.k == 0 { 1 } else { config.k };
    let (alphas, depths): (Vec<f64>, Vec<f64>) = ray.iter().map(|h| (h.alpha, h.depth)).unzip();
    let volume = select_volume(&alphas, config.eps_t);
    let quantile = select_quantile(&alphas, k)?;
    let topk = select_topk(&alphas, k)?;
    let stratified = select_stratified(&alphas, &depths, k)?;
    let mark = |sel: &RaySelection| -> Vec<bool> {
        let mut flags = vec![false; ray.len()];
        for &(i, _) in &sel.weights {
            flags[i] = true;
        }
        flags
    };
    let (fv, fq, ft, fs) = (mark(&volume), mark(&quantile), mark(&topk), mark(&stratified));
    let mut t = 1.0;
    let records = ray
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let t_before = t;
            t *= 1.0 - h.alpha;
            TraceRecord {
                order: i,
                source: h.source,
                depth: h.depth,
                alpha: h.alpha,
                t_before,
                t_after: t,
                selected_volume: fv[i],
                selected_quantile: fq[i],
                selected_topk: ft[i],
                selected_stratified: fs[i],
            }
        })
        .collect();
    Ok(TransmittanceTrace {
        pixel,
        records,
        residual_quantile: quantile.residual,
    })
}

/// Serialize traces to CSV with one row per (ray, record).
pub fn traces_to_csv(traces: &[TransmittanceTrace]) -> String {
    let mut out = String::from(
        "ray_id,order,gaussian_id,depth,alpha_prime,T_before,T_after,\
         selected_volume,selected_quantile,selected_topk,selected_stratified\n",
    );
    for (ray_id, trace) in traces.iter().enumerate() {
        for r in &trace.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                ray_id,
                r.order,
                r.source,
                r.depth,
                r.alpha,
                r.t_before,
                r.t_after,
                r.selected_volume as u8,
                r.selected_quantile as u8,
                r.selected_topk as u8,
                r.selected_stratified as u8,
            ));
        }
    }
    out
}
