//! Feature distillation: optimize a per-Gaussian feature table so that
//! rendered, mask-pooled features match target embeddings under a
//! contrastive loss.
//!
//! The rendered feature of a pixel is a fixed linear map of the feature
//! table (selection depends only on alphas), so the gradient of the
//! render with respect to row i is exactly the normalized blend weight
//! of i times the identity. Training is full-batch SGD with momentum;
//! per-step gradient accumulation is sequential over samples, so results
//! do not depend on the worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::integrators::{select, IntegratorConfig, RaySelection};
use crate::rasterizer::{rasterize, IntersectionGrid};
use crate::scene::{CameraModel, FeatureTable, GaussianScene};

/// One training sample: the pixels of a mask in one camera plus the
/// unit-norm embedding the rendered feature should match.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub id: usize,
    /// Index into the training camera list.
    pub camera: usize,
    pub pixels: Vec<(u32, u32)>,
    pub target: Vec<f64>,
}

impl MaskSample {
    pub fn validate(&self, channels: usize, cameras: usize) -> Result<()> {
        if self.pixels.is_empty() {
            return Err(Error::Contract(format!("sample {} has no pixels", self.id)));
        }
        if self.camera >= cameras {
            return Err(Error::Contract(format!(
                "sample {} references camera {} of {}",
                self.id, self.camera, cameras
            )));
        }
        if self.target.len() != channels {
            return Err(Error::Contract(format!(
                "sample {} target has {} channels, expected {}",
                self.id,
                self.target.len(),
                channels
            )));
        }
        let norm = norm(&self.target);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "sample {} target norm {} deviates from 1 beyond 1e-6",
                self.id, norm
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    /// Number of in-batch negatives drawn per sample per step.
    pub negatives: usize,
    pub integrator: IntegratorConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Domain("learning rate must be non-negative".into()));
        }
        if self.steps < 1 {
            return Err(Error::Domain("need at least one training step".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-step training diagnostics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainMetrics {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// InfoNCE loss with cosine similarity; the positive term appears in the
/// denominator alongside the negatives.
pub fn contrastive_loss(rendered: &[f64], positive: &[f64], negatives: &[Vec<f64>]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Domain("need at least one negative".into()));
    }
    if norm(rendered) == 0.0 {
        return Err(Error::Estimation("zero-norm rendered vector, loss undefined".into()));
    }
    let pos = cosine(rendered, positive).exp();
    let den = pos + negatives.iter().map(|n| cosine(rendered, n).exp()).sum::<f64>();
    Ok(-(pos / den).ln())
}

/// Gradient of `contrastive_loss` with respect to the rendered vector.
fn contrastive_grad(rendered: &[f64], positive: &[f64], negatives: &[Vec<f64>]) -> Result<Vec<f64>> {
    if norm(rendered) == 0.0 {
        return Err(Error::Estimation("zero-norm rendered vector, loss undefined".into()));
    }
    let sims: Vec<f64> = std::iter::once(positive)
        .chain(negatives.iter().map(Vec::as_slice))
        .map(|v| cosine(rendered, v))
        .collect();
    let exps: Vec<f64> = sims.iter().map(|s| s.exp()).collect();
    let den: f64 = exps.iter().sum();
    // dL/dsim_j = softmax_j - [j == positive].
    let mut grad = vec![0.0; rendered.len()];
    let nr = norm(rendered);
    for (j, v) in std::iter::once(positive)
        .chain(negatives.iter().map(Vec::as_slice))
        .enumerate()
    {
        let coeff = exps[j] / den - if j == 0 { 1.0 } else { 0.0 };
        // d cos(r, v)/dr = v/(|r||v|) - cos * r/|r|^2.
        let nv = norm(v);
        if nv == 0.0 {
            continue;
        }
        let c = sims[j];
        for ((g, &vi), &ri) in grad.iter_mut().zip(v).zip(rendered) {
            *g += coeff * (vi / (nr * nv) - c * ri / (nr * nr));
        }
    }
    Ok(grad)
}

/// Alignment loss used when a sample has no negatives available:
/// 1 - cosine(rendered, positive). Same minimizer direction as the
/// contrastive loss with the negative terms removed.
fn alignment_loss(rendered: &[f64], positive: &[f64]) -> Result<f64> {
    if norm(rendered) == 0.0 {
        return Err(Error::Estimation("zero-norm rendered vector, loss undefined".into()));
    }
    Ok(1.0 - cosine(rendered, positive))
}

fn alignment_grad(rendered: &[f64], positive: &[f64]) -> Vec<f64> {
    let nr = norm(rendered);
    let np = norm(positive);
    let c = cosine(rendered, positive);
    rendered
        .iter()
        .zip(positive)
        .map(|(&ri, &pi)| -(pi / (nr * np) - c * ri / (nr * nr)))
        .collect()
}

/// Sparse Jacobian of a rendered ray with respect to the feature table:
/// row i of the table receives weight w_i (the normalized blend weight),
/// identical across channels. Empty selections yield an empty list.
pub fn grad_render_wrt_features(selection: &RaySelection) -> Vec<(usize, f64)> {
    selection.effective_weights()
}

/// Per-sample precomputation: the pooled effective weights of all pixels
/// in the mask, averaged, as a sparse vector over Gaussian indices.
struct PooledSample {
    /// (gaussian index, pooled weight) sorted by index.
    weights: Vec<(usize, f64)>,
    target: Vec<f64>,
}

fn pool_sample(
    grid: &IntersectionGrid,
    sample: &MaskSample,
    config: &IntegratorConfig,
) -> Result<PooledSample> {
    let mut acc: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    let npix = sample.pixels.len() as f64;
    for &(x, y) in &sample.pixels {
        if x as usize >= grid.width || y as usize >= grid.height {
            return Err(Error::Contract(format!(
                "sample {} pixel ({x}, {y}) outside {}x{} image",
                sample.id, grid.width, grid.height
            )));
        }
        let ray = grid.ray(x as usize, y as usize);
        let (alphas, depths): (Vec<f64>, Vec<f64>) = ray.iter().map(|h| (h.alpha, h.depth)).unzip();
        let sel = select(&alphas, &depths, config)?;
        for (i, w) in sel.effective_weights() {
            *acc.entry(ray[i].source).or_insert(0.0) += w / npix;
        }
    }
    Ok(PooledSample {
        weights: acc.into_iter().collect(),
        target: sample.target.clone(),
    })
}

fn pooled_render(table: &FeatureTable, pooled: &PooledSample) -> Vec<f64> {
    let mut out = vec![0.0; table.channels];
    for &(g, w) in &pooled.weights {
        for (o, v) in out.iter_mut().zip(table.row(g)) {
            *o += w * v;
        }
    }
    out
}

/// Train a feature table against mask samples. The scene is rasterized
/// once per camera; each step renders every sample's pooled feature,
/// evaluates the contrastive loss against `config.negatives` in-batch
/// negatives (other samples' targets), and applies one SGD-with-momentum
/// update. Samples whose batch offers no negatives fall back to the
/// alignment loss 1 - cosine.
pub fn optimize_features(
    scene: &GaussianScene,
    cams: &[CameraModel],
    samples: &[MaskSample],
    channels: usize,
    config: &TrainConfig,
) -> Result<(FeatureTable, TrainMetrics)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("no training samples".into()));
    }
    for s in samples {
        s.validate(channels, cams.len())?;
    }
    let grids: Vec<IntersectionGrid> = cams
        .iter()
        .map(|cam| rasterize(scene, cam))
        .collect::<Result<_>>()?;
    let pooled: Vec<PooledSample> = samples
        .iter()
        .map(|s| pool_sample(&grids[s.camera], s, &config.integrator))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut table = FeatureTable::zeros(scene.len(), channels);
    // Small deterministic init so every rendered feature starts non-zero.
    for v in table.data.iter_mut() {
        *v = rng.gen_range(-0.01..0.01);
    }
    let mut velocity = vec![0.0f64; table.data.len()];
    let mut losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut grad = vec![0.0f64; table.data.len()];
        let mut loss_sum = 0.0;
        for (si, p) in pooled.iter().enumerate() {
            let rendered = pooled_render(&table, p);
            // In-batch negatives: targets of other samples with distinct ids.
            let mut others: Vec<usize> = (0..pooled.len())
                .filter(|&j| j != si && samples[j].id != samples[si].id)
                .collect();
            let take = config.negatives.min(others.len());
            let negatives: Vec<Vec<f64>> = (0..take)
                .map(|_| {
                    let j = others.swap_remove(rng.gen_range(0..others.len()));
                    pooled[j].target.clone()
                })
                .collect();
            let (loss, g_rendered) = if negatives.is_empty() {
                (
                    alignment_loss(&rendered, &p.target)
                        .map_err(|e| training_error(step, e))?,
                    alignment_grad(&rendered, &p.target),
                )
            } else {
                (
                    contrastive_loss(&rendered, &p.target, &negatives)
                        .map_err(|e| training_error(step, e))?,
                    contrastive_grad(&rendered, &p.target, &negatives)
                        .map_err(|e| training_error(step, e))?,
                )
            };
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    message: format!("loss diverged on sample {}", samples[si].id),
                });
            }
            loss_sum += loss;
            // Chain rule through the pooled linear render map.
            for &(g, w) in &p.weights {
                let row = &mut grad[g * channels..(g + 1) * channels];
                for (r, gv) in row.iter_mut().zip(&g_rendered) {
                    *r += w * gv;
                }
            }
        }
        let mean_loss = loss_sum / pooled.len() as f64;
        losses.push(mean_loss);
        for ((v, g), x) in velocity.iter_mut().zip(&grad).zip(table.data.iter_mut()) {
            *v = config.momentum * *v - config.learning_rate * g;
            *x += *v;
        }
    }
    let metrics = TrainMetrics {
        steps: config.steps,
        initial_loss: losses[0],
        final_loss: *losses.last().expect("at least one step"),
        losses,
    };
    Ok((table, metrics))
}

fn training_error(step: usize, e: Error) -> Error {
    Error::Training {
        step,
        message: e.to_string(),
    }
}

/// Marker returned by `classify_gaussians` for zero-norm feature rows.
pub const UNLABELED: usize = usize::MAX;

/// Assign each feature row the query with the highest cosine similarity
/// (ties to the lowest query index). Zero-norm rows get `UNLABELED`.
pub fn classify_gaussians(table: &FeatureTable, queries: &[Vec<f64>]) -> Result<Vec<usize>> {
    if queries.is_empty() {
        return Err(Error::Contract("no query embeddings".into()));
    }
    for (i, q) in queries.iter().enumerate() {
        if q.len() != table.channels {
            return Err(Error::Contract(format!(
                "query {i} has {} channels, expected {}",
                q.len(),
                table.channels
            )));
        }
        if (norm(q) - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("query {i} is not unit-norm")));
        }
    }
    Ok((0..table.rows)
        .map(|g| {
            let row = table.row(g);
            if norm(row) == 0.0 {
                return UNLABELED;
            }
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (i, q) in queries.iter().enumerate() {
                let s = cosine(row, q);
                if s > best_sim {
                    best_sim = s;
                    best = i;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::{q_render_ray, select_quantile, Strategy};
    use crate::synth::{cluster_masks, cluster_targets, generate_scene, look_at_camera, SyntheticSceneSpec};
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::Rng;

    #[test]
    fn loss_at_perfect_alignment() {
        let pos = vec![1.0, 0.0];
        let neg = vec![vec![0.0, 1.0]];
        let l = contrastive_loss(&pos, &pos, &neg).unwrap();
        let e = 1.0f64.exp();
        assert_abs_diff_eq!(l, -(e / (e + 1.0)).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.31326, epsilon = 1e-5);
    }

    #[test]
    fn loss_equidistant_is_log_two() {
        let rendered = vec![0.0, 0.0, 1.0];
        let pos = vec![1.0, 0.0, 0.0];
        let neg = vec![vec![0.0, 1.0, 0.0]];
        let l = contrastive_loss(&rendered, &pos, &neg).unwrap();
        assert_abs_diff_eq!(l, 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn duplicate_negative_increases_loss() {
        let rendered = vec![0.6, 0.8];
        let pos = vec![1.0, 0.0];
        let neg = vec![0.0, 1.0];
        let l1 = contrastive_loss(&rendered, &pos, &[neg.clone()]).unwrap();
        let l2 = contrastive_loss(&rendered, &pos, &[neg.clone(), neg]).unwrap();
        assert!(l2 > l1);
    }

    #[test]
    fn loss_rejects_zero_rendered_and_empty_negatives() {
        assert!(contrastive_loss(&[0.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0]]).is_err());
        assert!(contrastive_loss(&[1.0, 0.0], &[1.0, 0.0], &[]).is_err());
    }

    #[test]
    fn single_gaussian_jacobian_is_identity_weight() {
        // One selected Gaussian: normalization cancels the weight, for
        // any alpha large enough to cross the K=1 boundary.
        for alpha in [0.51, 0.8, 0.99] {
            let sel = select_quantile(&[alpha], 1).unwrap();
            let rows = grad_render_wrt_features(&sel);
            assert_eq!(rows.len(), 1);
            assert_abs_diff_eq!(rows[0].1, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn jacobian_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.gen_range(1..40);
            let alphas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.9)).collect();
            let sel = select_quantile(&alphas, rng.gen_range(1..10)).unwrap();
            if sel.is_empty() {
                continue;
            }
            let sum: f64 = grad_render_wrt_features(&sel).iter().map(|(_, w)| w).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for _ in 0..100 {
            let n = rng.gen_range(1..30);
            let alphas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.9)).collect();
            let values: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let k = rng.gen_range(1..8);
            let sel = select_quantile(&alphas, k).unwrap();
            let analytic = grad_render_wrt_features(&sel);
            for (i, w) in analytic {
                let mut plus = values.clone();
                plus[i][0] += h;
                let mut minus = values.clone();
                minus[i][0] -= h;
                let fd = (q_render_ray(&plus, &alphas, k).unwrap().value[0]
                    - q_render_ray(&minus, &alphas, k).unwrap().value[0])
                    / (2.0 * h);
                let rel = (fd - w).abs() / w.abs().max(1e-12);
                assert!(rel <= 1e-6, "index {i}: analytic {w}, fd {fd}");
            }
        }
    }

    fn tiny_config(steps: usize, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            momentum: 0.9,
            steps,
            negatives: 4,
            integrator: IntegratorConfig::new(Strategy::Quantile, 8).unwrap(),
            seed,
        }
    }

    fn one_gaussian_fixture() -> (GaussianScene, Vec<CameraModel>, Vec<MaskSample>) {
        let g = crate::scene::GaussianPrimitive::new(
            Vector3::zeros(),
            Vector3::new(0.3, 0.3, 0.3),
            [1.0, 0.0, 0.0, 0.0],
            0.9,
            vec![[0.0, 0.0, 0.0]],
        )
        .unwrap();
        let scene = GaussianScene::new(vec![g]);
        let cam = look_at_camera(2.0, 16, 16, 20.0);
        let sample = MaskSample {
            id: 0,
            camera: 0,
            pixels: vec![(8, 8), (7, 8), (8, 7)],
            target: vec![1.0, 0.0, 0.0, 0.0],
        };
        (scene, vec![cam], vec![sample])
    }

    #[test]
    fn one_gaussian_converges_to_target() {
        let (scene, cams, samples) = one_gaussian_fixture();
        let mut config = tiny_config(3000, 0.01, 1);
        config.momentum = 0.0;
        let (table, metrics) = optimize_features(&scene, &cams, &samples, 4, &config).unwrap();
        let c = cosine(table.row(0), &samples[0].target);
        assert!(c >= 0.999, "cosine {c}, final loss {}", metrics.final_loss);
    }

    #[test]
    fn zero_learning_rate_keeps_table() {
        let (scene, cams, samples) = one_gaussian_fixture();
        let config = tiny_config(5, 0.0, 3);
        let (table, _) = optimize_features(&scene, &cams, &samples, 4, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.01..0.01)).collect();
        assert_eq!(table.data, init);
    }

    #[test]
    fn loss_decreases_at_small_learning_rate() {
        let (scene, cams, samples) = one_gaussian_fixture();
        let mut config = tiny_config(50, 1e-3, 5);
        config.momentum = 0.0;
        let (_, metrics) = optimize_features(&scene, &cams, &samples, 4, &config).unwrap();
        for w in metrics.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (scene, cams, samples) = one_gaussian_fixture();
        let config = tiny_config(30, 0.02, 9);
        let (a, _) = optimize_features(&scene, &cams, &samples, 4, &config).unwrap();
        let (b, _) = optimize_features(&scene, &cams, &samples, 4, &config).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn classify_matches_naive_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let queries = cluster_targets(5, 8);
        let mut data = Vec::new();
        for _ in 0..40 {
            for _ in 0..8 {
                data.push(rng.gen_range(-1.0..1.0));
            }
        }
        let table = FeatureTable::new(40, 8, data).unwrap();
        let got = classify_gaussians(&table, &queries).unwrap();
        for g in 0..40 {
            let row = table.row(g);
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (i, q) in queries.iter().enumerate() {
                let s = cosine(row, q);
                if s > best_sim {
                    best_sim = s;
                    best = i;
                }
            }
            assert_eq!(got[g], best);
        }
    }

    #[test]
    fn classify_is_scale_invariant_and_flags_zero_rows() {
        let queries = cluster_targets(3, 3);
        let table = FeatureTable::new(2, 3, vec![0.2, 0.1, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let scaled = FeatureTable::new(2, 3, vec![20.0, 10.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let a = classify_gaussians(&table, &queries).unwrap();
        let b = classify_gaussians(&scaled, &queries).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0], 0);
        assert_eq!(a[1], UNLABELED);
    }

    #[test]
    fn classify_feature_equal_to_query() {
        let queries = cluster_targets(4, 4);
        let table = FeatureTable::new(1, 4, queries[2].clone()).unwrap();
        assert_eq!(classify_gaussians(&table, &queries).unwrap(), vec![2]);
    }

    #[test]
    fn cluster_scene_reaches_high_label_accuracy() {
        let spec = SyntheticSceneSpec {
            count: 300,
            extent: 2.0,
            scale_range: (0.05, 0.15),
            opacity_range: (0.4, 0.9),
            clusters: 4,
            seed: 42,
        };
        let (scene, labels) = generate_scene(&spec);
        let cams = crate::synth::camera_ring(4, 4.0, 48, 48, 60.0);
        let channels = 8;
        let mut samples = Vec::new();
        for (ci, cam) in cams.iter().enumerate() {
            samples.extend(cluster_masks(&scene, &labels, cam, ci, 4, channels).unwrap());
        }
        let config = TrainConfig {
            learning_rate: 0.5,
            momentum: 0.9,
            steps: 300,
            negatives: 3,
            integrator: IntegratorConfig::new(Strategy::Quantile, 8).unwrap(),
            seed: 7,
        };
        let (table, _) = optimize_features(&scene, &cams, &samples, channels, &config).unwrap();
        let queries = cluster_targets(4, channels);
        let got = classify_gaussians(&table, &queries).unwrap();
        let correct = got
            .iter()
            .zip(&labels)
            .filter(|(a, b)| *a == *b)
            .count();
        let acc = correct as f64 / labels.len() as f64;
        assert!(acc >= 0.90, "label accuracy {acc}");
    }
}
