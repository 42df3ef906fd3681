//! Wall-clock benchmarking of the integrators plus the fidelity metrics
//! used to compare them against the dense volume reference.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::integrators::{render_grid, IntegratorConfig, Payload, RenderedMap, Strategy};
use crate::rasterizer::{rasterize, IntersectionGrid};
use crate::scene::{CameraModel, FeatureTable, GaussianScene};

/// One benchmark row: timing plus fidelity against the dense volume
/// reference at the same channel count.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub strategy: Strategy,
    pub k: usize,
    pub channels: usize,
    pub scene_id: String,
    pub width: usize,
    pub height: usize,
    /// Median per-frame wall time over the repeats, warm-up excluded.
    pub mean_ms: f64,
    pub fps: f64,
    pub mean_cosine: f64,
    /// Finite only for 3-channel runs that differ from the reference.
    pub psnr: f64,
    pub mean_residual: f64,
}

pub const BENCH_CSV_HEADER: &str =
    "strategy,k,channels,scene_id,width,height,mean_ms,fps,mean_cosine,psnr,mean_residual";

/// Serialize records with the pinned column order; the leading comment
/// row records the worker count used for the run.
pub fn bench_to_csv(records: &[BenchRecord], threads: usize) -> String {
    let mut out = format!("# threads={threads}\n{BENCH_CSV_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.strategy.name(),
            r.k,
            r.channels,
            r.scene_id,
            r.width,
            r.height,
            r.mean_ms,
            r.fps,
            r.mean_cosine,
            r.psnr,
            r.mean_residual,
        ));
    }
    out
}

/// Mean per-pixel cosine similarity over pixels covered in both maps.
pub fn mean_cosine(a: &RenderedMap, b: &RenderedMap) -> f64 {
    assert_eq!(a.data.len(), b.data.len());
    let c = a.channels;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (pa, pb)) in a.data.chunks(c).zip(b.data.chunks(c)).enumerate() {
        if !(a.covered[i] && b.covered[i]) {
            continue;
        }
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in pa.iter().zip(pb) {
            dot += x as f64 * y as f64;
            na += (x as f64).powi(2);
            nb += (y as f64).powi(2);
        }
        if na > 0.0 && nb > 0.0 {
            sum += dot / (na.sqrt() * nb.sqrt());
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// PSNR with peak 1.0 over all pixels. Identical images give infinity.
pub fn psnr(a: &RenderedMap, b: &RenderedMap) -> f64 {
    assert_eq!(a.data.len(), b.data.len());
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn mean_residual(map: &RenderedMap) -> f64 {
    if map.residual.is_empty() {
        return 0.0;
    }
    map.residual.iter().map(|&r| r as f64).sum::<f64>() / map.residual.len() as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Time one strategy at one (K, C) point: one untimed warm-up frame,
/// then `repeats` timed frames, median reported. Geometry (rasterization)
/// is excluded from the timing; all strategies share the same grid.
pub fn time_strategy(
    scene: &GaussianScene,
    cam: &CameraModel,
    grid: &IntersectionGrid,
    payload: &Payload<'_>,
    config: &IntegratorConfig,
    repeats: usize,
) -> Result<(RenderedMap, f64)> {
    let run = || -> Result<RenderedMap> {
        match payload {
            Payload::Rgb => render_grid(scene, cam, grid, Payload::Rgb, config),
            Payload::Features(t) => render_grid(scene, cam, grid, Payload::Features(*t), config),
        }
    };
    let map = run()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let _ = run()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((map, median(times)))
}

/// Full benchmark sweep. A channel count of 3 renders view-dependent
/// RGB; any other count requires a feature table with at least that many
/// channels (the first C columns are used).
pub fn run_bench(
    scene: &GaussianScene,
    cam: &CameraModel,
    scene_id: &str,
    strategies: &[Strategy],
    k_list: &[usize],
    c_list: &[usize],
    repeats: usize,
    features: Option<&FeatureTable>,
) -> Result<Vec<BenchRecord>> {
    let grid = rasterize(scene, cam)?;
    let mut records = Vec::new();
    for &c in c_list {
        let table;
        let payload = if c == 3 {
            Payload::Rgb
        } else {
            let full = features.ok_or_else(|| {
                Error::Contract(format!("channel count {c} requires a feature table"))
            })?;
            if full.channels < c {
                return Err(Error::Contract(format!(
                    "feature table has {} channels, need {c}",
                    full.channels
                )));
            }
            table = truncate_channels(full, c);
            Payload::Features(&table)
        };
        let reference = render_grid(scene, cam, &grid, ref_payload(&payload), &IntegratorConfig::volume())?;
        for &strategy in strategies {
            let ks: &[usize] = if strategy == Strategy::Volume { &[0] } else { k_list };
            for &k in ks {
                let config = if strategy == Strategy::Volume {
                    IntegratorConfig::volume()
                } else {
                    IntegratorConfig::new(strategy, k)?
                };
                let (map, ms) = time_strategy(scene, cam, &grid, &payload, &config, repeats)?;
                records.push(BenchRecord {
                    strategy,
                    k,
                    channels: c,
                    scene_id: scene_id.to_string(),
                    width: map.width,
                    height: map.height,
                    mean_ms: ms,
                    fps: 1e3 / ms,
                    mean_cosine: mean_cosine(&map, &reference),
                    psnr: if c == 3 { psnr(&map, &reference) } else { f64::NAN },
                    mean_residual: mean_residual(&map),
                });
            }
        }
    }
    Ok(records)
}

fn ref_payload<'a>(p: &Payload<'a>) -> Payload<'a> {
    match p {
        Payload::Rgb => Payload::Rgb,
        Payload::Features(t) => Payload::Features(*t),
    }
}

/// First `c` columns of a feature table.
pub fn truncate_channels(table: &FeatureTable, c: usize) -> FeatureTable {
    assert!(c <= table.channels);
    let mut data = Vec::with_capacity(table.rows * c);
    for r in 0..table.rows {
        data.extend_from_slice(&table.row(r)[..c]);
    }
    FeatureTable::new(table.rows, c, data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, look_at_camera, SyntheticSceneSpec};
    use approx::assert_abs_diff_eq;

    fn fixture() -> (GaussianScene, CameraModel) {
        let spec = SyntheticSceneSpec {
            count: 100,
            extent: 2.0,
            scale_range: (0.05, 0.2),
            opacity_range: (0.3, 0.8),
            clusters: 4,
            seed: 2,
        };
        (generate_scene(&spec).0, look_at_camera(3.0, 32, 32, 40.0))
    }

    #[test]
    fn identical_maps_have_unit_cosine_and_infinite_psnr() {
        let (scene, cam) = fixture();
        let map = crate::integrators::render_image(
            &scene,
            &cam,
            Payload::Rgb,
            &IntegratorConfig::volume(),
        )
        .unwrap();
        assert_abs_diff_eq!(mean_cosine(&map, &map), 1.0, epsilon = 1e-12);
        assert!(psnr(&map, &map).is_infinite());
    }

    #[test]
    fn row_count_matches_sweep_size() {
        let (scene, cam) = fixture();
        let records = run_bench(
            &scene,
            &cam,
            "fixture",
            &[Strategy::Volume, Strategy::Quantile, Strategy::TopK],
            &[5, 20],
            &[3],
            3,
            None,
        )
        .unwrap();
        // Volume ignores the K list: 1 + 2 + 2 rows.
        assert_eq!(records.len(), 5);
        for r in &records {
            assert!(r.mean_ms > 0.0);
            assert!(r.fps > 0.0);
        }
    }

    #[test]
    fn csv_header_is_pinned() {
        let csv = bench_to_csv(&[], 4);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("# threads=4"));
        assert_eq!(
            lines.next(),
            Some("strategy,k,channels,scene_id,width,height,mean_ms,fps,mean_cosine,psnr,mean_residual")
        );
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn truncation_keeps_leading_columns() {
        let t = FeatureTable::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let cut = truncate_channels(&t, 2);
        assert_eq!(cut.data, vec![1.0, 2.0, 4.0, 5.0]);
    }
}
