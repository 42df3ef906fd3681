//! One-dimensional verification of the transmittance-space quadrature
//! view of ray integration.
//!
//! A continuous ray model (piecewise-constant density, piecewise-linear
//! payload) admits closed-form transmittance and closed-form inversion
//! from transmittance back to ray distance. Dense ray integration equals
//! the integral of the payload over transmittance space [0, 1]; the
//! sparse quantile integrator realizes the right Riemann sum of that
//! integral, with error bounded by M/(2K) for payloads with |c'(u)| <= M.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Density and payload along one ray: sigma(t) piecewise-constant and
/// c(t) piecewise-linear (C channels) on [0, t_max]. Beyond t_max both
/// extend constantly, so the tail of the rendering integral has the
/// closed form c(t_max) * T(t_max).
#[derive(Debug, Clone)]
pub struct ContinuousRayModel {
    /// Density breakpoints, 0 = b_0 < ... < b_m = t_max.
    sigma_breaks: Vec<f64>,
    /// Density on each of the m segments.
    sigma_vals: Vec<f64>,
    /// Cumulative optical depth at each density breakpoint.
    cum_tau: Vec<f64>,
    /// Payload breakpoints, starting at 0 and ending at t_max.
    payload_breaks: Vec<f64>,
    /// Payload values at the breakpoints (linear in between).
    payload_vals: Vec<Vec<f64>>,
}

impl ContinuousRayModel {
    pub fn new(
        sigma_breaks: Vec<f64>,
        sigma_vals: Vec<f64>,
        payload_breaks: Vec<f64>,
        payload_vals: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if sigma_breaks.len() != sigma_vals.len() + 1 || sigma_breaks.len() < 2 {
            return Err(Error::Contract("sigma breakpoints/values shape mismatch".into()));
        }
        if payload_breaks.len() != payload_vals.len() || payload_breaks.len() < 2 {
            return Err(Error::Contract("payload breakpoints/values shape mismatch".into()));
        }
        if sigma_breaks[0] != 0.0 || payload_breaks[0] != 0.0 {
            return Err(Error::Domain("models start at t = 0".into()));
        }
        if sigma_breaks.windows(2).any(|w| w[1] <= w[0])
            || payload_breaks.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Domain("breakpoints must be strictly increasing".into()));
        }
        if sigma_vals.iter().any(|&s| s < 0.0) {
            return Err(Error::Domain("density must be non-negative".into()));
        }
        let t_max = *sigma_breaks.last().expect("non-empty");
        if (payload_breaks.last().expect("non-empty") - t_max).abs() > 1e-12 {
            return Err(Error::Contract("payload must end at t_max".into()));
        }
        let channels = payload_vals[0].len();
        if payload_vals.iter().any(|v| v.len() != channels) || channels == 0 {
            return Err(Error::Contract("inconsistent payload channel counts".into()));
        }
        let mut cum_tau = vec![0.0];
        for (i, &s) in sigma_vals.iter().enumerate() {
            let len = sigma_breaks[i + 1] - sigma_breaks[i];
            cum_tau.push(cum_tau[i] + s * len);
        }
        Ok(Self {
            sigma_breaks,
            sigma_vals,
            cum_tau,
            payload_breaks,
            payload_vals,
        })
    }

    pub fn t_max(&self) -> f64 {
        *self.sigma_breaks.last().expect("non-empty")
    }

    pub fn channels(&self) -> usize {
        self.payload_vals[0].len()
    }

    pub fn sigma_at(&self, t: f64) -> f64 {
        let seg = match self
            .sigma_breaks
            .binary_search_by(|b| b.partial_cmp(&t).expect("finite"))
        {
            Ok(i) => i.min(self.sigma_vals.len() - 1),
            Err(i) => (i - 1).min(self.sigma_vals.len() - 1),
        };
        self.sigma_vals[seg]
    }

    fn optical_depth(&self, t: f64) -> f64 {
        let seg = match self
            .sigma_breaks
            .binary_search_by(|b| b.partial_cmp(&t).expect("finite"))
        {
            Ok(i) => return self.cum_tau[i.min(self.cum_tau.len() - 1)],
            Err(i) => i - 1,
        };
        let seg = seg.min(self.sigma_vals.len() - 1);
        self.cum_tau[seg] + self.sigma_vals[seg] * (t - self.sigma_breaks[seg])
    }

    /// T(t) = exp(-integral of sigma over [0, t]), closed form.
    pub fn transmittance_at(&self, t: f64) -> f64 {
        (-self.optical_depth(t)).exp()
    }

    /// Invert u = T(t). Transmittance below T(t_max) clamps to t_max
    /// (the payload is constant there anyway).
    pub fn invert_transmittance(&self, u: f64) -> f64 {
        debug_assert!(u > 0.0 && u <= 1.0);
        let tau = -u.ln();
        if tau >= *self.cum_tau.last().expect("non-empty") {
            return self.t_max();
        }
        let seg = match self
            .cum_tau
            .binary_search_by(|c| c.partial_cmp(&tau).expect("finite"))
        {
            Ok(i) => return self.sigma_breaks[i],
            Err(i) => i - 1,
        };
        self.sigma_breaks[seg] + (tau - self.cum_tau[seg]) / self.sigma_vals[seg]
    }

    /// Piecewise-linear payload at distance t (clamped to [0, t_max]).
    pub fn payload_at(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(0.0, *self.payload_breaks.last().expect("non-empty"));
        let seg = match self
            .payload_breaks
            .binary_search_by(|b| b.partial_cmp(&t).expect("finite"))
        {
            Ok(i) => return self.payload_vals[i].clone(),
            Err(i) => i - 1,
        };
        let (t0, t1) = (self.payload_breaks[seg], self.payload_breaks[seg + 1]);
        let w = (t - t0) / (t1 - t0);
        self.payload_vals[seg]
            .iter()
            .zip(&self.payload_vals[seg + 1])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    /// Payload as a function of transmittance-space position u.
    pub fn payload_at_u(&self, u: f64) -> Vec<f64> {
        self.payload_at(self.invert_transmittance(u))
    }

    /// Exact supremum of |dc/du| over the partition: within each combined
    /// (sigma, payload) segment the payload slope is constant and
    /// |dc/du| = |c'(t)| / (sigma * T(t)) is maximized at the right end.
    pub fn payload_u_lipschitz(&self) -> f64 {
        let mut breaks: Vec<f64> = self
            .sigma_breaks
            .iter()
            .chain(self.payload_breaks.iter())
            .copied()
            .collect();
        breaks.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        let mut m: f64 = 0.0;
        for w in breaks.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            let mid = 0.5 * (t0 + t1);
            let sigma = self.sigma_at(mid);
            if sigma == 0.0 {
                continue;
            }
            let c0 = self.payload_at(t0);
            let c1 = self.payload_at(t1);
            let t_right = self.transmittance_at(t1);
            for (a, b) in c0.iter().zip(&c1) {
                let slope = (b - a) / (t1 - t0);
                m = m.max(slope.abs() / (sigma * t_right));
            }
        }
        m
    }
}

/// Minimum step count for the reference quadrature.
pub const REFERENCE_STEPS: usize = 1_000_000;

/// High-resolution oracle for the rendering integral
/// c(t) sigma(t) T(t) dt over [0, infinity): composite Simpson with at
/// least `steps` subintervals distributed over the smooth segments of
/// [0, t_max], plus the closed-form constant tail c(t_max) * T(t_max).
pub fn reference_integral(model: &ContinuousRayModel, steps: usize) -> Vec<f64> {
    let mut breaks: Vec<f64> = model
        .sigma_breaks
        .iter()
        .chain(model.payload_breaks.iter())
        .copied()
        .collect();
    breaks.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let t_max = model.t_max();
    let channels = model.channels();
    let mut total = vec![0.0f64; channels];
    // Within each combined segment sigma is constant and c is linear, so
    // the integrand is sigma * (c0 + slope * dt) * T(t0) * exp(-sigma * dt)
    // and the hot loop needs one exp per sample and no lookups.
    for w in breaks.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let len = t1 - t0;
        let mut n = ((len / t_max) * steps as f64).ceil() as usize;
        if n % 2 == 1 {
            n += 1;
        }
        n = n.max(2);
        let h = len / n as f64;
        let sigma = model.sigma_at(0.5 * (t0 + t1));
        let t_left = model.transmittance_at(t0);
        let c0 = model.payload_at(t0);
        let c1 = model.payload_at(t1);
        let slope: Vec<f64> = c0.iter().zip(&c1).map(|(a, b)| (b - a) / len).collect();
        let decay = (-sigma * h).exp();
        let mut seg_sum = vec![0.0f64; channels];
        let mut trans = sigma * t_left;
        for i in 0..=n {
            let coeff = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let dt = h * i as f64;
            let scaled = coeff * trans;
            for ((s, &c), &m) in seg_sum.iter_mut().zip(&c0).zip(&slope) {
                *s += scaled * (c + m * dt);
            }
            trans *= decay;
        }
        for (tot, s) in total.iter_mut().zip(&seg_sum) {
            *tot += s * h / 3.0;
        }
    }
    let tail_t = model.transmittance_at(t_max);
    let tail_c = model.payload_at(t_max);
    for (tot, c) in total.iter_mut().zip(&tail_c) {
        *tot += c * tail_t;
    }
    total
}

/// Right Riemann sum of integral_0^1 c(u) du with K+1 uniform intervals,
/// evaluating c at the right endpoints u = k/(K+1), k = 1..=K+1, through
/// the closed-form transmittance inversion.
pub fn right_riemann_in_u(model: &ContinuousRayModel, k: usize) -> Vec<f64> {
    let n = k + 1;
    right_riemann(|u| model.payload_at_u(u), model.channels(), n)
}

/// Right Riemann sum of a payload given directly as a function of u.
pub fn right_riemann(c: impl Fn(f64) -> Vec<f64>, channels: usize, intervals: usize) -> Vec<f64> {
    let du = 1.0 / intervals as f64;
    let mut sum = vec![0.0f64; channels];
    for k in 1..=intervals {
        let u = k as f64 * du;
        for (s, v) in sum.iter_mut().zip(&c(u)) {
            *s += v * du;
        }
    }
    sum
}

/// Per-K error report against the reference integral.
#[derive(Debug, Clone)]
pub struct QuadratureReport {
    pub ks: Vec<usize>,
    /// Max-abs-channel error per K.
    pub errors: Vec<f64>,
    /// M/(2K) bound per K.
    pub bounds: Vec<f64>,
    pub reference_norm: f64,
    /// Least-squares slope of log error vs log K.
    pub slope: f64,
}

impl QuadratureReport {
    pub fn violations(&self) -> usize {
        self.errors
            .iter()
            .zip(&self.bounds)
            .filter(|(e, b)| e > b)
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,error,bound,reference_norm\n");
        for ((k, e), b) in self.ks.iter().zip(&self.errors).zip(&self.bounds) {
            out.push_str(&format!("{},{},{},{}\n", k, e, b, self.reference_norm));
        }
        out
    }
}

/// Compare the right Riemann sum against the reference integral for each
/// K and report errors, the M/(2K) bound, and the fitted log-log slope.
pub fn verify_bound(model: &ContinuousRayModel, ks: &[usize]) -> Result<QuadratureReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Domain("K list must be non-empty and positive".into()));
    }
    let reference = reference_integral(model, REFERENCE_STEPS);
    let m = model.payload_u_lipschitz();
    let mut errors = Vec::with_capacity(ks.len());
    let mut bounds = Vec::with_capacity(ks.len());
    for &k in ks {
        let approx = right_riemann_in_u(model, k);
        let err = approx
            .iter()
            .zip(&reference)
            .map(|(a, r)| (a - r).abs())
            .fold(0.0f64, f64::max);
        errors.push(err);
        bounds.push(m / (2.0 * k as f64));
    }
    let pts: Vec<(f64, f64)> = ks
        .iter()
        .zip(&errors)
        .filter(|(_, e)| **e > 0.0)
        .map(|(k, e)| ((*k as f64).ln(), e.ln()))
        .collect();
    let slope = fit_slope(&pts);
    let reference_norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(QuadratureReport {
        ks: ks.to_vec(),
        errors,
        bounds,
        reference_norm,
        slope,
    })
}

fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    num / den
}

/// Discretize the continuous model into `n` uniform slabs: each slab
/// becomes one "Gaussian" with opacity 1 - exp(-optical depth of the
/// slab) and the payload sampled at the slab center. Feeding the result
/// to the dense integrator converges to the reference integral.
pub fn discretize_model(model: &ContinuousRayModel, n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if n == 0 {
        return Err(Error::Domain("need at least one slab".into()));
    }
    let t_max = model.t_max();
    let h = t_max / n as f64;
    let mut alphas = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let t0 = h * i as f64;
        let t1 = t0 + h;
        let tau = (model.transmittance_at(t0) / model.transmittance_at(t1)).ln();
        alphas.push(1.0 - (-tau).exp());
        values.push(model.payload_at(0.5 * (t0 + t1)));
    }
    Ok((alphas, values))
}

/// Seeded corpus of random models for the bound experiment. Density is
/// piecewise-constant with total optical depth ~16 (so T(t_max) is far
/// below 1e-6); the payload varies only while transmittance is above
/// ~1e-2 and is constant afterwards, which keeps the Lipschitz constant
/// of c(u) finite and moderate.
pub fn random_model(seed: u64, channels: usize) -> ContinuousRayModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segs = rng.gen_range(3..7);
    let mut sigma_breaks = vec![0.0];
    let mut raw_lens = Vec::with_capacity(segs);
    let mut sigma_vals = Vec::with_capacity(segs);
    for _ in 0..segs {
        raw_lens.push(rng.gen_range(0.5..2.0));
        sigma_vals.push(rng.gen_range(0.8..3.0));
    }
    let total_tau: f64 = raw_lens.iter().zip(&sigma_vals).map(|(l, s)| l * s).sum();
    let stretch = 16.0 / total_tau;
    let mut t = 0.0;
    for l in &raw_lens {
        t += l * stretch;
        sigma_breaks.push(t);
    }
    let model_tau = ContinuousRayModel::new(
        sigma_breaks.clone(),
        sigma_vals.clone(),
        vec![0.0, t],
        vec![vec![0.0], vec![0.0]],
    )
    .expect("valid density-only model");
    // Payload breakpoints live where T >= ~1e-2, flat afterwards.
    let t_flat = model_tau.invert_transmittance(1e-2);
    let nb = rng.gen_range(3..6);
    let mut payload_breaks = vec![0.0];
    for i in 1..nb {
        payload_breaks.push(t_flat * i as f64 / (nb - 1) as f64);
    }
    payload_breaks.push(t);
    let mut payload_vals: Vec<Vec<f64>> = (0..nb)
        .map(|_| (0..channels).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let last = payload_vals.last().expect("non-empty").clone();
    payload_vals.push(last);
    ContinuousRayModel::new(sigma_breaks, sigma_vals, payload_breaks, payload_vals)
        .expect("valid random model")
}
