//! Lifetime fitting: exponential and cascade decays convolved with a
//! Gaussian instrument response, weighted least squares, parametric
//! bootstrap, and Purcell-factor bookkeeping.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::cascade::DEGENERATE_RATE_TOLERANCE;
use crate::error::{Error, Result};
use crate::photon_mc::FWHM_PER_SIGMA;
use crate::stream::TimeTagStream;
use crate::table::{Record, Table};

pub const MULTI_START_BUDGET: usize = 16;
pub const DEFAULT_RESAMPLES: usize = 200;
/// Largest tolerated fraction of failed bootstrap refits.
pub const MAX_BOOTSTRAP_FAILURE: f64 = 0.2;
const MAX_ITERATIONS: usize = 200;
const REWEIGHT_ROUNDS: usize = 20;

/// `erfc(x)·exp(x²)`.
fn erfcx(x: f64) -> f64 {
    if x < 25.0 {
        libm::erfc(x) * (x * x).exp()
    } else {
        let x2 = x * x;
        (1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2)) / (x * std::f64::consts::PI.sqrt())
    }
}

/// Unit-area exponential (`γ e^{−γt}`, t ≥ 0) convolved with a Gaussian of
/// standard deviation `sigma`, evaluated at `u = t − t0`.
fn emg(u: f64, gamma: f64, sigma: f64) -> f64 {
    let x = (gamma * sigma * sigma - u) / (sigma * std::f64::consts::SQRT_2);
    if x > 0.0 {
        0.5 * gamma * erfcx(x) * (-u * u / (2.0 * sigma * sigma)).exp()
    } else {
        0.5 * gamma * (gamma * (0.5 * gamma * sigma * sigma - u)).exp() * libm::erfc(x)
    }
}

fn gaussian(u: f64, sigma: f64) -> f64 {
    (-u * u / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn check_model_args(gamma: &[(&'static str, f64)], irf_fwhm: f64) -> Result<()> {
    for &(name, g) in gamma {
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::param(name, format!("must be finite and > 0, got {g}")));
        }
    }
    if !(irf_fwhm > 0.0 && irf_fwhm.is_finite()) {
        return Err(Error::param("irf_fwhm", format!("must be finite and > 0, got {irf_fwhm}")));
    }
    Ok(())
}

/// `amplitude·(γ e^{−γ(t−t0)} ⊗ IRF) + baseline`.
pub fn model_exponential_irf(t: f64, gamma: f64, amplitude: f64, t0: f64, baseline: f64, irf_fwhm: f64) -> Result<f64> {
    check_model_args(&[("gamma", gamma)], irf_fwhm)?;
    Ok(amplitude * emg(t - t0, gamma, irf_fwhm / FWHM_PER_SIGMA) + baseline)
}

fn cascade_shape(u: f64, gamma_xx: f64, gamma_x: f64, sigma: f64) -> f64 {
    if ((gamma_x - gamma_xx) / gamma_xx).abs() < DEGENERATE_RATE_TOLERANCE {
        // γ t e^{−γt} ⊗ G = γ [(u − γσ²)·E(u) + σ²·G(u)], E = emg/γ
        let g = 0.5 * (gamma_xx + gamma_x);
        let e = emg(u, g, sigma) / g;
        return gamma_xx * ((u - g * sigma * sigma) * e + sigma * sigma * gaussian(u, sigma));
    }
    let d = gamma_x - gamma_xx;
    emg(u, gamma_xx, sigma) / d - gamma_xx * emg(u, gamma_x, sigma) / (gamma_x * d)
}

/// Exciton population of the cascade (unit biexciton preparation) convolved
/// with the IRF: `amplitude·(p_X ⊗ IRF) + baseline`.
pub fn model_cascade_irf(
    t: f64,
    gamma_xx: f64,
    gamma_x: f64,
    amplitude: f64,
    t0: f64,
    baseline: f64,
    irf_fwhm: f64,
) -> Result<f64> {
    check_model_args(&[("gamma_xx", gamma_xx), ("gamma_x", gamma_x)], irf_fwhm)?;
    Ok(amplitude * cascade_shape(t - t0, gamma_xx, gamma_x, irf_fwhm / FWHM_PER_SIGMA) + baseline)
}

/// Photon arrival times relative to the excitation pulse.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayHistogram {
    pub bin_width: f64,
    /// Left edge of the first bin, ps.
    pub t_start: f64,
    pub counts: Vec<u64>,
    pub irf_fwhm: f64,
}

impl DecayHistogram {
    pub fn new(bin_width: f64, t_start: f64, counts: Vec<u64>, irf_fwhm: f64) -> Result<Self> {
        if !(bin_width > 0.0) {
            return Err(Error::param("bin_width", "must be > 0"));
        }
        if !(irf_fwhm > 0.0) {
            return Err(Error::param("irf_fwhm", "must be > 0"));
        }
        Ok(DecayHistogram {
            bin_width,
            t_start,
            counts,
            irf_fwhm,
        })
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.t_start + (i as f64 + 0.5) * self.bin_width
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|i| self.bin_center(i)).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Delays of channel-1 clicks after the latest channel-0 sync, binned on
    /// `[t_min, t_max)`. A click is assigned to the last sync at or before
    /// `t − t_min`, so slightly negative delays from jitter are kept.
    pub fn from_lifetime_stream(
        stream: &TimeTagStream,
        bin_width: i64,
        t_min: i64,
        t_max: i64,
        irf_fwhm: f64,
    ) -> Result<Self> {
        if bin_width < 1 || t_max <= t_min || (t_max - t_min) % bin_width != 0 {
            return Err(Error::param(
                "bin_width",
                "t_max − t_min must be a positive multiple of bin_width",
            ));
        }
        if !stream.is_sorted() {
            return Err(Error::Format("time-tag stream is not sorted by timestamp".into()));
        }
        let syncs = stream.channel(0);
        let n = ((t_max - t_min) / bin_width) as usize;
        let mut counts = vec![0u64; n];
        let mut j = 0usize;
        for t in stream.channel(1) {
            let limit = t - t_min;
            while j < syncs.len() && syncs[j] <= limit {
                j += 1;
            }
            if j == 0 {
                continue;
            }
            let delay = t - syncs[j - 1];
            if delay >= t_min && delay < t_max {
                counts[((delay - t_min) / bin_width) as usize] += 1;
            }
        }
        Self::new(bin_width as f64, t_min as f64, counts, irf_fwhm)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new("xxcascade decay histogram v1", &["delay_ps", "counts"]);
        t.set_meta("bin_width_ps", self.bin_width);
        t.set_meta("irf_fwhm_ps", self.irf_fwhm);
        for (i, &c) in self.counts.iter().enumerate() {
            t.push(vec![self.bin_center(i), c as f64]);
        }
        t
    }

    /// Reads a `delay_ps,counts` table. The IRF width comes from the
    /// `irf_fwhm_ps` header when present, else from `irf_fwhm`.
    pub fn from_table(t: &Table, irf_fwhm: Option<f64>) -> Result<Self> {
        let delays = t.column("delay_ps")?;
        let counts = t.column("counts")?;
        if delays.len() < 2 {
            return Err(Error::Format("decay histogram needs at least two bins".into()));
        }
        let w = delays[1] - delays[0];
        if delays.windows(2).any(|p| ((p[1] - p[0]) - w).abs() > 1e-6 * w.abs().max(1.0)) {
            return Err(Error::Format("decay histogram bins are not uniform".into()));
        }
        let counts = counts
            .into_iter()
            .map(|c| {
                if c >= 0.0 && c.fract() == 0.0 {
                    Ok(c as u64)
                } else {
                    Err(Error::Format(format!("counts must be non-negative integers, got {c}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let irf = match irf_fwhm {
            Some(v) => v,
            None => t.meta_f64("irf_fwhm_ps")?,
        };
        Self::new(w, delays[0] - w / 2.0, counts, irf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitModel {
    Exponential,
    Cascade,
}

impl FitModel {
    pub fn as_str(self) -> &'static str {
        match self {
            FitModel::Exponential => "exponential",
            FitModel::Cascade => "cascade",
        }
    }
}

impl fmt::Display for FitModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FitModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" => Ok(FitModel::Exponential),
            "cascade" => Ok(FitModel::Cascade),
            other => Err(Error::config("model", format!("unknown fit model `{other}`"))),
        }
    }
}

/// Model parameters. For the exponential model `gamma` is the decay rate and
/// `gamma_xx` is unused; for the cascade model `gamma` is γ_X.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitParams {
    pub gamma: f64,
    pub gamma_xx: Option<f64>,
    pub amplitude: f64,
    pub t0: f64,
    pub baseline: f64,
}

impl FitParams {
    pub fn eval(&self, model: FitModel, t: f64, sigma: f64) -> f64 {
        let shape = match model {
            FitModel::Exponential => emg(t - self.t0, self.gamma, sigma),
            FitModel::Cascade => cascade_shape(t - self.t0, self.gamma_xx.unwrap_or(f64::INFINITY), self.gamma, sigma),
        };
        self.amplitude * shape + self.baseline
    }
}

/// Parameters held fixed during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitPins {
    pub gamma_xx: Option<f64>,
    pub t0: Option<f64>,
    pub baseline: Option<f64>,
}

/// Least-squares weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `1/max(counts, 1)`. Depends on the data, so fits are biased low in
    /// sparse bins.
    Counts,
    /// `1/max(model, 1)`, iterated until the weights match the fitted
    /// curve. The estimating equations are then unbiased.
    #[default]
    Model,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::Counts => "1/max(counts,1)",
            Weighting::Model => "1/max(model,1)",
        }
    }
}

impl std::str::FromStr for Weighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "counts" => Ok(Weighting::Counts),
            "model" => Ok(Weighting::Model),
            other => Err(Error::config("weighting", format!("unknown weighting `{other}`"))),
        }
    }
}

/// Expected counts per bin: the model averaged over each bin by Simpson's
/// rule.
pub fn expected_counts(hist: &DecayHistogram, model: FitModel, params: &FitParams) -> Vec<f64> {
    let sigma = hist.irf_fwhm / FWHM_PER_SIGMA;
    let grid = simpson_grid(hist);
    bin_average(&grid, |t| params.eval(model, t, sigma))
}

/// Bin edges and centers interleaved: `e₀, c₀, e₁, c₁, …, eₙ`.
fn simpson_grid(hist: &DecayHistogram) -> Vec<f64> {
    (0..=2 * hist.counts.len())
        .map(|k| hist.t_start + k as f64 * 0.5 * hist.bin_width)
        .collect()
}

fn bin_average(grid: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let v: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
    (0..grid.len() / 2)
        .map(|i| (v[2 * i] + 4.0 * v[2 * i + 1] + v[2 * i + 2]) / 6.0)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: FitModel,
    pub params: FitParams,
    pub pins: FitPins,
    pub weighting: Weighting,
    /// Bootstrap standard deviations, present after [`bootstrap`].
    pub std: Option<FitParams>,
    pub n_bootstrap: usize,
    pub residual_chi2: f64,
    pub dof: usize,
    pub starts_converged: usize,
    pub ill_conditioned: bool,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn tau(&self) -> f64 {
        1.0 / self.params.gamma
    }

    pub fn tau_xx(&self) -> Option<f64> {
        self.params.gamma_xx.map(|g| 1.0 / g)
    }

    /// Standard deviation of `tau()` from the bootstrap rate spread.
    pub fn tau_std(&self) -> Option<f64> {
        self.std.map(|s| s.gamma / self.params.gamma.powi(2))
    }

    pub fn tau_xx_std(&self) -> Option<f64> {
        let g = self.params.gamma_xx?;
        let s = self.std?.gamma_xx?;
        Some(s / (g * g))
    }

    pub fn reduced_chi2(&self) -> f64 {
        self.residual_chi2 / self.dof.max(1) as f64
    }

    pub fn to_record(&self) -> Record {
        let mut r = Record::new();
        r.set("model", self.model);
        r.set("gamma", self.params.gamma).set("tau_ps", self.tau());
        if let Some(g) = self.params.gamma_xx {
            r.set("gamma_xx", g).set("tau_xx_ps", 1.0 / g);
            r.set("gamma_xx_pinned", self.pins.gamma_xx.is_some());
        }
        r.set("amplitude", self.params.amplitude)
            .set("t0_ps", self.params.t0)
            .set("baseline", self.params.baseline)
            .set("residual_chi2", self.residual_chi2)
            .set("dof", self.dof)
            .set("reduced_chi2", self.reduced_chi2())
            .set("starts_converged", self.starts_converged)
            .set("ill_conditioned", self.ill_conditioned)
            .set("n_bootstrap", self.n_bootstrap)
            .set("weights", self.weighting.as_str());
        if let Some(s) = self.std {
            r.set("bootstrap", "parametric-poisson");
            r.set("gamma_std", s.gamma);
            r.set("tau_std_ps", self.tau_std().unwrap_or(f64::NAN));
            if let Some(g) = s.gamma_xx {
                r.set("gamma_xx_std", g);
                r.set("tau_xx_std_ps", self.tau_xx_std().unwrap_or(f64::NAN));
            }
            r.set("amplitude_std", s.amplitude).set("t0_std_ps", s.t0).set("baseline_std", s.baseline);
        }
        for (i, w) in self.warnings.iter().enumerate() {
            r.set(format!("warning_{i}"), w);
        }
        r
    }

    /// Fitted curve on the histogram bins, for plotting.
    pub fn curve_table(&self, hist: &DecayHistogram) -> Table {
        let mut t = Table::new("xxcascade fitted decay v1", &["delay_ps", "counts", "model", "residual"]);
        t.set_meta("model", self.model);
        let expected = expected_counts(hist, self.model, &self.params);
        for (i, (&c, &m)) in hist.counts.iter().zip(&expected).enumerate() {
            let r = (c as f64 - m) / m.max(1.0).sqrt();
            t.push(vec![hist.bin_center(i), c as f64, m, r]);
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    LnGamma,
    LnGammaXx,
    LnAmplitude,
    T0,
    Baseline,
}

struct Problem<'a> {
    model: FitModel,
    grid: &'a [f64],
    y: Vec<f64>,
    sqrt_w: Vec<f64>,
    sigma: f64,
    pins: FitPins,
    free: Vec<Slot>,
}

impl<'a> Problem<'a> {
    fn new(model: FitModel, grid: &'a [f64], counts: &[u64], irf_fwhm: f64, pins: FitPins) -> Self {
        let y: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let sqrt_w = y.iter().map(|&c| 1.0 / c.max(1.0).sqrt()).collect();
        let mut free = vec![Slot::LnGamma];
        if model == FitModel::Cascade && pins.gamma_xx.is_none() {
            free.push(Slot::LnGammaXx);
        }
        free.push(Slot::LnAmplitude);
        if pins.t0.is_none() {
            free.push(Slot::T0);
        }
        if pins.baseline.is_none() {
            free.push(Slot::Baseline);
        }
        Problem {
            model,
            grid,
            y,
            sqrt_w,
            sigma: irf_fwhm / FWHM_PER_SIGMA,
            pins,
            free,
        }
    }

    fn params(&self, theta: &[f64]) -> FitParams {
        let mut p = FitParams {
            gamma: f64::NAN,
            gamma_xx: match self.model {
                FitModel::Cascade => self.pins.gamma_xx,
                FitModel::Exponential => None,
            },
            amplitude: f64::NAN,
            t0: self.pins.t0.unwrap_or(f64::NAN),
            baseline: self.pins.baseline.unwrap_or(f64::NAN),
        };
        for (slot, &v) in self.free.iter().zip(theta) {
            match slot {
                Slot::LnGamma => p.gamma = v.exp(),
                Slot::LnGammaXx => p.gamma_xx = Some(v.exp()),
                Slot::LnAmplitude => p.amplitude = v.exp(),
                Slot::T0 => p.t0 = v,
                Slot::Baseline => p.baseline = v,
            }
        }
        p
    }

    fn theta(&self, p: &FitParams) -> Vec<f64> {
        self.free
            .iter()
            .map(|slot| match slot {
                Slot::LnGamma => p.gamma.ln(),
                Slot::LnGammaXx => p.gamma_xx.expect("cascade start has gamma_xx").ln(),
                Slot::LnAmplitude => p.amplitude.max(1e-300).ln(),
                Slot::T0 => p.t0,
                Slot::Baseline => p.baseline,
            })
            .collect()
    }

    fn expected(&self, theta: &[f64]) -> Vec<f64> {
        let p = self.params(theta);
        bin_average(self.grid, |t| p.eval(self.model, t, self.sigma))
    }

    /// Freezes the weights at `1/max(model, 1)` for the curve at `theta`.
    fn reweight(&mut self, theta: &[f64]) {
        self.sqrt_w = self.expected(theta).iter().map(|&m| 1.0 / m.max(1.0).sqrt()).collect();
    }

    fn residuals(&self, theta: &[f64]) -> Option<DVector<f64>> {
        let m = self.expected(theta);
        let r = DVector::from_iterator(
            self.y.len(),
            self.y.iter().zip(&m).zip(&self.sqrt_w).map(|((&y, &m), &w)| (y - m) * w),
        );
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    /// Counts-weighted minimization, then model reweighting until the
    /// parameters settle.
    fn solve(&mut self, theta: Vec<f64>, weighting: Weighting) -> Option<(Vec<f64>, f64, bool)> {
        let (mut theta, mut chi2, ok) = self.minimize(theta)?;
        if weighting == Weighting::Counts || !ok {
            return Some((theta, chi2, ok));
        }
        for _ in 0..REWEIGHT_ROUNDS {
            self.reweight(&theta);
            let (next, c, ok) = self.minimize(theta.clone())?;
            if !ok {
                return Some((next, c, false));
            }
            let settled = next
                .iter()
                .zip(&theta)
                .all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            theta = next;
            chi2 = c;
            if settled {
                return Some((theta, chi2, true));
            }
        }
        Some((theta, chi2, false))
    }

    fn jacobian(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.y.len(), theta.len());
        let mut th = theta.to_vec();
        for k in 0..theta.len() {
            let h = match self.free[k] {
                Slot::T0 => 1e-3,
                Slot::Baseline => 1e-4 * (1.0 + theta[k].abs()),
                _ => 1e-6,
            };
            th[k] = theta[k] + h;
            let up = self.residuals(&th)?;
            th[k] = theta[k] - h;
            let down = self.residuals(&th)?;
            th[k] = theta[k];
            j.set_column(k, &((up - down) / (2.0 * h)));
        }
        Some(j)
    }

    /// Levenberg–Marquardt from `theta`. Returns the end point, its χ², and
    /// whether the iteration converged.
    fn minimize(&self, theta: Vec<f64>) -> Option<(Vec<f64>, f64, bool)> {
        let mut theta = theta;
        let mut r = self.residuals(&theta)?;
        let mut chi2 = r.norm_squared();
        let mut lambda = 1e-3;
        for _ in 0..MAX_ITERATIONS {
            let j = self.jacobian(&theta)?;
            let a = j.transpose() * &j;
            let g = j.transpose() * &r;
            // Reduction an undamped Gauss-Newton step would achieve.
            if let Some(chol) = a.clone().cholesky() {
                let predicted = g.dot(&chol.solve(&g));
                if predicted <= 1e-12 * chi2 + 1e-300 {
                    return Some((theta, chi2, true));
                }
            }
            let mut improved = false;
            while lambda < 1e12 {
                let mut damped = a.clone();
                for k in 0..damped.nrows() {
                    damped[(k, k)] += lambda * a[(k, k)].max(1e-12);
                }
                let Some(chol) = damped.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let step = -chol.solve(&g);
                let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
                match self.residuals(&trial) {
                    Some(rt) if rt.norm_squared() <= chi2 => {
                        let new_chi2 = rt.norm_squared();
                        let small_step = step
                            .iter()
                            .zip(&trial)
                            .all(|(s, t)| s.abs() <= 1e-10 * (1.0 + t.abs()));
                        let small_gain = chi2 - new_chi2 <= 1e-12 * chi2.max(1e-300);
                        // Heavily damped steps are short regardless of distance to the optimum.
                        let trusted = lambda <= 1e2;
                        theta = trial;
                        r = rt;
                        chi2 = new_chi2;
                        lambda = (lambda * 0.3).max(1e-12);
                        improved = true;
                        if trusted && (small_step || small_gain) {
                            return Some((theta, chi2, true));
                        }
                        break;
                    }
                    _ => lambda *= 10.0,
                }
            }
            if !improved {
                // No downhill step at any damping: stationary point.
                return Some((theta, chi2, true));
            }
        }
        Some((theta, chi2, false))
    }
}

/// Heuristic start: baseline from the early bins, `t0` at the half-maximum
/// of the rising edge, slow rate from the log-slope of the tail, amplitude
/// from the peak height.
fn heuristic_start(model: FitModel, hist: &DecayHistogram, pins: &FitPins) -> Result<FitParams> {
    let c: Vec<f64> = hist.counts.iter().map(|&x| x as f64).collect();
    let n = c.len();
    let (peak_i, &peak) = c
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::FitFailure("empty histogram".into()))?;
    let edge = (n / 20).max(1);
    let head = c[..edge.min(peak_i.max(1))].iter().sum::<f64>() / edge.min(peak_i.max(1)) as f64;
    let tail = c[n - edge..].iter().sum::<f64>() / edge as f64;
    let baseline = pins.baseline.unwrap_or(head.min(tail));
    let floor = baseline + 3.0 * baseline.max(1.0).sqrt();
    let above = c.iter().filter(|&&x| x > floor).count();
    if above < 10 {
        return Err(Error::FitFailure(format!(
            "only {above} bins rise above the baseline (need at least 10)"
        )));
    }
    let half = baseline + 0.5 * (peak - baseline);
    let rise = (0..=peak_i).rev().find(|&i| c[i] < half).map_or(0, |i| i + 1);
    let t0 = pins.t0.unwrap_or(hist.bin_center(rise));

    // log-linear regression over the tail between 1/2 and 1/20 of the peak
    let (mut sx, mut sy, mut sxx, mut sxy, mut m) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in peak_i..n {
        let v = c[i] - baseline;
        if v > 0.5 * (peak - baseline) {
            continue;
        }
        if v < 0.05 * (peak - baseline) || v <= 0.0 {
            break;
        }
        let x = hist.bin_center(i);
        let y = v.ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        m += 1.0;
    }
    let slope = if m >= 3.0 {
        -(m * sxy - sx * sy) / (m * sxx - sx * sx)
    } else {
        f64::NAN
    };
    let slow = if slope.is_finite() && slope > 0.0 {
        slope
    } else {
        1.0 / ((hist.bin_center(peak_i) - t0).abs() + 5.0 * hist.bin_width)
    };
    let sigma = hist.irf_fwhm / FWHM_PER_SIGMA;
    let mut p = FitParams {
        gamma: slow,
        gamma_xx: None,
        amplitude: 1.0,
        t0,
        baseline,
    };
    if model == FitModel::Cascade {
        p.gamma_xx = Some(pins.gamma_xx.unwrap_or(2.5 * slow));
    }
    let unit = FitParams { amplitude: 1.0, baseline: 0.0, ..p };
    let shape_peak = unit.eval(model, hist.bin_center(peak_i), sigma);
    p.amplitude = ((peak - baseline).max(1.0) / shape_peak.max(1e-300)).max(1e-12);
    Ok(p)
}

/// Deterministic ±50% perturbations of the rate parameters around `base`.
fn starts(model: FitModel, base: FitParams, pins: &FitPins) -> Vec<FitParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = vec![base];
    while out.len() < MULTI_START_BUDGET {
        let mut p = base;
        p.gamma *= 1.0 + rng.random_range(-0.5..0.5);
        if model == FitModel::Cascade && pins.gamma_xx.is_none() {
            p.gamma_xx = p.gamma_xx.map(|g| g * (1.0 + rng.random_range(-0.5..0.5)));
        }
        if pins.t0.is_none() {
            p.t0 += rng.random_range(-0.5..0.5) * (1.0 / base.gamma).min(200.0);
        }
        out.push(p);
    }
    out
}

fn finish(problem: &Problem, theta: &[f64], chi2: f64, converged: usize, weighting: Weighting) -> FitResult {
    let (model, pins) = (problem.model, problem.pins);
    let params = problem.params(theta);
    let mut warnings = Vec::new();
    let mut ill = false;
    if let (FitModel::Cascade, Some(gxx)) = (model, params.gamma_xx) {
        if ((gxx - params.gamma) / params.gamma).abs() < 0.1 {
            ill = true;
            warnings.push("near-degenerate cascade rates (within 10%): fit is ill-conditioned".to_string());
        }
    }
    FitResult {
        model,
        params,
        pins,
        weighting,
        std: None,
        n_bootstrap: 0,
        residual_chi2: chi2,
        dof: problem.y.len().saturating_sub(problem.free.len()),
        starts_converged: converged,
        ill_conditioned: ill,
        warnings,
    }
}

/// [`fit_weighted`] with the default model weights.
pub fn fit(hist: &DecayHistogram, model: FitModel, initial: Option<FitParams>, pins: FitPins) -> Result<FitResult> {
    fit_weighted(hist, model, initial, pins, Weighting::default())
}

/// Weighted least-squares fit of bin-averaged model counts with up to 16
/// deterministic starts. Each start is first fitted with count weights; the
/// best one is then reweighted if `weighting` asks for model weights.
///
/// An unpinned cascade fit cannot tell the two rates apart from the shape
/// alone; pin `gamma_xx` from a separate XX fit.
pub fn fit_weighted(
    hist: &DecayHistogram,
    model: FitModel,
    initial: Option<FitParams>,
    pins: FitPins,
    weighting: Weighting,
) -> Result<FitResult> {
    if let Some(g) = pins.gamma_xx {
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::param("gamma_xx", "pinned rate must be finite and > 0"));
        }
    }
    let grid = simpson_grid(hist);
    let mut problem = Problem::new(model, &grid, &hist.counts, hist.irf_fwhm, pins);
    let base = match initial {
        Some(mut p) => {
            if model == FitModel::Cascade {
                p.gamma_xx = pins.gamma_xx.or(p.gamma_xx).or(Some(2.5 * p.gamma));
            }
            p.t0 = pins.t0.unwrap_or(p.t0);
            p.baseline = pins.baseline.unwrap_or(p.baseline);
            p
        }
        None => heuristic_start(model, hist, &pins)?,
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut converged = 0;
    for start in starts(model, base, &pins) {
        let Some((theta, chi2, ok)) = problem.minimize(problem.theta(&start)) else {
            continue;
        };
        if !ok {
            continue;
        }
        converged += 1;
        if best.as_ref().is_none_or(|(_, c)| chi2 < *c) {
            best = Some((theta, chi2));
        }
    }
    let (theta, chi2) = best.ok_or_else(|| {
        Error::FitFailure(format!(
            "{} model: none of {MULTI_START_BUDGET} starts converged (initial gamma {:.4e}, t0 {:.1})",
            model, base.gamma, base.t0
        ))
    })?;
    let (theta, chi2) = match weighting {
        Weighting::Counts => (theta, chi2),
        Weighting::Model => match problem.solve(theta, weighting) {
            Some((t, c, true)) => (t, c),
            _ => return Err(Error::FitFailure(format!("{model} model: reweighting did not settle"))),
        },
    };
    Ok(finish(&problem, &theta, chi2, converged, weighting))
}

/// Parametric bootstrap: resamples every bin as Poisson(fitted value), refits
/// from the base parameters, and stores the per-parameter standard
/// deviations in the returned result. Resample `i` uses ChaCha8 stream `i`
/// of `seed`, so the result does not depend on thread count.
pub fn bootstrap(hist: &DecayHistogram, base: &FitResult, n_resamples: usize, seed: u64) -> Result<FitResult> {
    if n_resamples < 2 {
        return Err(Error::param("n_resamples", "need at least 2 resamples"));
    }
    let grid = simpson_grid(hist);
    let expected: Vec<f64> = expected_counts(hist, base.model, &base.params)
        .into_iter()
        .map(|m| m.max(0.0))
        .collect();
    let fits: Vec<Option<FitParams>> = (0..n_resamples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            let counts: Vec<u64> = expected
                .iter()
                .map(|&m| if m > 0.0 { Poisson::new(m).map_or(0, |d| d.sample(&mut rng) as u64) } else { 0 })
                .collect();
            let mut problem = Problem::new(base.model, &grid, &counts, hist.irf_fwhm, base.pins);
            let start = problem.theta(&base.params);
            let (theta, _, ok) = problem.solve(start, base.weighting)?;
            ok.then(|| problem.params(&theta))
        })
        .collect();
    let ok: Vec<FitParams> = fits.into_iter().flatten().collect();
    let failed = n_resamples - ok.len();
    if failed as f64 > MAX_BOOTSTRAP_FAILURE * n_resamples as f64 || ok.len() < 2 {
        return Err(Error::BootstrapFailure {
            failed,
            total: n_resamples,
        });
    }
    let std = |f: &dyn Fn(&FitParams) -> f64| {
        let n = ok.len() as f64;
        let mean = ok.iter().map(f).sum::<f64>() / n;
        (ok.iter().map(|p| (f(p) - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let mut out = base.clone();
    out.std = Some(FitParams {
        gamma: std(&|p| p.gamma),
        gamma_xx: match (base.model, base.pins.gamma_xx) {
            (FitModel::Cascade, None) => Some(std(&|p| p.gamma_xx.unwrap_or(f64::NAN))),
            (FitModel::Cascade, Some(_)) => Some(0.0),
            _ => None,
        },
        amplitude: std(&|p| p.amplitude),
        t0: std(&|p| p.t0),
        baseline: std(&|p| p.baseline),
    });
    out.n_bootstrap = ok.len();
    if failed > 0 {
        out.warnings.push(format!("{failed} of {n_resamples} bootstrap refits failed"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channels {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PurcellReport {
    pub purcell_factor: f64,
    pub purcell_error: f64,
    /// Single-channel factor `f`; equals the Purcell factor for one channel.
    pub channel_factor: f64,
    pub channel_error: f64,
}

impl PurcellReport {
    pub fn to_record(&self) -> Record {
        let mut r = Record::new();
        r.set("purcell_factor", self.purcell_factor)
            .set("purcell_error", self.purcell_error)
            .set("channel_factor", self.channel_factor)
            .set("channel_error", self.channel_error);
        r
    }
}

/// `F_P = γ_enhanced/γ_bare` with relative errors added in quadrature;
/// for two-channel decay `f = 2·F_P − 1`.
pub fn purcell_from_rates(
    enhanced: f64,
    enhanced_std: f64,
    bare: f64,
    bare_std: f64,
    channels: Channels,
) -> Result<PurcellReport> {
    for (name, g) in [("enhanced", enhanced), ("bare", bare)] {
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::param(name, format!("rate must be finite and > 0, got {g}")));
        }
    }
    let f_p = enhanced / bare;
    let err = f_p * ((enhanced_std / enhanced).powi(2) + (bare_std / bare).powi(2)).sqrt();
    let (f, f_err) = match channels {
        Channels::One => (f_p, err),
        Channels::Two => (2.0 * f_p - 1.0, 2.0 * err),
    };
    Ok(PurcellReport {
        purcell_factor: f_p,
        purcell_error: err,
        channel_factor: f,
        channel_error: f_err,
    })
}

/// Purcell factor of the decay rate fitted in `enhanced` relative to `bare`.
pub fn purcell_report(enhanced: &FitResult, bare: &FitResult, channels: Channels) -> Result<PurcellReport> {
    let s = |r: &FitResult| r.std.map_or(0.0, |s| s.gamma);
    purcell_from_rates(enhanced.params.gamma, s(enhanced), bare.params.gamma, s(bare), channels)
}
