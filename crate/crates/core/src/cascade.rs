//! Analytic physics of the biexciton (XX) to exciton (X) cascade.
//!
//! Rates are in 1/ps, times in ps and cavity frequencies in GHz. The cavity
//! enhances a decay channel through a Lorentzian Purcell profile; the
//! biexciton has two channels of which only one couples to the fundamental
//! mode. The density-matrix purity computed by [`reduced_purity`] is an
//! independent numerical route to the visibility law returned by
//! [`visibility_from_ratio`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Frequency separation of the XX and X lines.
pub const BINDING_ENERGY_GHZ: f64 = 690.0;

/// Relative rate difference below which the cascade is treated as degenerate.
pub const DEGENERATE_RATE_TOLERANCE: f64 = 1e-6;

/// Largest tolerated deviation of the discretized reduced-state trace from one.
pub const TRACE_DRIFT_TOLERANCE: f64 = 1e-3;

/// Which photon of the cascade is being described.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Photon {
    Xx,
    X,
}

impl Photon {
    pub fn as_str(self) -> &'static str {
        match self {
            Photon::Xx => "xx",
            Photon::X => "x",
        }
    }
}

impl fmt::Display for Photon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Photon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xx" | "biexciton" => Ok(Photon::Xx),
            "x" | "exciton" => Ok(Photon::X),
            other => Err(Error::param("photon", format!("unknown photon `{other}`"))),
        }
    }
}

/// Bare rates, cavity parameters and detunings of one quantum dot.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    /// Total bare XX decay rate, twice the single-channel rate.
    pub gamma_xx_bare: f64,
    pub gamma_x_bare: f64,
    /// Single-channel Purcell enhancement on resonance.
    pub channel_enhancement: f64,
    /// Cavity linewidth (FWHM), GHz.
    pub kappa: f64,
    pub detuning_xx: f64,
    pub detuning_x: f64,
    /// Offset of a second cavity mode coupling to the other XX channel.
    pub second_mode_offset: Option<f64>,
    pub p_xx_initial: f64,
}

impl CascadeConfig {
    /// Measured quantum-dot parameters: bare lifetimes 263 ps (XX) and
    /// 484 ps (X), f = 11.3, κ = 25 GHz, cavity resonant with the XX line.
    pub fn reference() -> Self {
        CascadeConfig {
            gamma_xx_bare: 1.0 / 263.0,
            gamma_x_bare: 1.0 / 484.0,
            channel_enhancement: 11.3,
            kappa: 25.0,
            detuning_xx: 0.0,
            detuning_x: BINDING_ENERGY_GHZ,
            second_mode_offset: None,
            p_xx_initial: 1.0,
        }
    }

    /// A dot with the given lifetimes and no cavity enhancement.
    pub fn unenhanced(tau_xx: f64, tau_x: f64) -> Self {
        CascadeConfig {
            gamma_xx_bare: 1.0 / tau_xx,
            gamma_x_bare: 1.0 / tau_x,
            channel_enhancement: 1.0,
            ..Self::reference()
        }
    }

    /// Sets the cavity detuning from the XX line and places the X line one
    /// binding energy further away.
    pub fn tuned(mut self, detuning_xx: f64) -> Self {
        self.detuning_xx = detuning_xx;
        self.detuning_x = detuning_xx + BINDING_ENERGY_GHZ;
        self
    }

    pub fn with_second_mode(mut self, offset: f64) -> Self {
        self.second_mode_offset = Some(offset);
        self
    }

    pub fn validate(&self) -> Result<()> {
        positive("gamma_xx_bare", self.gamma_xx_bare)?;
        positive("gamma_x_bare", self.gamma_x_bare)?;
        positive("kappa", self.kappa)?;
        if !(self.channel_enhancement >= 1.0) || !self.channel_enhancement.is_finite() {
            return Err(Error::config(
                "channel_enhancement",
                format!("must be finite and >= 1, got {}", self.channel_enhancement),
            ));
        }
        for (field, value) in [
            ("detuning_xx", self.detuning_xx),
            ("detuning_x", self.detuning_x),
        ] {
            if !value.is_finite() {
                return Err(Error::config(field, "must be finite"));
            }
        }
        if self.detuning_xx == 0.0 && self.detuning_x == 0.0 {
            return Err(Error::config(
                "detuning_x",
                "the cavity cannot be resonant with both transitions",
            ));
        }
        if let Some(offset) = self.second_mode_offset {
            if !offset.is_finite() {
                return Err(Error::config("second_mode_offset", "must be finite"));
            }
        }
        if !(self.p_xx_initial > 0.0 && self.p_xx_initial <= 1.0) {
            return Err(Error::config(
                "p_xx_initial",
                format!("must lie in (0, 1], got {}", self.p_xx_initial),
            ));
        }
        Ok(())
    }
}

fn positive(field: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::config(
            field,
            format!("must be finite and > 0, got {value}"),
        ))
    }
}

/// Decay rates after Purcell tuning together with derived lifetimes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveRates {
    pub gamma_xx: f64,
    pub gamma_x: f64,
    pub tau_xx: f64,
    pub tau_x: f64,
    /// τ_XX / τ_X
    pub ratio: f64,
}

impl EffectiveRates {
    pub fn from_rates(gamma_xx: f64, gamma_x: f64) -> Result<Self> {
        for (name, g) in [("gamma_xx", gamma_xx), ("gamma_x", gamma_x)] {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::param(name, format!("rate must be finite and > 0, got {g}")));
            }
        }
        Ok(EffectiveRates {
            gamma_xx,
            gamma_x,
            tau_xx: 1.0 / gamma_xx,
            tau_x: 1.0 / gamma_x,
            ratio: gamma_x / gamma_xx,
        })
    }

    pub fn from_lifetimes(tau_xx: f64, tau_x: f64) -> Result<Self> {
        if !(tau_xx > 0.0 && tau_x > 0.0) {
            return Err(Error::param("tau", "lifetimes must be > 0"));
        }
        Self::from_rates(1.0 / tau_xx, 1.0 / tau_x)
    }

    pub fn tau_max(&self) -> f64 {
        self.tau_xx.max(self.tau_x)
    }

    pub fn tau_min(&self) -> f64 {
        self.tau_xx.min(self.tau_x)
    }

    pub fn is_degenerate(&self) -> bool {
        ((self.gamma_x - self.gamma_xx) / self.gamma_xx).abs() < DEGENERATE_RATE_TOLERANCE
    }
}

/// Uniform grid `0, h, 2h, ..., t_max` used by the purity oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_max: f64,
    pub n_points: usize,
}

impl TimeGrid {
    pub const DEFAULT_SPAN: f64 = 15.0;
    pub const DEFAULT_POINTS: usize = 2000;
    /// Minimum number of grid steps per shortest lifetime chosen by [`TimeGrid::for_rates`].
    pub const STEPS_PER_LIFETIME: f64 = 16.0;

    pub fn new(t_max: f64, n_points: usize) -> Result<Self> {
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(Error::param("t_max", format!("must be > 0, got {t_max}")));
        }
        if n_points < 2 {
            return Err(Error::param("n_points", "need at least two points"));
        }
        Ok(TimeGrid { t_max, n_points })
    }

    /// Covers `DEFAULT_SPAN` longest lifetimes with at least
    /// `DEFAULT_POINTS` points, refining until the shortest lifetime spans
    /// `STEPS_PER_LIFETIME` steps.
    pub fn for_rates(rates: &EffectiveRates) -> Self {
        let t_max = Self::DEFAULT_SPAN * rates.tau_max();
        let needed = (t_max * Self::STEPS_PER_LIFETIME / rates.tau_min()).ceil() as usize + 1;
        TimeGrid {
            t_max,
            n_points: needed.max(Self::DEFAULT_POINTS),
        }
    }

    pub fn spacing(&self) -> f64 {
        self.t_max / (self.n_points - 1) as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.spacing()
    }
}

/// Lorentzian Purcell profile `1 / (1 + (2Δ/κ)²)`.
pub fn lorentzian_enhancement(detuning: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::param("kappa", format!("must be > 0, got {kappa}")));
    }
    let x = 2.0 * detuning / kappa;
    Ok(1.0 / (1.0 + x * x))
}

pub fn effective_rates(config: &CascadeConfig) -> Result<EffectiveRates> {
    config.validate()?;
    let f = config.channel_enhancement;
    let channel = |detuning: f64| -> Result<f64> {
        Ok(1.0 + (f - 1.0) * lorentzian_enhancement(detuning, config.kappa)?)
    };

    let single_channel = config.gamma_xx_bare / 2.0;
    let other_channel = match config.second_mode_offset {
        Some(offset) => channel(config.detuning_xx - offset)?,
        None => 1.0,
    };
    let gamma_xx = single_channel * (channel(config.detuning_xx)? + other_channel);
    let gamma_x = config.gamma_x_bare * channel(config.detuning_x)?;
    EffectiveRates::from_rates(gamma_xx, gamma_x)
}

/// Total XX Purcell factor `(1 + f) / 2` when one of two channels is enhanced.
pub fn purcell_factor_xx(f: f64) -> Result<f64> {
    if !(f >= 1.0) {
        return Err(Error::param("f", format!("must be >= 1, got {f}")));
    }
    Ok((1.0 + f) / 2.0)
}

/// Two-photon interference visibility `1 / (1 + τ_XX/τ_X)` of either photon.
pub fn visibility_from_ratio(ratio: f64) -> Result<f64> {
    if !(ratio >= 0.0) {
        return Err(Error::param("ratio", format!("must be >= 0, got {ratio}")));
    }
    Ok(1.0 / (1.0 + ratio))
}

/// Exciton population after a pulse that prepares the biexciton with
/// probability `p_xx_initial`.
pub fn cascade_population_x(t: f64, rates: &EffectiveRates, p_xx_initial: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::param("t", format!("must be >= 0, got {t}")));
    }
    let (gxx, gx) = (rates.gamma_xx, rates.gamma_x);
    if rates.is_degenerate() {
        let mean = 0.5 * (gxx + gx);
        return Ok(p_xx_initial * gxx * t * (-mean * t).exp());
    }
    let delta = gx - gxx;
    // e^{-γxx t} - e^{-γx t} = -e^{-γxx t} · expm1(-δ t)
    Ok(p_xx_initial * gxx / delta * (-gxx * t).exp() * -(-delta * t).exp_m1())
}

/// Two-photon amplitude ψ(t1, t2) of XX emission at `t1` followed by X emission at `t2`.
pub fn joint_amplitude(t1: f64, t2: f64, rates: &EffectiveRates) -> f64 {
    if t1 < 0.0 || t2 < t1 {
        return 0.0;
    }
    (rates.gamma_xx * rates.gamma_x).sqrt()
        * (-0.5 * rates.gamma_xx * t1).exp()
        * (-0.5 * rates.gamma_x * (t2 - t1)).exp()
}

/// Purity `Tr ρ²` of one photon's reduced state, obtained by tracing the
/// two-photon state over the partner's emission time on `grid`.
///
/// All integrals use trapezoid weights. Inner integrals run over the part
/// of the grid where the amplitude is supported (`t1 ≤ t2`), so the diagonal
/// edge is treated as an integration limit rather than a jump inside a cell.
pub fn reduced_purity(photon: Photon, rates: &EffectiveRates, grid: &TimeGrid) -> Result<f64> {
    if grid.n_points < 400 {
        return Err(Error::param(
            "grid",
            format!("need at least 400 points, got {}", grid.n_points),
        ));
    }
    if grid.t_max < 10.0 * rates.tau_max() {
        return Err(Error::param(
            "grid",
            format!(
                "t_max {} ps covers fewer than 10 lifetimes ({} ps)",
                grid.t_max,
                rates.tau_max()
            ),
        ));
    }

    let n = grid.n_points;
    let h = grid.spacing();
    let weight = |i: usize| if i == 0 || i == n - 1 { 0.5 * h } else { h };
    let scale = rates.gamma_xx * rates.gamma_x;
    // Off-diagonal decay of the partner amplitude, e^{-γ_X k h / 2}.
    let offset: Vec<f64> = (0..n)
        .map(|k| (-0.5 * rates.gamma_x * k as f64 * h).exp())
        .collect();
    let step = (-rates.gamma_x * h).exp();

    // Reduced state ρ(i, j) = scale · left[i] · right[j] · offset[j - i] for i <= j.
    let (left, right): (Vec<f64>, Vec<f64>) = match photon {
        Photon::Xx => {
            // Partner integral over [t_j, t_max] of e^{-γ_X (t - t_j)}.
            let mut tail = vec![0.0; n];
            let mut s = 0.5 * h;
            for m in (0..n - 1).rev() {
                s = h + step * s;
                tail[m] = s - 0.5 * h;
            }
            let decay: Vec<f64> = (0..n)
                .map(|i| (-0.5 * rates.gamma_xx * grid.time(i)).exp())
                .collect();
            let right = decay.iter().zip(&tail).map(|(d, r)| d * r).collect();
            (decay, right)
        }
        Photon::X => {
            // Partner integral over [0, t_i] of e^{-γ_XX s} e^{-γ_X (t_i - s)}.
            let mut head = vec![0.0; n];
            let mut p = 0.5 * h;
            for (j, slot) in head.iter_mut().enumerate().skip(1) {
                let feed = (-rates.gamma_xx * grid.time(j)).exp();
                p = step * p + h * feed;
                *slot = p - 0.5 * h * feed;
            }
            (head, vec![1.0; n])
        }
    };

    let rho = |i: usize, j: usize| scale * left[i] * right[j] * offset[j - i];

    let trace: f64 = (0..n).map(|i| weight(i) * rho(i, i)).sum();
    if !((trace - 1.0).abs() <= TRACE_DRIFT_TOLERANCE) {
        return Err(Error::Accuracy(format!(
            "reduced-state trace {trace:.6} deviates from 1 by more than {TRACE_DRIFT_TOLERANCE}; refine the grid"
        )));
    }

    let mut sum_sq = 0.0;
    for i in 0..n {
        let wi = weight(i);
        let diag = rho(i, i);
        let mut row = 0.0;
        for j in i + 1..n {
            let r = rho(i, j);
            row += weight(j) * r * r;
        }
        sum_sq += wi * (wi * diag * diag + 2.0 * row);
    }
    Ok(sum_sq / (trace * trace))
}

/// Convenience wrapper using [`TimeGrid::for_rates`].
pub fn reduced_purity_auto(photon: Photon, rates: &EffectiveRates) -> Result<f64> {
    reduced_purity(photon, rates, &TimeGrid::for_rates(rates))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn lorentzian_examples() {
        assert_eq!(lorentzian_enhancement(0.0, 25.0).unwrap(), 1.0);
        assert!((lorentzian_enhancement(12.5, 25.0).unwrap() - 0.5).abs() < 1e-15);
        let tail = lorentzian_enhancement(690.0, 25.0).unwrap();
        assert!((tail - 1.0 / (1.0 + 55.2f64.powi(2))).abs() < 1e-18);
        assert!((tail - 3.28e-4).abs() < 5e-7);
        assert!(lorentzian_enhancement(1.0, 0.0).is_err());
        assert!(lorentzian_enhancement(1.0, -3.0).is_err());
    }

    #[test]
    fn xx_on_resonance() {
        let rates = effective_rates(&CascadeConfig::reference()).unwrap();
        assert!(close(rates.tau_xx, 263.0 * 2.0 / 12.3, 1e-12));
        assert!((rates.tau_xx - 42.8).abs() < 0.05);
        assert!(close(rates.tau_x, 484.0, 0.004));
        assert!((rates.ratio - 0.088).abs() < 0.001);
    }

    #[test]
    fn x_on_resonance() {
        let cfg = CascadeConfig::reference().tuned(-BINDING_ENERGY_GHZ);
        assert_eq!(cfg.detuning_x, 0.0);
        let rates = effective_rates(&cfg).unwrap();
        assert!(close(rates.tau_x, 484.0 / 11.3, 1e-12));
        assert!((rates.tau_x - 42.8).abs() < 0.05);
        assert!(close(rates.tau_xx, 263.0, 0.002));
        assert!((rates.ratio - 6.1).abs() < 0.05);
    }

    #[test]
    fn far_detuned_keeps_only_lorentzian_tail() {
        let mut cfg = CascadeConfig::reference();
        cfg.detuning_xx = 690.0;
        cfg.detuning_x = 690.0;
        let rates = effective_rates(&cfg).unwrap();
        let tail = 10.3 / (1.0 + 55.2f64.powi(2));
        assert!(close(rates.tau_xx, 263.0 / (1.0 + tail / 2.0), 1e-12));
        assert!(close(rates.tau_x, 484.0 / (1.0 + tail), 1e-12));
        assert!(close(rates.tau_xx, 263.0, 0.005));
        assert!(close(rates.tau_x, 484.0, 0.005));
    }

    #[test]
    fn rates_invariants() {
        let rates = effective_rates(&CascadeConfig::reference().tuned(7.0)).unwrap();
        assert!(close(rates.tau_xx * rates.gamma_xx, 1.0, 1e-9));
        assert!(close(rates.tau_x * rates.gamma_x, 1.0, 1e-9));
        assert!(close(rates.ratio, rates.tau_xx / rates.tau_x, 1e-9));
    }

    #[test]
    fn second_mode_shortens_xx() {
        let base = effective_rates(&CascadeConfig::reference()).unwrap();
        let split = effective_rates(&CascadeConfig::reference().with_second_mode(50.0)).unwrap();
        assert!(split.tau_xx < base.tau_xx);
        assert_eq!(split.tau_x, base.tau_x);
        // The second mode breaks the Δ → -Δ symmetry.
        let plus = effective_rates(&CascadeConfig::reference().with_second_mode(50.0).tuned(20.0)).unwrap();
        let minus = effective_rates(&CascadeConfig::reference().with_second_mode(50.0).tuned(-20.0)).unwrap();
        assert!(plus.tau_xx < minus.tau_xx);
    }

    #[test]
    fn config_validation() {
        let mut cfg = CascadeConfig::reference();
        cfg.channel_enhancement = 0.5;
        assert!(matches!(cfg.validate(), Err(Error::Config { ref field, .. }) if field == "channel_enhancement"));
        let mut cfg = CascadeConfig::reference();
        cfg.detuning_x = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = CascadeConfig::reference();
        cfg.kappa = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = CascadeConfig::reference();
        cfg.p_xx_initial = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = CascadeConfig::reference();
        cfg.gamma_x_bare = -1.0;
        assert!(effective_rates(&cfg).is_err());
    }

    #[test]
    fn purcell_factor_examples() {
        assert!((purcell_factor_xx(11.3).unwrap() - 6.15).abs() < 1e-12);
        assert_eq!(purcell_factor_xx(1.0).unwrap(), 1.0);
        assert!((purcell_factor_xx(13.8).unwrap() - 7.4).abs() < 1e-12);
        assert!(purcell_factor_xx(0.9).is_err());
    }

    #[test]
    fn visibility_examples() {
        assert_eq!(visibility_from_ratio(1.0).unwrap(), 0.5);
        assert!((visibility_from_ratio(0.65).unwrap() - 0.606).abs() < 5e-4);
        assert!((visibility_from_ratio(6.2).unwrap() - 0.1389).abs() < 5e-5);
        assert_eq!(visibility_from_ratio(0.0).unwrap(), 1.0);
        assert!(visibility_from_ratio(-0.1).is_err());
    }

    #[test]
    fn population_examples() {
        let rates = EffectiveRates::from_lifetimes(263.0, 484.0).unwrap();
        assert_eq!(cascade_population_x(0.0, &rates, 1.0).unwrap(), 0.0);
        assert!(cascade_population_x(-1.0, &rates, 1.0).is_err());

        let g = 1.0 / 300.0;
        let flat = EffectiveRates::from_rates(g, g).unwrap();
        let peak = cascade_population_x(1.0 / g, &flat, 0.7).unwrap();
        assert!(close(peak, 0.7 * (-1.0f64).exp(), 1e-14));

        // dp/dt = 0 at ln(γxx/γx) / (γxx - γx)
        let t_peak = (rates.gamma_xx / rates.gamma_x).ln() / (rates.gamma_xx - rates.gamma_x);
        assert!((t_peak - 351.0).abs() < 1.0);
        let p = |t: f64| cascade_population_x(t, &rates, 1.0).unwrap();
        assert!(p(t_peak) > p(t_peak - 1.0) && p(t_peak) > p(t_peak + 1.0));
    }

    #[test]
    fn population_continuous_across_degenerate_switch() {
        let gxx = 1.0 / 250.0;
        let eps = 1e-6;
        let below = EffectiveRates::from_rates(gxx, gxx * (1.0 + DEGENERATE_RATE_TOLERANCE * (1.0 - eps))).unwrap();
        let above = EffectiveRates::from_rates(gxx, gxx * (1.0 + DEGENERATE_RATE_TOLERANCE * (1.0 + eps))).unwrap();
        assert!(below.is_degenerate() && !above.is_degenerate());
        for t in [0.5, 10.0, 250.0, 1000.0, 5000.0] {
            let a = cascade_population_x(t, &below, 1.0).unwrap();
            let b = cascade_population_x(t, &above, 1.0).unwrap();
            assert!(((a - b) / b).abs() < 1e-9, "t={t}: {a} vs {b}");
        }
    }

    #[test]
    fn joint_amplitude_support() {
        let rates = EffectiveRates::from_lifetimes(100.0, 200.0).unwrap();
        assert_eq!(joint_amplitude(5.0, 4.0, &rates), 0.0);
        assert_eq!(joint_amplitude(-1.0, 4.0, &rates), 0.0);
        assert!(joint_amplitude(4.0, 4.0, &rates) > 0.0);
    }

    /// Simpson rule on [0, t_max] with n (even) intervals.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + k as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn joint_amplitude_normalized() {
        let rates = EffectiveRates::from_lifetimes(263.0, 484.0).unwrap();
        let t_max = 15.0 * rates.tau_x;
        // Outer integral over t1, inner over t2 ∈ [t1, t_max].
        let total = simpson(
            |t1| simpson(|t2| joint_amplitude(t1, t2, &rates).powi(2), t1, t_max, 400),
            0.0,
            t_max,
            400,
        );
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn joint_amplitude_marginal_matches_population() {
        let rates = EffectiveRates::from_lifetimes(263.0, 484.0).unwrap();
        for t2 in [50.0, 351.0, 900.0, 2500.0] {
            let marginal = simpson(|t1| joint_amplitude(t1, t2, &rates).powi(2), 0.0, t2, 2000);
            let expected = cascade_population_x(t2, &rates, 1.0).unwrap() * rates.gamma_x;
            assert!(close(marginal, expected, 1e-8), "t2={t2}: {marginal} vs {expected}");
        }
    }

    /// Direct O(n³) construction of ρ from the amplitude matrix, used to
    /// check the factorized evaluation in `reduced_purity`.
    fn dense_purity(photon: Photon, rates: &EffectiveRates, grid: &TimeGrid) -> f64 {
        let n = grid.n_points;
        let h = grid.spacing();
        let t: Vec<f64> = (0..n).map(|i| grid.time(i)).collect();
        let psi = |a: usize, b: usize| joint_amplitude(t[a], t[b], rates);
        let trap = |lo: usize, hi: usize, k: usize| {
            if lo == hi {
                0.0
            } else if k == lo || k == hi {
                0.5 * h
            } else {
                h
            }
        };
        let mut rho = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                match photon {
                    Photon::Xx => {
                        let lo = i.max(j);
                        for k in lo..n {
                            acc += trap(lo, n - 1, k) * psi(i, k) * psi(j, k);
                        }
                    }
                    Photon::X => {
                        let hi = i.min(j);
                        for k in 0..=hi {
                            acc += trap(0, hi, k) * psi(k, i) * psi(k, j);
                        }
                    }
                }
                rho[i][j] = acc;
            }
        }
        let w = |i: usize| trap(0, n - 1, i);
        let trace: f64 = (0..n).map(|i| w(i) * rho[i][i]).sum();
        let mut sq = 0.0;
        for i in 0..n {
            for j in 0..n {
                sq += w(i) * w(j) * rho[i][j] * rho[j][i];
            }
        }
        sq / (trace * trace)
    }

    #[test]
    fn factorized_purity_matches_dense_construction() {
        let rates = EffectiveRates::from_lifetimes(30.0, 50.0).unwrap();
        let grid = TimeGrid::new(15.0 * 50.0, 400).unwrap();
        for photon in [Photon::Xx, Photon::X] {
            let fast = reduced_purity(photon, &rates, &grid).unwrap();
            let dense = dense_purity(photon, &rates, &grid);
            assert!((fast - dense).abs() < 1e-12, "{photon}: {fast} vs {dense}");
        }
    }

    #[test]
    fn purity_examples() {
        for (ratio, expected, tol) in [(1.0, 0.5, 0.002), (0.08, 0.926, 0.003), (6.2, 0.139, 0.003)] {
            let rates = EffectiveRates::from_lifetimes(ratio * 100.0, 100.0).unwrap();
            for photon in [Photon::Xx, Photon::X] {
                let p = reduced_purity_auto(photon, &rates).unwrap();
                assert!((p - expected).abs() < tol, "ratio {ratio} {photon}: {p}");
            }
        }
    }

    #[test]
    fn purity_rejects_bad_grids() {
        let rates = EffectiveRates::from_lifetimes(10.0, 100.0).unwrap();
        let short = TimeGrid::new(500.0, 2000).unwrap();
        assert!(matches!(reduced_purity(Photon::Xx, &rates, &short), Err(Error::Parameter { .. })));
        let sparse = TimeGrid::new(1500.0, 300).unwrap();
        assert!(matches!(reduced_purity(Photon::Xx, &rates, &sparse), Err(Error::Parameter { .. })));
        // 15 τ_X with 400 points leaves τ_XX = 10 ps at 2.7 steps: trace drifts.
        let coarse = TimeGrid::new(1500.0, 400).unwrap();
        assert!(matches!(reduced_purity(Photon::Xx, &rates, &coarse), Err(Error::Accuracy(_))));
    }

    #[test]
    fn purity_grid_convergence() {
        let rates = EffectiveRates::from_lifetimes(50.0, 100.0).unwrap();
        let t_max = 1500.0;
        let values: Vec<f64> = [400usize, 800, 1600, 3200]
            .iter()
            .map(|&steps| {
                let grid = TimeGrid::new(t_max, steps + 1).unwrap();
                reduced_purity(Photon::Xx, &rates, &grid).unwrap()
            })
            .collect();
        for w in values.windows(3) {
            let (d1, d2) = ((w[1] - w[0]).abs(), (w[2] - w[1]).abs());
            assert!(d1 >= 3.0 * d2, "{values:?}");
        }
    }

    #[test]
    fn oracle_matches_formula_for_both_photons() {
        for ratio in [0.01, 0.05, 0.08, 0.2, 0.5, 1.0, 2.0, 5.5, 6.2, 20.0, 100.0] {
            let rates = EffectiveRates::from_lifetimes(100.0 * ratio, 100.0).unwrap();
            let v = visibility_from_ratio(ratio).unwrap();
            let xx = reduced_purity_auto(Photon::Xx, &rates).unwrap();
            let x = reduced_purity_auto(Photon::X, &rates).unwrap();
            assert!((xx - v).abs() < 5e-3, "ratio {ratio}: XX {xx} vs {v}");
            assert!((x - v).abs() < 5e-3, "ratio {ratio}: X {x} vs {v}");
            assert!((xx - x).abs() < 2e-3, "ratio {ratio}: {xx} vs {x}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rates_even_in_detuning(d in -2000.0f64..2000.0, f in 1.0f64..30.0) {
                prop_assume!(d != 0.0 && d != -BINDING_ENERGY_GHZ);
                let base = CascadeConfig { channel_enhancement: f, ..CascadeConfig::reference() };
                let plus = CascadeConfig { detuning_xx: d, detuning_x: 400.0, ..base.clone() };
                let minus = CascadeConfig { detuning_xx: -d, detuning_x: -400.0, ..base };
                let (a, b) = (effective_rates(&plus).unwrap(), effective_rates(&minus).unwrap());
                prop_assert!((a.gamma_xx - b.gamma_xx).abs() <= 1e-15 * a.gamma_xx);
                prop_assert!((a.gamma_x - b.gamma_x).abs() <= 1e-15 * a.gamma_x);
            }

            #[test]
            fn rates_approach_bare_monotonically(d in 1.0f64..1000.0, step in 1.0f64..1000.0) {
                let cfg = CascadeConfig::reference();
                let near = effective_rates(&cfg.clone().tuned(d)).unwrap();
                let far = effective_rates(&cfg.clone().tuned(d + step)).unwrap();
                prop_assert!(far.gamma_xx <= near.gamma_xx);
                prop_assert!(far.gamma_xx >= cfg.gamma_xx_bare);
                let far_x = CascadeConfig { detuning_xx: 700.0, detuning_x: d + step, ..cfg.clone() };
                let near_x = CascadeConfig { detuning_xx: 700.0, detuning_x: d, ..cfg.clone() };
                let (gf, gn) = (effective_rates(&far_x).unwrap().gamma_x, effective_rates(&near_x).unwrap().gamma_x);
                prop_assert!(gf <= gn && gf >= cfg.gamma_x_bare);
            }

            #[test]
            fn visibility_strictly_decreasing(r in 0.0f64..1e3, dr in 1e-6f64..10.0) {
                prop_assert!(visibility_from_ratio(r + dr).unwrap() < visibility_from_ratio(r).unwrap());
            }

            #[test]
            fn rate_reciprocals(g1 in 1e-5f64..10.0, g2 in 1e-5f64..10.0) {
                let r = EffectiveRates::from_rates(g1, g2).unwrap();
                prop_assert!((r.tau_xx * g1 - 1.0).abs() < 1e-9);
                prop_assert!((r.tau_x * g2 - 1.0).abs() < 1e-9);
                prop_assert!((r.ratio - r.tau_xx / r.tau_x).abs() <= 1e-9 * r.ratio);
            }

            #[test]
            fn population_bounded(t in 0.0f64..5000.0, txx in 1.0f64..500.0, tx in 1.0f64..500.0) {
                let rates = EffectiveRates::from_lifetimes(txx, tx).unwrap();
                let n = cascade_population_x(t, &rates, 1.0).unwrap();
                prop_assert!((0.0..=1.0).contains(&n));
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn oracle_tracks_formula(log_r in -2.0f64..2.0) {
                let ratio = 10f64.powf(log_r);
                let rates = EffectiveRates::from_lifetimes(100.0 * ratio, 100.0).unwrap();
                let v = visibility_from_ratio(ratio).unwrap();
                for photon in [Photon::Xx, Photon::X] {
                    let p = reduced_purity_auto(photon, &rates).unwrap();
                    prop_assert!((p - v).abs() < 5e-3, "{photon:?} ratio {ratio}: {p} vs {v}");
                }
            }
        }
    }
}
