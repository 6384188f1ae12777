//! Monte Carlo simulation of pulsed cascade experiments.
//!
//! Every pulse `k` owns a ChaCha8 substream (`seed`, stream `k`), so the
//! output does not depend on how pulses are grouped into chunks or on the
//! number of worker threads. Pulse `k` fires at `(k + 1)·pulse_period`,
//! which keeps jittered timestamps positive.
//!
//! HOM mode models an unbalanced Mach-Zehnder: each photon takes the short
//! or the long arm with probability 1/2, the long arm adds `delay_arm`, and
//! the arms recombine on a beam splitter with reflectance `R`. A photon
//! entering from the short arm is transmitted to channel 0; one entering from
//! the long arm is transmitted to channel 1. Two quantum-dot photons that
//! meet in the same time slot interfere according to their conditional
//! wavepacket overlap.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal, Poisson};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::cascade::{effective_rates, CascadeConfig, EffectiveRates, Photon};
use crate::error::{Error, Result};
use crate::stream::{StreamHeader, TimeTag, TimeTagStream};

/// FWHM of a Gaussian in units of its standard deviation, `2√(2 ln 2)`.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

const MAX_TIMESTAMP_PS: f64 = 9.0e15; // below 2^53, so rounding is exact

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Lifetime,
    Hbt,
    Hom,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Lifetime => "lifetime",
            Mode::Hbt => "hbt",
            Mode::Hom => "hom",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lifetime" => Ok(Mode::Lifetime),
            "hbt" => Ok(Mode::Hbt),
            "hom" => Ok(Mode::Hom),
            other => Err(Error::config("mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarization {
    Co,
    Cross,
}

impl Polarization {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarization::Co => "co",
            Polarization::Cross => "cross",
        }
    }
}

impl FromStr for Polarization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "co" => Ok(Polarization::Co),
            "cross" => Ok(Polarization::Cross),
            other => Err(Error::config("polarization", format!("unknown polarization `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectionEfficiency {
    pub xx: f64,
    pub x: f64,
}

impl CollectionEfficiency {
    pub fn of(&self, photon: Photon) -> f64 {
        match photon {
            Photon::Xx => self.xx,
            Photon::X => self.x,
        }
    }
}

/// Delayed duplicate of detector clicks, e.g. from a back-reflection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Echo {
    pub probability: f64,
    pub delay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub cascade: CascadeConfig,
    /// ps
    pub pulse_period: f64,
    pub n_pulses: u64,
    pub prep_probability: f64,
    pub collection_efficiency: CollectionEfficiency,
    /// Probability that a pulse leaks at least one laser photon into the
    /// collected channel; the leaked photon number is Poissonian.
    pub leakage_prob: f64,
    /// Flat background per detector channel, 1/ps.
    pub ambient_rate: f64,
    pub irf_fwhm: f64,
    pub bs_reflectance: f64,
    pub bs_transmittance: f64,
    pub classical_visibility: f64,
    pub polarization: Polarization,
    pub delay_arm: f64,
    pub collected: Photon,
    pub echo: Option<Echo>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            cascade: CascadeConfig::reference(),
            pulse_period: 13_100.0,
            n_pulses: 1_000_000,
            prep_probability: 1.0,
            collection_efficiency: CollectionEfficiency { xx: 1.0, x: 1.0 },
            leakage_prob: 0.0,
            ambient_rate: 0.0,
            irf_fwhm: 43.0,
            bs_reflectance: 0.525,
            bs_transmittance: 0.475,
            classical_visibility: 0.985,
            polarization: Polarization::Co,
            delay_arm: 13_100.0,
            collected: Photon::Xx,
            echo: None,
            seed: 0,
        }
    }
}

fn check_probability(field: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(field, format!("must lie in [0, 1], got {p}")));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Balanced beam splitter, perfect classical visibility, no leakage or
    /// background.
    pub fn ideal(cascade: CascadeConfig) -> Self {
        ExperimentConfig {
            cascade,
            bs_reflectance: 0.5,
            bs_transmittance: 0.5,
            classical_visibility: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cascade.validate()?;
        if !(self.pulse_period > 0.0 && self.pulse_period.is_finite()) {
            return Err(Error::config("pulse_period", "must be finite and > 0"));
        }
        if self.n_pulses == 0 {
            return Err(Error::config("n_pulses", "must be >= 1"));
        }
        check_probability("prep_probability", self.prep_probability)?;
        check_probability("collection_efficiency.xx", self.collection_efficiency.xx)?;
        check_probability("collection_efficiency.x", self.collection_efficiency.x)?;
        check_probability("leakage_prob", self.leakage_prob)?;
        if self.leakage_prob == 1.0 {
            return Err(Error::config("leakage_prob", "must be < 1"));
        }
        check_probability("bs_reflectance", self.bs_reflectance)?;
        check_probability("bs_transmittance", self.bs_transmittance)?;
        check_probability("classical_visibility", self.classical_visibility)?;
        if (self.bs_reflectance + self.bs_transmittance - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "bs_transmittance",
                format!(
                    "bs_reflectance + bs_transmittance must equal 1, got {} + {}",
                    self.bs_reflectance, self.bs_transmittance
                ),
            ));
        }
        if !(self.ambient_rate >= 0.0 && self.ambient_rate.is_finite()) {
            return Err(Error::config("ambient_rate", "must be finite and >= 0"));
        }
        if !(self.irf_fwhm >= 0.0 && self.irf_fwhm.is_finite()) {
            return Err(Error::config("irf_fwhm", "must be finite and >= 0"));
        }
        if !(self.delay_arm >= 0.0 && self.delay_arm.is_finite()) {
            return Err(Error::config("delay_arm", "must be finite and >= 0"));
        }
        if let Some(echo) = self.echo {
            check_probability("echo.probability", echo.probability)?;
            if !(echo.delay >= 0.0 && echo.delay.is_finite()) {
                return Err(Error::config("echo.delay", "must be finite and >= 0"));
            }
        }
        let rates = effective_rates(&self.cascade)?;
        let span = (self.n_pulses as f64 + 2.0) * self.pulse_period
            + self.delay_arm
            + self.echo.map_or(0.0, |e| e.delay)
            + 1000.0 * rates.tau_max();
        if span > MAX_TIMESTAMP_PS {
            return Err(Error::config(
                "n_pulses",
                format!("timestamps would reach {span:.3e} ps, beyond the representable range"),
            ));
        }
        Ok(())
    }

    /// Non-fatal concerns about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Ok(rates) = effective_rates(&self.cascade) {
            if self.pulse_period < 10.0 * rates.tau_max() {
                out.push(format!(
                    "pulse_period {} ps is shorter than 10 lifetimes ({:.1} ps); peaks will overlap",
                    self.pulse_period,
                    10.0 * rates.tau_max()
                ));
            }
        }
        out
    }

    /// Stable `key=value` rendering used for digests. Floats use Rust's
    /// shortest round-trip formatting, which is platform independent.
    pub fn canonical_text(&self) -> String {
        let c = &self.cascade;
        let mut lines = vec![
            format!("cascade.gamma_xx_bare={:?}", c.gamma_xx_bare),
            format!("cascade.gamma_x_bare={:?}", c.gamma_x_bare),
            format!("cascade.channel_enhancement={:?}", c.channel_enhancement),
            format!("cascade.kappa={:?}", c.kappa),
            format!("cascade.detuning_xx={:?}", c.detuning_xx),
            format!("cascade.detuning_x={:?}", c.detuning_x),
            format!("cascade.second_mode_offset={:?}", c.second_mode_offset),
            format!("cascade.p_xx_initial={:?}", c.p_xx_initial),
            format!("pulse_period={:?}", self.pulse_period),
            format!("n_pulses={}", self.n_pulses),
            format!("prep_probability={:?}", self.prep_probability),
            format!("collection_efficiency.xx={:?}", self.collection_efficiency.xx),
            format!("collection_efficiency.x={:?}", self.collection_efficiency.x),
            format!("leakage_prob={:?}", self.leakage_prob),
            format!("ambient_rate={:?}", self.ambient_rate),
            format!("irf_fwhm={:?}", self.irf_fwhm),
            format!("bs_reflectance={:?}", self.bs_reflectance),
            format!("bs_transmittance={:?}", self.bs_transmittance),
            format!("classical_visibility={:?}", self.classical_visibility),
            format!("polarization={}", self.polarization.as_str()),
            format!("delay_arm={:?}", self.delay_arm),
            format!("collected={}", self.collected.as_str()),
        ];
        match self.echo {
            Some(e) => lines.push(format!("echo={:?},{:?}", e.probability, e.delay)),
            None => lines.push("echo=none".into()),
        }
        lines.push(format!("seed={}", self.seed));
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }

    /// SHA-256 of [`canonical_text`](Self::canonical_text), hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }
}

/// Emission times of one cascade, relative to its excitation pulse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmissionEvent {
    pub pulse_index: u64,
    pub t_xx: f64,
    pub t_x: f64,
}

impl EmissionEvent {
    pub fn time_of(&self, photon: Photon) -> f64 {
        match photon {
            Photon::Xx => self.t_xx,
            Photon::X => self.t_x,
        }
    }
}

pub fn sample_cascade<R: Rng + ?Sized>(rng: &mut R, rates: &EffectiveRates, pulse_index: u64) -> EmissionEvent {
    let a: f64 = Exp1.sample(rng);
    let b: f64 = Exp1.sample(rng);
    let t_xx = a / rates.gamma_xx;
    EmissionEvent {
        pulse_index,
        t_xx,
        t_x: t_xx + b / rates.gamma_x,
    }
}

/// `ln ∫₀ˢ e^{g t} dt`, evaluated without cancellation.
fn ln_truncated_norm(g: f64, s: f64) -> f64 {
    let gs = g * s;
    if gs.abs() < 1e-12 {
        s.ln() + gs / 2.0
    } else if g > 0.0 {
        gs + (-(-gs).exp_m1()).ln() - g.ln()
    } else {
        (-gs.exp_m1()).ln() - (-g).ln()
    }
}

/// Magnitude of the overlap between the conditional single-photon states of
/// two independent cascades.
///
/// An X photon conditioned on its partner's emission at `t_xx` is an
/// exponential wavepacket launched at `t_xx`. An XX photon conditioned on
/// the X emission at `s = t_x` has `|ψ_s(t)|² ∝ e^{(γ_X−γ_XX) t}` on
/// `[0, s]`, so `|O| = √(N(min s)/N(max s))` with `N` its normalization.
pub fn conditional_overlap(photon: Photon, a: &EmissionEvent, b: &EmissionEvent, rates: &EffectiveRates) -> f64 {
    match photon {
        Photon::X => (-0.5 * rates.gamma_x * (a.t_xx - b.t_xx).abs()).exp(),
        Photon::Xx => {
            let (lo, hi) = if a.t_x <= b.t_x { (a.t_x, b.t_x) } else { (b.t_x, a.t_x) };
            if lo == hi {
                return 1.0;
            }
            if lo <= 0.0 {
                return 0.0;
            }
            let g = if rates.is_degenerate() { 0.0 } else { rates.gamma_x - rates.gamma_xx };
            (0.5 * (ln_truncated_norm(g, lo) - ln_truncated_norm(g, hi))).exp().min(1.0)
        }
    }
}

/// Probability that two photons entering opposite beam-splitter ports leave
/// through different ports.
pub fn coincidence_probability(overlap: f64, config: &ExperimentConfig) -> f64 {
    let (r, t) = (config.bs_reflectance, config.bs_transmittance);
    let distinguishable = r * r + t * t;
    match config.polarization {
        Polarization::Cross => distinguishable,
        Polarization::Co => {
            let cv = config.classical_visibility;
            (distinguishable - 2.0 * r * t * cv * cv * overlap * overlap).max(0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HomOutcome {
    /// Both photons leave through the same output channel.
    SamePort(u8),
    /// One photon per output; channels of the short-arm and long-arm photons.
    Coincidence { short: u8, long: u8 },
}

pub fn hom_click<R: Rng + ?Sized>(rng: &mut R, overlap: f64, config: &ExperimentConfig) -> HomOutcome {
    let p = coincidence_probability(overlap, config);
    let (r, t) = (config.bs_reflectance, config.bs_transmittance);
    if rng.random::<f64>() < p {
        // both transmitted (T²) or both reflected (R²)
        if rng.random::<f64>() * (r * r + t * t) < t * t {
            HomOutcome::Coincidence { short: 0, long: 1 }
        } else {
            HomOutcome::Coincidence { short: 1, long: 0 }
        }
    } else if rng.random::<f64>() < 0.5 {
        HomOutcome::SamePort(0)
    } else {
        HomOutcome::SamePort(1)
    }
}

/// Mean leakage photon number per pulse for a leakage click probability.
pub fn leakage_mean(leakage_prob: f64) -> f64 {
    -(-leakage_prob).ln_1p()
}

/// HBT `g²(0)` of a pulse train where each pulse independently yields a
/// signal photon with probability `signal` and Poissonian leakage with at
/// least one photon with probability `leakage`.
pub fn expected_hbt_g2(signal: f64, leakage: f64) -> f64 {
    let mu = leakage_mean(leakage);
    let n = signal + mu;
    if n == 0.0 {
        return 0.0;
    }
    (2.0 * signal * mu + mu * mu) / (n * n)
}

/// Inverse of [`expected_hbt_g2`]: the leakage probability that produces
/// `target_g2` for a given per-pulse signal probability.
pub fn leakage_for_target_g2(signal: f64, target_g2: f64) -> Result<f64> {
    if !(signal > 0.0 && signal <= 1.0) {
        return Err(Error::param("signal", format!("must lie in (0, 1], got {signal}")));
    }
    if !(0.0..1.0).contains(&target_g2) {
        return Err(Error::param("target_g2", format!("must lie in [0, 1), got {target_g2}")));
    }
    let mu = signal * (1.0 / (1.0 - target_g2).sqrt() - 1.0);
    Ok(-(-mu).exp_m1())
}

#[derive(Debug, Clone, Copy)]
struct PulseDraw {
    event: Option<EmissionEvent>,
    photon: bool,
    photon_long: bool,
    leak_short: u32,
    leak_long: u32,
}

/// Poisson variate by CDF inversion of a single uniform.
fn poisson_count(u: f64, mean: f64) -> u32 {
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut k = 0;
    while u > cdf && k < 10_000 {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
    }
    k
}

fn pulse_rng(seed: u64, pulse: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pulse);
    rng
}

struct Sim<'a> {
    cfg: &'a ExperimentConfig,
    mode: Mode,
    rates: EffectiveRates,
    jitter: Option<Normal<f64>>,
    ambient: Option<Poisson<f64>>,
}

impl Sim<'_> {
    fn draw_pulse(&self, rng: &mut ChaCha8Rng, k: u64) -> PulseDraw {
        let cfg = self.cfg;
        let event = if rng.random::<f64>() < cfg.prep_probability {
            Some(sample_cascade(rng, &self.rates, k))
        } else {
            None
        };
        let collected = rng.random::<f64>() < cfg.collection_efficiency.of(cfg.collected);
        let leaked = poisson_count(rng.random::<f64>(), leakage_mean(cfg.leakage_prob));
        let photon_long = rng.random::<f64>() < 0.5;
        let leak_long = (0..leaked).filter(|_| rng.random::<f64>() < 0.5).count() as u32;
        PulseDraw {
            event,
            photon: event.is_some() && collected,
            photon_long,
            leak_short: leaked - leak_long,
            leak_long,
        }
    }

    fn pulse_time(&self, k: u64) -> f64 {
        (k + 1) as f64 * self.cfg.pulse_period
    }

    fn click(&self, rng: &mut ChaCha8Rng, channel: u8, t: f64, out: &mut Vec<TimeTag>) {
        let t = match &self.jitter {
            Some(n) => t + n.sample(rng),
            None => t,
        };
        out.push(TimeTag::new(channel, t.round() as i64));
        if let Some(echo) = self.cfg.echo {
            if rng.random::<f64>() < echo.probability {
                out.push(TimeTag::new(channel, (t + echo.delay).round() as i64));
            }
        }
    }

    fn ambient(&self, rng: &mut ChaCha8Rng, k: u64, channels: &[u8], out: &mut Vec<TimeTag>) {
        let Some(poisson) = &self.ambient else { return };
        let start = self.pulse_time(k);
        for &ch in channels {
            let n = poisson.sample(rng) as u64;
            for _ in 0..n {
                let t = start + rng.random::<f64>() * self.cfg.pulse_period;
                out.push(TimeTag::new(ch, t.round() as i64));
            }
        }
    }

    fn route(&self, rng: &mut ChaCha8Rng, p_channel0: f64) -> u8 {
        if rng.random::<f64>() < p_channel0 {
            0
        } else {
            1
        }
    }

    fn run(&self, slots: Range<u64>) -> Vec<TimeTag> {
        let mut out = Vec::new();
        let n = self.cfg.n_pulses;
        let mut prev = if self.mode == Mode::Hom && slots.start > 0 {
            let k = slots.start - 1;
            Some(self.draw_pulse(&mut pulse_rng(self.cfg.seed, k), k))
        } else {
            None
        };
        for s in slots {
            let mut rng = pulse_rng(self.cfg.seed, s);
            let cur = (s < n).then(|| self.draw_pulse(&mut rng, s));
            match self.mode {
                Mode::Lifetime => self.lifetime_slot(&mut rng, s, cur.as_ref(), &mut out),
                Mode::Hbt => self.hbt_slot(&mut rng, s, cur.as_ref(), &mut out),
                Mode::Hom => self.hom_slot(&mut rng, s, prev.as_ref(), cur.as_ref(), &mut out),
            }
            prev = cur;
        }
        out
    }

    fn lifetime_slot(&self, rng: &mut ChaCha8Rng, k: u64, cur: Option<&PulseDraw>, out: &mut Vec<TimeTag>) {
        let Some(p) = cur else { return };
        let t0 = self.pulse_time(k);
        out.push(TimeTag::new(0, t0.round() as i64));
        if p.photon {
            let e = p.event.expect("collected photon without emission");
            self.click(rng, 1, t0 + e.time_of(self.cfg.collected), out);
        }
        for _ in 0..p.leak_short + p.leak_long {
            self.click(rng, 1, t0, out);
        }
        self.ambient(rng, k, &[1], out);
    }

    fn hbt_slot(&self, rng: &mut ChaCha8Rng, k: u64, cur: Option<&PulseDraw>, out: &mut Vec<TimeTag>) {
        let Some(p) = cur else { return };
        let t0 = self.pulse_time(k);
        if p.photon {
            let e = p.event.expect("collected photon without emission");
            let ch = self.route(rng, 0.5);
            self.click(rng, ch, t0 + e.time_of(self.cfg.collected), out);
        }
        for _ in 0..p.leak_short + p.leak_long {
            let ch = self.route(rng, 0.5);
            self.click(rng, ch, t0, out);
        }
        self.ambient(rng, k, &[0, 1], out);
    }

    fn hom_slot(
        &self,
        rng: &mut ChaCha8Rng,
        s: u64,
        prev: Option<&PulseDraw>,
        cur: Option<&PulseDraw>,
        out: &mut Vec<TimeTag>,
    ) {
        let photon = self.cfg.collected;
        let t_short = self.pulse_time(s);
        let t_long = t_short - self.cfg.pulse_period + self.cfg.delay_arm;
        let (t, r) = (self.cfg.bs_transmittance, self.cfg.bs_reflectance);

        let short_qd = cur.filter(|p| p.photon && !p.photon_long).and_then(|p| p.event);
        let long_qd = prev.filter(|p| p.photon && p.photon_long).and_then(|p| p.event);
        match (short_qd, long_qd) {
            (Some(a), Some(b)) => {
                let overlap = conditional_overlap(photon, &a, &b, &self.rates);
                let ta = t_short + a.time_of(photon);
                let tb = t_long + b.time_of(photon);
                match hom_click(rng, overlap, self.cfg) {
                    HomOutcome::SamePort(ch) => {
                        self.click(rng, ch, ta, out);
                        self.click(rng, ch, tb, out);
                    }
                    HomOutcome::Coincidence { short, long } => {
                        self.click(rng, short, ta, out);
                        self.click(rng, long, tb, out);
                    }
                }
            }
            (Some(a), None) => {
                let ch = self.route(rng, t);
                self.click(rng, ch, t_short + a.time_of(photon), out);
            }
            (None, Some(b)) => {
                let ch = self.route(rng, r);
                self.click(rng, ch, t_long + b.time_of(photon), out);
            }
            (None, None) => {}
        }
        for _ in 0..cur.map_or(0, |p| p.leak_short) {
            let ch = self.route(rng, t);
            self.click(rng, ch, t_short, out);
        }
        for _ in 0..prev.map_or(0, |p| p.leak_long) {
            let ch = self.route(rng, r);
            self.click(rng, ch, t_long, out);
        }
        if s < self.cfg.n_pulses {
            self.ambient(rng, s, &[0, 1], out);
        }
    }
}

/// Simulates `config` in `mode`, splitting the pulses into one chunk per
/// worker thread of the current rayon pool.
pub fn simulate(config: &ExperimentConfig, mode: Mode) -> Result<TimeTagStream> {
    simulate_chunked(config, mode, rayon::current_num_threads().max(1))
}

/// As [`simulate`], with an explicit chunk count. The output is identical
/// for every `n_chunks`.
pub fn simulate_chunked(config: &ExperimentConfig, mode: Mode, n_chunks: usize) -> Result<TimeTagStream> {
    config.validate()?;
    let rates = effective_rates(&config.cascade)?;
    let sigma = config.irf_fwhm / FWHM_PER_SIGMA;
    let jitter = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
    let mean_ambient = config.ambient_rate * config.pulse_period;
    let ambient = (mean_ambient > 0.0)
        .then(|| Poisson::new(mean_ambient))
        .transpose()
        .map_err(|e| Error::config("ambient_rate", e.to_string()))?;
    let sim = Sim {
        cfg: config,
        mode,
        rates,
        jitter,
        ambient,
    };

    // HOM has one extra slot for the long-arm photon of the final pulse.
    let n_slots = config.n_pulses + u64::from(mode == Mode::Hom);
    let n_chunks = (n_chunks.max(1) as u64).min(n_slots);
    let per = n_slots.div_ceil(n_chunks);
    let chunks: Vec<Range<u64>> = (0..n_chunks)
        .map(|i| (i * per).min(n_slots)..((i + 1) * per).min(n_slots))
        .filter(|r| !r.is_empty())
        .collect();
    let parts: Vec<Vec<TimeTag>> = chunks.into_par_iter().map(|r| sim.run(r)).collect();
    let mut records: Vec<TimeTag> = parts.concat();
    records.par_sort_unstable();

    let mut header = StreamHeader {
        config_digest: config.digest(),
        seed: config.seed,
        fields: Vec::new(),
    };
    header.set("mode", mode);
    header.set("pulse_period_ps", config.pulse_period);
    header.set("n_pulses", config.n_pulses);
    header.set("collected", config.collected);
    if mode == Mode::Hom {
        header.set("polarization", config.polarization.as_str());
    }
    Ok(TimeTagStream { header, records })
}
