//! Start-stop coincidence histograms and the g²(0) / HOM analyses built on
//! them.
//!
//! Bins are `[−R + i·w, −R + (i+1)·w)` with `Δt = t₁ − t₀`; a delay of
//! exactly `+R` lands in the last bin. A bin belongs to a window when its
//! center lies in `[c − W/2, c + W/2)`, which keeps integrals over adjacent
//! windows additive.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stream::TimeTagStream;
use crate::table::{Record, Table};

pub const DEFAULT_BIN_WIDTH: i64 = 10;
pub const DEFAULT_DELAY_RANGE: i64 = 150_000;
pub const DEFAULT_SIDE_PEAKS: usize = 10;
/// Windows at or above this width are expected to contain the whole peak.
pub const PLATEAU_MIN_WINDOW: f64 = 2000.0;
/// Largest |z| of the window slope still accepted as a plateau.
pub const PLATEAU_Z: f64 = 3.0;
/// Curve changes below this are flat regardless of their significance.
pub const PLATEAU_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CoincidenceHistogram {
    pub bin_width: i64,
    pub delay_range: i64,
    pub counts: Vec<u64>,
    pub total_pairs: u64,
    pub pulse_period: f64,
}

impl CoincidenceHistogram {
    pub fn from_counts(bin_width: i64, delay_range: i64, counts: Vec<u64>, pulse_period: f64) -> Result<Self> {
        check_binning(bin_width, delay_range)?;
        let n = (2 * delay_range / bin_width) as usize;
        if counts.len() != n {
            return Err(Error::param("counts", format!("expected {n} bins, got {}", counts.len())));
        }
        let total_pairs = counts.iter().sum();
        Ok(CoincidenceHistogram {
            bin_width,
            delay_range,
            counts,
            total_pairs,
            pulse_period,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        -(self.delay_range as f64) + (i as f64 + 0.5) * self.bin_width as f64
    }

    /// Bins whose centers lie in `[center − window/2, center + window/2)`.
    pub fn window_bins(&self, center: f64, window: f64) -> Result<Range<usize>> {
        let (lo, hi) = (center - window / 2.0, center + window / 2.0);
        let r = self.delay_range as f64;
        if !(window > 0.0) || lo < -r || hi > r {
            return Err(Error::param(
                "window",
                format!("[{lo}, {hi}) ps is outside the histogram range ±{r} ps"),
            ));
        }
        let w = self.bin_width as f64;
        let first = ((lo + r) / w - 0.5).ceil().max(0.0) as usize;
        let end = (((hi + r) / w - 0.5).ceil().max(0.0) as usize).min(self.n_bins());
        Ok(first..end.max(first))
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new("xxcascade coincidence histogram v1", &["delay_ps", "counts"]);
        t.set_meta("bin_width_ps", self.bin_width);
        t.set_meta("delay_range_ps", self.delay_range);
        t.set_meta("pulse_period_ps", self.pulse_period);
        t.set_meta("total_pairs", self.total_pairs);
        for (i, &c) in self.counts.iter().enumerate() {
            t.push(vec![self.bin_center(i), c as f64]);
        }
        t
    }

    pub fn from_table(t: &Table) -> Result<Self> {
        let w = t.meta_f64("bin_width_ps")? as i64;
        let r = t.meta_f64("delay_range_ps")? as i64;
        let p = t.meta_f64("pulse_period_ps")?;
        let counts = t
            .column("counts")?
            .into_iter()
            .map(|c| {
                if c >= 0.0 && c.fract() == 0.0 {
                    Ok(c as u64)
                } else {
                    Err(Error::Format(format!("counts must be non-negative integers, got {c}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_counts(w, r, counts, p)
    }
}

fn check_binning(bin_width: i64, delay_range: i64) -> Result<()> {
    if bin_width < 1 {
        return Err(Error::param("bin_width", format!("must be >= 1 ps, got {bin_width}")));
    }
    if delay_range < 1 || (2 * delay_range) % bin_width != 0 {
        return Err(Error::param(
            "delay_range",
            format!("2·{delay_range} ps must be a positive multiple of the bin width {bin_width} ps"),
        ));
    }
    Ok(())
}

/// Histogram of `t₁ − t₀` over all channel-0/channel-1 pairs with
/// `|Δt| ≤ delay_range`. The pulse period comes from the stream header.
pub fn build_histogram(stream: &TimeTagStream, bin_width: i64, delay_range: i64) -> Result<CoincidenceHistogram> {
    check_binning(bin_width, delay_range)?;
    if !stream.is_sorted() {
        return Err(Error::Format("time-tag stream is not sorted by timestamp".into()));
    }
    let pulse_period = stream
        .header
        .pulse_period()
        .ok_or_else(|| Error::Format("stream header lacks `pulse_period_ps`".into()))?;
    let t0 = stream.channel(0);
    let t1 = stream.channel(1);
    let n = (2 * delay_range / bin_width) as usize;

    let counts = t0
        .par_chunks(4096)
        .fold(
            || vec![0u64; n],
            |mut acc, starts| {
                let mut lo = t1.partition_point(|&b| b < starts[0] - delay_range);
                for &a in starts {
                    while lo < t1.len() && t1[lo] < a - delay_range {
                        lo += 1;
                    }
                    for &b in &t1[lo..] {
                        let dt = b - a;
                        if dt > delay_range {
                            break;
                        }
                        let i = ((dt + delay_range) / bin_width) as usize;
                        acc[i.min(n - 1)] += 1;
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; n],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let total_pairs = counts.iter().sum();
    Ok(CoincidenceHistogram {
        bin_width,
        delay_range,
        counts,
        total_pairs,
        pulse_period,
    })
}

/// Raw counts in a window, with the number of bins summed.
pub fn integrate_peak_bins(hist: &CoincidenceHistogram, center: f64, window: f64) -> Result<(u64, usize)> {
    let bins = hist.window_bins(center, window)?;
    let n = bins.len();
    Ok((hist.counts[bins].iter().sum(), n))
}

pub fn integrate_peak(hist: &CoincidenceHistogram, center: f64, window: f64) -> Result<u64> {
    integrate_peak_bins(hist, center, window).map(|(c, _)| c)
}

/// Background-subtracted central peak normalized by the mean of side peaks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPeak {
    /// May be negative after over-subtraction.
    pub value: f64,
    pub error: f64,
    pub central_raw: u64,
    pub central_bins: usize,
    pub side_mean: f64,
    pub side_raw_total: u64,
    pub n_side_peaks: usize,
}

/// Side-peak orders `±first, ±(first+1), …` that fit inside the histogram,
/// alternating sides, until `n` are collected.
fn side_peak_orders(hist: &CoincidenceHistogram, window: f64, first: u32, n: usize) -> Result<Vec<i64>> {
    let fits = |k: i64| hist.window_bins(k as f64 * hist.pulse_period, window).is_ok();
    let mut orders = Vec::with_capacity(n);
    let mut k = first.max(1) as i64;
    while orders.len() < n {
        let (pos, neg) = (fits(k), fits(-k));
        if !pos && !neg {
            return Err(Error::param(
                "n_side_peaks",
                format!(
                    "histogram of ±{} ps holds only {} side peaks of width {window} ps",
                    hist.delay_range,
                    orders.len()
                ),
            ));
        }
        for (ok, order) in [(pos, k), (neg, -k)] {
            if ok && orders.len() < n {
                orders.push(order);
            }
        }
        k += 1;
    }
    Ok(orders)
}

/// Central-peak normalization shared by g²(0) and HOM. Errors use the delta
/// method with Poisson variances of the raw window sums; the background
/// level is treated as exact.
pub fn normalized_central_peak(
    hist: &CoincidenceHistogram,
    window: f64,
    n_side_peaks: usize,
    first_side_peak: u32,
    background: f64,
) -> Result<NormalizedPeak> {
    if !(hist.pulse_period > 0.0) {
        return Err(Error::param("pulse_period", "histogram has no pulse period"));
    }
    if window > hist.pulse_period {
        return Err(Error::param(
            "window",
            format!("{window} ps exceeds the pulse period {} ps", hist.pulse_period),
        ));
    }
    if n_side_peaks == 0 {
        return Err(Error::param("n_side_peaks", "must be >= 1"));
    }
    let (c_raw, c_bins) = integrate_peak_bins(hist, 0.0, window)?;
    let orders = side_peak_orders(hist, window, first_side_peak, n_side_peaks)?;
    let mut side_total = 0.0;
    let mut side_raw = 0u64;
    for &k in &orders {
        let (s, bins) = integrate_peak_bins(hist, k as f64 * hist.pulse_period, window)?;
        side_raw += s;
        side_total += s as f64 - background * bins as f64;
    }
    let n = orders.len() as f64;
    let side_mean = side_total / n;
    if !(side_mean > 0.0) {
        return Err(Error::DegenerateNormalization(format!(
            "mean side-peak counts {side_mean} in a {window} ps window"
        )));
    }
    let central = c_raw as f64 - background * c_bins as f64;
    let value = central / side_mean;
    let var_side_mean = side_raw as f64 / (n * n);
    let error = (c_raw as f64 / side_mean.powi(2) + central.powi(2) * var_side_mean / side_mean.powi(4)).sqrt();
    Ok(NormalizedPeak {
        value,
        error,
        central_raw: c_raw,
        central_bins: c_bins,
        side_mean,
        side_raw_total: side_raw,
        n_side_peaks: orders.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct G2Result {
    pub g2_zero: f64,
    pub error: f64,
    pub window: f64,
    pub n_side_peaks: usize,
    pub background_level: f64,
    pub noise_boundary: Option<f64>,
}

impl G2Result {
    pub fn to_record(&self) -> Record {
        let mut r = Record::new();
        r.set("g2_zero", self.g2_zero)
            .set("error", self.error)
            .set("window_ps", self.window)
            .set("n_side_peaks", self.n_side_peaks)
            .set("background_level", self.background_level)
            .set(
                "noise_boundary",
                self.noise_boundary.map_or("none".to_string(), |b| b.to_string()),
            )
            .set("error_model", "poisson-delta-method");
        r
    }
}

/// g²(0) from the central window normalized to `n_side_peaks` side peaks
/// (the nearest ones, alternating sides). Negative values after background
/// subtraction are reported as 0.
pub fn g2_zero(hist: &CoincidenceHistogram, window: f64, n_side_peaks: usize, background: f64) -> Result<G2Result> {
    let p = normalized_central_peak(hist, window, n_side_peaks, 1, background)?;
    Ok(G2Result {
        g2_zero: p.value.max(0.0),
        error: p.error,
        window,
        n_side_peaks: p.n_side_peaks,
        background_level: background,
        noise_boundary: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowPoint {
    pub window: f64,
    pub g2: f64,
    pub error: f64,
}

fn check_windows(hist: &CoincidenceHistogram, windows: &[f64]) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::param("windows", "empty window list"));
    }
    if windows.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::param("windows", "must be strictly ascending"));
    }
    if windows[windows.len() - 1] > hist.pulse_period {
        return Err(Error::param("windows", "largest window exceeds the pulse period"));
    }
    Ok(())
}

/// g²(0) for each window. Values are not clamped at zero, so
/// over-subtraction shows up as a falling curve.
pub fn g2_vs_window(hist: &CoincidenceHistogram, windows: &[f64], background: f64) -> Result<Vec<WindowPoint>> {
    check_windows(hist, windows)?;
    windows
        .iter()
        .map(|&w| {
            let p = normalized_central_peak(hist, w, DEFAULT_SIDE_PEAKS, 1, background)?;
            Ok(WindowPoint {
                window: w,
                g2: p.value,
                error: p.error,
            })
        })
        .collect()
}

pub fn curve_table(curve: &[WindowPoint]) -> Table {
    let mut t = Table::new("xxcascade g2 window curve v1", &["window_ps", "g2", "error"]);
    for p in curve {
        t.push(vec![p.window, p.g2, p.error]);
    }
    t
}

/// Mean counts per bin over bins with fewer than `noise_boundary` counts.
pub fn estimate_background(hist: &CoincidenceHistogram, noise_boundary: f64) -> Result<f64> {
    if !(noise_boundary > 0.0) {
        return Err(Error::param("noise_boundary", format!("must be > 0, got {noise_boundary}")));
    }
    let (sum, n) = hist
        .counts
        .iter()
        .filter(|&&c| (c as f64) < noise_boundary)
        .fold((0u64, 0u64), |(s, n), &c| (s + c, n + 1));
    Ok(if n == 0 { 0.0 } else { sum as f64 / n as f64 })
}

/// Per-candidate outcome of noise-boundary selection.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateCurve {
    pub noise_boundary: f64,
    pub background: f64,
    pub curve: Vec<WindowPoint>,
    /// Change of g² between the first window ≥ 2 ns and the widest window.
    pub slope: f64,
    /// `|slope| / error`.
    pub score: f64,
    pub plateau: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySelection {
    pub noise_boundary: f64,
    pub background: f64,
    pub diagnostics: Vec<CandidateCurve>,
}

impl BoundarySelection {
    pub fn selected(&self) -> &CandidateCurve {
        self.diagnostics
            .iter()
            .find(|c| c.noise_boundary == self.noise_boundary)
            .expect("selected candidate is among diagnostics")
    }
}

/// Flatness of a background-subtracted g² curve over windows ≥ 2 ns as
/// `(slope, |slope|/error)`.
///
/// The curve change between the narrowest plateau window `a` and the widest
/// window `b` comes only from the counts in the annulus between them, so its
/// error is √(annulus counts) / side mean. The side-peak normalization is
/// common to both points and is neglected.
pub fn flatness(hist: &CoincidenceHistogram, curve: &[WindowPoint], background: f64) -> Result<(f64, f64)> {
    let a = curve
        .iter()
        .position(|p| p.window >= PLATEAU_MIN_WINDOW)
        .ok_or_else(|| Error::param("windows", "no window of at least 2000 ps"))?;
    let b = curve.len() - 1;
    if a == b {
        return Err(Error::param("windows", "need at least two windows of at least 2000 ps"));
    }
    let inner = integrate_peak(hist, 0.0, curve[a].window)?;
    let outer = normalized_central_peak(hist, curve[b].window, DEFAULT_SIDE_PEAKS, 1, background)?;
    let annulus = outer.central_raw.saturating_sub(inner) as f64;
    let slope = curve[b].g2 - curve[a].g2;
    let error = annulus.max(1.0).sqrt() / outer.side_mean;
    Ok((slope, slope.abs() / error))
}

pub fn is_plateau(slope: f64, score: f64) -> bool {
    score < PLATEAU_Z || slope.abs() < PLATEAU_TOLERANCE
}

/// Picks the smallest noise boundary whose background-subtracted g²(window)
/// curve is flat beyond 2 ns: |z| < 3 or a change below 10⁻³.
pub fn select_noise_boundary(
    hist: &CoincidenceHistogram,
    candidates: &[f64],
    windows: &[f64],
) -> Result<BoundarySelection> {
    if candidates.len() < 2 {
        return Err(Error::param("candidates", "need at least two noise-boundary candidates"));
    }
    check_windows(hist, windows)?;
    if windows[0] > PLATEAU_MIN_WINDOW || windows[windows.len() - 1] < 12_000.0 {
        return Err(Error::param("windows", "windows must cover [2000, 12000] ps"));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut diagnostics = Vec::with_capacity(sorted.len());
    for &boundary in &sorted {
        let background = estimate_background(hist, boundary)?;
        let curve = g2_vs_window(hist, windows, background)?;
        let (slope, score) = flatness(hist, &curve, background)?;
        diagnostics.push(CandidateCurve {
            noise_boundary: boundary,
            background,
            curve,
            slope,
            score,
            plateau: is_plateau(slope, score),
        });
    }
    match diagnostics.iter().find(|c| c.plateau) {
        Some(c) => Ok(BoundarySelection {
            noise_boundary: c.noise_boundary,
            background: c.background,
            diagnostics: diagnostics.clone(),
        }),
        None => Err(Error::NoPlateau { diagnostics }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HomMethod {
    TwoConfig,
    SingleConfig,
}

impl HomMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            HomMethod::TwoConfig => "two-config",
            HomMethod::SingleConfig => "single-config",
        }
    }
}

impl std::str::FromStr for HomMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-config" => Ok(HomMethod::TwoConfig),
            "single-config" => Ok(HomMethod::SingleConfig),
            other => Err(Error::config("hom", format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomOptions {
    pub window: f64,
    pub n_side_peaks: usize,
    /// Order of the nearest side peak used for normalization. In an
    /// unbalanced interferometer the ±1 peaks carry only 3/4 of the
    /// uncorrelated coincidence rate, so the default starts at ±2.
    pub first_side_peak: u32,
    pub background_parallel: f64,
    pub background_perpendicular: f64,
}

impl Default for HomOptions {
    fn default() -> Self {
        HomOptions {
            window: 13_100.0,
            n_side_peaks: DEFAULT_SIDE_PEAKS,
            first_side_peak: 2,
            background_parallel: 0.0,
            background_perpendicular: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityReport {
    pub v_raw: f64,
    pub v_raw_error: f64,
    pub v_corrected: f64,
    pub v_corrected_error: f64,
    pub method: HomMethod,
    pub epsilon: f64,
    pub g2_zero: f64,
    pub reflectance: f64,
    pub transmittance: f64,
    pub window: f64,
    pub n_parallel: f64,
    pub n_parallel_error: f64,
    pub n_perp: Option<f64>,
    pub n_perp_error: Option<f64>,
}

impl VisibilityReport {
    /// Applies [`correct_visibility`] and scales the error by the same factor.
    pub fn corrected(mut self, epsilon: f64, g2_zero: f64, reflectance: f64, transmittance: f64) -> Result<Self> {
        let factor = correction_factor(epsilon, g2_zero, reflectance, transmittance)?;
        self.v_corrected = factor * self.v_raw;
        self.v_corrected_error = factor * self.v_raw_error;
        self.epsilon = epsilon;
        self.g2_zero = g2_zero;
        self.reflectance = reflectance;
        self.transmittance = transmittance;
        Ok(self)
    }

    pub fn to_record(&self) -> Record {
        let opt = |x: Option<f64>| x.map_or("none".to_string(), |v| v.to_string());
        let mut r = Record::new();
        r.set("v_raw", self.v_raw)
            .set("v_raw_error", self.v_raw_error)
            .set("v_corrected", self.v_corrected)
            .set("v_corrected_error", self.v_corrected_error)
            .set("method", self.method.as_str())
            .set("epsilon", self.epsilon)
            .set("g2_zero", self.g2_zero)
            .set("reflectance", self.reflectance)
            .set("transmittance", self.transmittance)
            .set("window_ps", self.window)
            .set("n_parallel", self.n_parallel)
            .set("n_parallel_error", self.n_parallel_error)
            .set("n_perp", opt(self.n_perp))
            .set("n_perp_error", opt(self.n_perp_error))
            .set("error_model", "poisson-delta-method");
        r
    }
}

/// Raw HOM visibility: `1 − n∥/n⊥` when a cross-polarized histogram is
/// given, else `1 − 2·n∥`.
pub fn hom_visibility(
    parallel: &CoincidenceHistogram,
    perpendicular: Option<&CoincidenceHistogram>,
    opts: &HomOptions,
) -> Result<VisibilityReport> {
    let par = normalized_central_peak(
        parallel,
        opts.window,
        opts.n_side_peaks,
        opts.first_side_peak,
        opts.background_parallel,
    )?;
    let (method, v_raw, v_err, n_perp, n_perp_err) = match perpendicular {
        Some(h) => {
            let perp = normalized_central_peak(
                h,
                opts.window,
                opts.n_side_peaks,
                opts.first_side_peak,
                opts.background_perpendicular,
            )?;
            if !(perp.value > 0.0) {
                return Err(Error::DegenerateNormalization(format!(
                    "cross-polarized central peak normalizes to {}",
                    perp.value
                )));
            }
            let ratio = par.value / perp.value;
            let err = ((par.error / perp.value).powi(2) + (ratio * perp.error / perp.value).powi(2)).sqrt();
            (HomMethod::TwoConfig, 1.0 - ratio, err, Some(perp.value), Some(perp.error))
        }
        None => (HomMethod::SingleConfig, 1.0 - 2.0 * par.value, 2.0 * par.error, None, None),
    };
    Ok(VisibilityReport {
        v_raw,
        v_raw_error: v_err,
        v_corrected: v_raw,
        v_corrected_error: v_err,
        method,
        epsilon: 0.0,
        g2_zero: 0.0,
        reflectance: 0.5,
        transmittance: 0.5,
        window: opts.window,
        n_parallel: par.value,
        n_parallel_error: par.error,
        n_perp,
        n_perp_error: n_perp_err,
    })
}

/// `(1−ε)⁻² (1 + 2g²) (R² + T²)/(2RT)`.
pub fn correction_factor(epsilon: f64, g2_zero: f64, reflectance: f64, transmittance: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::param("epsilon", format!("must lie in [0, 1), got {epsilon}")));
    }
    if !(g2_zero >= 0.0 && g2_zero.is_finite()) {
        return Err(Error::param("g2_zero", format!("must be finite and >= 0, got {g2_zero}")));
    }
    for (name, x) in [("reflectance", reflectance), ("transmittance", transmittance)] {
        if !(x > 0.0 && x < 1.0) {
            return Err(Error::param(name, format!("must lie in (0, 1), got {x}")));
        }
    }
    if (reflectance + transmittance - 1.0).abs() > 1e-9 {
        return Err(Error::param("transmittance", "reflectance + transmittance must equal 1"));
    }
    let (r, t) = (reflectance, transmittance);
    Ok((1.0 - epsilon).powi(-2) * (1.0 + 2.0 * g2_zero) * (r * r + t * t) / (2.0 * r * t))
}

pub fn correct_visibility(v_raw: f64, epsilon: f64, g2_zero: f64, reflectance: f64, transmittance: f64) -> Result<f64> {
    Ok(correction_factor(epsilon, g2_zero, reflectance, transmittance)? * v_raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{StreamHeader, TimeTag};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stream(records: Vec<TimeTag>) -> TimeTagStream {
        let mut header = StreamHeader::default();
        header.set("pulse_period_ps", 13_100);
        TimeTagStream { header, records }
    }

    fn empty_hist(range: i64) -> CoincidenceHistogram {
        CoincidenceHistogram::from_counts(10, range, vec![0; (2 * range / 10) as usize], 13_100.0).unwrap()
    }

    #[test]
    fn empty_stream_gives_zero_histogram() {
        let h = build_histogram(&stream(vec![]), 10, 1000).unwrap();
        assert_eq!(h.n_bins(), 200);
        assert!(h.counts.iter().all(|&c| c == 0));
        assert_eq!(h.total_pairs, 0);
    }

    #[test]
    fn single_pair_lands_in_its_bin() {
        let h = build_histogram(&stream(vec![TimeTag::new(0, 0), TimeTag::new(1, 100)]), 10, 1000).unwrap();
        assert_eq!(h.total_pairs, 1);
        let i = h.counts.iter().position(|&c| c == 1).unwrap();
        let c = h.bin_center(i);
        assert!(c - 5.0 <= 100.0 && 100.0 < c + 5.0, "bin center {c}");
        // reversed order gives the mirrored bin
        let h = build_histogram(&stream(vec![TimeTag::new(1, 0), TimeTag::new(0, 100)]), 10, 1000).unwrap();
        let j = h.counts.iter().position(|&c| c == 1).unwrap();
        assert!((h.bin_center(j) + 95.0).abs() < 1e-9);
        // edge of range is inclusive, beyond is excluded
        let h = build_histogram(&stream(vec![TimeTag::new(0, 0), TimeTag::new(1, 1000)]), 10, 1000).unwrap();
        assert_eq!(h.counts[h.n_bins() - 1], 1);
        let h = build_histogram(&stream(vec![TimeTag::new(0, 0), TimeTag::new(1, 1001)]), 10, 1000).unwrap();
        assert_eq!(h.total_pairs, 0);
    }

    #[test]
    fn unsorted_stream_is_rejected() {
        let s = stream(vec![TimeTag::new(0, 50), TimeTag::new(1, 10)]);
        assert!(matches!(build_histogram(&s, 10, 100), Err(Error::Format(_))));
        assert!(build_histogram(&stream(vec![]), 0, 100).is_err());
        assert!(build_histogram(&stream(vec![]), 7, 100).is_err());
    }

    #[test]
    fn histogram_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut recs: Vec<TimeTag> = (0..3000)
            .map(|_| TimeTag::new(rng.random_range(0..2), rng.random_range(0..200_000)))
            .collect();
        recs.sort();
        let h = build_histogram(&stream(recs.clone()), 10, 5000).unwrap();
        let mut expected = vec![0u64; h.n_bins()];
        for a in recs.iter().filter(|r| r.channel == 0) {
            for b in recs.iter().filter(|r| r.channel == 1) {
                let dt = b.timestamp - a.timestamp;
                if dt.abs() <= 5000 {
                    expected[(((dt + 5000) / 10) as usize).min(999)] += 1;
                }
            }
        }
        assert_eq!(h.counts, expected);
    }

    #[test]
    fn poisson_streams_give_flat_histogram() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let span = 2_000_000_000i64;
        let rate = 2e-5;
        let n = (span as f64 * rate) as usize;
        let mut recs: Vec<TimeTag> = (0..2)
            .flat_map(|ch| (0..n).map(move |_| ch))
            .map(|ch| TimeTag::new(ch, rng.random_range(0..span)))
            .collect();
        recs.sort();
        let h = build_histogram(&stream(recs), 1000, 100_000).unwrap();
        let expected = (n * n) as f64 * 1000.0 / span as f64;
        let outside = h
            .counts
            .iter()
            .filter(|&&c| (c as f64 - expected).abs() > 3.0 * expected.sqrt())
            .count();
        // 3σ band: about 0.3% of bins fall outside by chance
        assert!(outside <= 3, "{outside} of {} bins outside 3σ (mean {expected})", h.n_bins());
    }

    #[test]
    fn integrate_examples() {
        let h = empty_hist(20_000);
        assert_eq!(integrate_peak(&h, 0.0, 13_100.0).unwrap(), 0);
        let mut d = empty_hist(20_000);
        let c = d.window_bins(0.0, 10.0).unwrap();
        d.counts[c.start] = 500;
        for w in [10.0, 20.0, 1000.0, 13_100.0] {
            assert_eq!(integrate_peak(&d, 0.0, w).unwrap(), 500);
        }
        assert!(matches!(integrate_peak(&h, 0.0, 40_001.0), Err(Error::Parameter { .. })));
        assert!(matches!(integrate_peak(&h, 15_000.0, 13_100.0), Err(Error::Parameter { .. })));
    }

    #[test]
    fn double_exponential_peak_integral() {
        // Expected bin contents from the exact CDF of a two-sided exponential
        // (rise 40 ps, fall 480 ps) centered at 0.
        let (rise, fall) = (40.0f64, 480.0f64);
        let total = 1e9;
        let norm = total / (rise + fall);
        let cdf = |x: f64| {
            if x < 0.0 {
                norm * rise * (x / rise).exp()
            } else {
                norm * (rise + fall * (1.0 - (-x / fall).exp()))
            }
        };
        let mut h = empty_hist(20_000);
        for i in 0..h.n_bins() {
            let a = h.bin_center(i) - 5.0;
            h.counts[i] = (cdf(a + 10.0) - cdf(a)).round() as u64;
        }
        let got = integrate_peak(&h, 0.0, 13_100.0).unwrap() as f64;
        assert!((got - total).abs() / total < 1e-3, "{got}");
    }

    #[test]
    fn g2_examples() {
        let p = 13_100.0;
        let mut h = empty_hist(150_000);
        for k in 1..=11i64 {
            for sign in [-1.0, 1.0] {
                let r = h.window_bins(sign * k as f64 * p, 1000.0);
                if let Ok(r) = r {
                    for i in r {
                        h.counts[i] = 10;
                    }
                }
            }
        }
        let r = g2_zero(&h, 13_100.0, 10, 0.0).unwrap();
        assert_eq!(r.g2_zero, 0.0);
        assert_eq!(r.n_side_peaks, 10);
        for i in h.window_bins(0.0, 1000.0).unwrap() {
            h.counts[i] = 10;
        }
        let r = g2_zero(&h, 13_100.0, 10, 0.0).unwrap();
        assert!((r.g2_zero - 1.0).abs() < 1e-12);
        assert!(r.error > 0.0);
        let zero = empty_hist(150_000);
        assert!(matches!(g2_zero(&zero, 13_100.0, 10, 0.0), Err(Error::DegenerateNormalization(_))));
        assert!(matches!(g2_zero(&h, 13_100.0, 30, 0.0), Err(Error::Parameter { .. })));
        assert!(g2_zero(&h, 14_000.0, 10, 0.0).is_err());
    }

    #[test]
    fn g2_matches_poisson_light() {
        // Uncorrelated (coherent-like) light: every peak has the same expectation.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut recs = Vec::new();
        for k in 0..200_000i64 {
            let t = (k + 1) * 13_100;
            for ch in 0..2u8 {
                if rng.random::<f64>() < 0.1 {
                    recs.push(TimeTag::new(ch, t + rng.random_range(0..300)));
                }
            }
        }
        recs.sort();
        let h = build_histogram(&stream(recs), 10, 150_000).unwrap();
        let r = g2_zero(&h, 13_100.0, 10, 0.0).unwrap();
        assert!((r.g2_zero - 1.0).abs() < 3.0 * r.error, "{} ± {}", r.g2_zero, r.error);
    }

    #[test]
    fn background_estimates() {
        let h = empty_hist(1000);
        assert_eq!(estimate_background(&h, 10.0).unwrap(), 0.0);
        let flat = CoincidenceHistogram::from_counts(10, 1000, vec![5; 200], 13_100.0).unwrap();
        assert_eq!(estimate_background(&flat, 10.0).unwrap(), 5.0);
        assert_eq!(estimate_background(&flat, 5.0).unwrap(), 0.0);
        assert!(estimate_background(&flat, 0.0).is_err());
    }

    #[test]
    fn window_curve_rejects_bad_windows() {
        let h = empty_hist(150_000);
        assert!(g2_vs_window(&h, &[4000.0, 2000.0], 0.0).is_err());
        assert!(g2_vs_window(&h, &[2000.0, 14_000.0], 0.0).is_err());
        assert!(select_noise_boundary(&h, &[5.0], &[2000.0, 12_000.0]).is_err());
        assert!(select_noise_boundary(&h, &[5.0, 10.0], &[3000.0, 12_000.0]).is_err());
    }

    #[test]
    fn hom_examples() {
        let p = 13_100.0;
        let mut par = empty_hist(150_000);
        for k in 1..=11i64 {
            for sign in [-1.0, 1.0] {
                if let Ok(r) = par.window_bins(sign * k as f64 * p, 1000.0) {
                    for i in r {
                        par.counts[i] = 100;
                    }
                }
            }
        }
        let opts = HomOptions::default();
        let one = hom_visibility(&par, None, &opts).unwrap();
        assert_eq!(one.v_raw, 1.0);
        assert_eq!(one.method, HomMethod::SingleConfig);
        let two = hom_visibility(&par, Some(&par.clone()), &opts);
        assert!(two.is_err(), "empty cross-polarized centre cannot normalize");

        let mut perp = par.clone();
        for i in perp.window_bins(0.0, 1000.0).unwrap() {
            perp.counts[i] = 50;
        }
        let v = hom_visibility(&perp, Some(&perp), &opts).unwrap();
        assert_eq!(v.method, HomMethod::TwoConfig);
        assert!(v.v_raw.abs() < 1e-12);
        let v = hom_visibility(&perp, None, &opts).unwrap();
        assert!((v.n_parallel - 0.5).abs() < 1e-12);
        assert!(v.v_raw.abs() < 1e-12);
        let v = hom_visibility(&par, Some(&perp), &opts).unwrap();
        assert_eq!(v.v_raw, 1.0);
    }

    #[test]
    fn correction_examples() {
        assert_eq!(correct_visibility(0.7, 0.0, 0.0, 0.5, 0.5).unwrap(), 0.7);
        let bs = correction_factor(0.0, 0.0, 0.525, 0.475).unwrap();
        assert!((bs - 1.00501).abs() < 1e-5);
        let oracle = (1.0 / 0.985f64).powi(2) * 1.046 * (0.525f64.powi(2) + 0.475f64.powi(2)) / (2.0 * 0.525 * 0.475);
        let f = correction_factor(0.015, 0.023, 0.525, 0.475).unwrap();
        assert!((f - oracle).abs() < 1e-12);
        assert!((f - 1.0835).abs() < 1e-4);
        assert!(correct_visibility(0.5, 1.0, 0.0, 0.5, 0.5).is_err());
        assert!(correct_visibility(0.5, 0.0, 0.0, 0.6, 0.5).is_err());
        assert!(correct_visibility(0.5, 0.0, -0.1, 0.5, 0.5).is_err());
        assert!(correct_visibility(0.5, 0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn histogram_table_round_trip() {
        let mut h = empty_hist(1000);
        h.counts[3] = 7;
        h.total_pairs = 7;
        let mut buf = Vec::new();
        h.to_table().write_to(&mut buf).unwrap();
        let t = Table::read_from(buf.as_slice()).unwrap();
        assert_eq!(CoincidenceHistogram::from_table(&t).unwrap(), h);
    }

    proptest! {
        #[test]
        fn integration_is_additive(
            counts in proptest::collection::vec(0u64..50, 400),
            a in -1990.0f64..-1.0, mid in 0.0f64..1.0, b in 1.0f64..1990.0,
        ) {
            let h = CoincidenceHistogram::from_counts(10, 2000, counts, 13_100.0).unwrap();
            let m = a + mid * (b - a);
            let left = integrate_peak(&h, (a + m) / 2.0, m - a).unwrap();
            let right = integrate_peak(&h, (m + b) / 2.0, b - m).unwrap();
            let union = integrate_peak(&h, (a + b) / 2.0, b - a).unwrap();
            prop_assert_eq!(left + right, union);
        }

        #[test]
        fn correction_never_lowers_visibility(
            v in 0.0f64..1.0, eps in 0.0f64..0.5, g in 0.0f64..0.5, r in 0.01f64..0.99,
        ) {
            let c = correct_visibility(v, eps, g, r, 1.0 - r).unwrap();
            prop_assert!(c >= v);
        }

        #[test]
        fn background_lies_below_boundary(counts in proptest::collection::vec(0u64..100, 200), b in 0.5f64..120.0) {
            let h = CoincidenceHistogram::from_counts(10, 1000, counts, 13_100.0).unwrap();
            let bg = estimate_background(&h, b).unwrap();
            prop_assert!(bg >= 0.0 && bg < b);
        }
    }
}
