use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use xxcascade::cascade::{
    effective_rates, reduced_purity, reduced_purity_auto, visibility_from_ratio, EffectiveRates, Photon, TimeGrid,
};
use xxcascade::coincidence::{
    build_histogram, curve_table, estimate_background, flatness, g2_vs_window, g2_zero, hom_visibility, is_plateau,
    select_noise_boundary, CandidateCurve, CoincidenceHistogram, HomMethod, HomOptions,
    DEFAULT_BIN_WIDTH, DEFAULT_DELAY_RANGE, DEFAULT_SIDE_PEAKS,
};
use xxcascade::fit::{
    bootstrap, fit_weighted, purcell_from_rates, Channels, DecayHistogram, FitModel, FitPins, Weighting,
    DEFAULT_RESAMPLES,
};
use xxcascade::photon_mc::{expected_hbt_g2, simulate, ExperimentConfig, Mode, Polarization};
use xxcascade::stream::{TimeTagStream, STREAM_MAGIC};
use xxcascade::table::{Record, Table};
use xxcascade::Error;

use crate::config::{self, parse_photon, FileConfig};
use crate::output::Run;
use crate::{CliError, Command, Global};

pub fn run(global: &Global, command: &Command) -> Result<(), CliError> {
    let file = FileConfig::load(global.config.as_deref())?;
    let mut cfg = file.experiment()?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    match command {
        Command::Simulate(a) => cmd_simulate(global, cfg, a),
        Command::Analyze(a) => with_run("analyze", global, &cfg, |run| cmd_analyze(run, a)),
        Command::Fit(a) => with_run("fit", global, &cfg, |run| cmd_fit(run, &cfg, a)),
        Command::Sweep(a) => with_run("sweep", global, &cfg, |run| cmd_sweep(run, &file, &cfg, a)),
        Command::Oracle(a) => with_run("oracle", global, &cfg, |run| cmd_oracle(run, a)),
    }
}

fn with_run(
    name: &'static str,
    global: &Global,
    cfg: &ExperimentConfig,
    body: impl FnOnce(&mut Run) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let mut run = Run::new(name, &global.out_dir, cfg.digest(), cfg.seed)?;
    let result = body(&mut run);
    run.finish(&result)?;
    result
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_stream(path: &Path) -> Result<TimeTagStream, CliError> {
    TimeTagStream::read_from(open(path)?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- simulate

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// lifetime, hbt or hom.
    #[arg(long)]
    pub mode: Mode,
    /// co or cross; overrides the config.
    #[arg(long)]
    pub polarization: Option<Polarization>,
    /// xx or x; overrides the config.
    #[arg(long)]
    pub collected: Option<String>,
    #[arg(long)]
    pub n_pulses: Option<u64>,
    /// File name inside the output directory.
    #[arg(long)]
    pub output: Option<String>,
}

fn cmd_simulate(global: &Global, mut cfg: ExperimentConfig, a: &SimulateArgs) -> Result<(), CliError> {
    if let Some(p) = a.polarization {
        cfg.polarization = p;
    }
    if let Some(c) = &a.collected {
        cfg.collected = parse_photon(c)?;
    }
    if let Some(n) = a.n_pulses {
        cfg.n_pulses = n;
    }
    config::validate(&cfg)?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let name = a.output.clone().unwrap_or_else(|| match a.mode {
        Mode::Hom => format!("stream_hom_{}.txt", cfg.polarization.as_str()),
        m => format!("stream_{m}.txt"),
    });
    with_run("simulate", global, &cfg, |run| {
        let stream = simulate(&cfg, a.mode)?;
        run.write_with(&name, |w| stream.write_to(w))
    })
}

// ----------------------------------------------------------------- analyze

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    None,
    Boundary(f64),
    Auto,
}

impl FromStr for Background {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Background::None),
            "auto" => Ok(Background::Auto),
            other => other
                .strip_prefix("boundary=")
                .and_then(|n| n.parse().ok())
                .filter(|n: &f64| *n > 0.0)
                .map(Background::Boundary)
                .ok_or_else(|| format!("expected none, boundary=N (N > 0) or auto, got `{other}`")),
        }
    }
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// One HBT stream for --g2; one (single-config) or two (parallel, then
    /// perpendicular) HOM streams for --hom.
    #[arg(required = true, num_args = 1..=2)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, conflicts_with = "hom", required_unless_present = "hom")]
    pub g2: bool,
    /// two-config or single-config.
    #[arg(long)]
    pub hom: Option<HomMethod>,
    #[arg(long, default_value_t = 13_100.0)]
    pub window_ps: f64,
    #[arg(long, default_value_t = DEFAULT_SIDE_PEAKS)]
    pub side_peaks: usize,
    /// none, boundary=N or auto.
    #[arg(long, default_value = "none")]
    pub background: Background,
    /// Noise-boundary candidates for --background auto, counts per bin.
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,40")]
    pub candidates: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
    pub bin_width_ps: i64,
    #[arg(long, default_value_t = DEFAULT_DELAY_RANGE)]
    pub delay_range_ps: i64,
    /// Interferometer imperfection 1 − classical visibility.
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f64,
    /// Measured g²(0) used in the visibility correction.
    #[arg(long, default_value_t = 0.0)]
    pub g2_zero: f64,
    #[arg(long, default_value_t = 0.5)]
    pub reflectance: f64,
    /// Defaults to 1 − reflectance.
    #[arg(long)]
    pub transmittance: Option<f64>,
}

struct BackgroundLevel {
    level: f64,
    boundary: Option<f64>,
    mode: &'static str,
}

fn candidates_table(diagnostics: &[CandidateCurve]) -> Table {
    let mut t = Table::new(
        "xxcascade noise-boundary candidates v1",
        &["noise_boundary", "background", "window_ps", "g2", "error", "slope", "score", "plateau"],
    );
    for c in diagnostics {
        for p in &c.curve {
            t.push(vec![c.noise_boundary, c.background, p.window, p.g2, p.error, c.slope, c.score, c.plateau as u8 as f64]);
        }
    }
    t
}

fn plateau_windows(hist: &CoincidenceHistogram) -> Vec<f64> {
    (1..).map(|k| k as f64 * 1000.0).take_while(|&w| w <= hist.pulse_period).collect()
}

fn resolve_background(
    run: &mut Run,
    prefix: &str,
    hist: &CoincidenceHistogram,
    a: &AnalyzeArgs,
) -> Result<BackgroundLevel, CliError> {
    match a.background {
        Background::None => Ok(BackgroundLevel { level: 0.0, boundary: None, mode: "none" }),
        Background::Boundary(n) => Ok(BackgroundLevel {
            level: estimate_background(hist, n)?,
            boundary: Some(n),
            mode: "boundary",
        }),
        Background::Auto => {
            let windows = plateau_windows(hist);
            let raw = g2_vs_window(hist, &windows, 0.0)?;
            let smallest = a.candidates.iter().copied().fold(f64::INFINITY, f64::min);
            let (slope, score) = flatness(hist, &raw, 0.0)?;
            if is_plateau(slope, score) && smallest.is_finite() {
                run.table(&format!("{prefix}_g2_vs_window.csv"), &curve_table(&raw))?;
                return Ok(BackgroundLevel { level: 0.0, boundary: Some(smallest), mode: "auto:no-subtraction-needed" });
            }
            match select_noise_boundary(hist, &a.candidates, &windows) {
                Ok(sel) => {
                    run.table(&format!("{prefix}_background_candidates.csv"), &candidates_table(&sel.diagnostics))?;
                    run.table(&format!("{prefix}_g2_vs_window.csv"), &curve_table(&sel.selected().curve))?;
                    Ok(BackgroundLevel { level: sel.background, boundary: Some(sel.noise_boundary), mode: "auto" })
                }
                Err(Error::NoPlateau { diagnostics }) => {
                    run.table(&format!("{prefix}_background_candidates.csv"), &candidates_table(&diagnostics))?;
                    Err(CliError::Analysis(format!(
                        "{prefix}: no noise-boundary candidate gives a flat g² curve; see {prefix}_background_candidates.csv"
                    )))
                }
                Err(e) => Err(e.into()),
            }
        }
    }
}

fn histogram(run: &mut Run, name: &str, path: &Path, a: &AnalyzeArgs) -> Result<CoincidenceHistogram, CliError> {
    let stream = read_stream(path)?;
    let hist = build_histogram(&stream, a.bin_width_ps, a.delay_range_ps)?;
    run.table(name, &hist.to_table())?;
    Ok(hist)
}

fn cmd_analyze(run: &mut Run, a: &AnalyzeArgs) -> Result<(), CliError> {
    if a.g2 {
        if a.inputs.len() != 1 {
            return Err(CliError::Config("--g2 takes exactly one HBT stream".into()));
        }
        let hist = histogram(run, "g2_histogram.csv", &a.inputs[0], a)?;
        let bg = resolve_background(run, "g2", &hist, a)?;
        let mut result = g2_zero(&hist, a.window_ps, a.side_peaks, bg.level)?;
        result.noise_boundary = bg.boundary;
        let mut rec = result.to_record();
        rec.set("background_mode", bg.mode);
        println!("g2_zero={} error={}", result.g2_zero, result.error);
        return run.record("g2.txt", &rec);
    }

    let method = a.hom.expect("clap requires --g2 or --hom");
    let expected = match method {
        HomMethod::TwoConfig => 2,
        HomMethod::SingleConfig => 1,
    };
    if a.inputs.len() != expected {
        return Err(CliError::Config(format!(
            "--hom {} takes {expected} stream(s), got {}",
            method.as_str(),
            a.inputs.len()
        )));
    }
    let par = histogram(run, "hom_histogram_parallel.csv", &a.inputs[0], a)?;
    let bg_par = resolve_background(run, "hom_parallel", &par, a)?;
    let (perp, bg_perp) = match a.inputs.get(1) {
        Some(p) => {
            let h = histogram(run, "hom_histogram_perpendicular.csv", p, a)?;
            let bg = resolve_background(run, "hom_perpendicular", &h, a)?;
            (Some(h), bg.level)
        }
        None => (None, 0.0),
    };
    let opts = HomOptions {
        window: a.window_ps,
        n_side_peaks: a.side_peaks,
        background_parallel: bg_par.level,
        background_perpendicular: bg_perp,
        ..HomOptions::default()
    };
    let report = hom_visibility(&par, perp.as_ref(), &opts)?.corrected(
        a.epsilon,
        a.g2_zero,
        a.reflectance,
        a.transmittance.unwrap_or(1.0 - a.reflectance),
    )?;
    let mut rec = report.to_record();
    rec.set("background_mode", bg_par.mode)
        .set("background_parallel", bg_par.level)
        .set("background_perpendicular", bg_perp);
    println!("v_raw={} v_corrected={} error={}", report.v_raw, report.v_corrected, report.v_corrected_error);
    run.record("hom.txt", &rec)
}

// --------------------------------------------------------------------- fit

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum ChannelsArg {
    One,
    Two,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Lifetime-mode stream or decay histogram table.
    pub input: PathBuf,
    /// exponential or cascade.
    #[arg(long, default_value = "exponential")]
    pub model: FitModel,
    /// Pins the XX lifetime in the cascade model.
    #[arg(long)]
    pub tau_xx_ps: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub bin_width_ps: i64,
    #[arg(long, default_value_t = -500, allow_hyphen_values = true)]
    pub t_min_ps: i64,
    #[arg(long, default_value_t = 8000)]
    pub t_max_ps: i64,
    /// Defaults to the config IRF.
    #[arg(long)]
    pub irf_fwhm_ps: Option<f64>,
    /// Parametric bootstrap resamples; 0 disables.
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub bootstrap: usize,
    /// counts or model.
    #[arg(long, default_value = "model")]
    pub weighting: Weighting,
    /// Bare lifetime for a Purcell-factor report.
    #[arg(long)]
    pub bare_tau_ps: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub bare_tau_std_ps: f64,
    #[arg(long, value_enum, default_value = "one")]
    pub channels: ChannelsArg,
}

fn load_decay(path: &Path, a: &FitArgs, irf: f64) -> Result<(DecayHistogram, bool), CliError> {
    let mut first = String::new();
    open(path)?.read_line(&mut first)?;
    if first.trim().trim_start_matches('#').trim() == STREAM_MAGIC {
        let stream = read_stream(path)?;
        let h = DecayHistogram::from_lifetime_stream(&stream, a.bin_width_ps, a.t_min_ps, a.t_max_ps, irf)?;
        return Ok((h, true));
    }
    let table = Table::read_from(open(path)?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok((DecayHistogram::from_table(&table, a.irf_fwhm_ps)?, false))
}

fn cmd_fit(run: &mut Run, cfg: &ExperimentConfig, a: &FitArgs) -> Result<(), CliError> {
    let irf = a.irf_fwhm_ps.unwrap_or(cfg.irf_fwhm);
    let (hist, from_stream) = load_decay(&a.input, a, irf)?;
    if from_stream {
        run.table("decay_histogram.csv", &hist.to_table())?;
    }
    let pins = match a.tau_xx_ps {
        Some(t) if t > 0.0 => FitPins { gamma_xx: Some(1.0 / t), ..FitPins::default() },
        Some(t) => return Err(CliError::Config(format!("`--tau-xx-ps` must be > 0, got {t}"))),
        None => FitPins::default(),
    };
    let mut result = fit_weighted(&hist, a.model, None, pins, a.weighting)?;
    if a.bootstrap > 0 {
        result = bootstrap(&hist, &result, a.bootstrap, cfg.seed)?;
    }
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    run.table("fit_curve.csv", &result.curve_table(&hist))?;
    run.record("fit.txt", &result.to_record())?;
    println!("tau_ps={} tau_std_ps={}", result.tau(), result.tau_std().map_or("none".into(), |s| s.to_string()));
    if let Some(bare) = a.bare_tau_ps {
        if !(bare > 0.0) {
            return Err(CliError::Config(format!("`--bare-tau-ps` must be > 0, got {bare}")));
        }
        let channels = match a.channels {
            ChannelsArg::One => Channels::One,
            ChannelsArg::Two => Channels::Two,
        };
        let rep = purcell_from_rates(
            result.params.gamma,
            result.std.map_or(0.0, |s| s.gamma),
            1.0 / bare,
            a.bare_tau_std_ps / (bare * bare),
            channels,
        )?;
        run.record("purcell.txt", &rep.to_record())?;
    }
    Ok(())
}

// ------------------------------------------------------------------- sweep

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// Visibility from the analytic formula.
    Fast,
    /// Simulated and analyzed HOM streams for both photons.
    Mc,
}

/// Cavity detunings from the XX line, GHz: XX resonance out to X resonance.
pub const DEFAULT_DETUNINGS: [f64; 16] = [
    0.0, 5.0, 10.0, 20.0, 40.0, 80.0, 160.0, 345.0, -345.0, -530.0, -610.0, -650.0, -670.0, -680.0, -685.0, -690.0,
];
pub const DEFAULT_SWEEP_PULSES: u64 = 100_000;

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Overrides `sweep.mode`; default fast.
    #[arg(long, value_enum)]
    pub mode: Option<SweepMode>,
    /// Overrides `sweep.detunings_ghz`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub detunings_ghz: Option<Vec<f64>>,
    /// Pulses per simulated stream in MC mode.
    #[arg(long)]
    pub n_pulses: Option<u64>,
}

const SWEEP_COLUMNS: [&str; 9] = ["detuning_ghz", "tau_xx_ps", "tau_x_ps", "ratio", "v_xx", "v_xx_error", "v_x", "v_x_error", "ok"];

fn point_seed(seed: u64, point: usize, stream: usize) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul((4 * point + stream + 1) as u64))
}

fn mc_visibility(cfg: &ExperimentConfig, photon: Photon, point: usize) -> Result<(f64, f64), CliError> {
    let base = ExperimentConfig { collected: photon, ..cfg.clone() };
    let j = if photon == Photon::Xx { 0 } else { 2 };
    let hist = |pol, k: usize| -> Result<CoincidenceHistogram, CliError> {
        let c = ExperimentConfig { polarization: pol, seed: point_seed(cfg.seed, point, j + k), ..base.clone() };
        Ok(build_histogram(&simulate(&c, Mode::Hom)?, DEFAULT_BIN_WIDTH, DEFAULT_DELAY_RANGE)?)
    };
    let par = hist(Polarization::Co, 0)?;
    let perp = hist(Polarization::Cross, 1)?;
    let signal = cfg.prep_probability * cfg.collection_efficiency.of(photon);
    let g2 = expected_hbt_g2(signal, cfg.leakage_prob);
    let rep = hom_visibility(&par, Some(&perp), &HomOptions::default())?.corrected(
        1.0 - cfg.classical_visibility,
        g2,
        cfg.bs_reflectance,
        cfg.bs_transmittance,
    )?;
    Ok((rep.v_corrected, rep.v_corrected_error))
}

fn sweep_point(cfg: &ExperimentConfig, mode: SweepMode, point: usize, detuning: f64) -> Result<Vec<f64>, CliError> {
    let cascade = cfg.cascade.clone().tuned(detuning);
    let rates: EffectiveRates = effective_rates(&cascade)?;
    let ((v_xx, e_xx), (v_x, e_x)) = match mode {
        SweepMode::Fast => {
            let v = visibility_from_ratio(rates.ratio)?;
            ((v, 0.0), (v, 0.0))
        }
        SweepMode::Mc => {
            let c = ExperimentConfig { cascade, ..cfg.clone() };
            config::validate(&c)?;
            (mc_visibility(&c, Photon::Xx, point)?, mc_visibility(&c, Photon::X, point)?)
        }
    };
    Ok(vec![detuning, rates.tau_xx, rates.tau_x, rates.ratio, v_xx, e_xx, v_x, e_x, 1.0])
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect()
}

fn cmd_sweep(run: &mut Run, file: &FileConfig, cfg: &ExperimentConfig, a: &SweepArgs) -> Result<(), CliError> {
    let mode = match (a.mode, file.sweep.mode.as_deref()) {
        (Some(m), _) => m,
        (None, Some(s)) => SweepMode::from_str(s, true)
            .map_err(|_| CliError::Config(format!("`sweep.mode`: expected `fast` or `mc`, got `{s}`")))?,
        (None, None) => SweepMode::Fast,
    };
    let detunings: Vec<f64> = a
        .detunings_ghz
        .clone()
        .or_else(|| file.sweep.detunings_ghz.clone())
        .unwrap_or_else(|| DEFAULT_DETUNINGS.to_vec());
    if detunings.is_empty() {
        return Err(CliError::Config("`sweep.detunings_ghz` is empty".into()));
    }
    let n_pulses = a.n_pulses.or(file.sweep.n_pulses).unwrap_or(DEFAULT_SWEEP_PULSES);
    let cfg = ExperimentConfig { n_pulses, ..cfg.clone() };

    let rows: Vec<Result<Vec<f64>, CliError>> = detunings
        .par_iter()
        .enumerate()
        .map(|(i, &d)| sweep_point(&cfg, mode, i, d))
        .collect();

    let mut table = Table::new("xxcascade visibility sweep v1", &SWEEP_COLUMNS);
    table.set_meta("mode", if mode == SweepMode::Fast { "fast" } else { "mc" });
    if mode == SweepMode::Mc {
        table.set_meta("n_pulses", n_pulses);
    }
    let mut errors = Record::new();
    for (i, (row, &d)) in rows.into_iter().zip(&detunings).enumerate() {
        match row {
            Ok(r) => table.push(r),
            Err(e) => {
                errors.set(format!("point_{i}"), format!("detuning {d} GHz: {e}"));
                let mut r = vec![f64::NAN; SWEEP_COLUMNS.len()];
                r[0] = d;
                r[8] = 0.0;
                table.push(r);
            }
        }
    }
    run.table("sweep.csv", &table)?;

    let mut reference = Table::new("xxcascade visibility reference v1", &["ratio", "visibility"]);
    for r in log_spaced(0.01, 100.0, 61) {
        reference.push(vec![r, visibility_from_ratio(r)?]);
    }
    run.table("sweep_reference.csv", &reference)?;
    if !errors.entries.is_empty() {
        run.record("sweep_errors.txt", &errors)?;
        eprintln!("warning: {} sweep point(s) failed; see sweep_errors.txt", errors.entries.len());
    }
    Ok(())
}

// ------------------------------------------------------------------ oracle

#[derive(Args, Debug)]
pub struct OracleArgs {
    /// Lifetime ratios τ_XX/τ_X; default 15 log-spaced values in [0.01, 100].
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    /// Grid points; default refines with the shorter lifetime.
    #[arg(long)]
    pub points: Option<usize>,
    /// Grid length in units of the longer lifetime.
    #[arg(long)]
    pub span: Option<f64>,
}

const ORACLE_COLUMNS: [&str; 7] = ["ratio", "purity_xx", "purity_x", "eq1", "dev_xx", "dev_x", "ok"];

fn oracle_row(ratio: f64, a: &OracleArgs) -> Result<Vec<f64>, CliError> {
    let rates = EffectiveRates::from_lifetimes(100.0 * ratio, 100.0)?;
    let grid = if a.points.is_some() || a.span.is_some() {
        let auto = TimeGrid::for_rates(&rates);
        let span = a.span.unwrap_or(TimeGrid::DEFAULT_SPAN);
        Some(TimeGrid::new(span * rates.tau_max(), a.points.unwrap_or(auto.n_points))?)
    } else {
        None
    };
    let purity = |p| match &grid {
        Some(g) => reduced_purity(p, &rates, g),
        None => reduced_purity_auto(p, &rates),
    };
    let (xx, x) = (purity(Photon::Xx)?, purity(Photon::X)?);
    let v = visibility_from_ratio(ratio)?;
    Ok(vec![ratio, xx, x, v, xx - v, x - v, 1.0])
}

fn cmd_oracle(run: &mut Run, a: &OracleArgs) -> Result<(), CliError> {
    let ratios = a.ratios.clone().unwrap_or_else(|| log_spaced(0.01, 100.0, 15));
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(CliError::Config(format!("ratios must be finite and > 0, got {r}")));
    }
    let rows: Vec<_> = ratios.par_iter().map(|&r| oracle_row(r, a)).collect();
    let mut table = Table::new("xxcascade purity oracle v1", &ORACLE_COLUMNS);
    let mut errors = Record::new();
    for (i, (row, &r)) in rows.into_iter().zip(&ratios).enumerate() {
        match row {
            Ok(v) => table.push(v),
            Err(e) => {
                errors.set(format!("row_{i}"), format!("ratio {r}: {e}"));
                let mut v = vec![f64::NAN; ORACLE_COLUMNS.len()];
                v[0] = r;
                v[6] = 0.0;
                table.push(v);
            }
        }
    }
    run.table("oracle.csv", &table)?;
    if !errors.entries.is_empty() {
        run.record("oracle_errors.txt", &errors)?;
        eprintln!("warning: {} oracle row(s) failed; see oracle_errors.txt", errors.entries.len());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_flag_parses() {
        assert_eq!("none".parse::<Background>().unwrap(), Background::None);
        assert_eq!("auto".parse::<Background>().unwrap(), Background::Auto);
        assert_eq!("boundary=10".parse::<Background>().unwrap(), Background::Boundary(10.0));
        assert!("boundary=-1".parse::<Background>().is_err());
        assert!("boundary".parse::<Background>().is_err());
    }

    #[test]
    fn log_spacing_hits_endpoints() {
        let r = log_spaced(0.01, 100.0, 15);
        assert_eq!(r.len(), 15);
        assert!((r[0] - 0.01).abs() < 1e-15 && (r[14] - 100.0).abs() < 1e-12);
        assert!((r[7] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_seeds_are_distinct() {
        let mut seeds: Vec<u64> = (0..50).flat_map(|p| (0..4).map(move |s| point_seed(7, p, s))).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 200);
    }
}
