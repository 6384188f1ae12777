//! TOML run configuration. Every key is optional; missing keys take the
//! library defaults. Sections mirror `ExperimentConfig`:
//!
//! ```toml
//! seed = 42
//! [cascade]      # tau_xx_bare_ps, tau_x_bare_ps, channel_enhancement, kappa_ghz,
//!                # detuning_xx_ghz, detuning_x_ghz, second_mode_offset_ghz, p_xx_initial
//! [experiment]   # pulse_period_ps, n_pulses, prep_probability, collection_xx,
//!                # collection_x, leakage_prob, ambient_rate_per_ps, irf_fwhm_ps,
//!                # collected, polarization
//! [optics]       # bs_reflectance, bs_transmittance, classical_visibility, delay_arm_ps
//! [echo]         # probability, delay_ps
//! [sweep]        # detunings_ghz, mode, n_pulses
//! ```

use std::path::Path;

use serde::Deserialize;
use xxcascade::cascade::{CascadeConfig, Photon, BINDING_ENERGY_GHZ};
use xxcascade::photon_mc::{CollectionEfficiency, Echo, ExperimentConfig, Polarization};

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub cascade: CascadeSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub optics: OpticsSection,
    pub echo: Option<EchoSection>,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeSection {
    pub tau_xx_bare_ps: Option<f64>,
    pub tau_x_bare_ps: Option<f64>,
    pub channel_enhancement: Option<f64>,
    pub kappa_ghz: Option<f64>,
    pub detuning_xx_ghz: Option<f64>,
    /// Defaults to `detuning_xx_ghz` plus the binding energy.
    pub detuning_x_ghz: Option<f64>,
    pub second_mode_offset_ghz: Option<f64>,
    pub p_xx_initial: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub pulse_period_ps: Option<f64>,
    pub n_pulses: Option<u64>,
    pub prep_probability: Option<f64>,
    pub collection_xx: Option<f64>,
    pub collection_x: Option<f64>,
    pub leakage_prob: Option<f64>,
    pub ambient_rate_per_ps: Option<f64>,
    pub irf_fwhm_ps: Option<f64>,
    pub collected: Option<String>,
    pub polarization: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsSection {
    pub bs_reflectance: Option<f64>,
    /// Defaults to `1 − bs_reflectance`.
    pub bs_transmittance: Option<f64>,
    pub classical_visibility: Option<f64>,
    /// Defaults to the pulse period.
    pub delay_arm_ps: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchoSection {
    pub probability: f64,
    pub delay_ps: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub detunings_ghz: Option<Vec<f64>>,
    pub mode: Option<String>,
    pub n_pulses: Option<u64>,
}

/// Config key for a library field name, for error messages.
pub fn key_for(field: &str) -> String {
    let (section, key) = match field {
        "gamma_xx_bare" => ("cascade", "tau_xx_bare_ps"),
        "gamma_x_bare" => ("cascade", "tau_x_bare_ps"),
        "channel_enhancement" | "p_xx_initial" => ("cascade", field),
        "kappa" => ("cascade", "kappa_ghz"),
        "detuning_xx" => ("cascade", "detuning_xx_ghz"),
        "detuning_x" => ("cascade", "detuning_x_ghz"),
        "second_mode_offset" => ("cascade", "second_mode_offset_ghz"),
        "pulse_period" => ("experiment", "pulse_period_ps"),
        "n_pulses" | "prep_probability" | "leakage_prob" | "collected" | "polarization" => ("experiment", field),
        "collection_efficiency.xx" => ("experiment", "collection_xx"),
        "collection_efficiency.x" => ("experiment", "collection_x"),
        "ambient_rate" => ("experiment", "ambient_rate_per_ps"),
        "irf_fwhm" => ("experiment", "irf_fwhm_ps"),
        "bs_reflectance" | "bs_transmittance" | "classical_visibility" => ("optics", field),
        "delay_arm" => ("optics", "delay_arm_ps"),
        "echo.probability" => ("echo", "probability"),
        "echo.delay" => ("echo", "delay_ps"),
        _ => return field.to_string(),
    };
    format!("{section}.{key}")
}

fn bad(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Config(format!("`{field}`: {}", reason.into()))
}

pub fn parse_photon(s: &str) -> Result<Photon, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "xx" => Ok(Photon::Xx),
        "x" => Ok(Photon::X),
        other => Err(bad("experiment.collected", format!("expected `xx` or `x`, got `{other}`"))),
    }
}

fn rate(field: &str, tau: f64) -> Result<f64, CliError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(1.0 / tau)
    } else {
        Err(bad(field, format!("lifetime must be finite and > 0, got {tau}")))
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    pub fn cascade(&self) -> Result<CascadeConfig, CliError> {
        let c = &self.cascade;
        let base = CascadeConfig::reference();
        let detuning_xx = c.detuning_xx_ghz.unwrap_or(base.detuning_xx);
        Ok(CascadeConfig {
            gamma_xx_bare: match c.tau_xx_bare_ps {
                Some(t) => rate("cascade.tau_xx_bare_ps", t)?,
                None => base.gamma_xx_bare,
            },
            gamma_x_bare: match c.tau_x_bare_ps {
                Some(t) => rate("cascade.tau_x_bare_ps", t)?,
                None => base.gamma_x_bare,
            },
            channel_enhancement: c.channel_enhancement.unwrap_or(base.channel_enhancement),
            kappa: c.kappa_ghz.unwrap_or(base.kappa),
            detuning_xx,
            detuning_x: c.detuning_x_ghz.unwrap_or(detuning_xx + BINDING_ENERGY_GHZ),
            second_mode_offset: c.second_mode_offset_ghz,
            p_xx_initial: c.p_xx_initial.unwrap_or(base.p_xx_initial),
        })
    }

    /// Resolved experiment without validation.
    pub fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        let d = ExperimentConfig::default();
        let e = &self.experiment;
        let o = &self.optics;
        let pulse_period = e.pulse_period_ps.unwrap_or(d.pulse_period);
        let reflectance = o.bs_reflectance.unwrap_or(d.bs_reflectance);
        let polarization = match &e.polarization {
            Some(p) => p
                .parse::<Polarization>()
                .map_err(|_| bad("experiment.polarization", format!("expected `co` or `cross`, got `{p}`")))?,
            None => d.polarization,
        };
        Ok(ExperimentConfig {
            cascade: self.cascade()?,
            pulse_period,
            n_pulses: e.n_pulses.unwrap_or(d.n_pulses),
            prep_probability: e.prep_probability.unwrap_or(d.prep_probability),
            collection_efficiency: CollectionEfficiency {
                xx: e.collection_xx.unwrap_or(d.collection_efficiency.xx),
                x: e.collection_x.unwrap_or(d.collection_efficiency.x),
            },
            leakage_prob: e.leakage_prob.unwrap_or(d.leakage_prob),
            ambient_rate: e.ambient_rate_per_ps.unwrap_or(d.ambient_rate),
            irf_fwhm: e.irf_fwhm_ps.unwrap_or(d.irf_fwhm),
            bs_reflectance: reflectance,
            bs_transmittance: o.bs_transmittance.unwrap_or(1.0 - reflectance),
            classical_visibility: o.classical_visibility.unwrap_or(d.classical_visibility),
            polarization,
            delay_arm: o.delay_arm_ps.unwrap_or(pulse_period),
            collected: match &e.collected {
                Some(s) => parse_photon(s)?,
                None => d.collected,
            },
            echo: self.echo.as_ref().map(|e| Echo { probability: e.probability, delay: e.delay_ps }),
            seed: self.seed.unwrap_or(d.seed),
        })
    }
}

/// Library validation errors rewritten to name the config key.
pub fn validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.validate().map_err(|e| match e {
        xxcascade::Error::Config { field, reason } => bad(&key_for(&field), reason),
        other => CliError::from(other),
    })
}
