//! Run configuration: a TOML document mapping 1:1 onto the engine,
//! network, loss, and simulation parameter structs. Every field has a
//! default; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::engine::{EngineConfig, EngineDgpConfig, Stage};
use crate::error::{PtychoError, Result};
use crate::physics::ObjectKind;
use crate::simdata::ProbeRecipe;

use super::container::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReconMode {
    #[default]
    Pixelated,
    Dgp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectKindConfig {
    Complex,
    #[default]
    PurePhase,
    Potential,
}

impl From<ObjectKindConfig> for ObjectKind {
    fn from(k: ObjectKindConfig) -> Self {
        match k {
            ObjectKindConfig::Complex => ObjectKind::ComplexTransmission,
            ObjectKindConfig::PurePhase => ObjectKind::PurePhase,
            ObjectKindConfig::Potential => ObjectKind::Potential,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub ny: usize,
    pub nx: usize,
    pub step_a: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig { ny: 16, nx: 16, step_a: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NanoparticleConfig {
    pub radius_a: f64,
    pub substrate_rms: f64,
}

impl Default for NanoparticleConfig {
    fn default() -> Self {
        NanoparticleConfig { radius_a: 1.5, substrate_rms: 0.03 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilayerConfig {
    pub spacing_a: f64,
    pub twist_deg: f64,
    pub slices: usize,
    pub slice_thickness_a: f64,
}

impl Default for BilayerConfig {
    fn default() -> Self {
        BilayerConfig { spacing_a: 7.0, twist_deg: 3.0, slices: 16, slice_thickness_a: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeConfig {
    pub spacing_a: f64,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig { spacing_a: 2.0 }
    }
}

/// Simulation section: phantom choice, imaging conditions, scan, dose.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub phantom: String,
    pub size: usize,
    pub sampling_a: f64,
    /// Electrons per square angstrom; `inf` (or omitted) means noiseless.
    pub dose: f64,
    pub seed: u64,
    pub scan: ScanConfig,
    pub probe: ProbeRecipe,
    pub nanoparticle: NanoparticleConfig,
    pub bilayer: BilayerConfig,
    pub lattice: LatticeConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            phantom: "nanoparticle".into(),
            size: 64,
            sampling_a: 0.1,
            dose: f64::INFINITY,
            seed: 1,
            scan: ScanConfig::default(),
            probe: ProbeRecipe::default(),
            nanoparticle: NanoparticleConfig::default(),
            bilayer: BilayerConfig::default(),
            lattice: LatticeConfig::default(),
        }
    }
}

impl SimulateConfig {
    pub fn dose_option(&self) -> Option<f64> {
        if self.dose.is_finite() {
            Some(self.dose)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSectionConfig {
    pub mode: ReconMode,
    pub object_kind: ObjectKindConfig,
    pub slices: usize,
    pub slice_thickness_a: f64,
    pub probe_modes: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub snapshot_every: usize,
    pub threads: usize,
    pub band_limit: bool,
    pub stages: Vec<Stage>,
}

impl Default for ReconSectionConfig {
    fn default() -> Self {
        ReconSectionConfig {
            mode: ReconMode::Pixelated,
            object_kind: ObjectKindConfig::PurePhase,
            slices: 1,
            slice_thickness_a: 1.0,
            probe_modes: 1,
            batch_size: 32,
            validation_fraction: 0.0,
            seed: 0,
            snapshot_every: 0,
            threads: 1,
            band_limit: false,
            stages: vec![Stage::default()],
        }
    }
}


#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSectionConfig {
    pub ssim_window: usize,
}

impl Default for MetricsSectionConfig {
    fn default() -> Self {
        MetricsSectionConfig { ssim_window: 7 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSectionConfig {
    pub percentile_lo: f64,
    pub percentile_hi: f64,
}

impl Default for ExportSectionConfig {
    fn default() -> Self {
        ExportSectionConfig { percentile_lo: 1.0, percentile_hi: 99.0 }
    }
}

/// The full run configuration document.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub simulate: SimulateConfig,
    pub recon: ReconSectionConfig,
    pub dgp: EngineDgpConfig,
    pub metrics: MetricsSectionConfig,
    pub export: ExportSectionConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| PtychoError::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// Stable provenance hash of the effective configuration.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.recon;
        if r.stages.is_empty() {
            return Err(PtychoError::config("recon.stages must not be empty"));
        }
        for (i, s) in r.stages.iter().enumerate() {
            if s.iterations == 0 {
                return Err(PtychoError::config(format!("stage {i}: iterations must be > 0")));
            }
            for (name, v) in [
                ("lambda_xy", s.lambda_xy),
                ("lambda_z", s.lambda_z),
                ("lambda_surf", s.lambda_surf),
            ] {
                if !v.is_finite() || v < 0.0 {
                    return Err(PtychoError::config(format!("stage {i}: {name} must be >= 0")));
                }
            }
        }
        if !(0.0..=0.5).contains(&r.validation_fraction) {
            return Err(PtychoError::config("validation_fraction must lie in [0, 0.5]"));
        }
        if r.batch_size == 0 || r.probe_modes == 0 || r.slices == 0 {
            return Err(PtychoError::config("batch_size, probe_modes and slices must be positive"));
        }
        if r.threads == 0 {
            return Err(PtychoError::config("threads must be >= 1"));
        }
        Ok(())
    }

    /// Distill the engine-facing parts of this document.
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            object_kind: self.recon.object_kind.into(),
            num_slices: self.recon.slices,
            slice_thickness_a: self.recon.slice_thickness_a,
            probe_modes: self.recon.probe_modes,
            stages: self.recon.stages.clone(),
            batch_size: self.recon.batch_size,
            validation_fraction: self.recon.validation_fraction,
            seed: self.recon.seed,
            threads: self.recon.threads,
            band_limit: self.recon.band_limit,
            dgp: self.dgp,
        }
    }

    /// Apply a `key.path=value` override; values parse as TOML scalars.
    pub fn with_overrides(base_text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(base_text)
            .map_err(|e| PtychoError::config(format!("config parse: {e}")))?;
        for ov in overrides {
            let (path, raw) = ov
                .split_once('=')
                .ok_or_else(|| PtychoError::config(format!("override '{ov}' is not key=value")))?;
            let parsed: toml::Value = toml::from_str(&format!("v = {raw}"))
                .map(|t: toml::Value| t["v"].clone())
                .or_else(|_| {
                    toml::from_str::<toml::Value>(&format!("v = \"{raw}\"")).map(|t| t["v"].clone())
                })
                .map_err(|e| PtychoError::config(format!("override value '{raw}': {e}")))?;
            let mut cursor = &mut value;
            let parts: Vec<&str> = path.trim().split('.').collect();
            for part in &parts[..parts.len() - 1] {
                cursor = cursor
                    .as_table_mut()
                    .ok_or_else(|| PtychoError::config(format!("override path '{path}' invalid")))?
                    .entry(part.to_string())
                    .or_insert(toml::Value::Table(Default::default()));
            }
            cursor
                .as_table_mut()
                .ok_or_else(|| PtychoError::config(format!("override path '{path}' invalid")))?
                .insert(parts.last().unwrap().to_string(), parsed);
        }
        let text = toml::to_string(&value).map_err(|e| PtychoError::config(e.to_string()))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_config() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.to_toml(), text);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("[recon]\nmoed = \"dgp\"\n");
        assert!(matches!(err, Err(PtychoError::Config(_))), "{err:?}");
    }

    #[test]
    fn overrides_change_hash_and_value() {
        let base = RunConfig::default().to_toml();
        let cfg = RunConfig::with_overrides(&base, &["recon.batch_size=8".into()]).unwrap();
        assert_eq!(cfg.recon.batch_size, 8);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        // String values work with or without quotes.
        let cfg = RunConfig::with_overrides(&base, &["recon.mode=dgp".into()]).unwrap();
        assert_eq!(cfg.recon.mode, ReconMode::Dgp);
    }

    #[test]
    fn infinite_dose_roundtrips_as_noiseless() {
        let cfg = RunConfig::default();
        assert!(cfg.simulate.dose_option().is_none());
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert!(back.simulate.dose_option().is_none());

        let finite = RunConfig::with_overrides(&text, &["simulate.dose=500.0".into()]).unwrap();
        assert_eq!(finite.simulate.dose_option(), Some(500.0));
    }

    #[test]
    fn stage_validation_rejects_zero_iterations() {
        let mut cfg = RunConfig::default();
        cfg.recon.stages[0].iterations = 0;
        assert!(cfg.validate().is_err());
    }
}
