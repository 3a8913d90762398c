//! Experiment configuration. Every section is optional and every key has a
//! default; unknown keys are rejected so a typo cannot silently fall back
//! to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::ComputeConfig;
use crate::device::DeviceConfig;
use crate::error::ConfigError;
use crate::vm::{PageGeometry, VaLayout};
use crate::workload::{EnvPreset, PhaseCost};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceSection {
    pub quantum: f64,
    pub switch_penalty: f64,
    pub hw_max_queues: u32,
    pub ring_capacity: u32,
    pub compute_capacity: f64,
    pub graphics_capacity: f64,
    pub page_levels: u8,
    pub bits_per_level: u8,
    pub page_shift: u8,
    pub va_width: u8,
    pub high_base: u64,
    pub low_base: u64,
    pub local_memory_bytes: u64,
}

impl Default for DeviceSection {
    fn default() -> Self {
        let d = DeviceConfig::default();
        Self {
            quantum: d.quantum,
            switch_penalty: d.switch_penalty,
            hw_max_queues: d.hw_max_queues,
            ring_capacity: d.ring_capacity,
            compute_capacity: d.compute_capacity,
            graphics_capacity: d.graphics_capacity,
            page_levels: d.geometry.levels,
            bits_per_level: d.geometry.bits_per_level,
            page_shift: d.geometry.page_shift,
            va_width: d.layout.va_width,
            high_base: d.layout.high_base,
            low_base: d.layout.low_base,
            local_memory_bytes: d.default_compute.local_memory_bytes,
        }
    }
}

impl DeviceSection {
    pub fn device_config(&self) -> DeviceConfig {
        DeviceConfig {
            geometry: PageGeometry {
                levels: self.page_levels,
                bits_per_level: self.bits_per_level,
                page_shift: self.page_shift,
            },
            layout: VaLayout {
                va_width: self.va_width,
                high_base: self.high_base,
                low_base: self.low_base,
            },
            quantum: self.quantum,
            switch_penalty: self.switch_penalty,
            hw_max_queues: self.hw_max_queues,
            ring_capacity: self.ring_capacity,
            compute_capacity: self.compute_capacity,
            graphics_capacity: self.graphics_capacity,
            default_compute: ComputeConfig {
                local_memory_bytes: self.local_memory_bytes,
                ..ComputeConfig::default()
            },
            ..DeviceConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSection {
    /// Cost preset name; the built-in calibration when absent.
    pub env: Option<String>,
    pub steps: usize,
    pub horizon: usize,
    pub batches: Vec<u32>,
    pub groups: u32,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            env: None,
            steps: 100,
            horizon: 50,
            batches: vec![32, 64, 128, 256, 384],
            groups: 2,
        }
    }
}

/// Per-coefficient overrides applied on top of the preset.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    pub sim_base: Option<f64>,
    pub sim_per_env: Option<f64>,
    pub render_base: Option<f64>,
    pub render_per_env: Option<f64>,
    pub inference_base: Option<f64>,
    pub inference_per_env: Option<f64>,
    pub sim_compute_frac: Option<f64>,
    pub render_compute_frac: Option<f64>,
    pub render_graphics_frac: Option<f64>,
}

impl CostSection {
    fn apply(&self, mut c: PhaseCost) -> PhaseCost {
        let pairs = [
            (self.sim_base, &mut c.sim_base),
            (self.sim_per_env, &mut c.sim_per_env),
            (self.render_base, &mut c.render_base),
            (self.render_per_env, &mut c.render_per_env),
            (self.inference_base, &mut c.inference_base),
            (self.inference_per_env, &mut c.inference_per_env),
            (self.sim_compute_frac, &mut c.sim_compute_frac),
            (self.render_compute_frac, &mut c.render_compute_frac),
            (self.render_graphics_frac, &mut c.render_graphics_frac),
        ];
        for (o, slot) in pairs {
            if let Some(v) = o {
                *slot = v;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraftbenchSection {
    pub buffers: Vec<u64>,
}

impl Default for GraftbenchSection {
    fn default() -> Self {
        Self {
            buffers: (2..=13).map(|p| 1u64 << p).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSection {
    pub batch: u32,
    pub steps: usize,
}

impl Default for TraceSection {
    fn default() -> Self {
        Self {
            batch: 256,
            steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Relative per-sweep-point perturbation of all cost coefficients.
    pub jitter: f64,
    pub sample_interval: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            jitter: 0.0,
            sample_interval: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub device: DeviceSection,
    pub workload: WorkloadSection,
    pub costs: CostSection,
    pub graftbench: GraftbenchSection,
    pub trace: TraceSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses and validates. `origin` labels diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(&self) -> Option<EnvPreset> {
        self.workload.env.as_deref().and_then(EnvPreset::from_name)
    }

    pub fn env_label(&self) -> String {
        self.workload.env.clone().unwrap_or_else(|| "default".into())
    }

    /// Costs for data generation and traces.
    pub fn datagen_costs(&self) -> PhaseCost {
        let base = self.preset().map_or_else(PhaseCost::default, |p| p.costs());
        self.costs.apply(base)
    }

    /// Costs for RL rollouts.
    pub fn rollout_costs(&self) -> PhaseCost {
        let base = self.preset().map_or_else(PhaseCost::rollout, |p| p.costs());
        self.costs.apply(base)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.device
            .device_config()
            .validate()
            .map_err(|r| ConfigError::invalid("device", r))?;
        let w = &self.workload;
        if let Some(env) = &w.env {
            if EnvPreset::from_name(env).is_none() {
                let known: Vec<_> = EnvPreset::ALL.iter().map(|p| p.name()).collect();
                return Err(ConfigError::invalid(
                    "workload.env",
                    format!("unknown preset `{env}`; expected one of {}", known.join(", ")),
                ));
            }
        }
        if w.steps == 0 {
            return Err(ConfigError::invalid("workload.steps", "must be >= 1"));
        }
        if w.horizon == 0 {
            return Err(ConfigError::invalid("workload.horizon", "must be >= 1"));
        }
        if w.batches.is_empty() || w.batches.contains(&0) {
            return Err(ConfigError::invalid("workload.batches", "need one or more batches, each >= 1"));
        }
        if w.groups == 0 {
            return Err(ConfigError::invalid("workload.groups", "must be >= 1"));
        }
        if let Some(b) = w.batches.iter().find(|&&b| b % w.groups != 0) {
            return Err(ConfigError::invalid(
                "workload.groups",
                format!("batch {b} does not split into {} groups", w.groups),
            ));
        }
        for (key, c) in [("costs", self.datagen_costs()), ("costs", self.rollout_costs())] {
            c.validate().map_err(|e| ConfigError::invalid(key, e.to_string()))?;
        }
        let g = &self.graftbench;
        if g.buffers.is_empty() || g.buffers.contains(&0) {
            return Err(ConfigError::invalid("graftbench.buffers", "need one or more counts, each >= 1"));
        }
        if g.buffers.iter().any(|&n| n > 1 << 20) {
            return Err(ConfigError::invalid("graftbench.buffers", "counts above 1048576 are not supported"));
        }
        if self.trace.batch == 0 {
            return Err(ConfigError::invalid("trace.batch", "must be >= 1"));
        }
        let r = &self.run;
        if !(0.0..=0.5).contains(&r.jitter) {
            return Err(ConfigError::invalid("run.jitter", "must lie in [0, 0.5]"));
        }
        if !(r.sample_interval > 0.0 && r.sample_interval.is_finite()) {
            return Err(ConfigError::invalid("run.sample_interval", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::parse("", "t").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.device.device_config(), DeviceConfig::default());
        assert_eq!(c.datagen_costs(), PhaseCost::default());
        assert_eq!(c.rollout_costs(), PhaseCost::rollout());
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let err = ExperimentConfig::parse("[device]\nquantum = 0.2\nquantom = 1\n", "t").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("quantom"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn semantic_errors_name_the_key() {
        let cases = [
            ("[workload]\nbatches = []", "workload.batches"),
            ("[workload]\nbatches = [33]\ngroups = 2", "workload.groups"),
            ("[workload]\nenv = \"Nope\"", "workload.env"),
            ("[costs]\nsim_base = -1.0", "costs"),
            ("[device]\nquantum = 0.0", "device"),
            ("[run]\njitter = 0.9", "run.jitter"),
        ];
        for (text, key) in cases {
            match ExperimentConfig::parse(text, "t") {
                Err(ConfigError::Invalid { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn overrides_apply_on_top_of_presets() {
        let c = ExperimentConfig::parse(
            "[workload]\nenv = \"StackCube\"\n[costs]\nrender_base = 0.5\n",
            "t",
        )
        .unwrap();
        let p = EnvPreset::StackCube.costs();
        assert_eq!(c.datagen_costs(), PhaseCost { render_base: 0.5, ..p });
    }

    #[test]
    fn hex_bases_parse() {
        let c = ExperimentConfig::parse("[device]\nhigh_base = 0x7000_0000_0000\n", "t").unwrap();
        assert_eq!(c.device.high_base, 0x7000_0000_0000);
    }
}
