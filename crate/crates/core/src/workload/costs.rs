//! Phase-cost model. Every phase duration is affine in the batch size;
//! contention effects come from the engine, not from these formulas.

use serde::{Deserialize, Serialize};

use crate::error::WorkloadError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseCost {
    pub sim_base: f64,
    pub sim_per_env: f64,
    pub render_base: f64,
    pub render_per_env: f64,
    pub inference_base: f64,
    pub inference_per_env: f64,
    pub sim_compute_frac: f64,
    pub render_compute_frac: f64,
    pub render_graphics_frac: f64,
}

/// Calibrated so simulation dominates small batches and rendering large
/// ones; the two cross near B = 200. Not derived from hardware.
impl Default for PhaseCost {
    fn default() -> Self {
        Self {
            sim_base: 1.0,
            sim_per_env: 0.005,
            render_base: 0.02,
            render_per_env: 0.01,
            inference_base: 0.0,
            inference_per_env: 0.0,
            sim_compute_frac: 0.1,
            render_compute_frac: 0.6,
            render_graphics_frac: 1.0,
        }
    }
}

impl PhaseCost {
    /// Equal sim and render cost `d` per step at any batch size, with no
    /// inference.
    pub fn balanced(d: f64) -> Self {
        Self {
            sim_base: d,
            sim_per_env: 0.0,
            render_base: d,
            render_per_env: 0.0,
            ..Self::default()
        }
    }

    /// Rollout calibration: small fixed costs and an inference pass that
    /// grows with the batch, so inference dominates large batches.
    pub fn rollout() -> Self {
        Self {
            sim_base: 0.2,
            sim_per_env: 0.004,
            render_base: 0.4,
            render_per_env: 0.006,
            inference_base: 0.0,
            inference_per_env: 0.04,
            ..Self::default()
        }
    }

    pub fn sim(&self, batch: u32) -> f64 {
        self.sim_base + self.sim_per_env * f64::from(batch)
    }

    pub fn render(&self, batch: u32) -> f64 {
        self.render_base + self.render_per_env * f64::from(batch)
    }

    pub fn inference(&self, batch: u32) -> f64 {
        self.inference_base + self.inference_per_env * f64::from(batch)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let coeffs = [
            ("sim_base", self.sim_base),
            ("sim_per_env", self.sim_per_env),
            ("render_base", self.render_base),
            ("render_per_env", self.render_per_env),
            ("inference_base", self.inference_base),
            ("inference_per_env", self.inference_per_env),
        ];
        for (name, v) in coeffs {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(WorkloadError::InvalidSpec(format!("{name} must be >= 0, got {v}")));
            }
        }
        let fracs = [
            ("sim_compute_frac", self.sim_compute_frac),
            ("render_compute_frac", self.render_compute_frac),
            ("render_graphics_frac", self.render_graphics_frac),
        ];
        for (name, v) in fracs {
            if !(0.0..=1.0).contains(&v) {
                return Err(WorkloadError::InvalidSpec(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Named cost bundles for the task suite. The coefficients are invented
/// calibration values with plausible relative ordering, nothing more.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvPreset {
    PickCube,
    PushCube,
    StackCube,
    PegInsertion,
    AntRun,
    HumanoidRun,
}

impl EnvPreset {
    pub const ALL: [EnvPreset; 6] = [
        EnvPreset::PickCube,
        EnvPreset::PushCube,
        EnvPreset::StackCube,
        EnvPreset::PegInsertion,
        EnvPreset::AntRun,
        EnvPreset::HumanoidRun,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EnvPreset::PickCube => "PickCube",
            EnvPreset::PushCube => "PushCube",
            EnvPreset::StackCube => "StackCube",
            EnvPreset::PegInsertion => "PegInsertion",
            EnvPreset::AntRun => "AntRun",
            EnvPreset::HumanoidRun => "HumanoidRun",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn costs(&self) -> PhaseCost {
        let d = PhaseCost::default();
        let (sim_base, sim_per_env, render_per_env) = match self {
            EnvPreset::PickCube => (1.0, 0.005, 0.010),
            EnvPreset::PushCube => (0.8, 0.004, 0.010),
            EnvPreset::StackCube => (1.2, 0.006, 0.011),
            EnvPreset::PegInsertion => (1.5, 0.008, 0.012),
            EnvPreset::AntRun => (0.9, 0.006, 0.008),
            EnvPreset::HumanoidRun => (1.4, 0.009, 0.009),
        };
        PhaseCost {
            sim_base,
            sim_per_env,
            render_per_env,
            ..d
        }
    }
}
