//! Radial weak-phase contrast transfer function.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtfParams {
    pub defocus_um: f64,
    pub voltage_kv: f64,
    pub cs_mm: f64,
    pub amplitude_contrast: f64,
    pub pixel_size_a: f64,
    pub enabled: bool,
}

impl Default for CtfParams {
    fn default() -> Self {
        CtfParams {
            defocus_um: 1.5,
            voltage_kv: 300.0,
            cs_mm: 2.0,
            amplitude_contrast: 0.07,
            pixel_size_a: 1.0,
            enabled: true,
        }
    }
}

/// Relativistic electron wavelength in angstroms.
pub fn electron_wavelength_a(voltage_kv: f64) -> f64 {
    let v = voltage_kv * 1e3;
    12.2643 / (v * (1.0 + 0.978466e-6 * v)).sqrt()
}

impl CtfParams {
    pub fn disabled() -> Self {
        CtfParams {
            enabled: false,
            ..CtfParams::default()
        }
    }

    pub fn is_valid(&self) -> bool {
        !self.enabled
            || (self.defocus_um > 0.0
                && self.voltage_kv > 0.0
                && self.pixel_size_a > 0.0
                && (0.0..=1.0).contains(&self.amplitude_contrast))
    }

    /// CTF at spatial frequency `f` in inverse angstroms.
    pub fn eval(&self, f: f64) -> f64 {
        if !self.enabled {
            return 1.0;
        }
        let lambda = electron_wavelength_a(self.voltage_kv);
        let z = self.defocus_um * 1e4;
        let cs = self.cs_mm * 1e7;
        let f2 = f * f;
        let gamma = -PI * lambda * z * f2 + 0.5 * PI * cs * lambda.powi(3) * f2 * f2;
        let w = self.amplitude_contrast;
        -((1.0 - w * w).sqrt() * gamma.sin() + w * gamma.cos())
    }

    /// CTF at image frequency index radius `|j|` on an `n`-pixel image.
    pub fn eval_index(&self, j_radius: f64, n: usize) -> f64 {
        self.eval(j_radius / (n as f64 * self.pixel_size_a))
    }

    /// Same optics for an image downsampled from `n` to `m` pixels.
    pub fn rescaled(&self, n: usize, m: usize) -> Self {
        CtfParams {
            pixel_size_a: self.pixel_size_a * n as f64 / m as f64,
            ..*self
        }
    }
}

/// CTF at radial frequency `radial_freq` (inverse angstroms).
pub fn ctf_eval(ctf: &CtfParams, radial_freq: f64) -> f64 {
    ctf.eval(radial_freq)
}
