use crate::error::{Error, Result};

fn open_interval(name: &str, z: f64) -> Result<f64> {
    if !z.is_finite() || z.abs() >= 1.0 {
        return Err(Error::invalid(name, format!("must lie in (-1, 1), got {z}")));
    }
    Ok(z.atanh())
}

/// Density of the final `z` after time `t` of undriven measurement from
/// `z_i`, at unit efficiency.
pub fn mlt_density(z_f: f64, z_i: f64, t: f64, tau: f64) -> Result<f64> {
    let u_f = open_interval("z_f", z_f)?;
    let u_i = open_interval("z_i", z_i)?;
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::invalid("T", format!("must be positive, got {t}")));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
    }
    let r_bar = tau / t * (u_f - u_i);
    let log = -t * (r_bar * r_bar + 1.0) / (2.0 * tau) + 0.5 * ((1.0 - z_i * z_i) / (1.0 - z_f * z_f)).ln();
    Ok((tau / (2.0 * std::f64::consts::PI * t)).sqrt() / (1.0 - z_f * z_f) * log.exp())
}

/// Duration that maximizes [`mlt_density`] for fixed endpoints.
pub fn most_likely_time(z_f: f64, z_i: f64, tau: f64) -> Result<f64> {
    open_interval("z_f", z_f)?;
    open_interval("z_i", z_i)?;
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
    }
    let g = ((z_f - z_i) / (1.0 - z_i * z_f)).atanh();
    Ok(tau * ((1.0 + 4.0 * g * g).sqrt() - 1.0) / 2.0)
}
