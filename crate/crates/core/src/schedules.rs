//! Diffusion schedules for the two chains.
//!
//! `ShiftSchedule` drives the image chain: a monotone shifting sequence
//! η_0..η_T with per-step increments α_t = η_t − η_{t−1} and a noise scale κ.
//! `TextSchedule` drives the categorical text chain: cumulative retention
//! weights ᾱ_0..ᾱ_T over a K-symbol alphabet with per-step ratios α_t.
//! Both are immutable after construction; all other modules consume them
//! read-only.

use serde::Serialize;

use crate::error::{Error, Result};

/// Image-chain shifting schedule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftSchedule {
    t_total: usize,
    /// η_0..η_T (length T+1); η_0 = 0, strictly increasing, η_T ∈ [0.99, 1].
    eta: Vec<f64>,
    /// α_1..α_T (length T); α_t = η_t − η_{t−1} > 0.
    alpha: Vec<f64>,
    kappa: f64,
}

impl ShiftSchedule {
    pub fn t_total(&self) -> usize {
        self.t_total
    }

    /// η_t for t ∈ [0, T].
    pub fn eta(&self, t: usize) -> f64 {
        self.eta[t]
    }

    /// α_t for t ∈ [1, T].
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn etas(&self) -> &[f64] {
        &self.eta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// Builds a schedule from a raw η curve, checking only structural
    /// invariants (η_0 = 0, strictly increasing, finite, κ > 0) and not the
    /// endpoint magnitudes. For tests that need synthetic curves.
    #[cfg(test)]
    pub(crate) fn from_raw(eta: Vec<f64>, kappa: f64) -> Self {
        assert!(eta.len() >= 2 && eta[0] == 0.0 && kappa > 0.0);
        assert!(eta.windows(2).all(|w| w[1] > w[0]));
        let alpha = eta.windows(2).map(|w| w[1] - w[0]).collect();
        Self { t_total: eta.len() - 1, eta, kappa, alpha }
    }
}

/// Geometric interpolation η_t = η_1 · (η_T/η_1)^((t−1)/(T−1)) between the
/// configured endpoints, with η_0 = 0. For T = 1 the schedule collapses to a
/// single full-size step η = [0, eta_t].
pub fn make_shift_schedule(
    t_total: usize,
    eta_1: f64,
    eta_t: f64,
    kappa: f64,
) -> Result<ShiftSchedule> {
    if t_total < 1 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(eta_1 > 0.0 && eta_1 < eta_t && eta_t <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "schedule endpoints must satisfy 0 < eta_1 < eta_T <= 1, got eta_1={eta_1}, eta_T={eta_t}"
        )));
    }
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
    }
    // Endpoint magnitude invariants (η_1 ≤ 0.01, η_T ≥ 0.99) only bind for
    // T ≥ 2; the T = 1 collapse η = [0, eta_T] has no interior to shape.
    if t_total >= 2 && eta_1 > 0.01 {
        return Err(Error::InvalidArgument(format!(
            "eta_1 must be <= 0.01 so the chain starts near the clean latent, got {eta_1}"
        )));
    }
    if t_total >= 2 && eta_t < 0.99 {
        return Err(Error::InvalidArgument(format!(
            "eta_T must be >= 0.99 so the chain terminates near the degraded latent, got {eta_t}"
        )));
    }

    let mut eta = Vec::with_capacity(t_total + 1);
    eta.push(0.0);
    if t_total == 1 {
        eta.push(eta_t);
    } else {
        let ratio = eta_t / eta_1;
        for t in 1..=t_total {
            // Pin the endpoints exactly; interpolate the interior.
            let v = if t == 1 {
                eta_1
            } else if t == t_total {
                eta_t
            } else {
                eta_1 * ratio.powf((t - 1) as f64 / (t_total - 1) as f64)
            };
            eta.push(v);
        }
    }

    let alpha: Vec<f64> = eta.windows(2).map(|w| w[1] - w[0]).collect();
    if !alpha.iter().all(|&a| a > 0.0 && a.is_finite()) {
        return Err(Error::InvalidArgument(
            "schedule is not strictly increasing".into(),
        ));
    }
    Ok(ShiftSchedule { t_total, eta, alpha, kappa })
}

/// Text-chain categorical schedule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TextSchedule {
    t_total: usize,
    k: usize,
    /// α_1..α_T (length T), each in (0, 1]; ᾱ_t = ᾱ_{t−1} · α_t.
    alpha_txt: Vec<f64>,
    /// ᾱ_0..ᾱ_T (length T+1); ᾱ_0 = 1, strictly decreasing, ᾱ_T ≤ 0.05.
    alphabar_txt: Vec<f64>,
}

impl TextSchedule {
    pub fn t_total(&self) -> usize {
        self.t_total
    }

    /// Alphabet size K.
    pub fn k(&self) -> usize {
        self.k
    }

    /// ᾱ_t for t ∈ [0, T].
    pub fn alphabar(&self, t: usize) -> f64 {
        self.alphabar_txt[t]
    }

    /// α_t for t ∈ [1, T].
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_txt[t - 1]
    }

    pub fn alphabars(&self) -> &[f64] {
        &self.alphabar_txt
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha_txt
    }

    /// Builds a schedule from a raw ᾱ curve, checking only structure
    /// (ᾱ_0 = 1, entries in (0, 1], non-increasing). For synthetic tests.
    #[cfg(test)]
    pub(crate) fn from_raw(alphabar_txt: Vec<f64>, k: usize) -> Self {
        assert!(alphabar_txt.len() >= 2 && alphabar_txt[0] == 1.0 && k >= 2);
        assert!(alphabar_txt.windows(2).all(|w| w[1] <= w[0] && w[1] > 0.0));
        let alpha_txt = alphabar_txt.windows(2).map(|w| w[1] / w[0]).collect();
        Self { t_total: alphabar_txt.len() - 1, k, alpha_txt, alphabar_txt }
    }
}

/// Cosine retention curve ᾱ_t = cos²((t/T)·(π/2)), affinely rescaled so that
/// ᾱ_0 = 1 and ᾱ_T = `final_alphabar`; α_t follows from the ratio invariant.
pub fn make_text_schedule(t_total: usize, k: usize, final_alphabar: f64) -> Result<TextSchedule> {
    if t_total < 1 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("alphabet needs K >= 2, got {k}")));
    }
    if !(final_alphabar > 0.0 && final_alphabar < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "final_alphabar must lie in (0, 1), got {final_alphabar}"
        )));
    }
    if final_alphabar > 0.05 {
        return Err(Error::InvalidArgument(format!(
            "final_alphabar must be <= 0.05 so the terminal text state is near-uniform, got {final_alphabar}"
        )));
    }

    let mut alphabar = Vec::with_capacity(t_total + 1);
    for t in 0..=t_total {
        let v = if t == 0 {
            1.0
        } else if t == t_total {
            final_alphabar
        } else {
            let raw = (0.5 * std::f64::consts::PI * t as f64 / t_total as f64).cos().powi(2);
            final_alphabar + raw * (1.0 - final_alphabar)
        };
        alphabar.push(v);
    }
    if !alphabar.windows(2).all(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("text schedule is not strictly decreasing".into()));
    }
    let alpha: Vec<f64> = alphabar.windows(2).map(|w| w[1] / w[0]).collect();
    if !alpha.iter().all(|&a| a > 0.0 && a <= 1.0) {
        return Err(Error::InvalidArgument("text schedule ratios left (0, 1]".into()));
    }
    Ok(TextSchedule { t_total, k, alpha_txt: alpha, alphabar_txt: alphabar })
}
