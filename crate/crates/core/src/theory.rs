//! Closed-form limits for the least-squares estimator over ℝᴺ and the
//! ill-scored collapse points.

use crate::info_params::InfoParams;

/// Spike strength over noise level, `β₂E/√β₁` with `E = E_ℚ[(x⁰)²]`.
pub fn bbp_ratio(ip: &InfoParams, second_moment: f64) -> f64 {
    ip.beta2 * second_moment / ip.beta1.sqrt()
}

/// Limiting `|cos|` of the top eigenvector with the signal.
pub fn ls_cosine_limit(ip: &InfoParams, second_moment: f64) -> f64 {
    let spike = ip.beta2 * second_moment;
    if bbp_ratio(ip, second_moment).abs() <= 1.0 {
        0.0
    } else {
        (1.0 - ip.beta1 / (spike * spike)).sqrt()
    }
}

/// Limit of `λ_max(Z)/√N` for `Z = ∂g(Y, 0)` (a spiked Wigner matrix with
/// spike `β₂E` and noise variance `β₁`).
pub fn top_eigenvalue_limit(ip: &InfoParams, second_moment: f64) -> f64 {
    let spike = ip.beta2 * second_moment;
    if bbp_ratio(ip, second_moment) > 1.0 {
        spike + ip.beta1 / spike
    } else {
        2.0 * ip.beta1.sqrt()
    }
}

/// Limit of `max_x [−½‖Y − λxxᵀ/√N‖² + ½‖Y‖²]/N` over ℝᴺ: `θ²/(2β₃)` with
/// `θ` from [`top_eigenvalue_limit`].
pub fn ls_value_limit(ip: &InfoParams, second_moment: f64) -> f64 {
    top_eigenvalue_limit(ip, second_moment).powi(2) / (2.0 * ip.beta3)
}

/// The commonly quoted form `(E²β₂² + β₁)²/(β₃β₂²E²)` above threshold and
/// `4/β₃` below. It equals `θ²/β₃`, the maximum of the un-halved
/// residual `−‖Y − λxxᵀ/√N‖² + ‖Y‖²`, so it is twice [`ls_value_limit`].
pub fn ls_value_quoted(ip: &InfoParams, second_moment: f64) -> f64 {
    let spike = ip.beta2 * second_moment;
    if bbp_ratio(ip, second_moment) > 1.0 {
        (spike * spike + ip.beta1).powi(2) / (ip.beta3 * spike * spike)
    } else {
        4.0 / ip.beta3
    }
}

/// Optimal squared radius along the top eigenvector: maximizing
/// `λθr² − λ²r⁴/(2N)` gives `r² = Nθ/λ`.
pub fn ls_radius_sq(theta: f64, lambda: f64, n: usize) -> f64 {
    (n as f64 * theta / lambda).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_specified_spiked_wigner() {
        // λ = λ₀ = 2: β̄ = (4, 4, 4, 0)
        let ip = InfoParams::from_betas(4.0, 4.0, 4.0, 0.0);
        assert!((ls_cosine_limit(&ip, 1.0) - 0.75f64.sqrt()).abs() < 1e-12);
        assert!((top_eigenvalue_limit(&ip, 1.0) - 5.0).abs() < 1e-12);
        assert!((ls_value_limit(&ip, 1.0) - 3.125).abs() < 1e-12);
        assert!((ls_value_quoted(&ip, 1.0) - 6.25).abs() < 1e-12);
    }

    #[test]
    fn below_threshold() {
        let ip = InfoParams::from_betas(0.25, 0.25, 0.25, 0.0);
        assert_eq!(ls_cosine_limit(&ip, 1.0), 0.0);
        assert!((ls_value_limit(&ip, 1.0) - 2.0).abs() < 1e-12);
        assert!((ls_value_quoted(&ip, 1.0) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn eigenvalue_is_continuous_at_threshold() {
        let below = InfoParams::from_betas(1.0, 1.0 - 1e-9, 1.0, 0.0);
        let above = InfoParams::from_betas(1.0, 1.0 + 1e-9, 1.0, 0.0);
        assert!(
            (top_eigenvalue_limit(&below, 1.0) - top_eigenvalue_limit(&above, 1.0)).abs() < 1e-6
        );
    }
}
