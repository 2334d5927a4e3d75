use crate::model::Direction;

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Closed-form expected improvement over `f_best` for a Gaussian prediction.
///
/// For maximization the improvement is `mean - f_best - xi`; minimization
/// mirrors it. A zero standard deviation collapses to the plain improvement
/// clipped at zero.
pub fn expected_improvement(mean: f64, std: f64, f_best: f64, xi: f64, direction: Direction) -> f64 {
    let improvement = match direction {
        Direction::Maximize => mean - f_best - xi,
        Direction::Minimize => f_best - mean - xi,
    };
    if std <= 0.0 {
        return improvement.max(0.0);
    }
    let z = improvement / std;
    (improvement * normal_cdf(z) + std * normal_pdf(z)).max(0.0)
}
