//! Small regression helpers for convergence studies.

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    loglog_fit(x, y).0
}

/// `(slope, intercept, slope standard error)` of the log-log fit.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.abs().max(f64::MIN_POSITIVE).ln()).collect();
    let w = vec![1.0; x.len()];
    weighted_line(&lx, &ly, &w)
}

/// Weighted least squares `y ≈ a x + b`; returns `(a, b, se(a))`.
///
/// The slope error uses the residual scatter, so it stays meaningful when
/// the weights are only relative.
pub fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, w)| a * w).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, w)| a * w).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, w)| w * (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, b), w)| w * (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let n = x.len();
    let se = if n > 2 {
        let rss: f64 = x
            .iter()
            .zip(y)
            .zip(w)
            .map(|((a, b), w)| w * (b - slope * a - icpt).powi(2))
            .sum();
        (rss / (n as f64 - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, icpt, se)
}

pub fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
