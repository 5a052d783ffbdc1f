//! Injection norms, the ι threshold test, and the prediction-error measure.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{FrozenCovariance, MapSolution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorVerdict {
    pub name: String,
    /// Log-parameters from stage 2.
    pub theta: Vec<f64>,
    pub bins: Vec<usize>,
    /// `‖I‖` per injection bin.
    pub norms: Vec<f64>,
    pub max_norm: f64,
    /// Bin attaining `max_norm`, if any injections exist.
    pub peak_bin: Option<usize>,
    pub is_source: bool,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub iota: f64,
    /// In input order.
    pub generators: Vec<GeneratorVerdict>,
    /// Names of flagged generators, largest `‖I‖∞` first.
    pub sources: Vec<String>,
}

/// Flag every generator whose largest per-bin injection norm exceeds `iota`.
pub fn locate_sources(solutions: &[MapSolution], iota: f64) -> SourceReport {
    let generators: Vec<GeneratorVerdict> = solutions
        .iter()
        .map(|s| {
            let (bins, norms) = match &s.injections {
                Some(inj) => (inj.bins.clone(), inj.norms()),
                None => (Vec::new(), Vec::new()),
            };
            let peak = norms
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, &v)| (bins[k], v));
            let max_norm = peak.map_or(0.0, |p| p.1);
            GeneratorVerdict {
                name: s.name.clone(),
                theta: s.theta.clone(),
                bins,
                norms,
                max_norm,
                peak_bin: peak.map(|p| p.0),
                is_source: max_norm > iota,
                converged: s.converged,
            }
        })
        .collect();
    let mut flagged: Vec<&GeneratorVerdict> = generators.iter().filter(|g| g.is_source).collect();
    flagged.sort_by(|a, b| b.max_norm.total_cmp(&a.max_norm));
    SourceReport {
        iota,
        sources: flagged.iter().map(|g| g.name.clone()).collect(),
        generators,
    }
}

/// Default threshold: ten times the median over generators of `‖I‖∞`.
pub fn default_iota(solutions: &[MapSolution]) -> f64 {
    let mut m: Vec<f64> = solutions.iter().map(MapSolution::max_injection_norm).collect();
    if m.is_empty() {
        return 0.0;
    }
    m.sort_by(f64::total_cmp);
    let n = m.len();
    let med = if n % 2 == 1 { m[n / 2] } else { 0.5 * (m[n / 2 - 1] + m[n / 2]) };
    10.0 * med
}

/// `median(diag Γ̄_L)^{-1/2}`: multiplied by λ₀ this puts λ on the scale of a
/// whitened residual.
pub fn lambda_scale(frozen: &FrozenCovariance) -> f64 {
    frozen.median_diagonal().sqrt().recip()
}

/// `‖Ĩ − YṼ‖ / (½‖Ĩ‖ + ½‖YṼ‖)`, zero when both vanish.
pub fn prediction_error_pct(measured: [Complex64; 2], predicted: [Complex64; 2]) -> f64 {
    let norm = |z: [Complex64; 2]| (z[0].norm_sqr() + z[1].norm_sqr()).sqrt();
    let den = 0.5 * norm(measured) + 0.5 * norm(predicted);
    if den == 0.0 {
        return 0.0;
    }
    norm([measured[0] - predicted[0], measured[1] - predicted[1]]) / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::Stage;
    use crate::likelihood::InjectionVariables;
    use nalgebra::DMatrix;

    fn sol(name: &str, bins: &[usize], flat: &[f64]) -> MapSolution {
        MapSolution {
            name: name.into(),
            stage: Stage::Stage2,
            theta: vec![],
            objective: 0.0,
            hessian: DMatrix::zeros(0, 0),
            gradient_norm: 0.0,
            iterations: 0,
            converged: true,
            injections: Some(InjectionVariables::from_flat(bins, flat)),
            history: vec![],
        }
    }

    #[test]
    fn pythagorean_norm() {
        let r = locate_sources(&[sol("g", &[7, 8], &[3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0])], 1.0);
        assert_eq!(r.generators[0].norms, vec![5.0, 1.0]);
        assert_eq!(r.generators[0].peak_bin, Some(7));
        assert_eq!(r.sources, vec!["g".to_string()]);
    }

    #[test]
    fn zero_injections_flag_nothing() {
        let s = [sol("a", &[3], &[0.0; 4]), sol("b", &[3], &[0.0; 4])];
        for iota in [1e-300, 1e-6, 1.0] {
            assert!(locate_sources(&s, iota).sources.is_empty());
        }
    }

    #[test]
    fn sources_sorted_by_norm() {
        let s = [
            sol("a", &[3], &[1.0, 0.0, 0.0, 0.0]),
            sol("b", &[3], &[0.0, 9.0, 0.0, 0.0]),
            sol("c", &[3], &[0.0, 0.0, 0.01, 0.0]),
            sol("d", &[3], &[0.0, 0.0, 0.0, 2.0]),
        ];
        let r = locate_sources(&s, 0.5);
        assert_eq!(r.sources, vec!["b", "d", "a"]);
        assert!(!r.generators[2].is_source);
        assert!((default_iota(&s) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn prediction_error_examples() {
        let y = [Complex64::new(0.3, -0.2), Complex64::new(1.0, 0.5)];
        let two = [y[0] * 2.0, y[1] * 2.0];
        let zero = [Complex64::new(0.0, 0.0); 2];
        assert_eq!(prediction_error_pct(y, y), 0.0);
        assert!((prediction_error_pct(two, y) - 2.0 / 3.0).abs() < 1e-15);
        assert!((prediction_error_pct(y, zero) - 2.0).abs() < 1e-15);
        assert_eq!(prediction_error_pct(zero, zero), 0.0);
    }
}
