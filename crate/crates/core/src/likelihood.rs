//! Residuals of the terminal admittance relation and their noise covariance.

use std::path::Path;

use nalgebra::{DMatrix, Matrix2, Matrix4, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::Frf;
use crate::error::LikelihoodError;
use crate::spectra::SpectralDataset;

/// Per-bin injection `[I_Ir, I_Ii, I_φr, I_φi]`, defined on FO band bins only.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InjectionVariables {
    pub bins: Vec<usize>,
    pub values: Vec<[f64; 4]>,
}

impl InjectionVariables {
    pub fn zeros(bins: &[usize]) -> Self {
        Self {
            bins: bins.to_vec(),
            values: vec![[0.0; 4]; bins.len()],
        }
    }

    /// Flat layout `[I_Ir, I_Ii, I_φr, I_φi]` per bin, bins in order.
    pub fn from_flat(bins: &[usize], flat: &[f64]) -> Self {
        Self {
            bins: bins.to_vec(),
            values: flat
                .chunks_exact(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn at(&self, bin: usize) -> Option<[f64; 4]> {
        self.bins
            .iter()
            .position(|&b| b == bin)
            .map(|i| self.values[i])
    }

    /// `‖I‖` at each injection bin.
    pub fn norms(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }
}

/// Stacked residual `R = [M_r; M_i; P_r; P_i]`, each block indexed by `bins`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualVector {
    pub bins: Vec<usize>,
    pub mr: Vec<f64>,
    pub mi: Vec<f64>,
    pub pr: Vec<f64>,
    pub pi: Vec<f64>,
}

impl ResidualVector {
    pub fn stacked(&self) -> Vec<f64> {
        [&self.mr, &self.mi, &self.pr, &self.pi]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    /// The four residual entries at position `b` of `bins`.
    pub fn at(&self, b: usize) -> Vector4<f64> {
        Vector4::new(self.mr[b], self.mi[b], self.pr[b], self.pi[b])
    }

    pub fn len(&self) -> usize {
        4 * self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

pub(crate) fn grids_match(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a
            .iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0))
}

/// Complex gap `[Ĩ − Y11 Ṽ − Y12 θ̃, φ̃ − Y21 Ṽ − Y22 θ̃]` at one bin.
pub fn bin_gap(spec: &SpectralDataset, y: &Matrix2<Complex64>, w: usize) -> [Complex64; 2] {
    let (v, th) = (spec.v[w], spec.theta[w]);
    [
        spec.i[w] - y[(0, 0)] * v - y[(0, 1)] * th,
        spec.phi[w] - y[(1, 0)] * v - y[(1, 1)] * th,
    ]
}

/// Residuals at the included bins, with injections subtracted on their own bins.
pub fn residuals(
    spec: &SpectralDataset,
    frf: &Frf,
    inj: &InjectionVariables,
    included_bins: &[usize],
) -> Result<ResidualVector, LikelihoodError> {
    if !grids_match(&spec.grid, &frf.grid) {
        return Err(LikelihoodError::GridMismatch);
    }
    if let Some(&b) = inj.bins.iter().find(|b| !included_bins.contains(b)) {
        return Err(LikelihoodError::InjectionOutsideBins(b));
    }
    let n = included_bins.len();
    let mut r = ResidualVector {
        bins: included_bins.to_vec(),
        mr: Vec::with_capacity(n),
        mi: Vec::with_capacity(n),
        pr: Vec::with_capacity(n),
        pi: Vec::with_capacity(n),
    };
    for &w in included_bins {
        if w >= spec.grid.len() {
            return Err(LikelihoodError::GridMismatch);
        }
        let [m, p] = bin_gap(spec, &frf.y[w], w);
        let i = inj.at(w).unwrap_or([0.0; 4]);
        r.mr.push(m.re - i[0]);
        r.mi.push(m.im - i[1]);
        r.pr.push(p.re - i[2]);
        r.pi.push(p.im - i[3]);
    }
    Ok(r)
}

/// Block-diagonal noise covariance: one 4×4 block per bin over `[N_r, N_i, Q_r, Q_i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCovariance {
    pub bins: Vec<usize>,
    pub blocks: Vec<Matrix4<f64>>,
}

/// Covariance of `[N_r, N_i, Q_r, Q_i]` at one bin for independent zero-mean
/// spectral noise with per-component variances `svar = [V, θ, I, φ]`.
pub fn covariance_block(y: &Matrix2<Complex64>, svar: [f64; 4]) -> Matrix4<f64> {
    let [sv, st, si, sp] = svar;
    let (a, b, c, d) = (y[(0, 0)], y[(0, 1)], y[(1, 0)], y[(1, 1)]);
    let nn = si + a.norm_sqr() * sv + b.norm_sqr() * st;
    let qq = sp + c.norm_sqr() * sv + d.norm_sqr() * st;
    let same = (a * c.conj()).re * sv + (b * d.conj()).re * st;
    let cross = sv * (a.re * c.im - a.im * c.re) + st * (b.re * d.im - b.im * d.re);
    Matrix4::new(
        nn, 0.0, same, cross, //
        0.0, nn, -cross, same, //
        same, -cross, qq, 0.0, //
        cross, same, 0.0, qq,
    )
}

pub fn noise_covariance(frf: &Frf, svar: [f64; 4], included_bins: &[usize]) -> NoiseCovariance {
    NoiseCovariance {
        bins: included_bins.to_vec(),
        blocks: included_bins
            .iter()
            .map(|&w| covariance_block(&frf.y[w], svar))
            .collect(),
    }
}

impl NoiseCovariance {
    /// Dense matrix in the stacked `[N_r; N_i; Q_r; Q_i]` ordering.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.bins.len();
        let mut g = DMatrix::zeros(4 * n, 4 * n);
        for (b, blk) in self.blocks.iter().enumerate() {
            for r in 0..4 {
                for c in 0..4 {
                    g[(r * n + b, c * n + b)] = blk[(r, c)];
                }
            }
        }
        g
    }

    /// `log det Γ_L`, for diagnostics only.
    pub fn log_det(&self) -> Result<f64, LikelihoodError> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| {
                let ch = blk.cholesky().ok_or(LikelihoodError::NotPositiveDefinite(b))?;
                Ok(2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
            })
            .sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| (0..4).map(move |i| b[(i, i)]))
            .collect()
    }

    /// Dump the blocks as CSV rows `bin,row,col,value` for inspection.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin", "row", "col", "value"])?;
        for (b, blk) in self.bins.iter().zip(&self.blocks) {
            for r in 0..4 {
                for c in 0..4 {
                    w.write_record([
                        b.to_string(),
                        r.to_string(),
                        c.to_string(),
                        format!("{:.17e}", blk[(r, c)]),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `Rᵀ Γ⁻¹ R` evaluated bin by bin.
pub fn neg_log_likelihood(
    r: &ResidualVector,
    gamma: &NoiseCovariance,
) -> Result<f64, LikelihoodError> {
    if r.bins != gamma.bins {
        return Err(LikelihoodError::GridMismatch);
    }
    let mut acc = 0.0;
    for (b, blk) in gamma.blocks.iter().enumerate() {
        let ch = blk.cholesky().ok_or(LikelihoodError::NotPositiveDefinite(b))?;
        let rb = r.at(b);
        acc += rb.dot(&ch.solve(&rb));
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rand_c(rng: &mut ChaCha8Rng) -> Complex64 {
        Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
    }

    fn random_case(seed: u64, nbins: usize) -> (SpectralDataset, Frf) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid: Vec<f64> = (0..nbins).map(|w| w as f64 * 0.1).collect();
        let mut vecs = || (0..nbins).map(|_| rand_c(&mut rng)).collect::<Vec<_>>();
        let spec = SpectralDataset {
            grid: grid.clone(),
            v: vecs(),
            theta: vecs(),
            i: vecs(),
            phi: vecs(),
            noise_var: [1e-4, 2e-4, 3e-4, 4e-4],
            n_samples: 2 * nbins - 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let y = (0..nbins)
            .map(|_| Matrix2::from_fn(|_, _| rand_c(&mut rng)))
            .collect();
        (spec, Frf { grid, y })
    }

    #[test]
    fn residuals_match_complex_oracle() {
        let (spec, frf) = random_case(1, 12);
        let bins: Vec<usize> = (1..12).collect();
        let mut inj = InjectionVariables::zeros(&[4, 5]);
        inj.values[0] = [0.1, -0.2, 0.3, 0.4];
        let r = residuals(&spec, &frf, &inj, &bins).unwrap();
        for (b, &w) in bins.iter().enumerate() {
            let y = frf.y[w];
            let mut m = spec.i[w] - (y[(0, 0)] * spec.v[w] + y[(0, 1)] * spec.theta[w]);
            let mut p = spec.phi[w] - (y[(1, 0)] * spec.v[w] + y[(1, 1)] * spec.theta[w]);
            if w == 4 {
                m -= Complex64::new(0.1, -0.2);
                p -= Complex64::new(0.3, 0.4);
            }
            assert!((r.mr[b] - m.re).abs() < 1e-12 && (r.mi[b] - m.im).abs() < 1e-12);
            assert!((r.pr[b] - p.re).abs() < 1e-12 && (r.pi[b] - p.im).abs() < 1e-12);
        }
        let s = r.stacked();
        assert_eq!(s.len(), 44);
        assert_eq!(s[11], r.mi[0]);
    }

    #[test]
    fn injection_cancels_gap() {
        let (spec, frf) = random_case(2, 8);
        let [m, p] = bin_gap(&spec, &frf.y[3], 3);
        let inj = InjectionVariables {
            bins: vec![3],
            values: vec![[m.re, m.im, p.re, p.im]],
        };
        let r = residuals(&spec, &frf, &inj, &[2, 3, 4]).unwrap();
        assert_eq!(r.at(1), Vector4::zeros());
        assert!(r.at(0).norm() > 0.0);
    }

    #[test]
    fn errors() {
        let (spec, mut frf) = random_case(3, 6);
        let inj = InjectionVariables::zeros(&[5]);
        assert_eq!(
            residuals(&spec, &frf, &inj, &[1, 2]),
            Err(LikelihoodError::InjectionOutsideBins(5))
        );
        frf.grid[2] += 0.01;
        assert_eq!(
            residuals(&spec, &frf, &InjectionVariables::default(), &[1]),
            Err(LikelihoodError::GridMismatch)
        );
    }

    #[test]
    fn zero_frf_leaves_own_channel_noise() {
        let blk = covariance_block(&Matrix2::zeros(), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(blk, Matrix4::from_diagonal(&Vector4::new(3.0, 3.0, 4.0, 4.0)));
    }

    /// Linear map from the eight noise components `[εVr, εVi, εθr, εθi, εIr, εIi, εφr, εφi]`
    /// to `[N_r, N_i, Q_r, Q_i]`, read off the complex expressions.
    fn noise_map(y: &Matrix2<Complex64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(4, 8);
        for (row, yr) in [(0usize, 0usize), (2, 1)] {
            for (col, yc) in [(0usize, 0usize), (2, 1)] {
                let z = y[(yr, yc)];
                // -(z ε): real part -(z_r ε_r - z_i ε_i), imag part -(z_i ε_r + z_r ε_i)
                g[(row, col)] = -z.re;
                g[(row, col + 1)] = z.im;
                g[(row + 1, col)] = -z.im;
                g[(row + 1, col + 1)] = -z.re;
            }
        }
        g[(0, 4)] = 1.0;
        g[(1, 5)] = 1.0;
        g[(2, 6)] = 1.0;
        g[(3, 7)] = 1.0;
        g
    }

    #[test]
    fn block_matches_dense_congruence_and_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let svar = [0.3, 0.7, 0.2, 0.5];
        let s = DVector::from_vec(
            [svar[0], svar[0], svar[1], svar[1], svar[2], svar[2], svar[3], svar[3]].to_vec(),
        );
        for _ in 0..5 {
            let y = Matrix2::from_fn(|_, _| rand_c(&mut rng));
            let blk = covariance_block(&y, svar);
            let g = noise_map(&y);
            let dense = &g * DMatrix::from_diagonal(&s) * g.transpose();
            for r in 0..4 {
                for c in 0..4 {
                    assert!((blk[(r, c)] - dense[(r, c)]).abs() < 1e-12);
                }
            }
            assert_eq!(blk[(0, 1)], 0.0);
            assert_eq!(blk[(2, 3)], 0.0);
        }
        // Monte Carlo on one random Y
        let y = Matrix2::from_fn(|_, _| rand_c(&mut rng));
        let blk = covariance_block(&y, svar);
        let g = noise_map(&y);
        let n = 100_000;
        let mut acc = Matrix4::<f64>::zeros();
        for _ in 0..n {
            let e = DVector::from_fn(8, |i, _| {
                s[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
            });
            let x = &g * e;
            let x4 = Vector4::new(x[0], x[1], x[2], x[3]);
            acc += x4 * x4.transpose();
        }
        acc /= n as f64;
        let scale = blk.diagonal().max();
        for r in 0..4 {
            for c in 0..4 {
                let tol = 0.05 * blk[(r, c)].abs().max(0.1 * scale);
                assert!((acc[(r, c)] - blk[(r, c)]).abs() < tol, "{r},{c}");
            }
        }
    }

    #[test]
    fn nll_examples_and_dense_oracle() {
        let (spec, frf) = random_case(4, 10);
        let bins: Vec<usize> = (1..10).collect();
        let r = residuals(&spec, &frf, &InjectionVariables::default(), &bins).unwrap();
        let gamma = noise_covariance(&frf, [0.1, 0.2, 0.3, 0.4], &bins);
        let dense = gamma.to_dense();
        let rs = DVector::from_vec(r.stacked());
        let oracle = rs.dot(&dense.clone().lu().solve(&rs).unwrap());
        let fast = neg_log_likelihood(&r, &gamma).unwrap();
        assert!((fast - oracle).abs() < 1e-12 * oracle);
        assert!(dense.symmetric_eigenvalues().min() > 0.0);
        assert!(dense.iter().filter(|x| **x != 0.0).count() <= 16 * bins.len());

        let zero = ResidualVector {
            bins: bins.clone(),
            mr: vec![0.0; 9],
            mi: vec![0.0; 9],
            pr: vec![0.0; 9],
            pi: vec![0.0; 9],
        };
        assert_eq!(neg_log_likelihood(&zero, &gamma).unwrap(), 0.0);
        let ident = NoiseCovariance {
            bins: bins.clone(),
            blocks: vec![Matrix4::identity(); 9],
        };
        let n2: f64 = r.stacked().iter().map(|x| x * x).sum();
        assert!((neg_log_likelihood(&r, &ident).unwrap() - n2).abs() < 1e-12 * n2);
    }

    #[test]
    fn indefinite_block_is_reported() {
        let r = ResidualVector {
            bins: vec![1],
            mr: vec![1.0],
            mi: vec![0.0],
            pr: vec![0.0],
            pi: vec![0.0],
        };
        let g = NoiseCovariance {
            bins: vec![1],
            blocks: vec![-Matrix4::identity()],
        };
        assert_eq!(
            neg_log_likelihood(&r, &g),
            Err(LikelihoodError::NotPositiveDefinite(0))
        );
    }

    proptest! {
        #[test]
        fn permutation_invariance(seed in 0u64..500, rot in 1usize..8) {
            let (spec, frf) = random_case(seed, 9);
            let bins: Vec<usize> = (1..9).collect();
            let mut perm = bins.clone();
            perm.rotate_left(rot);
            let svar = [0.1, 0.2, 0.05, 0.3];
            let inj = InjectionVariables::default();
            let a = neg_log_likelihood(
                &residuals(&spec, &frf, &inj, &bins).unwrap(),
                &noise_covariance(&frf, svar, &bins),
            ).unwrap();
            let b = neg_log_likelihood(
                &residuals(&spec, &frf, &inj, &perm).unwrap(),
                &noise_covariance(&frf, svar, &perm),
            ).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * a.max(1.0));
        }

        #[test]
        fn block_is_positive_definite(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = Matrix2::from_fn(|_, _| rand_c(&mut rng));
            let blk = covariance_block(&y, [1e-3, 2e-3, 1e-4, 1e-4]);
            prop_assert!((blk - blk.transpose()).amax() == 0.0);
            prop_assert!(blk.symmetric_eigenvalues().min() > 0.0);
        }

        #[test]
        fn injection_spans_residual_space(seed in 0u64..1000) {
            let (spec, frf) = random_case(seed, 5);
            let w = 1 + (seed as usize % 4);
            let [m, p] = bin_gap(&spec, &frf.y[w], w);
            let inj = InjectionVariables { bins: vec![w], values: vec![[m.re, m.im, p.re, p.im]] };
            let r = residuals(&spec, &frf, &inj, &[w]).unwrap();
            prop_assert!(r.at(0).amax() == 0.0);
        }
    }
}
