use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::linear::{LinMats, LinearModel, ModelJet};
use crate::error::DynamicsError;

/// Condition number above which the resolvent is treated as singular.
pub const MAX_RESOLVENT_COND: f64 = 1e12;

type CMat = DMatrix<Complex64>;

/// Per-bin 2×2 admittance `[Ĩ; φ̃] = Y(Ω) [Ṽ; θ̃]` on a frequency grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frf {
    pub grid: Vec<f64>,
    pub y: Vec<Matrix2<Complex64>>,
}

impl Frf {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
}

fn to_complex(m: &DMatrix<f64>) -> CMat {
    m.map(|x| Complex64::new(x, 0.0))
}

fn to_m2(m: &CMat) -> Matrix2<Complex64> {
    Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)])
}

fn norm1(m: &CMat) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `(jΩI − A)^{-1}` with a 1-norm condition check.
fn resolvent(a: &CMat, bin: usize, omega: f64) -> Result<CMat, DynamicsError> {
    let n = a.nrows();
    let mut m = -a.clone();
    for i in 0..n {
        m[(i, i)] += Complex64::new(0.0, omega);
    }
    let inv = m.clone().try_inverse();
    let cond = inv
        .as_ref()
        .map(|inv| norm1(&m) * norm1(inv))
        .unwrap_or(f64::INFINITY);
    match inv {
        Some(inv) if cond.is_finite() && cond <= MAX_RESOLVENT_COND => Ok(inv),
        _ => Err(DynamicsError::ResonantBin { bin, omega, cond }),
    }
}

/// `Y(Ω) = C (jΩI − A)^{-1} B + D` at every grid frequency.
pub fn frf(model: &LinearModel, grid: &[f64]) -> Result<Frf, DynamicsError> {
    let d = to_m2(&to_complex(&model.d));
    if model.n_states() == 0 {
        return Ok(Frf {
            grid: grid.to_vec(),
            y: vec![d; grid.len()],
        });
    }
    let a = to_complex(&model.a);
    let b = to_complex(&model.b);
    let c = to_complex(&model.c);
    let y = grid
        .iter()
        .enumerate()
        .map(|(w, &om)| {
            let m = resolvent(&a, w, om)?;
            Ok(to_m2(&(&c * m * &b)) + d)
        })
        .collect::<Result<Vec<_>, DynamicsError>>()?;
    Ok(Frf {
        grid: grid.to_vec(),
        y,
    })
}

/// FRF values and their derivatives with respect to the model's log-parameters,
/// restricted to a subset of grid bins.
#[derive(Clone, Debug)]
pub struct FrfJet {
    pub bins: Vec<usize>,
    /// `y[b]` is Y at `bins[b]`.
    pub y: Vec<Matrix2<Complex64>>,
    /// `dy[b][k]` = ∂Y/∂θ_k.
    pub dy: Vec<Vec<Matrix2<Complex64>>>,
    /// `d2y[b][k][l]` = ∂²Y/∂θ_k∂θ_l when second derivatives were requested.
    pub d2y: Option<Vec<Vec<Vec<Matrix2<Complex64>>>>>,
}

struct CMats {
    a: CMat,
    b: CMat,
    c: CMat,
    d: CMat,
}

fn cmats(m: &LinMats<f64>) -> CMats {
    let lm = m.to_model();
    CMats {
        a: to_complex(&lm.a),
        b: to_complex(&lm.b),
        c: to_complex(&lm.c),
        d: to_complex(&lm.d),
    }
}

/// Resolvent sensitivities: with `M = (jΩI − A)^{-1}` and `W_k = A_k M B + B_k`,
/// `Y_k = C_k M B + C M W_k + D_k`, and the mixed second derivative follows by
/// differentiating that expression once more.
pub fn frf_jet(jet: &ModelJet, grid: &[f64], bins: &[usize]) -> Result<FrfJet, DynamicsError> {
    let v = cmats(&jet.value);
    let d1: Vec<CMats> = jet.first.iter().map(cmats).collect();
    let d2: Option<Vec<Vec<CMats>>> = jet
        .second
        .as_ref()
        .map(|s| s.iter().map(|row| row.iter().map(cmats).collect()).collect());
    let m = d1.len();
    let n = v.a.nrows();

    let mut y = Vec::with_capacity(bins.len());
    let mut dy = Vec::with_capacity(bins.len());
    let mut d2y = d2.as_ref().map(|_| Vec::with_capacity(bins.len()));
    for &w in bins {
        let om = *grid.get(w).ok_or_else(|| {
            DynamicsError::InvalidParams(format!("bin {w} outside the frequency grid"))
        })?;
        if n == 0 {
            y.push(to_m2(&v.d));
            dy.push(d1.iter().map(|p| to_m2(&p.d)).collect());
            if let (Some(out), Some(d2)) = (d2y.as_mut(), d2.as_ref()) {
                out.push(
                    d2.iter()
                        .map(|row| row.iter().map(|p| to_m2(&p.d)).collect())
                        .collect(),
                );
            }
            continue;
        }
        let res = resolvent(&v.a, w, om)?;
        let mb = &res * &v.b;
        let cm = &v.c * &res;
        y.push(to_m2(&(&v.c * &mb + &v.d)));
        let wk: Vec<CMat> = d1.iter().map(|p| &p.a * &mb + &p.b).collect();
        let yk: Vec<Matrix2<Complex64>> = d1
            .iter()
            .zip(&wk)
            .map(|(p, wk)| to_m2(&(&p.c * &mb + &cm * wk + &p.d)))
            .collect();
        dy.push(yk);
        if let (Some(out), Some(d2)) = (d2y.as_mut(), d2.as_ref()) {
            let mw: Vec<CMat> = wk.iter().map(|w| &res * w).collect();
            let mut rows = Vec::with_capacity(m);
            for k in 0..m {
                let mut row = Vec::with_capacity(m);
                for l in 0..m {
                    let p2 = &d2[k][l];
                    let val = &p2.c * &mb
                        + &d1[k].c * &mw[l]
                        + &d1[l].c * &mw[k]
                        + &cm * &d1[l].a * &mw[k]
                        + &cm * (&p2.a * &mb + &d1[k].a * &mw[l] + &p2.b)
                        + &p2.d;
                    row.push(to_m2(&val));
                }
                rows.push(row);
            }
            out.push(rows);
        }
    }
    Ok(FrfJet {
        bins: bins.to_vec(),
        y,
        dy,
        d2y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::equilibrium::TerminalCondition;
    use crate::dynamics::linear::GeneratorModel;
    use crate::dynamics::params::{GeneratorParams, ModelOrder};

    fn gen_model() -> GeneratorModel {
        GeneratorModel::new(
            GeneratorParams {
                model: ModelOrder::FluxDecay3,
                h: 3.5,
                d: 2.0,
                xd: 1.2,
                xd_prime: 0.3,
                xq: 0.9,
                td0_prime: 6.0,
                e_prime: 0.0,
                ka: 40.0,
                ta: 0.2,
            },
            TerminalCondition { p: 0.7, q: 0.2, v: 1.01, theta: -0.2 },
        )
    }

    fn grid() -> Vec<f64> {
        (0..200).map(|w| 2.0 * std::f64::consts::PI * w as f64 * 0.02).collect()
    }

    #[test]
    fn static_model_is_feedthrough() {
        let m = LinearModel::feedthrough([[1.0, -2.0], [0.5, 3.0]]);
        let f = frf(&m, &grid()).unwrap();
        for y in &f.y {
            assert_eq!(y[(0, 1)], Complex64::new(-2.0, 0.0));
            assert_eq!(y[(1, 1)], Complex64::new(3.0, 0.0));
        }
    }

    #[test]
    fn dc_gain() {
        let gm = gen_model();
        let lin = gm.linear_model(&gm.log_params()).unwrap();
        let f = frf(&lin, &[0.0]).unwrap();
        let dc = &lin.d - &lin.c * lin.a.clone().try_inverse().unwrap() * &lin.b;
        for r in 0..2 {
            for c in 0..2 {
                assert!((f.y[0][(r, c)].re - dc[(r, c)]).abs() < 1e-10);
                assert!(f.y[0][(r, c)].im.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn integrator_is_resonant_at_dc() {
        let m = LinearModel {
            a: DMatrix::zeros(1, 1),
            b: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            c: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            d: DMatrix::zeros(2, 2),
        };
        assert!(matches!(
            frf(&m, &[0.0, 1.0]),
            Err(DynamicsError::ResonantBin { bin: 0, .. })
        ));
        assert!(frf(&m, &[1.0]).is_ok());
    }

    #[test]
    fn jet_matches_frf_and_differences() {
        let gm = gen_model();
        let th = gm.log_params();
        let g = grid();
        let bins: Vec<usize> = vec![1, 7, 25, 60, 199];
        let jet = frf_jet(&gm.jet(&th, true).unwrap(), &g, &bins).unwrap();
        let base = frf(&gm.linear_model(&th).unwrap(), &g).unwrap();
        let h = 1e-5;
        for k in 0..th.len() {
            let (mut tp, mut tm) = (th.clone(), th.clone());
            tp[k] += h;
            tm[k] -= h;
            let fp = frf(&gm.linear_model(&tp).unwrap(), &g).unwrap();
            let fm = frf(&gm.linear_model(&tm).unwrap(), &g).unwrap();
            let jp = frf_jet(&gm.jet(&tp, false).unwrap(), &g, &bins).unwrap();
            let jm = frf_jet(&gm.jet(&tm, false).unwrap(), &g, &bins).unwrap();
            for (b, &w) in bins.iter().enumerate() {
                assert!((jet.y[b] - base.y[w]).norm() < 1e-12);
                let fd = (fp.y[w] - fm.y[w]) / Complex64::new(2.0 * h, 0.0);
                let scale = fd.norm().max(jet.y[b].norm()).max(1e-3);
                assert!((jet.dy[b][k] - fd).norm() < 1e-6 * scale, "k={k} w={w}");
                for l in 0..th.len() {
                    let fd2 = (jp.dy[b][l] - jm.dy[b][l]) / Complex64::new(2.0 * h, 0.0);
                    let an = jet.d2y.as_ref().unwrap()[b][k][l];
                    let scale = fd2.norm().max(jet.y[b].norm()).max(1e-3);
                    assert!((an - fd2).norm() < 1e-5 * scale, "k={k} l={l} w={w}");
                }
            }
        }
    }

    #[test]
    fn frf_varies_continuously() {
        let gm = gen_model();
        let g: Vec<f64> = (1..2000).map(|w| w as f64 * 0.01).collect();
        let f = frf(&gm.linear_model(&gm.log_params()).unwrap(), &g).unwrap();
        for w in 1..f.len() - 1 {
            for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let step = (f.y[w + 1][(r, c)] - f.y[w][(r, c)]).norm();
                let secant = (f.y[w + 1][(r, c)] - f.y[w - 1][(r, c)]).norm() / 2.0;
                assert!(step <= 10.0 * secant + 1e-12);
            }
        }
    }
}
