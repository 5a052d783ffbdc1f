//! Allocation-free per-bin FRF evaluation on small state dimensions (n ≤ 4).

use num_complex::Complex64 as C;

use crate::dynamics::frf::MAX_RESOLVENT_COND;
use crate::dynamics::linear::{LinMats, ModelJet};
use crate::error::DynamicsError;

pub(crate) const NMAX: usize = 4;
type Sq = [[C; NMAX]; NMAX];
type Vn = [C; NMAX];

const ZERO: C = C::new(0.0, 0.0);

/// Gauss–Jordan inverse with partial pivoting of the leading n×n block.
fn invert(m: &Sq, n: usize) -> Option<Sq> {
    let mut a = *m;
    let mut inv = [[ZERO; NMAX]; NMAX];
    for (i, row) in inv.iter_mut().enumerate().take(n) {
        row[i] = C::new(1.0, 0.0);
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].norm().total_cmp(&a[j][col].norm()))?;
        if a[piv][col].norm() == 0.0 {
            return None;
        }
        a.swap(col, piv);
        inv.swap(col, piv);
        let d = a[col][col].inv();
        for j in 0..n {
            a[col][j] *= d;
            inv[col][j] *= d;
        }
        for i in 0..n {
            if i != col {
                let f = a[i][col];
                if f != ZERO {
                    for j in 0..n {
                        let (ac, ic) = (a[col][j], inv[col][j]);
                        a[i][j] -= f * ac;
                        inv[i][j] -= f * ic;
                    }
                }
            }
        }
    }
    Some(inv)
}

fn norm1(m: &Sq, n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| m[i][j].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `(jΩI − A)^{-1}` for the row-major real `A`.
pub(crate) fn resolvent(a: &[f64], n: usize, bin: usize, omega: f64) -> Result<Sq, DynamicsError> {
    let mut m = [[ZERO; NMAX]; NMAX];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = C::new(-a[i * n + j], if i == j { omega } else { 0.0 });
        }
    }
    let inv = invert(&m, n);
    let cond = inv
        .as_ref()
        .map(|v| norm1(&m, n) * norm1(v, n))
        .unwrap_or(f64::INFINITY);
    match inv {
        Some(v) if cond.is_finite() && cond <= MAX_RESOLVENT_COND => Ok(v),
        _ => Err(DynamicsError::ResonantBin { bin, omega, cond }),
    }
}

/// `M v` for the leading n×n block.
#[inline]
fn mv(m: &Sq, v: &Vn, n: usize) -> Vn {
    let mut out = [ZERO; NMAX];
    for i in 0..n {
        let mut s = ZERO;
        for j in 0..n {
            s += m[i][j] * v[j];
        }
        out[i] = s;
    }
    out
}

/// Real row-major `A (n×n) v`.
#[inline]
fn av(a: &[f64], v: &Vn, n: usize) -> Vn {
    let mut out = [ZERO; NMAX];
    for i in 0..n {
        let mut s = ZERO;
        for j in 0..n {
            s += v[j] * a[i * n + j];
        }
        out[i] = s;
    }
    out
}

/// Real row-major `B (n×2) u`.
#[inline]
fn bu(b: &[f64], u: &[C; 2], n: usize) -> Vn {
    let mut out = [ZERO; NMAX];
    for i in 0..n {
        out[i] = u[0] * b[2 * i] + u[1] * b[2 * i + 1];
    }
    out
}

/// Real row-major `C (2×n) v`.
#[inline]
fn cv(c: &[f64], v: &Vn, n: usize) -> [C; 2] {
    let mut out = [ZERO; 2];
    for (r, o) in out.iter_mut().enumerate() {
        for j in 0..n {
            *o += v[j] * c[r * n + j];
        }
    }
    out
}

#[inline]
fn du(d: &[f64; 4], u: &[C; 2]) -> [C; 2] {
    [u[0] * d[0] + u[1] * d[1], u[0] * d[2] + u[1] * d[3]]
}

#[inline]
fn add2(a: [C; 2], b: [C; 2]) -> [C; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
fn addn(a: Vn, b: Vn) -> Vn {
    std::array::from_fn(|i| a[i] + b[i])
}

/// Row-vector `c_r M` for both output rows.
fn cm(c: &[f64], m: &Sq, n: usize) -> [Vn; 2] {
    let mut out = [[ZERO; NMAX]; 2];
    for r in 0..2 {
        for j in 0..n {
            let mut s = ZERO;
            for i in 0..n {
                s += m[i][j] * c[r * n + i];
            }
            out[r][j] = s;
        }
    }
    out
}

#[inline]
fn rowdot(row: &[Vn; 2], v: &Vn, n: usize) -> [C; 2] {
    let mut out = [ZERO; 2];
    for r in 0..2 {
        for j in 0..n {
            out[r] += row[r][j] * v[j];
        }
    }
    out
}

/// Full 2×2 `Y(Ω)` as `[[Y11, Y12], [Y21, Y22]]`.
pub(crate) fn y_matrix(v: &LinMats<f64>, bin: usize, omega: f64) -> Result<[[C; 2]; 2], DynamicsError> {
    let n = v.n;
    let d = |r: usize, c: usize| C::new(v.d[2 * r + c], 0.0);
    if n == 0 {
        return Ok([[d(0, 0), d(0, 1)], [d(1, 0), d(1, 1)]]);
    }
    let m = resolvent(&v.a, n, bin, omega)?;
    let cmr = cm(&v.c, &m, n);
    let mut y = [[ZERO; 2]; 2];
    for (col, e) in [[C::new(1.0, 0.0), ZERO], [ZERO, C::new(1.0, 0.0)]].iter().enumerate() {
        let yu = add2(rowdot(&cmr, &bu(&v.b, e, n), n), du(&v.d, e));
        y[0][col] = yu[0];
        y[1][col] = yu[1];
    }
    Ok(y)
}

/// `Y u`, `∂(Y u)/∂θ_k` and optionally `∂²(Y u)/∂θ_k∂θ_l` at one bin.
pub(crate) struct BinResponse {
    pub yu: [C; 2],
    pub dyu: Vec<[C; 2]>,
    pub d2yu: Option<Vec<Vec<[C; 2]>>>,
}

/// With `M = (jΩI − A)^{-1}`, `p = M B u`, `q_k = A_k p + B_k u`, `r_k = M q_k`:
/// `∂_k(Yu) = C_k p + C M q_k + D_k u` and
/// `∂_kl(Yu) = C_kl p + C_k r_l + C_l r_k + C M (A_l r_k + A_k r_l + A_kl p + B_kl u) + D_kl u`.
pub(crate) fn bin_response(
    jet: &ModelJet,
    bin: usize,
    omega: f64,
    u: [C; 2],
) -> Result<BinResponse, DynamicsError> {
    let v = &jet.value;
    let n = v.n;
    if n == 0 {
        return Ok(BinResponse {
            yu: du(&v.d, &u),
            dyu: jet.first.iter().map(|p| du(&p.d, &u)).collect(),
            d2yu: jet
                .second
                .as_ref()
                .map(|s| s.iter().map(|row| row.iter().map(|p| du(&p.d, &u)).collect()).collect()),
        });
    }
    let m = resolvent(&v.a, n, bin, omega)?;
    let p = mv(&m, &bu(&v.b, &u, n), n);
    let cmr = cm(&v.c, &m, n);
    let yu = add2(cv(&v.c, &p, n), du(&v.d, &u));
    let q: Vec<Vn> = jet
        .first
        .iter()
        .map(|dk| addn(av(&dk.a, &p, n), bu(&dk.b, &u, n)))
        .collect();
    let dyu: Vec<[C; 2]> = jet
        .first
        .iter()
        .zip(&q)
        .map(|(dk, qk)| add2(add2(cv(&dk.c, &p, n), rowdot(&cmr, qk, n)), du(&dk.d, &u)))
        .collect();
    let d2yu = jet.second.as_ref().map(|sec| {
        let r: Vec<Vn> = q.iter().map(|qk| mv(&m, qk, n)).collect();
        let mm = jet.first.len();
        (0..mm)
            .map(|k| {
                (0..mm)
                    .map(|l| {
                        let (dk, dl, dkl) = (&jet.first[k], &jet.first[l], &sec[k][l]);
                        let inner = addn(
                            addn(av(&dl.a, &r[k], n), av(&dk.a, &r[l], n)),
                            addn(av(&dkl.a, &p, n), bu(&dkl.b, &u, n)),
                        );
                        add2(
                            add2(
                                add2(cv(&dkl.c, &p, n), cv(&dk.c, &r[l], n)),
                                add2(cv(&dl.c, &r[k], n), rowdot(&cmr, &inner, n)),
                            ),
                            du(&dkl.d, &u),
                        )
                    })
                    .collect()
            })
            .collect()
    });
    Ok(BinResponse { yu, dyu, d2yu })
}
