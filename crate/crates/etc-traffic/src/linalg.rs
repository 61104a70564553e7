//! Dense linear-algebra helpers: matrix exponential, nonsymmetric eigenpairs
//! via inverse iteration, and small orthonormalization utilities.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex;

type C = Complex<f64>;

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling-and-squaring with a degree-13 Pade approximant.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    let norm = a.abs().column_sum().max();
    if !norm.is_finite() {
        return Err(Error::NumericOverflow { s: f64::NAN });
    }
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a / 2f64.powi(s);
    let b = &PADE13;
    let eye = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let u_inner = &a6 * (b[13] * &a6 + b[11] * &a4 + b[9] * &a2)
        + b[7] * &a6
        + b[5] * &a4
        + b[3] * &a2
        + b[1] * &eye;
    let u = &a * u_inner;
    let v = &a6 * (b[12] * &a6 + b[10] * &a4 + b[8] * &a2)
        + b[6] * &a6
        + b[4] * &a4
        + b[2] * &a2
        + b[0] * &eye;
    let lhs = &v - &u;
    let rhs = &v + &u;
    let mut x = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Eigensolver("singular Pade denominator".into()))?;
    for _ in 0..s {
        x = &x * &x;
    }
    if x.iter().any(|e| !e.is_finite()) {
        return Err(Error::NumericOverflow { s: f64::NAN });
    }
    Ok(x)
}

/// 0.5 (M + M').
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let mut ev = m.clone().symmetric_eigen().eigenvalues;
    ev.as_mut_slice()
        .sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    ev
}

pub fn lambda_max_sym(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[m.nrows() - 1]
}

pub fn lambda_min_sym(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

/// Complex eigenvalues sorted by magnitude, descending, with unit eigenvectors
/// computed by shifted inverse iteration. Eigenvector phases are normalized so
/// the largest-magnitude component is real and positive.
pub fn eigen_pairs(m: &DMatrix<f64>) -> Result<(Vec<C>, Vec<DVector<C>>)> {
    let n = m.nrows();
    assert_eq!(n, m.ncols());
    let mut values: Vec<C> = m.clone().complex_eigenvalues().iter().copied().collect();
    values.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).expect("finite eigenvalues"));
    let mc = m.map(|x| C::new(x, 0.0));
    let scale = m.abs().max().max(1e-300);
    let mut vectors = Vec::with_capacity(n);
    for &lam in &values {
        vectors.push(inverse_iteration(&mc, lam, scale)?);
    }
    Ok((values, vectors))
}

fn inverse_iteration(mc: &DMatrix<C>, lam: C, scale: f64) -> Result<DVector<C>> {
    let n = mc.nrows();
    let eye = DMatrix::<C>::identity(n, n);
    // small shift keeps the system solvable when lam is (numerically) exact
    let mut shift = 1e-12 * scale;
    for _attempt in 0..4 {
        let b = mc - &eye * (lam + C::new(shift, shift));
        if let Some(lu) = try_lu(&b) {
            let mut v = DVector::<C>::from_element(n, C::new(1.0, 0.0));
            // deterministic non-degenerate start
            for i in 0..n {
                v[i] = C::new(1.0 + 0.1 * (i as f64 + 1.0), 0.05 * (i as f64 + 1.0));
            }
            v /= C::new(v.norm(), 0.0);
            let mut ok = false;
            for _ in 0..8 {
                match lu.solve(&v) {
                    Some(w) => {
                        let nw = w.norm();
                        if !nw.is_finite() || nw == 0.0 {
                            break;
                        }
                        v = w / C::new(nw, 0.0);
                        ok = true;
                    }
                    None => break,
                }
            }
            if ok {
                return Ok(normalize_phase(v));
            }
        }
        shift *= 100.0;
    }
    Err(Error::Eigensolver("inverse iteration failed".into()))
}

fn try_lu(b: &DMatrix<C>) -> Option<nalgebra::LU<C, nalgebra::Dyn, nalgebra::Dyn>> {
    let lu = b.clone().lu();
    // nalgebra's LU always succeeds structurally; rely on solve for singularity
    Some(lu)
}

fn normalize_phase(mut v: DVector<C>) -> DVector<C> {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].norm() > v[best].norm() {
            best = i;
        }
    }
    let ph = v[best] / C::new(v[best].norm().max(1e-300), 0.0);
    let rot = ph.conj();
    for e in v.iter_mut() {
        *e *= rot;
    }
    v
}

/// Orthonormal basis of the orthogonal complement of a nonzero vector, as the
/// trailing columns of a Householder reflector mapping x/|x| to +-e1.
pub fn orthonormal_complement(x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let u = x / x.norm();
    let mut v = u.clone();
    let s = if u[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += s;
    let vtv = v.dot(&v);
    let mut h = DMatrix::<f64>::identity(n, n);
    if vtv > 1e-300 {
        h -= (2.0 / vtv) * &v * v.transpose();
    }
    h.columns(1, n - 1).into_owned()
}

/// Orthonormalize the columns of a full-column-rank matrix (thin QR).
pub fn orthonormalize(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = v.ncols();
    let qr = v.clone().qr();
    let r = qr.r();
    let scale = v.abs().max().max(1e-300);
    for i in 0..m {
        if r[(i, i)].abs() <= 1e-10 * scale {
            return Err(Error::RankDeficient);
        }
    }
    Ok(qr.q())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn expm_of_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(expm(&z).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn expm_diagonal() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -2.0, 0.5]));
        let e = expm(&d).unwrap();
        for (i, &lam) in [1.0, -2.0, 0.5].iter().enumerate() {
            assert_relative_eq!(e[(i, i)], f64::exp(lam), max_relative = 1e-14);
        }
    }

    #[test]
    fn expm_matches_series_on_random_matrices() {
        use rand::Rng;
        let mut rng = crate::rng::derive(7, "expm-test", 0);
        for _ in 0..20 {
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-2.0..2.0));
            let e = expm(&a).unwrap();
            // Taylor series with scaling by 2^-10
            let b = &a / 1024.0;
            let mut term = DMatrix::<f64>::identity(4, 4);
            let mut sum = term.clone();
            for k in 1..30 {
                term = &term * &b / (k as f64);
                sum += &term;
            }
            let mut series = sum;
            for _ in 0..10 {
                series = &series * &series;
            }
            assert_relative_eq!(e, series, max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn eigen_pairs_recover_spectrum() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.5]);
        let (vals, vecs) = eigen_pairs(&m).unwrap();
        let mags: Vec<f64> = vals.iter().map(|v| v.norm()).collect();
        assert!(mags.windows(2).all(|w| w[0] >= w[1]));
        let mc = m.map(|x| C::new(x, 0.0));
        for (lam, v) in vals.iter().zip(&vecs) {
            let res = (&mc * v - v * *lam).norm();
            assert!(res < 1e-9, "residual {res}");
        }
    }

    #[test]
    fn complement_is_orthonormal() {
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let o = orthonormal_complement(&x);
        assert_eq!(o.ncols(), 3);
        let otx = o.transpose() * &x;
        assert!(otx.norm() < 1e-12);
        let oto = o.transpose() * &o;
        assert_relative_eq!(oto, DMatrix::identity(3, 3), epsilon = 1e-12);
    }
}
