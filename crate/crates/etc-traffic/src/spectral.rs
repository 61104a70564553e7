//! Spectral classification of cycle matrices and eigen-invariant enumeration.

use crate::linalg::{eigen_pairs, orthonormalize, sym_eigenvalues};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use std::f64::consts::PI;

type C = Complex<f64>;

/// Eigenstructure of a (cycle) matrix with the flags the qualitative tests
/// need. "Mixed" means equal-magnitude eigenvalues occur only as complex
/// conjugate pairs; "irrational rotations" means no complex eigenvalue has an
/// argument that is a rational multiple of pi (within tolerance, denominators
/// up to q_max).
#[derive(Clone, Debug)]
pub struct SpectralProfile {
    /// Sorted by magnitude, descending.
    pub eigenvalues: Vec<C>,
    pub eigenvectors: Vec<DVector<C>>,
    pub mixed: bool,
    pub irrational_rotations: bool,
    pub nonsingular: bool,
    pub schur: bool,
}

/// Knobs for the rationality and tie tests.
#[derive(Clone, Copy, Debug)]
pub struct SpectralOptions {
    pub psd_tol: f64,
    pub angle_tol: f64,
    pub q_max: u64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions { psd_tol: 1e-9, angle_tol: 1e-9, q_max: 64 }
    }
}

/// arg/pi admits a rational approximation p/q with q <= q_max within tol.
pub fn is_rational_multiple_of_pi(arg: f64, q_max: u64, tol: f64) -> bool {
    let t = arg / PI;
    // continued-fraction convergents of t
    let mut x = t;
    let (mut h0, mut h1) = (1i64, x.floor() as i64);
    let (mut k0, mut k1) = (0i64, 1i64);
    for _ in 0..64 {
        if (t - h1 as f64 / k1 as f64).abs() < tol && (k1 as u64) <= q_max {
            return true;
        }
        let frac = x - x.floor();
        if frac.abs() < 1e-15 {
            break;
        }
        x = 1.0 / frac;
        let a = x.floor() as i64;
        let h2 = a.saturating_mul(h1).saturating_add(h0);
        let k2 = a.saturating_mul(k1).saturating_add(k0);
        if k2 as u64 > q_max.saturating_mul(4) || k2 <= 0 {
            break;
        }
        h0 = h1;
        h1 = h2;
        k0 = k1;
        k1 = k2;
    }
    (t - h1 as f64 / k1 as f64).abs() < tol && (k1 as u64) <= q_max
}

pub fn spectral_profile(m: &DMatrix<f64>, opts: &SpectralOptions) -> Result<SpectralProfile> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Dimension("square matrix required".into()));
    }
    let (values, vectors) = eigen_pairs(m)?;
    let n = values.len();
    let scale = values[0].norm().max(1.0);
    let mut mixed = true;
    for i in 0..n.saturating_sub(1) {
        let (a, b) = (values[i], values[i + 1]);
        if (a.norm() - b.norm()).abs() <= opts.psd_tol * scale {
            let conjugate_pair = a.im != 0.0 && (a - b.conj()).norm() <= 1e-7 * scale;
            if !conjugate_pair {
                mixed = false;
            }
        }
    }
    let irrational_rotations = values.iter().all(|v| {
        if v.im.abs() <= opts.psd_tol * scale {
            true
        } else {
            !is_rational_multiple_of_pi(v.arg(), opts.q_max, opts.angle_tol)
        }
    });
    let nonsingular = values[n - 1].norm() > opts.psd_tol * scale;
    let schur = values[0].norm() < 1.0 - opts.psd_tol;
    Ok(SpectralProfile { eigenvalues: values, eigenvectors: vectors, mixed, irrational_rotations, nonsingular, schur })
}

/// Whether a linear invariant is a line or a plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InvariantKind {
    Line,
    Plane,
}

/// An eigen-invariant subspace candidate: orthonormal basis plus the magnitude
/// of its eigenvalue(s). Candidates are produced dominant-first.
#[derive(Clone, Debug)]
pub struct InvariantBasis {
    pub basis: DMatrix<f64>,
    pub kind: InvariantKind,
    pub eigenvalue: C,
    pub magnitude: f64,
}

/// One o-line per real eigenvalue and one realified o-plane per conjugate
/// pair, ordered by eigenvalue magnitude. Requires a mixed matrix for
/// completeness.
pub fn candidate_invariants(profile: &SpectralProfile) -> Result<Vec<InvariantBasis>> {
    if !profile.mixed {
        return Err(Error::Eigensolver(
            "matrix is not mixed; eigen-invariant enumeration is incomplete".into(),
        ));
    }
    Ok(candidate_invariants_lenient(profile))
}

/// Same enumeration without the mixedness guarantee.
pub fn candidate_invariants_lenient(profile: &SpectralProfile) -> Vec<InvariantBasis> {
    let n = profile.eigenvalues.len();
    let scale = profile.eigenvalues[0].norm().max(1.0);
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let lam = profile.eigenvalues[i];
        let v = &profile.eigenvectors[i];
        if lam.im.abs() <= 1e-9 * scale {
            let line = v.map(|c| c.re);
            if let Ok(basis) = orthonormalize(&DMatrix::from_column_slice(n, 1, line.as_slice())) {
                out.push(InvariantBasis {
                    basis,
                    kind: InvariantKind::Line,
                    eigenvalue: lam,
                    magnitude: lam.norm(),
                });
            }
            i += 1;
        } else {
            // realified plane from the conjugate pair: span{Re v, Im v}
            let re = v.map(|c| c.re);
            let im = v.map(|c| c.im);
            let mut cols = DMatrix::zeros(n, 2);
            cols.set_column(0, &re);
            cols.set_column(1, &im);
            if let Ok(basis) = orthonormalize(&cols) {
                out.push(InvariantBasis {
                    basis,
                    kind: InvariantKind::Plane,
                    eigenvalue: lam,
                    magnitude: lam.norm(),
                });
            }
            // skip the conjugate partner
            i += 2;
        }
    }
    out
}

/// All eigenvalues strictly inside the unit circle (with tolerance).
pub fn schur_check(m: &DMatrix<f64>, psd_tol: f64) -> Result<bool> {
    let vals = m.clone().complex_eigenvalues();
    let rho = vals.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
    if !rho.is_finite() {
        return Err(Error::Eigensolver("non-finite spectrum".into()));
    }
    Ok(rho < 1.0 - psd_tol)
}

/// Query mode for plane-in-quadric existence tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlaneMode {
    /// A plane with x' N x > 0 away from the origin.
    StrictPositive,
    /// A plane with x' N x = 0 identically.
    Zero,
}

/// Eigen-signature test: a strictly positive o-plane exists iff N has at
/// least two positive eigenvalues; an isotropic o-plane exists iff n >= 4
/// with at least two positive and two negative eigenvalues (N nonsingular).
pub fn plane_in_quadric(n: &DMatrix<f64>, mode: PlaneMode, psd_tol: f64) -> Result<bool> {
    if n.nrows() != n.ncols() {
        return Err(Error::Dimension("square matrix required".into()));
    }
    let ev = sym_eigenvalues(&crate::linalg::symmetrize(n));
    let scale = ev.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
    if ev.iter().any(|&l| l.abs() <= psd_tol * scale) {
        return Err(Error::Eigensolver("matrix is numerically singular".into()));
    }
    let pos = ev.iter().filter(|&&l| l > 0.0).count();
    let neg = ev.len() - pos;
    Ok(match mode {
        PlaneMode::StrictPositive => pos >= 2,
        PlaneMode::Zero => ev.len() >= 4 && pos >= 2 && neg >= 2,
    })
}

/// Construct an isotropic-plane witness from the eigendecomposition (two
/// positive and two negative eigenpairs combine into V with V' N V = 0).
pub fn isotropic_plane_witness(n: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let se = crate::linalg::symmetrize(n).symmetric_eigen();
    let dim = n.nrows();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..dim {
        if se.eigenvalues[i] > 0.0 {
            pos.push(i);
        } else if se.eigenvalues[i] < 0.0 {
            neg.push(i);
        }
    }
    if pos.len() < 2 || neg.len() < 2 {
        return None;
    }
    let col = |i: usize| se.eigenvectors.column(i) / se.eigenvalues[i].abs().sqrt();
    let mut v = DMatrix::zeros(dim, 2);
    v.set_column(0, &(col(pos[0]) + col(neg[0])));
    v.set_column(1, &(col(pos[1]) + col(neg[1])));
    Some(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(m: &DMatrix<f64>) -> SpectralProfile {
        spectral_profile(m, &SpectralOptions::default()).unwrap()
    }

    #[test]
    fn mixedness_examples() {
        assert!(profile(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]))).mixed);
        assert!(!profile(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]))).mixed);
        // rotation by 1 radian: conjugate pair, equal magnitudes, still mixed
        let r = DMatrix::from_row_slice(2, 2, &[1f64.cos(), -1f64.sin(), 1f64.sin(), 1f64.cos()]);
        let p = profile(&r);
        assert!(p.mixed);
        assert!(p.irrational_rotations);
    }

    #[test]
    fn rational_rotation_is_flagged() {
        // rotation by pi/4
        let a = PI / 4.0;
        let r = DMatrix::from_row_slice(2, 2, &[a.cos(), -a.sin(), a.sin(), a.cos()]);
        assert!(!profile(&r).irrational_rotations);
        assert!(is_rational_multiple_of_pi(PI / 3.0, 64, 1e-9));
        assert!(!is_rational_multiple_of_pi(1.0, 64, 1e-9));
    }

    #[test]
    fn invariants_of_diagonal_and_rotation() {
        let d = profile(&DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 0.5])));
        let inv = candidate_invariants(&d).unwrap();
        assert_eq!(inv.len(), 3);
        assert!(inv.iter().all(|b| b.kind == InvariantKind::Line));
        assert!(inv.windows(2).all(|w| w[0].magnitude >= w[1].magnitude));

        let r = DMatrix::from_row_slice(2, 2, &[1f64.cos(), -1f64.sin(), 1f64.sin(), 1f64.cos()]);
        let inv = candidate_invariants(&profile(&r)).unwrap();
        assert_eq!(inv.len(), 1);
        assert_eq!(inv[0].kind, InvariantKind::Plane);
        assert_eq!(inv[0].basis.ncols(), 2);
    }

    #[test]
    fn non_mixed_refuses_but_lenient_enumerates() {
        let p = profile(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0])));
        assert!(candidate_invariants(&p).is_err());
        assert_eq!(candidate_invariants_lenient(&p).len(), 2);
    }

    #[test]
    fn schur_examples() {
        assert!(schur_check(&(0.5 * DMatrix::<f64>::identity(3, 3)), 1e-9).unwrap());
        let m = DMatrix::from_row_slice(2, 2, &[0.9, 1.0, 0.0, 1.1]);
        assert!(!schur_check(&m, 1e-9).unwrap());
    }

    #[test]
    fn plane_in_quadric_signatures() {
        let d = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_vec(v.to_vec()));
        assert!(plane_in_quadric(&d(&[1.0, 1.0, -1.0]), PlaneMode::StrictPositive, 1e-9).unwrap());
        assert!(!plane_in_quadric(&d(&[1.0, -1.0, -1.0]), PlaneMode::StrictPositive, 1e-9).unwrap());
        assert!(plane_in_quadric(&d(&[1.0, 1.0, -1.0, -1.0]), PlaneMode::Zero, 1e-9).unwrap());
        assert!(!plane_in_quadric(&d(&[1.0, 1.0, 1.0, -1.0]), PlaneMode::Zero, 1e-9).unwrap());
        // witness construction for the zero mode
        let n = d(&[2.0, 0.5, -1.0, -3.0]);
        let v = isotropic_plane_witness(&n).unwrap();
        let g = v.transpose() * &n * &v;
        assert!(g.abs().max() < 1e-12);
    }
}
