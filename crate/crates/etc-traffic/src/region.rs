//! Homogeneous quadratic-constraint regions: isochronous and isosequential
//! sets, closures, and the subspace-containment test.

use crate::linalg::{orthonormalize, sym_eigenvalues, symmetrize};
use crate::system::{EtcKind, EtcSystem};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Sign relation of a constraint x' N x rel 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rel {
    Gt,
    Ge,
    Eq,
    Le,
    Lt,
}

impl Rel {
    /// Relation for -N.
    pub fn flipped(self) -> Rel {
        match self {
            Rel::Gt => Rel::Lt,
            Rel::Ge => Rel::Le,
            Rel::Eq => Rel::Eq,
            Rel::Le => Rel::Ge,
            Rel::Lt => Rel::Gt,
        }
    }

    pub fn closed(self) -> Rel {
        match self {
            Rel::Gt => Rel::Ge,
            Rel::Lt => Rel::Le,
            r => r,
        }
    }

    pub fn strict(self) -> Rel {
        match self {
            Rel::Ge => Rel::Gt,
            Rel::Le => Rel::Lt,
            r => r,
        }
    }

    pub fn is_strict(self) -> bool {
        matches!(self, Rel::Gt | Rel::Lt)
    }
}

/// One homogeneous quadratic constraint; the matrix is kept symmetric.
#[derive(Clone, Debug)]
pub struct SignedQuadConstraint {
    pub matrix: DMatrix<f64>,
    pub rel: Rel,
}

impl SignedQuadConstraint {
    pub fn new(matrix: DMatrix<f64>, rel: Rel) -> Self {
        SignedQuadConstraint { matrix: symmetrize(&matrix), rel }
    }

    /// Constraint matrix scaled to unit Frobenius norm (sign-preserving, so
    /// the constraint set is unchanged); gives tolerance checks a scale.
    pub fn normalized_matrix(&self) -> DMatrix<f64> {
        let n = self.matrix.norm();
        if n > 0.0 {
            &self.matrix / n
        } else {
            self.matrix.clone()
        }
    }

    /// Signed satisfaction value at x on the normalized matrix: positive
    /// means satisfied with margin for its relation.
    pub fn margin(&self, x: &DVector<f64>) -> f64 {
        let v = crate::system::quad(x, &self.normalized_matrix()) / x.norm_squared();
        match self.rel {
            Rel::Gt | Rel::Ge => v,
            Rel::Le | Rel::Lt => -v,
            Rel::Eq => -v.abs(),
        }
    }
}

/// Conjunction of signed quadratic constraints; membership is scale-invariant.
#[derive(Clone, Debug, Default)]
pub struct Region {
    nx: usize,
    pub constraints: Vec<SignedQuadConstraint>,
}

impl Region {
    /// The full space (no constraints).
    pub fn full(nx: usize) -> Self {
        Region { nx, constraints: Vec::new() }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn push(&mut self, matrix: DMatrix<f64>, rel: Rel) {
        assert_eq!(matrix.nrows(), self.nx);
        self.constraints.push(SignedQuadConstraint::new(matrix, rel));
    }

    /// Strict relations relaxed to their closed versions.
    pub fn closure(&self) -> Region {
        self.map_rels(Rel::closed)
    }

    /// Non-strict inequalities tightened to strict ones.
    pub fn interior(&self) -> Region {
        self.map_rels(Rel::strict)
    }

    fn map_rels(&self, f: impl Fn(Rel) -> Rel) -> Region {
        Region {
            nx: self.nx,
            constraints: self
                .constraints
                .iter()
                .map(|c| SignedQuadConstraint { matrix: c.matrix.clone(), rel: f(c.rel) })
                .collect(),
        }
    }

    /// True when x satisfies every constraint; strict constraints must clear
    /// `strict_margin` on unit-normalized data.
    pub fn contains(&self, x: &DVector<f64>, strict_margin: f64) -> bool {
        self.constraints.iter().all(|c| {
            let m = c.margin(x);
            if c.rel == Rel::Eq {
                m >= -1e-12
            } else if c.rel.is_strict() {
                m > strict_margin
            } else {
                m >= -1e-12
            }
        })
    }
}

/// Isochronous set of a PETC system for inter-sample index k: triggers exactly
/// at the k-th check (no positivity requirement at k = k_bar, where the
/// maximum-time clause fires instead).
pub fn isochronous_region_petc(sys: &EtcSystem, k: usize) -> Result<Region> {
    if sys.kind() != EtcKind::Petc {
        return Err(Error::WrongKind("PETC"));
    }
    if k < 1 || k > sys.k_bar() {
        return Err(Error::OutOfRange(format!("k = {k}, k_bar = {}", sys.k_bar())));
    }
    let mut r = Region::full(sys.nx());
    for kp in 1..k {
        r.push(sys.trigger_table(kp).matrix.clone(), Rel::Le);
    }
    if k < sys.k_bar() {
        r.push(sys.trigger_table(k).matrix.clone(), Rel::Gt);
    }
    Ok(r)
}

/// Isochronous set of a CETC system at elapsed time s; the universally
/// quantified "not triggered before s" clause is discretized on the scan grid.
pub fn isochronous_region_cetc(sys: &EtcSystem, s: f64) -> Result<Region> {
    if sys.kind() != EtcKind::Cetc {
        return Err(Error::WrongKind("CETC"));
    }
    if !(s > 0.0 && s <= sys.tau_bar()) {
        return Err(Error::OutOfRange(format!("s = {s} outside (0, {}]", sys.tau_bar())));
    }
    let mut r = Region::full(sys.nx());
    let steps = sys.tolerances().cetc_grid;
    for i in 1..=steps {
        let sp = sys.tau_bar() * i as f64 / steps as f64;
        if sp >= s {
            break;
        }
        r.push(sys.trigger_form(sp)?.matrix, Rel::Le);
    }
    if s < sys.tau_bar() {
        r.push(sys.trigger_form(s)?.matrix, Rel::Eq);
        r.push(sys.trigger_form_derivative(s)?.matrix, Rel::Gt);
    }
    Ok(r)
}

/// Isosequential set Q_sigma of a PETC system: states whose next |sigma|
/// inter-sample indices are exactly sigma. Step-j constraints are pulled back
/// through the product M(y_{j-1}) ... M(y_1).
pub fn isosequential_region(sys: &EtcSystem, kseq: &[usize]) -> Result<Region> {
    if sys.kind() != EtcKind::Petc {
        return Err(Error::WrongKind("PETC"));
    }
    if kseq.is_empty() {
        return Err(Error::OutOfRange("empty sequence".into()));
    }
    let nx = sys.nx();
    let mut r = Region::full(nx);
    let mut prefix = DMatrix::<f64>::identity(nx, nx);
    for &k in kseq {
        if k < 1 || k > sys.k_bar() {
            return Err(Error::OutOfRange(format!("k = {k}, k_bar = {}", sys.k_bar())));
        }
        for kp in 1..k {
            let n = prefix.transpose() * &sys.trigger_table(kp).matrix * &prefix;
            r.push(n, Rel::Le);
        }
        if k < sys.k_bar() {
            let n = prefix.transpose() * &sys.trigger_table(k).matrix * &prefix;
            r.push(n, Rel::Gt);
        }
        prefix = sys.hold_matrix(k) * prefix;
    }
    Ok(r)
}

/// Subspace containment: span(V) minus the origin lies in the region iff for
/// every constraint the congruence V' N V passes the matching eigenvalue test.
pub fn subspace_in_region(v: &DMatrix<f64>, region: &Region, psd_tol: f64) -> Result<bool> {
    if v.nrows() != region.nx() || v.ncols() == 0 || v.ncols() > v.nrows() {
        return Err(Error::Dimension(format!(
            "basis is {}x{}, region dimension {}",
            v.nrows(),
            v.ncols(),
            region.nx()
        )));
    }
    let q = orthonormalize(v)?;
    for c in &region.constraints {
        let nmat = c.normalized_matrix();
        let g = symmetrize(&(q.transpose() * nmat * &q));
        let ev = sym_eigenvalues(&g);
        let (lo, hi) = (ev[0], ev[ev.len() - 1]);
        let ok = match c.rel {
            Rel::Ge => lo >= -psd_tol,
            Rel::Gt => lo > psd_tol,
            Rel::Eq => lo.abs() <= psd_tol && hi.abs() <= psd_tol,
            Rel::Le => hi <= psd_tol,
            Rel::Lt => hi < -psd_tol,
        };
        if !ok {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::TriggeringSpec;

    fn petc_case(k1: f64, sigma: f64) -> EtcSystem {
        EtcSystem::petc(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, 3.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, k1]),
            TriggeringSpec::TabuadaRelative { sigma },
            0.05,
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn isochronous_shapes() {
        let sys = petc_case(-6.0, 0.32);
        let r1 = isochronous_region_petc(&sys, 1).unwrap();
        assert_eq!(r1.constraints.len(), 1);
        assert_eq!(r1.constraints[0].rel, Rel::Gt);
        let rk = isochronous_region_petc(&sys, sys.k_bar()).unwrap();
        assert_eq!(rk.constraints.len(), sys.k_bar() - 1);
        assert!(rk.constraints.iter().all(|c| c.rel == Rel::Le));
        assert!(isochronous_region_petc(&sys, 0).is_err());
        assert!(isochronous_region_petc(&sys, 11).is_err());
    }

    #[test]
    fn singleton_sequence_equals_isochronous() {
        let sys = petc_case(-6.0, 0.32);
        for k in [2usize, 5, 10] {
            let a = isochronous_region_petc(&sys, k).unwrap();
            let b = isosequential_region(&sys, &[k]).unwrap();
            assert_eq!(a.constraints.len(), b.constraints.len());
            for (ca, cb) in a.constraints.iter().zip(&b.constraints) {
                assert_eq!(ca.rel, cb.rel);
                assert!((ca.matrix.clone() - &cb.matrix).abs().max() < 1e-12);
            }
        }
    }

    #[test]
    fn simulated_state_lies_in_its_own_sequence_region() {
        let sys = petc_case(-6.0, 0.32);
        let x0 = DVector::from_vec(vec![0.6, -0.8]);
        let traj = sys.simulate(&x0, 6, false).unwrap();
        let kseq = traj.output_indices(0.05);
        let r = isosequential_region(&sys, &kseq).unwrap();
        assert!(r.contains(&x0, 0.0));
    }

    #[test]
    fn closure_and_interior() {
        let mut r = Region::full(2);
        r.push(DMatrix::identity(2, 2), Rel::Gt);
        r.push(-DMatrix::identity(2, 2), Rel::Le);
        let c = r.closure();
        assert_eq!(c.constraints[0].rel, Rel::Ge);
        assert_eq!(c.constraints[1].rel, Rel::Le);
        // idempotent
        let cc = c.closure();
        assert_eq!(cc.constraints[0].rel, Rel::Ge);
        let i = r.interior();
        assert_eq!(i.constraints[0].rel, Rel::Gt);
        assert_eq!(i.constraints[1].rel, Rel::Lt);
    }

    #[test]
    fn subspace_tests_match_hand_calculations() {
        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let mut pos = Region::full(2);
        pos.push(DMatrix::identity(2, 2), Rel::Gt);
        assert!(subspace_in_region(&e1, &pos, 1e-9).unwrap());
        let mut neg = Region::full(2);
        neg.push(-DMatrix::identity(2, 2), Rel::Gt);
        assert!(!subspace_in_region(&e1, &neg, 1e-9).unwrap());

        // N = diag(1,-1), V = (1,1): V'NV = 0
        let n = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let v = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let mut eq = Region::full(2);
        eq.push(n.clone(), Rel::Eq);
        assert!(subspace_in_region(&v, &eq, 1e-9).unwrap());
        let mut gt = Region::full(2);
        gt.push(n, Rel::Gt);
        assert!(!subspace_in_region(&v, &gt, 1e-9).unwrap());
    }

    #[test]
    fn rank_deficient_basis_is_rejected() {
        let v = DMatrix::from_column_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let r = Region::full(2);
        assert!(matches!(
            subspace_in_region(&v, &r, 1e-9),
            Err(Error::RankDeficient)
        ));
    }
}
