//! Region-feasibility oracles and the maximum inter-sample-time computation.

use crate::circle::{self, ExactOutcome, F64Outcome};
use crate::region::{isochronous_region_petc, Region};
use crate::smt::SmtConfig;
use crate::system::{EtcKind, EtcSystem, SupEstimate};
use crate::{Error, Result};
use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which oracle produced a verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    Sampling,
    Exact,
}

/// How UNKNOWN verdicts are treated when building abstractions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OraclePolicy {
    /// Keep UNKNOWN sequences: over-approximation, preserves simulation.
    Outer,
    /// Keep only certified-SAT sequences (witness-driven studies).
    Inner,
}

#[derive(Clone, Debug)]
pub enum Verdict {
    /// Satisfiable with a unit witness; `boundary` marks witnesses proved by
    /// the exact engine on a constraint boundary (a degenerate region), where
    /// float margins cannot confirm strict constraints.
    Sat { witness: DVector<f64>, boundary: bool },
    Unsat,
    Unknown,
}

#[derive(Clone, Debug)]
pub struct FeasibilityVerdict {
    pub verdict: Verdict,
    pub backend: Backend,
}

impl FeasibilityVerdict {
    pub fn keep(&self, policy: OraclePolicy) -> bool {
        match (&self.verdict, policy) {
            (Verdict::Sat { .. }, _) => true,
            (Verdict::Unsat, _) => false,
            (Verdict::Unknown, OraclePolicy::Outer) => true,
            (Verdict::Unknown, OraclePolicy::Inner) => false,
        }
    }

    pub fn is_sat(&self) -> bool {
        matches!(self.verdict, Verdict::Sat { .. })
    }
}

/// Resource and determinism knobs for one feasibility query stream.
#[derive(Clone, Debug)]
pub struct Budget {
    pub backend: Backend,
    /// Random unit samples per query (sampling backend, n_x > 2).
    pub samples: usize,
    /// Root seed; each query derives its own stream.
    pub seed: u64,
    /// Strict constraints must clear this margin at a sampled witness.
    pub strict_margin: f64,
    /// External solver for the exact backend when n_x > 2.
    pub smt: Option<SmtConfig>,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            backend: Backend::Exact,
            samples: 20_000,
            seed: 0,
            strict_margin: 1e-10,
            smt: None,
        }
    }
}

impl Budget {
    pub fn sampling(seed: u64) -> Self {
        Budget { backend: Backend::Sampling, seed, ..Budget::default() }
    }

    pub fn exact() -> Self {
        Budget::default()
    }
}

fn fingerprint(region: &Region) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |b: u64| {
        h ^= b;
        h = h.wrapping_mul(0x100000001b3);
    };
    for c in &region.constraints {
        eat(c.rel as u64);
        for v in c.matrix.iter() {
            eat(v.to_bits());
        }
    }
    h
}

/// Decide whether the region contains a nonzero point.
///
/// Exact backend: a complete decision procedure on the projective circle for
/// n_x = 2 (no UNKNOWN), an SMT-LIB 2 subprocess for larger systems. The
/// sampling backend reports SAT from a found witness, UNSAT only with an f64
/// safety margin (n_x = 2), and UNKNOWN otherwise.
pub fn region_feasible(region: &Region, budget: &Budget) -> Result<FeasibilityVerdict> {
    match budget.backend {
        Backend::Exact => {
            if region.nx() == 2 {
                Ok(exact_circle(region, budget))
            } else if let Some(cfg) = &budget.smt {
                match crate::smt::solve(region, cfg) {
                    Ok(v) => Ok(v),
                    // solver I/O failure: fall back to sampling
                    Err(Error::Io(_)) | Err(Error::Backend(_)) => Ok(sample_region(region, budget)),
                    Err(e) => Err(e),
                }
            } else {
                Err(Error::Config(
                    "exact backend for n_x > 2 needs ETC_SMT_SOLVER_CMD".into(),
                ))
            }
        }
        Backend::Sampling => Ok(sample_region(region, budget)),
    }
}

fn exact_circle(region: &Region, _budget: &Budget) -> FeasibilityVerdict {
    let cons = circle::circle_constraints(region).expect("n_x = 2");
    // fast path: a wide f64 margin plus exact confirmation of the witness
    if let F64Outcome::Sat { psi, margin } = circle::decide_f64(&cons, 1e-9) {
        let raw = circle::circle_constraints_raw(region).expect("n_x = 2");
        if margin > 1e-6 || exact_confirms(&raw, psi) {
            let theta = 0.5 * psi;
            return FeasibilityVerdict {
                verdict: Verdict::Sat {
                    witness: DVector::from_vec(vec![theta.cos(), theta.sin()]),
                    boundary: false,
                },
                backend: Backend::Exact,
            };
        }
    }
    let raw = circle::circle_constraints_raw(region).expect("n_x = 2");
    let order = violation_order(&cons);
    match circle::decide_exact(&raw, Some(&order)) {
        ExactOutcome::Sat { theta, degenerate } => FeasibilityVerdict {
            verdict: Verdict::Sat {
                witness: DVector::from_vec(vec![theta.cos(), theta.sin()]),
                boundary: degenerate,
            },
            backend: Backend::Exact,
        },
        ExactOutcome::Unsat => {
            FeasibilityVerdict { verdict: Verdict::Unsat, backend: Backend::Exact }
        }
    }
}

fn exact_confirms(raw: &[circle::CircleConstraint], psi: f64) -> bool {
    // restrict the exact check to the single angle: evaluate signs exactly at
    // t = tan(psi/2) by reusing the interval engine on a point query
    crate::circle::exact_point_check(raw, psi)
}

/// Constraints ordered most-restrictive-first so the exact intersection
/// empties out early.
fn violation_order(cons: &[circle::CircleConstraint]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cons.len()).collect();
    let scores: Vec<f64> = cons.iter().map(circle::restrictiveness).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite margins"));
    idx
}

fn sample_region(region: &Region, budget: &Budget) -> FeasibilityVerdict {
    let nx = region.nx();
    if nx == 2 {
        let cons = match circle::circle_constraints(region) {
            Ok(c) => c,
            Err(_) => {
                return FeasibilityVerdict { verdict: Verdict::Unknown, backend: Backend::Sampling }
            }
        };
        return match circle::decide_f64(&cons, budget.strict_margin) {
            F64Outcome::Sat { psi, .. } => {
                let theta = 0.5 * psi;
                FeasibilityVerdict {
                    verdict: Verdict::Sat {
                        witness: DVector::from_vec(vec![theta.cos(), theta.sin()]),
                        boundary: false,
                    },
                    backend: Backend::Sampling,
                }
            }
            F64Outcome::Unsat { .. } => {
                FeasibilityVerdict { verdict: Verdict::Unsat, backend: Backend::Sampling }
            }
            F64Outcome::Ambiguous => {
                FeasibilityVerdict { verdict: Verdict::Unknown, backend: Backend::Sampling }
            }
        };
    }
    // deterministic candidates first: eigenvectors of every constraint matrix
    let mut candidates: Vec<DVector<f64>> = Vec::new();
    for c in &region.constraints {
        let se = c.normalized_matrix().symmetric_eigen();
        for j in 0..nx {
            candidates.push(se.eigenvectors.column(j).into_owned());
        }
    }
    let mut rng = crate::rng::derive(budget.seed, "region-sampling", fingerprint(region));
    for _ in 0..budget.samples {
        let mut v = DVector::<f64>::zeros(nx);
        for i in 0..nx {
            // Box-Muller from two uniform draws
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random::<f64>();
            v[i] = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
        if v.norm() > 1e-12 {
            candidates.push(v);
        }
    }
    for mut cand in candidates {
        let n = cand.norm();
        if n < 1e-12 {
            continue;
        }
        cand /= n;
        if region.contains(&cand, budget.strict_margin) {
            return FeasibilityVerdict {
                verdict: Verdict::Sat { witness: cand, boundary: false },
                backend: Backend::Sampling,
            };
        }
    }
    FeasibilityVerdict { verdict: Verdict::Unknown, backend: Backend::Sampling }
}

/// Largest attainable inter-sample time (the Sup metric).
///
/// PETC: the least hk such that no state survives k unfired checks, found by
/// feasibility queries on the nested survivor regions. CETC: the survivor
/// region is intersected along the scan grid (the universal quantifier is
/// discretized there).
pub fn sup_inter_sample_time(sys: &EtcSystem, budget: &Budget) -> Result<SupEstimate> {
    match sys.kind() {
        EtcKind::Petc => {
            let h = sys.period();
            let mut lower = h;
            for k in 1..sys.k_bar() {
                let mut r = Region::full(sys.nx());
                for kp in 1..=k {
                    r.push(sys.trigger_table(kp).matrix.clone(), crate::region::Rel::Le);
                }
                match region_feasible(&r, budget)?.verdict {
                    Verdict::Sat { .. } => lower = h * (k + 1) as f64,
                    Verdict::Unsat => {
                        let v = h * k as f64;
                        return Ok(SupEstimate { lower: lower.min(v), upper: v, exact: true });
                    }
                    Verdict::Unknown => {}
                }
            }
            Ok(SupEstimate {
                lower,
                upper: sys.tau_bar(),
                exact: lower == sys.tau_bar(),
            })
        }
        EtcKind::Cetc => {
            let steps = sys.tolerances().cetc_grid;
            let tau_bar = sys.tau_bar();
            let grid = |i: usize| tau_bar * i as f64 / steps as f64;
            if sys.nx() == 2 {
                // incremental arc intersection along the grid
                let mut cons: Vec<circle::CircleConstraint> = Vec::new();
                for i in 1..=steps {
                    let mut r = Region::full(2);
                    r.push(sys.trigger_form(grid(i))?.matrix, crate::region::Rel::Le);
                    cons.extend(circle::circle_constraints(&r)?);
                    if circle::feasible_arcs(&cons).is_empty() {
                        return Ok(SupEstimate { lower: grid(i - 1), upper: grid(i), exact: false });
                    }
                }
                Ok(SupEstimate { lower: tau_bar, upper: tau_bar, exact: true })
            } else {
                // bisection over the grid index; survivor regions are nested
                let feasible_at = |i: usize| -> Result<bool> {
                    let mut r = Region::full(sys.nx());
                    for j in 1..=i {
                        r.push(sys.trigger_form(grid(j))?.matrix, crate::region::Rel::Le);
                    }
                    Ok(region_feasible(&r, budget)?.keep(OraclePolicy::Outer))
                };
                let (mut lo, mut hi) = (0usize, steps);
                if feasible_at(steps)? {
                    return Ok(SupEstimate { lower: tau_bar, upper: tau_bar, exact: true });
                }
                while hi - lo > 1 {
                    let mid = (lo + hi) / 2;
                    if feasible_at(mid)? {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok(SupEstimate { lower: grid(lo), upper: grid(hi), exact: false })
            }
        }
    }
}

/// Convenience wrapper: least k with a nonempty isochronous set, as a check
/// against the eigenvalue-scan Inf.
pub fn min_feasible_index(sys: &EtcSystem, budget: &Budget) -> Result<Option<usize>> {
    for k in 1..=sys.k_bar() {
        let r = isochronous_region_petc(sys, k)?;
        if region_feasible(&r, budget)?.keep(OraclePolicy::Outer) {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn trivial_regions() {
        let mut pos = Region::full(2);
        pos.push(DMatrix::identity(2, 2), crate::region::Rel::Gt);
        let v = region_feasible(&pos, &Budget::exact()).unwrap();
        assert!(v.is_sat());
        if let Verdict::Sat { witness, .. } = &v.verdict {
            assert!((witness.norm() - 1.0).abs() < 1e-12);
        }

        let mut neg = Region::full(2);
        neg.push(-DMatrix::identity(2, 2), crate::region::Rel::Gt);
        assert!(matches!(
            region_feasible(&neg, &Budget::exact()).unwrap().verdict,
            Verdict::Unsat
        ));
        // sampling cannot certify emptiness beyond the f64 margin but should
        // still reject this one outright
        assert!(matches!(
            region_feasible(&neg, &Budget::sampling(1)).unwrap().verdict,
            Verdict::Unsat
        ));
    }

    #[test]
    fn sampling_high_dimensional_region() {
        let mut r = Region::full(3);
        r.push(DMatrix::identity(3, 3), crate::region::Rel::Gt);
        let v = region_feasible(&r, &Budget::sampling(7)).unwrap();
        assert!(v.is_sat());
        let mut empty = Region::full(3);
        empty.push(-DMatrix::identity(3, 3), crate::region::Rel::Ge);
        assert!(matches!(
            region_feasible(&empty, &Budget::sampling(7)).unwrap().verdict,
            Verdict::Unknown
        ));
    }

    #[test]
    fn witnesses_are_scale_invariant_members() {
        let mut r = Region::full(2);
        r.push(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, -0.5]),
            crate::region::Rel::Gt,
        );
        r.push(
            DMatrix::from_row_slice(2, 2, &[-0.3, 0.1, 0.1, 0.9]),
            crate::region::Rel::Le,
        );
        let v = region_feasible(&r, &Budget::exact()).unwrap();
        if let Verdict::Sat { witness, .. } = &v.verdict {
            let mut rng = crate::rng::derive(3, "scale", 0);
            for _ in 0..100 {
                let lam: f64 = loop {
                    let l: f64 = rng.random_range(-5.0..5.0);
                    if l.abs() > 1e-3 {
                        break l;
                    }
                };
                let w = lam * witness;
                assert!(r.contains(&(w.clone() / w.norm()), 1e-12));
            }
        } else {
            panic!("region is clearly feasible");
        }
    }
}
