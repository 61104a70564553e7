//! Feasibility of quadratic-constraint conjunctions on the projective circle
//! (n_x = 2).
//!
//! A homogeneous constraint x' N x rel 0 restricted to x = (cos th, sin th)
//! becomes phi(psi) = alpha + beta cos(psi) + gamma sin(psi) rel 0 with
//! psi = 2 th, alpha = (n00 + n11)/2, beta = (n00 - n11)/2, gamma = n01; the
//! psi-circle is exactly the projective line, so a conjunction of constraints
//! is a Boolean combination of circular arcs.
//!
//! Two engines share this reduction:
//!
//! - a fast f64 engine that partitions the circle at all constraint boundary
//!   angles and tests signs at elementary-arc midpoints and breakpoints,
//!   reporting SAT/UNSAT only with a safety margin and `Ambiguous` otherwise;
//! - an exact engine that substitutes t = tan(psi/2), turning each constraint
//!   into a univariate quadratic sign condition p(t) = (alpha - beta) t^2
//!   + 2 gamma t + (alpha + beta) rel 0 over exact rationals. Roots are
//!   quadratic surds; the feasible set is intersected interval-by-interval
//!   with exact comparisons, plus a separate check of the point at infinity
//!   (psi = pi). No floating-point rounding can flip its verdicts.

use crate::region::{Region, Rel};
use crate::{Error, Result};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use std::cmp::Ordering;
use std::f64::consts::PI;

const TWO_PI: f64 = 2.0 * PI;

/// One constraint in circle coordinates, on unit-scaled data.
#[derive(Clone, Copy, Debug)]
pub struct CircleConstraint {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub rel: Rel,
}

impl CircleConstraint {
    fn value(&self, cos_psi: f64, sin_psi: f64) -> f64 {
        self.alpha + self.beta * cos_psi + self.gamma * sin_psi
    }
}

fn from_matrix(n: &nalgebra::DMatrix<f64>, rel: Rel, normalize: bool) -> CircleConstraint {
    let (n00, n01, n11) = (n[(0, 0)], 0.5 * (n[(0, 1)] + n[(1, 0)]), n[(1, 1)]);
    let scale = if normalize {
        let s = (n00 * n00 + 2.0 * n01 * n01 + n11 * n11).sqrt();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    } else {
        1.0
    };
    CircleConstraint {
        alpha: 0.5 * (n00 + n11) / scale,
        beta: 0.5 * (n00 - n11) / scale,
        gamma: n01 / scale,
        rel,
    }
}

/// Region constraints in circle coordinates (unit Frobenius scaling).
pub fn circle_constraints(region: &Region) -> Result<Vec<CircleConstraint>> {
    if region.nx() != 2 {
        return Err(Error::Dimension("circle engine needs n_x = 2".into()));
    }
    Ok(region
        .constraints
        .iter()
        .map(|c| from_matrix(&c.matrix, c.rel, true))
        .collect())
}

/// Raw (unscaled) circle coefficients, for the exact engine.
pub fn circle_constraints_raw(region: &Region) -> Result<Vec<CircleConstraint>> {
    if region.nx() != 2 {
        return Err(Error::Dimension("circle engine needs n_x = 2".into()));
    }
    Ok(region
        .constraints
        .iter()
        .map(|c| from_matrix(&c.matrix, c.rel, false))
        .collect())
}

/// Outcome of the fast f64 engine.
#[derive(Clone, Copy, Debug)]
pub enum F64Outcome {
    /// A candidate point satisfied everything with at least this margin.
    Sat { psi: f64, margin: f64 },
    /// Every candidate point violated some constraint by at least this margin.
    Unsat { margin: f64 },
    /// Margins too thin to call.
    Ambiguous,
}

fn boundary_angles(c: &CircleConstraint, out: &mut Vec<f64>) {
    let r = c.beta.hypot(c.gamma);
    if r < 1e-300 {
        return;
    }
    let t = -c.alpha / r;
    if !(-1.0..=1.0).contains(&t) {
        return;
    }
    let psi0 = c.gamma.atan2(c.beta);
    let d = t.clamp(-1.0, 1.0).acos();
    out.push((psi0 + d).rem_euclid(TWO_PI));
    out.push((psi0 - d).rem_euclid(TWO_PI));
}

fn candidate_points(cons: &[CircleConstraint]) -> Vec<f64> {
    let mut bnds = Vec::with_capacity(2 * cons.len());
    for c in cons {
        boundary_angles(c, &mut bnds);
    }
    if bnds.is_empty() {
        return vec![0.0];
    }
    bnds.sort_by(|a, b| a.partial_cmp(b).expect("finite angles"));
    bnds.dedup();
    let m = bnds.len();
    let mut pts = Vec::with_capacity(2 * m);
    for i in 0..m {
        let a = bnds[i];
        let b = bnds[(i + 1) % m];
        let mut w = (b - a).rem_euclid(TWO_PI);
        if w == 0.0 {
            w = TWO_PI;
        }
        pts.push((a + 0.5 * w).rem_euclid(TWO_PI));
    }
    pts.extend_from_slice(&bnds);
    pts
}

/// Worst satisfaction margin of all constraints at psi (positive = satisfied).
fn margin_at(cons: &[CircleConstraint], psi: f64) -> f64 {
    let (s, c) = psi.sin_cos();
    let mut worst = f64::INFINITY;
    for k in cons {
        let v = k.value(c, s);
        let m = match k.rel {
            Rel::Gt | Rel::Ge => v,
            Rel::Le | Rel::Lt => -v,
            Rel::Eq => -v.abs(),
        };
        if m < worst {
            worst = m;
            if worst < -1.0 {
                break;
            }
        }
    }
    worst
}

/// Fast partition-based decision with a certainty band.
pub fn decide_f64(cons: &[CircleConstraint], band: f64) -> F64Outcome {
    let pts = candidate_points(cons);
    let mut best = f64::NEG_INFINITY;
    let mut best_psi = 0.0;
    for &p in &pts {
        let m = margin_at(cons, p);
        if m > best {
            best = m;
            best_psi = p;
        }
    }
    if best > band {
        F64Outcome::Sat { psi: best_psi, margin: best }
    } else if best < -band {
        F64Outcome::Unsat { margin: -best }
    } else {
        F64Outcome::Ambiguous
    }
}

/// Elementary arcs (start, length) in psi-space whose midpoints satisfy all
/// constraints; used for witness sampling.
pub fn feasible_arcs(cons: &[CircleConstraint]) -> Vec<(f64, f64)> {
    let mut bnds = Vec::new();
    for c in cons {
        boundary_angles(c, &mut bnds);
    }
    if bnds.is_empty() {
        return if margin_at(cons, 0.0) >= 0.0 {
            vec![(0.0, TWO_PI)]
        } else {
            Vec::new()
        };
    }
    bnds.sort_by(|a, b| a.partial_cmp(b).expect("finite angles"));
    bnds.dedup();
    let m = bnds.len();
    let mut arcs = Vec::new();
    for i in 0..m {
        let a = bnds[i];
        let b = bnds[(i + 1) % m];
        let mut w = (b - a).rem_euclid(TWO_PI);
        if w == 0.0 {
            w = TWO_PI;
        }
        if margin_at(cons, (a + 0.5 * w).rem_euclid(TWO_PI)) > 0.0 {
            arcs.push((a, w));
        }
    }
    arcs
}

/// Best satisfaction margin the constraint can achieve anywhere on the circle;
/// small values mean restrictive constraints (used to order exact-engine work).
pub fn restrictiveness(c: &CircleConstraint) -> f64 {
    let r = c.beta.hypot(c.gamma);
    match c.rel {
        Rel::Gt | Rel::Ge => c.alpha + r,
        Rel::Le | Rel::Lt => r - c.alpha,
        Rel::Eq => {
            if c.alpha.abs() <= r {
                0.0
            } else {
                r - c.alpha.abs()
            }
        }
    }
}

/// Exact sign check of all constraints at one angle (t = tan(psi/2) exactly
/// converted from f64). Used to confirm fast-path witnesses.
pub fn exact_point_check(cons: &[CircleConstraint], psi: f64) -> bool {
    let half = 0.5 * psi;
    let tan = half.tan();
    if !tan.is_finite() {
        return cons.iter().all(|c| {
            let a = rat(c.alpha) - rat(c.beta);
            let q = ExactQuad {
                a,
                b: Rat::zero(),
                c: Rat::zero(),
                rel: c.rel,
            };
            q.rel_holds(q.sign_at_infinity())
        });
    }
    let t = rat(tan);
    cons.iter().all(|c| {
        let alpha = rat(c.alpha);
        let beta = rat(c.beta);
        let gamma = rat(c.gamma);
        let q = ExactQuad {
            a: &alpha - &beta,
            b: Rat::from_integer(BigInt::from(2)) * gamma,
            c: alpha + beta,
            rel: c.rel,
        };
        q.rel_holds(q.sign_at_rational(&t))
    })
}

// ---------------------------------------------------------------------------
// exact engine
// ---------------------------------------------------------------------------

type Rat = BigRational;

fn rat(x: f64) -> Rat {
    BigRational::from_float(x).expect("finite coefficient")
}

fn rat_sign(x: &Rat) -> i8 {
    if x.is_zero() {
        0
    } else if x.is_positive() {
        1
    } else {
        -1
    }
}

/// a + b sqrt(d) with rational a, b and d >= 0; b = 0 implies d = 0.
#[derive(Clone, Debug)]
struct Surd {
    a: Rat,
    b: Rat,
    d: Rat,
}

impl Surd {
    fn rational(a: Rat) -> Self {
        Surd { a, b: Rat::zero(), d: Rat::zero() }
    }

    fn new(a: Rat, b: Rat, d: Rat) -> Self {
        debug_assert!(!d.is_negative());
        if b.is_zero() || d.is_zero() {
            Surd::rational(a)
        } else {
            Surd { a, b, d }
        }
    }

    fn approx(&self) -> f64 {
        let a = self.a.to_f64().unwrap_or(f64::NAN);
        let b = self.b.to_f64().unwrap_or(0.0);
        let d = self.d.to_f64().unwrap_or(0.0);
        a + b * d.max(0.0).sqrt()
    }

    fn sign(&self) -> i8 {
        if self.b.is_zero() {
            return rat_sign(&self.a);
        }
        if self.a.is_zero() {
            return rat_sign(&self.b);
        }
        let sa = rat_sign(&self.a);
        let sb = rat_sign(&self.b);
        if sa == sb {
            return sa;
        }
        // |a| vs |b| sqrt(d): compare a^2 with b^2 d
        let lhs = &self.a * &self.a;
        let rhs = &self.b * &self.b * &self.d;
        match lhs.cmp(&rhs) {
            Ordering::Equal => 0,
            Ordering::Greater => sa,
            Ordering::Less => sb,
        }
    }
}

/// sign of x - y.
fn surd_cmp(x: &Surd, y: &Surd) -> Ordering {
    let a = &x.a - &y.a;
    let s = if x.b.is_zero() {
        // a - by sqrt(dy)
        Surd::new(a, -y.b.clone(), y.d.clone()).sign()
    } else if y.b.is_zero() || x.d == y.d {
        let b = if y.b.is_zero() { x.b.clone() } else { &x.b - &y.b };
        Surd::new(a, b, x.d.clone()).sign()
    } else {
        // u = a + bx sqrt(dx) vs v = by sqrt(dy)
        let u = Surd::new(a, x.b.clone(), x.d.clone());
        let su = u.sign();
        let sv = rat_sign(&y.b);
        if su != sv {
            match (su, sv) {
                (0, s) => -s,
                (s, _) => s,
            }
        } else {
            // same sign: compare squares; u^2 is again a surd over dx
            let u2 = Surd::new(
                &u.a * &u.a + &u.b * &u.b * &u.d,
                Rat::from_integer(BigInt::from(2)) * &u.a * &u.b,
                u.d.clone(),
            );
            let v2 = &y.b * &y.b * &y.d;
            let diff = Surd::new(&u2.a - v2, u2.b.clone(), u2.d.clone());
            let s2 = diff.sign();
            if su > 0 {
                s2
            } else {
                -s2
            }
        }
    };
    match s {
        1 => Ordering::Greater,
        -1 => Ordering::Less,
        _ => Ordering::Equal,
    }
}

/// Quadratic p(t) = A t^2 + B t + C with exact rational coefficients.
#[derive(Clone, Debug)]
struct ExactQuad {
    a: Rat,
    b: Rat,
    c: Rat,
    rel: Rel,
}

impl ExactQuad {
    fn eval_rational(&self, t: &Rat) -> Rat {
        (&self.a * t + &self.b) * t + &self.c
    }

    fn sign_at_rational(&self, t: &Rat) -> i8 {
        rat_sign(&self.eval_rational(t))
    }

    fn sign_at_surd(&self, x: &Surd) -> i8 {
        // p(a + b sqrt(d)) = (A(a^2+b^2 d) + B a + C) + (2A a b + B b) sqrt(d)
        let ra = &self.a * (&x.a * &x.a + &x.b * &x.b * &x.d) + &self.b * &x.a + &self.c;
        let rb = (Rat::from_integer(BigInt::from(2)) * &self.a * &x.a + &self.b) * &x.b;
        Surd::new(ra, rb, x.d.clone()).sign()
    }

    fn rel_holds(&self, sign: i8) -> bool {
        match self.rel {
            Rel::Gt => sign > 0,
            Rel::Ge => sign >= 0,
            Rel::Eq => sign == 0,
            Rel::Le => sign <= 0,
            Rel::Lt => sign < 0,
        }
    }

    /// Sign of phi at psi = pi (the point t = infinity is alpha - beta = A).
    fn sign_at_infinity(&self) -> i8 {
        rat_sign(&self.a)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Bnd {
    NegInf,
    Fin(usize), // index into the root table
    PosInf,
}

/// Closed/open interval over the extended reals; endpoints index a shared
/// root table so comparisons stay exact.
#[derive(Clone, Debug)]
struct Iv {
    lo: Bnd,
    lo_open: bool,
    hi: Bnd,
    hi_open: bool,
}

struct ExactCtx {
    roots: Vec<Surd>,
}

impl ExactCtx {
    fn cmp_bnd(&self, x: &Bnd, y: &Bnd) -> Ordering {
        match (x, y) {
            (Bnd::NegInf, Bnd::NegInf) | (Bnd::PosInf, Bnd::PosInf) => Ordering::Equal,
            (Bnd::NegInf, _) | (_, Bnd::PosInf) => Ordering::Less,
            (_, Bnd::NegInf) | (Bnd::PosInf, _) => Ordering::Greater,
            (Bnd::Fin(i), Bnd::Fin(j)) => {
                if i == j {
                    Ordering::Equal
                } else {
                    surd_cmp(&self.roots[*i], &self.roots[*j])
                }
            }
        }
    }

    fn nonempty(&self, iv: &Iv) -> bool {
        match self.cmp_bnd(&iv.lo, &iv.hi) {
            Ordering::Less => true,
            Ordering::Equal => {
                !iv.lo_open && !iv.hi_open && matches!(iv.lo, Bnd::Fin(_))
            }
            Ordering::Greater => false,
        }
    }

    fn intersect_one(&self, a: &Iv, b: &Iv) -> Option<Iv> {
        let (lo, lo_open) = match self.cmp_bnd(&a.lo, &b.lo) {
            Ordering::Greater => (a.lo.clone(), a.lo_open),
            Ordering::Less => (b.lo.clone(), b.lo_open),
            Ordering::Equal => (a.lo.clone(), a.lo_open || b.lo_open),
        };
        let (hi, hi_open) = match self.cmp_bnd(&a.hi, &b.hi) {
            Ordering::Less => (a.hi.clone(), a.hi_open),
            Ordering::Greater => (b.hi.clone(), b.hi_open),
            Ordering::Equal => (a.hi.clone(), a.hi_open || b.hi_open),
        };
        let iv = Iv { lo, lo_open, hi, hi_open };
        if self.nonempty(&iv) {
            Some(iv)
        } else {
            None
        }
    }

    fn intersect(&self, xs: &[Iv], ys: &[Iv]) -> Vec<Iv> {
        let mut out = Vec::new();
        for a in xs {
            for b in ys {
                if let Some(iv) = self.intersect_one(a, b) {
                    out.push(iv);
                }
            }
        }
        out
    }

    /// A rational strictly inside a nondegenerate interval, or the (finite)
    /// common endpoint of a degenerate one.
    fn sample(&self, iv: &Iv) -> SamplePoint {
        match (&iv.lo, &iv.hi) {
            (Bnd::NegInf, Bnd::PosInf) => SamplePoint::Rational(Rat::zero()),
            (Bnd::NegInf, Bnd::Fin(j)) => {
                let hi = &self.roots[*j];
                let mut t = Rat::from_integer(BigInt::from(hi.approx().floor() as i64 - 1));
                while surd_cmp(&Surd::rational(t.clone()), hi) != Ordering::Less {
                    t -= Rat::from_integer(BigInt::from(1));
                }
                SamplePoint::Rational(t)
            }
            (Bnd::Fin(i), Bnd::PosInf) => {
                let lo = &self.roots[*i];
                let mut t = Rat::from_integer(BigInt::from(lo.approx().ceil() as i64 + 1));
                while surd_cmp(&Surd::rational(t.clone()), lo) != Ordering::Greater {
                    t += Rat::from_integer(BigInt::from(1));
                }
                SamplePoint::Rational(t)
            }
            (Bnd::Fin(i), Bnd::Fin(j)) => {
                let (lo, hi) = (&self.roots[*i], &self.roots[*j]);
                if surd_cmp(lo, hi) == Ordering::Equal {
                    return SamplePoint::Root(lo.clone());
                }
                SamplePoint::Rational(rational_between(lo, hi))
            }
            _ => unreachable!("lo <= hi by construction"),
        }
    }
}

enum SamplePoint {
    Rational(Rat),
    Root(Surd),
}

/// Rational strictly between two surds x < y, by dyadic refinement with exact
/// comparisons.
fn rational_between(x: &Surd, y: &Surd) -> Rat {
    let fx = x.approx();
    let fy = y.approx();
    let mid = rat(0.5 * (fx + fy));
    let ms = Surd::rational(mid.clone());
    if surd_cmp(x, &ms) == Ordering::Less && surd_cmp(&ms, y) == Ordering::Less {
        return mid;
    }
    let mut lo = rat(fx.floor() - 1.0);
    let mut hi = rat(fy.ceil() + 1.0);
    let half = Rat::new(BigInt::from(1), BigInt::from(2));
    for _ in 0..20_000 {
        let m = (&lo + &hi) * &half;
        let msurd = Surd::rational(m.clone());
        let cl = surd_cmp(x, &msurd);
        let ch = surd_cmp(&msurd, y);
        if cl == Ordering::Less && ch == Ordering::Less {
            return m;
        }
        if cl != Ordering::Less {
            lo = m;
        } else {
            hi = m;
        }
    }
    unreachable!("dyadic refinement always separates distinct algebraic numbers")
}

/// Exact decision for the conjunction.
#[derive(Clone, Debug)]
pub enum ExactOutcome {
    /// Satisfiable; theta is the polar angle of a (possibly boundary) witness.
    Sat { theta: f64, degenerate: bool },
    Unsat,
}

/// Exact satisfiability over the projective circle. `order` optionally gives
/// a processing order for constraints (most restrictive first helps the
/// running intersection empty out early).
pub fn decide_exact(cons: &[CircleConstraint], order: Option<&[usize]>) -> ExactOutcome {
    let quads: Vec<ExactQuad> = cons
        .iter()
        .map(|c| {
            let alpha = rat(c.alpha);
            let beta = rat(c.beta);
            let gamma = rat(c.gamma);
            ExactQuad {
                a: &alpha - &beta,
                b: Rat::from_integer(BigInt::from(2)) * gamma,
                c: alpha + beta,
                rel: c.rel,
            }
        })
        .collect();

    // the single point psi = pi (t = infinity)
    let infinity_ok = quads.iter().all(|q| q.rel_holds(q.sign_at_infinity()));

    let mut ctx = ExactCtx { roots: Vec::new() };
    let mut current: Vec<Iv> = vec![Iv {
        lo: Bnd::NegInf,
        lo_open: true,
        hi: Bnd::PosInf,
        hi_open: true,
    }];
    let default_order: Vec<usize> = (0..quads.len()).collect();
    let order = order.unwrap_or(&default_order);
    for &qi in order {
        let q = &quads[qi];
        let ivs = match quad_intervals(q, &mut ctx) {
            Some(ivs) => ivs,
            None => continue, // constraint holds on all of R
        };
        if ivs.is_empty() {
            return if infinity_ok {
                ExactOutcome::Sat { theta: PI / 2.0, degenerate: true }
            } else {
                ExactOutcome::Unsat
            };
        }
        current = ctx.intersect(&current, &ivs);
        if current.is_empty() {
            return if infinity_ok {
                ExactOutcome::Sat { theta: PI / 2.0, degenerate: true }
            } else {
                ExactOutcome::Unsat
            };
        }
    }
    // the intersection is exact: any sample point of any interval satisfies
    // every processed constraint; prefer a nondegenerate interval
    let mut fallback: Option<(f64, bool)> = None;
    for iv in &current {
        match ctx.sample(iv) {
            SamplePoint::Rational(t) => {
                debug_assert!(quads.iter().all(|q| q.rel_holds(q.sign_at_rational(&t))));
                let theta = t.to_f64().map(|v| v.atan()).unwrap_or_else(|| {
                    if t.is_positive() {
                        PI / 2.0
                    } else {
                        -PI / 2.0
                    }
                });
                return ExactOutcome::Sat { theta, degenerate: false };
            }
            SamplePoint::Root(rt) => {
                if quads.iter().all(|q| q.rel_holds(q.sign_at_surd(&rt))) {
                    fallback.get_or_insert((rt.approx().atan(), true));
                }
            }
        }
    }
    if let Some((theta, degenerate)) = fallback {
        return ExactOutcome::Sat { theta, degenerate };
    }
    if infinity_ok {
        return ExactOutcome::Sat { theta: PI / 2.0, degenerate: true };
    }
    ExactOutcome::Unsat
}

/// Feasible t-intervals of one quadratic sign constraint; None means all of R.
fn quad_intervals(q: &ExactQuad, ctx: &mut ExactCtx) -> Option<Vec<Iv>> {
    let two = Rat::from_integer(BigInt::from(2));
    let four = Rat::from_integer(BigInt::from(4));
    let full = || None;
    let empty = Some(Vec::new());
    let sa = rat_sign(&q.a);
    if sa == 0 {
        let sb = rat_sign(&q.b);
        if sb == 0 {
            let sc = rat_sign(&q.c);
            return if q.rel_holds(sc) { full() } else { empty };
        }
        // linear: root r = -c/b
        let r = ctx_push(ctx, Surd::rational(-&q.c / &q.b));
        // p > 0 to the right when b > 0
        let (pos_side_lo, pos_side_hi) = if sb > 0 {
            (iv_from(r.clone(), true, Bnd::PosInf, true), iv_to(r.clone(), true))
        } else {
            (iv_to(r.clone(), true), iv_from(r.clone(), true, Bnd::PosInf, true))
        };
        return Some(match q.rel {
            Rel::Gt => vec![pos_side_lo],
            Rel::Lt => vec![pos_side_hi],
            Rel::Ge => vec![close_lo(pos_side_lo)],
            Rel::Le => vec![close_lo(pos_side_hi)],
            Rel::Eq => vec![point(r)],
        });
    }
    let disc = &q.b * &q.b - &four * &q.a * &q.c;
    let sd = rat_sign(&disc);
    if sd < 0 {
        // constant sign = sign of a
        return if q.rel_holds(sa) { full() } else { empty };
    }
    let inv2a = Rat::from_integer(BigInt::from(1)) / (&two * &q.a);
    if sd == 0 {
        let r = ctx_push(ctx, Surd::rational(-&q.b * &inv2a));
        // p = a (t - r)^2
        return Some(match (q.rel, sa > 0) {
            (Rel::Gt, true) | (Rel::Lt, false) => vec![iv_to(r.clone(), true), iv_from(r, true, Bnd::PosInf, true)],
            (Rel::Ge, true) | (Rel::Le, false) => return None,
            (Rel::Eq, _) | (Rel::Le, true) | (Rel::Ge, false) => vec![point(r)],
            (Rel::Lt, true) | (Rel::Gt, false) => Vec::new(),
        });
    }
    // two distinct roots
    let base = -&q.b * &inv2a;
    let r1 = Surd::new(base.clone(), -inv2a.clone().abs(), disc.clone());
    let r2 = Surd::new(base, inv2a.abs(), disc);
    let i1 = ctx_push(ctx, r1);
    let i2 = ctx_push(ctx, r2);
    // inside (r1, r2) p has sign -a; outside sign a
    let inside = |open: bool| Iv {
        lo: i1.clone(),
        lo_open: open,
        hi: i2.clone(),
        hi_open: open,
    };
    let outside = |open: bool| {
        vec![
            Iv { lo: Bnd::NegInf, lo_open: true, hi: i1.clone(), hi_open: open },
            Iv { lo: i2.clone(), lo_open: open, hi: Bnd::PosInf, hi_open: true },
        ]
    };
    Some(match (q.rel, sa > 0) {
        (Rel::Gt, true) | (Rel::Lt, false) => outside(true),
        (Rel::Ge, true) | (Rel::Le, false) => outside(false),
        (Rel::Lt, true) | (Rel::Gt, false) => vec![inside(true)],
        (Rel::Le, true) | (Rel::Ge, false) => vec![inside(false)],
        (Rel::Eq, _) => vec![point(i1), point(i2)],
    })
}

fn ctx_push(ctx: &mut ExactCtx, s: Surd) -> Bnd {
    ctx.roots.push(s);
    Bnd::Fin(ctx.roots.len() - 1)
}

fn iv_from(lo: Bnd, lo_open: bool, hi: Bnd, hi_open: bool) -> Iv {
    Iv { lo, lo_open, hi, hi_open }
}

fn iv_to(hi: Bnd, hi_open: bool) -> Iv {
    Iv { lo: Bnd::NegInf, lo_open: true, hi, hi_open }
}

fn close_lo(mut iv: Iv) -> Iv {
    iv.lo_open = false;
    iv.hi_open = false;
    iv
}

fn point(b: Bnd) -> Iv {
    Iv { lo: b.clone(), lo_open: false, hi: b, hi_open: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn con(alpha: f64, beta: f64, gamma: f64, rel: Rel) -> CircleConstraint {
        CircleConstraint { alpha, beta, gamma, rel }
    }

    fn sat(cons: &[CircleConstraint]) -> bool {
        matches!(decide_exact(cons, None), ExactOutcome::Sat { .. })
    }

    #[test]
    fn exact_engine_basic_cases() {
        // x'Ix > 0 everywhere
        assert!(sat(&[con(1.0, 0.0, 0.0, Rel::Gt)]));
        assert!(!sat(&[con(-1.0, 0.0, 0.0, Rel::Gt)]));
        // cos <= 0 and cos > 0 cannot both hold
        assert!(!sat(&[con(0.0, 1.0, 0.0, Rel::Le), con(0.0, 1.0, 0.0, Rel::Gt)]));
        // cos <= 0 and sin > 0 meet in the second quadrant
        assert!(sat(&[con(0.0, 1.0, 0.0, Rel::Le), con(0.0, 0.0, 1.0, Rel::Gt)]));
        // single touching point psi = pi (the tan-half chart's infinity):
        // 1 + cos(psi) <= 0 together with sin(psi) <= 0 holds only there
        assert!(sat(&[con(1.0, 1.0, 0.0, Rel::Le), con(0.0, 0.0, 1.0, Rel::Le)]));
        // requiring sin > 0 strictly excludes that point
        assert!(!sat(&[con(1.0, 1.0, 0.0, Rel::Le), con(0.0, 0.0, 1.0, Rel::Gt)]));
        // finite touching point psi = 0: 1 - cos(psi) <= 0 with strict sin
        assert!(!sat(&[con(1.0, -1.0, 0.0, Rel::Le), con(0.0, 0.0, 1.0, Rel::Gt)]));
        assert!(sat(&[con(1.0, -1.0, 0.0, Rel::Le), con(0.0, 0.0, 1.0, Rel::Ge)]));
    }

    #[test]
    fn exact_engine_equality_constraints() {
        // sin(psi) = 0 and cos(psi) >= 1/2: only psi = 0 works
        assert!(sat(&[con(0.0, 0.0, 1.0, Rel::Eq), con(-0.5, 1.0, 0.0, Rel::Ge)]));
        // sin(psi) = 0 and cos(psi) >= 1/2 and cos(psi) <= -1/2: empty
        assert!(!sat(&[
            con(0.0, 0.0, 1.0, Rel::Eq),
            con(-0.5, 1.0, 0.0, Rel::Ge),
            con(0.5, 1.0, 0.0, Rel::Le)
        ]));
    }

    #[test]
    fn f64_engine_agrees_with_exact_on_random_conjunctions() {
        use rand::Rng;
        let mut rng = crate::rng::derive(11, "circle-agreement", 0);
        let mut ambiguous = 0;
        for _ in 0..500 {
            let m = rng.random_range(1..6);
            let cons: Vec<CircleConstraint> = (0..m)
                .map(|_| {
                    let rel = match rng.random_range(0..3) {
                        0 => Rel::Gt,
                        1 => Rel::Le,
                        _ => Rel::Ge,
                    };
                    con(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rel,
                    )
                })
                .collect();
            match decide_f64(&cons, 1e-9) {
                F64Outcome::Sat { .. } => assert!(sat(&cons)),
                F64Outcome::Unsat { .. } => assert!(!sat(&cons)),
                F64Outcome::Ambiguous => ambiguous += 1,
            }
        }
        assert!(ambiguous < 25, "too many ambiguous verdicts: {ambiguous}");
    }

    #[test]
    fn witness_theta_satisfies_constraints() {
        let cons = [con(0.1, 1.0, 0.2, Rel::Le), con(-0.05, 0.0, 1.0, Rel::Gt)];
        match decide_exact(&cons, None) {
            ExactOutcome::Sat { theta, .. } => {
                let psi = 2.0 * theta;
                for c in &cons {
                    let v = c.value(psi.cos(), psi.sin());
                    match c.rel {
                        Rel::Le => assert!(v <= 1e-9),
                        Rel::Gt => assert!(v > -1e-9),
                        _ => {}
                    }
                }
            }
            ExactOutcome::Unsat => panic!("expected SAT"),
        }
    }

    #[test]
    fn constraints_from_region_match_direct_evaluation() {
        let mut r = Region::full(2);
        let n = DMatrix::from_row_slice(2, 2, &[0.7, -0.3, -0.3, -1.1]);
        r.push(n.clone(), Rel::Gt);
        let cons = circle_constraints(&r).unwrap();
        for &theta in &[0.0f64, 0.4, -1.2, 1.5] {
            let x = nalgebra::DVector::from_vec(vec![theta.cos(), theta.sin()]);
            let direct = crate::system::quad(&x, &n) / n.norm();
            let psi = 2.0 * theta;
            let via = cons[0].value(psi.cos(), psi.sin());
            approx::assert_relative_eq!(direct, via, epsilon = 1e-12);
        }
    }
}
