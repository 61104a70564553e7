//! The sampled-data ETC closed loop: hold matrices, triggering forms, the
//! inter-sample-time map and the sample map.

use crate::linalg::{expm, lambda_max_sym, symmetrize};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

/// Triggering-condition check discipline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EtcKind {
    /// Condition checked every `h` seconds.
    Petc,
    /// Condition checked continuously.
    Cetc,
}

/// Numeric tolerances, shared across the crate.
#[derive(Clone, Copy, Debug)]
pub struct Tolerances {
    /// Eigenvalue-sign decisions.
    pub psd_tol: f64,
    /// Bisection width for CETC root finding.
    pub cetc_tol: f64,
    /// Grid divisions of [0, tau_bar] for CETC scans.
    pub cetc_grid: usize,
    /// Margin a strict constraint must exceed at a feasibility witness.
    pub strict_margin: f64,
    /// Rational-angle detection tolerance.
    pub angle_tol: f64,
    /// Largest denominator tried when testing arg(lambda)/pi for rationality.
    pub q_max: u64,
    /// States below this norm are rejected as zero.
    pub zero_state: f64,
    /// Allow finite-difference fallback for missing Q'(s).
    pub allow_fd_qdot: bool,
    /// Central-difference step for that fallback.
    pub fd_step: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            psd_tol: 1e-9,
            cetc_tol: 1e-9,
            cetc_grid: 2000,
            strict_margin: 1e-10,
            angle_tol: 1e-9,
            q_max: 64,
            zero_state: 1e-300,
            allow_fd_qdot: true,
            fd_step: 1e-6,
        }
    }
}

type QFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// The quadratic triggering condition: fires when [x; x_hat]' Q(s) [x; x_hat] > 0.
#[derive(Clone)]
pub enum TriggeringSpec {
    /// |x - x_hat| > sigma |x|.
    TabuadaRelative { sigma: f64 },
    /// x' P x > exp(-2 rho s) x_hat' P x_hat.
    MazoLyapunov { p: DMatrix<f64>, rho: f64 },
    /// Arbitrary s-dependent symmetric Q, with optional analytic derivative.
    GeneralQuadratic { q: QFn, qdot: Option<QFn> },
}

impl fmt::Debug for TriggeringSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TriggeringSpec::TabuadaRelative { sigma } => {
                write!(f, "TabuadaRelative {{ sigma: {sigma} }}")
            }
            TriggeringSpec::MazoLyapunov { rho, .. } => {
                write!(f, "MazoLyapunov {{ rho: {rho}, .. }}")
            }
            TriggeringSpec::GeneralQuadratic { qdot, .. } => {
                write!(f, "GeneralQuadratic {{ qdot: {} }}", qdot.is_some())
            }
        }
    }
}

impl TriggeringSpec {
    /// Q(s), a symmetric 2n x 2n matrix.
    pub fn q_matrix(&self, nx: usize, s: f64) -> DMatrix<f64> {
        match self {
            TriggeringSpec::TabuadaRelative { sigma } => {
                let mut q = DMatrix::zeros(2 * nx, 2 * nx);
                for i in 0..nx {
                    q[(i, i)] = 1.0 - sigma * sigma;
                    q[(i, nx + i)] = -1.0;
                    q[(nx + i, i)] = -1.0;
                    q[(nx + i, nx + i)] = 1.0;
                }
                q
            }
            TriggeringSpec::MazoLyapunov { p, rho } => {
                let mut q = DMatrix::zeros(2 * nx, 2 * nx);
                let decay = (-2.0 * rho * s).exp();
                for i in 0..nx {
                    for j in 0..nx {
                        q[(i, j)] = p[(i, j)];
                        q[(nx + i, nx + j)] = -decay * p[(i, j)];
                    }
                }
                q
            }
            TriggeringSpec::GeneralQuadratic { q, .. } => symmetrize(&q(s)),
        }
    }

    /// dQ/ds, if available analytically.
    fn q_matrix_derivative(&self, nx: usize, s: f64) -> Option<DMatrix<f64>> {
        match self {
            TriggeringSpec::TabuadaRelative { .. } => Some(DMatrix::zeros(2 * nx, 2 * nx)),
            TriggeringSpec::MazoLyapunov { p, rho } => {
                let mut q = DMatrix::zeros(2 * nx, 2 * nx);
                let d = 2.0 * rho * (-2.0 * rho * s).exp();
                for i in 0..nx {
                    for j in 0..nx {
                        q[(nx + i, nx + j)] = d * p[(i, j)];
                    }
                }
                Some(q)
            }
            TriggeringSpec::GeneralQuadratic { qdot, .. } => {
                qdot.as_ref().map(|f| symmetrize(&f(s)))
            }
        }
    }
}

/// A symmetric quadratic form in the state, built for a specific elapsed time.
#[derive(Clone, Debug)]
pub struct QuadForm {
    pub matrix: DMatrix<f64>,
    pub s: f64,
}

/// A simulated run of the sample map.
#[derive(Clone, Debug)]
pub struct SampleTrajectory {
    /// x_0, ..., x_n (n+1 states).
    pub states: Vec<DVector<f64>>,
    /// y_0, ..., y_{n-1} inter-sample times.
    pub outputs: Vec<f64>,
}

impl SampleTrajectory {
    /// Outputs as multiples of the checking period (PETC).
    pub fn output_indices(&self, h: f64) -> Vec<usize> {
        self.outputs.iter().map(|y| (y / h).round() as usize).collect()
    }
}

/// Result of the maximum inter-sample-time computation; `lower == upper` when
/// the feasibility oracle decided every step.
#[derive(Clone, Copy, Debug)]
pub struct SupEstimate {
    pub lower: f64,
    pub upper: f64,
    pub exact: bool,
}

/// An LTI plant under quadratic event-triggered sampling, immutable after
/// construction. PETC systems precompute the M(hk) and N(hk) tables; CETC
/// systems precompute N on the scan grid.
#[derive(Clone, Debug)]
pub struct EtcSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    k_gain: DMatrix<f64>,
    trigger: TriggeringSpec,
    kind: EtcKind,
    h: Option<f64>,
    tau_bar: f64,
    tol: Tolerances,
    m_table: Vec<DMatrix<f64>>,
    n_table: Vec<QuadForm>,
    n_grid: Vec<f64>,
}

impl EtcSystem {
    pub fn petc(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        k_gain: DMatrix<f64>,
        trigger: TriggeringSpec,
        h: f64,
        tau_bar: f64,
    ) -> Result<Self> {
        Self::new(EtcKind::Petc, a, b, k_gain, trigger, Some(h), tau_bar, Tolerances::default())
    }

    pub fn cetc(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        k_gain: DMatrix<f64>,
        trigger: TriggeringSpec,
        tau_bar: f64,
    ) -> Result<Self> {
        Self::new(EtcKind::Cetc, a, b, k_gain, trigger, None, tau_bar, Tolerances::default())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: EtcKind,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        k_gain: DMatrix<f64>,
        trigger: TriggeringSpec,
        h: Option<f64>,
        tau_bar: f64,
        tol: Tolerances,
    ) -> Result<Self> {
        let nx = a.nrows();
        if nx == 0 || a.ncols() != nx {
            return Err(Error::InvalidSystem("A must be square and nonempty".into()));
        }
        if b.nrows() != nx {
            return Err(Error::Dimension(format!(
                "B has {} rows, expected {nx}",
                b.nrows()
            )));
        }
        if k_gain.ncols() != nx || k_gain.nrows() != b.ncols() {
            return Err(Error::Dimension(format!(
                "K is {}x{}, expected {}x{nx}",
                k_gain.nrows(),
                k_gain.ncols(),
                b.ncols()
            )));
        }
        if !(tau_bar > 0.0) {
            return Err(Error::InvalidSystem("tau_bar must be positive".into()));
        }
        match &trigger {
            TriggeringSpec::TabuadaRelative { sigma } => {
                if !(*sigma > 0.0 && *sigma < 1.0) {
                    return Err(Error::InvalidSystem("sigma must lie in (0,1)".into()));
                }
            }
            TriggeringSpec::MazoLyapunov { p, rho } => {
                if p.nrows() != nx || p.ncols() != nx {
                    return Err(Error::Dimension("P must be n_x x n_x".into()));
                }
                if crate::linalg::lambda_min_sym(&symmetrize(p)) <= 0.0 {
                    return Err(Error::InvalidSystem("P must be positive definite".into()));
                }
                if !(*rho > 0.0 && *rho < 1.0) {
                    return Err(Error::InvalidSystem("rho must lie in (0,1)".into()));
                }
            }
            TriggeringSpec::GeneralQuadratic { .. } => {}
        }
        let mut sys = EtcSystem {
            a,
            b,
            k_gain,
            trigger,
            kind,
            h: None,
            tau_bar,
            tol,
            m_table: Vec::new(),
            n_table: Vec::new(),
            n_grid: Vec::new(),
        };
        match kind {
            EtcKind::Petc => {
                let h = h.ok_or_else(|| Error::InvalidSystem("PETC requires h".into()))?;
                if !(h > 0.0) {
                    return Err(Error::InvalidSystem("h must be positive".into()));
                }
                let ratio = tau_bar / h;
                let k_bar = ratio.round();
                if k_bar < 1.0 || (ratio - k_bar).abs() > 1e-9 * ratio.max(1.0) {
                    return Err(Error::InvalidSystem(
                        "tau_bar must be an integer multiple of h".into(),
                    ));
                }
                sys.h = Some(h);
                let k_bar = k_bar as usize;
                for k in 1..=k_bar {
                    let s = h * k as f64;
                    sys.m_table.push(sys.transition_matrix(s)?);
                    sys.n_table.push(sys.trigger_form(s)?);
                }
            }
            EtcKind::Cetc => {
                // grid values of lambda_max(N(s)) are reused by tau, Inf and the
                // fixed-line search; N itself is rebuilt on demand
                let steps = sys.tol.cetc_grid;
                let mut grid = Vec::with_capacity(steps + 1);
                for i in 0..=steps {
                    grid.push(tau_bar * i as f64 / steps as f64);
                }
                sys.n_grid = grid;
            }
        }
        Ok(sys)
    }

    pub fn with_tolerances(self, tol: Tolerances) -> Result<Self> {
        Self::new(
            self.kind, self.a, self.b, self.k_gain, self.trigger, self.h, self.tau_bar, tol,
        )
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }
    pub fn kind(&self) -> EtcKind {
        self.kind
    }
    pub fn tau_bar(&self) -> f64 {
        self.tau_bar
    }
    pub fn tolerances(&self) -> &Tolerances {
        &self.tol
    }
    pub fn trigger(&self) -> &TriggeringSpec {
        &self.trigger
    }

    /// Checking period; panics on CETC systems.
    pub fn period(&self) -> f64 {
        self.h.expect("PETC system")
    }

    /// tau_bar / h for PETC.
    pub fn k_bar(&self) -> usize {
        self.m_table.len()
    }

    /// Precomputed M(hk), 1-based k.
    pub fn hold_matrix(&self, k: usize) -> &DMatrix<f64> {
        &self.m_table[k - 1]
    }

    /// Precomputed N(hk), 1-based k.
    pub fn trigger_table(&self, k: usize) -> &QuadForm {
        &self.n_table[k - 1]
    }

    /// M(s) = e^{As} + (int_0^s e^{At} dt) B K, from the exponential of the
    /// augmented block matrix [[A, BK], [0, 0]].
    pub fn transition_matrix(&self, s: f64) -> Result<DMatrix<f64>> {
        assert!(s >= 0.0, "elapsed time must be nonnegative");
        let n = self.nx();
        let bk = &self.b * &self.k_gain;
        let mut aug = DMatrix::zeros(2 * n, 2 * n);
        aug.view_mut((0, 0), (n, n)).copy_from(&self.a);
        aug.view_mut((0, n), (n, n)).copy_from(&bk);
        let e = expm(&(aug * s)).map_err(|_| Error::NumericOverflow { s })?;
        let m = e.view((0, 0), (n, n)) + e.view((0, n), (n, n));
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericOverflow { s });
        }
        Ok(m.into_owned())
    }

    /// dM/ds = e^{As} (A + BK).
    pub fn transition_matrix_derivative(&self, s: f64) -> Result<DMatrix<f64>> {
        assert!(s >= 0.0, "elapsed time must be nonnegative");
        let e = expm(&(&self.a * s)).map_err(|_| Error::NumericOverflow { s })?;
        Ok(e * (&self.a + &self.b * &self.k_gain))
    }

    /// N(s) = [M(s); I]' Q(s) [M(s); I], symmetrized.
    pub fn trigger_form(&self, s: f64) -> Result<QuadForm> {
        let n = self.nx();
        let m = self.transition_matrix(s)?;
        let q = self.trigger.q_matrix(n, s);
        let mut j = DMatrix::zeros(2 * n, n);
        j.view_mut((0, 0), (n, n)).copy_from(&m);
        j.view_mut((n, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
        let nmat = symmetrize(&(j.transpose() * q * j));
        Ok(QuadForm { matrix: nmat, s })
    }

    /// dN/ds = [M'; 0]' Q [M; I] + [M; I]' Q [M'; 0] + [M; I]' Q' [M; I].
    pub fn trigger_form_derivative(&self, s: f64) -> Result<QuadForm> {
        let n = self.nx();
        let m = self.transition_matrix(s)?;
        let md = self.transition_matrix_derivative(s)?;
        let q = self.trigger.q_matrix(n, s);
        let qd = match self.trigger.q_matrix_derivative(n, s) {
            Some(qd) => qd,
            None if self.tol.allow_fd_qdot => {
                let e = self.tol.fd_step;
                let lo = (s - e).max(0.0);
                (self.trigger.q_matrix(n, s + e) - self.trigger.q_matrix(n, lo)) / (s + e - lo)
            }
            None => {
                return Err(Error::Config(
                    "triggering Q has no derivative and finite differences are disabled".into(),
                ))
            }
        };
        let mut j = DMatrix::zeros(2 * n, n);
        j.view_mut((0, 0), (n, n)).copy_from(&m);
        j.view_mut((n, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
        let mut jd = DMatrix::zeros(2 * n, n);
        jd.view_mut((0, 0), (n, n)).copy_from(&md);
        let nd = jd.transpose() * &q * &j + j.transpose() * &q * &jd + j.transpose() * qd * &j;
        Ok(QuadForm { matrix: symmetrize(&nd), s })
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.nx() {
            return Err(Error::Dimension(format!(
                "state has {} entries, expected {}",
                x.len(),
                self.nx()
            )));
        }
        if x.norm() < self.tol.zero_state {
            return Err(Error::ZeroState);
        }
        Ok(())
    }

    /// Inter-sample time as a multiple of h (PETC only).
    pub fn inter_sample_index(&self, x: &DVector<f64>) -> Result<usize> {
        if self.kind != EtcKind::Petc {
            return Err(Error::WrongKind("PETC"));
        }
        self.check_state(x)?;
        for (i, qf) in self.n_table.iter().enumerate() {
            if quad(x, &qf.matrix) > 0.0 {
                return Ok(i + 1);
            }
        }
        Ok(self.k_bar())
    }

    /// tau(x): first checking time where the triggering form goes positive,
    /// capped at tau_bar.
    pub fn inter_sample_time(&self, x: &DVector<f64>) -> Result<f64> {
        match self.kind {
            EtcKind::Petc => Ok(self.period() * self.inter_sample_index(x)? as f64),
            EtcKind::Cetc => self.cetc_tau(x),
        }
    }

    fn cetc_tau(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_state(x)?;
        let mut prev_s = 0.0;
        for &s in self.n_grid.iter().skip(1) {
            let v = quad(x, &self.trigger_form(s)?.matrix);
            if v > 0.0 {
                let (mut lo, mut hi) = (prev_s, s);
                while hi - lo > self.tol.cetc_tol {
                    let mid = 0.5 * (lo + hi);
                    if quad(x, &self.trigger_form(mid)?.matrix) > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Ok(hi.min(self.tau_bar));
            }
            prev_s = s;
        }
        Ok(self.tau_bar)
    }

    /// One step of the sample map: (M(tau(x)) x, tau(x)).
    pub fn sample_map(&self, x: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        match self.kind {
            EtcKind::Petc => {
                let k = self.inter_sample_index(x)?;
                Ok((&self.m_table[k - 1] * x, self.period() * k as f64))
            }
            EtcKind::Cetc => {
                let y = self.cetc_tau(x)?;
                Ok((self.transition_matrix(y)? * x, y))
            }
        }
    }

    /// n applications of the sample map. With `renormalize` each state is
    /// rescaled to unit norm, which leaves the output sequence unchanged by
    /// homogeneity.
    pub fn simulate(&self, x0: &DVector<f64>, n: usize, renormalize: bool) -> Result<SampleTrajectory> {
        assert!(n >= 1, "simulate needs at least one step");
        self.check_state(x0)?;
        let mut states = Vec::with_capacity(n + 1);
        let mut outputs = Vec::with_capacity(n);
        let mut x = x0.clone();
        if renormalize {
            x /= x.norm();
        }
        states.push(x.clone());
        for _ in 0..n {
            let (mut xn, y) = self.sample_map(&x)?;
            if renormalize {
                let nrm = xn.norm();
                if nrm < self.tol.zero_state {
                    return Err(Error::ZeroState);
                }
                xn /= nrm;
            }
            outputs.push(y);
            states.push(xn.clone());
            x = xn;
        }
        Ok(SampleTrajectory { states, outputs })
    }

    /// Least s in the checking set where N(s) is not negative definite.
    pub fn min_inter_sample_time(&self) -> Result<f64> {
        match self.kind {
            EtcKind::Petc => {
                for (i, qf) in self.n_table.iter().enumerate() {
                    if lambda_max_sym(&qf.matrix) >= -self.tol.psd_tol {
                        return Ok(self.period() * (i + 1) as f64);
                    }
                }
                Ok(self.tau_bar)
            }
            EtcKind::Cetc => {
                let mut prev = 0.0;
                for &s in self.n_grid.iter().skip(1) {
                    if lambda_max_sym(&self.trigger_form(s)?.matrix) >= -self.tol.psd_tol {
                        let (mut lo, mut hi) = (prev, s);
                        for _ in 0..80 {
                            let mid = 0.5 * (lo + hi);
                            if lambda_max_sym(&self.trigger_form(mid)?.matrix) >= -self.tol.psd_tol
                            {
                                hi = mid;
                            } else {
                                lo = mid;
                            }
                            if hi - lo <= self.tol.cetc_tol {
                                break;
                            }
                        }
                        return Ok(hi);
                    }
                    prev = s;
                }
                Ok(self.tau_bar)
            }
        }
    }

    /// Largest attainable inter-sample time: the least time by which every
    /// state has triggered, capped at tau_bar. Needs the feasibility oracle to
    /// certify region emptiness; UNKNOWN verdicts widen the result interval.
    pub fn max_inter_sample_time(&self, budget: &crate::feasibility::Budget) -> Result<SupEstimate> {
        crate::feasibility::sup_inter_sample_time(self, budget)
    }

    /// The sample map on the projective circle (n_x = 2 only): embeds theta as
    /// [cos theta, sin theta] and returns (polar angle of f(x) in
    /// [-pi/2, pi/2), tau).
    pub fn circle_map(&self, theta: f64) -> Result<(f64, f64)> {
        if self.nx() != 2 {
            return Err(Error::Dimension("circle map needs n_x = 2".into()));
        }
        let x = DVector::from_vec(vec![theta.cos(), theta.sin()]);
        let (xn, y) = self.sample_map(&x)?;
        Ok((polar_angle(&xn), y))
    }
}

/// x' M x.
pub fn quad(x: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (x.transpose() * m * x)[(0, 0)]
}

/// Polar angle of a nonzero 2-vector, reduced modulo pi into [-pi/2, pi/2);
/// o-lines map to unique angles.
pub fn polar_angle(x: &DVector<f64>) -> f64 {
    let mut th = x[1].atan2(x[0]);
    while th >= PI / 2.0 {
        th -= PI;
    }
    while th < -PI / 2.0 {
        th += PI;
    }
    th
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn example2(k1: f64, sigma: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, TriggeringSpec) {
        (
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, 3.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, k1]),
            TriggeringSpec::TabuadaRelative { sigma },
        )
    }

    pub(crate) fn cetc_case(k1: f64, sigma: f64) -> EtcSystem {
        let (a, b, k, t) = example2(k1, sigma);
        EtcSystem::cetc(a, b, k, t, 2.0).unwrap()
    }

    pub(crate) fn petc_case(k1: f64, sigma: f64) -> EtcSystem {
        let (a, b, k, t) = example2(k1, sigma);
        EtcSystem::petc(a, b, k, t, 0.05, 0.5).unwrap()
    }

    #[test]
    fn m_at_zero_is_identity() {
        let sys = cetc_case(-6.0, 0.32);
        let m = sys.transition_matrix(0.0).unwrap();
        assert_relative_eq!(m, DMatrix::identity(2, 2), epsilon = 1e-14);
    }

    #[test]
    fn m_with_zero_dynamics_is_affine_in_s() {
        // A = 0, BK = I: M(s) = I + s I
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::identity(2, 2);
        let k = DMatrix::identity(2, 2);
        let sys =
            EtcSystem::cetc(a, b, k, TriggeringSpec::TabuadaRelative { sigma: 0.5 }, 3.0).unwrap();
        let m = sys.transition_matrix(2.0).unwrap();
        assert_relative_eq!(m, 3.0 * DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn m_eigenvalues_match_reported_fixed_time() {
        // the fixed inter-sample time of the sigma = 0.32 CETC case
        let sys = cetc_case(-6.0, 0.32);
        let m = sys.transition_matrix(0.3903).unwrap();
        let mut eig: Vec<f64> = m.complex_eigenvalues().iter().map(|c| c.re).collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(eig[0], -1.33, epsilon = 0.01);
        assert_relative_eq!(eig[1], 0.757, epsilon = 0.005);
    }

    #[test]
    fn mdot_at_zero_and_zero_dynamics() {
        let sys = cetc_case(-6.0, 0.32);
        let md0 = sys.transition_matrix_derivative(0.0).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -3.0]);
        assert_relative_eq!(md0, expect, epsilon = 1e-12);

        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::identity(2, 2);
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let s2 = EtcSystem::cetc(
            a,
            b,
            k.clone(),
            TriggeringSpec::TabuadaRelative { sigma: 0.5 },
            1.0,
        )
        .unwrap();
        assert_relative_eq!(s2.transition_matrix_derivative(0.7).unwrap(), k, epsilon = 1e-12);
    }

    #[test]
    fn mdot_matches_central_differences() {
        let sys = cetc_case(-6.0, 0.32);
        let s = 0.2;
        let e = 1e-6;
        let fd = (sys.transition_matrix(s + e).unwrap() - sys.transition_matrix(s - e).unwrap())
            / (2.0 * e);
        let md = sys.transition_matrix_derivative(s).unwrap();
        assert_relative_eq!(md, fd, epsilon = 1e-8);
    }

    #[test]
    fn n_at_zero_tabuada() {
        let sys = cetc_case(-6.0, 0.32);
        let n0 = sys.trigger_form(0.0).unwrap();
        assert_relative_eq!(
            n0.matrix,
            -(0.32f64 * 0.32) * DMatrix::identity(2, 2),
            epsilon = 1e-12
        );
    }

    #[test]
    fn n_at_zero_mazo_vanishes_and_qdot_contributes() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (a, b, k, _) = example2(-6.0, 0.32);
        let rho = 0.4;
        let sys = EtcSystem::cetc(
            a,
            b,
            k,
            TriggeringSpec::MazoLyapunov { p: p.clone(), rho },
            2.0,
        )
        .unwrap();
        let n0 = sys.trigger_form(0.0).unwrap();
        assert!(n0.matrix.abs().max() < 1e-12);
        // at s=0, Ndot = Md' P + P Md + 2 rho P
        let md = sys.transition_matrix_derivative(0.0).unwrap();
        let expect = md.transpose() * &p + &p * md + 2.0 * rho * &p;
        assert_relative_eq!(
            sys.trigger_form_derivative(0.0).unwrap().matrix,
            crate::linalg::symmetrize(&expect),
            epsilon = 1e-9
        );
    }

    #[test]
    fn ndot_constant_system_is_zero() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(2, 1);
        let k = DMatrix::zeros(1, 2);
        let sys =
            EtcSystem::cetc(a, b, k, TriggeringSpec::TabuadaRelative { sigma: 0.5 }, 1.0).unwrap();
        assert!(sys.trigger_form_derivative(0.3).unwrap().matrix.abs().max() < 1e-12);
    }

    #[test]
    fn ndot_matches_central_differences() {
        let sys = cetc_case(-6.0, 0.32);
        let s = 0.1;
        let e = 1e-6;
        let fd = (sys.trigger_form(s + e).unwrap().matrix - sys.trigger_form(s - e).unwrap().matrix)
            / (2.0 * e);
        assert_relative_eq!(
            sys.trigger_form_derivative(s).unwrap().matrix,
            fd,
            epsilon = 1e-6
        );
    }

    #[test]
    fn tau_is_homogeneous_and_rejects_origin() {
        let sys = petc_case(-6.0, 0.32);
        let x = DVector::from_vec(vec![0.3, -1.1]);
        let t1 = sys.inter_sample_time(&x).unwrap();
        let t2 = sys.inter_sample_time(&(5.0 * &x)).unwrap();
        assert_eq!(t1, t2);
        assert!(matches!(
            sys.inter_sample_time(&DVector::zeros(2)),
            Err(Error::ZeroState)
        ));
    }

    #[test]
    fn cetc_tau_on_fixed_line() {
        // eigenvector of M(0.3903) for eigenvalue 1/(1+sigma) has tau ~ 0.3903
        let sys = cetc_case(-6.0, 0.32);
        let m = sys.transition_matrix(0.3903).unwrap();
        let (vals, vecs) = crate::linalg::eigen_pairs(&m).unwrap();
        let target = 1.0 / 1.32;
        let idx = (0..2)
            .min_by(|&i, &j| {
                (vals[i].re - target)
                    .abs()
                    .partial_cmp(&(vals[j].re - target).abs())
                    .unwrap()
            })
            .unwrap();
        let v = vecs[idx].map(|c| c.re);
        let tau = sys.inter_sample_time(&v).unwrap();
        assert_relative_eq!(tau, 0.3903, epsilon = 5e-4);
        // the next sample contracts by ~0.757 along the line
        let (xn, _) = sys.sample_map(&v).unwrap();
        assert_relative_eq!(xn.norm() / v.norm(), target, epsilon = 5e-3);
    }

    #[test]
    fn petc_outputs_live_on_the_grid() {
        let sys = petc_case(-6.0, 0.32);
        let x0 = DVector::from_vec(vec![0.7, 0.2]);
        let traj = sys.simulate(&x0, 50, true).unwrap();
        for y in &traj.outputs {
            let k = (y / 0.05).round();
            assert!((y - 0.05 * k).abs() < 1e-12);
            assert!((1.0..=10.0).contains(&k));
        }
    }

    #[test]
    fn simulate_respects_recursion_without_renormalize() {
        let sys = petc_case(-5.0, 0.2);
        let x0 = DVector::from_vec(vec![1.0, -0.4]);
        let traj = sys.simulate(&x0, 10, false).unwrap();
        for i in 0..traj.outputs.len() {
            let m = sys.transition_matrix(traj.outputs[i]).unwrap();
            let expect = &m * &traj.states[i];
            assert_relative_eq!(&traj.states[i + 1], &expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn renormalized_outputs_match_raw_outputs() {
        let sys = petc_case(-6.0, 0.32);
        let x0 = DVector::from_vec(vec![0.1, 0.9]);
        let a = sys.simulate(&x0, 30, false).unwrap();
        let b = sys.simulate(&(3.0 * &x0), 30, true).unwrap();
        assert_eq!(a.outputs, b.outputs);
    }

    #[test]
    fn petc_inf_via_eigen_scan() {
        // sigma = 0.32 case: N(h) is negative definite, N(2h) is not
        let sys = petc_case(-6.0, 0.32);
        assert!(lambda_max_sym(&sys.trigger_table(1).matrix) < 0.0);
        assert!(lambda_max_sym(&sys.trigger_table(2).matrix) >= 0.0);
        assert_relative_eq!(sys.min_inter_sample_time().unwrap(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn mazo_has_no_zeno() {
        let p = DMatrix::identity(2, 2);
        let (a, b, k, _) = example2(-6.0, 0.32);
        let sys =
            EtcSystem::cetc(a, b, k, TriggeringSpec::MazoLyapunov { p, rho: 0.3 }, 2.0).unwrap();
        assert!(sys.min_inter_sample_time().unwrap() > 0.0);
    }

    #[test]
    fn circle_map_consistent_with_sample_map() {
        let sys = cetc_case(-6.0, 0.32);
        let th = 0.4f64;
        let x = DVector::from_vec(vec![th.cos(), th.sin()]);
        let (xn, y) = sys.sample_map(&x).unwrap();
        let (tn, y2) = sys.circle_map(th).unwrap();
        assert_eq!(y, y2);
        assert_relative_eq!(tn, polar_angle(&xn), epsilon = 1e-12);
        assert!((-PI / 2.0..PI / 2.0).contains(&tn));
    }
}
