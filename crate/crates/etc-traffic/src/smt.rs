//! SMT-LIB 2 backend for exact feasibility in dimensions above two.
//!
//! Formula layout (bit-exact; every run of the same region produces the same
//! bytes):
//!
//! ```text
//! (set-logic QF_NRA)
//! (declare-const x0 Real)
//! ...
//! (declare-const x{n-1} Real)
//! (assert (= (+ (* x0 x0) ... (* x{n-1} x{n-1})) 1))
//! (assert (<rel> (+ (* <c_ij> xi xj) ...) 0))   ; one per constraint
//! (check-sat)
//! (get-value (x0 ... x{n-1}))
//! ```
//!
//! Constraint polynomials enumerate i <= j in row-major order; off-diagonal
//! coefficients are doubled. Every coefficient is the exact rational value of
//! the f64 entry, printed as `m`, `(- m)`, `(/ m d)` or `(- (/ m d))` with
//! integer mantissa and power-of-two denominator, so the solver sees exactly
//! the floating-point model the rest of the pipeline uses. `<rel>` is one of
//! `>`, `>=`, `=`, `<=`, `<`.
//!
//! The solver command comes from the `ETC_SMT_SOLVER_CMD` environment
//! variable (whitespace-split; e.g. `z3 -in`) and must read SMT-LIB 2 from
//! stdin. `sat`/`unsat`/`unknown` are mapped to the corresponding verdicts; on
//! `sat` the witness is parsed from the `get-value` response (decimal and
//! rational literals), renormalized to unit length and re-checked against the
//! region. An unparseable witness downgrades the verdict to UNKNOWN rather
//! than reporting an unchecked SAT.

use crate::feasibility::{Backend, FeasibilityVerdict, Verdict};
use crate::region::{Region, Rel};
use crate::{Error, Result};
use nalgebra::DVector;
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

/// External solver invocation.
#[derive(Clone, Debug)]
pub struct SmtConfig {
    pub command: Vec<String>,
    pub timeout: Option<Duration>,
}

impl SmtConfig {
    /// Read `ETC_SMT_SOLVER_CMD` from the environment.
    pub fn from_env() -> Option<SmtConfig> {
        let raw = std::env::var("ETC_SMT_SOLVER_CMD").ok()?;
        let command: Vec<String> = raw.split_whitespace().map(str::to_string).collect();
        if command.is_empty() {
            return None;
        }
        Some(SmtConfig { command, timeout: Some(Duration::from_secs(60)) })
    }
}

/// Exact rational literal for an f64, in SMT-LIB 2 syntax.
pub fn rational_literal(x: f64) -> String {
    assert!(x.is_finite(), "non-finite coefficient");
    if x == 0.0 {
        return "0".to_string();
    }
    let bits = x.abs().to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & 0xf_ffff_ffff_ffff;
    // value = m * 2^e with integer m
    let (mut m, mut e) = if exp == 0 {
        (frac as u128, -1074i64)
    } else {
        ((frac | (1 << 52)) as u128, exp - 1075)
    };
    while m % 2 == 0 && e < 0 {
        m /= 2;
        e += 1;
    }
    let body = if e >= 0 {
        let mut num = num_bigint::BigUint::from(m);
        num <<= e as usize;
        num.to_string()
    } else {
        let mut den = num_bigint::BigUint::from(1u8);
        den <<= (-e) as usize;
        format!("(/ {} {})", m, den)
    };
    if x < 0.0 {
        format!("(- {body})")
    } else {
        body
    }
}

fn rel_op(rel: Rel) -> &'static str {
    match rel {
        Rel::Gt => ">",
        Rel::Ge => ">=",
        Rel::Eq => "=",
        Rel::Le => "<=",
        Rel::Lt => "<",
    }
}

/// Render the full SMT-LIB 2 problem for a region.
pub fn emit(region: &Region) -> String {
    let n = region.nx();
    let mut out = String::from("(set-logic QF_NRA)\n");
    for i in 0..n {
        out.push_str(&format!("(declare-const x{i} Real)\n"));
    }
    let unit: Vec<String> = (0..n).map(|i| format!("(* x{i} x{i})")).collect();
    out.push_str(&format!("(assert (= (+ {}) 1))\n", unit.join(" ")));
    for c in &region.constraints {
        let mut terms = Vec::new();
        for i in 0..n {
            for j in i..n {
                let coeff = if i == j { c.matrix[(i, i)] } else { 2.0 * c.matrix[(i, j)] };
                if coeff != 0.0 {
                    terms.push(format!("(* {} x{i} x{j})", rational_literal(coeff)));
                }
            }
        }
        let poly = if terms.is_empty() { "0".to_string() } else { format!("(+ {})", terms.join(" ")) };
        out.push_str(&format!("(assert ({} {} 0))\n", rel_op(c.rel), poly));
    }
    out.push_str("(check-sat)\n");
    let vars: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    out.push_str(&format!("(get-value ({}))\n", vars.join(" ")));
    out
}

/// Run the solver on the region and map its answer.
pub fn solve(region: &Region, cfg: &SmtConfig) -> Result<FeasibilityVerdict> {
    let formula = emit(region);
    let output = run_subprocess(&cfg.command, &formula, cfg.timeout)?;
    let mut lines = output.lines();
    let status = loop {
        match lines.next() {
            Some(l) if l.trim() == "sat" => break "sat",
            Some(l) if l.trim() == "unsat" => break "unsat",
            Some(l) if l.trim() == "unknown" => break "unknown",
            Some(_) => continue,
            None => return Err(Error::Backend("no sat/unsat/unknown in solver output".into())),
        }
    };
    match status {
        "unsat" => Ok(FeasibilityVerdict { verdict: Verdict::Unsat, backend: Backend::Exact }),
        "unknown" => Ok(FeasibilityVerdict { verdict: Verdict::Unknown, backend: Backend::Exact }),
        _ => {
            let rest: String = lines.collect::<Vec<_>>().join(" ");
            let verdict = match parse_model(&rest, region.nx()) {
                Some(mut w) => {
                    let n = w.norm();
                    if n > 1e-12 {
                        w /= n;
                        if region.contains(&w, 0.0) {
                            Verdict::Sat { witness: w, boundary: false }
                        } else {
                            // witness fails the f64 recheck (boundary case)
                            Verdict::Sat { witness: w, boundary: true }
                        }
                    } else {
                        Verdict::Unknown
                    }
                }
                None => Verdict::Unknown,
            };
            Ok(FeasibilityVerdict { verdict, backend: Backend::Exact })
        }
    }
}

fn run_subprocess(command: &[String], input: &str, timeout: Option<Duration>) -> Result<String> {
    let mut child = Command::new(&command[0])
        .args(&command[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| Error::Backend(format!("spawn {}: {e}", command[0])))?;
    child
        .stdin
        .take()
        .expect("piped stdin")
        .write_all(input.as_bytes())
        .map_err(|e| Error::Backend(format!("write to solver: {e}")))?;
    let deadline = timeout.map(|t| Instant::now() + t);
    loop {
        match child.try_wait() {
            Ok(Some(_)) => break,
            Ok(None) => {
                if let Some(d) = deadline {
                    if Instant::now() > d {
                        let _ = child.kill();
                        return Err(Error::Backend("solver timed out".into()));
                    }
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(Error::Backend(format!("wait: {e}"))),
        }
    }
    let mut out = String::new();
    child
        .stdout
        .take()
        .expect("piped stdout")
        .read_to_string(&mut out)
        .map_err(|e| Error::Backend(format!("read solver output: {e}")))?;
    Ok(out)
}

/// Parse `((x0 v0) (x1 v1) ...)`; values may be integers, decimals, `(/ a b)`
/// and `(- v)` combinations.
fn parse_model(s: &str, n: usize) -> Option<DVector<f64>> {
    let toks = tokenize(s);
    let mut vals = vec![f64::NAN; n];
    let mut i = 0;
    while i < toks.len() {
        if toks[i] == "(" && i + 1 < toks.len() && toks[i + 1].starts_with('x') {
            if let Ok(idx) = toks[i + 1][1..].parse::<usize>() {
                let (v, next) = parse_value(&toks, i + 2)?;
                if idx < n {
                    vals[idx] = v;
                }
                i = next;
                continue;
            }
        }
        i += 1;
    }
    if vals.iter().all(|v| v.is_finite()) {
        Some(DVector::from_vec(vals))
    } else {
        None
    }
}

fn tokenize(s: &str) -> Vec<String> {
    let mut toks = Vec::new();
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' | ')' => {
                if !cur.is_empty() {
                    toks.push(std::mem::take(&mut cur));
                }
                toks.push(ch.to_string());
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    toks.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        toks.push(cur);
    }
    toks
}

fn parse_value(toks: &[String], i: usize) -> Option<(f64, usize)> {
    if i >= toks.len() {
        return None;
    }
    if toks[i] == "(" {
        if i + 1 >= toks.len() {
            return None;
        }
        match toks[i + 1].as_str() {
            "-" => {
                let (v, next) = parse_value(toks, i + 2)?;
                if toks.get(next)? == ")" {
                    Some((-v, next + 1))
                } else {
                    None
                }
            }
            "/" => {
                let (num, n1) = parse_value(toks, i + 2)?;
                let (den, n2) = parse_value(toks, n1)?;
                if toks.get(n2)? == ")" && den != 0.0 {
                    Some((num / den, n2 + 1))
                } else {
                    None
                }
            }
            _ => None,
        }
    } else {
        toks[i].parse::<f64>().ok().map(|v| (v, i + 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn rational_literals_are_exact() {
        assert_eq!(rational_literal(0.0), "0");
        assert_eq!(rational_literal(1.0), "1");
        assert_eq!(rational_literal(-3.0), "(- 3)");
        assert_eq!(rational_literal(0.5), "(/ 1 2)");
        assert_eq!(rational_literal(-0.75), "(- (/ 3 4))");
        // 0.1 is not exactly representable; the literal is its true value
        assert_eq!(
            rational_literal(0.1),
            "(/ 3602879701896397 36028797018963968)"
        );
    }

    #[test]
    fn emitted_formula_layout() {
        let mut r = Region::full(2);
        r.push(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, -1.0]), Rel::Gt);
        let s = emit(&r);
        let expect = "(set-logic QF_NRA)\n\
                      (declare-const x0 Real)\n\
                      (declare-const x1 Real)\n\
                      (assert (= (+ (* x0 x0) (* x1 x1)) 1))\n\
                      (assert (> (+ (* 1 x0 x0) (* 1 x0 x1) (* (- 1) x1 x1)) 0))\n\
                      (check-sat)\n\
                      (get-value (x0 x1))\n";
        assert_eq!(s, expect);
    }

    #[test]
    fn model_parsing() {
        let v = parse_model("((x0 (- (/ 1 2))) (x1 0.25))", 2).unwrap();
        assert_eq!(v[0], -0.5);
        assert_eq!(v[1], 0.25);
        assert!(parse_model("((x0 foo))", 1).is_none());
    }

    #[test]
    fn stub_solver_round_trip() {
        // a stub "solver" that always answers sat with a fixed model
        let cfg = SmtConfig {
            command: vec![
                "sh".into(),
                "-c".into(),
                "cat >/dev/null; echo sat; echo '((x0 1.0) (x1 0.0) (x2 0.0))'".into(),
            ],
            timeout: Some(Duration::from_secs(5)),
        };
        let mut r = Region::full(3);
        r.push(DMatrix::identity(3, 3), Rel::Gt);
        let v = solve(&r, &cfg).unwrap();
        assert!(v.is_sat());
        let cfg_unsat = SmtConfig {
            command: vec!["sh".into(), "-c".into(), "cat >/dev/null; echo unsat".into()],
            timeout: Some(Duration::from_secs(5)),
        };
        assert!(matches!(
            solve(&r, &cfg_unsat).unwrap().verdict,
            Verdict::Unsat
        ));
    }
}
