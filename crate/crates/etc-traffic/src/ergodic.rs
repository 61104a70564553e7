//! Simulation-based ergodicity testing on chaos-suspect components: seed two
//! ensembles from the abstraction, iterate the sample map, and compare output
//! distributions with permutation-based two-sample tests.

use crate::metrics::SccDecomposition;
use crate::system::EtcSystem;
use crate::traffic::TrafficModel;
use crate::{Error, Result};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

/// A set of unit states seeded from one component's sequence regions.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub points: Vec<DVector<f64>>,
    pub provenance: String,
    pub iterations: usize,
    /// Fewer points than requested were confirmed within the attempt budget.
    pub partial: bool,
}

/// Sample points whose first l outputs match states of the chosen SCC; each
/// candidate is confirmed by re-simulation before it enters the ensemble.
pub fn seed_from_scc(
    sys: &EtcSystem,
    model: &TrafficModel,
    scc: &SccDecomposition,
    scc_id: usize,
    n_points: usize,
    seed: u64,
    stream: &str,
) -> Result<Ensemble> {
    if scc_id >= scc.components.len() {
        return Err(Error::OutOfRange(format!("scc id {scc_id}")));
    }
    let comp = &scc.components[scc_id];
    let mut rng = crate::rng::derive(seed, stream, scc_id as u64);
    let mut order: Vec<usize> = comp.clone();
    order.shuffle(&mut rng);
    let l = model.l();
    let mut points = Vec::with_capacity(n_points);
    let budget = 60 * n_points.max(1);
    let mut attempts = 0;
    'outer: while points.len() < n_points && attempts < budget {
        for &state in &order {
            if points.len() >= n_points || attempts >= budget {
                break 'outer;
            }
            attempts += 1;
            let seq = &model.states[state];
            let region = crate::region::isosequential_region(
                sys,
                &seq.iter().map(|&k| k as usize).collect::<Vec<_>>(),
            )?;
            let x = match sample_in_region(&region, &mut rng) {
                Some(x) => x,
                None => continue,
            };
            // rejection by re-simulation: the first l outputs must match
            if let Ok(traj) = sys.simulate(&x, l, true) {
                let ks = traj.output_indices(sys.period());
                if ks.iter().zip(seq.iter()).all(|(&a, &b)| a == b as usize) {
                    points.push(x);
                }
            }
        }
    }
    let partial = points.len() < n_points;
    Ok(Ensemble {
        points,
        provenance: format!("scc:{scc_id}"),
        iterations: 0,
        partial,
    })
}

fn sample_in_region(
    region: &crate::region::Region,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Option<DVector<f64>> {
    if region.nx() == 2 {
        let cons = crate::circle::circle_constraints(region).ok()?;
        let arcs = crate::circle::feasible_arcs(&cons);
        if arcs.is_empty() {
            return None;
        }
        let total: f64 = arcs.iter().map(|(_, w)| w).sum();
        let mut u = rng.random_range(0.0..total);
        for (start, width) in arcs {
            if u <= width {
                let theta = 0.5 * (start + u);
                return Some(DVector::from_vec(vec![theta.cos(), theta.sin()]));
            }
            u -= width;
        }
        None
    } else {
        let budget = crate::feasibility::Budget::sampling(rng.random());
        match crate::feasibility::region_feasible(region, &budget).ok()?.verdict {
            crate::feasibility::Verdict::Sat { witness, .. } => Some(witness),
            _ => None,
        }
    }
}

/// Per-point output histories from iterating the sample map.
#[derive(Clone, Debug)]
pub struct OutputHistories {
    /// outputs[point][step].
    pub outputs: Vec<Vec<f64>>,
}

impl OutputHistories {
    pub fn column(&self, step: usize) -> Vec<f64> {
        self.outputs.iter().map(|h| h[step]).collect()
    }

    /// CSV dump (point, step, output).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("point,step,output\n");
        for (p, hist) in self.outputs.iter().enumerate() {
            for (s, y) in hist.iter().enumerate() {
                out.push_str(&format!("{p},{s},{y}\n"));
            }
        }
        out
    }
}

/// Apply the renormalized sample map `steps` times to every point.
pub fn iterate_ensemble(
    sys: &EtcSystem,
    ens: &Ensemble,
    steps: usize,
) -> Result<(Ensemble, OutputHistories)> {
    let results: Result<Vec<(DVector<f64>, Vec<f64>)>> = ens
        .points
        .par_iter()
        .map(|x0| {
            let traj = sys.simulate(x0, steps, true)?;
            Ok((traj.states.last().expect("n >= 1").clone(), traj.outputs))
        })
        .collect();
    let results = results?;
    let points = results.iter().map(|(x, _)| x.clone()).collect();
    let outputs = results.into_iter().map(|(_, o)| o).collect();
    Ok((
        Ensemble {
            points,
            provenance: ens.provenance.clone(),
            iterations: ens.iterations + steps,
            partial: ens.partial,
        },
        OutputHistories { outputs },
    ))
}

/// A two-sample test result with a permutation p-value.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

fn bin_samples(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<u16>, Vec<u16>) {
    let mut alphabet: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    alphabet.sort_by(|x, y| x.partial_cmp(y).expect("finite outputs"));
    alphabet.dedup();
    let bin = |x: f64| -> u16 {
        alphabet
            .binary_search_by(|p| p.partial_cmp(&x).expect("finite"))
            .expect("member of alphabet") as u16
    };
    (
        alphabet.clone(),
        a.iter().map(|&x| bin(x)).collect(),
        b.iter().map(|&x| bin(x)).collect(),
    )
}

/// Statistic over binned samples; `counts_a[bin]`, pooled counts, sizes.
fn cvm_statistic(counts_a: &[usize], pooled: &[usize], n: usize, m: usize) -> f64 {
    let (mut fa, mut fb, mut t) = (0.0f64, 0.0f64, 0.0f64);
    let nm = (n * m) as f64;
    let total = (n + m) as f64;
    for (bin, &p) in pooled.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let ca = counts_a[bin];
        fa += ca as f64 / n as f64;
        fb += (p - ca) as f64 / m as f64;
        t += p as f64 * (fa - fb) * (fa - fb);
    }
    nm / (total * total) * t
}

fn ks_statistic(counts_a: &[usize], pooled: &[usize], n: usize, m: usize) -> f64 {
    let (mut fa, mut fb, mut d) = (0.0f64, 0.0f64, 0.0f64);
    for (bin, &p) in pooled.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let ca = counts_a[bin];
        fa += ca as f64 / n as f64;
        fb += (p - ca) as f64 / m as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

fn permutation_test(
    a: &[f64],
    b: &[f64],
    permutations: usize,
    seed: u64,
    stat: impl Fn(&[usize], &[usize], usize, usize) -> f64 + Sync,
) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let (alphabet, ba, bb) = bin_samples(a, b);
    let nbins = alphabet.len();
    let (n, m) = (a.len(), b.len());
    let mut pooled_bins: Vec<u16> = ba.iter().chain(bb.iter()).copied().collect();
    let mut pooled_counts = vec![0usize; nbins];
    for &x in &pooled_bins {
        pooled_counts[x as usize] += 1;
    }
    let mut counts_a = vec![0usize; nbins];
    for &x in &ba {
        counts_a[x as usize] += 1;
    }
    let observed = stat(&counts_a, &pooled_counts, n, m);
    let mut rng = crate::rng::derive(seed, "permutation-test", 0);
    let mut at_least = 0usize;
    for _ in 0..permutations {
        pooled_bins.shuffle(&mut rng);
        counts_a.iter_mut().for_each(|c| *c = 0);
        for &x in &pooled_bins[..n] {
            counts_a[x as usize] += 1;
        }
        if stat(&counts_a, &pooled_counts, n, m) >= observed - 1e-12 {
            at_least += 1;
        }
    }
    Ok(TestResult {
        statistic: observed,
        p_value: (1 + at_least) as f64 / (permutations + 1) as f64,
    })
}

/// Two-sample Cramer-von Mises test with a permutation p-value (valid on
/// discrete supports).
pub fn cvm_two_sample(a: &[f64], b: &[f64], permutations: usize, seed: u64) -> Result<TestResult> {
    permutation_test(a, b, permutations, seed, cvm_statistic)
}

/// Two-sample Kolmogorov-Smirnov test with a permutation p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64], permutations: usize, seed: u64) -> Result<TestResult> {
    permutation_test(a, b, permutations, seed, ks_statistic)
}

#[derive(Clone, Debug)]
pub struct ErgodicOptions {
    pub n_points: usize,
    pub max_iters: usize,
    pub alpha: f64,
    pub permutations: usize,
    pub seed: u64,
    /// Consecutive non-rejections required to declare convergence.
    pub run_length: usize,
}

impl Default for ErgodicOptions {
    fn default() -> Self {
        ErgodicOptions {
            n_points: 1000,
            max_iters: 30,
            alpha: 0.05,
            permutations: 9999,
            seed: 0,
            run_length: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ErgodicReport {
    pub scc_id: usize,
    pub n_points: usize,
    pub iterations: usize,
    /// First step of the first run of `run_length` consecutive p > alpha.
    pub converged_at: Option<usize>,
    pub p_values: Vec<f64>,
    /// Long-run average of outputs after burn-in, pooled over both ensembles.
    pub pooled_average: f64,
    /// Bootstrap percentile confidence interval for the average.
    pub ci_low: f64,
    pub ci_high: f64,
    pub burn_in: usize,
    pub partial_seeding: bool,
    pub verdict: String,
}

/// The two-ensemble protocol: seed two differently-streamed ensembles on the
/// component, iterate, test the per-step output distributions, and estimate
/// the long-run average after burn-in.
pub fn ergodicity_protocol(
    sys: &EtcSystem,
    model: &TrafficModel,
    scc: &SccDecomposition,
    scc_id: usize,
    opts: &ErgodicOptions,
) -> Result<ErgodicReport> {
    let ens_a = seed_from_scc(sys, model, scc, scc_id, opts.n_points, opts.seed, "ensemble-a")?;
    let ens_b = seed_from_scc(sys, model, scc, scc_id, opts.n_points, opts.seed, "ensemble-b")?;
    if ens_a.points.is_empty() || ens_b.points.is_empty() {
        return Err(Error::Budget("no confirmed seeds for the component".into()));
    }
    let (_, hist_a) = iterate_ensemble(sys, &ens_a, opts.max_iters)?;
    let (_, hist_b) = iterate_ensemble(sys, &ens_b, opts.max_iters)?;
    let mut p_values = Vec::with_capacity(opts.max_iters);
    let mut converged_at = None;
    let mut run = 0usize;
    for t in 0..opts.max_iters {
        let p = cvm_two_sample(
            &hist_a.column(t),
            &hist_b.column(t),
            opts.permutations,
            opts.seed.wrapping_add(t as u64),
        )?
        .p_value;
        p_values.push(p);
        if p > opts.alpha {
            run += 1;
            if run >= opts.run_length && converged_at.is_none() {
                converged_at = Some(t + 1 - opts.run_length);
            }
        } else {
            run = 0;
        }
    }
    let burn_in = (opts.max_iters as f64 * 0.2).ceil() as usize;
    let mut per_point_means = Vec::new();
    let mut pooled_sum = 0.0;
    let mut pooled_n = 0usize;
    for hist in [&hist_a, &hist_b] {
        for h in &hist.outputs {
            let tail = &h[burn_in.min(h.len())..];
            if !tail.is_empty() {
                let s: f64 = tail.iter().sum();
                pooled_sum += s;
                pooled_n += tail.len();
                per_point_means.push(s / tail.len() as f64);
            }
        }
    }
    let pooled_average = pooled_sum / pooled_n.max(1) as f64;
    // bootstrap over points
    let mut rng = crate::rng::derive(opts.seed, "bootstrap", 1);
    let reps = 1000;
    let mut means = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut s = 0.0;
        for _ in 0..per_point_means.len() {
            s += per_point_means[rng.random_range(0..per_point_means.len())];
        }
        means.push(s / per_point_means.len() as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let ci_low = means[(0.025 * reps as f64) as usize];
    let ci_high = means[(0.975 * reps as f64) as usize];
    let verdict = if converged_at.is_some() {
        "ergodicity not rejected".to_string()
    } else {
        "inconclusive".to_string()
    };
    Ok(ErgodicReport {
        scc_id,
        n_points: ens_a.points.len().min(ens_b.points.len()),
        iterations: opts.max_iters,
        converged_at,
        p_values,
        pooled_average,
        ci_low,
        ci_high,
        burn_in,
        partial_seeding: ens_a.partial || ens_b.partial,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_do_not_reject() {
        let a = vec![0.1, 0.2, 0.2, 0.3, 0.1, 0.3];
        let r = cvm_two_sample(&a, &a, 999, 7).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        let k = ks_two_sample(&a, &a, 999, 7).unwrap();
        assert_eq!(k.statistic, 0.0);
        assert_eq!(k.p_value, 1.0);
    }

    #[test]
    fn disjoint_supports_reject() {
        let a = vec![0.1; 500];
        let b = vec![0.5; 500];
        let r = cvm_two_sample(&a, &b, 9999, 7).unwrap();
        assert!(r.p_value < 1e-3, "p = {}", r.p_value);
        let k = ks_two_sample(&a, &b, 9999, 7).unwrap();
        assert!(k.p_value < 1e-3);
    }

    #[test]
    fn empty_sample_is_an_error() {
        assert!(matches!(
            cvm_two_sample(&[], &[0.1], 99, 0),
            Err(Error::EmptySample)
        ));
    }

    #[test]
    fn permutation_p_values_are_exchangeable_valid() {
        // split one distribution in half; rejection rate at alpha = 0.05 over
        // 200 replicates should sit in [0.01, 0.10]
        let mut rejections = 0;
        for rep in 0..200 {
            let mut rng = crate::rng::derive(1234, "exchangeable", rep);
            let sample: Vec<f64> =
                (0..160).map(|_| [0.1, 0.15, 0.2, 0.25][rng.random_range(0..4)]).collect();
            let (a, b) = sample.split_at(80);
            let r = cvm_two_sample(a, b, 199, rep).unwrap();
            if r.p_value <= 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / 200.0;
        assert!((0.01..=0.10).contains(&rate), "rejection rate {rate}");
    }
}
