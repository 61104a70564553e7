//! Finite traffic abstractions of PETC: states are the feasible inter-sample
//! sequences of a fixed length, transitions follow the domino rule, and the
//! output of a state is its first inter-sample time.

use crate::feasibility::{region_feasible, Backend, Budget, OraclePolicy, Verdict};
use crate::region::isosequential_region;
use crate::system::{EtcKind, EtcSystem};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// How a state's feasibility was established.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeasibilityTag {
    /// A concrete witness exists (simulation or SAT certificate).
    Witnessed,
    /// Kept under the outer policy without a witness.
    AssumedFeasible,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelMeta {
    pub format_version: u32,
    pub l: usize,
    pub seed: u64,
    pub backend: String,
    pub policy: String,
    /// Set when a budget stopped the build before the requested depth.
    pub incomplete: bool,
}

/// The l-complete traffic model: a simple weighted transition system whose
/// edge weights equal the source output.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrafficModel {
    pub meta: ModelMeta,
    pub h: f64,
    pub k_bar: usize,
    /// Feasible k-sequences, sorted lexicographically; index is the state id.
    pub states: Vec<Vec<u16>>,
    /// Domino adjacency: successors of state i, ascending.
    pub edges: Vec<Vec<u32>>,
    /// h * first entry of each state.
    pub outputs: Vec<f64>,
    pub tags: Vec<FeasibilityTag>,
}

/// Build configuration: oracle policy and budgets, simulation seeding, state
/// budget, and the on-disk feasibility cache.
#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub policy: OraclePolicy,
    pub budget: Budget,
    /// Simulated trajectories that pre-mark observed sequences as witnessed.
    pub n_sim: usize,
    pub max_states: Option<usize>,
    pub cache_path: Option<PathBuf>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            policy: OraclePolicy::Outer,
            budget: Budget::exact(),
            n_sim: 100,
            max_states: None,
            cache_path: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CachedVerdict {
    Sat,
    Unsat,
    Unknown,
}

#[derive(Serialize, Deserialize, Default)]
struct CacheFile {
    format_version: u32,
    entries: Vec<(String, CachedVerdict)>,
}

struct Cache {
    map: HashMap<Vec<u16>, CachedVerdict>,
    path: Option<PathBuf>,
    dirty: bool,
}

impl Cache {
    fn load(path: Option<PathBuf>) -> Cache {
        let mut map = HashMap::new();
        if let Some(p) = &path {
            if let Ok(text) = std::fs::read_to_string(p) {
                if let Ok(f) = serde_json::from_str::<CacheFile>(&text) {
                    for (key, v) in f.entries {
                        let seq: Option<Vec<u16>> =
                            key.split(',').map(|t| t.parse::<u16>().ok()).collect();
                        if let Some(seq) = seq {
                            map.insert(seq, v);
                        }
                    }
                }
            }
        }
        Cache { map, path, dirty: false }
    }

    fn save(&mut self) -> Result<()> {
        if !self.dirty {
            return Ok(());
        }
        if let Some(p) = &self.path {
            let mut entries: Vec<(String, CachedVerdict)> = self
                .map
                .iter()
                .map(|(k, v)| {
                    (
                        k.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                        *v,
                    )
                })
                .collect();
            entries.sort();
            let file = CacheFile { format_version: MODEL_FORMAT_VERSION, entries };
            std::fs::write(p, serde_json::to_string(&file)?)?;
            self.dirty = false;
        }
        Ok(())
    }
}

fn seq_usize(seq: &[u16]) -> Vec<usize> {
    seq.iter().map(|&k| k as usize).collect()
}

struct Builder<'a> {
    sys: &'a EtcSystem,
    opts: &'a BuildOptions,
    cache: Cache,
    witnessed: HashSet<Vec<u16>>,
}

impl<'a> Builder<'a> {
    fn new(sys: &'a EtcSystem, opts: &'a BuildOptions, target_l: usize) -> Result<Builder<'a>> {
        let mut witnessed = HashSet::new();
        // simulation seeding: every observed prefix carries its start state as
        // a concrete feasibility witness
        for i in 0..opts.n_sim {
            let mut rng = crate::rng::derive(opts.budget.seed, "sim-seed", i as u64);
            let x0 = random_unit(sys.nx(), &mut rng);
            if let Ok(traj) = sys.simulate(&x0, target_l, true) {
                let ks: Vec<u16> =
                    traj.output_indices(sys.period()).iter().map(|&k| k as u16).collect();
                for p in 1..=ks.len() {
                    witnessed.insert(ks[..p].to_vec());
                }
            }
        }
        Ok(Builder { sys, opts, cache: Cache::load(opts.cache_path.clone()), witnessed })
    }

    /// (keep, tag) for one candidate sequence.
    fn admit(&mut self, seq: &[u16]) -> Result<Option<FeasibilityTag>> {
        if self.witnessed.contains(seq) {
            return Ok(Some(FeasibilityTag::Witnessed));
        }
        let verdict = match self.cache.map.get(seq) {
            Some(v) => *v,
            None => {
                let region = isosequential_region(self.sys, &seq_usize(seq))?;
                let v = match region_feasible(&region, &self.opts.budget)?.verdict {
                    Verdict::Sat { .. } => CachedVerdict::Sat,
                    Verdict::Unsat => CachedVerdict::Unsat,
                    Verdict::Unknown => CachedVerdict::Unknown,
                };
                self.cache.map.insert(seq.to_vec(), v);
                self.cache.dirty = true;
                v
            }
        };
        Ok(match (verdict, self.opts.policy) {
            (CachedVerdict::Sat, _) => Some(FeasibilityTag::Witnessed),
            (CachedVerdict::Unsat, _) => None,
            (CachedVerdict::Unknown, OraclePolicy::Outer) => Some(FeasibilityTag::AssumedFeasible),
            (CachedVerdict::Unknown, OraclePolicy::Inner) => None,
        })
    }

    fn extend(
        &mut self,
        states: &[Vec<u16>],
        tags: &[FeasibilityTag],
    ) -> Result<(Vec<Vec<u16>>, Vec<FeasibilityTag>)> {
        let k_bar = self.sys.k_bar() as u16;
        let mut next = Vec::new();
        let mut next_tags = Vec::new();
        for (s, _tag) in states.iter().zip(tags) {
            for k in 1..=k_bar {
                let mut cand = Vec::with_capacity(s.len() + 1);
                cand.extend_from_slice(s);
                cand.push(k);
                if let Some(t) = self.admit(&cand)? {
                    next.push(cand);
                    next_tags.push(t);
                }
            }
        }
        // lexicographic order is preserved by construction, but sort defensively
        let mut idx: Vec<usize> = (0..next.len()).collect();
        idx.sort_by(|&a, &b| next[a].cmp(&next[b]));
        Ok((
            idx.iter().map(|&i| next[i].clone()).collect(),
            idx.iter().map(|&i| next_tags[i]).collect(),
        ))
    }
}

fn random_unit(nx: usize, rng: &mut rand_chacha::ChaCha8Rng) -> nalgebra::DVector<f64> {
    use rand::Rng;
    loop {
        let v = nalgebra::DVector::from_fn(nx, |_, _| {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn domino_edges(states: &[Vec<u16>], l: usize) -> Vec<Vec<u32>> {
    if l <= 1 {
        let all: Vec<u32> = (0..states.len() as u32).collect();
        return vec![all; states.len()];
    }
    let mut by_prefix: HashMap<&[u16], Vec<u32>> = HashMap::new();
    for (i, s) in states.iter().enumerate() {
        by_prefix.entry(&s[..l - 1]).or_default().push(i as u32);
    }
    states
        .iter()
        .map(|s| by_prefix.get(&s[1..]).cloned().unwrap_or_default())
        .collect()
}

/// Remove successor-less states until none remain. A blocked state is
/// certified infeasible: every continuation of a real trajectory through it
/// would itself be a state.
fn prune_blocked(
    states: &mut Vec<Vec<u16>>,
    tags: &mut Vec<FeasibilityTag>,
    l: usize,
    cache: &mut Cache,
) {
    loop {
        let edges = domino_edges(states, l);
        let blocked: Vec<usize> =
            edges.iter().enumerate().filter(|(_, e)| e.is_empty()).map(|(i, _)| i).collect();
        if blocked.is_empty() {
            return;
        }
        for &i in blocked.iter().rev() {
            cache.map.insert(states[i].clone(), CachedVerdict::Unsat);
            cache.dirty = true;
            states.remove(i);
            tags.remove(i);
        }
    }
}

fn assemble(
    sys: &EtcSystem,
    opts: &BuildOptions,
    l: usize,
    states: Vec<Vec<u16>>,
    tags: Vec<FeasibilityTag>,
    incomplete: bool,
) -> TrafficModel {
    let edges = domino_edges(&states, l);
    let h = sys.period();
    let outputs = states.iter().map(|s| h * s[0] as f64).collect();
    TrafficModel {
        meta: ModelMeta {
            format_version: MODEL_FORMAT_VERSION,
            l,
            seed: opts.budget.seed,
            backend: match opts.budget.backend {
                Backend::Exact => "exact".into(),
                Backend::Sampling => "sampling".into(),
            },
            policy: match opts.policy {
                OraclePolicy::Outer => "outer".into(),
                OraclePolicy::Inner => "inner".into(),
            },
            incomplete,
        },
        h,
        k_bar: sys.k_bar(),
        states,
        edges,
        outputs,
        tags,
    }
}

/// Build the depth-l model by extending feasible prefixes.
pub fn build(sys: &EtcSystem, l: usize, opts: &BuildOptions) -> Result<TrafficModel> {
    if sys.kind() != EtcKind::Petc {
        return Err(Error::WrongKind("PETC"));
    }
    if l < 1 {
        return Err(Error::OutOfRange("l must be at least 1".into()));
    }
    let mut builder = Builder::new(sys, opts, l)?;
    let mut states: Vec<Vec<u16>> = Vec::new();
    let mut tags: Vec<FeasibilityTag> = Vec::new();
    for k in 1..=sys.k_bar() as u16 {
        if let Some(t) = builder.admit(&[k])? {
            states.push(vec![k]);
            tags.push(t);
        }
    }
    let mut depth = 1;
    let mut incomplete = false;
    while depth < l {
        let (next, next_tags) = builder.extend(&states, &tags)?;
        if let Some(max) = opts.max_states {
            if next.len() > max {
                incomplete = true;
                break;
            }
        }
        states = next;
        tags = next_tags;
        depth += 1;
    }
    prune_blocked(&mut states, &mut tags, depth, &mut builder.cache);
    builder.cache.save()?;
    Ok(assemble(sys, opts, depth, states, tags, incomplete))
}

/// Extend an existing model by one sequence entry (depth l -> l + 1).
pub fn refine(model: &TrafficModel, sys: &EtcSystem, opts: &BuildOptions) -> Result<TrafficModel> {
    if sys.kind() != EtcKind::Petc {
        return Err(Error::WrongKind("PETC"));
    }
    let l = model.l();
    let mut builder = Builder::new(sys, opts, l + 1)?;
    let (mut states, mut tags) = builder.extend(&model.states, &model.tags)?;
    let mut incomplete = model.meta.incomplete;
    if let Some(max) = opts.max_states {
        if states.len() > max {
            incomplete = true;
        }
    }
    prune_blocked(&mut states, &mut tags, l + 1, &mut builder.cache);
    builder.cache.save()?;
    Ok(assemble(sys, opts, l + 1, states, tags, incomplete))
}

/// True when refinement reached a fixed point: every state has exactly one
/// extension and the prefix bijection is a graph isomorphism.
pub fn refinement_fixed_point(prev: &TrafficModel, next: &TrafficModel) -> bool {
    if prev.states.len() != next.states.len() {
        return false;
    }
    // map next states to prev states by their length-l prefix
    let l = prev.l();
    let mut prefix_of = Vec::with_capacity(next.states.len());
    let mut seen = HashSet::new();
    for s in &next.states {
        let p = &s[..l];
        let id = match prev.states.binary_search_by(|q| q.as_slice().cmp(p)) {
            Ok(id) => id,
            Err(_) => return false,
        };
        if !seen.insert(id) {
            return false;
        }
        prefix_of.push(id as u32);
    }
    let mut prev_edges: Vec<(u32, u32)> = Vec::new();
    for (i, es) in prev.edges.iter().enumerate() {
        for &j in es {
            prev_edges.push((i as u32, j));
        }
    }
    let mut mapped: Vec<(u32, u32)> = Vec::new();
    for (i, es) in next.edges.iter().enumerate() {
        for &j in es {
            mapped.push((prefix_of[i], prefix_of[j as usize]));
        }
    }
    prev_edges.sort_unstable();
    mapped.sort_unstable();
    prev_edges == mapped
}

impl TrafficModel {
    pub fn l(&self) -> usize {
        self.meta.l
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Output of a state as a multiple of h.
    pub fn output_index(&self, state: usize) -> usize {
        self.states[state][0] as usize
    }

    /// Label used in DOT and human output: digits concatenated while the
    /// alphabet is single-digit, comma-separated otherwise.
    pub fn state_label(&self, state: usize) -> String {
        let s = &self.states[state];
        if self.k_bar <= 9 {
            s.iter().map(|k| k.to_string()).collect()
        } else {
            s.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
        }
    }

    /// Membership of a finite inter-sample index sequence in the model's
    /// trace set: all length-l windows must be states (shorter sequences must
    /// prefix some state).
    pub fn contains_trace(&self, ks: &[usize]) -> bool {
        let l = self.l();
        let as_u16: Vec<u16> = ks.iter().map(|&k| k as u16).collect();
        if ks.is_empty() {
            return true;
        }
        if ks.len() < l {
            // some state starts with this word
            let lo = self
                .states
                .partition_point(|s| s.as_slice() < as_u16.as_slice());
            return self
                .states
                .get(lo)
                .is_some_and(|s| s.starts_with(&as_u16));
        }
        as_u16.windows(l).all(|w| {
            self.states
                .binary_search_by(|s| s.as_slice().cmp(w))
                .is_ok()
        })
    }

    /// Same membership test on raw inter-sample times.
    pub fn contains_trace_times(&self, ys: &[f64]) -> bool {
        let mut ks = Vec::with_capacity(ys.len());
        for &y in ys {
            let k = (y / self.h).round();
            if (y - self.h * k).abs() > 1e-9 || k < 1.0 || k > self.k_bar as f64 {
                return false;
            }
            ks.push(k as usize);
        }
        self.contains_trace(&ks)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<TrafficModel> {
        let m: TrafficModel = serde_json::from_str(text)?;
        if m.meta.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model format_version {}",
                m.meta.format_version
            )));
        }
        Ok(m)
    }

    /// Graphviz export; node label shows the sequence on top and the output
    /// time below.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph traffic {\n  rankdir=LR;\n  node [shape=circle];\n");
        for i in 0..self.states.len() {
            out.push_str(&format!(
                "  s{} [label=\"{}\\n{}\"];\n",
                i,
                self.state_label(i),
                self.outputs[i]
            ));
        }
        for (i, es) in self.edges.iter().enumerate() {
            for &j in es {
                out.push_str(&format!("  s{i} -> s{j};\n"));
            }
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::system::TriggeringSpec;
    use nalgebra::DMatrix;

    pub(crate) fn petc_case(k1: f64, sigma: f64) -> EtcSystem {
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
    fn depth_one_alphabets() {
        let opts = BuildOptions::default();
        let m1 = build(&petc_case(-5.0, 0.2), 1, &opts).unwrap();
        let ks: Vec<u16> = m1.states.iter().map(|s| s[0]).collect();
        assert_eq!(ks, vec![2, 3, 4, 5, 6]);
        // depth 1 is the complete graph on the alphabet
        assert!(m1.edges.iter().all(|e| e.len() == 5));

        let m2 = build(&petc_case(-6.0, 0.2), 1, &opts).unwrap();
        assert_eq!(m2.state_count(), 7);
        let m3 = build(&petc_case(-6.0, 0.32), 1, &opts).unwrap();
        let ks: Vec<u16> = m3.states.iter().map(|s| s[0]).collect();
        assert_eq!(ks, vec![2, 3, 4, 5, 6, 7, 8, 9, 10]);
    }

    #[test]
    fn early_depths_match_reference_counts() {
        let sys = petc_case(-6.0, 0.32);
        let opts = BuildOptions::default();
        let mut m = build(&sys, 1, &opts).unwrap();
        let expected = [9usize, 34, 64, 114, 215];
        assert_eq!(m.state_count(), expected[0]);
        for target in &expected[1..] {
            m = refine(&m, &sys, &opts).unwrap();
            assert_eq!(m.state_count(), *target);
        }
        // domino well-formedness
        let l = m.l();
        for (i, es) in m.edges.iter().enumerate() {
            for &j in es {
                assert_eq!(m.states[i][1..], m.states[j as usize][..l - 1]);
            }
        }
        // non-blocking
        assert!(m.edges.iter().all(|e| !e.is_empty()));
    }

    #[test]
    fn simulated_traces_are_members() {
        let sys = petc_case(-6.0, 0.32);
        let mut m = build(&sys, 4, &BuildOptions::default()).unwrap();
        assert_eq!(m.l(), 4);
        let mut rng = crate::rng::derive(99, "trace-members", 0);
        for i in 0..200 {
            let x0 = super::random_unit(2, &mut crate::rng::derive(99, "trace-members", i));
            let traj = sys.simulate(&x0, 12, true).unwrap();
            assert!(
                m.contains_trace(&traj.output_indices(0.05)),
                "trace escaped the abstraction"
            );
        }
        let _ = &mut rng;
        // refinement never adds behaviors
        let m5 = refine(&m, &sys, &BuildOptions::default()).unwrap();
        for s in &m5.states {
            assert!(m.contains_trace(&seq_usize(s)));
        }
        m = m5;
        assert_eq!(m.l(), 5);
    }

    #[test]
    fn non_members_are_rejected() {
        let sys = petc_case(-6.0, 0.32);
        let m = build(&sys, 3, &BuildOptions::default()).unwrap();
        // k = 1 is infeasible at depth 1
        assert!(!m.contains_trace(&[1, 2, 2]));
        assert!(!m.contains_trace_times(&[0.3, 0.33]));
        assert!(m.contains_trace_times(&[0.1]));
    }

    #[test]
    fn serialization_round_trip_is_stable() {
        let sys = petc_case(-6.0, 0.2);
        let m = build(&sys, 3, &BuildOptions::default()).unwrap();
        let j1 = m.to_json().unwrap();
        let back = TrafficModel::from_json(&j1).unwrap();
        assert_eq!(m, back);
        assert_eq!(j1, back.to_json().unwrap());
        let dot = m.to_dot();
        assert!(dot.contains("digraph"));
        assert!(dot.contains("\\n0.1"));
    }

    #[test]
    fn determinism_across_rebuilds() {
        let sys = petc_case(-6.0, 0.32);
        let opts = BuildOptions { budget: Budget { seed: 42, ..Budget::exact() }, ..Default::default() };
        let a = build(&sys, 4, &opts).unwrap().to_json().unwrap();
        let b = build(&sys, 4, &opts).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cache_round_trip_preserves_the_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        let sys = petc_case(-6.0, 0.32);
        let opts = BuildOptions { cache_path: Some(path.clone()), ..Default::default() };
        let a = build(&sys, 3, &opts).unwrap();
        assert!(path.exists());
        let b = build(&sys, 3, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn budget_exhaustion_flags_incomplete() {
        let sys = petc_case(-6.0, 0.32);
        let opts = BuildOptions { max_states: Some(50), ..Default::default() };
        let m = build(&sys, 6, &opts).unwrap();
        assert!(m.meta.incomplete);
        assert!(m.l() < 6);
    }

    #[test]
    fn sampling_policy_over_approximates() {
        let sys = petc_case(-6.0, 0.32);
        let exact = build(&sys, 4, &BuildOptions::default()).unwrap();
        let opts = BuildOptions {
            budget: Budget::sampling(7),
            policy: OraclePolicy::Outer,
            ..Default::default()
        };
        let sampled = build(&sys, 4, &opts).unwrap();
        for s in &exact.states {
            assert!(
                sampled
                    .states
                    .binary_search_by(|q| q.as_slice().cmp(s.as_slice()))
                    .is_ok(),
                "outer sampling dropped a feasible state"
            );
        }
    }
}
