//! Run configuration: one strict JSON document describing the system, the
//! analysis knobs, and output preferences. Unknown keys are rejected.

use anyhow::{bail, Context};
use etc_traffic::feasibility::{Backend, Budget, OraclePolicy};
use etc_traffic::smt::SmtConfig;
use etc_traffic::traffic::BuildOptions;
use etc_traffic::{EtcKind, EtcSystem, Tolerances, TriggeringSpec};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub system: SystemConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub kind: KindConfig,
    /// Row-major matrices.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub trigger: TriggerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    pub tau_bar: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum KindConfig {
    Petc,
    Cetc,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TriggerConfig {
    TabuadaRelative {
        sigma: f64,
    },
    MazoLyapunov {
        p: Vec<Vec<f64>>,
        rho: f64,
    },
    /// Constant triggering matrix (2 n_x x 2 n_x), optional derivative.
    GeneralQuadratic {
        q: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        qdot: Option<Vec<Vec<f64>>>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub l_max: usize,
    pub backend: BackendConfig,
    pub policy: PolicyConfig,
    pub samples: usize,
    pub seed: u64,
    /// Simulation trajectories used to pre-witness sequences.
    pub n_sim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_states: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<String>,
    pub tolerances: ToleranceConfig,
    pub ergodic: ErgodicConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            l_max: 10,
            backend: BackendConfig::Exact,
            policy: PolicyConfig::Outer,
            samples: 20_000,
            seed: 0,
            n_sim: 100,
            max_states: None,
            cache: None,
            tolerances: ToleranceConfig::default(),
            ergodic: ErgodicConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum BackendConfig {
    Exact,
    Sampling,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PolicyConfig {
    Outer,
    Inner,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psd_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cetc_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cetc_grid: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strict_margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angle_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_max: Option<u64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ErgodicConfig {
    pub n_points: usize,
    pub max_iters: usize,
    pub alpha: f64,
    pub permutations: usize,
}

impl Default for ErgodicConfig {
    fn default() -> Self {
        ErgodicConfig { n_points: 1000, max_iters: 30, alpha: 0.05, permutations: 9999 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    pub format: FormatConfig,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: ".".into(), format: FormatConfig::Json }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FormatConfig {
    Json,
    Csv,
    Dot,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> anyhow::Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        bail!("matrix {what} is empty");
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        bail!("matrix {what} has ragged rows");
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).context("parsing config")?;
        if cfg.format_version != CONFIG_FORMAT_VERSION {
            bail!("unsupported config format_version {}", cfg.format_version);
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> anyhow::Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn tolerances(&self) -> Tolerances {
        let t = &self.analysis.tolerances;
        let mut out = Tolerances::default();
        if let Some(v) = t.psd_tol {
            out.psd_tol = v;
        }
        if let Some(v) = t.cetc_tol {
            out.cetc_tol = v;
        }
        if let Some(v) = t.cetc_grid {
            out.cetc_grid = v;
        }
        if let Some(v) = t.strict_margin {
            out.strict_margin = v;
        }
        if let Some(v) = t.angle_tol {
            out.angle_tol = v;
        }
        if let Some(v) = t.q_max {
            out.q_max = v;
        }
        out
    }

    pub fn system(&self) -> anyhow::Result<EtcSystem> {
        let s = &self.system;
        let a = matrix(&s.a, "A")?;
        let b = matrix(&s.b, "B")?;
        let k = matrix(&s.k, "K")?;
        let nx = a.nrows();
        let trigger = match &s.trigger {
            TriggerConfig::TabuadaRelative { sigma } => {
                TriggeringSpec::TabuadaRelative { sigma: *sigma }
            }
            TriggerConfig::MazoLyapunov { p, rho } => {
                TriggeringSpec::MazoLyapunov { p: matrix(p, "P")?, rho: *rho }
            }
            TriggerConfig::GeneralQuadratic { q, qdot } => {
                let qm = matrix(q, "Q")?;
                if qm.nrows() != 2 * nx || qm.ncols() != 2 * nx {
                    bail!("Q must be {0}x{0}", 2 * nx);
                }
                let qd = qdot.as_ref().map(|m| matrix(m, "Qdot")).transpose()?;
                let qm2 = qm.clone();
                TriggeringSpec::GeneralQuadratic {
                    q: std::sync::Arc::new(move |_s| qm2.clone()),
                    qdot: qd.map(|m| {
                        let m2 = m.clone();
                        std::sync::Arc::new(move |_s: f64| m2.clone())
                            as std::sync::Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>
                    }),
                }
            }
        };
        let kind = match s.kind {
            KindConfig::Petc => EtcKind::Petc,
            KindConfig::Cetc => EtcKind::Cetc,
        };
        EtcSystem::new(kind, a, b, k, trigger, s.h, s.tau_bar, self.tolerances())
            .map_err(anyhow::Error::from)
    }

    pub fn budget(&self) -> Budget {
        Budget {
            backend: match self.analysis.backend {
                BackendConfig::Exact => Backend::Exact,
                BackendConfig::Sampling => Backend::Sampling,
            },
            samples: self.analysis.samples,
            seed: self.analysis.seed,
            strict_margin: self.tolerances().strict_margin,
            smt: SmtConfig::from_env(),
        }
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            policy: match self.analysis.policy {
                PolicyConfig::Outer => OraclePolicy::Outer,
                PolicyConfig::Inner => OraclePolicy::Inner,
            },
            budget: self.budget(),
            n_sim: self.analysis.n_sim,
            max_states: self.analysis.max_states,
            cache_path: self.analysis.cache.as_ref().map(Into::into),
        }
    }
}
