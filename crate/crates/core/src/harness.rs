//! Experiment configurations, command runners and CSV/JSON result files.
//!
//! Every CSV starts with a comment line `# mfc <version> config_sha256=<hash>`
//! followed by the column header. CSV bodies depend only on the configuration
//! and the seed; wall-clock timings go to `summary.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{
    certify, class_bound, joint_bound, loose_bound_class_via_joint, loose_bound_joint_via_class, marginal_bound,
    measure_gap, BoundConstants, CertifyOptions, LemmaCheck, LemmaReport,
};
use crate::distributions::{ClassWeights, JointDist};
use crate::env_model::{BuiltinEnv, CongestionParams, Dims, EnvSpec, Regime, SisParams, UniformEnv};
use crate::error::{MfcError, Result};
use crate::nagent_sim::{deviation_estimate, AgentState, BernoulliInstance, DeviationKind};
use crate::npg::{fisher_diagnostics, npg_train, FisherDiagnostics, NpgConfig, OccupancyOptions};
use crate::policy::{FixedPolicy, PolicyArch, PolicyParams};
use crate::stats::{derive_seed, log_log_slope, stream_rng, McEstimate};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// The five runnable commands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    VerifyAppendixM,
    GapSweep,
    LemmaCertify,
    NpgRun,
    BoundTable,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::VerifyAppendixM => "verify-appendix-m",
            CommandKind::GapSweep => "gap-sweep",
            CommandKind::LemmaCertify => "lemma-certify",
            CommandKind::NpgRun => "npg-run",
            CommandKind::BoundTable => "bound-table",
        }
    }
}

/// A configuration document. The `command` key selects the variant and
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    VerifyAppendixM(DeviationCheckConfig),
    GapSweep(GapSweepConfig),
    LemmaCertify(LemmaCertifyConfig),
    NpgRun(NpgRunConfig),
    BoundTable(BoundTableConfig),
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| MfcError::ConfigError(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| MfcError::ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn kind(&self) -> CommandKind {
        match self {
            ExperimentConfig::VerifyAppendixM(_) => CommandKind::VerifyAppendixM,
            ExperimentConfig::GapSweep(_) => CommandKind::GapSweep,
            ExperimentConfig::LemmaCertify(_) => CommandKind::LemmaCertify,
            ExperimentConfig::NpgRun(_) => CommandKind::NpgRun,
            ExperimentConfig::BoundTable(_) => CommandKind::BoundTable,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ExperimentConfig::VerifyAppendixM(c) => c.seed,
            ExperimentConfig::GapSweep(c) => c.seed,
            ExperimentConfig::LemmaCertify(c) => c.seed,
            ExperimentConfig::NpgRun(c) => c.seed,
            ExperimentConfig::BoundTable(c) => c.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::VerifyAppendixM(c) => c.seed = seed,
            ExperimentConfig::GapSweep(c) => c.seed = seed,
            ExperimentConfig::LemmaCertify(c) => c.seed = seed,
            ExperimentConfig::NpgRun(c) => c.seed = seed,
            ExperimentConfig::BoundTable(c) => c.seed = seed,
        }
    }

    /// Hex SHA-256 of the canonical JSON serialisation.
    pub fn sha256(&self) -> String {
        let text = serde_json::to_string(self).expect("configuration serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Initial policy parameters. The policy architecture follows the model's
/// regime.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyInit {
    /// All-zero tabular parameters without distribution features.
    #[default]
    Uniform,
    /// Entries uniform on `[-scale, scale]`, drawn from a stream derived
    /// from the run seed.
    Random {
        scale: f64,
        #[serde(default)]
        mu_features: bool,
    },
    Params {
        params: PolicyParams,
    },
}

const POLICY_TAG: u64 = 1;

impl PolicyInit {
    pub fn build(&self, env: &EnvSpec, seed: u64) -> Result<PolicyParams> {
        let d = env.dims();
        let params = match self {
            PolicyInit::Uniform => PolicyParams::zeros(PolicyArch::new(env.regime(), d, false)),
            PolicyInit::Random { scale, mu_features } => {
                let mut rng = stream_rng(derive_seed(seed, POLICY_TAG), 0);
                PolicyParams::random(PolicyArch::new(env.regime(), d, *mu_features), *scale, &mut rng)
            }
            PolicyInit::Params { params } => params.clone(),
        };
        let a = params.arch();
        if (a.nk, a.nx, a.nu) != (d.nk, d.nx, d.nu) || a.regime != env.regime() {
            return Err(MfcError::ConfigError("policy parameters do not fit the model".into()));
        }
        Ok(params)
    }
}

/// Mean-field initial distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialDist {
    /// Every class spread uniformly over the states.
    #[default]
    Uniform,
    /// Every agent in the given state.
    State(usize),
}

impl InitialDist {
    pub fn build(&self, nx: usize, weights: &ClassWeights) -> Result<JointDist> {
        match *self {
            InitialDist::Uniform => Ok(JointDist::uniform(nx, weights)),
            InitialDist::State(x) => dirac_joint(nx, weights, x),
        }
    }
}

fn dirac_joint(nx: usize, weights: &ClassWeights, x: usize) -> Result<JointDist> {
    if x >= nx {
        return Err(MfcError::ConfigError(format!("initial state {x} is not below {nx}")));
    }
    let mut values = vec![0.0; nx * weights.nk()];
    for (k, t) in weights.theta().iter().enumerate() {
        values[x * weights.nk() + k] = *t;
    }
    JointDist::new(nx, weights.nk(), values)
}

/// Agents all placed in state `x`.
fn agents_at(nx: usize, weights: &ClassWeights, x: usize) -> Result<AgentState> {
    let states = weights.pops().iter().map(|&n| vec![x; n]).collect();
    AgentState::new(states, nx, weights.clone())
}

/// Result of one command.
#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub command: CommandKind,
    pub passed: bool,
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

/// Output directory with the provenance line shared by its CSV files.
pub struct OutputDir {
    dir: PathBuf,
    banner: String,
    files: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(dir: &Path, config: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            banner: format!("# mfc {VERSION} config_sha256={}", config.sha256()),
            files: Vec::new(),
        })
    }

    pub fn csv<S: Serialize>(&mut self, name: &str, rows: &[S]) -> Result<()> {
        let path = self.dir.join(name);
        let mut file = fs::File::create(&path)?;
        writeln!(file, "{}", self.banner)?;
        let mut w = csv::Writer::from_writer(file);
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        self.files.push(path);
        Ok(())
    }

    pub fn json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<()> {
        let path = self.dir.join(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text)?;
        self.files.push(path);
        Ok(())
    }
}

/// Loads `config_path`, checks that it is a `command` document, applies the
/// seed override and runs it, writing results into `out`.
pub fn execute(command: CommandKind, config_path: &Path, out: &Path, seed: Option<u64>) -> Result<RunOutcome> {
    let mut config = ExperimentConfig::load(config_path)?;
    if config.kind() != command {
        return Err(MfcError::ConfigError(format!(
            "configuration is for {}, not {}",
            config.kind().name(),
            command.name()
        )));
    }
    if let Some(s) = seed {
        config.set_seed(s);
    }
    run(&config, out)
}

/// Runs a parsed configuration, writing results into `out`.
pub fn run(config: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let mut dir = OutputDir::create(out, config)?;
    dir.json("config.json", config)?;
    let start = Instant::now();
    let (passed, mut summary) = match config {
        ExperimentConfig::VerifyAppendixM(c) => {
            let rows = run_deviation_check(c)?;
            dir.csv("deviation_check.csv", &rows)?;
            let passed = rows.iter().all(|r| r.pass);
            (passed, serde_json::json!({ "rows": rows }))
        }
        ExperimentConfig::GapSweep(c) => {
            let sweep = run_gap_sweep(c)?;
            dir.csv("gap_sweep.csv", &sweep.rows)?;
            dir.csv("gap_slope.csv", &sweep.slopes)?;
            let passed = sweep.passed();
            (passed, serde_json::to_value(&sweep)?)
        }
        ExperimentConfig::LemmaCertify(c) => {
            let table = run_lemma_certify(c)?;
            dir.csv("lemma_certify.csv", &table.rows)?;
            if !table.bernoulli.is_empty() {
                dir.csv("bernoulli.csv", &table.bernoulli)?;
            }
            let passed = table.passed();
            (passed, serde_json::to_value(&table)?)
        }
        ExperimentConfig::NpgRun(c) => {
            let run = run_npg(c)?;
            dir.csv("iterates.csv", &run.rows)?;
            dir.json("policies.json", &run.policies)?;
            if let Some(last) = run.policies.last() {
                dir.json("policy_final.json", last)?;
            }
            let passed = run.passed;
            (passed, serde_json::to_value(&run.summary)?)
        }
        ExperimentConfig::BoundTable(c) => {
            let rows = run_bound_table(c)?;
            dir.csv("bound_table.csv", &rows)?;
            (true, serde_json::json!({ "rows": rows.len() }))
        }
    };
    if let serde_json::Value::Object(map) = &mut summary {
        map.insert("passed".into(), passed.into());
        map.insert("version".into(), VERSION.into());
        map.insert("config_sha256".into(), config.sha256().into());
        map.insert("wall_time_s".into(), start.elapsed().as_secs_f64().into());
    }
    dir.json("summary.json", &summary)?;
    Ok(RunOutcome {
        command: config.kind(),
        passed,
        files: dir.files,
        summary,
    })
}

/// Process exit code: 0 pass, 1 failed check, 2 configuration error,
/// 3 divergence.
pub fn exit_code(result: &Result<RunOutcome>) -> i32 {
    match result {
        Ok(o) if o.passed => 0,
        Ok(_) => 1,
        Err(MfcError::DivergedInnerLoop { .. }) | Err(MfcError::HorizonCapHit { .. }) => 3,
        Err(_) => 2,
    }
}

/// Which deviation the counterexample measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationSetup {
    /// One state, `size` actions, uniform policy: `E|ν^N - ν^MF|`.
    Action,
    /// `size` states, one action, uniform kernel: `E|μ^N_1 - P^MF|`.
    State,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviationCheckConfig {
    pub seed: u64,
    #[serde(default = "default_setups")]
    pub setups: Vec<DeviationSetup>,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_deviation_pop")]
    pub n_pop: usize,
    #[serde(default = "default_deviation_trials")]
    pub trials: usize,
    /// Whether the estimate is expected to exceed `√(8/N)`.
    #[serde(default = "default_true")]
    pub expect_counterexample: bool,
}

fn default_setups() -> Vec<DeviationSetup> {
    vec![DeviationSetup::Action, DeviationSetup::State]
}
fn default_size() -> usize {
    32
}
fn default_deviation_pop() -> usize {
    200
}
fn default_deviation_trials() -> usize {
    100_000
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviationCheckRow {
    pub setup: DeviationSetup,
    pub nx: usize,
    pub nu: usize,
    pub n_pop: usize,
    pub trials: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `√(8/N)`.
    pub claimed_bound: f64,
    /// `√(|U|/N)` for the action setup, `(2 + L_P) √(|X||U|/N)` for the state setup.
    pub correct_bound: f64,
    pub exceeds_claimed: bool,
    pub within_correct: bool,
    pub pass: bool,
}

pub fn run_deviation_check(c: &DeviationCheckConfig) -> Result<Vec<DeviationCheckRow>> {
    if c.size == 0 || c.n_pop == 0 || c.trials < 2 || c.setups.is_empty() {
        return Err(MfcError::ConfigError(
            "size, n_pop, setups must be nonempty and trials ≥ 2".into(),
        ));
    }
    c.setups
        .iter()
        .enumerate()
        .map(|(i, &setup)| {
            let dims = match setup {
                DeviationSetup::Action => Dims {
                    nx: 1,
                    nu: c.size,
                    nk: 1,
                },
                DeviationSetup::State => Dims {
                    nx: c.size,
                    nu: 1,
                    nk: 1,
                },
            };
            let env = EnvSpec::new(UniformEnv { dims }, 0.0)?;
            let policy = FixedPolicy::uniform(dims, Regime::Joint);
            let weights = ClassWeights::new(vec![c.n_pop])?;
            let config = agents_at(dims.nx, &weights, 0)?;
            let kind = match setup {
                DeviationSetup::Action => DeviationKind::Action,
                DeviationSetup::State => DeviationKind::State,
            };
            let est = deviation_estimate(
                &env,
                &policy,
                &config,
                kind,
                Regime::Joint,
                c.trials,
                derive_seed(c.seed, i as u64),
            )?;
            let n = c.n_pop as f64;
            let claimed_bound = (8.0 / n).sqrt();
            let correct_bound = match setup {
                DeviationSetup::Action => (dims.nu as f64 / n).sqrt(),
                DeviationSetup::State => (2.0 + env.constants().l_p) * ((dims.nx * dims.nu) as f64 / n).sqrt(),
            };
            let exceeds_claimed = est.mean > claimed_bound;
            let within_correct = est.mean <= correct_bound;
            Ok(DeviationCheckRow {
                setup,
                nx: dims.nx,
                nu: dims.nu,
                n_pop: c.n_pop,
                trials: c.trials,
                estimate: est.mean,
                stderr: est.stderr,
                ci_low: est.ci_low,
                ci_high: est.ci_high,
                claimed_bound,
                correct_bound,
                exceeds_claimed,
                within_correct,
                pass: within_correct && exceeds_claimed == c.expect_counterexample,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapSweepConfig {
    pub seed: u64,
    pub env: BuiltinEnv,
    pub gamma: f64,
    #[serde(default)]
    pub policy: PolicyInit,
    /// Class sizes at each sweep point.
    pub populations: Vec<Vec<usize>>,
    pub reps: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Every agent starts in this state.
    #[serde(default)]
    pub initial_state: usize,
    /// Accepted range of the log-log slope of `E|V^N - v^MF|` against `N`.
    #[serde(default)]
    pub slope_range: Option<[f64; 2]>,
}

fn default_tol() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapRow {
    pub n_pop: usize,
    pub pops: String,
    pub horizon: usize,
    pub v_mf: f64,
    pub v_n_mean: f64,
    pub v_n_stderr: f64,
    pub gap: f64,
    pub pathwise_gap: f64,
    pub pathwise_stderr: f64,
    pub bound: Option<f64>,
    pub within_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeRow {
    pub measure: String,
    pub slope: f64,
    pub in_range: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapSweep {
    pub rows: Vec<GapRow>,
    pub slopes: Vec<SlopeRow>,
}

impl GapSweep {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.within_bound) && self.slopes.iter().all(|s| s.in_range != Some(false))
    }

    pub fn slope(&self, measure: &str) -> Option<f64> {
        self.slopes.iter().find(|s| s.measure == measure).map(|s| s.slope)
    }
}

fn join_pops(pops: &[usize]) -> String {
    pops.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(";")
}

pub fn run_gap_sweep(c: &GapSweepConfig) -> Result<GapSweep> {
    if c.populations.is_empty() || c.reps < 2 {
        return Err(MfcError::ConfigError(
            "gap sweep needs populations and at least two reps".into(),
        ));
    }
    let env = c.env.build(c.gamma)?;
    let policy = PolicyInit::build(&c.policy, &env, c.seed)?;
    let nx = env.dims().nx;
    let mut rows = Vec::with_capacity(c.populations.len());
    for (i, pops) in c.populations.iter().enumerate() {
        let weights = ClassWeights::new(pops.clone())?;
        let x0 = agents_at(nx, &weights, c.initial_state)?;
        let mu0 = dirac_joint(nx, &weights, c.initial_state)?;
        let r = measure_gap(&env, &policy, &x0, &mu0, c.reps, c.tol, derive_seed(c.seed, i as u64))?;
        rows.push(GapRow {
            n_pop: r.n_pop,
            pops: join_pops(&r.pops),
            horizon: r.horizon,
            v_mf: r.v_mf,
            v_n_mean: r.v_n.mean,
            v_n_stderr: r.v_n.stderr,
            gap: r.gap,
            pathwise_gap: r.pathwise_gap.mean,
            pathwise_stderr: r.pathwise_gap.stderr,
            bound: r.bound,
            within_bound: r.within_bound(),
        });
    }
    let mut slopes = Vec::new();
    if rows.len() >= 2 {
        let n: Vec<f64> = rows.iter().map(|r| r.n_pop as f64).collect();
        let pathwise: Vec<f64> = rows.iter().map(|r| r.pathwise_gap).collect();
        let slope = log_log_slope(&n, &pathwise);
        slopes.push(SlopeRow {
            measure: "pathwise_gap".into(),
            slope,
            in_range: c.slope_range.map(|[lo, hi]| (lo..=hi).contains(&slope)),
        });
        if rows.iter().all(|r| r.gap > 0.0) {
            let gap: Vec<f64> = rows.iter().map(|r| r.gap).collect();
            slopes.push(SlopeRow {
                measure: "gap".into(),
                slope: log_log_slope(&n, &gap),
                in_range: None,
            });
        }
    }
    Ok(GapSweep { rows, slopes })
}

/// Sweep of the weighted Bernoulli deviation inequality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BernoulliSweep {
    pub instances: usize,
    /// Largest of `M`, `N` and `S`.
    pub max_dim: usize,
    pub trials: usize,
    #[serde(default = "default_c_bound")]
    pub c_bound: f64,
}

fn default_c_bound() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaCertifyConfig {
    pub seed: u64,
    #[serde(default = "default_certify_gamma")]
    pub gamma: f64,
    /// Models to certify; all built-in models when absent.
    #[serde(default)]
    pub envs: Option<Vec<BuiltinEnv>>,
    /// Checks to run; all checks that apply to a model when absent.
    #[serde(default)]
    pub checks: Option<Vec<LemmaCheck>>,
    pub instances: usize,
    pub trials: usize,
    #[serde(default = "default_max_class_size")]
    pub max_class_size: usize,
    #[serde(default = "default_policy_scale")]
    pub policy_scale: f64,
    #[serde(default)]
    pub bernoulli: Option<BernoulliSweep>,
}

fn default_certify_gamma() -> f64 {
    0.5
}
fn default_max_class_size() -> usize {
    12
}
fn default_policy_scale() -> f64 {
    2.0
}

/// One model of every built-in kind at a small size.
pub fn builtin_suite() -> Vec<BuiltinEnv> {
    let congestion = CongestionParams {
        nx: 4,
        nu: 4,
        nk: 2,
        cost: vec![0.5, 1.0],
        mixing: 0.3,
        interaction: None,
        base_reward: None,
        base_kernel: None,
    };
    vec![
        BuiltinEnv::Constant {
            nx: 3,
            nu: 2,
            nk: 2,
            value: 0.7,
        },
        BuiltinEnv::Uniform { nx: 1, nu: 32, nk: 1 },
        BuiltinEnv::Uniform { nx: 32, nu: 1, nk: 1 },
        BuiltinEnv::Cycle { nx: 4, nu: 2, nk: 2 },
        BuiltinEnv::Bandit {
            nx: 2,
            nk: 1,
            arm_rewards: vec![0.2, 0.8],
        },
        BuiltinEnv::Congestion(congestion.clone()),
        BuiltinEnv::MarginalCongestion(CongestionParams {
            nk: 3,
            cost: vec![0.5, 1.0, 0.75],
            ..congestion
        }),
        BuiltinEnv::SisEpidemic(SisParams::two_class()),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LemmaRow {
    pub env: String,
    pub check: String,
    pub instances: usize,
    pub violations: usize,
    pub worst_ratio: f64,
    pub pass: bool,
}

impl From<LemmaReport> for LemmaRow {
    fn from(r: LemmaReport) -> Self {
        LemmaRow {
            pass: r.pass(),
            env: r.env,
            check: r.check.name(),
            instances: r.instances,
            violations: r.violations,
            worst_ratio: r.worst_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BernoulliRow {
    pub instance: usize,
    pub m: usize,
    pub n: usize,
    pub s: usize,
    pub lhs_exact: Option<f64>,
    pub lhs_mc: f64,
    pub lhs_mc_stderr: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LemmaTable {
    pub rows: Vec<LemmaRow>,
    pub bernoulli: Vec<BernoulliRow>,
}

impl LemmaTable {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass) && self.bernoulli.iter().all(|r| r.pass)
    }
}

const BERNOULLI_TAG: u64 = 1 << 20;

pub fn run_lemma_certify(c: &LemmaCertifyConfig) -> Result<LemmaTable> {
    if c.instances == 0 || c.trials < 2 {
        return Err(MfcError::ConfigError(
            "instances must be positive and trials ≥ 2".into(),
        ));
    }
    let envs = c.envs.clone().unwrap_or_else(builtin_suite);
    let mut rows = Vec::new();
    for (i, spec) in envs.iter().enumerate() {
        let env = spec.build(c.gamma)?;
        let d = env.dims();
        let opts = CertifyOptions {
            instances: c.instances,
            trials: c.trials,
            max_class_size: c.max_class_size,
            policy_scale: c.policy_scale,
            seed: derive_seed(c.seed, i as u64),
        };
        let checks: Vec<LemmaCheck> = match &c.checks {
            Some(list) => list.iter().copied().filter(|k| k.applies_to(env.regime())).collect(),
            None => LemmaCheck::ALL
                .iter()
                .copied()
                .filter(|k| k.applies_to(env.regime()))
                .collect(),
        };
        for check in checks {
            let mut row: LemmaRow = certify(&env, check, &opts)?.into();
            row.env = format!("{}[{}x{}x{}]", row.env, d.nx, d.nu, d.nk);
            rows.push(row);
        }
    }
    let mut bernoulli = Vec::new();
    if let Some(b) = c.bernoulli {
        if b.max_dim == 0 || b.trials < 2 {
            return Err(MfcError::ConfigError(
                "bernoulli sweep needs max_dim ≥ 1 and trials ≥ 2".into(),
            ));
        }
        for i in 0..b.instances {
            let mut rng = stream_rng(derive_seed(c.seed, BERNOULLI_TAG), i as u64);
            let m = rng.random_range(1..=b.max_dim);
            let n = rng.random_range(1..=b.max_dim);
            let s = rng.random_range(1..=b.max_dim);
            let inst = BernoulliInstance::random(m, n, s, b.c_bound, &mut rng)?;
            let lhs_exact = if m * n <= 16 { Some(inst.lhs_exact()?) } else { None };
            let mc: McEstimate = inst.lhs_mc(b.trials, &mut rng);
            let rhs = inst.rhs();
            let pass = mc.lower3() <= rhs && lhs_exact.is_none_or(|e| e <= rhs * (1.0 + 1e-12));
            bernoulli.push(BernoulliRow {
                instance: i,
                m,
                n,
                s,
                lhs_exact,
                lhs_mc: mc.mean,
                lhs_mc_stderr: mc.stderr,
                rhs,
                pass,
            });
        }
    }
    Ok(LemmaTable { rows, bernoulli })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpgRunConfig {
    pub seed: u64,
    pub env: BuiltinEnv,
    pub gamma: f64,
    #[serde(default)]
    pub policy: PolicyInit,
    #[serde(default)]
    pub initial: InitialDist,
    /// Class sizes fixing the class priors; equal classes when absent.
    #[serde(default)]
    pub populations: Option<Vec<usize>>,
    pub eta: f64,
    pub alpha: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    #[serde(default)]
    pub occupancy: OccupancyOptions,
    #[serde(default = "default_tol")]
    pub value_tol: f64,
    /// Occupancy samples for the Fisher and score diagnostics of the final
    /// iterate; skipped when zero.
    #[serde(default)]
    pub fisher_samples: usize,
    /// The run fails when the mean iterate value is below this.
    #[serde(default)]
    pub min_mean_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterateRow {
    pub j: usize,
    pub value: f64,
    pub w_norm: f64,
    pub capped_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NpgSummary {
    pub initial_value: f64,
    pub mean_value: f64,
    pub final_value: f64,
    /// Milliseconds since the start of training after each outer iteration.
    pub iterate_wall_time_ms: Vec<f64>,
    pub fisher: Option<FisherDiagnostics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpgRun {
    pub rows: Vec<IterateRow>,
    pub policies: Vec<PolicyParams>,
    pub summary: NpgSummary,
    pub passed: bool,
}

pub fn run_npg(c: &NpgRunConfig) -> Result<NpgRun> {
    if !(c.eta >= 0.0 && c.alpha > 0.0) || c.outer_iters == 0 || c.inner_iters == 0 {
        return Err(MfcError::ConfigError(
            "need eta ≥ 0, alpha > 0 and positive iteration counts".into(),
        ));
    }
    let env = c.env.build(c.gamma)?;
    let d = env.dims();
    let weights = match &c.populations {
        Some(p) => ClassWeights::new(p.clone())?,
        None => ClassWeights::equal(d.nk, 1)?,
    };
    if weights.nk() != d.nk {
        return Err(MfcError::ConfigError(
            "populations do not match the number of classes".into(),
        ));
    }
    let mu0 = c.initial.build(d.nx, &weights)?;
    let phi0 = c.policy.build(&env, c.seed)?;
    let cfg = NpgConfig {
        eta: c.eta,
        alpha: c.alpha,
        outer_iters: c.outer_iters,
        inner_iters: c.inner_iters,
        occupancy: c.occupancy,
        value_tol: c.value_tol,
        seed: c.seed,
    };
    let report = npg_train(&env, &phi0, &mu0, &cfg)?;
    let fisher = match (c.fisher_samples, report.final_params()) {
        (0, _) | (_, None) => None,
        (n, Some(phi)) => Some(fisher_diagnostics(&env, phi, &mu0, n, derive_seed(c.seed, 1))?),
    };
    let mean_value = report.mean_value();
    let passed = c.min_mean_value.is_none_or(|m| mean_value >= m);
    Ok(NpgRun {
        rows: report
            .diagnostics
            .iter()
            .map(|d| IterateRow {
                j: d.j,
                value: d.value,
                w_norm: d.w_norm,
                capped_samples: d.capped_samples,
            })
            .collect(),
        summary: NpgSummary {
            initial_value: report.initial_value,
            mean_value,
            final_value: report.diagnostics.last().map_or(report.initial_value, |d| d.value),
            iterate_wall_time_ms: report.diagnostics.iter().map(|d| d.wall_time_ms).collect(),
            fisher,
        },
        policies: report.snapshot.iterates,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundTableConfig {
    pub seed: u64,
    pub env: BuiltinEnv,
    pub gamma: f64,
    #[serde(default)]
    pub policy: PolicyInit,
    pub populations: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub n_pop: usize,
    pub pops: String,
    pub k: usize,
    pub gamma: f64,
    pub m_r: f64,
    pub l_r: f64,
    pub l_p: f64,
    pub l_q: f64,
    pub s_r: f64,
    pub s_p: f64,
    pub joint: Option<f64>,
    pub class: Option<f64>,
    pub marginal: Option<f64>,
    pub loose_class_via_joint: Option<f64>,
    pub loose_joint_via_class: Option<f64>,
}

fn valid(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MfcError::BoundInvalid { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn run_bound_table(c: &BoundTableConfig) -> Result<Vec<BoundRow>> {
    if c.populations.is_empty() {
        return Err(MfcError::ConfigError("bound table needs populations".into()));
    }
    let env = c.env.build(c.gamma)?;
    let policy = c.policy.build(&env, c.seed)?;
    c.populations
        .iter()
        .map(|pops| {
            let k = BoundConstants::from_env(&env, &policy, pops)?;
            Ok(BoundRow {
                n_pop: pops.iter().sum(),
                pops: join_pops(pops),
                k: pops.len(),
                gamma: k.gamma,
                m_r: k.m_r,
                l_r: k.l_r,
                l_p: k.l_p,
                l_q: k.l_q,
                s_r: k.s_r(),
                s_p: k.s_p(),
                joint: valid(joint_bound(&k))?,
                class: valid(class_bound(&k))?,
                marginal: valid(marginal_bound(&k))?,
                loose_class_via_joint: valid(loose_bound_class_via_joint(&k))?,
                loose_joint_via_class: valid(loose_bound_joint_via_class(&k))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let ok = r#"{"command":"verify-appendix-m","seed":1}"#;
        assert!(matches!(
            ExperimentConfig::parse(ok).unwrap(),
            ExperimentConfig::VerifyAppendixM(_)
        ));
        let bad = r#"{"command":"verify-appendix-m","seed":1,"trails":10}"#;
        assert!(matches!(ExperimentConfig::parse(bad), Err(MfcError::ConfigError(_))));
        let missing = r#"{"command":"verify-appendix-m"}"#;
        assert!(ExperimentConfig::parse(missing).is_err());
    }

    #[test]
    fn hash_changes_with_seed() {
        let mut c = ExperimentConfig::parse(r#"{"command":"verify-appendix-m","seed":1}"#).unwrap();
        let h1 = c.sha256();
        c.set_seed(2);
        assert_ne!(h1, c.sha256());
        assert_eq!(h1.len(), 64);
    }

    #[test]
    fn builtin_suite_builds() {
        for e in builtin_suite() {
            e.build(0.5).unwrap();
        }
    }
}
