//! Scenario configuration: one JSON document, every field optional.
//!
//! Defaults reproduce the acceptance scenarios at full size; `{}` is a valid config.

use serde::{Deserialize, Serialize};

use martinv_core::consistency::ConsistencyOptions;
use martinv_core::error::Result;
use martinv_core::families::{
    make_affine, make_bm, make_example1, make_kimura, make_kimura_timechanged, make_quantile_cdf, perturbed,
    scaled_sine_payoff, sine_payoff,
};
use martinv_core::inversion::InversionGrid;
use martinv_core::kernels::DiffusionSpec;
use martinv_core::monotone_fn::MonotoneMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub horizon: f64,
    pub invert: InvertConfig,
    pub consistency: ConsistencyConfig,
    pub couple: CoupleConfig,
    pub surface: SurfaceConfig,
    pub digital: DigitalConfig,
    pub accept: AcceptConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 20_240_601,
            horizon: 1.0,
            invert: InvertConfig::default(),
            consistency: ConsistencyConfig::default(),
            couple: CoupleConfig::default(),
            surface: SurfaceConfig::default(),
            digital: DigitalConfig::default(),
            accept: AcceptConfig::default(),
        }
    }
}

/// A diffusion, by family name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SpecConfig {
    Bm { m0: f64 },
    Kimura { m0: f64 },
    KimuraTimechanged { m0: f64 },
    Example1 { lambda: f64, kappa: f64 },
    Affine { base: Box<SpecConfig>, a: f64, b: f64 },
    Perturbed { base: Box<SpecConfig>, eps: f64 },
    QuantileCdf { m0: f64, terminal: PayoffConfig, d: f64 },
}

impl SpecConfig {
    pub fn build(&self, horizon: f64) -> Result<DiffusionSpec> {
        match self {
            SpecConfig::Bm { m0 } => make_bm(*m0, horizon),
            SpecConfig::Kimura { m0 } => make_kimura(*m0, horizon),
            SpecConfig::KimuraTimechanged { m0 } => make_kimura_timechanged(*m0, horizon),
            SpecConfig::Example1 { lambda, kappa } => Ok(make_example1(&[*lambda], *kappa, horizon)?.remove(0)),
            SpecConfig::Affine { base, a, b } => make_affine(&base.build(horizon)?, *a, *b),
            SpecConfig::Perturbed { base, eps } => perturbed(&base.build(horizon)?, *eps),
            SpecConfig::QuantileCdf { m0, terminal, d } => make_quantile_cdf(*m0, horizon, &terminal.build()?, *d),
        }
    }
}

/// A payoff in class G.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PayoffConfig {
    Identity,
    /// `x + eps·sin x`, tabulated on `[−reach, reach]`.
    Sine {
        eps: f64,
        #[serde(default = "default_reach")]
        reach: f64,
        #[serde(default = "default_knots")]
        n: usize,
    },
    /// `½ + (x + eps·sin x)/(2·scale)` where `x + eps·sin x ∈ (−scale, scale)`; values in `(0, 1)`.
    ScaledSine {
        eps: f64,
        scale: f64,
        #[serde(default = "default_scaled_knots")]
        n: usize,
    },
}

fn default_reach() -> f64 {
    12.0
}

fn default_knots() -> usize {
    2049
}

fn default_scaled_knots() -> usize {
    1025
}

impl PayoffConfig {
    pub fn build(&self) -> Result<MonotoneMap> {
        match self {
            PayoffConfig::Identity => Ok(MonotoneMap::identity()),
            PayoffConfig::Sine { eps, reach, n } => sine_payoff(*eps, *reach, *n),
            PayoffConfig::ScaledSine { eps, scale, n } => scaled_sine_payoff(*eps, *scale, *n),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertConfig {
    pub cases: Vec<InvertCase>,
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self {
            cases: vec![
                InvertCase::new("bm-sine", SpecConfig::Bm { m0: 0.0 }, PayoffConfig::Sine {
                    eps: 0.4,
                    reach: 12.0,
                    n: 2049,
                }),
                InvertCase::new("kimura-scaled-sine", SpecConfig::Kimura { m0: 0.5 }, PayoffConfig::ScaledSine {
                    eps: 0.4,
                    scale: 5.0,
                    n: 1025,
                }),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertCase {
    pub name: String,
    pub spec: SpecConfig,
    pub payoff: PayoffConfig,
    #[serde(default)]
    pub grid: InversionGridConfig,
    #[serde(default)]
    pub sim: InvertSim,
}

impl InvertCase {
    pub fn new(name: &str, spec: SpecConfig, payoff: PayoffConfig) -> Self {
        Self { name: name.into(), spec, payoff, grid: InversionGridConfig::default(), sim: InvertSim::default() }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionGridConfig {
    pub nt: usize,
    pub nx: usize,
    pub pad: usize,
}

impl Default for InversionGridConfig {
    fn default() -> Self {
        let g = InversionGrid::default();
        Self { nt: g.nt, nx: g.nx, pad: g.pad }
    }
}

impl From<InversionGridConfig> for InversionGrid {
    fn from(g: InversionGridConfig) -> Self {
        InversionGrid { nt: g.nt, nx: g.nx, pad: g.pad }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertSim {
    pub n_paths: usize,
    pub dt: f64,
    pub record_every: usize,
    pub ks_times: Vec<f64>,
    pub alpha: f64,
    pub nested_t: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    pub inner_dt: f64,
    pub defect_tol: f64,
    /// Paths written to the paths CSV.
    pub n_plot_paths: usize,
}

impl Default for InvertSim {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            dt: 1e-3,
            record_every: 250,
            ks_times: vec![0.25, 0.5, 0.75],
            alpha: 0.01,
            nested_t: 0.5,
            n_outer: 2000,
            n_inner: 512,
            inner_dt: 2e-3,
            defect_tol: 1e-5,
            n_plot_paths: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub pairs: Vec<PairCase>,
    pub tol_x: f64,
    pub tol_limit: f64,
    pub tol_iv: f64,
    pub tol_gamma: f64,
    pub n_probes: usize,
    pub n_steps: usize,
    pub gamma_knots: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        let o = ConsistencyOptions::default();
        let sine = PayoffConfig::Sine { eps: 0.3, reach: 12.0, n: 1025 };
        Self {
            pairs: vec![
                PairCase {
                    name: "identical".into(),
                    first: SpecConfig::Kimura { m0: 0.5 },
                    second: SpecConfig::Kimura { m0: 0.5 },
                    b0: B0Config::Value(0.0),
                    expect: Expect::Consistent,
                    gamma: Some(GammaOracle::Affine { slope: 1.0, intercept: 0.0 }),
                },
                PairCase {
                    name: "affine".into(),
                    first: SpecConfig::Kimura { m0: 0.5 },
                    second: SpecConfig::Affine { base: Box::new(SpecConfig::Kimura { m0: 0.5 }), a: 2.0, b: 1.0 },
                    b0: B0Config::Value(0.0),
                    expect: Expect::Consistent,
                    gamma: Some(GammaOracle::Affine { slope: 0.5, intercept: -0.5 }),
                },
                PairCase {
                    name: "bm-quantile".into(),
                    first: SpecConfig::Bm { m0: 0.0 },
                    second: SpecConfig::QuantileCdf { m0: 0.0, terminal: sine.clone(), d: 0.4 },
                    b0: B0Config::Auto,
                    expect: Expect::Consistent,
                    gamma: Some(GammaOracle::ShiftedQuantile { terminal: sine, d: 0.4 }),
                },
                PairCase {
                    name: "perturbed-control".into(),
                    first: SpecConfig::Bm { m0: 0.0 },
                    second: SpecConfig::Perturbed { base: Box::new(SpecConfig::Bm { m0: 0.0 }), eps: 0.1 },
                    b0: B0Config::Value(0.0),
                    expect: Expect::Inconsistent,
                    gamma: None,
                },
            ],
            tol_x: o.tol_x,
            tol_limit: o.tol_limit,
            tol_iv: o.tol_iv,
            tol_gamma: 1e-5,
            n_probes: o.n_probes,
            n_steps: o.n_steps,
            gamma_knots: o.gamma_knots,
        }
    }
}

impl ConsistencyConfig {
    pub fn options(&self) -> ConsistencyOptions {
        ConsistencyOptions {
            tol_x: self.tol_x,
            tol_limit: self.tol_limit,
            tol_iv: self.tol_iv,
            n_probes: self.n_probes,
            n_steps: self.n_steps,
            gamma_knots: self.gamma_knots,
            ..ConsistencyOptions::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairCase {
    pub name: String,
    pub first: SpecConfig,
    pub second: SpecConfig,
    #[serde(default)]
    pub b0: B0Config,
    #[serde(default)]
    pub expect: Expect,
    /// Closed form of `Γ` to compare against.
    #[serde(default)]
    pub gamma: Option<GammaOracle>,
}

/// `b(0)`: a number, or `"auto"` to solve the initial-value identity.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(try_from = "B0Raw", into = "B0Raw")]
pub enum B0Config {
    Value(f64),
    #[default]
    Auto,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum B0Raw {
    Number(f64),
    Word(String),
}

impl TryFrom<B0Raw> for B0Config {
    type Error = String;

    fn try_from(r: B0Raw) -> std::result::Result<Self, String> {
        match r {
            B0Raw::Number(v) => Ok(B0Config::Value(v)),
            B0Raw::Word(w) if w == "auto" => Ok(B0Config::Auto),
            B0Raw::Word(w) => Err(format!("expected a number or \"auto\", got {w:?}")),
        }
    }
}

impl From<B0Config> for B0Raw {
    fn from(b: B0Config) -> Self {
        match b {
            B0Config::Value(v) => B0Raw::Number(v),
            B0Config::Auto => B0Raw::Word("auto".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expect {
    #[default]
    Consistent,
    Inconsistent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GammaOracle {
    /// `Γ(x) = slope·x + intercept`.
    Affine { slope: f64, intercept: f64 },
    /// `Γ(x) = F⁻¹(x) − d` for the terminal CDF `F`.
    ShiftedQuantile { terminal: PayoffConfig, d: f64 },
}

impl GammaOracle {
    pub fn build(&self) -> Result<MonotoneMap> {
        match self {
            GammaOracle::Affine { slope, intercept } => MonotoneMap::affine(*slope, *intercept),
            GammaOracle::ShiftedQuantile { terminal, d } => {
                MonotoneMap::affine(1.0, -d)?.compose(&terminal.build()?.invert()?)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoupleConfig {
    pub cases: Vec<CoupleCase>,
}

fn example1_members(lambdas: &[f64], kappa: f64) -> Vec<SpecConfig> {
    lambdas.iter().map(|&lambda| SpecConfig::Example1 { lambda, kappa }).collect()
}

impl Default for CoupleConfig {
    fn default() -> Self {
        Self {
            cases: vec![
                CoupleCase {
                    name: "example1".into(),
                    members: example1_members(&[1.0, 2.0, 3.0, 4.0, 5.0], 1e-4),
                    dt: 1e-4,
                    n_paths: 1000,
                    record_every: 100,
                    slack: None,
                    control: true,
                    hitting: None,
                    n_plot_paths: 5,
                },
                CoupleCase {
                    name: "example1-shifted".into(),
                    members: example1_members(&[1.0, 2.0], 1e-4)
                        .into_iter()
                        .map(|m| SpecConfig::Affine { base: Box::new(m), a: 1.0, b: 1.0 })
                        .collect(),
                    dt: 1e-3,
                    n_paths: 10_000,
                    record_every: 50,
                    slack: None,
                    control: false,
                    hitting: Some(HittingConfig { eps: 0.5, n_grid: 20 }),
                    n_plot_paths: 5,
                },
            ],
        }
    }
}

/// Shared-noise simulation of members listed in increasing order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoupleCase {
    pub name: String,
    pub members: Vec<SpecConfig>,
    pub dt: f64,
    pub n_paths: usize,
    #[serde(default = "one")]
    pub record_every: usize,
    /// Ordering slack; default `2√dt·σ_max`.
    #[serde(default)]
    pub slack: Option<f64>,
    /// Also simulate with independent noise and expect ordering violations.
    #[serde(default)]
    pub control: bool,
    #[serde(default)]
    pub hitting: Option<HittingConfig>,
    #[serde(default = "five")]
    pub n_plot_paths: usize,
}

fn one() -> usize {
    1
}

fn five() -> usize {
    5
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HittingConfig {
    pub eps: f64,
    pub n_grid: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceConfig {
    pub kappa: f64,
    pub lambda: f64,
    pub deltas: Vec<f64>,
    pub dt: f64,
    pub n_paths: usize,
    pub record_every: usize,
    pub rms_tol: f64,
    /// `λ` grid and path count of the plot data.
    pub plot_lambdas: Vec<f64>,
    pub n_plot_paths: usize,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        Self {
            kappa: 1e-4,
            lambda: 3.0,
            deltas: vec![0.2, 0.1, 0.05],
            dt: 1e-4,
            n_paths: 1000,
            record_every: 100,
            rms_tol: 0.02,
            plot_lambdas: (0..=16).map(|i| 1.0 + 0.25 * i as f64).collect(),
            n_plot_paths: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DigitalConfig {
    pub m0: f64,
    pub eta: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub record_every: usize,
    pub choices: Vec<DigitalChoice>,
    pub nested_t: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    pub inner_dt: f64,
}

impl Default for DigitalConfig {
    fn default() -> Self {
        Self {
            m0: 0.3,
            eta: 1e-4,
            dt: 1e-3,
            n_paths: 10_000,
            record_every: 50,
            choices: vec![DigitalChoice { c0: 0.0, c1: 1.0, c: 0.5 }, DigitalChoice { c0: -1.0, c1: 3.0, c: 1.0 }],
            nested_t: 0.5,
            n_outer: 200,
            n_inner: 512,
            inner_dt: 1e-3,
        }
    }
}

/// `X = c1·M + c0·(1 − M)` with payoff `1{x ≥ c}`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DigitalChoice {
    pub c0: f64,
    pub c1: f64,
    pub c: f64,
}

/// Checks that only the acceptance suite runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceptConfig {
    pub pde: PdeOracleConfig,
    pub density: DensityCheckConfig,
    pub transitivity: TransitivityConfig,
}

impl Default for AcceptConfig {
    fn default() -> Self {
        Self {
            pde: PdeOracleConfig::default(),
            density: DensityCheckConfig::default(),
            transitivity: TransitivityConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeOracleConfig {
    pub eps: f64,
    pub nt: usize,
    pub nx: usize,
    pub half_width: f64,
    pub pad: usize,
    pub tol: f64,
    pub agree_tol: f64,
}

impl Default for PdeOracleConfig {
    fn default() -> Self {
        Self { eps: 0.3, nt: 513, nx: 513, half_width: 8.0, pad: 128, tol: 1e-4, agree_tol: 2e-4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityCheckConfig {
    pub n_points: usize,
    pub tol: f64,
    pub edge: f64,
    pub decay_tol: f64,
}

impl Default for DensityCheckConfig {
    fn default() -> Self {
        Self { n_points: 20, tol: 1e-6, edge: 1e-8, decay_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransitivityConfig {
    pub lambdas: [f64; 3],
    pub kappa: f64,
    pub n_probes: usize,
    pub tol: f64,
}

impl Default for TransitivityConfig {
    fn default() -> Self {
        Self { lambdas: [1.0, 2.0, 3.0], kappa: 1e-2, n_probes: 100, tol: 1e-4 }
    }
}
