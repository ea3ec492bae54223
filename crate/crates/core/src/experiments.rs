//! Experiment configurations, runners and CSV/JSON artifacts.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use clap::{Args, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::continuum::{continuum_attraction, sne_continuum_energy, ContinuumMap, PiecewiseLinearMap};
use crate::data::{BandwidthField, DensitySpec, Histogram};
use crate::discrete::{self, descend, discrete_attraction, discrete_repulsion, postprocess, DescentOptions, Init, Mode};
use crate::error::{Error, Result};
use crate::graph::{build_affinities, GraphOptions};
use crate::kernels::{KernelFamily, KernelSpec, Scale};
use crate::microstructure::{cutting_energy_scan, mu_schedule, ols_slope, CuttingMap, Potential, ScanOptions};
use crate::nonlocal::{cut_sensitivity, nonlocal_attraction, nonlocal_repulsion, repulsion_pushforward, GridMap};
use crate::solver1d::{Potential1D, Problem1D, SolverOptions, SolverResult};

/// Numeric table written as CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// CSV with a `# config-hash:` comment line on top.
    pub fn write_csv(&self, path: &Path, hash: &str) -> Result<()> {
        let mut file = fs::File::create(path).map_err(io_err)?;
        writeln!(file, "# config-hash: {hash}").map_err(io_err)?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(&self.columns).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format!("{v:e}"))).map_err(csv_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io(e.to_string())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Tables plus a JSON summary produced by one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub tables: Vec<(String, Table)>,
    pub summary: serde_json::Value,
}

impl Artifacts {
    pub fn write(&self, dir: &Path, name: &str, hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err)?;
        for (t, table) in &self.tables {
            table.write_csv(&dir.join(format!("{t}.csv")), hash)?;
        }
        let mut summary = self.summary.clone();
        if let Some(obj) = summary.as_object_mut() {
            obj.insert("config_hash".into(), json!(hash));
        }
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?;
        fs::write(dir.join(format!("{name}.json")), text + "\n").map_err(io_err)
    }
}

/// Full persisted configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub command: Command,
}

impl ExperimentConfig {
    pub fn parse(text: &str, json_format: bool) -> Result<Self> {
        if json_format {
            serde_json::from_str(text).map_err(|e| Error::Input(format!("config: {e}")))
        } else {
            toml::from_str(text).map_err(|e| Error::Input(format!("config: {e}")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err)?;
        Self::parse(&text, path.extension().is_some_and(|e| e == "json"))
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run(&self) -> Result<Artifacts> {
        match &self.command {
            Command::Sample(a) => run_sample(a),
            Command::Embed(a) => run_embed(a),
            Command::Solve1d(a) => run_solve1d(a),
            Command::Continuum(a) => run_continuum(a),
            Command::Nonlocal(a) => run_nonlocal(a),
            Command::Microstructure(a) => run_microstructure(a),
            Command::Consistency(a) => run_consistency(a),
            Command::Sec33(a) => run_sec33(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Subcommand)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Draw i.i.d. samples from a density.
    Sample(SampleArgs),
    /// Plain gradient-descent t-SNE/SNE on sampled 1D data.
    Embed(EmbedArgs),
    /// Exact 1D continuum minimizer.
    Solve1d(Solve1dArgs),
    /// Continuum energies and scaling identities of a 1D map.
    Continuum(ContinuumArgs),
    /// Nonlocal energies over a bandwidth sweep.
    Nonlocal(NonlocalArgs),
    /// Cutting-map energy scan.
    Microstructure(MicrostructureArgs),
    /// Monte-Carlo consistency rates of the discrete energies.
    Consistency(ConsistencyArgs),
    /// Random / identity / continuum initialization comparison on the mixture density.
    Sec33(Sec33Args),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Sample(_) => "sample",
            Command::Embed(_) => "embed",
            Command::Solve1d(_) => "solve1d",
            Command::Continuum(_) => "continuum",
            Command::Nonlocal(_) => "nonlocal",
            Command::Microstructure(_) => "microstructure",
            Command::Consistency(_) => "consistency",
            Command::Sec33(_) => "sec33",
        }
    }
}

fn kernel_1d(name: &str) -> Result<KernelSpec> {
    KernelSpec::new(KernelFamily::from_str(name)?, 1)
}

fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Parameter(format!("bad number '{t}'"))))
        .collect()
}

/// One-dimensional test maps.
#[derive(Debug, Clone, PartialEq)]
pub enum MapSpec {
    Identity,
    Linear(f64),
    /// `x + a sin(f x)`
    Sine(f64, f64),
    /// `x + θ 1{x ≥ x₀}`
    Heaviside(f64, f64),
    /// Heaviside with a ramp of width `1/n`.
    Ramp(f64, f64, f64),
    /// Piecewise linear with `k` alternating teeth.
    Zigzag(usize),
    /// Cutting map on `[0,1]²` with `k` strips.
    Cutting(usize),
    /// Identity on `[0,1]²`.
    Identity2d,
}

impl FromStr for MapSpec {
    type Err = Error;
    fn from_str(text: &str) -> Result<Self> {
        let (kind, args) = text.split_once(':').unwrap_or((text, ""));
        let nums = if args.is_empty() { Vec::new() } else { parse_list(args)? };
        match (kind, nums.as_slice()) {
            ("identity", []) => Ok(MapSpec::Identity),
            ("identity2d", []) => Ok(MapSpec::Identity2d),
            ("linear", [a]) => Ok(MapSpec::Linear(*a)),
            ("sine", [a, f]) => Ok(MapSpec::Sine(*a, *f)),
            ("heaviside", [t, x0]) => Ok(MapSpec::Heaviside(*t, *x0)),
            ("ramp", [t, x0, n]) => Ok(MapSpec::Ramp(*t, *x0, *n)),
            ("zigzag", [k]) if *k >= 1.0 => Ok(MapSpec::Zigzag(*k as usize)),
            ("cutting", [k]) if *k >= 1.0 => Ok(MapSpec::Cutting(*k as usize)),
            _ => Err(Error::Parameter(format!("cannot parse map '{text}'"))),
        }
    }
}

impl MapSpec {
    /// Piecewise linear representation on `[a, b]` with `nodes` grid points.
    pub fn piecewise(&self, a: f64, b: f64, nodes: usize) -> Result<PiecewiseLinearMap> {
        let at = |f: &dyn Fn(f64) -> f64| PiecewiseLinearMap::uniform_grid(a, b, nodes, f);
        match *self {
            MapSpec::Identity => Ok(at(&|x| x)),
            MapSpec::Linear(s) => Ok(at(&|x| s * x)),
            MapSpec::Sine(amp, f) => Ok(at(&|x| x + amp * (f * x).sin())),
            MapSpec::Heaviside(t, x0) => PiecewiseLinearMap::new(vec![a, x0, x0, b], vec![a, x0, x0 + t, b + t]),
            MapSpec::Ramp(t, x0, n) => {
                let x1 = x0 + (b - a) / n;
                PiecewiseLinearMap::new(vec![a, x0, x1, b], vec![a, x0, x1 + t, b + t])
            }
            MapSpec::Zigzag(k) => {
                let x: Vec<f64> = (0..=k).map(|j| a + (b - a) * j as f64 / k as f64).collect();
                let t = (0..=k).map(|j| if j % 2 == 0 { 0.0 } else { (b - a) / k as f64 }).collect();
                PiecewiseLinearMap::new(x, t)
            }
            MapSpec::Cutting(_) | MapSpec::Identity2d => Err(Error::Dimension("two-dimensional map used as a 1D map".into())),
        }
    }

    pub fn eval1(&self, x: f64) -> f64 {
        match *self {
            MapSpec::Identity => x,
            MapSpec::Linear(s) => s * x,
            MapSpec::Sine(amp, f) => x + amp * (f * x).sin(),
            MapSpec::Heaviside(t, x0) => x + if x >= x0 { t } else { 0.0 },
            _ => f64::NAN,
        }
    }
}

fn default_density() -> String {
    "uniform".into()
}

fn default_mixture() -> String {
    "mixture:0.4,0.005,0.5".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct SampleArgs {
    #[arg(long, default_value = "uniform")]
    pub density: String,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl Default for SampleArgs {
    fn default() -> Self {
        SampleArgs {
            density: default_density(),
            n: 1000,
            seed: 0,
        }
    }
}

pub fn run_sample(a: &SampleArgs) -> Result<Artifacts> {
    let d = DensitySpec::parse(&a.density)?;
    let cloud = d.sample(a.n, a.seed)?;
    let mut t = Table::new(&["x", "pdf"]);
    for i in 0..cloud.n() {
        let x = cloud.point(i);
        t.push(vec![x[0], d.pdf(x)]);
    }
    Ok(Artifacts {
        tables: vec![("sample".into(), t)],
        summary: json!({ "n": a.n, "seed": a.seed }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    Random,
    Identity,
    Continuum,
}

impl From<InitArg> for Init {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Random => Init::Random,
            InitArg::Identity => Init::Identity,
            InitArg::Continuum => Init::Continuum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Tsne,
    Sne,
}

impl From<ModeArg> for Mode {
    fn from(a: ModeArg) -> Self {
        match a {
            ModeArg::Tsne => Mode::Tsne,
            ModeArg::Sne => Mode::Sne,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct EmbedArgs {
    #[arg(long, default_value = "mixture:0.4,0.005,0.5")]
    pub density: String,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Defaults to `5/n`.
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Defaults to `n/5`.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, value_enum, default_value = "identity")]
    pub init: InitArg,
    #[arg(long, value_enum, default_value = "tsne")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "epanechnikov")]
    pub kernel: String,
    #[arg(long, default_value = "knn")]
    pub sigma: String,
    #[arg(long, default_value_t = 100)]
    pub record_every: usize,
    /// Exclude the `j = i` term from the degrees.
    #[arg(long)]
    pub exclude_self_in_degree: bool,
}

impl Default for EmbedArgs {
    fn default() -> Self {
        EmbedArgs {
            density: default_mixture(),
            n: 500,
            h: None,
            steps: 1000,
            dt: None,
            init: InitArg::Identity,
            mode: ModeArg::Tsne,
            seed: 0,
            kernel: "epanechnikov".into(),
            sigma: "knn".into(),
            record_every: 100,
            exclude_self_in_degree: false,
        }
    }
}

/// One gradient-descent run on sampled 1D data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRun {
    pub init: Init,
    pub x: Vec<f64>,
    /// Postprocessed `T_n(x_i)`.
    pub t_n: Vec<f64>,
    pub state: discrete::EmbeddingState,
}

impl EmbedRun {
    pub fn initial_loss(&self) -> f64 {
        self.state.trace[0].kl
    }

    pub fn final_loss(&self) -> f64 {
        self.state.final_loss().unwrap_or(f64::NAN)
    }
}

struct EmbedSetup {
    density: DensitySpec,
    kernel: KernelSpec,
    sigma: BandwidthField,
    h: f64,
    dt: f64,
    x: Vec<f64>,
    graph: crate::graph::AffinityGraph,
}

fn embed_setup(density: &str, kernel: &str, sigma: &str, n: usize, h: Option<f64>, dt: Option<f64>, seed: u64, exclude_self: bool) -> Result<EmbedSetup> {
    let density = DensitySpec::parse(density)?;
    let kernel = kernel_1d(kernel)?;
    let sigma = BandwidthField::parse(sigma)?;
    let h = h.unwrap_or(5.0 / n as f64);
    let dt = dt.unwrap_or(n as f64 / 5.0);
    let cloud = density.sample(n, seed)?;
    let graph = build_affinities(
        &cloud,
        &kernel,
        &sigma,
        &density,
        h,
        GraphOptions {
            include_self_in_degree: !exclude_self,
        },
    )?;
    Ok(EmbedSetup {
        density,
        kernel,
        sigma,
        h,
        dt,
        x: cloud.points,
        graph,
    })
}

fn embed_one(s: &EmbedSetup, init: Init, mode: Mode, steps: usize, record_every: usize, seed: u64, t_star: Option<&PiecewiseLinearMap>) -> Result<EmbedRun> {
    let y0 = discrete::initialize(&s.x, 1, 1, init, s.h, seed.wrapping_add(1), t_star)?;
    let state = descend(
        &s.graph,
        &y0,
        1,
        seed,
        DescentOptions {
            steps,
            dt: s.dt,
            mode,
            record_every,
        },
    )?;
    Ok(EmbedRun {
        init,
        x: s.x.clone(),
        t_n: postprocess(&state.y, 1, s.h),
        state,
    })
}

fn continuum_solution(density: &DensitySpec, kernel: &KernelSpec, sigma: &BandwidthField, grid: usize) -> Result<SolverResult> {
    Problem1D::new(density, sigma, Potential1D::kernel(*kernel), grid)?.solve(SolverOptions::default())
}

fn trace_table(state: &discrete::EmbeddingState) -> Table {
    let mut t = Table::new(&["step", "kl", "a_n", "r_n"]);
    for r in &state.trace {
        t.push(vec![r.step as f64, r.kl, r.a_n, r.r_n]);
    }
    t
}

fn sorted_pairs(x: &[f64], t: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = x.iter().copied().zip(t.iter().copied()).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

pub fn run_embed(a: &EmbedArgs) -> Result<Artifacts> {
    let s = embed_setup(&a.density, &a.kernel, &a.sigma, a.n, a.h, a.dt, a.seed, a.exclude_self_in_degree)?;
    let t_star = match a.init {
        InitArg::Continuum => Some(continuum_solution(&s.density, &s.kernel, &s.sigma, crate::solver1d::DEFAULT_GRID)?.t_star),
        _ => None,
    };
    let run = embed_one(&s, a.init.into(), a.mode.into(), a.steps, a.record_every, a.seed, t_star.as_ref())?;
    let mut map = Table::new(&["x", "t_n"]);
    for (x, t) in sorted_pairs(&run.x, &run.t_n) {
        map.push(vec![x, t]);
    }
    Ok(Artifacts {
        tables: vec![("trace".into(), trace_table(&run.state)), ("map".into(), map)],
        summary: json!({
            "n": a.n, "h": s.h, "dt": s.dt, "steps": run.state.step,
            "initial_loss": run.initial_loss(), "final_loss": run.final_loss(),
            "diverged": run.state.diverged,
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct Solve1dArgs {
    #[arg(long, default_value = "mixture:0.4,0.005,0.5")]
    pub density: String,
    #[arg(long, default_value = "knn")]
    pub sigma: String,
    #[arg(long, default_value = "epanechnikov")]
    pub kernel: String,
    #[arg(long, default_value_t = 4096)]
    pub grid: usize,
    /// Solve with `Φ_s` instead of `Φ₁`.
    #[arg(long, default_value_t = 1.0)]
    pub s: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub delta0: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    /// Solve the Perona–Malik problem with this `λ` instead.
    #[arg(long)]
    pub perona_malik: Option<f64>,
}

impl Default for Solve1dArgs {
    fn default() -> Self {
        Solve1dArgs {
            density: default_mixture(),
            sigma: "knn".into(),
            kernel: "epanechnikov".into(),
            grid: 4096,
            s: 1.0,
            delta0: 1e-3,
            tol: 1e-10,
            max_iter: 10_000,
            perona_malik: None,
        }
    }
}

pub fn run_solve1d(a: &Solve1dArgs) -> Result<Artifacts> {
    let density = DensitySpec::parse(&a.density)?;
    let opts = SolverOptions {
        delta0: a.delta0,
        tol: a.tol,
        max_iter: a.max_iter,
    };
    let problem = match a.perona_malik {
        Some(lambda) => Problem1D::perona_malik(&density, lambda, a.grid)?,
        None => {
            let p = Problem1D::new(&density, &BandwidthField::parse(&a.sigma)?, Potential1D::kernel(kernel_1d(&a.kernel)?), a.grid)?;
            if a.s == 1.0 {
                p
            } else {
                p.with_scale(a.s)?
            }
        }
    };
    let r = problem.solve(opts)?;
    let mut t = Table::new(&["x", "u", "t"]);
    for j in 0..r.u_star.x.len() {
        t.push(vec![r.u_star.x[j], r.u_star.u[j], r.t_star.t[j]]);
    }
    let mut summary = json!({
        "b_star": r.b_star, "residual": r.residual, "f": r.f_value,
        "iterations": r.iterations, "delta0": r.delta0,
        "consistency": problem.consistency(r.b_star)?,
    });
    if let Some(lambda) = a.perona_malik {
        summary["i_lambda"] = json!(lambda * (r.f_value + 2.0 * lambda.ln()));
    }
    Ok(Artifacts {
        tables: vec![("solve1d".into(), t)],
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct ContinuumArgs {
    #[arg(long, default_value = "uniform")]
    pub density: String,
    /// identity, linear:a, sine:a,f, heaviside:θ,x₀, ramp:θ,x₀,n, zigzag:k
    #[arg(long, default_value = "identity")]
    pub map: String,
    /// A positive number or `inf`.
    #[arg(long, default_value = "1")]
    pub s: String,
    #[arg(long, default_value = "epanechnikov")]
    pub kernel: String,
    #[arg(long, default_value = "1")]
    pub sigma: String,
    #[arg(long, default_value_t = 1025)]
    pub grid: usize,
    /// Dilations for the scaling identity, comma separated.
    #[arg(long, default_value = "0.5,2,10")]
    pub lambdas: String,
}

impl Default for ContinuumArgs {
    fn default() -> Self {
        ContinuumArgs {
            density: default_density(),
            map: "identity".into(),
            s: "1".into(),
            kernel: "epanechnikov".into(),
            sigma: "1".into(),
            grid: 1025,
            lambdas: "0.5,2,10".into(),
        }
    }
}

pub fn run_continuum(a: &ContinuumArgs) -> Result<Artifacts> {
    let density = DensitySpec::parse(&a.density)?;
    let [lo, hi] = density.domain()[0];
    let map = MapSpec::from_str(&a.map)?.piecewise(lo, hi, a.grid)?;
    let kernel = kernel_1d(&a.kernel)?;
    let sigma = BandwidthField::parse(&a.sigma)?;
    let s = Scale::from_str(&a.s)?;
    let report = map.energy(&kernel, &sigma, &density, s)?;
    let mut t = Table::new(&["lambda", "lhs", "rhs"]);
    for lambda in parse_list(&a.lambdas)? {
        let (l, r) = crate::continuum::scaling_identity_check(&map, &kernel, &sigma, &density, s, lambda)?;
        t.push(vec![lambda, l, r]);
    }
    let sne = sne_continuum_energy(&map, &kernel, &sigma, &density).ok();
    Ok(Artifacts {
        tables: vec![("scaling".into(), t)],
        summary: json!({
            "attraction": report.attraction, "repulsion": report.repulsion, "total": report.total,
            "s": a.s, "sne": sne.map(|(a, r)| json!({"attraction": a, "repulsion": r})),
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct NonlocalArgs {
    #[arg(long, default_value = "uniform")]
    pub density: String,
    /// identity, linear:a, sine:a,f, identity2d or cutting:k
    #[arg(long, default_value = "identity")]
    pub map: String,
    #[arg(long, default_value = "0.1,0.05,0.02,0.01")]
    pub h_sweep: String,
    #[arg(long, default_value = "epanechnikov")]
    pub kernel: String,
    #[arg(long, default_value = "1")]
    pub sigma: String,
    #[arg(long, default_value_t = crate::nonlocal::DEFAULT_NODES_1D)]
    pub nodes: usize,
    /// Transition width of cutting maps.
    #[arg(long, default_value_t = 1e-4)]
    pub mu: f64,
}

impl Default for NonlocalArgs {
    fn default() -> Self {
        NonlocalArgs {
            density: default_density(),
            map: "identity".into(),
            h_sweep: "0.1,0.05,0.02,0.01".into(),
            kernel: "epanechnikov".into(),
            sigma: "1".into(),
            nodes: crate::nonlocal::DEFAULT_NODES_1D,
            mu: 1e-4,
        }
    }
}

/// `exp(R^h)/h` for the identity on `[0,1]` and its limit `π`.
pub fn repulsion_localization_1d(hs: &[f64], nodes: usize) -> Result<Vec<(f64, f64, f64)>> {
    let map = GridMap::identity(&[[0.0, 1.0]], nodes)?;
    let d = DensitySpec::unit_interval();
    hs.iter()
        .map(|&h| {
            let v = nonlocal_repulsion(&map, &d, h)?.exp() / h;
            Ok((h, v, (v - std::f64::consts::PI).abs()))
        })
        .collect()
}

/// `exp(R^h)/(h² log(1/h))` for the identity on `[0,1]²` and its limit `2π`.
pub fn repulsion_localization_2d(hs: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    let hist = Histogram {
        lo: vec![0.0, 0.0],
        width: vec![1.0, 1.0],
        shape: vec![1, 1],
        values: vec![1.0],
    };
    hs.iter()
        .map(|&h| {
            let v = repulsion_pushforward(&hist, h)?.exp() / (h * h * (1.0 / h).ln());
            Ok((h, v, (v - 2.0 * std::f64::consts::PI).abs()))
        })
        .collect()
}

pub fn run_nonlocal(a: &NonlocalArgs) -> Result<Artifacts> {
    let hs = parse_list(&a.h_sweep)?;
    let spec = MapSpec::from_str(&a.map)?;
    let mut t = Table::new(&["h", "a_h", "r_h", "rescaled"]);
    match spec {
        MapSpec::Cutting(k) => {
            let kernel = KernelSpec::new(KernelFamily::from_str(&a.kernel)?, 2)?;
            let map = CuttingMap::with_mu(2, 1, k, a.mu)?;
            for h in hs {
                t.push(vec![h, cut_sensitivity(&map, &kernel, h)?, f64::NAN, f64::NAN]);
            }
        }
        MapSpec::Identity2d => {
            for (h, v, _) in repulsion_localization_2d(&hs)? {
                t.push(vec![h, f64::NAN, (v * h * h * (1.0 / h).ln()).ln(), v]);
            }
        }
        _ => {
            let density = DensitySpec::parse(&a.density)?;
            let [lo, hi] = density.domain()[0];
            let kernel = kernel_1d(&a.kernel)?;
            let sigma = BandwidthField::parse(&a.sigma)?;
            let map = GridMap::from_fn(&[[lo, hi]], a.nodes, 1, |x| vec![spec.eval1(x[0])])?;
            for h in hs {
                let at = nonlocal_attraction(&map, &kernel, &sigma, &density, h)?;
                let r = nonlocal_repulsion(&map, &density, h)?;
                t.push(vec![h, at, r, r.exp() / h]);
            }
        }
    }
    Ok(Artifacts {
        tables: vec![("nonlocal".into(), t)],
        summary: json!({ "map": a.map }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PotentialArg {
    /// `1 + |A|^α` with the scan's `α`.
    Sublinear,
    Phi1,
    PhiInf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct MicrostructureArgs {
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    #[arg(long, default_value_t = 32)]
    pub kmax: usize,
    #[arg(long, default_value_t = 0.75)]
    pub alpha: f64,
    #[arg(long)]
    pub rescaled: bool,
    #[arg(long, value_enum, default_value = "sublinear")]
    pub potential: PotentialArg,
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 20_240_601)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub bins_per_unit: usize,
}

impl Default for MicrostructureArgs {
    fn default() -> Self {
        MicrostructureArgs {
            d: 2,
            m: 1,
            kmax: 32,
            alpha: 0.75,
            rescaled: false,
            potential: PotentialArg::Sublinear,
            samples: 1_000_000,
            seed: 20_240_601,
            bins_per_unit: 8,
        }
    }
}

/// Powers of two in `[2, kmax]` whose `μ` is admissible; returns skipped values too.
pub fn admissible_ks(kmax: usize, alpha: f64) -> (Vec<usize>, Vec<usize>) {
    let mut ks = Vec::new();
    let mut skipped = Vec::new();
    let mut k = 2;
    while k <= kmax {
        if mu_schedule(k, alpha) < 0.5 {
            ks.push(k);
        } else {
            skipped.push(k);
        }
        k *= 2;
    }
    (ks, skipped)
}

pub fn run_microstructure(a: &MicrostructureArgs) -> Result<Artifacts> {
    let (ks, skipped) = admissible_ks(a.kmax, a.alpha);
    let potential = match a.potential {
        PotentialArg::Sublinear => Potential::Sublinear { c: 1.0, alpha: a.alpha },
        PotentialArg::Phi1 => Potential::Kernel {
            kernel: KernelSpec::epanechnikov(a.d),
            s: Scale::Finite(1.0),
        },
        PotentialArg::PhiInf => Potential::Kernel {
            kernel: KernelSpec::epanechnikov(a.d),
            s: Scale::Infinite,
        },
    };
    let opts = ScanOptions {
        samples: a.samples,
        seed: a.seed,
        bins_per_unit: a.bins_per_unit,
    };
    let scan = cutting_energy_scan(a.d, a.m, &ks, a.alpha, a.rescaled, &potential, opts)?;
    let mut t = Table::new(&["k", "mu", "a", "r", "r_exact", "max_density", "k_max_density"]);
    for r in &scan.rows {
        t.push(vec![
            r.k as f64,
            r.mu,
            r.attraction,
            r.repulsion,
            r.repulsion_exact.unwrap_or(f64::NAN),
            r.max_density,
            r.k as f64 * r.max_density,
        ]);
    }
    Ok(Artifacts {
        tables: vec![("microstructure".into(), t)],
        summary: json!({
            "ks": ks, "skipped_k": skipped,
            "repulsion_slope": scan.repulsion_slope, "attraction_slope": scan.attraction_slope,
            "attraction_spread": scan.attraction_spread, "density_ratio": scan.density_ratio,
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    Attraction,
    Repulsion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct ConsistencyArgs {
    #[arg(long, value_enum, default_value = "attraction")]
    pub mode: SweepMode,
    /// identity, linear:a or sine:a,f on `[0,1]`.
    #[arg(long, default_value = "identity")]
    pub map: String,
    #[arg(long, default_value = "250,500,1000,2000,4000")]
    pub ns: String,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `h = n^{-e}`.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    pub h_exponent: f64,
}

impl Default for ConsistencyArgs {
    fn default() -> Self {
        ConsistencyArgs {
            mode: SweepMode::Attraction,
            map: "identity".into(),
            ns: "250,500,1000,2000,4000".into(),
            trials: 10,
            seed: 0,
            h_exponent: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub n: usize,
    pub h: f64,
    pub errors: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub target: f64,
    pub rows: Vec<ConsistencyRow>,
    /// OLS slope of `log median` against `log n`.
    pub slope: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Monte-Carlo errors of `A_n` or `exp(R_n)/(πh)` for uniform data on `[0,1]`, `σ ≡ 1`, Epanechnikov `η`.
pub fn consistency_sweep(a: &ConsistencyArgs) -> Result<ConsistencyReport> {
    let spec = MapSpec::from_str(&a.map)?;
    let density = DensitySpec::unit_interval();
    let kernel = KernelSpec::epanechnikov(1);
    let sigma = BandwidthField::constant(1.0);
    let pl = spec.piecewise(0.0, 1.0, 4097)?;
    let target = match a.mode {
        SweepMode::Attraction => continuum_attraction(&pl, &kernel, &sigma, &density, Scale::Finite(1.0))?,
        SweepMode::Repulsion => pl.repulsion(&density)?.exp(),
    };
    let ns: Vec<usize> = parse_list(&a.ns)?.into_iter().map(|v| v as usize).collect();
    let mut rows = Vec::new();
    for &n in &ns {
        let h = (n as f64).powf(-a.h_exponent);
        let errors: Vec<Result<f64>> = (0..a.trials)
            .into_par_iter()
            .map(|trial| {
                let seed = a.seed.wrapping_mul(1_000_003).wrapping_add((n as u64) << 20).wrapping_add(trial as u64);
                let cloud = density.sample(n, seed)?;
                let t: Vec<f64> = cloud.points.iter().map(|&x| spec.eval1(x)).collect();
                match a.mode {
                    SweepMode::Attraction => {
                        let p = build_affinities(&cloud, &kernel, &sigma, &density, h, GraphOptions::default())?;
                        Ok((discrete_attraction(&p, &t, 1, h) - target).abs())
                    }
                    SweepMode::Repulsion => Ok((discrete_repulsion(&t, 1, h).exp() / (std::f64::consts::PI * h) - target).abs()),
                }
            })
            .collect();
        let errors = errors.into_iter().collect::<Result<Vec<_>>>()?;
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (errors.len().max(2) - 1) as f64;
        rows.push(ConsistencyRow {
            n,
            h,
            median: median(&errors),
            errors,
            mean,
            sd: var.sqrt(),
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.median.ln()).collect();
    Ok(ConsistencyReport {
        target,
        slope: ols_slope(&x, &y),
        rows,
    })
}

pub fn run_consistency(a: &ConsistencyArgs) -> Result<Artifacts> {
    let r = consistency_sweep(a)?;
    let mut t = Table::new(&["n", "h", "mean", "sd", "median"]);
    for row in &r.rows {
        t.push(vec![row.n as f64, row.h, row.mean, row.sd, row.median]);
    }
    Ok(Artifacts {
        tables: vec![("consistency".into(), t)],
        summary: json!({ "target": r.target, "slope": r.slope }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct Sec33Args {
    /// Cluster offset `c` of the mixture.
    #[arg(long, default_value_t = 0.5)]
    pub c: f64,
    #[arg(long, default_value_t = 0.4)]
    pub p: f64,
    #[arg(long, default_value_t = 0.005)]
    pub var: f64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "random,identity,continuum")]
    pub inits: Vec<InitArg>,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Defaults to `5/n`.
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    /// Defaults to `n/5`.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub record_every: usize,
    #[arg(long, default_value_t = 4096)]
    pub grid: usize,
    /// Full-scale preset: `n = 2500`, `10⁵` steps.
    #[arg(long)]
    pub full: bool,
}

impl Default for Sec33Args {
    fn default() -> Self {
        Sec33Args {
            c: 0.5,
            p: 0.4,
            var: 0.005,
            inits: vec![InitArg::Random, InitArg::Identity, InitArg::Continuum],
            n: 500,
            h: None,
            steps: 10_000,
            dt: None,
            seed: 0,
            record_every: 100,
            grid: 4096,
            full: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sec33Report {
    pub n: usize,
    pub h: f64,
    pub dt: f64,
    pub t_star: PiecewiseLinearMap,
    pub u_star: PiecewiseLinearMap,
    pub runs: Vec<EmbedRun>,
}

impl Sec33Report {
    pub fn run(&self, init: Init) -> Option<&EmbedRun> {
        self.runs.iter().find(|r| r.init == init)
    }
}

/// Mixture-density comparison of the three initializations.
pub fn sec33(a: &Sec33Args) -> Result<Sec33Report> {
    let (n, steps) = if a.full { (2500, 100_000) } else { (a.n, a.steps) };
    let density = format!("mixture:{},{},{}", a.p, a.var, a.c);
    let s = embed_setup(&density, "epanechnikov", "knn", n, a.h, a.dt, a.seed, false)?;
    let sol = continuum_solution(&s.density, &s.kernel, &s.sigma, a.grid)?;
    let u_star = PiecewiseLinearMap::new(sol.u_star.x.clone(), sol.u_star.u.clone())?;
    let mut runs = Vec::new();
    for &init in &a.inits {
        runs.push(embed_one(&s, init.into(), Mode::Tsne, steps, a.record_every, a.seed, Some(&sol.t_star))?);
    }
    Ok(Sec33Report {
        n,
        h: s.h,
        dt: s.dt,
        t_star: sol.t_star,
        u_star,
        runs,
    })
}

fn init_name(i: Init) -> &'static str {
    match i {
        Init::Random => "random",
        Init::Identity => "identity",
        Init::Continuum => "continuum",
    }
}

pub fn run_sec33(a: &Sec33Args) -> Result<Artifacts> {
    let r = sec33(a)?;
    let mut tables = Vec::new();
    let mut losses = serde_json::Map::new();
    for run in &r.runs {
        let name = init_name(run.init);
        let pts = sorted_pairs(&run.x, &run.t_n);
        let mut map = Table::new(&["x", "t_n", "t_star"]);
        for &(x, t) in &pts {
            map.push(vec![x, t, r.t_star.eval(x)]);
        }
        let mut deriv = Table::new(&["x", "dt_n", "dt_star"]);
        for w in pts.windows(2) {
            if w[1].0 > w[0].0 {
                let xm = 0.5 * (w[0].0 + w[1].0);
                deriv.push(vec![xm, (w[1].1 - w[0].1) / (w[1].0 - w[0].0), r.u_star.eval(xm)]);
            }
        }
        tables.push((format!("sec33_{name}_map"), map));
        tables.push((format!("sec33_{name}_derivative"), deriv));
        tables.push((format!("sec33_{name}_trace"), trace_table(&run.state)));
        losses.insert(
            name.into(),
            json!({ "initial_loss": run.initial_loss(), "final_loss": run.final_loss(), "diverged": run.state.diverged }),
        );
    }
    Ok(Artifacts {
        tables,
        summary: json!({ "n": r.n, "h": r.h, "dt": r.dt, "runs": losses }),
    })
}
