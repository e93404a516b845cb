//! Command-line front end. `main` only parses arguments and maps errors to
//! exit codes; everything else lives here so it can be tested in-process.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::cluster::{run_experiment, ClusterSpace, ExperimentConfig, ExperimentRecord};
use crate::error::{Error, Result};
use crate::graph::{GraphConfig, KnnSearch, Sigma2, SparseGraph};
use crate::matrix::{load_matrix, save_matrix, CorruptionKind, CorruptionSpec, DataMatrix, MatrixFormat};
use crate::pgm;
use crate::solver::{fista_solve, parse_norm_mode, write_trace_csv, LowRankResult, Loss, SolverConfig, Step};
use crate::synth::two_gaussians;

#[derive(Debug, Parser)]
#[command(name = "frpcag", version, about = "Low-rank recovery regularized by sample and feature graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a K-NN graph between the samples or features of a matrix.
    Graph(GraphArgs),
    /// Recover the low-rank part of a matrix given its two graphs.
    Solve(SolveArgs),
    /// Separate static background from moving foreground in PGM frames.
    Background(BackgroundArgs),
    /// Run clustering experiments described by a config file.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Over {
    Samples,
    Features,
}

#[derive(Debug, Args)]
pub struct GraphOpts {
    /// Neighbors per vertex.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Gaussian kernel width sigma^2, or `auto`.
    #[arg(long, default_value = "1")]
    pub sigma2: String,
    /// Use approximate neighbor search.
    #[arg(long)]
    pub approx: bool,
    /// Recall target of the approximate search.
    #[arg(long, default_value_t = 0.9)]
    pub recall: f64,
}

impl GraphOpts {
    fn config(&self) -> Result<GraphConfig> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("--k must be at least 1".into()));
        }
        let search = if self.approx {
            if !(self.recall > 0.0 && self.recall <= 1.0) {
                return Err(Error::InvalidArgument(format!("--recall must be in (0, 1], got {}", self.recall)));
            }
            KnnSearch::Approx { recall: self.recall }
        } else {
            KnnSearch::Exact
        };
        Ok(GraphConfig {
            k: self.k,
            sigma2: self.sigma2.parse()?,
            search,
        })
    }
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    /// Input matrix (`.csv`/`.txt` as CSV, anything else binary).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "samples")]
    pub over: Over,
    #[command(flatten)]
    pub graph: GraphOpts,
    /// Output COO graph file.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SolverOpts {
    /// Solver config file (`key = value` lines); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub gamma1: Option<f64>,
    #[arg(long)]
    pub gamma2: Option<f64>,
    /// `l1` or `frobenius_sq`.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Step size, or `auto`.
    #[arg(long)]
    pub step: Option<String>,
}

impl SolverOpts {
    fn config(&self, base: SolverConfig) -> Result<SolverConfig> {
        let mut cfg = match &self.config {
            Some(path) => SolverConfig::from_toml_str(&read_text(path)?)?,
            None => base,
        };
        if let Some(g) = self.gamma1 {
            cfg.gamma1 = g;
        }
        if let Some(g) = self.gamma2 {
            cfg.gamma2 = g;
        }
        if let Some(l) = &self.loss {
            cfg.loss = l.parse()?;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon = e;
        }
        if let Some(m) = self.max_iters {
            cfg.max_iters = m;
        }
        if let Some(s) = &self.step {
            cfg.step = parse_step(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_step(s: &str) -> Result<Step> {
    if s == "auto" {
        return Ok(Step::Auto);
    }
    s.parse::<f64>()
        .map(Step::Fixed)
        .map_err(|_| Error::InvalidArgument(format!("step must be a number or \"auto\", got \"{s}\"")))
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Graph between samples (columns).
    #[arg(long)]
    pub graph1: PathBuf,
    /// Graph between features (rows).
    #[arg(long)]
    pub graph2: PathBuf,
    #[command(flatten)]
    pub solver: SolverOpts,
    /// Low-rank output (binary unless the extension is `.csv`).
    #[arg(long)]
    pub output_u: PathBuf,
    /// Sparse part `X - U`.
    #[arg(long)]
    pub output_s: Option<PathBuf>,
    /// Objective per iteration as CSV.
    #[arg(long)]
    pub output_trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BackgroundArgs {
    /// Directory of equally sized P5 frames, read in file-name order.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value = "auto")]
    pub sigma2: String,
    #[arg(long)]
    pub approx: bool,
    #[arg(long, default_value_t = 0.9)]
    pub recall: f64,
    #[arg(long, default_value_t = 10.0)]
    pub gamma1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma2: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
    /// Receives `background_NNNN.pgm` and `foreground_NNNN.pgm`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    pub config: PathBuf,
    /// JSON-lines output; records go to stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Graph(a) => cmd_graph(&a, out),
        Command::Solve(a) => cmd_solve(&a, out),
        Command::Background(a) => cmd_background(&a, out),
        Command::Experiment(a) => cmd_experiment(&a, out),
    }
}

pub fn cmd_graph(a: &GraphArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.graph.config()?;
    let x = load_matrix(&a.input, MatrixFormat::from_path(&a.input))?;
    let points = match a.over {
        Over::Samples => x.values().clone(),
        Over::Features => x.values().transpose(),
    };
    let n = points.ncols();
    if cfg.k >= n {
        return Err(Error::InvalidArgument(format!("--k {} needs more than {n} points", cfg.k)));
    }
    let g = cfg.build(&points)?;
    g.save_coo(&a.output)?;
    writeln!(out, "vertices {}", g.vertex_count()).map_err(io_out)?;
    writeln!(out, "edges {}", g.edge_count()).map_err(io_out)?;
    if let Some(s) = g.sigma2() {
        writeln!(out, "sigma2 {s:?}").map_err(io_out)?;
    }
    Ok(())
}

pub fn cmd_solve(a: &SolveArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.solver.config(SolverConfig::default())?;
    let x = load_matrix(&a.input, MatrixFormat::from_path(&a.input))?;
    let g1 = SparseGraph::load_coo(&a.graph1)?;
    let g2 = SparseGraph::load_coo(&a.graph2)?;
    let r = fista_solve(&x, &g1, &g2, &cfg)?;
    save_matrix(&a.output_u, &r.u, MatrixFormat::from_path(&a.output_u))?;
    if let Some(p) = &a.output_s {
        save_matrix(p, &r.s, MatrixFormat::from_path(p))?;
    }
    if let Some(p) = &a.output_trace {
        write_trace_csv(p, &r.objective_trace)?;
    }
    writeln!(out, "iterations {}", r.iterations).map_err(io_out)?;
    writeln!(out, "objective {:?}", r.objective_trace.last().expect("non-empty trace")).map_err(io_out)?;
    writeln!(out, "converged {}", r.converged).map_err(io_out)?;
    Ok(())
}

/// Frames are the samples: `G1` links frames, `G2` links pixels. Intensities
/// are used as loaded, in `[0, 1]`.
pub fn separate_background(frames: &DataMatrix, graph: &GraphConfig, solver: &SolverConfig) -> Result<LowRankResult> {
    let g1 = graph.sample_graph(frames.values())?;
    let g2 = graph.feature_graph(frames.values())?;
    fista_solve(frames, &g1, &g2, solver)
}

pub fn cmd_background(a: &BackgroundArgs, out: &mut dyn Write) -> Result<()> {
    let graph = GraphOpts {
        k: a.k,
        sigma2: a.sigma2.clone(),
        approx: a.approx,
        recall: a.recall,
    }
    .config()?;
    let solver = SolverConfig {
        gamma1: a.gamma1,
        gamma2: a.gamma2,
        epsilon: a.epsilon,
        max_iters: a.max_iters,
        ..Default::default()
    };
    solver.validate()?;
    let x = pgm::read_frames(&a.frames)?;
    let (h, w) = x.image_dims().expect("frames carry image dims");
    let r = separate_background(&x, &graph, &solver)?;
    pgm::write_frames(&a.out, "background", r.u.values(), h, w)?;
    pgm::write_frames(&a.out, "foreground", &r.s.values().abs(), h, w)?;
    writeln!(out, "frames {} ({h}x{w})", x.sample_count()).map_err(io_out)?;
    writeln!(out, "iterations {}", r.iterations).map_err(io_out)?;
    writeln!(out, "converged {}", r.converged).map_err(io_out)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum NumOrName {
    Num(f64),
    Name(String),
}

impl NumOrName {
    fn text(&self) -> String {
        match self {
            NumOrName::Num(v) => v.to_string(),
            NumOrName::Name(s) => s.clone(),
        }
    }
}

/// Experiment config file. Scalars may be given as lists to sweep them.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    name: Option<String>,
    /// `"two_gaussians"` or a matrix file.
    data: String,
    labels: Option<PathBuf>,
    samples: Option<usize>,
    features: Option<usize>,
    separation: Option<f64>,
    data_seed: Option<u64>,
    image_height: Option<usize>,
    image_width: Option<usize>,
    k: Option<usize>,
    sigma2: Option<NumOrName>,
    search: Option<String>,
    recall: Option<f64>,
    loss: Option<Loss>,
    gamma: Option<OneOrMany<f64>>,
    gamma1: Option<OneOrMany<f64>>,
    gamma2: Option<OneOrMany<f64>>,
    epsilon: Option<f64>,
    max_iters: Option<usize>,
    step: Option<NumOrName>,
    spectral_norm: Option<String>,
    corruption: Option<String>,
    fraction: Option<OneOrMany<f64>>,
    corruption_seed: Option<u64>,
    restarts: Option<usize>,
    rank_threshold: Option<f64>,
    cluster_on: Option<String>,
    baseline: Option<bool>,
    seeds: Option<OneOrMany<u64>>,
}

/// A parsed experiment file: the data plus one config per sweep point.
pub struct ExperimentPlan {
    pub x: DataMatrix,
    pub labels: Vec<usize>,
    pub runs: Vec<ExperimentConfig>,
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    read_text(path)?
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::Parse(format!("{}: bad label `{t}`", path.display())))
        })
        .collect()
}

/// Parses an experiment file. Relative paths are resolved against the
/// file's directory.
pub fn parse_experiment(text: &str, base_dir: &Path) -> Result<ExperimentPlan> {
    let raw: RawExperiment =
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("experiment config: {}", e.message())))?;
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };

    let (mut x, labels) = if raw.data == "two_gaussians" {
        let d = two_gaussians(
            raw.samples.unwrap_or(200),
            raw.features.unwrap_or(40),
            raw.separation.unwrap_or(10.0),
            raw.data_seed.unwrap_or(0),
        )?;
        (d.x, d.labels)
    } else {
        let path = resolve(Path::new(&raw.data));
        let labels_path = raw
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("`labels` is required when `data` is a file".into()))?;
        let x = load_matrix(&path, MatrixFormat::from_path(&path))?;
        (x, read_labels(&resolve(labels_path))?)
    };
    if labels.len() != x.sample_count() {
        return Err(Error::InconsistentData(format!(
            "{} labels for {} samples",
            labels.len(),
            x.sample_count()
        )));
    }
    if let (Some(h), Some(w)) = (raw.image_height, raw.image_width) {
        x = x.with_image_dims(h, w)?;
    }

    let search = match raw.search.as_deref().unwrap_or("exact") {
        "exact" => KnnSearch::Exact,
        "approx" => KnnSearch::Approx {
            recall: raw.recall.unwrap_or(0.9),
        },
        other => return Err(Error::InvalidArgument(format!("search must be exact or approx, got `{other}`"))),
    };
    let sigma2: Sigma2 = match &raw.sigma2 {
        Some(s) => s.text().parse()?,
        None => Sigma2::default(),
    };
    let graph = GraphConfig {
        k: raw.k.unwrap_or(10),
        sigma2,
        search,
    };

    let mut solver = SolverConfig::default();
    if let Some(l) = raw.loss {
        solver.loss = l;
    }
    if let Some(e) = raw.epsilon {
        solver.epsilon = e;
    }
    if let Some(m) = raw.max_iters {
        solver.max_iters = m;
    }
    if let Some(s) = &raw.step {
        solver.step = parse_step(&s.text())?;
    }
    if let Some(m) = &raw.spectral_norm {
        solver.norm_mode = parse_norm_mode(m)?;
    }

    let gammas: Vec<(f64, f64)> = match (raw.gamma, raw.gamma1, raw.gamma2) {
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
            return Err(Error::InvalidArgument("give either `gamma` or `gamma1`/`gamma2`, not both".into()))
        }
        (Some(g), None, None) => g.into_vec().into_iter().map(|g| (g, g)).collect(),
        (None, g1, g2) => {
            let g1 = g1.map_or(vec![1.0], OneOrMany::into_vec);
            let g2 = g2.map_or(vec![1.0], OneOrMany::into_vec);
            g1.iter().flat_map(|&a| g2.iter().map(move |&b| (a, b))).collect()
        }
    };

    let kind = match raw.corruption.as_deref().unwrap_or("none") {
        "none" => None,
        "missing" => Some(CorruptionKind::Missing),
        "block" => Some(CorruptionKind::Block),
        other => {
            return Err(Error::InvalidArgument(format!(
                "corruption must be none, missing or block, got `{other}`"
            )))
        }
    };
    let fractions = raw.fraction.map_or(vec![0.0], OneOrMany::into_vec);
    let cluster_on = match raw.cluster_on.as_deref().unwrap_or("u") {
        "u" => ClusterSpace::U,
        "w" => ClusterSpace::W,
        other => return Err(Error::InvalidArgument(format!("cluster_on must be u or w, got `{other}`"))),
    };
    let seeds = raw.seeds.map_or(vec![0], OneOrMany::into_vec);
    let name = raw.name.unwrap_or_else(|| "experiment".into());

    let mut runs = Vec::new();
    for &fraction in &fractions {
        for &(g1, g2) in &gammas {
            for &seed in &seeds {
                let corruption = match kind {
                    Some(k) if fraction > 0.0 => Some(CorruptionSpec::new(k, fraction, raw.corruption_seed.unwrap_or(seed))?),
                    _ => None,
                };
                let solver = SolverConfig {
                    gamma1: g1,
                    gamma2: g2,
                    ..solver.clone()
                };
                solver.validate()?;
                runs.push(ExperimentConfig {
                    name: name.clone(),
                    graph,
                    solver,
                    corruption,
                    restarts: raw.restarts.unwrap_or(crate::cluster::DEFAULT_RESTARTS),
                    rank_threshold: raw.rank_threshold.unwrap_or(crate::cluster::DEFAULT_RANK_THRESHOLD),
                    cluster_on,
                    baseline: raw.baseline.unwrap_or(true),
                    seed,
                });
            }
        }
    }
    Ok(ExperimentPlan { x, labels, runs })
}

fn summary_row(r: &ExperimentRecord) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
    format!(
        "{:<8.3} {:>8} {:>8} {:>5} {:>7.3} {:>7} {:>5} {:>7} {:>6} {:>9.1}",
        r.corruption.map_or(0.0, |c| c.fraction),
        r.solver.gamma1,
        r.solver.gamma2,
        r.seed,
        r.error,
        opt(r.raw_error),
        r.rank,
        opt(r.s_r),
        r.iterations,
        r.timings_ms.total
    )
}

pub fn cmd_experiment(a: &ExperimentArgs, out: &mut dyn Write) -> Result<()> {
    let text = read_text(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let plan = parse_experiment(&text, base)?;
    let mut records = Vec::with_capacity(plan.runs.len());
    for cfg in &plan.runs {
        records.push(run_experiment(&plan.x, &plan.labels, cfg)?);
    }
    let lines: Vec<String> = records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize"))
        .collect();
    match &a.output {
        Some(path) => {
            let mut body = lines.join("\n");
            body.push('\n');
            std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
        }
        None => {
            for l in &lines {
                writeln!(out, "{l}").map_err(io_out)?;
            }
        }
    }
    writeln!(
        out,
        "{:<8} {:>8} {:>8} {:>5} {:>7} {:>7} {:>5} {:>7} {:>6} {:>9}",
        "fraction", "gamma1", "gamma2", "seed", "error", "raw", "rank", "s_r", "iters", "ms"
    )
    .map_err(io_out)?;
    for r in &records {
        writeln!(out, "{}", summary_row(r)).map_err(io_out)?;
    }
    Ok(())
}
