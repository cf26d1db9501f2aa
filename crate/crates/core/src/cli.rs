//! Batch commands wiring simulation, decomposition, reconstruction and
//! estimation through plain CSV/JSON files.
//!
//! Every command writes into `--out` and merges a record of its inputs into
//! `provenance.json` there, keyed by command name. Outputs carry no
//! timestamps, so identical invocations produce identical files.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::gp::{self, coverage, posteriors_csv, reconstruct_all, GpError, TipData};
use crate::hyperfit::{profile_mle, ratio_mle, FreeParam, HyperfitError, MLEResult, TipLikelihood};
use crate::linalg::FactorizationError;
use crate::ou::OuParams;
use crate::separation::{
    align_components, run_ica, run_pca, AlignmentReport, DimMethod, IcaOrientation,
    SeparationError,
};
use crate::sim::{
    read_weights_csv, reference_params, simulate, weights_csv, BasisSet, ScenarioConfig,
    SimError, TraitDataset,
};
use crate::tree::{parse_newick, serialize_newick, PhyloTree, TreeError};

pub const TREE_FILE: &str = "tree.nwk";
pub const TRUE_BASIS_FILE: &str = "basis.csv";
pub const TRUE_WEIGHTS_FILE: &str = "weights.csv";
pub const TRAITS_FILE: &str = "traits.csv";
pub const TRAITS_SIDECAR: &str = "traits.json";
pub const EST_BASIS_FILE: &str = "est_basis.csv";
pub const TIP_WEIGHTS_FILE: &str = "tip_weights.csv";
pub const MEAN_CURVE_FILE: &str = "mean_curve.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const POSTERIORS_FILE: &str = "posteriors.csv";
pub const MLE_FILE: &str = "mle.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("non-identifiable: {0}")]
    NonIdentifiable(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::NonIdentifiable(_) => 4,
        }
    }
}

impl From<TreeError> for CliError {
    fn from(e: TreeError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::NotPsd { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<SeparationError> for CliError {
    fn from(e: SeparationError) -> Self {
        match e {
            SeparationError::ConstantData | SeparationError::NotConverged { .. } => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<FactorizationError> for CliError {
    fn from(e: FactorizationError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<GpError> for CliError {
    fn from(e: GpError) -> Self {
        match e {
            GpError::Factorization(_) | GpError::VarianceBelowSpecific { .. } => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<HyperfitError> for CliError {
    fn from(e: HyperfitError) -> Self {
        match e {
            HyperfitError::Factorization(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "phylogp", version, about = "Phylogenetic Gaussian processes for function-valued traits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a tree, OU weights and curves at every node.
    Simulate(SimulateArgs),
    /// Recover a basis and tip weights from the tip curves by PCA and ICA.
    Decompose(DecomposeArgs),
    /// Posterior curves with uncertainty bands at every node.
    Reconstruct(ReconstructArgs),
    /// Likelihood profiles and maximum likelihood estimates of one hyperparameter.
    Estimate(EstimateArgs),
    /// Simulate, decompose, reconstruct and estimate in one run.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulationOptions {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub tips: usize,
    #[arg(long, default_value_t = 0.5)]
    pub ig_mu: f64,
    #[arg(long, default_value_t = 0.5)]
    pub ig_lambda: f64,
    #[arg(long, default_value_t = 1024)]
    pub grid_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DimMethodArg {
    Laplace,
    Gap,
}

impl From<DimMethodArg> for DimMethod {
    fn from(a: DimMethodArg) -> Self {
        match a {
            DimMethodArg::Laplace => DimMethod::Laplace,
            DimMethodArg::Gap => DimMethod::Gap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientationArg {
    Curves,
    Weights,
}

impl From<OrientationArg> for IcaOrientation {
    fn from(a: OrientationArg) -> Self {
        match a {
            OrientationArg::Curves => IcaOrientation::Curves,
            OrientationArg::Weights => IcaOrientation::Weights,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DecompositionOptions {
    #[arg(long, value_enum, default_value_t = DimMethodArg::Laplace)]
    pub dim_method: DimMethodArg,
    #[arg(long, value_enum, default_value_t = OrientationArg::Curves)]
    pub ica_orientation: OrientationArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisSource {
    /// The simulation basis from `basis.csv`.
    True,
    /// The decomposition output.
    Estimated,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelOptions {
    #[arg(long, value_enum, default_value_t = BasisSource::Estimated)]
    pub basis: BasisSource,
    /// Hyperparameters as a JSON array (inline or a path), one object per
    /// component. Defaults to the simulation parameters recorded in
    /// `traits.json`, mapped onto estimated components when needed.
    #[arg(long)]
    pub params: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimationOptions {
    #[arg(long, value_enum, default_value_t = FreeParamArg::SigmaF)]
    pub free_param: FreeParamArg,
    /// Fit `sigma_f` with `sigma_n = ratio * sigma_f` and the length-scale known.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Restrict to one component (1-based).
    #[arg(long)]
    pub component: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum FreeParamArg {
    SigmaF,
    SigmaN,
    Lambda,
}

impl From<FreeParamArg> for FreeParam {
    fn from(a: FreeParamArg) -> Self {
        match a {
            FreeParamArg::SigmaF => FreeParam::SigmaF,
            FreeParamArg::SigmaN => FreeParam::SigmaN,
            FreeParamArg::Lambda => FreeParam::Lambda,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub sim: SimulationOptions,
    /// Hyperparameters as a JSON array (inline or a path).
    #[arg(long)]
    pub params: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DecomposeArgs {
    /// Directory holding `tree.nwk` and `traits.csv`.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub decomposition: DecompositionOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelOptions,
    #[command(flatten)]
    pub estimation: EstimationOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub sim: SimulationOptions,
    #[command(flatten)]
    pub decomposition: DecompositionOptions,
    #[command(flatten)]
    pub model: ModelOptions,
    #[command(flatten)]
    pub estimation: EstimationOptions,
    #[arg(long)]
    pub out: PathBuf,
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn record_provenance(dir: &Path, command: &str, entry: Value) -> Result<(), CliError> {
    let path = dir.join(PROVENANCE_FILE);
    let mut doc = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str::<Value>(&text).unwrap_or_else(|_| json!({})),
        Err(_) => json!({}),
    };
    if !doc.is_object() {
        doc = json!({});
    }
    doc["version"] = json!(env!("CARGO_PKG_VERSION"));
    doc[command] = entry;
    write(dir, PROVENANCE_FILE, &to_json(&doc))
}

/// Parses a JSON array of hyperparameter objects given inline or as a path.
pub fn parse_params(spec: &str) -> Result<Vec<OuParams>, CliError> {
    let text = if spec.trim_start().starts_with('[') {
        spec.to_string()
    } else {
        read(Path::new(spec))?
    };
    let params: Vec<OuParams> = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("--params: {e}")))?;
    if params.is_empty() {
        return Err(CliError::Config("--params: empty list".into()));
    }
    for p in &params {
        p.validate().map_err(|e| CliError::Config(format!("--params: {e}")))?;
    }
    Ok(params)
}

/// Parameters expressed on the scale of estimated components: estimated row
/// `i` matches truth row `permutation[i]` scaled by `scales[i]`, so its
/// weights are the true weights divided by that scale.
pub fn map_params(truth: &[OuParams], alignment: &AlignmentReport) -> Vec<OuParams> {
    alignment
        .permutation
        .iter()
        .zip(&alignment.scales)
        .map(|(&j, &s)| {
            let p = truth[j];
            let f = if s > 0.0 { 1.0 / s } else { 1.0 };
            OuParams {
                sigma_f: p.sigma_f * f,
                lambda: p.lambda,
                sigma_n: p.sigma_n * f,
            }
        })
        .collect()
}

struct Inputs {
    tree: PhyloTree,
    traits: TraitDataset,
}

fn load_inputs(dir: &Path) -> Result<Inputs, CliError> {
    let tree = parse_newick(read(&dir.join(TREE_FILE))?.trim())?;
    let traits = TraitDataset::from_csv(&read(&dir.join(TRAITS_FILE))?, &tree)?;
    Ok(Inputs { tree, traits })
}

fn read_sidecar_params(dir: &Path) -> Result<Vec<OuParams>, CliError> {
    let path = dir.join(TRAITS_SIDECAR);
    let text = read(&path).map_err(|_| {
        CliError::Config(format!(
            "no --params given and no simulation record at {}",
            path.display()
        ))
    })?;
    let doc: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{TRAITS_SIDECAR}: {e}")))?;
    serde_json::from_value(doc["params"].clone())
        .map_err(|e| CliError::Config(format!("{TRAITS_SIDECAR}: {e}")))
}

fn read_basis(path: &Path) -> Result<BasisSet, CliError> {
    Ok(BasisSet::from_csv(&read(path)?)?)
}

/// Tip weights, basis and mean curve for the chosen basis source.
fn load_tip_data(dir: &Path, inputs: &Inputs, source: BasisSource) -> Result<TipData, CliError> {
    match source {
        BasisSource::True => {
            let basis = read_basis(&dir.join(TRUE_BASIS_FILE))?;
            let (tips, curves) = inputs.traits.train();
            Ok(TipData::from_known_basis(tips, &curves, &basis.curves)?)
        }
        BasisSource::Estimated => {
            let basis = read_basis(&dir.join(EST_BASIS_FILE))?;
            let (tips, weights) =
                read_weights_csv(&read(&dir.join(TIP_WEIGHTS_FILE))?, &inputs.tree)?;
            let mean = read_basis(&dir.join(MEAN_CURVE_FILE))?;
            if weights.ncols() != basis.k() || mean.k() != 1 || mean.m() != basis.m() {
                return Err(CliError::Config("decomposition outputs disagree in shape".into()));
            }
            Ok(TipData {
                tips,
                weights,
                basis: basis.curves,
                mean_curve: mean.curves.row(0).transpose(),
            })
        }
    }
}

fn resolve_params(
    dir: &Path,
    model: &ModelOptions,
    data: &TipData,
) -> Result<(Vec<OuParams>, Option<AlignmentReport>), CliError> {
    if let Some(spec) = &model.params {
        let params = parse_params(spec)?;
        if params.len() != data.k() {
            return Err(CliError::Config(format!(
                "{} parameter sets for {} components",
                params.len(),
                data.k()
            )));
        }
        return Ok((params, None));
    }
    let truth = read_sidecar_params(dir)?;
    match model.basis {
        BasisSource::True => {
            if truth.len() != data.k() {
                return Err(CliError::Config("recorded parameters do not match the basis".into()));
            }
            Ok((truth, None))
        }
        BasisSource::Estimated => {
            let true_basis = read_basis(&dir.join(TRUE_BASIS_FILE))?;
            if true_basis.k() != data.k() {
                return Err(CliError::Numerical(format!(
                    "estimated {} components but the simulation used {}; pass --params",
                    data.k(),
                    true_basis.k()
                )));
            }
            let alignment = align_components(&data.basis, &true_basis.curves)?;
            Ok((map_params(&truth, &alignment), Some(alignment)))
        }
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let params = match &args.params {
        Some(spec) => parse_params(spec)?,
        None => reference_params(),
    };
    let config = ScenarioConfig {
        n_tips: args.sim.tips,
        ig_mu: args.sim.ig_mu,
        ig_lambda: args.sim.ig_lambda,
        grid_size: args.sim.grid_size,
        params: params.clone(),
    };
    let scenario = simulate(&config, args.sim.seed)?;
    prepare_out(&args.out)?;
    let tree = &scenario.tree;
    write(&args.out, TREE_FILE, &(serialize_newick(tree) + "\n"))?;
    write(&args.out, TRUE_BASIS_FILE, &scenario.basis.to_csv())?;
    write(&args.out, TRUE_WEIGHTS_FILE, &scenario.weights.to_csv(tree))?;
    write(&args.out, TRAITS_FILE, &scenario.dataset.to_csv(tree))?;
    write(
        &args.out,
        TRAITS_SIDECAR,
        &to_json(&json!({
            "seed": args.sim.seed,
            "grid": scenario.dataset.grid,
            "params": params,
        })),
    )?;
    record_provenance(
        &args.out,
        "simulate",
        json!({ "options": args.sim, "params": params }),
    )
}

pub fn cmd_decompose(args: &DecomposeArgs) -> Result<(), CliError> {
    let inputs = load_inputs(&args.input)?;
    let (tips, curves) = inputs.traits.train();
    let method: DimMethod = args.decomposition.dim_method.into();
    let orientation: IcaOrientation = args.decomposition.ica_orientation.into();
    let pca = run_pca(&curves, method)?;
    let ica = run_ica(&pca, &curves, orientation)?;
    prepare_out(&args.out)?;
    let grid = inputs.traits.grid.clone();
    write(&args.out, EST_BASIS_FILE, &ica.basis_set(grid.clone()).to_csv())?;
    write(
        &args.out,
        TIP_WEIGHTS_FILE,
        &weights_csv(&inputs.tree, &tips, &ica.tip_weights),
    )?;
    let mean = BasisSet::new(DMatrix::from_row_slice(1, grid.len(), ica.mean_curve.as_slice()), grid)?;
    write(&args.out, MEAN_CURVE_FILE, &mean.to_csv())?;
    write(
        &args.out,
        DIAGNOSTICS_FILE,
        &to_json(&json!({
            "estimated_k": pca.estimated_k,
            "dim_method": args.decomposition.dim_method,
            "eigenvalues": pca.eigenvalues,
            "ica": ica.diagnostics,
        })),
    )?;
    record_provenance(
        &args.out,
        "decompose",
        json!({ "options": args.decomposition }),
    )
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> Result<(), CliError> {
    let inputs = load_inputs(&args.input)?;
    let data = load_tip_data(&args.input, &inputs, args.model.basis)?;
    let (params, _) = resolve_params(&args.input, &args.model, &data)?;
    let posteriors = reconstruct_all(&inputs.tree, &data, &params)?;
    prepare_out(&args.out)?;
    write(&args.out, POSTERIORS_FILE, &posteriors_csv(&inputs.tree, &posteriors))?;
    record_provenance(
        &args.out,
        "reconstruct",
        json!({ "options": args.model, "params": params }),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentEstimate {
    pub component: usize,
    pub mode: &'static str,
    pub truth: Option<f64>,
    pub result: MLEResult,
}

fn estimate_components(
    inputs: &Inputs,
    data: &TipData,
    params: &[OuParams],
    opts: &EstimationOptions,
) -> Result<Vec<ComponentEstimate>, CliError> {
    let components: Vec<usize> = match opts.component {
        Some(c) if c >= 1 && c <= data.k() => vec![c - 1],
        Some(c) => {
            return Err(CliError::Config(format!(
                "--component {c} outside 1..={}",
                data.k()
            )))
        }
        None => (0..data.k()).collect(),
    };
    let free: FreeParam = opts.free_param.into();
    let mut out = Vec::new();
    for c in components {
        let y = data.weights.column(c).into_owned();
        let likelihood = TipLikelihood::new(&inputs.tree, &data.tips, &y)?;
        let p = params[c];
        let (mode, truth, result) = match opts.ratio {
            Some(ratio) => {
                let lambda = p.lambda.unwrap_or_else(|| likelihood.mean_tip_distance());
                ("ratio", Some(p.sigma_f), ratio_mle(&likelihood, lambda, ratio, None)?)
            }
            None => {
                let truth = match free {
                    FreeParam::SigmaF => Some(p.sigma_f),
                    FreeParam::SigmaN => Some(p.sigma_n),
                    FreeParam::Lambda => p.lambda.filter(|_| p.lambda_applicable()),
                };
                ("profile", truth, profile_mle(&likelihood, free, &p, None)?)
            }
        };
        out.push(ComponentEstimate {
            component: c + 1,
            mode,
            truth,
            result,
        });
    }
    Ok(out)
}

fn write_estimates(dir: &Path, estimates: &[ComponentEstimate]) -> Result<(), CliError> {
    for e in estimates {
        if let Some(profile) = &e.result.profile {
            let name = format!("profile_{}_c{}.csv", e.result.parameter, e.component);
            write(dir, &name, &profile.to_csv())?;
        }
    }
    write(dir, MLE_FILE, &to_json(&estimates))
}

fn non_identifiable(estimates: &[ComponentEstimate]) -> Option<CliError> {
    let flat: Vec<String> = estimates
        .iter()
        .filter(|e| !e.result.identifiable)
        .map(|e| format!("{} of component {}", e.result.parameter, e.component))
        .collect();
    if flat.is_empty() {
        None
    } else {
        Some(CliError::NonIdentifiable(format!(
            "flat likelihood profile for {}",
            flat.join(", ")
        )))
    }
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<(), CliError> {
    if let Some(r) = args.estimation.ratio {
        if !(r > 0.0 && r.is_finite()) {
            return Err(CliError::Config(format!("--ratio must be positive, got {r}")));
        }
    }
    let inputs = load_inputs(&args.input)?;
    let data = load_tip_data(&args.input, &inputs, args.model.basis)?;
    let (params, _) = resolve_params(&args.input, &args.model, &data)?;
    let estimates = estimate_components(&inputs, &data, &params, &args.estimation)?;
    prepare_out(&args.out)?;
    write_estimates(&args.out, &estimates)?;
    record_provenance(
        &args.out,
        "estimate",
        json!({
            "options": args.model,
            "estimation": args.estimation,
            "params": params,
        }),
    )?;
    match non_identifiable(&estimates) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub estimated_k: usize,
    pub basis: BasisSource,
    pub alignment: Option<AlignmentReport>,
    pub coverage_1sd: f64,
    pub coverage_2sd: f64,
    pub estimates: Vec<SummaryEstimate>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryEstimate {
    pub component: usize,
    pub parameter: String,
    pub estimate: Option<f64>,
    pub truth: Option<f64>,
    pub at_bound: bool,
}

pub fn cmd_pipeline(args: &PipelineArgs) -> Result<(), CliError> {
    let out = &args.out;
    cmd_simulate(&SimulateArgs {
        sim: args.sim.clone(),
        params: args.model.params.clone(),
        out: out.clone(),
    })?;
    cmd_decompose(&DecomposeArgs {
        input: out.clone(),
        decomposition: args.decomposition.clone(),
        out: out.clone(),
    })?;

    // the simulation parameters are the truth; component mapping is automatic
    let model = ModelOptions {
        basis: args.model.basis,
        params: None,
    };
    let inputs = load_inputs(out)?;
    let data = load_tip_data(out, &inputs, model.basis)?;
    let (params, alignment) = resolve_params(out, &model, &data)?;
    let posteriors = reconstruct_all(&inputs.tree, &data, &params)?;
    write(out, POSTERIORS_FILE, &posteriors_csv(&inputs.tree, &posteriors))?;

    let (validation_nodes, validation_curves) = inputs.traits.validate();
    let chosen: Vec<&gp::FunctionalPosterior> =
        validation_nodes.iter().map(|id| &posteriors[id.0]).collect();
    let truth: Vec<_> = validation_curves
        .row_iter()
        .map(|r| r.transpose())
        .collect();
    let (coverage_1sd, coverage_2sd) = coverage(&chosen, &truth);

    let estimates = estimate_components(&inputs, &data, &params, &args.estimation)?;
    write_estimates(out, &estimates)?;

    let diagnostics: Value = serde_json::from_str(&read(&out.join(DIAGNOSTICS_FILE))?)
        .map_err(|e| CliError::Config(format!("{DIAGNOSTICS_FILE}: {e}")))?;
    let summary = PipelineSummary {
        seed: args.sim.seed,
        estimated_k: diagnostics["estimated_k"].as_u64().unwrap_or(0) as usize,
        basis: model.basis,
        alignment,
        coverage_1sd,
        coverage_2sd,
        estimates: estimates
            .iter()
            .map(|e| SummaryEstimate {
                component: e.component,
                parameter: e.result.parameter.clone(),
                estimate: e.result.estimate,
                truth: e.truth,
                at_bound: e.result.at_lower_bound || e.result.at_upper_bound,
            })
            .collect(),
    };
    write(out, SUMMARY_FILE, &to_json(&summary))?;
    record_provenance(
        out,
        "pipeline",
        json!({
            "options": args.sim,
            "decomposition": args.decomposition,
            "model": args.model,
            "estimation": args.estimation,
            "params": params,
        }),
    )?;
    match non_identifiable(&estimates) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    }
}
