//! `heterosag` command-line front end.
//!
//! Exit codes: 0 on success, 1 for invalid arguments or configuration,
//! 2 when a protocol round or aggregation fails at run time.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use heterosag::analysis::{
    bandwidth_expansion, compare_with_secure_aggregation, privacy_leakage_prob, sigma_heterosag_plus, ErrorBoundInput,
};
use heterosag::byzantine::AttackKind;
use heterosag::plan::{
    build_ss_matrix_hetero, inference_robustness_bruteforce, inference_robustness_closed_form, verify_properties,
    SsMatrix, MAX_BRUTE_FORCE_COLUMNS,
};
use heterosag::sim::{
    convergence_bound, run_comparison, run_training, Aggregation, AttackConfig, QuantMode, RoundConfig, SimError,
};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        if e.is_config_error() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn config_err(e: impl ToString) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "heterosag",
    version,
    about = "Segment planning, analysis and simulation for heterogeneous secure aggregation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the segment-selection matrix for a topology.
    Plan {
        #[command(flatten)]
        layout: LayoutArgs,
        #[arg(long, value_enum, default_value_t = PlanFormat::Text)]
        format: PlanFormat,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the matrix's structural properties and its inference robustness.
    Verify {
        #[command(flatten)]
        layout: LayoutArgs,
    },
    /// Closed-form error bound, leakage probability and bandwidth figures.
    Analyze(AnalyzeArgs),
    /// Train on a synthetic task with every round securely aggregated.
    Simulate {
        /// TOML round configuration.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Per-round CSV log.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run several quantization scenarios and tabulate loss and upload time.
    Compare {
        /// TOML file: a round configuration, optionally with `[[scenarios]]`.
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the `seed` in the configuration.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlanFormat {
    Text,
    Csv,
}

#[derive(Args)]
struct LayoutArgs {
    /// Number of groups, one subgroup each.
    #[arg(long, conflicts_with = "subgroups", required_unless_present = "subgroups")]
    groups: Option<usize>,
    /// Subgroups per group, e.g. `1,2,2`.
    #[arg(long, value_delimiter = ',')]
    subgroups: Option<Vec<usize>>,
}

impl LayoutArgs {
    fn layout(&self) -> Vec<usize> {
        self.subgroups
            .clone()
            .unwrap_or_else(|| vec![1; self.groups.unwrap_or(0)])
    }

    fn matrix(&self) -> Result<SsMatrix, CliError> {
        build_ss_matrix_hetero(&self.layout()).map_err(config_err)
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    layout: LayoutArgs,
    /// Users per group (per subgroup with `--subgroups`).
    #[arg(long)]
    group_size: usize,
    #[arg(long)]
    model_len: usize,
    /// Quantizer levels per group, e.g. `2,6,8,10,12`.
    #[arg(long, value_delimiter = ',', required = true)]
    levels: Vec<u64>,
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    lower: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    upper: f64,
    /// Per-user dropout probability for the leakage estimate.
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    /// Emit JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    aggregation: Option<AggregationArg>,
    /// none, gaussian, sign-flip or label-flip with default strength.
    #[arg(long)]
    attack: Option<AttackKind>,
    /// Byzantine user indices, e.g. `0,5`.
    #[arg(long, value_delimiter = ',')]
    byzantine: Option<Vec<usize>>,
    #[arg(long)]
    threshold: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Mean,
    Median,
}

impl Overrides {
    fn apply(&self, config: &mut RoundConfig) {
        if let Some(r) = self.rounds {
            config.rounds = r;
        }
        if let Some(p) = self.dropout {
            config.dropout = p;
        }
        if let Some(eta) = self.learning_rate {
            config.learning_rate = eta;
        }
        if let Some(a) = self.aggregation {
            config.aggregation = match a {
                AggregationArg::Mean => Aggregation::Mean,
                AggregationArg::Median => Aggregation::Median,
            };
        }
        if let Some(kind) = &self.attack {
            config.attack.kind = *kind;
        }
        if let Some(b) = &self.byzantine {
            config.attack.byzantine = b.clone();
        }
        if let Some(t) = self.threshold {
            config.threshold = Some(t);
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<RoundConfig, CliError> {
    toml::from_str(&read(path)?).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn plan(layout: &LayoutArgs, format: PlanFormat, out: Option<&Path>) -> Result<(), CliError> {
    let matrix = layout.matrix()?;
    let text = match format {
        PlanFormat::Text => matrix.to_string(),
        PlanFormat::Csv => matrix.to_csv(),
    };
    write_or_print(out, &text)
}

fn verify(layout: &LayoutArgs) -> Result<(), CliError> {
    let matrix = layout.matrix()?;
    let report = verify_properties(&matrix);
    print!("{report}");
    let z = matrix.dim();
    let expected = inference_robustness_closed_form(z);
    if z <= MAX_BRUTE_FORCE_COLUMNS {
        let r = inference_robustness_bruteforce(&matrix).map_err(config_err)?;
        println!(
            "inference robustness: {}/{} = {:.4} (closed form {:.4}); weakest column set {:?}",
            r.undecodable, r.levels, r.delta, expected, r.subset
        );
    } else {
        println!("inference robustness: closed form {expected:.4} (exhaustive check skipped above {MAX_BRUTE_FORCE_COLUMNS} columns)");
    }
    Ok(())
}

fn analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let subgroups = args.layout.layout();
    let z: usize = subgroups.iter().sum();
    let input = ErrorBoundInput {
        users: z * args.group_size,
        group_size: args.group_size,
        subgroups,
        model_len: args.model_len,
        lower: args.lower,
        upper: args.upper,
        levels: args.levels.clone(),
    };
    let sigma = sigma_heterosag_plus(&input).map_err(config_err)?;
    let leak = privacy_leakage_prob(args.group_size, args.dropout).map_err(config_err)?;
    let matrix = args.layout.matrix()?;
    let plan = matrix.coalition_plan();
    let schemes = compare_with_secure_aggregation(&input, &plan, args.dropout).map_err(config_err)?;
    let bandwidth: Vec<_> = args
        .levels
        .iter()
        .map(|&k| {
            (
                k,
                bandwidth_expansion(args.group_size, k),
                bandwidth_expansion(2 * args.group_size, k),
            )
        })
        .collect();

    if args.json {
        let value = serde_json::json!({
            "error_bound": sigma,
            "leakage_prob": leak,
            "bandwidth": bandwidth.iter().map(|(k, single, paired)| serde_json::json!({
                "levels": k, "single": single, "paired": paired,
            })).collect::<Vec<_>>(),
            "schemes": schemes,
        });
        println!(
            "{}",
            serde_json::to_string_pretty(&value).map_err(|e| CliError::Runtime(e.to_string()))?
        );
        return Ok(());
    }
    println!("users {}, columns {z}, model length {}", input.users, input.model_len);
    println!("quantization error bound  {sigma:.6e}");
    println!("single-survivor leakage   {leak:.6e}  (p = {})", args.dropout);
    println!("bandwidth expansion (alone / paired):");
    for (k, single, paired) in &bandwidth {
        println!("  K = {k:<6} {:.4} / {:.4}", single.ratio, paired.ratio);
    }
    println!(
        "{:<10} {:>12} {:>10} {:>10} {:>8} {:>12} {:>8}",
        "scheme", "error bound", "bw alone", "bw paired", "masks", "leakage", "delta"
    );
    for s in &schemes {
        println!(
            "{:<10} {:>12.4e} {:>10.4} {:>10.4} {:>8} {:>12.4e} {:>8.4}",
            s.name,
            s.error_bound,
            s.bandwidth_single.ratio,
            s.bandwidth_paired.ratio,
            s.max_masks_per_element,
            s.leakage_prob,
            s.inference_robustness
        );
    }
    Ok(())
}

fn simulate(path: &Path, seed: u64, out: Option<&Path>, overrides: &Overrides) -> Result<(), CliError> {
    let mut config = load_config(path)?;
    overrides.apply(&mut config);
    let log = run_training(&config, seed)?;
    let last = log.rows.last().expect("at least one round");
    eprintln!(
        "rounds {}, final loss {:.6e}, last-round survivors {}, leakage events {}",
        log.rows.len(),
        log.final_loss(),
        last.survivors,
        log.leakage_events()
    );
    if let (Some(gap), Some(bound)) = (log.average_iterate_gap(), convergence_bound(&config, &log)?) {
        eprintln!("averaged-iterate gap {gap:.6e}, guarantee {bound:.6e}");
    }
    write_or_print(out, &log.to_csv())
}

/// Changes applied to the base configuration for one scenario.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Scenario {
    name: String,
    #[serde(default)]
    levels: Option<Vec<u64>>,
    #[serde(default)]
    mode: Option<QuantMode>,
    #[serde(default)]
    aggregation: Option<Aggregation>,
    #[serde(default)]
    attack: Option<AttackConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareFile {
    #[serde(default)]
    seed: Option<u64>,
    base: RoundConfig,
    #[serde(default)]
    scenarios: Vec<Scenario>,
}

/// Unquantized uploads in the comparison are 32-bit.
const FULL_PRECISION_LEVELS: u64 = 1 << 32;

fn default_scenarios(base: &RoundConfig) -> Vec<(String, RoundConfig)> {
    let groups = base.quantization.levels.len();
    let lowest = base.quantization.levels.first().copied().unwrap_or(2);
    let mut homogeneous = base.clone();
    homogeneous.quantization.levels = vec![lowest; groups];
    let mut full = base.clone();
    full.quantization.levels = vec![FULL_PRECISION_LEVELS; groups];
    full.quantization.mode = QuantMode::Stochastic;
    vec![
        ("heterogeneous".into(), base.clone()),
        (format!("homogeneous_k{lowest}"), homogeneous),
        ("no_quantization".into(), full),
    ]
}

fn compare(path: &Path, seed: Option<u64>, out: Option<&Path>, overrides: &Overrides) -> Result<(), CliError> {
    let text = read(path)?;
    let parse_err = |e: toml::de::Error| config_err(format!("{}: {e}", path.display()));
    let table: toml::Table = toml::from_str(&text).map_err(parse_err)?;
    let (mut base, scenarios, file_seed) = if table.contains_key("base") {
        let file: CompareFile = toml::from_str(&text).map_err(parse_err)?;
        (file.base, Some(file.scenarios), file.seed)
    } else {
        (toml::from_str::<RoundConfig>(&text).map_err(parse_err)?, None, None)
    };
    overrides.apply(&mut base);
    let seed = seed
        .or(file_seed)
        .or(base.seed)
        .ok_or_else(|| config_err("compare needs --seed or a seed in the configuration"))?;
    let runs = match scenarios {
        Some(list) if !list.is_empty() => list
            .into_iter()
            .map(|s| {
                let mut c = base.clone();
                if let Some(l) = s.levels {
                    c.quantization.levels = l;
                }
                if let Some(m) = s.mode {
                    c.quantization.mode = m;
                }
                if let Some(a) = s.aggregation {
                    c.aggregation = a;
                }
                if let Some(a) = s.attack {
                    c.attack = a;
                }
                (s.name, c)
            })
            .collect(),
        _ => default_scenarios(&base),
    };
    let table = run_comparison(&runs, seed)?;
    for (i, row) in table.rows.iter().enumerate() {
        eprintln!(
            "{:<20} final loss {:.4e}  {:.3} s/round  total {:.1} s  ({:.3}x first)",
            row.name,
            row.final_loss,
            row.communication.seconds_per_round,
            row.total_seconds,
            table.time_ratio(i, 0)
        );
    }
    write_or_print(out, &table.to_csv())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Plan { layout, format, out } => plan(layout, *format, out.as_deref()),
        Command::Verify { layout } => verify(layout),
        Command::Analyze(args) => analyze(args),
        Command::Simulate {
            config,
            seed,
            out,
            overrides,
        } => simulate(config, *seed, out.as_deref(), overrides),
        Command::Compare {
            config,
            seed,
            out,
            overrides,
        } => compare(config, *seed, out.as_deref(), overrides),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
