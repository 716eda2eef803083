//! Command-line driver: de Finetti state evaluation, verification
//! campaigns, channel-distance checks, and wire-format export.
//!
//! Exit codes: 0 all checks passed, 1 a verification failed (or could not be
//! certified), 2 configuration error, 3 output I/O error. Reports are
//! deterministic for a fixed command line and seed, except for the
//! `elapsed_ms` field in JSON output.

use crate::boxes::Alphabet;
use crate::channels::{
    chsh_score_channel, coin_flip_channel, constant_channel, extension_family,
    seeded_score_channels, two_component_partitions, verify_diamond_bound, Channel, DiamondReport,
    Extension,
};
use crate::definetti::{
    materialize_tau_general, tau_chsh_entry, tau_chsh_entry_quadrature, tau_general_entry,
    tau_general_entry_quadrature,
};
use crate::rat::{format_rat, parse_rat};
use crate::reduction::{
    random_symmetric_box, reduction_campaign, test_bound_campaign, trial_seed, CampaignReport,
    InvariantTest, ReductionKind, TestCampaignReport,
};
use crate::symmetry::SymmetryTemplate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "boxlab",
    version,
    about = "Exact-arithmetic verification of de Finetti reductions on boxes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate de Finetti state entries, one per color-count class.
    Tau(TauArgs),
    /// Run a verification campaign.
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Channel-distance bounds over extension families.
    #[command(subcommand)]
    Diamond(DiamondCommand),
    /// Write boxes, templates, and channels in their JSON wire forms.
    Export(ExportArgs),
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Entrywise reduction bound on seeded random boxes.
    Reduction(ReductionArgs),
    /// Failure-probability transfer for invariant tests.
    Testbound(TestboundArgs),
}

#[derive(Subcommand)]
enum DiamondCommand {
    /// Trace-distance bound over seeded extension families.
    Verify(DiamondArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Exact,
    Quadrature,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    /// Joint CHSH alphabet, satisfied/violated symmetry, d = 1.
    Chsh,
    /// Symmetry template from --template.
    General,
    /// No symmetry: d = m(l-1).
    Plain,
}

#[derive(Args)]
struct TauArgs {
    /// Template: `chsh`, `plain:MxL`, or a template JSON file path.
    #[arg(long, default_value = "chsh")]
    template: String,
    /// Number of rounds.
    #[arg(long)]
    n: usize,
    #[arg(long, value_enum, default_value_t = Method::Exact)]
    method: Method,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReductionArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Template for --kind general: `chsh`, `plain:MxL`, or a JSON file.
    #[arg(long)]
    template: Option<String>,
    /// Inputs per round for --kind plain.
    #[arg(long, default_value_t = 2)]
    inputs: usize,
    /// Outputs per round for --kind plain.
    #[arg(long, default_value_t = 2)]
    outputs: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TestboundArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CHSH-score failure threshold (fail iff satisfied/n < threshold).
    #[arg(long, default_value = "3/4")]
    threshold: String,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DiamondArgs {
    #[arg(long)]
    n: usize,
    /// Channel pair(s): `chsh-score`, `chsh-score:p/q`, `seeded:K`, or
    /// `files:E.json,F.json`. Every pair is checked against the bound.
    #[arg(long, default_value = "chsh-score")]
    channels: String,
    /// Parent-box family: `seeded:K` draws K symmetric boxes.
    #[arg(long, default_value = "seeded:3")]
    family: String,
    /// Steps in the partition weight grid.
    #[arg(long, default_value_t = 2)]
    grid: usize,
    /// Deterministic perturbation directions per parent.
    #[arg(long, default_value_t = 2)]
    directions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Artifact: `tau-box`, `template`, `pr-box`, `score-channel`,
    /// `coin-channel`.
    #[arg(long)]
    what: String,
    /// Rounds, for box and channel artifacts.
    #[arg(long)]
    n: Option<usize>,
    /// Template for `tau-box` and `template` (same syntax as elsewhere).
    #[arg(long, default_value = "chsh")]
    template: String,
    /// Threshold for `score-channel`.
    #[arg(long, default_value = "3/4")]
    threshold: String,
    /// Destination file.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug)]
enum CliError {
    /// Bad flags, unreadable or unparseable input files. Exit 2.
    Config(String),
    /// Could not write the requested output. Exit 3.
    Io(String),
    /// A verification ran and did not certify the bound. Exit 1.
    Failed(String),
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    fn failed(e: impl std::fmt::Display) -> Self {
        CliError::Failed(e.to_string())
    }
}

/// Parses arguments from the process environment and runs the command.
/// Returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    let outcome = match cli.command {
        Command::Tau(args) => cmd_tau(&args),
        Command::Verify(VerifyCommand::Reduction(args)) => cmd_verify_reduction(&args),
        Command::Verify(VerifyCommand::Testbound(args)) => cmd_verify_testbound(&args),
        Command::Diamond(DiamondCommand::Verify(args)) => cmd_diamond_verify(&args),
        Command::Export(args) => cmd_export(&args),
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(CliError::Failed(msg)) => {
            eprintln!("verification failed: {msg}");
            1
        }
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            2
        }
        Err(CliError::Io(msg)) => {
            eprintln!("output error: {msg}");
            3
        }
    }
}

/// Honors BOXLAB_THREADS by capping the global worker pool. Silently keeps
/// the default when the variable is absent, malformed, or the pool was
/// already built.
fn configure_threads() {
    if let Ok(value) = std::env::var("BOXLAB_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

/// Resolves `chsh`, `plain:MxL`, or a JSON file path into a template.
fn resolve_template(spec: &str) -> Result<SymmetryTemplate, CliError> {
    if spec == "chsh" {
        return Ok(SymmetryTemplate::chsh());
    }
    if let Some(shape) = spec.strip_prefix("plain:") {
        let (m, l) = shape
            .split_once('x')
            .and_then(|(m, l)| Some((m.parse::<usize>().ok()?, l.parse::<usize>().ok()?)))
            .ok_or_else(|| {
                CliError::Config(format!("expected plain:MxL with integers, got `{spec}`"))
            })?;
        return SymmetryTemplate::no_symmetry(m, l).map_err(CliError::config);
    }
    let text = std::fs::read_to_string(spec)
        .map_err(|e| CliError::Config(format!("cannot read template file `{spec}`: {e}")))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid template file `{spec}`: {e}")))
}

fn read_channel(path: &str) -> Result<Channel, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read channel file `{path}`: {e}")))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid channel file `{path}`: {e}")))
}

fn emit(content: &str, output: Option<&Path>) -> Result<(), CliError> {
    match output {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| CliError::Io(format!("cannot write `{}`: {e}", path.display()))),
        None => {
            println!("{content}");
            Ok(())
        }
    }
}

/// JSON wrapper adding the one nondeterministic field.
#[derive(Serialize)]
struct Timed<T: Serialize> {
    elapsed_ms: u128,
    #[serde(flatten)]
    report: T,
}

#[derive(Serialize)]
#[serde(untagged)]
enum TauEntryOut {
    Chsh {
        #[serde(rename = "N")]
        satisfied: usize,
        value: String,
    },
    General {
        counts: Vec<usize>,
        value: String,
    },
}

#[derive(Serialize)]
struct TauOut {
    entries: Vec<TauEntryOut>,
}

fn cmd_tau(args: &TauArgs) -> Result<bool, CliError> {
    if args.n == 0 {
        return Err(CliError::Config("--n must be at least 1".into()));
    }
    let template = resolve_template(&args.template)?;
    let n = args.n;
    let is_chsh = template == SymmetryTemplate::chsh();
    let mut entries = Vec::new();
    if is_chsh {
        for satisfied in 0..=n {
            let value = match args.method {
                Method::Exact => format_rat(&tau_chsh_entry(n, satisfied).map_err(CliError::config)?),
                Method::Quadrature => tau_chsh_entry_quadrature(n, satisfied)
                    .map_err(CliError::config)?
                    .to_string(),
            };
            entries.push(TauEntryOut::Chsh { satisfied, value });
        }
    } else {
        for counts in template.reachable_counts(n) {
            let value = match args.method {
                Method::Exact => {
                    format_rat(&tau_general_entry(&template, n, &counts).map_err(CliError::config)?)
                }
                Method::Quadrature => tau_general_entry_quadrature(&template, n, &counts)
                    .map_err(CliError::config)?
                    .to_string(),
            };
            entries.push(TauEntryOut::General {
                counts: counts.0,
                value,
            });
        }
    }
    let content = match args.format {
        Format::Json => serde_json::to_string_pretty(&TauOut { entries })
            .expect("tau report serializes"),
        Format::Csv => {
            let mut out = String::new();
            out.push_str(if is_chsh { "N,value\n" } else { "counts,value\n" });
            for e in &entries {
                match e {
                    TauEntryOut::Chsh { satisfied, value } => {
                        let _ = writeln!(out, "{satisfied},{value}");
                    }
                    TauEntryOut::General { counts, value } => {
                        let joined: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
                        let _ = writeln!(out, "{},{value}", joined.join(":"));
                    }
                }
            }
            out.trim_end().to_string()
        }
        Format::Text => {
            let mut out = format!(
                "de Finetti state entries: template={} n={} d={}\n",
                args.template,
                n,
                template.degrees_of_freedom()
            );
            for e in &entries {
                match e {
                    TauEntryOut::Chsh { satisfied, value } => {
                        let _ = writeln!(out, "  N={satisfied}  value={value}");
                    }
                    TauEntryOut::General { counts, value } => {
                        let _ = writeln!(out, "  counts={counts:?}  value={value}");
                    }
                }
            }
            out.trim_end().to_string()
        }
    };
    emit(&content, args.output.as_deref())?;
    Ok(true)
}

fn resolve_kind(args: &ReductionArgs) -> Result<ReductionKind, CliError> {
    match args.kind {
        KindArg::Chsh => Ok(ReductionKind::Chsh),
        KindArg::General => {
            let spec = args.template.as_deref().ok_or_else(|| {
                CliError::Config("--kind general needs --template".into())
            })?;
            Ok(ReductionKind::Template(resolve_template(spec)?))
        }
        KindArg::Plain => Ok(ReductionKind::Plain {
            inputs: args.inputs,
            outputs: args.outputs,
        }),
    }
}

fn render_campaign(report: &CampaignReport, format: Format, elapsed_ms: u128) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(&Timed {
            elapsed_ms,
            report,
        })
        .expect("campaign report serializes"),
        Format::Csv => {
            let mut out = String::from("trial,max_ratio,witness_output,witness_input,holds\n");
            for t in &report.trial_reports {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    t.trial,
                    format_rat(&t.max_ratio),
                    t.witness_output,
                    t.witness_input,
                    t.holds
                );
            }
            out.trim_end().to_string()
        }
        Format::Text => {
            let mut out = format!(
                "reduction campaign: kind={} n={} trials={} seed={}\n\
                 prefactor={}  worst_ratio={}  failures={}\n",
                report.kind,
                report.rounds,
                report.trials,
                report.seed,
                format_rat(&report.prefactor),
                format_rat(&report.worst_ratio),
                report.failures
            );
            let _ = writeln!(
                out,
                "{}  ({} ms)",
                if report.all_hold { "PASS" } else { "FAIL" },
                elapsed_ms
            );
            out.trim_end().to_string()
        }
    }
}

fn cmd_verify_reduction(args: &ReductionArgs) -> Result<bool, CliError> {
    if args.n == 0 || args.trials == 0 {
        return Err(CliError::Config("--n and --trials must be at least 1".into()));
    }
    let kind = resolve_kind(args)?;
    let start = Instant::now();
    let report =
        reduction_campaign(&kind, args.n, args.trials, args.seed).map_err(CliError::failed)?;
    let elapsed_ms = start.elapsed().as_millis();
    let content = render_campaign(&report, args.format, elapsed_ms);
    emit(&content, args.output.as_deref())?;
    Ok(report.all_hold)
}

#[derive(Serialize)]
struct FixtureOut {
    fixture: String,
    #[serde(flatten)]
    report: TestCampaignReport,
}

#[derive(Serialize)]
struct TestboundOut {
    n: usize,
    trials: usize,
    seed: u64,
    threshold: String,
    all_hold: bool,
    fixtures: Vec<FixtureOut>,
}

fn cmd_verify_testbound(args: &TestboundArgs) -> Result<bool, CliError> {
    if args.n == 0 || args.trials == 0 {
        return Err(CliError::Config("--n and --trials must be at least 1".into()));
    }
    let threshold = parse_rat(&args.threshold).map_err(CliError::config)?;
    let n = args.n;
    let fixtures = [
        ("chsh-score".to_string(), chsh_score_channel(n, &threshold)),
        ("always-fail".to_string(), constant_channel(n, true)),
        ("coin-flip".to_string(), coin_flip_channel(n)),
    ];
    let start = Instant::now();
    let mut all_hold = true;
    let mut outs = Vec::new();
    for (name, channel) in fixtures {
        let test = InvariantTest::new(channel).map_err(CliError::failed)?;
        let report = test_bound_campaign(&test, &ReductionKind::Chsh, n, args.trials, args.seed)
            .map_err(CliError::failed)?;
        all_hold &= report.all_hold;
        outs.push(FixtureOut {
            fixture: name,
            report,
        });
    }
    let elapsed_ms = start.elapsed().as_millis();
    let payload = TestboundOut {
        n,
        trials: args.trials,
        seed: args.seed,
        threshold: format_rat(&threshold),
        all_hold,
        fixtures: outs,
    };
    let content = match args.format {
        Format::Json => serde_json::to_string_pretty(&Timed {
            elapsed_ms,
            report: &payload,
        })
        .expect("testbound report serializes"),
        Format::Csv => {
            let mut out = String::from("fixture,trial,failure_box,failure_tau,holds\n");
            for f in &payload.fixtures {
                for t in &f.report.trial_reports {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        f.fixture,
                        t.trial,
                        format_rat(&t.failure_box),
                        format_rat(&t.failure_tau),
                        t.holds
                    );
                }
            }
            out.trim_end().to_string()
        }
        Format::Text => {
            let mut out = format!(
                "test-bound campaign: n={} trials={} seed={} threshold={}\n",
                n, args.trials, args.seed, payload.threshold
            );
            for f in &payload.fixtures {
                let _ = writeln!(
                    out,
                    "  {}: prefactor={} failures={} {}",
                    f.fixture,
                    format_rat(&f.report.prefactor),
                    f.report.failures,
                    if f.report.all_hold { "PASS" } else { "FAIL" }
                );
            }
            let _ = writeln!(
                out,
                "{}  ({} ms)",
                if payload.all_hold { "PASS" } else { "FAIL" },
                elapsed_ms
            );
            out.trim_end().to_string()
        }
    };
    emit(&content, args.output.as_deref())?;
    Ok(all_hold)
}

#[derive(Serialize)]
struct DiamondPairOut {
    pair: String,
    #[serde(flatten)]
    report: DiamondReport,
}

#[derive(Serialize)]
struct DiamondOut {
    n: usize,
    channels: String,
    family: String,
    grid: usize,
    directions: usize,
    seed: u64,
    all_hold: bool,
    pairs: Vec<DiamondPairOut>,
}

/// Channel pairs to compare; every fixture is paired against the
/// constant-success channel.
fn resolve_channel_pairs(
    spec: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<(String, Channel, Channel)>, CliError> {
    let pass = constant_channel(n, false);
    if spec == "chsh-score" {
        let threshold = parse_rat("3/4").expect("literal parses");
        return Ok(vec![(
            "chsh-score:3/4 vs pass".into(),
            chsh_score_channel(n, &threshold),
            pass,
        )]);
    }
    if let Some(t) = spec.strip_prefix("chsh-score:") {
        let threshold = parse_rat(t).map_err(CliError::config)?;
        return Ok(vec![(
            format!("chsh-score:{t} vs pass"),
            chsh_score_channel(n, &threshold),
            pass,
        )]);
    }
    if let Some(k) = spec.strip_prefix("seeded:") {
        let count: usize = k
            .parse()
            .map_err(|_| CliError::Config(format!("expected seeded:K, got `{spec}`")))?;
        return Ok(seeded_score_channels(n, count, seed)
            .into_iter()
            .enumerate()
            .map(|(i, ch)| (format!("seeded-{i} vs pass"), ch, pass.clone()))
            .collect());
    }
    if let Some(files) = spec.strip_prefix("files:") {
        let (e_path, f_path) = files.split_once(',').ok_or_else(|| {
            CliError::Config(format!("expected files:E.json,F.json, got `{spec}`"))
        })?;
        return Ok(vec![(
            format!("{e_path} vs {f_path}"),
            read_channel(e_path)?,
            read_channel(f_path)?,
        )]);
    }
    Err(CliError::Config(format!("unknown channel spec `{spec}`")))
}

/// Seeded symmetric parent boxes with their two-component extension
/// families, combined into one family for the bound check.
fn resolve_family(
    spec: &str,
    n: usize,
    grid: usize,
    directions: usize,
    seed: u64,
) -> Result<Vec<Extension>, CliError> {
    let count = spec
        .strip_prefix("seeded:")
        .and_then(|k| k.parse::<usize>().ok())
        .ok_or_else(|| CliError::Config(format!("expected seeded:K, got `{spec}`")))?;
    let template = SymmetryTemplate::chsh();
    let alphabet = Alphabet::chsh(n);
    let mut family = Vec::new();
    for i in 0..count {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(trial_seed(seed, i));
        let parent =
            random_symmetric_box(&alphabet, &template, &mut rng).map_err(CliError::failed)?;
        let partitions = two_component_partitions(&parent, grid, directions, trial_seed(seed, i))
            .map_err(CliError::failed)?;
        family.extend(extension_family(&parent, &partitions).map_err(CliError::failed)?);
    }
    Ok(family)
}

fn cmd_diamond_verify(args: &DiamondArgs) -> Result<bool, CliError> {
    if args.n == 0 {
        return Err(CliError::Config("--n must be at least 1".into()));
    }
    let pairs = resolve_channel_pairs(&args.channels, args.n, args.seed)?;
    let family = resolve_family(&args.family, args.n, args.grid, args.directions, args.seed)?;
    let template = SymmetryTemplate::chsh();
    let start = Instant::now();
    let mut outs = Vec::new();
    let mut all_hold = true;
    for (label, e, f) in &pairs {
        let report =
            verify_diamond_bound(e, f, &template, &family).map_err(CliError::failed)?;
        all_hold &= report.holds;
        outs.push(DiamondPairOut {
            pair: label.clone(),
            report,
        });
    }
    let elapsed_ms = start.elapsed().as_millis();
    let payload = DiamondOut {
        n: args.n,
        channels: args.channels.clone(),
        family: args.family.clone(),
        grid: args.grid,
        directions: args.directions,
        seed: args.seed,
        all_hold,
        pairs: outs,
    };
    let content = match args.format {
        Format::Json => serde_json::to_string_pretty(&Timed {
            elapsed_ms,
            report: &payload,
        })
        .expect("diamond report serializes"),
        Format::Csv => {
            let mut out =
                String::from("pair,instance,parent_distance,tau_distance,bound_ok\n");
            for p in &payload.pairs {
                for (i, inst) in p.report.instances.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        p.pair,
                        i,
                        format_rat(&inst.parent_distance),
                        format_rat(&inst.tau_distance),
                        inst.bound_ok
                    );
                }
            }
            out.trim_end().to_string()
        }
        Format::Text => {
            let mut out = format!(
                "diamond campaign: n={} channels={} family={} grid={} seed={}\n",
                args.n, args.channels, args.family, args.grid, args.seed
            );
            for p in &payload.pairs {
                let _ = writeln!(
                    out,
                    "  {}: worst_ratio={} prefactor={} {}",
                    p.pair,
                    format_rat(&p.report.worst_ratio),
                    format_rat(&p.report.prefactor),
                    if p.report.holds { "PASS" } else { "FAIL" }
                );
            }
            let _ = writeln!(
                out,
                "{}  ({} ms)",
                if payload.all_hold { "PASS" } else { "FAIL" },
                elapsed_ms
            );
            out.trim_end().to_string()
        }
    };
    emit(&content, args.output.as_deref())?;
    Ok(all_hold)
}

fn cmd_export(args: &ExportArgs) -> Result<bool, CliError> {
    let need_n = || {
        args.n
            .ok_or_else(|| CliError::Config(format!("--what {} needs --n", args.what)))
    };
    let (description, content) = match args.what.as_str() {
        "tau-box" => {
            let n = need_n()?;
            let template = resolve_template(&args.template)?;
            let tau = materialize_tau_general(&template, n).map_err(CliError::config)?;
            (
                format!("de Finetti box (template={}, n={n})", args.template),
                serde_json::to_string_pretty(&tau).expect("box serializes"),
            )
        }
        "template" => {
            let template = resolve_template(&args.template)?;
            (
                format!("template {}", args.template),
                serde_json::to_string_pretty(&template).expect("template serializes"),
            )
        }
        "pr-box" => {
            let n = need_n()?;
            let b = crate::symmetry::pr_box(n);
            (
                format!("PR power box (n={n})"),
                serde_json::to_string_pretty(&b).expect("box serializes"),
            )
        }
        "score-channel" => {
            let n = need_n()?;
            let threshold = parse_rat(&args.threshold).map_err(CliError::config)?;
            let ch = chsh_score_channel(n, &threshold);
            (
                format!("CHSH score channel (n={n}, threshold={})", args.threshold),
                serde_json::to_string_pretty(&ch).expect("channel serializes"),
            )
        }
        "coin-channel" => {
            let n = need_n()?;
            let ch = coin_flip_channel(n);
            (
                format!("coin flip channel (n={n})"),
                serde_json::to_string_pretty(&ch).expect("channel serializes"),
            )
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown artifact `{other}`; expected tau-box, template, pr-box, \
                 score-channel, or coin-channel"
            )))
        }
    };
    std::fs::write(&args.output, &content).map_err(|e| {
        CliError::Io(format!("cannot write `{}`: {e}", args.output.display()))
    })?;
    println!("wrote {description} to {}", args.output.display());
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_specs_resolve() {
        assert_eq!(resolve_template("chsh").unwrap(), SymmetryTemplate::chsh());
        let plain = resolve_template("plain:3x2").unwrap();
        assert_eq!(plain.num_inputs(), 3);
        assert_eq!(plain.num_outputs(), 2);
        assert_eq!(plain.degrees_of_freedom(), 3);
        assert!(matches!(
            resolve_template("plain:axb"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            resolve_template("/nonexistent/t.json"),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn channel_pair_specs_resolve() {
        assert_eq!(resolve_channel_pairs("chsh-score", 1, 0).unwrap().len(), 1);
        assert_eq!(resolve_channel_pairs("seeded:3", 1, 0).unwrap().len(), 3);
        assert!(matches!(
            resolve_channel_pairs("bogus", 1, 0),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            resolve_channel_pairs("seeded:x", 1, 0),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn tau_json_has_the_documented_shape() {
        let entries = TauOut {
            entries: vec![TauEntryOut::Chsh {
                satisfied: 1,
                value: "1/4".into(),
            }],
        };
        assert_eq!(
            serde_json::to_string(&entries).unwrap(),
            r#"{"entries":[{"N":1,"value":"1/4"}]}"#
        );
    }
}
