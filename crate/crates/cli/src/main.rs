//! `trendsift` — discover recurring visual changes across a city's street
//! imagery.
//!
//! The pipeline runs as separate commands sharing one output directory:
//! `ingest` groups capture points into per-location image sequences,
//! `detect` turns sequences into a change store, `propose` clusters change
//! abstractions into trend proposals, `verify` confirms proposals against
//! the change pool, and `export` renders the confirmed trends as GeoJSON
//! plus a static report. `query` answers conditioned questions from the
//! same stores, `eval` scores a run against label files, and `gen` writes
//! a self-contained synthetic demo workspace to try it all out.
//!
//! Commands are idempotent: re-running one whose inputs and parameters are
//! unchanged is a no-op.

mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use trendsift::eval::LabeledPair;
use trendsift::gateway::Gateway;
use trendsift::pipeline::{self, QueryParams};
use trendsift::store::write_ndjson;
use trendsift::trends::{parse_rank_mode, QueryCondition};
use trendsift::worldgen::{build_city_world, CityWorld, CityWorldParams};

use config::{parse_window, runtime, usage, CliError, Ctx};

#[derive(Parser)]
#[command(
    name = "trendsift",
    version,
    about = "City-scale trend discovery over street imagery",
    after_help = "Start with `trendsift gen` for a synthetic demo workspace."
)]
struct Cli {
    /// Run configuration file; defaults to ./trendsift.toml when present.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory for run artifacts (overrides the config).
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Run seed; all randomness flows from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fan-out width for analyst calls; never affects results.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Exit nonzero if any analyst request exhausts its retries.
    #[arg(long, global = true)]
    fail_on_poison: bool,
    /// Print the stage report as JSON instead of a summary line.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic demo workspace: corpus, scripted analyst world,
    /// pair labels, and a ready-to-run config.
    Gen(GenArgs),
    /// Group the manifest's capture points into per-location sequences.
    Ingest(IngestArgs),
    /// Find per-location changes with the analyst (and optional critic).
    Detect(DetectArgs),
    /// Cluster change abstractions into trend proposals.
    Propose(ProposeArgs),
    /// Confirm proposals against the change pool (N of k shortlist).
    Verify(VerifyArgs),
    /// Run conditioned trend discovery into its own query directory.
    Query(QueryArgs),
    /// Score the run against label files.
    Eval(EvalArgs),
    /// Render confirmed trends as GeoJSON and a static report.
    Export,
}

#[derive(Args)]
struct GenArgs {
    /// Directory to create the workspace in (existing demo files are
    /// overwritten).
    #[arg(long, default_value = "demo", value_name = "DIR")]
    dir: PathBuf,
    /// Planted city-wide trends.
    #[arg(long, default_value_t = 5)]
    trends: usize,
    /// Member locations per trend.
    #[arg(long, default_value_t = 30)]
    locations_per_trend: usize,
    /// Sub-threshold distractor patterns.
    #[arg(long, default_value_t = 50)]
    distractors: usize,
    /// Member locations per distractor.
    #[arg(long, default_value_t = 2)]
    locations_per_distractor: usize,
    #[arg(long, default_value_t = 12)]
    images_per_location: usize,
    /// Scripted abstraction paraphrases per trend change.
    #[arg(long, default_value_t = 3)]
    paraphrases: usize,
}

#[derive(Args)]
struct IngestArgs {
    /// Capture-point manifest (NDJSON).
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    /// Grouping radius in meters.
    #[arg(long)]
    radius_m: Option<f64>,
    /// Suppression radius between selected viewpoints; defaults to twice
    /// the grouping radius.
    #[arg(long)]
    suppress_radius_m: Option<f64>,
    /// Minimum images for a sequence to be kept.
    #[arg(long)]
    min_images: Option<usize>,
}

#[derive(Args)]
struct DetectArgs {
    /// Run the self-critic pass over raw findings (true/false).
    #[arg(long, value_name = "BOOL")]
    critic: Option<bool>,
}

#[derive(Args)]
struct ProposeArgs {
    /// Tight canopy radius (cosine distance).
    #[arg(long)]
    tight: Option<f64>,
    /// Loose canopy radius (cosine distance).
    #[arg(long)]
    loose: Option<f64>,
    /// Minimum cluster size for a proposal to survive; defaults to k.
    #[arg(long)]
    min_members: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Confirmations required for a positive.
    #[arg(short, long)]
    n: Option<usize>,
    /// Shortlist size (per-proposal analyst budget).
    #[arg(short, long)]
    k: Option<usize>,
    /// Set k as a multiple of n instead of directly.
    #[arg(long, conflicts_with = "k")]
    k_multiple: Option<usize>,
    /// Stop querying a proposal once the decision is forced (true/false).
    #[arg(long, value_name = "BOOL")]
    early_exit: Option<bool>,
}

#[derive(Args)]
struct QueryArgs {
    /// Restrict to changes inside START..END (RFC 3339 instants).
    #[arg(long, value_name = "START..END")]
    time_window: Option<String>,
    /// Restrict to changes the analyst relates to this subject sentence.
    #[arg(long, value_name = "TEXT")]
    subject: Option<String>,
    /// Shortlist size for the subject filter.
    #[arg(long, value_name = "COUNT")]
    pool_size: Option<usize>,
    /// Query single images for unusual findings instead of change pairs.
    #[arg(long)]
    unusual: bool,
    /// Proposal ordering: most_detailed, period_delta, or
    /// stratified_by_word_count.
    #[arg(long, value_name = "MODE")]
    rank: Option<String>,
    /// Earlier window for period_delta ranking (START..END).
    #[arg(long, value_name = "START..END")]
    pre: Option<String>,
    /// Later window for period_delta ranking (START..END).
    #[arg(long, value_name = "START..END")]
    post: Option<String>,
    #[command(flatten)]
    verify: VerifyArgs,
    #[command(flatten)]
    propose: ProposeArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Pair-level change labels (NDJSON).
    #[arg(long, value_name = "FILE")]
    pair_labels: Option<PathBuf>,
    /// Trend-membership labels (NDJSON).
    #[arg(long, value_name = "FILE")]
    membership_labels: Option<PathBuf>,
    /// Resampled subsets for the detection-AP stability estimate.
    #[arg(long, value_name = "COUNT")]
    stability_subsets: Option<usize>,
    /// Fraction of pairs kept per subset.
    #[arg(long, value_name = "FRACTION")]
    stability_fraction: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Ctx::new(
        cli.config.as_deref(),
        cli.out_dir,
        cli.seed,
        cli.workers,
        cli.fail_on_poison,
        cli.json,
    )?;
    match cli.command {
        Command::Gen(args) => cmd_gen(&ctx, &args),
        Command::Ingest(args) => cmd_ingest(&ctx, args),
        Command::Detect(args) => cmd_detect(&ctx, &args),
        Command::Propose(args) => cmd_propose(&ctx, &args),
        Command::Verify(args) => cmd_verify(&ctx, &args),
        Command::Query(args) => cmd_query(&ctx, &args),
        Command::Eval(args) => cmd_eval(&ctx, args),
        Command::Export => cmd_export(&ctx),
    }
}

/// Print the stage report — one summary line, or the report JSON with
/// `--json`.
fn emit<R: Serialize>(ctx: &Ctx, report: &R, line: String) -> Result<(), CliError> {
    if ctx.json {
        let text = serde_json::to_string_pretty(report).map_err(runtime)?;
        println!("{text}");
    } else {
        println!("{line}");
    }
    Ok(())
}

fn cached(skipped: bool) -> &'static str {
    if skipped {
        " [unchanged, skipped]"
    } else {
        ""
    }
}

/// Run a gateway-backed stage and account for poison-store growth:
/// reported as a warning by default, fatal with --fail-on-poison.
fn with_gateway<R: Serialize>(
    ctx: &Ctx,
    stage: impl FnOnce(&Gateway) -> Result<(R, String), CliError>,
) -> Result<(), CliError> {
    let before = pipeline::poison_count(&ctx.out_dir);
    let gateway = ctx.gateway()?;
    let (report, line) = stage(&gateway)?;
    emit(ctx, &report, line)?;
    let grew = pipeline::poison_count(&ctx.out_dir).saturating_sub(before);
    if grew > 0 {
        let path = pipeline::poison_path(&ctx.out_dir);
        eprintln!(
            "warning: {grew} analyst request(s) exhausted retries; see {}",
            path.display()
        );
        if ctx.fail_on_poison {
            return Err(runtime(anyhow::anyhow!(
                "{grew} poisoned request(s) and --fail-on-poison is set"
            )));
        }
    }
    Ok(())
}

fn cmd_ingest(ctx: &Ctx, args: IngestArgs) -> Result<(), CliError> {
    let manifest = ctx.manifest(args.manifest)?;
    let params = ctx.ingest_params(args.radius_m, args.suppress_radius_m, args.min_images);
    let report = pipeline::run_ingest(&ctx.out_dir, &manifest, &params)?;
    let line = format!(
        "ingest: {} locations, {} sequences from {} points \
         ({} manifest rejects, {} thin sequences dropped){}",
        report.locations,
        report.sequences,
        report.points,
        report.manifest_rejects,
        report.sequences_rejected,
        cached(report.skipped)
    );
    emit(ctx, &report, line)
}

fn cmd_detect(ctx: &Ctx, args: &DetectArgs) -> Result<(), CliError> {
    let critic = ctx.critic(args.critic);
    with_gateway(ctx, |gateway| {
        let report = pipeline::run_detect(&ctx.out_dir, gateway, critic, ctx.workers)?;
        let s = &report.stage1;
        let line = format!(
            "detect: {} changes from {} sequences \
             ({} resumed, {} critic-rejected, {} poisoned){}",
            s.records_written,
            s.sequences_processed + s.sequences_resumed,
            s.sequences_resumed,
            s.critic_rejected,
            s.sequences_poisoned,
            cached(report.skipped)
        );
        Ok((report, line))
    })
}

fn cmd_propose(ctx: &Ctx, args: &ProposeArgs) -> Result<(), CliError> {
    let params = ctx.propose_params(args.tight, args.loose, args.min_members)?;
    with_gateway(ctx, |gateway| {
        let report = pipeline::run_propose(&ctx.out_dir, gateway, &params)?;
        let line = format!(
            "propose: {} proposals from {} canopies over {} abstraction texts{}",
            report.proposals,
            report.detail.clusters_total,
            report.detail.abstraction_texts,
            cached(report.skipped)
        );
        Ok((report, line))
    })
}

fn cmd_verify(ctx: &Ctx, args: &VerifyArgs) -> Result<(), CliError> {
    let params = ctx.verify_params(args.n, args.k, args.k_multiple, args.early_exit)?;
    with_gateway(ctx, |gateway| {
        let report = pipeline::run_verify(&ctx.out_dir, gateway, &params)?;
        let line = format!(
            "verify: {}/{} proposals confirmed over a pool of {} changes \
             ({} analyst queries){}",
            report.positives,
            report.proposals,
            report.pool_size,
            report.oracle_queries,
            cached(report.skipped)
        );
        Ok((report, line))
    })
}

fn cmd_query(ctx: &Ctx, args: &QueryArgs) -> Result<(), CliError> {
    let sec = &ctx.cfg.query;
    let window_text = args.time_window.as_deref().or(sec.time_window.as_deref());
    let condition = QueryCondition {
        time_window: window_text.map(parse_window).transpose()?,
        subject: args.subject.clone().or_else(|| sec.subject.clone()),
        pool_size: args.pool_size.or(sec.pool_size),
    };
    condition.validate()?;
    let rank_name = args.rank.as_deref().or(sec.rank.as_deref()).unwrap_or("most_detailed");
    let pre = args.pre.as_deref().or(sec.pre.as_deref()).map(parse_window).transpose()?;
    let post = args.post.as_deref().or(sec.post.as_deref()).map(parse_window).transpose()?;
    let rank = parse_rank_mode(rank_name, pre, post)?;
    let params = QueryParams {
        condition,
        unusual: args.unusual || sec.unusual.unwrap_or(false),
        rank,
        propose: ctx.propose_params(args.propose.tight, args.propose.loose, args.propose.min_members)?,
        verify: ctx.verify_params(
            args.verify.n,
            args.verify.k,
            args.verify.k_multiple,
            args.verify.early_exit,
        )?,
    };
    with_gateway(ctx, |gateway| {
        let report = pipeline::run_query(&ctx.out_dir, gateway, &params)?;
        let line = format!(
            "query {}: {} changes considered, {}/{} trends confirmed -> {}",
            report.query_id,
            report.changes_considered,
            report.positives,
            report.proposals,
            report.dir.display()
        );
        Ok((report, line))
    })
}

fn cmd_eval(ctx: &Ctx, args: EvalArgs) -> Result<(), CliError> {
    let params = ctx.eval_params(
        args.pair_labels,
        args.membership_labels,
        args.stability_subsets,
        args.stability_fraction,
    );
    with_gateway(ctx, |gateway| {
        let outcome = pipeline::run_eval(&ctx.out_dir, gateway, &params)?;
        let mut parts = Vec::new();
        if let Some(ap) = outcome.detection_ap {
            parts.push(format!("detection AP {ap:.4}"));
        }
        if let Some(stability) = &outcome.detection_stability {
            parts.push(format!(
                "stability {:.4} +/- {:.4} over {} subsets",
                stability.mean_ap, stability.std_ap, stability.evaluated
            ));
        }
        if let Some(ap) = outcome.membership_ap {
            parts.push(format!("membership AP {ap:.4}"));
        }
        let line = format!("eval: {} -> {}", parts.join(", "), outcome.metrics.display());
        Ok((outcome, line))
    })
}

fn cmd_export(ctx: &Ctx) -> Result<(), CliError> {
    let report = pipeline::run_export(&ctx.out_dir)?;
    let line = format!(
        "export: {} evidence points across {} trends -> {} and {}{}",
        report.features,
        report.positives,
        report.geojson.display(),
        report.report.display(),
        cached(report.skipped)
    );
    emit(ctx, &report, line)
}

// ---------------------------------------------------------------------------
// gen: a self-contained synthetic demo workspace.

#[derive(Serialize)]
struct GenReport {
    dir: PathBuf,
    capture_points: usize,
    planted_trends: usize,
    distractors: usize,
    pair_labels: usize,
    config: PathBuf,
}

fn cmd_gen(ctx: &Ctx, args: &GenArgs) -> Result<(), CliError> {
    if args.trends == 0 {
        return Err(usage("--trends must be at least 1"));
    }
    if args.images_per_location < 3 {
        return Err(usage(
            "--images-per-location must be at least 3 (a change needs a pair plus one stable frame)",
        ));
    }
    if args.paraphrases == 0 {
        return Err(usage("--paraphrases must be at least 1"));
    }
    if args.locations_per_distractor >= args.locations_per_trend {
        return Err(usage(
            "--locations-per-distractor must be smaller than --locations-per-trend, \
             otherwise distractors are indistinguishable from trends",
        ));
    }

    let params = CityWorldParams {
        seed: ctx.seed,
        trends: args.trends,
        locations_per_trend: args.locations_per_trend,
        distractors: args.distractors,
        locations_per_distractor: args.locations_per_distractor,
        images_per_location: args.images_per_location,
        paraphrases: args.paraphrases,
        embed_dim: 16.max(args.trends + 1),
        ..CityWorldParams::default()
    };
    let city = build_city_world(&params);

    let dir = &args.dir;
    fs::create_dir_all(dir)
        .map_err(|e| runtime(anyhow::anyhow!("cannot create {}: {e}", dir.display())))?;
    trendsift::worldgen::write_manifest(&dir.join("corpus/manifest.ndjson"), &city.points)
        .map_err(runtime)?;
    city.world.save(&dir.join("world.json")).map_err(runtime)?;
    let labels = demo_pair_labels(&city, &params);
    write_ndjson(&dir.join("labels/pairs.ndjson"), &labels).map_err(runtime)?;

    let config_path = dir.join(config::DEFAULT_CONFIG);
    fs::write(&config_path, demo_config(ctx.seed, args))
        .map_err(|e| runtime(anyhow::anyhow!("cannot write {}: {e}", config_path.display())))?;

    let report = GenReport {
        dir: dir.clone(),
        capture_points: city.points.len(),
        planted_trends: city.planted.len(),
        distractors: args.distractors,
        pair_labels: labels.len(),
        config: config_path.clone(),
    };
    let line = format!(
        "gen: demo workspace in {} ({} capture points, {} planted trends, {} distractors)\n\
         run it with:\n\
         \x20 trendsift ingest  --config {p}\n\
         \x20 trendsift detect  --config {p}\n\
         \x20 trendsift propose --config {p}\n\
         \x20 trendsift verify  --config {p}\n\
         \x20 trendsift export  --config {p}\n\
         \x20 trendsift eval    --config {p}",
        dir.display(),
        report.capture_points,
        report.planted_trends,
        report.distractors,
        p = config_path.display()
    );
    emit(ctx, &report, line)
}

/// Complete pair labels for the generated corpus: one label per
/// consecutive image pair of every location, positive where a change was
/// planted.
fn demo_pair_labels(city: &CityWorld, params: &CityWorldParams) -> Vec<LabeledPair> {
    let changed: std::collections::BTreeSet<(String, usize)> =
        city.truth.iter().map(|(loc, idx, _, _)| (loc.clone(), *idx)).collect();
    let mut names: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
    for point in &city.points {
        if let Some((name, _)) = point.id.split_once('/') {
            names.insert(name);
        }
    }
    let mut labels = Vec::new();
    for name in names {
        // NMS keeps the first capture point of each location, so that id
        // is the downstream location id.
        let location_id = format!("{name}/00");
        for pair_index in 1..params.images_per_location {
            labels.push(LabeledPair {
                location_id: location_id.clone(),
                pair_index,
                has_change: changed.contains(&(location_id.clone(), pair_index)),
            });
        }
    }
    labels
}

/// Verification parameters sized to the generated corpus: n below the
/// planted recurrence but above any distractor, k and the cluster filter
/// at the conventional 3n.
fn demo_verify_plan(args: &GenArgs) -> (usize, usize, usize) {
    let n = (args.locations_per_trend * 5 / 6).max(args.locations_per_distractor + 1).max(1);
    let k = 3 * n;
    let min_members = k.min(args.locations_per_trend * args.paraphrases);
    (n, k, min_members)
}

fn demo_config(seed: u64, args: &GenArgs) -> String {
    let (n, k, min_members) = demo_verify_plan(args);
    let min_images = args.images_per_location.min(trendsift::corpus::DEFAULT_MIN_IMAGES);
    format!(
        "# Generated demo workspace. Paths are relative to this file.\n\
         out_dir = \"out\"\n\
         manifest = \"corpus/manifest.ndjson\"\n\
         seed = {seed}\n\
         \n\
         [backend]\n\
         kind = \"synthetic\"\n\
         world_path = \"world.json\"\n\
         \n\
         [ingest]\n\
         min_images = {min_images}\n\
         \n\
         [propose]\n\
         min_members = {min_members}\n\
         \n\
         [verify]\n\
         n = {n}\n\
         k = {k}\n\
         \n\
         [eval]\n\
         pair_labels = \"labels/pairs.ndjson\"\n\
         stability_subsets = 200\n"
    )
}
