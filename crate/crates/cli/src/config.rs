//! Run configuration: one declarative TOML file with flag overrides on top.
//!
//! Every stage command reads the same file and the same precedence applies
//! throughout: command-line flags win over config values, config values win
//! over built-in defaults. Relative paths inside a config file resolve
//! against the file's own directory, so a generated workspace can be moved
//! or invoked from anywhere. Remote credentials never appear in a config;
//! backends name an environment variable and the secret is read from it at
//! request time.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::Deserialize;
use trendsift::corpus::{DEFAULT_MIN_IMAGES, DEFAULT_RADIUS_M};
use trendsift::gateway::{BackendConfig, Gateway, GatewayConfig};
use trendsift::pipeline::{self, EvalParams, IngestParams, PipelineError, VerifyParams};
use trendsift::trends::{
    ProposeParams, TimeWindow, TrendError, DEFAULT_K_MULTIPLE, DEFAULT_LOOSE, DEFAULT_N,
    DEFAULT_TIGHT,
};

/// Looked for in the working directory when `--config` is not given; a
/// missing default config is fine (everything falls back to defaults), a
/// missing explicit one is an error.
pub const DEFAULT_CONFIG: &str = "trendsift.toml";

/// Split invocation mistakes (exit 2) from failed runs (exit 1), so
/// scripts can tell "fix the command line" from "look at the run".
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            // `{:#}` flattens the cause chain into one line.
            CliError::Runtime(err) => write!(f, "{err:#}"),
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn runtime(err: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(err.into())
}

impl From<PipelineError> for CliError {
    fn from(err: PipelineError) -> Self {
        match &err {
            PipelineError::BadParams(_) => CliError::Usage(err.to_string()),
            PipelineError::Trend(inner) if is_usage(inner) => CliError::Usage(err.to_string()),
            _ => CliError::Runtime(err.into()),
        }
    }
}

impl From<TrendError> for CliError {
    fn from(err: TrendError) -> Self {
        if is_usage(&err) {
            CliError::Usage(err.to_string())
        } else {
            CliError::Runtime(err.into())
        }
    }
}

fn is_usage(err: &TrendError) -> bool {
    matches!(
        err,
        TrendError::BadParams(_) | TrendError::UnknownRankMode(_) | TrendError::PoolSize { .. }
    )
}

/// The config file as written. Every field is optional; [`Ctx`] fills in
/// defaults when resolving a command's parameters.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub out_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub seed: Option<u64>,
    pub backend: Option<BackendRef>,
    #[serde(default)]
    pub gateway: GatewaySection,
    #[serde(default)]
    pub ingest: IngestSection,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub propose: ProposeSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub query: QuerySection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// `backend = "backend.toml"` points at a shared backend file;
/// `[backend]` defines it inline. Both accept the same fields.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum BackendRef {
    Path(PathBuf),
    Inline(BackendSection),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    /// "remote" or "synthetic".
    pub kind: String,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token. The
    /// token itself never goes in a config file.
    pub auth_env: Option<String>,
    pub timeout_ms: Option<u64>,
    /// Scripted world for the synthetic backend.
    pub world_path: Option<PathBuf>,
    // Transport knobs may live next to the backend they tune; they win
    // over the [gateway] section.
    pub max_in_flight: Option<usize>,
    pub retry_attempts: Option<u32>,
    pub retry_base_delay_ms: Option<u64>,
}

impl BackendSection {
    fn to_backend_config(&self, base: &Path) -> Result<BackendConfig, CliError> {
        match self.kind.as_str() {
            "synthetic" => {
                let world_path = self.world_path.as_ref().ok_or_else(|| {
                    usage("synthetic backend needs world_path pointing at a scripted world file")
                })?;
                Ok(BackendConfig::Synthetic { world_path: resolve(base, world_path) })
            }
            "remote" => {
                let endpoint = self
                    .endpoint
                    .clone()
                    .ok_or_else(|| usage("remote backend needs an endpoint URL"))?;
                let model = self
                    .model
                    .clone()
                    .ok_or_else(|| usage("remote backend needs a model name"))?;
                Ok(BackendConfig::Remote {
                    endpoint,
                    model,
                    auth_env: self.auth_env.clone(),
                    timeout_ms: self.timeout_ms,
                })
            }
            other => Err(usage(format!(
                "unknown backend kind {other:?}; expected \"remote\" or \"synthetic\""
            ))),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySection {
    pub max_in_flight: Option<usize>,
    pub retry_attempts: Option<u32>,
    pub retry_base_delay_ms: Option<u64>,
    /// Role the analyst plays in prompts.
    pub role: Option<String>,
    /// Directory of prompt template overrides.
    pub template_dir: Option<PathBuf>,
    /// Fan-out width for analyst calls; never affects results.
    pub workers: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    pub radius_m: Option<f64>,
    pub suppress_radius_m: Option<f64>,
    pub min_images: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSection {
    pub critic: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposeSection {
    pub tight: Option<f64>,
    pub loose: Option<f64>,
    pub min_members: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub n: Option<usize>,
    /// Shortlist size. Give either `k` or `k_multiple`, not both.
    pub k: Option<usize>,
    pub k_multiple: Option<usize>,
    pub early_exit: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySection {
    pub rank: Option<String>,
    pub subject: Option<String>,
    pub pool_size: Option<usize>,
    /// "START..END", both RFC 3339 instants.
    pub time_window: Option<String>,
    pub pre: Option<String>,
    pub post: Option<String>,
    pub unusual: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub pair_labels: Option<PathBuf>,
    pub membership_labels: Option<PathBuf>,
    pub stability_subsets: Option<usize>,
    pub stability_fraction: Option<f64>,
}

pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn load(explicit: Option<&Path>) -> Result<(FileConfig, PathBuf), CliError> {
    let (path, required) = match explicit {
        Some(p) => (p.to_path_buf(), true),
        None => (PathBuf::from(DEFAULT_CONFIG), false),
    };
    if !path.exists() {
        if required {
            return Err(usage(format!("config file not found: {}", path.display())));
        }
        return Ok((FileConfig::default(), PathBuf::from(".")));
    }
    let text = fs::read_to_string(&path)
        .map_err(|e| runtime(anyhow::anyhow!("cannot read {}: {e}", path.display())))?;
    let cfg: FileConfig =
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let base = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    Ok((cfg, base))
}

/// Config file plus global flags, resolved once per invocation.
#[derive(Debug)]
pub struct Ctx {
    pub cfg: FileConfig,
    /// Directory the config file lives in; relative config paths resolve
    /// against it. Flag paths resolve against the working directory.
    pub base: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub workers: Option<usize>,
    pub fail_on_poison: bool,
    pub json: bool,
}

impl Ctx {
    pub fn new(
        config: Option<&Path>,
        out_dir: Option<PathBuf>,
        seed: Option<u64>,
        workers: Option<usize>,
        fail_on_poison: bool,
        json: bool,
    ) -> Result<Self, CliError> {
        let (cfg, base) = load(config)?;
        let out_dir = match out_dir {
            Some(dir) => dir,
            None => match &cfg.out_dir {
                Some(dir) => resolve(&base, dir),
                None => PathBuf::from("out"),
            },
        };
        let seed = seed.or(cfg.seed).unwrap_or(0);
        let workers = workers.or(cfg.gateway.workers);
        Ok(Self { cfg, base, out_dir, seed, workers, fail_on_poison, json })
    }

    pub fn manifest(&self, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        match flag {
            Some(path) => Ok(path),
            None => match &self.cfg.manifest {
                Some(path) => Ok(resolve(&self.base, path)),
                None => Err(usage(
                    "no manifest given: set `manifest` in the config or pass --manifest",
                )),
            },
        }
    }

    pub fn ingest_params(
        &self,
        radius_m: Option<f64>,
        suppress_radius_m: Option<f64>,
        min_images: Option<usize>,
    ) -> IngestParams {
        let sec = &self.cfg.ingest;
        let radius_m = radius_m.or(sec.radius_m).unwrap_or(DEFAULT_RADIUS_M);
        IngestParams {
            radius_m,
            suppress_radius_m: suppress_radius_m
                .or(sec.suppress_radius_m)
                .unwrap_or(radius_m * 2.0),
            min_images: min_images.or(sec.min_images).unwrap_or(DEFAULT_MIN_IMAGES),
        }
    }

    pub fn critic(&self, flag: Option<bool>) -> bool {
        flag.or(self.cfg.detect.critic).unwrap_or(true)
    }

    /// `n` defaults to 500 and `k` to 3n, so an unconfigured run gets the
    /// stock 500/1500 pair.
    pub fn verify_params(
        &self,
        n: Option<usize>,
        k: Option<usize>,
        k_multiple: Option<usize>,
        early_exit: Option<bool>,
    ) -> Result<VerifyParams, CliError> {
        let sec = &self.cfg.verify;
        let n = n.or(sec.n).unwrap_or(DEFAULT_N);
        let k = match (k, k_multiple) {
            (Some(_), Some(_)) => {
                return Err(usage("give either --k or --k-multiple, not both"));
            }
            (Some(k), None) => k,
            (None, Some(multiple)) => checked_k(n, multiple)?,
            (None, None) => match (sec.k, sec.k_multiple) {
                (Some(_), Some(_)) => {
                    return Err(usage(
                        "config sets both verify.k and verify.k_multiple; keep one",
                    ));
                }
                (Some(k), None) => k,
                (None, Some(multiple)) => checked_k(n, multiple)?,
                (None, None) => checked_k(n, DEFAULT_K_MULTIPLE)?,
            },
        };
        if n == 0 {
            return Err(usage("n must be at least 1"));
        }
        if k < n {
            return Err(usage(format!("k = {k} must be at least n = {n}")));
        }
        Ok(VerifyParams {
            n,
            k,
            early_exit: early_exit.or(sec.early_exit).unwrap_or(true),
            workers: self.workers,
        })
    }

    /// `min_members` defaults to the run's `k`, the conventional tie
    /// between the cluster-size filter and the verification shortlist.
    pub fn propose_params(
        &self,
        tight: Option<f64>,
        loose: Option<f64>,
        min_members: Option<usize>,
    ) -> Result<ProposeParams, CliError> {
        let sec = &self.cfg.propose;
        let min_members = match min_members.or(sec.min_members) {
            Some(m) => m,
            None => self.verify_params(None, None, None, None)?.k,
        };
        let tight = tight.or(sec.tight).unwrap_or(DEFAULT_TIGHT);
        let loose = loose.or(sec.loose).unwrap_or(DEFAULT_LOOSE);
        if tight > loose {
            return Err(usage(format!(
                "tight radius {tight} must not exceed loose radius {loose}"
            )));
        }
        if min_members == 0 {
            return Err(usage("min_members must be at least 1"));
        }
        Ok(ProposeParams { tight, loose, min_members, seed: self.seed })
    }

    pub fn eval_params(
        &self,
        pair_labels: Option<PathBuf>,
        membership_labels: Option<PathBuf>,
        stability_subsets: Option<usize>,
        stability_fraction: Option<f64>,
    ) -> EvalParams {
        let sec = &self.cfg.eval;
        EvalParams {
            pair_labels: pair_labels
                .or_else(|| sec.pair_labels.as_ref().map(|p| resolve(&self.base, p))),
            membership_labels: membership_labels
                .or_else(|| sec.membership_labels.as_ref().map(|p| resolve(&self.base, p))),
            stability_subsets: stability_subsets.or(sec.stability_subsets).unwrap_or(0),
            stability_fraction: stability_fraction.or(sec.stability_fraction).unwrap_or(0.75),
            seed: self.seed,
        }
    }

    /// Build the analyst gateway, pointing its poison store into the run
    /// directory.
    pub fn gateway(&self) -> Result<Gateway, CliError> {
        let (section, backend_base) = match &self.cfg.backend {
            None => {
                return Err(usage(
                    "no backend configured: add a [backend] table (or `backend = \"file.toml\"`) \
                     to the config",
                ));
            }
            Some(BackendRef::Inline(section)) => (section.clone(), self.base.clone()),
            Some(BackendRef::Path(path)) => {
                let path = resolve(&self.base, path);
                let text = fs::read_to_string(&path).map_err(|e| {
                    usage(format!("cannot read backend config {}: {e}", path.display()))
                })?;
                let section: BackendSection =
                    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                let base = match path.parent() {
                    Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                    _ => PathBuf::from("."),
                };
                (section, base)
            }
        };
        let backend_cfg = section.to_backend_config(&backend_base)?;

        let mut gcfg = GatewayConfig::default();
        let gw = &self.cfg.gateway;
        if let Some(limit) = gw.max_in_flight {
            gcfg.max_in_flight = limit;
        }
        if let Some(attempts) = gw.retry_attempts {
            gcfg.retry.attempts = attempts;
        }
        if let Some(ms) = gw.retry_base_delay_ms {
            gcfg.retry.base_delay = Duration::from_millis(ms);
        }
        if let Some(role) = &gw.role {
            gcfg.role = role.clone();
        }
        gcfg.template_dir = gw.template_dir.as_ref().map(|p| resolve(&self.base, p));
        if let Some(limit) = section.max_in_flight {
            gcfg.max_in_flight = limit;
        }
        if let Some(attempts) = section.retry_attempts {
            gcfg.retry.attempts = attempts;
        }
        if let Some(ms) = section.retry_base_delay_ms {
            gcfg.retry.base_delay = Duration::from_millis(ms);
        }
        gcfg.poison_path = Some(pipeline::poison_path(&self.out_dir));

        let backend = backend_cfg.build().map_err(runtime)?;
        Gateway::new(backend, gcfg).map_err(runtime)
    }
}

fn checked_k(n: usize, multiple: usize) -> Result<usize, CliError> {
    n.checked_mul(multiple)
        .ok_or_else(|| usage(format!("k = {n} x {multiple} overflows")))
}

/// Parse "START..END" into a window; both endpoints are RFC 3339 instants.
pub fn parse_window(text: &str) -> Result<TimeWindow, CliError> {
    let Some((start, end)) = text.split_once("..") else {
        return Err(usage(format!(
            "time window {text:?} is not in START..END form \
             (e.g. 2020-01-01T00:00:00Z..2020-07-01T00:00:00Z)"
        )));
    };
    let parse = |part: &str| -> Result<DateTime<Utc>, CliError> {
        DateTime::parse_from_rfc3339(part.trim())
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| usage(format!("bad instant {:?} in time window: {e}", part.trim())))
    };
    TimeWindow::new(parse(start)?, parse(end)?).map_err(CliError::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx_from(toml_text: &str) -> (tempfile::TempDir, Ctx) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trendsift.toml");
        fs::write(&path, toml_text).unwrap();
        let ctx = Ctx::new(Some(&path), None, None, None, false, false).unwrap();
        (dir, ctx)
    }

    #[test]
    fn defaults_give_the_stock_n_and_k() {
        let (_dir, ctx) = ctx_from("");
        let verify = ctx.verify_params(None, None, None, None).unwrap();
        assert_eq!((verify.n, verify.k), (500, 1500));
        assert!(verify.early_exit);
    }

    #[test]
    fn flags_win_over_config() {
        let (_dir, ctx) = ctx_from("[verify]\nn = 10\nk = 30\n");
        let verify = ctx.verify_params(Some(4), None, Some(5), None).unwrap();
        assert_eq!((verify.n, verify.k), (4, 20));
    }

    #[test]
    fn k_and_k_multiple_together_are_rejected() {
        let (_dir, ctx) = ctx_from("");
        let err = ctx.verify_params(Some(10), Some(30), Some(3), None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let (_dir, ctx) = ctx_from("[verify]\nn = 10\nk = 30\nk_multiple = 3\n");
        let err = ctx.verify_params(None, None, None, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn min_members_follows_k_unless_set() {
        let (_dir, ctx) = ctx_from("[verify]\nn = 10\n");
        assert_eq!(ctx.propose_params(None, None, None).unwrap().min_members, 30);
        let (_dir, ctx) = ctx_from("[propose]\nmin_members = 7\n");
        assert_eq!(ctx.propose_params(None, None, None).unwrap().min_members, 7);
    }

    #[test]
    fn relative_config_paths_resolve_against_the_config_dir() {
        let (_dir, ctx) = ctx_from("out_dir = \"runs/a\"\nmanifest = \"corpus/m.ndjson\"\n");
        assert_eq!(ctx.out_dir, ctx.base.join("runs/a"));
        assert_eq!(ctx.manifest(None).unwrap(), ctx.base.join("corpus/m.ndjson"));
        // A flag path is taken as given, relative to the working directory.
        assert_eq!(ctx.manifest(Some("other.ndjson".into())).unwrap(), Path::new("other.ndjson"));
    }

    #[test]
    fn unknown_config_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trendsift.toml");
        fs::write(&path, "[verify]\nenn = 10\n").unwrap();
        let err = Ctx::new(Some(&path), None, None, None, false, false).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("enn"), "{err}");
    }

    #[test]
    fn backend_table_must_name_a_known_kind() {
        let (_dir, ctx) = ctx_from("[backend]\nkind = \"synthetic\"\n");
        let Err(err) = ctx.gateway() else { panic!("synthetic backend without a world built") };
        assert!(err.to_string().contains("world_path"), "{err}");
        let (_dir, ctx) = ctx_from("[backend]\nkind = \"local\"\n");
        let Err(err) = ctx.gateway() else { panic!("unknown backend kind built") };
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn windows_parse_and_validate() {
        let window =
            parse_window("2020-01-01T00:00:00Z..2020-07-01T00:00:00Z").unwrap();
        assert!(window.start < window.end);
        assert!(parse_window("2020-01-01T00:00:00Z").is_err());
        assert!(parse_window("2020-07-01T00:00:00Z..2020-01-01T00:00:00Z").is_err());
    }
}
