//! Command-line interface. Local administration acts as the system actor on
//! the data directory; `serve` exposes the HTTP API.
//!
//! Exit codes: 0 success, 1 error, 2 usage, 3 a check that ran and failed
//! (invalid passport, blocking quality verdict, corrupt audit chain).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, IsTerminal, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use aegis_core::audit::{verify_bytes, AuditStorage, ChainStatus, SegmentedFileStorage};
use aegis_core::clock::{Clock, SystemClock};
use aegis_core::iam::{NewAccount, Role};
use aegis_core::interop::{
    ingest_dataset, CaseFormat, IdentifierPolicy, MappingProfile, UnitTable,
};
use aegis_core::monitor::Window;
use aegis_core::platform::pipeline::{prepare_dataset, CaseContext};
use aegis_core::quality::{default_rules, Verdict};
use aegis_core::registry::{
    parse_passport, validate_passport, AiPassport, DeclaredDimension, VariableSpec,
};
use aegis_core::{Caller, Platform, PlatformConfig, PlatformError};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::adapter::HttpFactory;
use crate::parse_seq_range;

pub const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "aegis",
    version,
    about = "Governance gateway for clinical AI services"
)]
pub struct Cli {
    /// Platform data directory (state, audit log, payload vault).
    #[arg(
        long,
        global = true,
        env = "AEGIS_DATA_DIR",
        default_value = "aegis-data"
    )]
    pub data_dir: PathBuf,
    /// Platform configuration (JSON). Defaults apply to omitted fields.
    #[arg(long, global = true, env = "AEGIS_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Serve the bundled stub model over the adapter protocol.
    StubModel {
        #[arg(long, default_value = "127.0.0.1:8090")]
        listen: SocketAddr,
    },
    /// Check passport documents
    #[command(subcommand)]
    Passport(PassportCmd),
    /// Register and list model services
    #[command(subcommand)]
    Service(ServiceCmd),
    /// Score case data against a schema
    #[command(subcommand)]
    Quality(QualityCmd),
    /// Verify and export the audit log
    #[command(subcommand)]
    Audit(AuditCmd),
    /// Compute performance snapshots
    #[command(subcommand)]
    Monitor(MonitorCmd),
    /// Manage accounts
    #[command(subcommand)]
    User(UserCmd),
    /// Print the effective configuration (defaults merged with `--config`).
    Config,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8443")]
    pub listen: SocketAddr,
    /// Development mode: plain HTTP. Recorded as unencrypted transport.
    #[arg(long)]
    pub dev: bool,
    /// PEM certificate chain.
    #[arg(long, required_unless_present = "dev")]
    pub tls_cert: Option<PathBuf>,
    /// PEM private key.
    #[arg(long, required_unless_present = "dev")]
    pub tls_key: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum PassportCmd {
    /// Check a passport document; prints the violations.
    Validate { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum ServiceCmd {
    /// Register a passport with its model endpoint.
    Register {
        file: PathBuf,
        #[arg(long)]
        endpoint: String,
    },
    /// List registered services.
    List,
}

#[derive(Debug, Subcommand)]
pub enum QualityCmd {
    /// Assess a dataset against a schema (a passport or a list of variables).
    Assess {
        #[arg(long)]
        schema: PathBuf,
        /// A JSON array of case documents, or one document.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "flat")]
        format: CaseFormat,
    },
}

#[derive(Debug, Subcommand)]
pub enum AuditCmd {
    /// Verify the hash chain of the data directory's log, or of an export.
    Verify {
        /// `a..b` (inclusive sequence numbers).
        #[arg(long)]
        range: Option<String>,
        /// Verify an exported file instead of the data directory.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Write the canonical serialization of a range of records.
    Export {
        #[arg(long)]
        range: Option<String>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum MonitorCmd {
    /// Compute performance snapshots for a window.
    Snapshot {
        /// All services when omitted.
        #[arg(long)]
        service: Option<String>,
        /// `2025-W23` or `2025-06-01..2025-07-01`; the current ISO week by default.
        #[arg(long)]
        window: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum UserCmd {
    /// Create an account. The secret is read from stdin.
    Add {
        #[command(flatten)]
        who: UserFields,
        #[arg(long, value_parser = parse_role)]
        role: Role,
    },
    /// Create the first administrator; refused once any account exists.
    Bootstrap {
        #[command(flatten)]
        who: UserFields,
    },
    /// List accounts.
    List,
}

#[derive(Debug, Args)]
pub struct UserFields {
    #[arg(long)]
    pub user_id: String,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub organisation: String,
}

fn parse_role(s: &str) -> Result<Role, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown role `{s}` (clinician, researcher, auditor, admin)"))
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            _ => ExitCode::FAILURE,
        }
    }
}

type CliResult<T = ExitCode> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn print_json<T: Serialize>(v: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Failed(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn load_config(path: Option<&Path>) -> CliResult<PlatformConfig> {
    let Some(path) = path else {
        return Ok(PlatformConfig::default());
    };
    serde_json::from_str(&read(path)?).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn open(cli: &Cli, config: PlatformConfig) -> CliResult<Platform> {
    Ok(Platform::open(
        &cli.data_dir,
        config,
        Arc::new(SystemClock),
        Arc::new(HttpFactory),
    )?)
}

fn read_secret(user_id: &str) -> CliResult<String> {
    let stdin = std::io::stdin();
    if stdin.is_terminal() {
        eprint!("secret for {user_id}: ");
        let _ = std::io::stderr().flush();
    }
    let mut line = String::new();
    stdin
        .lock()
        .read_line(&mut line)
        .map_err(|source| CliError::Io {
            path: PathBuf::from("<stdin>"),
            source,
        })?;
    let secret = line.trim_end_matches(['\r', '\n']).to_string();
    if secret.is_empty() {
        return Err(CliError::Usage("empty secret on stdin".into()));
    }
    Ok(secret)
}

pub fn run(cli: Cli) -> CliResult {
    let config = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Serve(args) => serve(&cli, config, args),
        Command::StubModel { listen } => {
            crate::server::serve_plain(crate::stub_server::router(), *listen).map_err(
                |source| CliError::Io {
                    path: PathBuf::from(listen.to_string()),
                    source,
                },
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Passport(PassportCmd::Validate { file }) => passport_validate(file),
        Command::Service(cmd) => {
            let platform = open(&cli, config)?;
            match cmd {
                ServiceCmd::Register { file, endpoint } => {
                    let passport = parse_passport(&read(file)?).map_err(|e| CliError::Parse {
                        path: file.clone(),
                        message: e.to_string(),
                    })?;
                    print_json(&platform.register_service(Caller::System, passport, endpoint)?)?;
                }
                ServiceCmd::List => print_json(&platform.services(Caller::System)?)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Quality(QualityCmd::Assess {
            schema,
            data,
            format,
        }) => quality_assess(schema, data, *format),
        Command::Audit(AuditCmd::Verify { range, file }) => {
            audit_verify(&cli, range.as_deref(), file.as_deref())
        }
        Command::Audit(AuditCmd::Export { range, out }) => {
            let range = range
                .as_deref()
                .map(parse_seq_range)
                .transpose()
                .map_err(CliError::Usage)?;
            let text = open(&cli, config)?.audit_export(Caller::System, range)?;
            match out {
                Some(path) => fs::write(path, text).map_err(|source| CliError::Io {
                    path: path.clone(),
                    source,
                })?,
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Monitor(MonitorCmd::Snapshot { service, window }) => {
            let window = match window {
                Some(w) => w
                    .parse::<Window>()
                    .map_err(|e| CliError::Usage(e.to_string()))?,
                None => Window::iso_week_of(SystemClock.now()),
            };
            let platform = open(&cli, config)?;
            let ids = match service {
                Some(s) => vec![s.clone()],
                None => platform
                    .services(Caller::System)?
                    .into_iter()
                    .map(|s| s.service_id)
                    .collect(),
            };
            let mut out = BTreeMap::new();
            for id in ids {
                let snaps = platform.compute_performance(Caller::System, &id, window.clone())?;
                out.insert(id, snaps);
            }
            print_json(&out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::User(cmd) => user(&cli, config, cmd),
        Command::Config => {
            print_json(&config)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn serve(cli: &Cli, mut config: PlatformConfig, args: &ServeArgs) -> CliResult {
    let tls = match (&args.tls_cert, &args.tls_key) {
        (Some(c), Some(k)) => Some((c.clone(), k.clone())),
        (None, None) if args.dev => None,
        _ => {
            return Err(CliError::Usage(
                "--tls-cert and --tls-key go together".into(),
            ))
        }
    };
    config.transport_encrypted = tls.is_some();
    let platform = Arc::new(open(cli, config)?);
    if !platform.has_users() {
        eprintln!("no accounts yet: run `aegis user bootstrap` first");
    }
    let router = crate::api::router(platform);
    let io = |source| CliError::Io {
        path: PathBuf::from(args.listen.to_string()),
        source,
    };
    match tls {
        Some((cert, key)) => {
            crate::server::serve_tls(router, args.listen, &cert, &key).map_err(io)?
        }
        None => crate::server::serve_plain(router, args.listen).map_err(io)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn passport_validate(file: &Path) -> CliResult {
    let report =
        validate_passport(&read(file)?, UnitTable::shipped()).map_err(|e| CliError::Parse {
            path: file.to_path_buf(),
            message: e.to_string(),
        })?;
    print_json(&report)?;
    Ok(if report.is_valid() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILED)
    })
}

/// A schema file holds either a whole passport or a bare variable list.
fn load_schema(
    path: &Path,
) -> CliResult<(
    String,
    Vec<VariableSpec>,
    BTreeMap<DeclaredDimension, String>,
)> {
    let text = read(path)?;
    let parse = |message: String| CliError::Parse {
        path: path.to_path_buf(),
        message,
    };
    if text.trim_start().starts_with('[') {
        let schema: Vec<VariableSpec> =
            serde_json::from_str(&text).map_err(|e| parse(e.to_string()))?;
        return Ok(("schema".into(), schema, BTreeMap::new()));
    }
    let passport: AiPassport = parse_passport(&text).map_err(|e| parse(e.to_string()))?;
    Ok((
        passport.service_id,
        passport.input_schema,
        passport.declared_quality,
    ))
}

fn quality_assess(schema: &Path, data: &Path, format: CaseFormat) -> CliResult {
    let (service_id, schema, declared) = load_schema(schema)?;
    let raws = ingest_dataset(
        &read(data)?,
        format,
        &IdentifierPolicy::default(),
        SystemClock.now(),
    )
    .map_err(|e| CliError::Parse {
        path: data.to_path_buf(),
        message: e.to_string(),
    })?;
    let profile = MappingProfile::identity(&service_id, &schema);
    let units = UnitTable::shipped();
    let rules = default_rules();
    let ctx = CaseContext {
        schema: &schema,
        declared: &declared,
        profile: &profile,
        units,
        rules: &rules,
    };
    let name = data
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let report =
        prepare_dataset(&name, &raws, &ctx).map_err(|e| CliError::Failed(e.to_string()))?;
    print_json(&report)?;
    Ok(if report.verdict == Verdict::Block {
        ExitCode::from(EXIT_CHECK_FAILED)
    } else {
        ExitCode::SUCCESS
    })
}

/// Reads the raw segments rather than opening the platform, which refuses a
/// corrupt chain.
fn audit_verify(cli: &Cli, range: Option<&str>, file: Option<&Path>) -> CliResult {
    let range = range
        .map(parse_seq_range)
        .transpose()
        .map_err(CliError::Usage)?;
    let bytes = match file {
        Some(path) => fs::read(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?,
        None => {
            let dir = cli.data_dir.join("audit");
            if !dir.is_dir() {
                return Err(CliError::Failed(format!("{}: no audit log", dir.display())));
            }
            let io = |source| CliError::Io {
                path: dir.clone(),
                source,
            };
            SegmentedFileStorage::open(&dir, SegmentedFileStorage::DEFAULT_SEGMENT_BYTES)
                .map_err(io)?
                .read_all()
                .map_err(io)?
        }
    };
    let status = verify_bytes(&bytes, range);
    print_json(&status)?;
    Ok(match status {
        ChainStatus::Ok { .. } => ExitCode::SUCCESS,
        ChainStatus::Corrupt { .. } => ExitCode::from(EXIT_CHECK_FAILED),
    })
}

fn user(cli: &Cli, config: PlatformConfig, cmd: &UserCmd) -> CliResult {
    let platform = open(cli, config)?;
    let (who, role) = match cmd {
        UserCmd::List => {
            print_json(&platform.users(Caller::System)?)?;
            return Ok(ExitCode::SUCCESS);
        }
        UserCmd::Add { who, role } => (who, *role),
        UserCmd::Bootstrap { who } => {
            if platform.has_users() {
                return Err(CliError::Failed(
                    "accounts already exist; use `aegis user add`".into(),
                ));
            }
            (who, Role::Admin)
        }
    };
    let secret = read_secret(&who.user_id)?;
    let account = platform.create_user(
        Caller::System,
        NewAccount {
            user_id: who.user_id.clone(),
            display_name: who.name.clone().unwrap_or_else(|| who.user_id.clone()),
            organisation: who.organisation.clone(),
            role,
            secret,
        },
    )?;
    print_json(&account)?;
    Ok(ExitCode::SUCCESS)
}
