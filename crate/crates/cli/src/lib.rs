//! Command-line harness over `blockflow-core`.
//!
//! Every run writes `<out-dir>/<command>.manifest.json`; `replay` re-executes
//! the recorded invocation. Exit codes: 0 success, 2 usage, 3 failed check or
//! broken invariant, 4 I/O or file format.

use std::ffi::OsString;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use blockflow_core::Error;
use clap::Parser;

pub mod args;
mod commands;
pub mod eval;
pub mod manifest;

pub use args::{Cli, Command, GlobalArgs};
pub use commands::describe_field;
pub use manifest::RunManifest;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    Usage(String),
    Check(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Check(m) | Failure::Io(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Input(_) => Failure::Usage(msg),
            Error::Io { .. } | Error::Format { .. } => Failure::Io(msg),
            Error::Invariant(_)
            | Error::Numerical { .. }
            | Error::BoundaryProbe { .. }
            | Error::Diverged { .. }
            | Error::Stalled { .. } => Failure::Check(msg),
        }
    }
}

/// What a command hands back for its manifest.
pub(crate) struct Outcome {
    pub config: serde_json::Value,
    pub seeds: Vec<(&'static str, u64)>,
    pub outputs: Vec<std::path::PathBuf>,
    /// A check that ran to completion but did not hold.
    pub failed_check: Option<String>,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.global, cli.command, argv) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

/// Runs one parsed command and writes its manifest.
pub fn execute(global: GlobalArgs, command: Command, argv: Vec<String>) -> Result<(), Failure> {
    if let Command::Replay(r) = &command {
        let recorded = RunManifest::read(&r.manifest)?;
        let mut g = recorded.global.clone();
        let mut invocation = recorded.invocation.clone();
        if let Some(dir) = &global.out_dir {
            invocation.redirect_outputs(dir);
            g.out_dir = Some(dir.clone());
        }
        if global.threads.is_some() {
            g.threads = global.threads;
        }
        log::info!("replaying {} from {}", recorded.command, r.manifest.display());
        return execute(g, invocation, argv);
    }

    let global = global.resolved();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(global.threads().max(1))
        .build()
        .map_err(|e| Failure::Usage(format!("cannot build thread pool: {e}")))?;
    let start = Instant::now();
    let outcome = pool.install(|| commands::dispatch(&global, &command))?;
    let mut seeds: std::collections::BTreeMap<String, u64> =
        outcome.seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    seeds.insert("seed".into(), global.seed());
    let manifest = RunManifest {
        format: manifest::RUN_FORMAT.into(),
        version: 1,
        command: command.name().into(),
        argv,
        global: global.clone(),
        invocation: command,
        config: outcome.config,
        seeds,
        git_describe: manifest::git_describe(),
        duration_secs: start.elapsed().as_secs_f64(),
        outputs: outcome.outputs,
    };
    let path = manifest.write(&global.out_dir())?;
    log::info!("wrote {}", path.display());
    match outcome.failed_check {
        Some(msg) => Err(Failure::Check(msg)),
        None => Ok(()),
    }
}
