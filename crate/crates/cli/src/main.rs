mod args;
mod commands;
mod manifest;

use std::io::ErrorKind;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Invalid invocation that clap cannot detect on its own.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// An input produced by an earlier command is missing.
#[derive(Debug)]
pub struct MissingArtifact {
    pub path: std::path::PathBuf,
    pub what: &'static str,
    pub producer: &'static str,
}

impl std::fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} not found at {}; run `collabvd {}` first",
            self.what,
            self.path.display(),
            self.producer
        )
    }
}

impl std::error::Error for MissingArtifact {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<MissingArtifact>() {
            return 2;
        }
        let not_found = match cause.downcast_ref::<collabvd::Error>() {
            Some(collabvd::Error::Io { error, .. }) => error.kind() == ErrorKind::NotFound,
            _ => cause
                .downcast_ref::<std::io::Error>()
                .is_some_and(|e| e.kind() == ErrorKind::NotFound),
        };
        if not_found {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = (|| {
        let cfg = commands::load_config(cli.config.as_deref())?;
        match cli.command {
            Command::Ingest(a) => commands::ingest(cfg, a),
            Command::Assess(a) => commands::assess(cfg, a),
            Command::Synthesize(a) => commands::synthesize(cfg, a),
            Command::Train(a) => commands::train(cfg, a),
            Command::Predict(a) => commands::predict(cfg, a),
            Command::Evaluate(a) => commands::evaluate(cfg, a),
            Command::Compare(a) => commands::compare(cfg, a),
            Command::Ablate(a) => commands::ablate(cfg, a),
            Command::ShowConfig => commands::show_config(&cfg),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
