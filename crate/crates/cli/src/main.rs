//! `kfed`: run and inspect federation jobs.
//!
//! Exit codes: 0 success, 1 runtime failure or leak found, 2 bad config or
//! usage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kfed::orchestrator::{
    parse_forbidden, psi_files, report, run_config, run_party, scan_for_leaks, write_key_file, JobConfig, JobError,
};
use kfed::transport::{audit_assert_no_leak, AuditLog, PartyId};

#[derive(Parser)]
#[command(name = "kfed", version, about = "Federated learning and knowledge jobs over private party data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a job config and its input files without running anything.
    Validate { config: PathBuf },
    /// Run a job. With --party, run one party's share over TCP.
    Run {
        config: PathBuf,
        #[arg(long)]
        party: Option<String>,
    },
    /// Generate a channel key pair; writes the secret and prints the public key.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        /// Party the key is for (only used in the printed snippet).
        #[arg(long)]
        party: Option<String>,
    },
    /// Private set intersection of two party files (id, data, schema).
    Psi {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "modp2048")]
        group: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to save the PSI transcript.
        #[arg(long)]
        audit_out: Option<PathBuf>,
    },
    /// Search an audit log, or every file of a run directory, for forbidden patterns.
    Audit {
        path: PathBuf,
        /// Pattern file with `label=value` lines (`hex:` for raw bytes).
        #[arg(long)]
        forbid: PathBuf,
    },
    /// Summarize a finished run directory.
    Report { run_dir: PathBuf },
}

fn fail(e: &JobError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn validate(config: &Path) -> ExitCode {
    let checked = JobConfig::load(config).and_then(|cfg| cfg.check_data_inputs().map(|_| cfg));
    match checked {
        Ok(cfg) => {
            println!("ok: job {} ({} {} {})", cfg.job.id, cfg.job.kind, cfg.job.level, cfg.job.layout);
            if let Err(e) = cfg.check_inputs() {
                println!("note: {}", e.0);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(config: &Path, party: Option<String>) -> ExitCode {
    let cfg = match JobConfig::load(config) {
        Ok(c) => c,
        Err(e) => return fail(&e.into()),
    };
    if let Some(p) = party {
        return match run_party(&cfg, &PartyId::new(p.clone())) {
            Ok(Some(s)) => {
                println!("{p}: job {} finished, outputs in {}", s.job_id, s.output_dir.display());
                ExitCode::SUCCESS
            }
            Ok(None) => {
                println!("{p}: done");
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        };
    }
    match run_config(&cfg) {
        Ok(s) => {
            println!("job {} finished: {} rounds, {} envelopes", s.job_id, s.metrics.len(), s.envelopes);
            if let Some(m) = s.metrics.last() {
                println!("final train loss {:.6}, eval metric {:.6}", m.train_loss, m.eval_metric);
            }
            if let Some((name, value)) = &s.statistic {
                println!("{name} = {value}");
            }
            if !s.judgements.is_empty() {
                println!("{} judgement rows", s.judgements.len());
            }
            if let Some(d) = &s.knowledge_sha256 {
                println!("knowledge sha256 {d}");
            }
            println!("outputs in {}", s.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn audit(path: &Path, forbid: &Path) -> ExitCode {
    let patterns = match std::fs::read_to_string(forbid) {
        Ok(text) => match parse_forbidden(&text) {
            Ok(p) => p,
            Err(e) => return fail(&e.into()),
        },
        Err(e) => {
            eprintln!("error: {}: {e}", forbid.display());
            return ExitCode::from(2);
        }
    };
    if path.is_dir() {
        return match scan_for_leaks(path, &patterns) {
            Ok(hits) if hits.is_empty() => {
                println!("clean: no forbidden pattern under {}", path.display());
                ExitCode::SUCCESS
            }
            Ok(hits) => {
                for h in &hits {
                    println!("leak: {h}");
                }
                ExitCode::from(1)
            }
            Err(e) => fail(&e.into()),
        };
    }
    let log = match AuditLog::load(path) {
        Ok(l) => l,
        Err(e) => return fail(&e.into()),
    };
    match audit_assert_no_leak(&log, &patterns) {
        Ok(()) => {
            println!("clean: {} records checked", log.len());
            ExitCode::SUCCESS
        }
        Err(report) => {
            print!("leak: {report}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => validate(&config),
        Command::Run { config, party } => run(&config, party),
        Command::Keygen { out, party } => match write_key_file(&out) {
            Ok(public) => {
                if let Some(p) = party {
                    println!("# {p}");
                }
                println!("public_key = \"{public}\"");
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e.into()),
        },
        Command::Psi { a, b, group, seed, audit_out } => match psi_files(&a, &b, &group, seed) {
            Ok((size, log)) => {
                if let Some(p) = audit_out {
                    if let Err(e) = log.save(&p) {
                        return fail(&e.into());
                    }
                }
                println!("intersection size: {size}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Audit { path, forbid } => audit(&path, &forbid),
        Command::Report { run_dir } => match report(&run_dir) {
            Ok(r) => {
                print!("{}", r.summary);
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
    }
}
