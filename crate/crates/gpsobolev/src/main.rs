use clap::{Args, Parser, Subcommand};
use gpsobolev::cli::{
    cmd_analyze, cmd_sample, cmd_spectrum, cmd_verify_identities, verdict_exit_code,
};
use std::path::PathBuf;
use std::process::ExitCode;

/// Sobolev-regularity analysis and Karhunen-Loeve sampling of Gaussian
/// random fields.
#[derive(Parser)]
#[command(name = "gpsobolev", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (fallback: GPSOBOLEV_THREADS). Results are
    /// bit-identical for any value.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Decide W^{m,p} sample-path membership and write the report JSON.
    /// Exits 0 on PASS, 10 on FAIL, 11 on INCONCLUSIVE, 1 on error.
    Analyze(CommonArgs),
    /// Write the Nystrom spectrum (eigenvalues + eigenfunction samples) as CSV.
    Spectrum(CommonArgs),
    /// Write sampled Karhunen-Loeve paths as CSV.
    Sample(CommonArgs),
    /// Tabulate the diagonal/spectral/Mercer trace identities as JSON.
    VerifyIdentities(CommonArgs),
}

fn setup_threads(args: &CommonArgs) {
    gpsobolev::init_deterministic();
    let threads = args.threads.or_else(|| {
        std::env::var("GPSOBOLEV_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        // ignore failure when a global pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Analyze(args) => {
            setup_threads(args);
            match cmd_analyze(&args.config, args.out.as_deref(), args.seed) {
                Ok(report) => {
                    eprintln!("overall: {:?}", report.overall);
                    verdict_exit_code(report.overall)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    1
                }
            }
        }
        Command::Spectrum(args) => {
            setup_threads(args);
            run_simple(cmd_spectrum(&args.config, args.out.as_deref()))
        }
        Command::Sample(args) => {
            setup_threads(args);
            run_simple(cmd_sample(&args.config, args.out.as_deref(), args.seed))
        }
        Command::VerifyIdentities(args) => {
            setup_threads(args);
            run_simple(cmd_verify_identities(&args.config, args.out.as_deref()))
        }
    };
    ExitCode::from(code as u8)
}

fn run_simple(result: gpsobolev::Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
