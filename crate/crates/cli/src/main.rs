//! Command-line front end: simulate single scenarios, compute steady
//! states, report mass-matrix ranks, and drive batch manifests.
//!
//! Exit codes: 0 success, 2 depletion, 3 density-floor violation,
//! 4 input error, 5 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use linepack_core::network::NetworkSpec;
use linepack_core::scenario::{
    rank_summary, run_batch, run_scenario, Overrides, ScenarioSpec, Technique,
    DEFAULT_SEGMENT_LENGTH_M,
};
use linepack_core::steady::solve_steady;
use linepack_core::Error;

#[derive(Parser)]
#[command(name = "linepack-sim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one scenario with the chosen boundary technique.
    Simulate {
        /// Network description (linepack-net/1 JSON).
        #[arg(long)]
        network: PathBuf,
        /// Scenario description (linepack-scn/1 JSON).
        #[arg(long)]
        scenario: PathBuf,
        /// Boundary technique: slack, sigmoid, or balancing.
        #[arg(long)]
        technique: String,
        /// Trajectory CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        rel_tol: Option<f64>,
        #[arg(long)]
        abs_tol: Option<f64>,
        /// Output sampling interval in seconds.
        #[arg(long)]
        dt_out: Option<f64>,
    },
    /// Solve the steady state implied by a scenario's anchor and print it.
    Steady {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Report numerical ranks of the full and reduced mass matrices.
    Rank {
        #[arg(long)]
        network: PathBuf,
        /// Density-boundary node for the reduced variant.
        #[arg(long)]
        slack_node: Option<String>,
        /// Balancing node for the reduced variant (defaults to a leaf).
        #[arg(long)]
        balancing_node: Option<String>,
        #[arg(long, default_value_t = DEFAULT_SEGMENT_LENGTH_M)]
        segment_length: f64,
    },
    /// Run every entry of a batch manifest; parallelism is capped by
    /// LINEPACK_SIM_THREADS.
    Batch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        rel_tol: Option<f64>,
        #[arg(long)]
        abs_tol: Option<f64>,
        #[arg(long)]
        dt_out: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Simulate {
            network,
            scenario,
            technique,
            csv,
            rel_tol,
            abs_tol,
            dt_out,
        } => {
            let tech = Technique::parse(&technique)?;
            let ovr = Overrides {
                rel_tol,
                abs_tol,
                dt_out,
            };
            let report = run_scenario(&network, &scenario, tech, csv.as_deref(), &ovr)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(report.exit_code())
        }
        Command::Steady { network, scenario } => {
            let net = NetworkSpec::from_file(&network)?;
            let scn = ScenarioSpec::from_file(&scenario)?;
            let vnet = linepack_core::network::build_network(net)?;
            let target = scn.segment_length_m.unwrap_or(DEFAULT_SEGMENT_LENGTH_M);
            let dnet: linepack_core::DiscretizedNetwork =
                linepack_core::network::discretize(&vnet, target)?;
            let anchor = dnet.node_by_id(&scn.anchor.node)?;
            let x = solve_steady(&dnet, &dnet.injection, &dnet.alpha, anchor, scn.anchor.density)?;
            let rho: serde_json::Map<String, serde_json::Value> = (0..dnet.n_physical)
                .map(|i| (format!("rho_{}", dnet.node_ids[i]), x.rho[i].into()))
                .collect();
            let flux: serde_json::Map<String, serde_json::Value> = dnet
                .pipe_segments
                .iter()
                .map(|segs| {
                    let first = segs[0];
                    let last = *segs.last().unwrap();
                    let from = &dnet.node_ids[dnet.seg_start[first]];
                    let to = &dnet.node_ids[dnet.seg_end[last]];
                    (format!("phi_{from}_{to}"), x.phi0[first].into())
                })
                .collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "densities_kg_m3": rho,
                    "fluxes_kg_m2_s": flux,
                    "linepack_kg": linepack_core::dynamics::linepack(&x, &dnet, &dnet.alpha),
                }))?
            );
            Ok(0)
        }
        Command::Rank {
            network,
            slack_node,
            balancing_node,
            segment_length,
        } => {
            let spec = NetworkSpec::from_file(&network)?;
            let summary = rank_summary(
                spec,
                slack_node.as_deref(),
                balancing_node.as_deref(),
                segment_length,
            )?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(0)
        }
        Command::Batch {
            manifest,
            rel_tol,
            abs_tol,
            dt_out,
        } => {
            let ovr = Overrides {
                rel_tol,
                abs_tol,
                dt_out,
            };
            let entries = run_batch(&manifest, &ovr)?;
            println!("{}", serde_json::to_string_pretty(&entries)?);
            // worst outcome across the batch decides the exit code
            let code = entries
                .iter()
                .map(|e| match (&e.report, &e.error) {
                    (Some(r), _) => r.exit_code(),
                    (None, _) => 5,
                })
                .max()
                .unwrap_or(0);
            Ok(code)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
