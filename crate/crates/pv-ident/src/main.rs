use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pv_ident::config::load_config;
use pv_ident::harness::{
    calibrate_gain_multiplier, run_scenario, write_outputs, DumpOptions, ScenarioConfig,
    ScenarioKind,
};
use pv_ident::model::CATALOG;

#[derive(Parser)]
#[command(name = "pv-ident", about = "Online PV array parameter identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Stc,
    Modes,
    Custom,
}

#[derive(Subcommand)]
enum Command {
    /// Run an identification scenario and write estimates.csv,
    /// theta_error.csv and report.json.
    Run {
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
        /// Configuration file ([plant]/[filters]/[drem]/[scenario] sections).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep every n-th estimator sample in the recorded streams.
        #[arg(long)]
        decimation: Option<u32>,
        /// Also write the decimated regressor stream (regressor.csv).
        #[arg(long)]
        dump_regressor: bool,
        /// Also write the decimated extension/mixing stream (drem.csv).
        #[arg(long)]
        dump_drem: bool,
    },
    /// Bisect the global gain multiplier until the cold-start scenario
    /// converges at the target time.
    Calibrate {
        #[arg(long, value_name = "MS")]
        target_ms: f64,
    },
    /// Print the operating-mode catalog.
    Modes,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> pv_ident::Result<ExitCode> {
    match cli.command {
        Command::Run {
            scenario,
            config,
            out,
            decimation,
            dump_regressor,
            dump_drem,
        } => {
            let mut cfg = match (&config, scenario) {
                (Some(path), _) => load_config(path)?,
                (None, ScenarioArg::Stc) => ScenarioConfig::stc_defaults(),
                (None, ScenarioArg::Modes) => ScenarioConfig::modes_defaults(),
                (None, ScenarioArg::Custom) => {
                    return Err(pv_ident::PvError::Config(
                        "--scenario custom requires --config".into(),
                    ))
                }
            };
            // the CLI scenario choice wins over the file's id
            cfg.kind = match scenario {
                ScenarioArg::Stc => ScenarioKind::StcColdStart,
                ScenarioArg::Modes => ScenarioKind::ModeTracking,
                ScenarioArg::Custom => ScenarioKind::Custom,
            };
            if let Some(d) = decimation {
                cfg.decimation = d;
            }
            let dumps = DumpOptions {
                regressor: dump_regressor,
                drem: dump_drem,
            };
            let output = run_scenario(&cfg, &dumps)?;
            let dir = out
                .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));
            write_outputs(&output, &dir)?;

            let report = &output.report;
            println!("scenario: {:?}", report.scenario);
            for w in &report.windows {
                match (w.jump, w.decay_time) {
                    (Some(j), Some(d)) => println!(
                        "  window {} [{:.1} ms..{:.1} ms]: jump {:.4e}, decayed to 5% in {:.2} ms",
                        w.mode,
                        w.t_start * 1e3,
                        w.t_end * 1e3,
                        j,
                        d * 1e3
                    ),
                    (Some(j), None) => println!(
                        "  window {} [{:.1} ms..{:.1} ms]: jump {:.4e}, NOT decayed",
                        w.mode,
                        w.t_start * 1e3,
                        w.t_end * 1e3,
                        j
                    ),
                    _ => println!(
                        "  window {} [{:.1} ms..{:.1} ms]: convergence {}",
                        w.mode,
                        w.t_start * 1e3,
                        w.t_end * 1e3,
                        w.convergence_time
                            .map_or("NOT_CONVERGED".into(), |t| format!("{:.3} ms", t * 1e3))
                    ),
                }
            }
            println!(
                "excitation: integral {:.6e}, verdict {:?}",
                report.excitation_integral, report.excitation_verdict
            );
            println!("outputs in {}", dir.display());
            if report.converged {
                println!("CONVERGED");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("NOT_CONVERGED");
                Ok(ExitCode::from(2))
            }
        }
        Command::Calibrate { target_ms } => {
            let m = calibrate_gain_multiplier(target_ms)?;
            println!("gain multiplier: {m:e}");
            let mut cfg = ScenarioConfig::stc_defaults();
            cfg.gain_multiplier = m;
            let out = run_scenario(&cfg, &DumpOptions::none())?;
            println!(
                "cold-start convergence with it: {}",
                out.report
                    .convergence_time
                    .map_or("NOT_CONVERGED".into(), |t| format!("{:.3} ms", t * 1e3))
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Modes => {
            println!(
                "{:<6} {:>8} {:>8} {:>6} {:>8} {:>8} {:>8} {:>8} {:>10} {:>7}",
                "label", "G W/m2", "T K", "i A", "C uF", "Rp ohm", "Rs ohm", "Iirr A", "I0 nA", "b 1/V"
            );
            for m in &CATALOG {
                println!(
                    "{:<6} {:>8.1} {:>8.2} {:>6.2} {:>8.2} {:>8.2} {:>8.4} {:>8.2} {:>10.2} {:>7.3}",
                    m.label,
                    m.irradiance,
                    m.temperature,
                    m.mean_current,
                    m.truth.capacitance * 1e6,
                    m.truth.parallel_resistance,
                    m.truth.series_resistance,
                    m.truth.irradiance_current,
                    m.truth.saturation_current * 1e9,
                    m.b
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
