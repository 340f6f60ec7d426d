use std::fs;
use std::path::PathBuf;
use std::process::exit;

use clap::{Parser, Subcommand};

use precm_cli::law::{LawAudit, LawBounds};
use precm_cli::{evalcmd, law, netaudit, plan, trainer, RunConfig};
use precm_core::{ConvSpec, Extent, Flavor, Result};

#[derive(Parser)]
#[command(
    name = "precm",
    version,
    about = "Rotation-equivariant convolution via padded modes: plans, audits, training"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the padding plan of every rotation mode as JSON.
    PadPlan {
        /// Input extent, as WxH.
        #[arg(long = "in")]
        input: Extent,
        /// Output extent, as WxH.
        #[arg(long)]
        out: Extent,
        /// Kernel extent, as WxH.
        #[arg(long)]
        kernel: Extent,
        /// Stride, as WxH.
        #[arg(long, default_value = "1x1")]
        stride: Extent,
        /// Dilation, as WxH.
        #[arg(long, default_value = "1x1")]
        dilation: Extent,
    },
    /// Check the rotation law on randomized convolution geometries.
    AuditLaw {
        /// Number of random geometries to draw.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Seed for geometries and contents.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest input side length.
        #[arg(long, default_value_t = 16)]
        max_size: usize,
        /// Largest kernel side length.
        #[arg(long, default_value_t = 5)]
        max_kernel: usize,
        /// Largest stride component.
        #[arg(long, default_value_t = 3)]
        max_stride: usize,
        /// Largest dilation component.
        #[arg(long, default_value_t = 3)]
        max_dilation: usize,
        /// Keep the unrotated padding plan for every turn; the law must
        /// then break, and confirming that is the expected outcome.
        #[arg(long)]
        naive: bool,
        /// Run in single precision and compare within --tol.
        #[arg(long = "f32")]
        f32_mode: bool,
        /// Largest tolerated absolute difference in single precision.
        #[arg(long, default_value_t = 1e-5, requires = "f32_mode")]
        tol: f64,
        /// Audit one fixed geometry: input extent, as WxH.
        #[arg(long = "in", requires_all = ["out", "kernel"])]
        input: Option<Extent>,
        /// Fixed geometry: output extent, as WxH.
        #[arg(long, requires_all = ["input", "kernel"])]
        out: Option<Extent>,
        /// Fixed geometry: kernel extent, as WxH.
        #[arg(long, requires_all = ["input", "out"])]
        kernel: Option<Extent>,
        /// Fixed geometry: stride, as WxH.
        #[arg(long, requires = "input")]
        stride: Option<Extent>,
        /// Fixed geometry: dilation, as WxH.
        #[arg(long, requires = "input")]
        dilation: Option<Extent>,
    },
    /// Measure a configured network's rotation differences.
    AuditNet {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Load saved parameters instead of initializing from the seed.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Angles to score, in degrees.
        #[arg(long, value_delimiter = ',', default_value = "90,180,270")]
        angles: Vec<f64>,
        /// Number of extra seeded random angles to score.
        #[arg(long, default_value_t = 0)]
        random: usize,
    },
    /// Generate a dataset directory of textured shapes.
    GenData {
        /// Directory to write.
        #[arg(long)]
        out: PathBuf,
        /// Generation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of samples.
        #[arg(long)]
        count: usize,
        /// Square image side length.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Number of label classes, including background.
        #[arg(long, default_value_t = 2)]
        classes: u8,
    },
    /// Train a network and save its parameters.
    Train {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Directory for parameters, loss log, and configuration copy.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score saved parameters against a stored dataset.
    Eval {
        /// Directory written by train.
        #[arg(long)]
        params: PathBuf,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// File to write the metric report to.
        #[arg(long)]
        report: PathBuf,
    },
}

fn flavor_name(flavor: Flavor) -> &'static str {
    match flavor {
        Flavor::Precm => "precm",
        Flavor::Baseline => "baseline",
    }
}

fn print_law_outcome(outcome: &law::LawOutcome, naive: bool, dtype: &str) {
    let mode = if naive {
        "unrotated padding (expected to fail)"
    } else {
        "rotated padding"
    };
    println!("mode: {mode}");
    println!("dtype: {dtype}");
    println!("trials: {}", outcome.trials);
    println!("checks: {}", outcome.checks);
    println!("failures: {}", outcome.failures);
    if let Some(f) = &outcome.first_failure {
        println!(
            "first failure: trial {} turn {} in {} out {} kernel {} stride {} dilation {} max abs diff {:e}",
            f.trial,
            f.degrees,
            f.spec.input,
            f.spec.output,
            f.spec.kernel,
            f.spec.stride,
            f.spec.dilation,
            f.max_abs_diff
        );
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Cmd::PadPlan {
            input,
            out,
            kernel,
            stride,
            dilation,
        } => {
            let spec = ConvSpec {
                input,
                output: out,
                kernel,
                stride,
                dilation,
            };
            let report = plan::plan_report(&spec)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(0)
        }
        Cmd::AuditLaw {
            trials,
            seed,
            max_size,
            max_kernel,
            max_stride,
            max_dilation,
            naive,
            f32_mode,
            tol,
            input,
            out,
            kernel,
            stride,
            dilation,
        } => {
            let fixed = match (input, out, kernel) {
                (Some(input), Some(output), Some(kernel)) => Some(ConvSpec {
                    input,
                    output,
                    kernel,
                    stride: stride.unwrap_or(Extent::new(1, 1)),
                    dilation: dilation.unwrap_or(Extent::new(1, 1)),
                }),
                _ => None,
            };
            let audit = LawAudit {
                trials,
                seed,
                bounds: LawBounds {
                    max_size,
                    max_kernel,
                    max_stride,
                    max_dilation,
                },
                naive,
                fixed,
                tolerance: f32_mode.then_some(tol),
            };
            let outcome = if f32_mode {
                law::run_law_audit::<f32>(&audit)?
            } else {
                law::run_law_audit::<f64>(&audit)?
            };
            print_law_outcome(&outcome, naive, if f32_mode { "f32" } else { "f64" });
            if naive {
                if outcome.failures > 0 {
                    println!("expected failure confirmed");
                    Ok(3)
                } else {
                    eprintln!("error: the unrotated plan passed every check, but it must fail");
                    Ok(1)
                }
            } else if outcome.all_hold() {
                Ok(0)
            } else {
                Ok(1)
            }
        }
        Cmd::AuditNet {
            config,
            params,
            angles,
            random,
        } => {
            let run = RunConfig::load(&config)?;
            let report = netaudit::run_net_audit(&run, params.as_deref(), &angles, random)?;
            println!("flavor: {}", flavor_name(report.flavor));
            println!("samples: {}", report.samples);
            for line in &report.lines {
                println!("rd {} {:.4}", line.degrees, line.rd);
            }
            if report.flavor == Flavor::Precm && !report.quarter_turns_clean() {
                eprintln!("error: quarter-turn rotation difference is nonzero");
                Ok(1)
            } else {
                Ok(0)
            }
        }
        Cmd::GenData {
            out,
            seed,
            count,
            size,
            classes,
        } => {
            let manifest = trainer::generate_dataset(&out, seed, count, size, classes)?;
            println!("wrote {} samples to {}", manifest.ids.len(), out.display());
            Ok(0)
        }
        Cmd::Train { config, out } => {
            let run = RunConfig::load(&config)?;
            let outcome = trainer::train_model(&run, &out)?;
            for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
                println!("epoch {} loss {:.6}", epoch + 1, loss);
            }
            println!("saved parameters to {}", out.display());
            Ok(0)
        }
        Cmd::Eval {
            params,
            data,
            report,
        } => {
            let metrics = evalcmd::evaluate(&params, &data)?;
            let mut text = serde_json::to_string_pretty(&metrics)?;
            text.push('\n');
            fs::write(&report, text)?;
            println!(
                "iou {:.4} miou {:.4} dice {:.4} rd90 {:.4} rd180 {:.4} rd270 {:.4}",
                metrics.iou,
                metrics.miou,
                metrics.dice,
                metrics.rd.quarter,
                metrics.rd.half,
                metrics.rd.three_quarter
            );
            println!("report written to {}", report.display());
            Ok(0)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.exit_code() == 0 { 0 } else { 1 };
            let _ = err.print();
            exit(code);
        }
    };
    match run(cli) {
        Ok(code) => exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            exit(precm_cli::exit_code(&err));
        }
    }
}
