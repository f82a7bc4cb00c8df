//! `tumorseg` command-line front end.
//!
//! Log verbosity comes from `TUMORSEG_LOG` (env_logger filter syntax,
//! default `warn`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use tumorseg::metrics::{aggregate, evaluate_dirs, write_aggregate_json, write_case_csv, DistanceUnit, MetricsConfig};
use tumorseg::pipeline::overlay::{render_overlay, save_overlay, SliceAxis};
use tumorseg::pipeline::{apply_override, load_case, CaseInput, Pipeline, PipelineConfig, PipelineError};
use tumorseg::postprocess::{postprocess, write_component_report, PostprocessParams};
use tumorseg::preprocess::preprocess;
use tumorseg::tuner::{run_sweep, write_best_params, write_results_csv, SweepSpec};
use tumorseg::volgrid::probfile::{load_probability_map, save_probability_map};
use tumorseg::volgrid::{load_labelmap, save_labelmap, save_volume};

const LOG_ENV: &str = "TUMORSEG_LOG";

#[derive(Parser)]
#[command(name = "tumorseg", version, about = "Brain tumor segmentation inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Crop to the foreground and z-score normalize one case.
    Preprocess {
        /// Case directory with four modality files, or a 4-volume NIfTI.
        #[arg(long)]
        case: PathBuf,
        /// Output 4-volume NIfTI.
        #[arg(long)]
        out: PathBuf,
        /// Sidecar JSON with the crop box and normalization statistics
        /// (defaults to the output path with a `.json` extension).
        #[arg(long)]
        meta: Option<PathBuf>,
    },
    /// Run ensemble/TTA sliding-window inference and save the probability map.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        case: PathBuf,
        /// Probability map file in the original scan geometry.
        #[arg(long)]
        out: PathBuf,
    },
    /// Threshold, filter and fuse a saved probability map into labels.
    Postprocess {
        #[arg(long)]
        probabilities: PathBuf,
        /// TOML parameter file, e.g. the best-params file written by `tune`.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Parameter override such as `min_component_size.et=50`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Component audit report, one JSON record per line.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score predicted label maps against references.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Directory for `cases.csv` and `aggregate.json`.
        #[arg(long)]
        out_dir: PathBuf,
        /// Report HD95 in millimetres instead of voxels.
        #[arg(long)]
        mm: bool,
    },
    /// Grid-search postprocessing parameters.
    Tune {
        #[arg(long)]
        spec: PathBuf,
        /// Directory for `results.csv` and `best_params.toml`.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render one slice with the label overlay as a PNG.
    Overlay {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "z")]
        axis: SliceAxis,
        /// Slice index; the middle slice when omitted.
        #[arg(long)]
        slice: Option<usize>,
        /// Grayscale modality index (0 t1n, 1 t1c, 2 t2w, 3 t2f).
        #[arg(long, default_value_t = 1)]
        modality: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline over every configured case.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Extra case directories or 4-volume files; replaces the configured
        /// inputs when given.
        #[arg(long)]
        case: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Config override such as `tiler.overlap=0.25`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        PipelineConfig::load(&self.config, &self.overrides).with_context(|| format!("loading {}", self.config.display()))
    }
}

fn default_meta_path(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let base = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).unwrap_or(&name);
    out.with_file_name(format!("{base}.json"))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_params(path: Option<&Path>, overrides: &[String]) -> Result<PostprocessParams> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::Value::Table(toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => toml::Value::try_from(PostprocessParams::default())?,
    };
    if path.is_some() && !overrides.is_empty() {
        // fill defaults so partial files can still be overridden field by field
        let parsed: PostprocessParams = value.try_into()?;
        value = toml::Value::try_from(parsed)?;
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let params: PostprocessParams = value.try_into().context("invalid postprocessing parameters")?;
    params.validate()?;
    Ok(params)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Preprocess { case, out, meta } => {
            let vol = load_case(&CaseInput::from_path(&case))?;
            let pre = preprocess(&vol)?;
            save_volume(&pre.volume, &out)?;
            let meta = meta.unwrap_or_else(|| default_meta_path(&out));
            write_json(
                &meta,
                &json!({
                    "crop_box": pre.crop_box,
                    "normalization": pre.stats,
                    "foreground_voxels": pre.mask.count(),
                }),
            )?;
            info!("wrote {} and {}", out.display(), meta.display());
        }
        Command::Infer { config, case, out } => {
            let pipeline = Pipeline::new(config.load()?)?;
            let case = CaseInput::from_path(&case);
            let inference = pipeline
                .infer_case(&case, &mut Vec::new())
                .map_err(|f| PipelineError::Stage {
                    case_id: case.id.clone(),
                    stage: f.stage,
                    message: f.message,
                })?;
            let prepared = &inference.prepared;
            let restored = inference.probabilities.restore(&prepared.crop_box)?;
            save_probability_map(&out, &restored, &prepared.original_affine)?;
            info!("{}: {} windows x {} passes", case.id, inference.window_count, inference.passes);
        }
        Command::Postprocess {
            probabilities,
            params,
            overrides,
            out,
            report,
        } => {
            let params = load_params(params.as_deref(), &overrides)?;
            let (map, affine) = load_probability_map(&probabilities)?;
            let (labels, records) = postprocess(&map, &params, affine)?;
            save_labelmap(&labels, &out)?;
            if let Some(r) = report {
                write_component_report(&r, &records)?;
            }
        }
        Command::Evaluate {
            pred,
            reference,
            out_dir,
            mm,
        } => {
            let cfg = MetricsConfig {
                units: if mm { DistanceUnit::Mm } else { DistanceUnit::Voxel },
                ..MetricsConfig::default()
            };
            let results = evaluate_dirs(&pred, &reference, &cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            write_case_csv(&out_dir.join("cases.csv"), &results)?;
            let agg = aggregate(&results);
            write_aggregate_json(&out_dir.join("aggregate.json"), &agg)?;
            println!("{}", serde_json::to_string_pretty(&agg)?);
        }
        Command::Tune { spec, out_dir } => {
            let spec = SweepSpec::load(&spec)?;
            let outcome = run_sweep(&spec)?;
            std::fs::create_dir_all(&out_dir)?;
            write_results_csv(&out_dir.join("results.csv"), &outcome.results)?;
            let best = &outcome.results[0];
            write_best_params(&out_dir.join("best_params.toml"), &best.params)?;
            println!(
                "best objective {:.6} over {} points ({} evaluations)",
                best.objective,
                outcome.results.len(),
                outcome.evaluations
            );
        }
        Command::Overlay {
            case,
            labels,
            axis,
            slice,
            modality,
            out,
        } => {
            let vol = load_case(&CaseInput::from_path(&case))?;
            let labels = load_labelmap(&labels)?;
            let [nx, ny, nz] = vol.shape().dims();
            let len = match axis {
                SliceAxis::X => nx,
                SliceAxis::Y => ny,
                SliceAxis::Z => nz,
            };
            let img = render_overlay(&vol, &labels, modality, axis, slice.unwrap_or(len / 2))?;
            save_overlay(&img, &out)?;
        }
        Command::Run { config, case } => {
            let mut cfg = config.load()?;
            if !case.is_empty() {
                cfg.input.dir = None;
                cfg.input.cases = case;
            }
            let pipeline = Pipeline::new(cfg)?;
            let cases = pipeline.cases()?;
            let report = pipeline.run_batch(&cases)?;
            for f in &report.failed {
                eprintln!("{}: failed at {}: {}", f.case_id, f.stage, f.error);
            }
            println!("{}/{} cases succeeded (config {})", report.succeeded, report.cases, report.config_hash);
            return Ok(report.exit_code());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    // clap's own usage exit status is 2, which here means partial batch failure
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
