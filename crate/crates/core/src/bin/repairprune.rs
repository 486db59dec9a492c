use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use repairprune::allocation::{erk_allocate, projection_forced_erk, ErkResult};
use repairprune::arch::{
    counts_of, gaussian_calibration, gen_toynet, projection_layers, resnet18_shapes,
    resnet34_shapes, vgg16_bn_shapes, ShapeMap, ToyNetSpec,
};
use repairprune::calib::CalibrationSet;
use repairprune::container::{load_container, save_network, write_atomic};
use repairprune::diagnostics::{DiagnosticCurves, DiagnosticEngine, TapPoint};
use repairprune::harness::{
    allocate_rule, calib_sensitivity, evaluate_topk, rows_csv, run_sweep_with, self_labeled,
    EvalSet, Experiment, ExperimentConfig, Rule,
};
use repairprune::masking::{global_sparsity, masks_for_allocation, Allocation};
use repairprune::repair::cr_bn;
use repairprune::transition::{detect_transition, profile_csv, CtsConfig, TransitionInput};

#[derive(Parser)]
#[command(version, about = "Repairability-guided layerwise sparsity allocation")]
struct Cli {
    /// Experiment config JSON; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for BN stream selection (and toy-model weights).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Candidate sparsity grid, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tap {
    PostConv,
    PostBn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Resnet18,
    Resnet34,
    Vgg16Bn,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded toy network, calibration set and self-labeled eval set.
    GenToynet {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        blocks: usize,
        #[arg(long, value_delimiter = ',', default_value = "8,16")]
        channels: Vec<usize>,
        #[arg(long)]
        no_projections: bool,
        #[arg(long, default_value_t = 12)]
        image_size: usize,
        #[arg(long, default_value_t = 4)]
        calib_batches: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 4)]
        eval_batches: usize,
    },
    /// Diagnostic curves over the grid.
    Diagnose {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "post-conv")]
        tap: Tap,
        #[arg(long)]
        out: PathBuf,
    },
    /// Layerwise sparsities for one rule and target.
    Allocate {
        #[arg(long)]
        rule: Rule,
        #[arg(long)]
        target: f64,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Curves JSON, required by raw_shift, repair_residual and rr.
        #[arg(long)]
        curves: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask by an allocation, then apply channelwise repair and BN recalibration.
    Repair {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        alloc: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write per-channel γ, λ, r and τ as JSON.
        #[arg(long)]
        dump_scales: Option<PathBuf>,
    },
    /// Top-1 accuracy on a labeled container.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Seeds × targets × rules, writing CSV and per-run JSON.
    Sweep {
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Calibration-only transition band from a sweep's transition JSON.
    DetectTransition {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Threshold fraction of the broad band (not a published constant).
        #[arg(long)]
        alpha_broad: Option<f64>,
        #[arg(long)]
        s_low: Option<f64>,
        #[arg(long)]
        s_high: Option<f64>,
    },
    /// ERK densities before and after capping, optionally with projections pinned.
    ErkDiagnostic {
        #[arg(long, value_enum, conflicts_with = "model")]
        arch: Option<Arch>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        target: f64,
        /// Pin projection shortcuts at this sparsity.
        #[arg(long)]
        projection_sparsity: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun the rr rule on calibration prefixes.
    CalibSensitivity {
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => {
            ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(e) = cli.epsilon {
        cfg.epsilon = e;
    }
    if let Some(g) = cli.grid.clone() {
        cfg.grid = g;
    }
    let started = Instant::now();
    run(cli.cmd, cfg)?;
    log::info!("done in {:.2?}", started.elapsed());
    Ok(())
}

fn pick(flag: Option<PathBuf>, fallback: &Path, what: &str) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None if !fallback.as_os_str().is_empty() => Ok(fallback.to_path_buf()),
        None => bail!("no {what} given (flag or config)"),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn run(cmd: Cmd, mut cfg: ExperimentConfig) -> Result<()> {
    let seed = cfg.seeds[0];
    let rcfg = cfg.repair_config();
    match cmd {
        Cmd::GenToynet {
            out_dir,
            blocks,
            channels,
            no_projections,
            image_size,
            calib_batches,
            batch_size,
            eval_batches,
        } => {
            let spec = ToyNetSpec {
                blocks,
                channels,
                with_projections: !no_projections,
                input_shape: [3, image_size, image_size],
                ..Default::default()
            };
            let net = gen_toynet(seed, &spec)?;
            std::fs::create_dir_all(&out_dir)?;
            save_network(&net, out_dir.join("model.spnr"))?;
            let shape = spec.input_shape;
            CalibrationSet::new(gaussian_calibration(
                seed.wrapping_add(1),
                calib_batches,
                batch_size,
                &shape,
            )?)?
            .save(out_dir.join("calib.spnr"))?;
            let eval = self_labeled(
                &net,
                gaussian_calibration(seed.wrapping_add(2), eval_batches, batch_size, &shape)?,
            )?;
            eval.to_container().write(out_dir.join("eval.spnr"))?;
            println!(
                "{} prunable layers, {} weights -> {}",
                net.prunable().len(),
                net.prunable_counts().values().sum::<usize>(),
                out_dir.display()
            );
        }
        Cmd::Diagnose {
            model,
            calib,
            tap,
            out,
        } => {
            let net = load_container(pick(model, &cfg.model_path, "model")?)?;
            let calib = CalibrationSet::load(pick(calib, &cfg.calib_path, "calibration set")?)?;
            let tap = match tap {
                Tap::PostConv => TapPoint::PostConv,
                Tap::PostBn => TapPoint::PostBn,
            };
            let stream = calib.bn_stream(&rcfg, seed)?;
            let t = Instant::now();
            let curves =
                DiagnosticEngine::new(&net, &calib, stream, &rcfg, tap)?.curves(&cfg.grid)?;
            log::info!("{} points in {:.2?}", curves.points.len(), t.elapsed());
            write_text(&out, &curves.to_json()?)?;
        }
        Cmd::Allocate {
            rule,
            target,
            model,
            curves,
            out,
        } => {
            let net = load_container(pick(model, &cfg.model_path, "model")?)?;
            let curves = curves
                .map(|p| -> Result<DiagnosticCurves> {
                    Ok(DiagnosticCurves::from_json(&std::fs::read_to_string(p)?)?)
                })
                .transpose()?;
            if rule.score_source().is_some() && curves.is_none() {
                bail!("rule `{rule}` needs --curves");
            }
            let (alloc, _) = allocate_rule(&net, &cfg, rule, target, curves.as_ref())?;
            println!(
                "achieved global sparsity {}",
                global_sparsity(&alloc, &net.prunable_counts())?
            );
            write_json(&out, &alloc)?;
        }
        Cmd::Repair {
            model,
            calib,
            alloc,
            out,
            dump_scales,
        } => {
            let net = load_container(pick(model, &cfg.model_path, "model")?)?;
            let calib = CalibrationSet::load(pick(calib, &cfg.calib_path, "calibration set")?)?;
            let alloc: Allocation = serde_json::from_str(&std::fs::read_to_string(&alloc)?)?;
            alloc.validate_for(&net)?;
            let masks = masks_for_allocation(&net, &alloc)?;
            let stream = calib.bn_stream(&rcfg, seed)?;
            let repaired = cr_bn(&net, &masks, calib.batches(), &stream, &rcfg)?;
            save_network(&repaired.net, &out)?;
            log::info!("wrote {}", out.display());
            if let Some(p) = dump_scales {
                write_json(&p, &repaired.scales)?;
            }
        }
        Cmd::Evaluate { model, eval } => {
            let net = load_container(pick(model, &cfg.model_path, "model")?)?;
            let Some(eval_path) = eval.or(cfg.eval_path) else {
                bail!("no evaluation set given (flag or config)");
            };
            let acc = evaluate_topk(&net, &EvalSet::load(eval_path)?)?;
            println!("{}", serde_json::json!({ "top1": acc }));
        }
        Cmd::Sweep { out_dir } => {
            if out_dir.is_some() {
                cfg.output_dir = out_dir;
            }
            cfg.validate()?;
            let exp = Experiment::load(&cfg)?;
            let out = run_sweep_with(&exp, &cfg)?;
            log::info!(
                "curve builds {}, cache hits {}",
                out.curve_builds,
                out.curve_hits
            );
            if cfg.output_dir.is_none() {
                print!("{}", out.csv()?);
            }
            let failed = out.rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                log::warn!("{failed} of {} cells failed", out.rows.len());
            }
        }
        Cmd::DetectTransition {
            input,
            out,
            csv,
            alpha,
            alpha_broad,
            s_low,
            s_high,
        } => {
            let input: TransitionInput = serde_json::from_str(&std::fs::read_to_string(&input)?)?;
            let mut c = CtsConfig {
                epsilon: cfg.epsilon,
                ..Default::default()
            };
            c.alpha = alpha.unwrap_or(c.alpha);
            c.alpha_broad = alpha_broad.unwrap_or(c.alpha_broad);
            c.s_low = s_low.unwrap_or(c.s_low);
            c.s_high = s_high.unwrap_or(c.s_high);
            let profile = detect_transition(&input, &c)?;
            for w in &profile.warnings {
                log::warn!("{w}");
            }
            let show = |b: &Option<repairprune::transition::Band>| match b {
                Some(b) => format!("{:.1}-{:.1}%", 100.0 * b.s_start, 100.0 * b.s_end),
                None => "not detected".into(),
            };
            println!(
                "broad band {}, core {}",
                show(&profile.broad_band),
                show(&profile.core)
            );
            write_json(&out, &profile)?;
            if let Some(p) = csv {
                write_text(&p, &profile_csv(&profile)?)?;
            }
        }
        Cmd::ErkDiagnostic {
            arch,
            model,
            target,
            projection_sparsity,
            out,
        } => {
            let shapes: ShapeMap = match (arch, model) {
                (Some(Arch::Resnet18), _) => resnet18_shapes(),
                (Some(Arch::Resnet34), _) => resnet34_shapes(),
                (Some(Arch::Vgg16Bn), _) => vgg16_bn_shapes(),
                (None, m) => {
                    load_container(pick(m, &cfg.model_path, "model or --arch")?)?.prunable_shapes()
                }
            };
            let result = match projection_sparsity {
                Some(p) => {
                    let proj = projection_layers(shapes.keys());
                    if proj.is_empty() {
                        bail!("no projection layers to pin");
                    }
                    projection_forced_erk(&shapes, &proj, p, target, cfg.erk)?
                }
                None => erk_allocate(&shapes, target, cfg.erk)?,
            };
            print_erk(&shapes, &result)?;
            if let Some(p) = out {
                write_json(&p, &result)?;
            }
        }
        Cmd::CalibSensitivity { sizes, out } => {
            cfg.validate()?;
            let exp = Experiment::load(&cfg)?;
            let rows = calib_sensitivity(&exp, &cfg, &sizes)?;
            let text = rows_csv(&rows)?;
            match out {
                Some(p) => write_text(&p, &text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn print_erk(shapes: &ShapeMap, r: &ErkResult) -> Result<()> {
    println!(
        "{:<28} {:>10} {:>10} {:>10} {:>10}",
        "layer", "params", "uncapped", "density", "sparsity"
    );
    for (layer, shape) in shapes {
        let uncapped = r
            .uncapped_density
            .get(layer)
            .map_or("forced".to_string(), |d| format!("{d:.3}"));
        println!(
            "{:<28} {:>10} {:>10} {:>10.3} {:>10.3}",
            layer,
            shape.iter().product::<usize>(),
            uncapped,
            r.capped_density[layer],
            r.sparsity[layer]
        );
    }
    println!(
        "global sparsity {:.6}",
        global_sparsity(&r.allocation(), &counts_of(shapes))?
    );
    Ok(())
}
