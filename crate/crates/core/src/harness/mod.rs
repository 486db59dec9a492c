//! Experiment orchestration: sweeps over seeds × targets × rules and
//! calibration-size sensitivity runs.

mod eval;

pub use eval::{evaluate_topk, self_labeled, EvalSet};

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{
    allocation_objective, erk_allocate, greedy_allocate, lamp_allocate, projection_forced_erk,
    uniform_allocate, ErkConfig, ScoreSource, ScoreTable,
};
use crate::arch::projection_layers;
use crate::calib::CalibrationSet;
use crate::container::{load_container, write_atomic};
use crate::diagnostics::{
    validate_grid, DiagnosticCurves, DiagnosticEngine, TapPoint, DEFAULT_GRID,
};
use crate::error::{Error, Result};
use crate::masking::{
    global_magnitude_mask, global_sparsity, mask_sparsity, masks_for_allocation, Allocation,
    MaskSet,
};
use crate::net::NetworkSpec;
use crate::repair::{cr_bn, RepairConfig, RepairScales};
use crate::transition::{TargetAllocations, TransitionInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Global,
    Uniform,
    RawShift,
    RepairResidual,
    Rr,
    Erk,
    Lamp,
    ProjectionForced,
}

impl Rule {
    pub const ALL: [Rule; 8] = [
        Rule::Global,
        Rule::Uniform,
        Rule::RawShift,
        Rule::RepairResidual,
        Rule::Rr,
        Rule::Erk,
        Rule::Lamp,
        Rule::ProjectionForced,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Global => "global",
            Rule::Uniform => "uniform",
            Rule::RawShift => "raw_shift",
            Rule::RepairResidual => "repair_residual",
            Rule::Rr => "rr",
            Rule::Erk => "erk",
            Rule::Lamp => "lamp",
            Rule::ProjectionForced => "projection_forced",
        }
    }

    /// The diagnostic score a greedy rule minimizes.
    pub fn score_source(self) -> Option<ScoreSource> {
        match self {
            Rule::RawShift => Some(ScoreSource::RawShift),
            Rule::RepairResidual => Some(ScoreSource::RepairResidual),
            Rule::Rr => Some(ScoreSource::Rr),
            _ => None,
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown rule `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model_path: PathBuf,
    pub calib_path: PathBuf,
    /// Labeled set for top-1 accuracy; omitted means no accuracy column.
    pub eval_path: Option<PathBuf>,
    /// Where CSV and per-run JSON go; nothing is written when absent.
    pub output_dir: Option<PathBuf>,
    pub grid: Vec<f64>,
    pub targets: Vec<f64>,
    pub rules: Vec<Rule>,
    pub seeds: Vec<u64>,
    /// Overrides `repair.epsilon`.
    pub epsilon: f64,
    pub repair: RepairConfig,
    pub erk: ErkConfig,
    /// Sparsity pinned on projection shortcuts by `projection_forced`.
    pub projection_sparsity: f64,
    pub tap: TapPoint,
    /// When false every seed uses the same BN stream, so seeds differ only
    /// by their label in the output.
    pub seed_calibration: bool,
    /// Record J_RR for every row, computing off-grid points as needed.
    pub compute_j_rr: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model_path: PathBuf::new(),
            calib_path: PathBuf::new(),
            eval_path: None,
            output_dir: None,
            grid: DEFAULT_GRID.to_vec(),
            targets: vec![0.9],
            rules: vec![Rule::Uniform, Rule::Erk, Rule::Rr],
            seeds: vec![0],
            epsilon: 1e-8,
            repair: RepairConfig::default(),
            erk: ErkConfig::default(),
            projection_sparsity: 0.7,
            tap: TapPoint::PostConv,
            seed_calibration: true,
            compute_j_rr: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.grid)?;
        if self.targets.is_empty() {
            return Err(Error::Empty("target list"));
        }
        if let Some(&t) = self.targets.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::InvalidSparsity(t));
        }
        if self.rules.is_empty() {
            return Err(Error::Empty("rule list"));
        }
        if self.seeds.is_empty() {
            return Err(Error::Empty("seed list"));
        }
        if !(self.projection_sparsity >= 0.0 && self.projection_sparsity <= 1.0) {
            return Err(Error::InvalidSparsity(self.projection_sparsity));
        }
        self.repair_config().validate()
    }

    pub fn repair_config(&self) -> RepairConfig {
        RepairConfig {
            epsilon: self.epsilon,
            ..self.repair.clone()
        }
    }

    fn stream_seed(&self, seed: u64) -> u64 {
        if self.seed_calibration {
            seed
        } else {
            0
        }
    }
}

/// Model, calibration data and optional evaluation set of one experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub net: NetworkSpec,
    pub calib: CalibrationSet,
    pub eval: Option<EvalSet>,
}

impl Experiment {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            net: load_container(&cfg.model_path)?,
            calib: CalibrationSet::load(&cfg.calib_path)?,
            eval: cfg.eval_path.as_ref().map(EvalSet::load).transpose()?,
        })
    }
}

/// Grid curves keyed by calibration set, BN stream, tap and grid. The first
/// request builds; later ones share the result.
#[derive(Debug, Default)]
pub struct CurveCache {
    map: Mutex<HashMap<String, Arc<DiagnosticCurves>>>,
    builds: AtomicUsize,
    hits: AtomicUsize,
}

impl CurveCache {
    pub fn get_or_build(
        &self,
        key: &str,
        build: impl FnOnce() -> Result<DiagnosticCurves>,
    ) -> Result<Arc<DiagnosticCurves>> {
        let mut map = self.map.lock().expect("curve cache poisoned");
        if let Some(c) = map.get(key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(c.clone());
        }
        let curves = Arc::new(build()?);
        self.builds.fetch_add(1, Ordering::Relaxed);
        map.insert(key.to_string(), curves.clone());
        Ok(curves)
    }

    pub fn builds(&self) -> usize {
        self.builds.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }
}

/// One CSV line of a sweep. Numeric fields are empty when the cell failed
/// before producing them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub target: f64,
    pub rule: Rule,
    pub achieved_s: Option<f64>,
    pub mask_sparsity: Option<f64>,
    pub j_rr: Option<f64>,
    pub eval_top1: Option<f64>,
    pub error: Option<String>,
}

/// Per-cell JSON record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub row: SweepRow,
    pub calib_id: String,
    pub allocation: Option<Allocation>,
    pub scales: Option<IndexMap<String, RepairScales>>,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub records: Vec<RunRecord>,
    pub curve_builds: usize,
    pub curve_hits: usize,
    /// Seeds whose rules include both `rr` and `erk`, with their curves and
    /// allocations ready for transition detection.
    pub transition_inputs: Vec<(u64, TransitionInput)>,
}

impl SweepOutput {
    pub fn csv(&self) -> Result<String> {
        rows_csv(&self.rows)
    }
}

pub fn rows_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let exp = Experiment::load(cfg)?;
    run_sweep_with(&exp, cfg)
}

/// [`run_sweep`] on already loaded data.
pub fn run_sweep_with(exp: &Experiment, cfg: &ExperimentConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let cache = CurveCache::default();
    let mut out = SweepOutput {
        rows: Vec::new(),
        records: Vec::new(),
        curve_builds: 0,
        curve_hits: 0,
        transition_inputs: Vec::new(),
    };
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let seed_out = sweep_seed(exp, &exp.calib, cfg, seed, &cfg.rules, &cache)?;
        log::info!(
            "seed {seed}: {} cells in {:.2?}",
            seed_out.records.len(),
            started.elapsed()
        );
        if let Some(t) = seed_out.transition {
            out.transition_inputs.push((seed, t));
        }
        if let (Some(dir), Some(curves)) = (&cfg.output_dir, &seed_out.grid_curves) {
            write_atomic(
                &dir.join(format!("curves_seed{seed}.json")),
                curves.to_json()?.as_bytes(),
            )?;
        }
        out.records.extend(seed_out.records);
    }
    out.rows = out.records.iter().map(|r| r.row.clone()).collect();
    out.curve_builds = cache.builds();
    out.curve_hits = cache.hits();
    if let Some(dir) = &cfg.output_dir {
        write_outputs(dir, &out)?;
    }
    Ok(out)
}

fn write_outputs(dir: &Path, out: &SweepOutput) -> Result<()> {
    let runs = dir.join("runs");
    std::fs::create_dir_all(&runs)?;
    write_atomic(&dir.join("sweep.csv"), out.csv()?.as_bytes())?;
    out.records.par_iter().try_for_each(|r| {
        let name = format!("seed{}_{}_{}.json", r.row.seed, r.row.rule, r.row.target);
        write_atomic(
            &runs.join(name),
            serde_json::to_string_pretty(r)?.as_bytes(),
        )
    })?;
    for (seed, t) in &out.transition_inputs {
        write_atomic(
            &dir.join(format!("transition_seed{seed}.json")),
            serde_json::to_string_pretty(t)?.as_bytes(),
        )?;
    }
    Ok(())
}

struct SeedOutput {
    records: Vec<RunRecord>,
    grid_curves: Option<Arc<DiagnosticCurves>>,
    transition: Option<TransitionInput>,
}

struct Cell {
    target: f64,
    rule: Rule,
    planned: Result<(Allocation, Option<MaskSet>)>,
}

fn sweep_seed(
    exp: &Experiment,
    calib: &CalibrationSet,
    cfg: &ExperimentConfig,
    seed: u64,
    rules: &[Rule],
    cache: &CurveCache,
) -> Result<SeedOutput> {
    let net = &exp.net;
    let rcfg = cfg.repair_config();
    let stream_seed = cfg.stream_seed(seed);
    let stream = calib.bn_stream(&rcfg, stream_seed)?;
    let needs_curves = cfg.compute_j_rr || rules.iter().any(|r| r.score_source().is_some());
    let engine = if needs_curves {
        Some(DiagnosticEngine::new(
            net,
            calib,
            stream.clone(),
            &rcfg,
            cfg.tap,
        )?)
    } else {
        None
    };
    let key = format!(
        "{}|{}|{:?}|{:?}",
        calib.id(),
        stream_seed,
        cfg.tap,
        cfg.grid
    );
    let curves_for = || -> Result<Arc<DiagnosticCurves>> {
        let engine = engine
            .as_ref()
            .expect("engine exists when curves are needed");
        cache.get_or_build(&key, || {
            let started = Instant::now();
            let c = engine.curves(&cfg.grid);
            log::info!("curves for seed {seed} built in {:.2?}", started.elapsed());
            c
        })
    };

    let counts = net.prunable_counts();
    let mut cells = Vec::new();
    for &target in &cfg.targets {
        for &rule in rules {
            let planned = plan(net, cfg, rule, target, &curves_for);
            cells.push(Cell {
                target,
                rule,
                planned,
            });
        }
    }

    let mut grid_curves = None;
    let mut working = None;
    if needs_curves {
        let c = curves_for()?;
        if cfg.compute_j_rr {
            let mut w = (*c).clone();
            let engine = engine.as_ref().expect("engine");
            for cell in &cells {
                if let Ok((alloc, _)) = &cell.planned {
                    engine.fill_allocation(&mut w, alloc)?;
                }
            }
            working = Some(w);
        }
        grid_curves = Some(c);
    }

    let records: Vec<RunRecord> = cells
        .par_iter()
        .map(|cell| {
            run_cell(
                exp,
                calib,
                &stream,
                &rcfg,
                &counts,
                working.as_ref(),
                seed,
                cell,
            )
        })
        .collect();

    let transition = working
        .as_ref()
        .and_then(|curves| transition_input(cfg, &cells, curves));
    Ok(SeedOutput {
        records,
        grid_curves,
        transition,
    })
}

fn plan(
    net: &NetworkSpec,
    cfg: &ExperimentConfig,
    rule: Rule,
    target: f64,
    curves_for: &dyn Fn() -> Result<Arc<DiagnosticCurves>>,
) -> Result<(Allocation, Option<MaskSet>)> {
    let curves = rule.score_source().map(|_| curves_for()).transpose()?;
    allocate_rule(net, cfg, rule, target, curves.as_deref())
}

/// Allocation of one rule at one target. `global` and `lamp` choose
/// weights directly and also return their masks. The greedy rules need
/// `curves`.
pub fn allocate_rule(
    net: &NetworkSpec,
    cfg: &ExperimentConfig,
    rule: Rule,
    target: f64,
    curves: Option<&DiagnosticCurves>,
) -> Result<(Allocation, Option<MaskSet>)> {
    let prunable = net.prunable();
    let alloc = match rule {
        Rule::Global => {
            let masks = global_magnitude_mask(net, target)?;
            return Ok((Allocation::from_masks(&masks), Some(masks)));
        }
        Rule::Lamp => {
            let masks = lamp_allocate(net, target)?;
            return Ok((Allocation::from_masks(&masks), Some(masks)));
        }
        Rule::Uniform => uniform_allocate(prunable, target)?,
        Rule::RawShift | Rule::RepairResidual | Rule::Rr => {
            let curves = curves
                .ok_or_else(|| Error::Config(format!("rule `{rule}` needs diagnostic curves")))?;
            let source = rule.score_source().expect("greedy rule");
            greedy_allocate(
                &ScoreTable::from_curves(curves, source, prunable)?,
                &net.prunable_counts(),
                target,
            )?
        }
        Rule::Erk => erk_allocate(&net.prunable_shapes(), target, cfg.erk)?.allocation(),
        Rule::ProjectionForced => {
            let projection = projection_layers(prunable);
            if projection.is_empty() {
                return Err(Error::Config("network has no projection shortcuts".into()));
            }
            projection_forced_erk(
                &net.prunable_shapes(),
                &projection,
                cfg.projection_sparsity,
                target,
                cfg.erk,
            )?
            .allocation()
        }
    };
    Ok((alloc, None))
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    exp: &Experiment,
    calib: &CalibrationSet,
    stream: &[crate::tensor::Tensor],
    rcfg: &RepairConfig,
    counts: &IndexMap<String, usize>,
    curves: Option<&DiagnosticCurves>,
    seed: u64,
    cell: &Cell,
) -> RunRecord {
    let mut record = RunRecord {
        row: SweepRow {
            seed,
            target: cell.target,
            rule: cell.rule,
            achieved_s: None,
            mask_sparsity: None,
            j_rr: None,
            eval_top1: None,
            error: None,
        },
        calib_id: calib.id().to_string(),
        allocation: None,
        scales: None,
    };
    let result = (|| -> Result<()> {
        let (alloc, masks) = match &cell.planned {
            Ok(p) => p.clone(),
            Err(e) => return Err(Error::Config(e.to_string())),
        };
        record.row.achieved_s = Some(global_sparsity(&alloc, counts)?);
        record.allocation = Some(alloc.clone());
        if let Some(curves) = curves {
            record.row.j_rr = Some(allocation_objective(&alloc, curves)?);
        }
        let masks = match masks {
            Some(m) => m,
            None => masks_for_allocation(&exp.net, &alloc)?,
        };
        record.row.mask_sparsity = Some(mask_sparsity(&masks));
        let repaired = cr_bn(&exp.net, &masks, calib.batches(), stream, rcfg)?;
        if let Some(eval) = &exp.eval {
            record.row.eval_top1 = Some(evaluate_topk(&repaired.net, eval)?);
        }
        record.scales = Some(repaired.scales);
        Ok(())
    })();
    if let Err(e) = result {
        log::warn!("seed {seed} {} at {}: {e}", cell.rule, cell.target);
        record.row.error = Some(e.to_string());
    }
    record
}

fn transition_input(
    cfg: &ExperimentConfig,
    cells: &[Cell],
    curves: &DiagnosticCurves,
) -> Option<TransitionInput> {
    let find = |target: f64, rule: Rule| {
        cells
            .iter()
            .find(|c| c.target == target && c.rule == rule)
            .and_then(|c| c.planned.as_ref().ok())
            .map(|(a, _)| a.clone())
    };
    let targets: Vec<TargetAllocations> = cfg
        .targets
        .iter()
        .filter_map(|&t| {
            Some(TargetAllocations {
                sparsity: t,
                rr: find(t, Rule::Rr)?,
                erk: find(t, Rule::Erk)?,
            })
        })
        .collect();
    if targets.is_empty() {
        return None;
    }
    Some(TransitionInput {
        curves: curves.clone(),
        targets,
    })
}

/// One `rr` cell rerun on a calibration prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub seed: u64,
    pub calib_images: usize,
    pub target: f64,
    pub achieved_s: Option<f64>,
    pub j_rr: Option<f64>,
    pub eval_top1: Option<f64>,
    pub error: Option<String>,
}

/// Reruns the `rr` rule with the first `size` calibration images for each
/// size, seed and target. Curves, repair statistics and the BN stream all
/// come from the prefix.
pub fn calib_sensitivity(
    exp: &Experiment,
    cfg: &ExperimentConfig,
    sizes: &[usize],
) -> Result<Vec<SensitivityRow>> {
    cfg.validate()?;
    if sizes.is_empty() {
        return Err(Error::Empty("calibration size list"));
    }
    let cfg = ExperimentConfig {
        compute_j_rr: true,
        ..cfg.clone()
    };
    let cache = CurveCache::default();
    let mut rows = Vec::new();
    for &size in sizes {
        let calib = exp.calib.prefix(size)?;
        for &seed in &cfg.seeds {
            let started = Instant::now();
            let out = sweep_seed(exp, &calib, &cfg, seed, &[Rule::Rr], &cache)?;
            log::info!(
                "calibration size {size}, seed {seed}: {:.2?}",
                started.elapsed()
            );
            rows.extend(out.records.into_iter().map(|r| SensitivityRow {
                seed,
                calib_images: size,
                target: r.row.target,
                achieved_s: r.row.achieved_s,
                j_rr: r.row.j_rr,
                eval_top1: r.row.eval_top1,
                error: r.row.error,
            }));
        }
    }
    Ok(rows)
}
