//! Greedy RR allocation on a toy network, compared with uniform and ERK by
//! the mean-RR objective.

use repairprune::allocation::{
    allocation_objective, erk_allocate, greedy_trace, uniform_allocate, ErkConfig, ScoreSource,
    ScoreTable,
};
use repairprune::arch::{gaussian_calibration, gen_toynet, ToyNetSpec};
use repairprune::calib::CalibrationSet;
use repairprune::diagnostics::{DiagnosticEngine, TapPoint, DEFAULT_GRID};
use repairprune::masking::global_sparsity;
use repairprune::repair::RepairConfig;

fn main() -> repairprune::Result<()> {
    let spec = ToyNetSpec::default();
    let net = gen_toynet(21, &spec)?;
    let calib = CalibrationSet::new(gaussian_calibration(22, 4, 32, &spec.input_shape)?)?;
    let cfg = RepairConfig {
        bn_batches: 4,
        bn_batch_size: 32,
        ..Default::default()
    };
    let engine = DiagnosticEngine::new(
        &net,
        &calib,
        calib.bn_stream(&cfg, 0)?,
        &cfg,
        TapPoint::PostConv,
    )?;
    let mut curves = engine.curves(&DEFAULT_GRID)?;
    let counts = net.prunable_counts();

    let table = ScoreTable::from_curves(&curves, ScoreSource::Rr, net.prunable())?;
    let trace = greedy_trace(&table, &counts, 0.9)?;
    for p in &trace.promotions {
        println!(
            "{:<26} {:.3} -> {:.3}  q {:+.3e}  global {:.4}",
            p.layer, p.from, p.to, p.q, p.global
        );
    }

    let uniform = uniform_allocate(net.prunable(), 0.9)?;
    let erk = erk_allocate(&net.prunable_shapes(), 0.9, ErkConfig::default())?.allocation();
    println!();
    for (name, alloc) in [
        ("rr", &trace.allocation),
        ("uniform", &uniform),
        ("erk", &erk),
    ] {
        engine.fill_allocation(&mut curves, alloc)?;
        println!(
            "{name:<8} achieved {:.4}  J_RR {:.4}",
            global_sparsity(alloc, &counts)?,
            allocation_objective(alloc, &curves)?
        );
    }
    Ok(())
}
