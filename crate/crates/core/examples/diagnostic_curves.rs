//! RR curves for every prunable layer of a toy network over the default grid.

use repairprune::arch::{gaussian_calibration, gen_toynet, ToyNetSpec};
use repairprune::calib::CalibrationSet;
use repairprune::diagnostics::{build_curves, DEFAULT_GRID};
use repairprune::repair::RepairConfig;

fn main() -> repairprune::Result<()> {
    let spec = ToyNetSpec::default();
    let net = gen_toynet(11, &spec)?;
    let calib = CalibrationSet::new(gaussian_calibration(12, 4, 32, &spec.input_shape)?)?;
    let cfg = RepairConfig {
        bn_batches: 4,
        bn_batch_size: 32,
        ..Default::default()
    };
    let curves = build_curves(&net, &DEFAULT_GRID, &calib, calib.bn_stream(&cfg, 0)?, &cfg)?;

    print!("{:<26}", "RR");
    for s in &curves.grid {
        print!("{s:>8}");
    }
    println!();
    for layer in net.prunable() {
        print!("{layer:<26}");
        for &s in &curves.grid {
            print!("{:>8.3}", curves.point(layer, s).unwrap().rr);
        }
        println!();
    }
    println!("\ncalibration id {}", &curves.calib_id[..16]);
    Ok(())
}
