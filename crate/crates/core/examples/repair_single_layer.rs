//! Prune one conv and look at the channelwise repair it receives.

use repairprune::arch::{gaussian_calibration, gen_toynet, ToyNetSpec};
use repairprune::calib::CalibrationSet;
use repairprune::diagnostics::{DiagnosticEngine, TapPoint};
use repairprune::repair::RepairConfig;

fn main() -> repairprune::Result<()> {
    let spec = ToyNetSpec::default();
    let net = gen_toynet(5, &spec)?;
    let calib = CalibrationSet::new(gaussian_calibration(6, 4, 32, &spec.input_shape)?)?;
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

    let layer = "layer2.0.conv2";
    for s in [0.5, 0.9, 0.975] {
        let d = engine.point_detail(layer, s)?;
        println!(
            "{layer} at s = {s}: d_raw {:.4}  d_repair {:.4}  RR {:.3}  tau {:.4}",
            d.point.d_raw, d.point.d_repair, d.point.rr, d.scales.tau
        );
        for c in 0..4 {
            println!(
                "    channel {c}: var dense {:.4} pruned {:.4}  lambda {:.3}  gamma {:.3}",
                engine.dense_stats(layer).unwrap().var[c],
                d.pruned_stats.var[c],
                d.scales.lambda[c],
                d.scales.gamma[c]
            );
        }
    }
    Ok(())
}
