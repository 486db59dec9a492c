//! A small sweep over targets and rules, with transition detection on the
//! resulting RR and ERK allocations.

use repairprune::arch::{gaussian_calibration, gen_toynet, ToyNetSpec};
use repairprune::calib::CalibrationSet;
use repairprune::harness::{run_sweep_with, Experiment, ExperimentConfig, Rule};
use repairprune::repair::RepairConfig;
use repairprune::transition::{detect_transition, CtsConfig};

fn main() -> repairprune::Result<()> {
    let spec = ToyNetSpec {
        channels: vec![6, 12],
        input_shape: [3, 10, 10],
        ..Default::default()
    };
    let exp = Experiment {
        net: gen_toynet(31, &spec)?,
        calib: CalibrationSet::new(gaussian_calibration(32, 2, 32, &spec.input_shape)?)?,
        eval: None,
    };
    let cfg = ExperimentConfig {
        targets: vec![0.8, 0.9, 0.925, 0.95],
        rules: vec![Rule::Uniform, Rule::Erk, Rule::Rr, Rule::Lamp],
        seeds: vec![0, 1],
        repair: RepairConfig {
            bn_batches: 2,
            bn_batch_size: 32,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = run_sweep_with(&exp, &cfg)?;
    print!("{}", out.csv()?);
    println!(
        "curve builds {}, cache hits {}",
        out.curve_builds, out.curve_hits
    );

    let cts = CtsConfig {
        s_low: 0.8,
        s_high: 0.95,
        ..Default::default()
    };
    for (seed, input) in &out.transition_inputs {
        let p = detect_transition(input, &cts)?;
        println!(
            "seed {seed}: core {:?}",
            p.core.map(|b| (b.s_start, b.s_end))
        );
    }
    Ok(())
}
