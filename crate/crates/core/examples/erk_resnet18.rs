//! ERK densities for ResNet18 at 95% sparsity, and the projection-forced
//! variant that pins the three downsample convs.

use repairprune::allocation::{
    erk_allocate, mean_sparsity_excluding, projection_forced_erk, ErkConfig,
};
use repairprune::arch::{counts_of, projection_layers, resnet18_shapes};

fn main() -> repairprune::Result<()> {
    let shapes = resnet18_shapes();
    let counts = counts_of(&shapes);
    let erk = erk_allocate(&shapes, 0.95, ErkConfig::default())?;

    println!(
        "{:<24} {:>10} {:>10} {:>9}",
        "layer", "uncapped", "density", "sparsity"
    );
    for (layer, s) in &erk.sparsity {
        println!(
            "{layer:<24} {:>10.3} {:>10.3} {:>9.3}",
            erk.uncapped_density[layer], erk.capped_density[layer], s
        );
    }

    let proj = projection_layers(shapes.keys());
    println!("\nprojection-forced ERK at S = 0.95");
    for proj_s in [0.0, 0.7, 0.9] {
        let forced = projection_forced_erk(&shapes, &proj, proj_s, 0.95, ErkConfig::default())?;
        let regular = mean_sparsity_excluding(&forced.allocation(), &counts, &proj)?;
        println!(
            "  projections at {:>4.1}%  ->  regular convs at {:.3}%",
            proj_s * 100.0,
            regular * 100.0
        );
    }
    Ok(())
}
