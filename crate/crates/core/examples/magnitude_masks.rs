//! Layerwise, global and LAMP magnitude masks on a toy network.

use repairprune::allocation::lamp_allocate;
use repairprune::arch::{gen_toynet, ToyNetSpec};
use repairprune::masking::{global_magnitude_mask, magnitude_mask, mask_sparsity};
use repairprune::tensor::Tensor;

fn main() -> repairprune::Result<()> {
    let w = Tensor::new(vec![4], vec![0.1, -0.5, 0.3, 0.2])?;
    let m = magnitude_mask("w", &w, 0.5)?;
    println!("weights {:?} at s = 0.5 keep {:?}", w.data(), m.bits());

    let net = gen_toynet(3, &ToyNetSpec::default())?;
    let global = global_magnitude_mask(&net, 0.9)?;
    let lamp = lamp_allocate(&net, 0.9)?;
    println!("\n{:<26} {:>8} {:>8}", "layer", "global", "lamp");
    for layer in net.prunable() {
        println!(
            "{layer:<26} {:>8.3} {:>8.3}",
            global[layer].sparsity(),
            lamp[layer].sparsity()
        );
    }
    println!(
        "{:<26} {:>8.3} {:>8.3}",
        "overall",
        mask_sparsity(&global),
        mask_sparsity(&lamp)
    );
    Ok(())
}
