//! Run a seeded residual toy network and inspect intermediate activations.

use repairprune::arch::{gaussian_images, gen_toynet, ToyNetSpec};
use repairprune::tensor::channel_stats;

fn main() -> repairprune::Result<()> {
    let spec = ToyNetSpec::default();
    let net = gen_toynet(7, &spec)?;
    println!("{} nodes, prunable convs:", net.nodes().len());
    for (layer, shape) in net.prunable_shapes() {
        println!("  {layer:<26} {shape:?}");
    }

    let batch = gaussian_images(1, 16, &spec.input_shape)?;
    let taps: Vec<&str> = net.prunable().iter().map(String::as_str).collect();
    let out = net.forward(&batch, &taps)?;
    println!("\nlogits {:?}", out.output.shape());
    for (name, act) in &out.tapped {
        let stats = channel_stats(act)?;
        let mean_var = stats.var.iter().sum::<f64>() / stats.var.len() as f64;
        println!(
            "  {name:<26} {:?}  mean channel variance {mean_var:.4}",
            act.shape()
        );
    }
    Ok(())
}
