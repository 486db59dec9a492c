//! Save a toy network and its masks to an SPNR container and read them back.

use repairprune::arch::{gen_toynet, ToyNetSpec};
use repairprune::container::{network_from_container, network_to_container, Container};
use repairprune::masking::{global_magnitude_mask, masks_from_container, masks_into_container};

fn main() -> repairprune::Result<()> {
    let net = gen_toynet(9, &ToyNetSpec::default())?;
    let masks = global_magnitude_mask(&net, 0.8)?;

    let mut c = network_to_container(&net)?;
    masks_into_container(&masks, &mut c);
    let bytes = c.to_bytes()?;
    println!("{} tensors, {} bytes", c.tensors.len(), bytes.len());

    let back = Container::from_bytes(&bytes)?;
    assert_eq!(back.to_bytes()?, bytes);
    assert_eq!(network_from_container(&back)?, net);
    assert_eq!(masks_from_container(&back)?, masks);
    println!("network and masks survive the round trip");

    let path = std::env::temp_dir().join("repairprune_example.spnr");
    c.write(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}
