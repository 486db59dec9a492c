use repairprune::allocation::uniform_allocate;
use repairprune::arch::{gaussian_calibration, gen_toy_vgg, gen_toynet, ToyNetSpec};
use repairprune::calib::CalibrationSet;
use repairprune::container::{
    load_container, network_from_container, network_to_container, save_network, Container,
};
use repairprune::masking::{masks_for_allocation, masks_from_container, masks_into_container};
use repairprune::Error;

fn toy() -> repairprune::net::NetworkSpec {
    gen_toynet(
        3,
        &ToyNetSpec {
            channels: vec![4, 8],
            input_shape: [3, 8, 8],
            ..Default::default()
        },
    )
    .unwrap()
}

#[test]
fn network_survives_byte_round_trip() {
    let net = toy();
    let bytes = network_to_container(&net).unwrap().to_bytes().unwrap();
    let back = network_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, net);
    assert_eq!(
        network_to_container(&back).unwrap().to_bytes().unwrap(),
        bytes
    );
}

#[test]
fn network_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.spnr");
    let net = toy();
    save_network(&net, &path).unwrap();
    let back = load_container(&path).unwrap();
    assert_eq!(back, net);
    let batch = &gaussian_calibration(0, 1, 4, &[3, 8, 8]).unwrap()[0];
    assert_eq!(
        net.forward(batch, &[]).unwrap().output,
        back.forward(batch, &[]).unwrap().output
    );
}

#[test]
fn vgg_round_trip() {
    let net = gen_toy_vgg(1, &[vec![4], vec![8, 8]], [3, 8, 8], 5).unwrap();
    let bytes = network_to_container(&net).unwrap().to_bytes().unwrap();
    assert_eq!(
        network_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap(),
        net
    );
}

#[test]
fn masks_round_trip_alongside_network() {
    let net = toy();
    let alloc = uniform_allocate(net.prunable(), 0.6).unwrap();
    let masks = masks_for_allocation(&net, &alloc).unwrap();
    let mut c = network_to_container(&net).unwrap();
    masks_into_container(&masks, &mut c);
    let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
    assert_eq!(masks_from_container(&back).unwrap(), masks);
    assert_eq!(network_from_container(&back).unwrap(), net);
}

#[test]
fn calibration_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("calib.spnr");
    let calib = CalibrationSet::new(gaussian_calibration(4, 3, 5, &[3, 8, 8]).unwrap()).unwrap();
    calib.save(&path).unwrap();
    let back = CalibrationSet::load(&path).unwrap();
    assert_eq!(back.batches(), calib.batches());
    assert_eq!(back.id(), calib.id());
}

#[test]
fn corrupt_input_is_rejected() {
    let bytes = network_to_container(&toy()).unwrap().to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Container::from_bytes(&bad), Err(Error::BadMagic)));
    assert!(matches!(Container::from_bytes(b"SP"), Err(Error::BadMagic)));

    for cut in [10, 40, bytes.len() - 1] {
        assert!(
            Container::from_bytes(&bytes[..cut]).is_err(),
            "cut at {cut}"
        );
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(
        Container::from_bytes(&extra),
        Err(Error::PayloadMismatch { .. })
    ));
}
