use std::fs;

use clickforge_core::raster::*;
use clickforge_core::Error;

fn ten() -> Vec<Sample> {
    generate_dataset(&DomainSpec::shifted(8).with_size(32, 48), 10).unwrap()
}

#[test]
fn save_then_load_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = ten();
    save_dataset(&data, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), data);
}

#[test]
fn mask_with_grey_value_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = ten();
    save_dataset(&data, dir.path()).unwrap();
    let mut bytes = vec![0u8; 32 * 48];
    bytes[5] = 128;
    let path = dir.path().join("masks/0002.png");
    let mut enc = png::Encoder::new(fs::File::create(&path).unwrap(), 48, 32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header().unwrap().write_image_data(&bytes).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("0002"), "{err}");
}

#[test]
fn missing_mask_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ten(), dir.path()).unwrap();
    fs::remove_file(dir.path().join("masks/0003.png")).unwrap();
    match load_dataset(dir.path()) {
        Err(e @ Error::Dataset { .. }) => assert!(e.to_string().contains("0003"), "{e}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn dimension_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ten(), dir.path()).unwrap();
    let other = generate_dataset(&DomainSpec::source(1).with_size(32, 32), 1).unwrap();
    fs::write(dir.path().join("masks/0004.png"), encode_mask_png(&other[0].mask).unwrap()).unwrap();
    assert!(load_dataset(dir.path()).is_err());
}
