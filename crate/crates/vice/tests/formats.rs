use proptest::prelude::*;
use vice::error::ViceError;
use vice::io;
use vice_core::imaging::ImageTensor;
use vice_core::training::{TrainConfig, TrainState};

fn pattern(h: usize, w: usize) -> ImageTensor {
    let rgb: Vec<u8> = (0..h * w * 3).map(|i| (i * 37 % 256) as u8).collect();
    ImageTensor::from_rgb8(h, w, &rgb).unwrap()
}

#[test]
fn png_and_ppm_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let img = pattern(7, 11);
    let png = dir.path().join("a.png");
    let ppm = dir.path().join("a.ppm");
    io::write_png_image(&png, &img).unwrap();
    io::write_ppm(&ppm, &img).unwrap();
    assert_eq!(io::read_image(&png).unwrap().to_rgb8(), img.to_rgb8());
    assert_eq!(io::read_image(&ppm).unwrap().to_rgb8(), img.to_rgb8());
}

#[test]
fn wide_label_maps_use_sixteen_bits() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("l.png");
    let labels: Vec<u32> = (0..12).map(|i| i * 1000).collect();
    io::write_label_png(&p, 4, 3, &labels).unwrap();
    assert_eq!(io::read_label_png(&p).unwrap(), (3, 4, labels));
}

#[test]
fn rgb_png_is_not_a_label_map() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.png");
    io::write_png_image(&p, &pattern(2, 2)).unwrap();
    assert!(matches!(io::read_label_png(&p), Err(ViceError::Data { .. })));
}

#[test]
fn truncated_ppm_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.ppm");
    std::fs::write(&p, b"P6\n4 4\n255\nabc").unwrap();
    assert!(matches!(io::read_ppm(&p), Err(ViceError::Data { .. })));
}

fn small_state() -> TrainState {
    let cfg = TrainConfig { embed_dim: 4, concepts: 3, queue_capacity: 5, ..TrainConfig::default() };
    TrainState::init(&cfg).unwrap()
}

#[test]
fn checkpoint_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.ckpt");
    let state = small_state();
    io::save_checkpoint(&p, &state).unwrap();
    assert_eq!(io::load_checkpoint(&p).unwrap(), state);
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(io::load_checkpoint(&p), Err(ViceError::Data { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_rgb8_survives_png(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let rgb: Vec<u8> = (0..h * w * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
        let img = ImageTensor::from_rgb8(h, w, &rgb).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        io::write_png_image(&p, &img).unwrap();
        prop_assert_eq!(io::read_png_image(&p).unwrap().to_rgb8(), rgb);
    }
}
