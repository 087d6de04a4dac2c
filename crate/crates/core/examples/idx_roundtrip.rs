//! Exports the synthetic dataset in IDX format, reads it back and reports
//! the quantization error.
//!
//!     cargo run --example idx_roundtrip

use selectroscope::data::{generate, load_idx, write_idx, Split, SyntheticSpec};

fn main() -> selectroscope::Result<()> {
    let spec = SyntheticSpec::default();
    let (train, _) = generate(&spec)?;
    let dir = std::env::temp_dir().join("selectroscope_idx_example");
    std::fs::create_dir_all(&dir).expect("temp dir is writable");
    let (img, lab) = (dir.join("train-images.idx3-ubyte"), dir.join("train-labels.idx1-ubyte"));
    write_idx(&train, &img, &lab)?;

    let back = load_idx(&img, &lab, Some(spec.num_classes), Split::Train)?;
    let worst = train
        .images()
        .data()
        .iter()
        .zip(back.images().data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("wrote {} and {}", img.display(), lab.display());
    println!(
        "{} images of shape {:?}; labels equal: {}; max pixel error {:.5} (bound {:.5})",
        back.len(),
        back.image_shape(),
        back.labels() == train.labels(),
        worst,
        0.5 / 255.0
    );
    Ok(())
}
