//! Build a dataset archive, either from a directory of images or from the
//! synthetic shapes generator, and preview a few samples.
//!
//! cargo run --example ingest_images -- [image_dir]

use dpldm::data::{ingest, synthetic_shapes, Domain};

fn main() -> dpldm::Result<()> {
    let ds = match std::env::args().nth(1) {
        Some(dir) => ingest(dir.as_ref())?,
        None => synthetic_shapes(8, 16, Domain::Private, 0),
    };
    println!("{} images of {}x{}x{}, class counts {:?}", ds.len(), ds.channels, ds.height, ds.width, ds.class_counts());
    let path = std::env::temp_dir().join("dpldm-example.dsa");
    ds.save(&path)?;
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let ramp = [' ', '.', ':', '*', '#'];
    let per = ds.image_len();
    for i in 0..ds.len().min(2) {
        println!("label {}", ds.labels[i]);
        for y in 0..ds.height {
            let row: String = (0..ds.width).map(|x| ramp[ds.pixels[i * per + y * ds.width + x] as usize * ramp.len() / 256]).collect();
            println!("  {row}");
        }
    }
    Ok(())
}
