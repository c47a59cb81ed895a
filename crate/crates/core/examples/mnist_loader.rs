//! Loads the MNIST IDX files from a directory and prints class counts.
//!
//! cargo run --example mnist_loader -- data/mnist

use sadv::data::{load_mnist_split, subset};

fn main() -> sadv::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data/mnist".into());
    for prefix in ["train", "t10k"] {
        let ds = load_mnist_split(&dir, prefix)?;
        println!("{prefix}: {} images of {:?}, classes {:?}", ds.len(), ds.sample_shape(), ds.class_counts());
    }
    let test = load_mnist_split(&dir, "t10k")?;
    let small = subset(&test, 1000, 7)?;
    println!("stratified subset: {:?}", small.class_counts());
    Ok(())
}
