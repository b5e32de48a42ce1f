//! Regenerates the bundled toy models and corpus:
//!
//! ```text
//! cargo run -p offload-host --example train_toy
//! ```

use offload_host::files::{write_model, write_tensor};
use offload_host::toy;

fn main() -> anyhow::Result<()> {
    let dir = toy::assets_dir();
    let mlp = toy::train_mlp(toy::TRAIN_SEED);
    let held_out = toy::synthetic_samples(400, toy::CORPUS_SEED ^ 1);
    println!(
        "toy_mlp accuracy on held-out data: {:.4}",
        toy::accuracy(&mlp, &held_out)
    );
    write_model(&dir.join("toy_mlp.vsml"), &mlp)?;
    write_model(&dir.join("toy_cnn.vsml"), &toy::build_cnn(toy::CNN_SEED))?;
    let corpus_dir = toy::corpus_dir();
    for (i, x) in toy::corpus(toy::CORPUS_SEED).iter().enumerate() {
        write_tensor(&corpus_dir.join(format!("sample-{i:03}.vst")), x)?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}
