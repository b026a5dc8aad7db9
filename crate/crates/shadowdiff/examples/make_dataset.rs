//! Generate a small procedural shadow dataset (paired shadow / shadow-free /
//! mask PNG triplets plus a manifest) and print summary statistics.
//!
//! Run with: cargo run --example make_dataset [out_dir]

use shadowdiff::synthdata::{gen_dataset, load_split, DataCfg};
use std::path::{Path, PathBuf};

fn main() -> shadowdiff::Result<()> {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| Path::new("example_data").to_path_buf());
    let cfg = DataCfg {
        size: 64,
        train: 6,
        val: 2,
        test: 2,
        seed: 123,
    };
    let manifest = gen_dataset(&dir, &cfg)?;
    println!(
        "wrote {} triplets to {}",
        manifest.entries.len(),
        dir.display()
    );
    for split in ["train", "val", "test"] {
        let examples = load_split(&dir, split)?;
        let mut mask_area = 0.0;
        let mut darkening = 0.0;
        for e in &examples {
            let n = e.mask.len() as f64;
            mask_area += (0..e.mask.len()).map(|i| e.mask[i] as f64).sum::<f64>() / n;
            let d: f64 = (0..e.shadow.len())
                .map(|i| (e.shadow_free[i] - e.shadow[i]) as f64)
                .sum::<f64>()
                / e.shadow.len() as f64;
            darkening += d;
        }
        let n = examples.len() as f64;
        println!(
            "{split:>5}: {} examples, mean mask area {:.3}, mean darkening {:.4}",
            examples.len(),
            mask_area / n,
            darkening / n
        );
    }
    println!("manifest: {}", dir.join("manifest.txt").display());
    Ok(())
}
