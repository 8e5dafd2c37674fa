//! Token sharing on one scene: the oracle picks the most homogeneous
//! superpatches, each shared superpatch becomes a single token, and the
//! pixel round trip shows what the backbone actually sees.
//!
//! ```bash
//! cargo run --release --example token_sharing -- [scene_seed]
//! ```

use cts::data::{generate_scene, SceneSpec};
use cts::policy::{gt_policy, select_top_s};
use cts::sharing::{reassemble, GridGeom, TokenLayout};

fn main() -> anyhow::Result<()> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(7);
    let spec = SceneSpec {
        seed,
        ..SceneSpec::default()
    };
    let (image, mask) = generate_scene(&spec)?;
    let p = spec.patch_size;
    let geom = GridGeom::new(spec.height, spec.width, p)?;
    let gt = gt_policy(&mask, p)?;
    println!(
        "scene {seed}: N={} patches, {} of {} superpatches are single-class",
        geom.num_patches(),
        gt.positives(),
        gt.grid.len()
    );

    println!("{:>4} {:>6} {:>10} {:>14}", "S", "M", "reduction", "max |Δpixel|");
    for s in [0, 8, 16, 26, 32, gt.positives(), 64] {
        let policy = select_top_s(&gt.as_scores(), s)?;
        let layout = TokenLayout::new(geom, &policy)?;
        let seen = reassemble(&layout.unshare_pixels(&layout.share_pixels(&image)?)?);
        let err = seen.data.iter().zip(&image.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!(
            "{s:>4} {:>6} {:>9.1}% {err:>14.4}",
            layout.num_tokens(),
            100.0 * layout.num_shared() as f64 * 3.0 / geom.num_patches() as f64
        );
    }

    // sharing map: '#' shared at 30%, '.' kept
    let policy = select_top_s(&gt.as_scores(), 26)?;
    println!("\nshared superpatches at S=26:");
    for r in 0..policy.rows {
        let row: String = (0..policy.cols).map(|c| if policy.is_shared(r, c) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
    Ok(())
}
