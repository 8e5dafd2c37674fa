//! Trains the superpatch policy network on synthetic scenes and compares
//! its top-S precision with random selection.
//!
//! ```bash
//! cargo run --release --example train_policy -- [iterations] [seed]
//! ```

use cts::data::{Dataset, DatasetSpec};
use cts::policy::{gt_policy, precision, random_policy, select_top_s};
use cts::policy_net::{train_policy, PolicyNetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map(|s| s.parse()).transpose()?.unwrap_or(300);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let data = Dataset::generate(&DatasetSpec::default())?;
    let (train, val) = data.split(40);
    let config = PolicyNetConfig {
        iterations,
        seed,
        ..PolicyNetConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (net, log) = train_policy(&train, &config)?;
    println!(
        "trained {} iterations in {:.1}s: loss {:.4} -> {:.4}",
        iterations,
        t0.elapsed().as_secs_f64(),
        log.initial(),
        log.tail_mean(20)
    );

    let s = 16; // 25% of the 64 superpatches
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut learned, mut random, mut base) = (0.0, 0.0, 0.0);
    for sample in &val.samples {
        let gt = gt_policy(&sample.mask, config.patch_size)?;
        learned += precision(&select_top_s(&net.scores(&sample.image)?, s)?, &gt)?;
        random += precision(&random_policy(gt.rows, gt.cols, s, &mut rng)?, &gt)?;
        base += gt.base_rate();
    }
    let n = val.len() as f64;
    println!("precision@S={s}: policy {:.3}  random {:.3}  base rate {:.3}", learned / n, random / n, base / n);
    Ok(())
}
