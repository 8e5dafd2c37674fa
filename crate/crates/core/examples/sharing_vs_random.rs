//! Trains three segmenters on synthetic scenes: no sharing, oracle-policy
//! sharing at ~30% token reduction, and random sharing at the same setting,
//! then reports validation mIoU for each.
//!
//! ```bash
//! cargo run --release --example sharing_vs_random -- [iterations] [seed] [eq1|eq2]
//! ```

use cts::data::{Dataset, DatasetSpec};
use cts::eval::{evaluate, setting_for_reduction};
use cts::segmenter::{train_segmenter, DecoderKind, PolicySource, SegConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map(|s| s.parse()).transpose()?.unwrap_or(300);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let decoder = DecoderKind::from_path(&args.next().unwrap_or_else(|| "eq1".into()))?;

    let (train, val) = Dataset::generate(&DatasetSpec::default())?.split(40);
    let config = SegConfig {
        iterations,
        seed,
        decoder,
        ..SegConfig::default()
    };
    let s30 = setting_for_reduction(&config.geom()?, 0.30);
    for (name, source, s) in [
        ("baseline", PolicySource::Oracle, 0),
        ("cts-oracle", PolicySource::Oracle, s30),
        ("random", PolicySource::Random { seed }, s30),
    ] {
        let t0 = std::time::Instant::now();
        let (model, log) = train_segmenter(&train, &source, s, &config)?;
        let result = evaluate(&model, &val, &source, s)?;
        println!(
            "{name:>10} S={s:>2}: loss {:.3} -> {:.3}, val mIoU {:.2}, pixel acc {:.3} ({:.0}s)",
            log.initial(),
            log.tail_mean(20),
            100.0 * result.miou(),
            result.confusion.pixel_accuracy(),
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
