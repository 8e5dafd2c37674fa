//! The two ways of putting a decoder behind shared tokens: decode each token
//! then unshare the predictions (eq1), or unshare the tokens and decode on
//! the spatial grid (eq2). Trains both briefly at ~30% reduction and checks
//! that a majority vote changes nothing on the eq1 outputs.
//!
//! ```bash
//! cargo run --release --example decoder_paths -- [iterations]
//! ```

use cts::data::{Dataset, DatasetSpec};
use cts::eval::{evaluate, majority_vote, setting_for_reduction};
use cts::segmenter::{train_segmenter, DecoderKind, PolicySource, SegConfig};

fn main() -> anyhow::Result<()> {
    let iterations = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(150);
    let (train, val) = Dataset::generate(&DatasetSpec::default())?.split(40);

    for decoder in [DecoderKind::Linear, DecoderKind::Spatial] {
        let config = SegConfig {
            decoder,
            iterations,
            ..SegConfig::default()
        };
        let s = setting_for_reduction(&config.geom()?, 0.30);
        let t0 = std::time::Instant::now();
        let (model, _) = train_segmenter(&train, &PolicySource::Oracle, s, &config)?;
        let res = evaluate(&model, &val, &PolicySource::Oracle, s)?;
        let changed: usize = res
            .predictions
            .iter()
            .zip(&res.policies)
            .map(|(pred, policy)| {
                let voted = majority_vote(pred, policy, config.vit.patch_size)?;
                Ok(voted.labels.iter().zip(&pred.labels).filter(|(a, b)| a != b).count())
            })
            .sum::<anyhow::Result<usize>>()?;
        println!(
            "{} S={s}: val mIoU {:.2}, pixel acc {:.3}, majority vote changes {changed} pixels ({:.0}s)",
            decoder.path_name(),
            100.0 * res.miou(),
            res.confusion.pixel_accuracy(),
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
