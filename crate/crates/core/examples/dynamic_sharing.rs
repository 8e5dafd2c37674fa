//! Per-image choice of how many superpatches to share. A policy network and
//! two segmenters (no sharing, ~30% reduction) are trained, then each image
//! is routed by counting policy scores above a threshold.
//!
//! ```bash
//! cargo run --release --example dynamic_sharing -- [seg_iterations] [policy_iterations]
//! ```

use std::collections::BTreeMap;

use cts::data::{Dataset, DatasetSpec};
use cts::eval::{dynamic_eval, setting_for_reduction};
use cts::policy_net::{train_policy, PolicyNetConfig};
use cts::segmenter::{train_segmenter, PolicySource, SegConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let seg_iters = args.next().map(|s| s.parse()).transpose()?.unwrap_or(150);
    let policy_iters = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let (train, val) = Dataset::generate(&DatasetSpec::default())?.split(40);

    let (net, _) = train_policy(&train, &PolicyNetConfig { iterations: policy_iters, ..PolicyNetConfig::default() })?;
    let config = SegConfig { iterations: seg_iters, ..SegConfig::default() };
    let s30 = setting_for_reduction(&config.geom()?, 0.30);
    let source = PolicySource::Net(Box::new(net.clone()));
    let mut models = BTreeMap::new();
    for s in [0, s30] {
        models.insert(s, train_segmenter(&train, &source, s, &config)?.0);
    }

    for tau in [0.3, 0.4, 0.5, 0.6, f64::INFINITY] {
        let rep = dynamic_eval(&models, &net, tau, &val, tau == 0.4)?;
        print!("{}", rep.table());
        println!();
    }
    Ok(())
}
