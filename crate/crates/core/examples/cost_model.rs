//! Analytic FLOPs across the sharing schedule, next to measured throughput
//! of the full pipeline (policy network included) on this machine.
//!
//! ```bash
//! cargo run --release --example cost_model -- [iters]
//! ```

use cts::data::{Dataset, DatasetSpec};
use cts::eval::{benchmark, decoder_flops, flop_model, infer_once, scaled_schedule, CostReport};
use cts::policy_net::{PolicyNet, PolicyNetConfig};
use cts::segmenter::{SegConfig, SegModel};

fn main() -> anyhow::Result<()> {
    let iters = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(50);
    // throughput does not depend on the weights
    let model = SegModel::init(SegConfig::default())?;
    let net = PolicyNet::init(PolicyNetConfig::default())?;
    let image = Dataset::generate(&DatasetSpec { count: 1, ..DatasetSpec::default() })?.samples[0].image.clone();
    let n = model.geom().num_patches();
    let policy = net.flops(64, 64)?;

    println!("{:>4} {:>5} {:>9} {:>12} {:>12} {:>12} {:>10}", "S", "M", "reduction", "attention", "quadratic", "total", "images/s");
    let mut base_quad = None;
    for s in scaled_schedule(n / 4) {
        let m = n - 3 * s;
        let mut r = CostReport::new(n, s, flop_model(&model.config.vit, m, decoder_flops(&model, m), (s > 0).then_some(policy)))?;
        let bench = benchmark(1, iters / 2, iters, || infer_once(&model, Some(&net), &image, s).map(|_| ()))?;
        r.images_per_sec = Some(bench.images_per_sec);
        let q = r.flops.attention_quadratic as f64;
        let base = *base_quad.get_or_insert(q);
        println!(
            "{s:>4} {m:>5} {:>8.1}% {:>12} {:>11.3}x {:>12} {:>10.1}",
            100.0 * r.token_reduction,
            r.flops.attention,
            q / base,
            r.flops.total(),
            bench.images_per_sec
        );
    }
    println!("(2 FLOPs per multiply-accumulate; {})", cts::eval::hardware_string());
    Ok(())
}
