//! Train and evaluate ablation rungs on the default synthetic task.
//!
//! ```text
//! cargo run --release -p rsmg-core --example ablation -- [seeds] [net1,net3,net5] [size=HxWxB] [key=value ...]
//! ```

use std::time::Instant;

use rsmg_core::pipeline::{
    evaluate, synth_dataset, train_on_scene, Ablation, AuxFeatures, RunConfig, ShiftSpec, SynthSize,
};

fn main() -> rsmg_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(1, |s| s.parse().expect("seed count"));
    let rungs: Vec<Ablation> = args
        .get(2)
        .map_or("net1,net3,net5", String::as_str)
        .split(',')
        .map(|s| s.parse())
        .collect::<rsmg_core::Result<_>>()?;
    let mut size = SynthSize::desk();
    let mut overrides = String::new();
    for kv in args.iter().skip(3) {
        match kv.strip_prefix("size=") {
            Some(dims) => {
                let d: Vec<usize> = dims.split('x').map(|v| v.parse().expect("size=HxWxB")).collect();
                size = SynthSize {
                    h: d[0],
                    w: d[1],
                    bands: d[2],
                };
            }
            None => overrides.push_str(&format!("{kv}\n")),
        }
    }
    for seed in 0..seeds {
        let (src, tgt) = synth_dataset(size, 3, &ShiftSpec::default(), seed)?;
        for &a in &rungs {
            let cfg = RunConfig::parse(&format!("preset = desk\nablation = {a}\n{overrides}"))?;
            let t0 = Instant::now();
            let tm = train_on_scene(&cfg, &src, &AuxFeatures::default(), seed)?;
            let train_s = t0.elapsed().as_secs_f64();
            let m_src = evaluate(&tm.model, &tm.store, &src, &AuxFeatures::default())?;
            let m_tgt = evaluate(&tm.model, &tm.store, &tgt, &AuxFeatures::default())?;
            let means = tm.epoch_means();
            println!(
                "seed {seed} {a}: target OA {:.4} AA {:.4} recall {:.2?} source OA {:.4} loss {:.3}->{:.3} train {train_s:.1}s total {:.1}s",
                m_tgt.oa,
                m_tgt.aa,
                m_tgt.per_class_recall,
                m_src.oa,
                means[0],
                means[means.len() - 1],
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
