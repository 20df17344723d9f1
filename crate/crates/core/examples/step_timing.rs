//! Time one training step and one evaluation batch per ablation rung.

use std::time::Instant;

use rsmg_core::augment::{prepare_scene, PatchBatch};
use rsmg_core::params::{ParamStore, Session};
use rsmg_core::pipeline::{synth_dataset, Ablation, ForwardMode, Model, ModelSpec, RunConfig, ShiftSpec, SynthSize};

fn main() -> rsmg_core::Result<()> {
    let (src, _) = synth_dataset(SynthSize::desk(), 3, &ShiftSpec::default(), 0)?;
    let centers: Vec<(usize, usize)> = src.labeled_pixels().into_iter().step_by(7).take(128).collect();
    let labels: Vec<usize> = centers.iter().map(|&(r, c)| src.label(r, c) as usize).collect();
    for a in [Ablation::Net1, Ablation::Net3, Ablation::Net4, Ablation::Net5] {
        let cfg = RunConfig::desk().with_ablation(a);
        let prep = prepare_scene(&src, cfg.dtaug.then_some(cfg.pca_components), None, None)?;
        let batch = PatchBatch::gather(&prep, &centers, labels.clone(), 11)?;
        let spec = ModelSpec {
            run: cfg,
            c_m1: prep.m1.shape()[0],
            c_m2: prep.m2.shape()[0],
            classes: 3,
        };
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, spec, 1)?;
        let t0 = Instant::now();
        let mut s = Session::new(&store, true);
        let x1 = s.constant(batch.m1.clone());
        let x2 = s.constant(batch.m2.clone());
        let fwd = model.forward(&mut s, x1, x2, ForwardMode::Train { seed: 1 })?;
        let (loss, _) = model.loss(&mut s, &fwd, &labels)?;
        let t1 = Instant::now();
        s.backward(loss)?;
        let t2 = Instant::now();
        let mut e = Session::new(&store, false);
        let y1 = e.constant(batch.m1.clone());
        let y2 = e.constant(batch.m2.clone());
        model.forward(&mut e, y1, y2, ForwardMode::Eval)?;
        let t3 = Instant::now();
        println!(
            "{a}: fwd {:.3}s bwd {:.3}s eval {:.3}s nodes {}",
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            (t3 - t2).as_secs_f64(),
            s.len()
        );
    }
    Ok(())
}
