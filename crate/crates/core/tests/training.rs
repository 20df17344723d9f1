use rsmg_core::pipeline::{
    evaluate, synth_dataset, train_on_scene, Ablation, AuxFeatures, RunConfig, ShiftSpec, SynthSize,
};

fn small_run(a: Ablation) -> RunConfig {
    let mut cfg = RunConfig::desk().with_ablation(a);
    cfg.epochs = 6;
    cfg
}

const SMALL: SynthSize = SynthSize {
    h: 48,
    w: 48,
    bands: 16,
};

#[test]
fn last_epoch_loss_below_first() {
    for seed in 0..5 {
        let (src, _) = synth_dataset(SMALL, 3, &ShiftSpec::default(), seed).unwrap();
        let tm = train_on_scene(&small_run(Ablation::Net5), &src, &AuxFeatures::default(), seed).unwrap();
        let means = tm.epoch_means();
        assert!(means[means.len() - 1] < means[0], "seed {seed}: epoch losses {means:?}");
    }
}

#[test]
fn identity_shift_scores_equal_on_both_scenes() {
    let (mut on_src, mut on_tgt) = (0.0, 0.0);
    for seed in 0..5 {
        let (src, tgt) = synth_dataset(SMALL, 3, &ShiftSpec::identity(), seed).unwrap();
        let tm = train_on_scene(&small_run(Ablation::Net1), &src, &AuxFeatures::default(), seed).unwrap();
        on_src += evaluate(&tm.model, &tm.store, &src, &AuxFeatures::default())
            .unwrap()
            .oa
            / 5.0;
        on_tgt += evaluate(&tm.model, &tm.store, &tgt, &AuxFeatures::default())
            .unwrap()
            .oa
            / 5.0;
    }
    assert!(
        (on_src - on_tgt).abs() <= 0.02,
        "source OA {on_src:.4}, target OA {on_tgt:.4}"
    );
}

#[test]
fn stratified_and_uniform_sampling_both_train() {
    let (src, _) = synth_dataset(SynthSize { h: 32, w: 32, bands: 8 }, 3, &ShiftSpec::default(), 3).unwrap();
    for sampling in ["stratified", "uniform"] {
        let mut cfg = small_run(Ablation::Net3);
        cfg.epochs = 2;
        cfg.sampling = sampling.parse().unwrap();
        let tm = train_on_scene(&cfg, &src, &AuxFeatures::default(), 1).unwrap();
        assert!(tm.trace.iter().all(|s| s.loss.is_finite()));
    }
}
