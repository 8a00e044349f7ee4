use stripe_core::config::RunConfig;
use stripe_core::data::{generate_synthetic, Dataset, Split, SyntheticConfig};
use stripe_core::losses::dilate_loss;
use stripe_core::nn::Forecaster;
use stripe_core::stripe::{new_forecaster, train_predictor, train_stripe_shape, train_stripe_time, DataMeta};

/// Mean DILATE of the z = 0 prediction over every (input, future) training pair.
fn train_dilate(f: &Forecaster, ds: &Dataset, cfg: &RunConfig) -> f64 {
    let lc = cfg.loss_config();
    let (mut sum, mut n) = (0.0, 0usize);
    for ex in ds.split(Split::Train) {
        let yhat = f.predict_deterministic(&ex.input).unwrap();
        for y in &ex.futures {
            sum += dilate_loss(&yhat, y, &lc).unwrap();
            n += 1;
        }
    }
    sum / n as f64
}

fn window_mean(v: &[f64], head: bool) -> f64 {
    let w = 20.min(v.len());
    let s = if head { &v[..w] } else { &v[v.len() - w..] };
    s.iter().sum::<f64>() / w as f64
}

#[test]
fn desk_scale_training_halves_dilate_and_proposals_diversify() {
    let ds = generate_synthetic(&SyntheticConfig::default(), 0).unwrap();
    let cfg = RunConfig::default();
    let untrained = train_dilate(&new_forecaster(&cfg, &DataMeta::of(&ds)), &ds, &cfg);
    let (f, rp) = train_predictor(&ds, &cfg).unwrap();
    let trained = train_dilate(&f, &ds, &cfg);
    println!("training DILATE {untrained:.4} -> {trained:.4}");
    assert!(trained <= 0.5 * untrained, "{untrained} -> {trained}");
    assert_eq!(rp.losses.len(), cfg.predictor_steps);

    let cfg = RunConfig {
        proposal_steps: 100,
        ..cfg
    };
    let (shape, rs) = train_stripe_shape(&ds, &f, &cfg).unwrap();
    let (_, rt) = train_stripe_time(&ds, &f, Some(&shape), &cfg).unwrap();
    for r in [&rs, &rt] {
        let (a, b) = (window_mean(&r.diversity, true), window_mean(&r.diversity, false));
        println!("{} diversity loss {a:.4} -> {b:.4}", r.stage);
        assert!(b < a, "{}: {a} -> {b}", r.stage);
        assert_eq!(r.psd_failures, 0);
    }
}
