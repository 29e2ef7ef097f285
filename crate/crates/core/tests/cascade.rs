use stalkfusion::cascade::{
    cascade_predict, fit_cascade, make_triplets, mean_shape, synth_shape_corpus, CascadeConfig, RidgeFitter,
    StageFitter, StageRegressor,
};

#[test]
fn training_residual_shrinks_monotonically() {
    let imgs = synth_shape_corpus(60, 8, 64, 11).unwrap();
    let triplets = make_triplets(&imgs, 5, 11).unwrap();
    assert_eq!(triplets.len(), 60 * 5);
    let fit = fit_cascade(triplets, &imgs, &CascadeConfig::default(), 1e-3).unwrap();
    eprintln!("{:?}", fit.residuals);
    for w in fit.residuals.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
    }
    let ratio = fit.residuals.last().unwrap() / fit.residuals[0];
    assert!(ratio < 0.3, "ratio {ratio}");
    for t in &fit.triplets {
        for ((e, d), g) in t.estimate.coords().iter().zip(t.delta.coords()).zip(imgs[t.image].shape.coords()) {
            assert!((e + d - g).abs() < 1e-9);
        }
    }
}

#[test]
fn held_out_prediction_from_mean_shape() {
    let imgs = synth_shape_corpus(80, 8, 64, 5).unwrap();
    let (train, test) = imgs.split_at(60);
    let triplets = make_triplets(train, 5, 5).unwrap();
    let fit = fit_cascade(triplets, train, &CascadeConfig::default(), 1e-3).unwrap();
    let init = mean_shape(train).unwrap();
    let (mut before, mut after) = (0.0, 0.0);
    for a in test {
        before += a.shape.sub(&init).norm();
        let p = cascade_predict(&fit.model, &a.image, &init);
        after += a.shape.sub(&p).norm();
        // Stage-by-stage application composes to the same result.
        let half = fit.model.apply_stages(&a.image, init.clone(), 0..20);
        let full = fit.model.apply_stages(&a.image, half, 20..fit.model.stages.len());
        assert_eq!(full, p);
    }
    eprintln!("held out {before} -> {after}");
    assert!(after < 0.3 * before, "{after} vs {before}");
}

#[test]
fn one_stage_matches_closed_form_ridge() {
    // One landmark, scalar features: compare against a hand-solved ridge fit.
    let x = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
    let y = vec![vec![1.0, 0.0], vec![3.0, 1.0], vec![5.0, 2.0], vec![7.0, 3.0]];
    let lambda = 0.5;
    let stage = RidgeFitter { lambda }.fit(&x, &y).unwrap();
    // centred x: -1.5,-0.5,0.5,1.5 → Σx² = 5; Σxy = 10 and 5.
    let w0 = 10.0 / (5.0 + lambda);
    let w1 = 5.0 / (5.0 + lambda);
    let p = stage.predict(&[2.0]);
    assert!((p[0] - (4.0 + w0 * 0.5)).abs() < 1e-12);
    assert!((p[1] - (1.5 + w1 * 0.5)).abs() < 1e-12);
}
