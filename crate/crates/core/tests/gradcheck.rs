use stalkfusion::gradcheck::{check_model, check_primitives, CheckConfig};
use stalkfusion::model::{ArchitectureConfig, Variant};

#[test]
fn layers_across_seeds() {
    let cfg = CheckConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        for r in check_primitives(seed, &cfg).unwrap() {
            assert!(r.max_rel_error < 1e-5, "{r:?}");
            worst = worst.max(r.max_rel_error);
        }
    }
    eprintln!("worst layer error {worst:e}");
}

#[test]
fn tiny_models_across_seeds() {
    let cfg = CheckConfig::default();
    let arch = ArchitectureConfig::tiny();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        for v in Variant::ALL {
            let r = check_model(v, &arch, seed, &cfg).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
            worst = worst.max(r.max_rel_error);
        }
    }
    eprintln!("worst model error {worst:e}");
}
