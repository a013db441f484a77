// Temporary tuning probe; deleted before ship.
use synlab_core::data::DatasetSpec;
use synlab_core::eval::{build_seed_artifacts, run_arm, AblationArm, BatteryConfig, Task};
use synlab_core::spectrum::filter_spectrum;

#[test]
#[ignore]
fn probe_lowquality_anatomy() {
    let pretrain: usize = std::env::var("PROBE_PRE").ok().and_then(|v| v.parse().ok()).unwrap_or(5);
    let h_hard: f64 = std::env::var("PROBE_HH").ok().and_then(|v| v.parse().ok()).unwrap_or(0.5);
    let de: usize = std::env::var("PROBE_DE").ok().and_then(|v| v.parse().ok()).unwrap_or(60);
    let dataset = DatasetSpec::lowquality(10, 60, 0.4, 0);
    let mut cfg = BatteryConfig::for_task(Task::LowQuality, dataset, vec![1, 2, 3]);
    cfg.pretrain_epochs = pretrain;
    cfg.h_hard = h_hard;
    cfg.noise_train.epochs = de;
    if let Ok(v) = std::env::var("PROBE_ECL") { cfg.train.curriculum_epochs = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("PROBE_PF") { cfg.probe_fraction = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("PROBE_VPL") { cfg.validation_per_lambda = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("PROBE_SCALE") { cfg.default_scale = Some(v.parse().unwrap()); }
    if let Ok(v) = std::env::var("PROBE_HF") {
        cfg.h_filter = synlab_core::eval::ThresholdChoice::Fixed(v.parse().unwrap());
    }
    let mut d_adapt = 0.0;
    let mut d_all = 0.0;
    let mut d_real = 0.0;
    for &seed in &cfg.seeds.clone() {
        let art = build_seed_artifacts(&cfg, seed).unwrap();
        let thr = match cfg.h_filter {
            synlab_core::eval::ThresholdChoice::Auto => art.calibrated_threshold,
            synlab_core::eval::ThresholdChoice::Fixed(h) => h,
        };
        let mut entries = art.entries.clone();
        let kept = filter_spectrum(&mut entries, thr);
        let mut per_level = vec![0usize; cfg.grid.len()];
        for e in entries.iter().filter(|e| e.kept) {
            per_level[e.lambda_index] += 1;
        }
        println!(
            "seed={seed} hard={} of {} kept={kept}/{} per_level={:?} thr={:.3}",
            art.hard.len(),
            art.bundle.train.len(),
            entries.len(),
            per_level,
            thr
        );
        let (rep_a, logs) = run_arm(&cfg, &art, &AblationArm::Adaptive).unwrap();
        let lambdas: Vec<f64> = logs.iter().filter_map(|l| l.lambda).collect();
        println!(
            "  adaptive ood_f1={:.4} chosen={:?}",
            rep_a.macro_f1_ood, lambdas
        );
        let (rep_b, _) = run_arm(&cfg, &art, &AblationArm::AllLevels).unwrap();
        let (rep_c, _) = run_arm(&cfg, &art, &AblationArm::RealOnly).unwrap();
        println!(
            "  all_levels ood_f1={:.4} real_only ood_f1={:.4}",
            rep_b.macro_f1_ood, rep_c.macro_f1_ood
        );
        d_adapt += rep_a.macro_f1_ood;
        d_all += rep_b.macro_f1_ood;
        d_real += rep_c.macro_f1_ood;
    }
    println!(
        "MEAN adaptive={:.4} all_levels={:.4} real_only={:.4}",
        d_adapt / 3.0,
        d_all / 3.0,
        d_real / 3.0
    );
}
