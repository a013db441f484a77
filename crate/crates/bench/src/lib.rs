//! Shared fixtures for the criterion benches.

use synlab_core::data::{make_lowquality_dataset, DataBundle, DatasetSpec};
use synlab_core::diffusion::{train_noise_model, NoiseModel, NoiseTrainConfig};
use synlab_core::schedule::{make_linear_schedule, VarianceSchedule};

pub fn bench_bundle() -> DataBundle {
    let mut spec = DatasetSpec::lowquality(4, 16, 0.0, 1234);
    spec.test_per_class = 8;
    make_lowquality_dataset(&spec).expect("bench dataset")
}

pub fn bench_schedule() -> VarianceSchedule {
    make_linear_schedule(200, 1e-4, 0.02).expect("bench schedule")
}

pub fn bench_model(bundle: &DataBundle, schedule: &VarianceSchedule) -> NoiseModel {
    let cfg = NoiseTrainConfig {
        epochs: 2,
        hidden: 64,
        seed: 5,
        ..Default::default()
    };
    train_noise_model(&bundle.train, 4, schedule, &cfg)
        .expect("bench model")
        .0
}
