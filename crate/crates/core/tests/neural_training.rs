use mimo_resample::detectors::MlDetector;
use mimo_resample::harness::evaluate_variant;
use mimo_resample::mimo_model::{ModulationKind, ModulationSpec, SimConfig};
use mimo_resample::neural::{train, TrainConfig};
use mimo_resample::resampler::{CombineDomain, WeightMode};
use mimo_resample::transforms::TransformTag;

#[test]
fn qpsk_network_lands_between_ml_and_three_times_ml() {
    let modulation = ModulationSpec { kind: ModulationKind::Qam, order: 4, normalized: false };
    let model = train(&TrainConfig {
        n_rx: 2,
        n_tx: 2,
        modulation,
        snr_db: 15.0,
        n_train: 200_000,
        batch_size: 128,
        epochs: 20,
        learning_rate: 0.01,
        momentum: 0.9,
        seed: 1,
        hidden: vec![128, 128, 128],
        include_noise_var: false,
    })
    .unwrap();
    let sim = SimConfig { n_rx: 2, n_tx: 2, modulation, snr_db: 15.0, master_seed: 1515, n_trials: 100_000 };
    let ser = |d: &dyn mimo_resample::detectors::Detector| {
        let e = evaluate_variant(d, &[TransformTag::Identity], &WeightMode::Uniform, CombineDomain::Marginal, &sim)
            .unwrap();
        e.symbol_errors as f64 / e.symbols as f64
    };
    let ml = ser(&MlDetector::full_posterior());
    let nn = ser(&model);
    assert!(ml < nn && nn < 3.0 * ml, "ML {ml:.4}, network {nn:.4}");
}
