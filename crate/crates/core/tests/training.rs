use isoprobe_core::eval::windows_from_series;
use isoprobe_core::kernelsynth::default_datasets;
use isoprobe_core::model::{batch_loss, train, ModelHyper, TrainConfig, Window};
use isoprobe_core::tokenizer::TokenizerConfig;

fn seasonal_windows(vocab: usize) -> Vec<Window> {
    let spec = default_datasets(256, 4).into_iter().find(|d| d.name == "seasonality_1").unwrap();
    let tok = TokenizerConfig::uniform(vocab, -15.0, 15.0).unwrap();
    spec.generate(3)
        .unwrap()
        .iter()
        .flat_map(|s| windows_from_series(&s.values, 16, 4, 4, &tok).unwrap())
        .collect()
}

#[test]
fn memorizes_a_single_window() {
    let w = Window { tokens: vec![3, 7, 1, 12, 5, 9, 2, 14, 6, 11], context_len: 6 };
    let hyper = ModelHyper { vocab_size: 16, dim: 8, rank: 4, layers: 1 };
    let cfg = TrainConfig { learning_rate: 0.5, steps: 1500, batch_size: 1, context_len: 6, horizon: 4, seed: 1 };
    let out = train(std::slice::from_ref(&w), hyper, &cfg).unwrap();
    let final_loss = batch_loss(&out.params, &[w]).unwrap();
    assert!(final_loss < 0.01, "loss {final_loss}");
}

#[test]
fn loss_moving_average_decreases_on_seasonal_data() {
    let windows = seasonal_windows(64);
    let hyper = ModelHyper { vocab_size: 64, dim: 16, rank: 8, layers: 2 };
    let cfg = TrainConfig { steps: 400, seed: 5, ..Default::default() };
    let out = train(&windows, hyper, &cfg).unwrap();
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let first = avg(&out.losses[..50]);
    let last = avg(&out.losses[out.losses.len() - 50..]);
    assert!(last < first, "moving average {first} -> {last}");
}

#[test]
fn same_seed_trains_bit_identically() {
    let windows = seasonal_windows(32);
    let hyper = ModelHyper { vocab_size: 32, dim: 8, rank: 4, layers: 2 };
    let cfg = TrainConfig { steps: 40, seed: 9, ..Default::default() };
    let a = train(&windows, hyper, &cfg).unwrap();
    let b = train(&windows, hyper, &cfg).unwrap();
    let bits = |o: &isoprobe_core::model::TrainOutcome| -> Vec<u64> {
        o.params.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.losses, b.losses);

    let other = train(&windows, hyper, &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(bits(&a), bits(&other));
}

#[test]
fn divergence_is_reported() {
    let windows = seasonal_windows(32);
    let hyper = ModelHyper { vocab_size: 32, dim: 8, rank: 4, layers: 1 };
    let cfg = TrainConfig { learning_rate: 1e6, steps: 50, seed: 2, ..Default::default() };
    assert!(train(&windows, hyper, &cfg).is_err());
}
