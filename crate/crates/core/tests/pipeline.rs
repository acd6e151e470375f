use std::path::PathBuf;

use minsharp::checkpoint::{self, CheckpointMeta};
use minsharp::data::{corrupt_labels, load_idx, synthetic_blobs};
use minsharp::{minimum_sharpness_of, trace_exact, Mlp, Rng, SgdConfig};

fn sgd(epochs: usize, batch_size: usize) -> SgdConfig {
    SgdConfig { learning_rate: 0.05, momentum: 0.9, weight_decay: 1e-5, batch_size, epochs, seed: 1 }
}

#[test]
fn featureless_blobs_give_chance_accuracy() {
    let mut rng = Rng::seed_from_u64(1);
    let pool = synthetic_blobs(3000, 8, 4, 0.0, &mut rng).unwrap();
    let (train, test) = pool.shuffled_split(1000, 2000, &mut rng).unwrap();
    let net = Mlp::init(&[8, 16, 4], &mut rng).unwrap().train(&train, &sgd(20, 32)).unwrap().net;
    let acc = net.accuracy(&test).unwrap();
    assert!((acc - 0.25).abs() <= 0.05, "accuracy {acc}");
}

#[test]
fn well_separated_pair_is_learned_by_a_linear_model() {
    let mut rng = Rng::seed_from_u64(2);
    let data = synthetic_blobs(400, 5, 2, 10.0, &mut rng).unwrap();
    let net = Mlp::init(&[5, 2], &mut rng).unwrap().train(&data, &sgd(20, 32)).unwrap().net;
    assert!(net.accuracy(&data).unwrap() >= 0.99);
}

#[test]
fn training_moves_sharpness_and_checkpoints_preserve_it() {
    let mut rng = Rng::seed_from_u64(3);
    let data = synthetic_blobs(200, 6, 3, 3.0, &mut rng).unwrap();
    let init = Mlp::init(&[6, 12, 12, 3], &mut rng).unwrap();
    let trained = init.train(&data, &sgd(30, 20)).unwrap().net;
    let before = minimum_sharpness_of(&init, &data).unwrap();
    let after = minimum_sharpness_of(&trained, &data).unwrap();
    assert!(before.ms > 0.0 && after.ms > 0.0);
    assert_ne!(before.ms, after.ms);

    let text = checkpoint::to_json(&trained, &CheckpointMeta::default()).unwrap();
    let (restored, _) = checkpoint::from_json(&text).unwrap();
    assert_eq!(minimum_sharpness_of(&restored, &data).unwrap(), after);
}

#[test]
fn corrupted_labels_leave_the_trace_unchanged() {
    let mut rng = Rng::seed_from_u64(4);
    let data = synthetic_blobs(50, 4, 3, 1.0, &mut rng).unwrap();
    let noisy = corrupt_labels(&data, 1.0, &mut rng).unwrap();
    let net = Mlp::init(&[4, 6, 3], &mut rng).unwrap();
    assert_eq!(trace_exact(&net, &data).unwrap(), trace_exact(&net, &noisy).unwrap());
}

#[test]
fn bundled_digits_parse() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k");
    let data = load_idx(&dir.join("images-idx3-ubyte"), &dir.join("labels-idx1-ubyte"), 10).unwrap();
    assert_eq!(data.len(), 10_000);
    assert_eq!(data.input_dim(), 784);
    assert!(data.features().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    let mut counts = [0usize; 10];
    data.labels().iter().for_each(|&l| counts[l] += 1);
    assert!(counts.iter().all(|&c| c > 800), "{counts:?}");
}
