use std::path::Path;

use adfa_snn::config::{parse_override, ExperimentConfig};
use adfa_snn::ga::{evolve, GaConfig};
use adfa_snn::trainer::{evaluate, train};
use adfa_snn::{Error, Mechanism, NetworkState};
use rand::{Rng, SeedableRng};

/// 4x4 images where class `c` lights up quadrant `c`, with noise.
fn write_quadrants(dir: &Path, stem: &str, n: usize, seed: u64) {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut images = vec![0, 0, 8, 3];
    images.extend((n as u32).to_be_bytes());
    images.extend(4u32.to_be_bytes());
    images.extend(4u32.to_be_bytes());
    let mut labels = vec![0, 0, 8, 1];
    labels.extend((n as u32).to_be_bytes());
    for i in 0..n {
        let c = i % 4;
        for r in 0..4 {
            for col in 0..4 {
                let quadrant = (r / 2) * 2 + col / 2;
                let base = if quadrant == c { 200 } else { 20 };
                images.push((base + rng.random_range(0..40)) as u8);
            }
        }
        labels.push(c as u8);
    }
    std::fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), images).unwrap();
    std::fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), labels).unwrap();
}

fn small_config(dir: &Path, mechanism: Mechanism) -> ExperimentConfig {
    let sets = [
        "network.layers=[16, 24, 10]".to_string(),
        "train.epochs=30".into(),
        "train.batch_size=8".into(),
        "train.interval_ms=30.0".into(),
        "train.settle_ms=5.0".into(),
        "train.lr_base=1.0".into(),
        "data.input_mean=3.0".into(),
    ];
    let overrides: Vec<_> = sets.iter().map(|s| parse_override(s).unwrap()).collect();
    let mut cfg = ExperimentConfig::preset("desk").unwrap().with_overrides(&overrides).unwrap();
    cfg.train.mechanism = mechanism;
    if mechanism != Mechanism::Adfa {
        cfg.train.backward = None;
    }
    cfg.data.dir = Some(dir.to_path_buf());
    cfg.validate().unwrap();
    cfg
}

#[test]
fn train_checkpoint_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    write_quadrants(dir.path(), "train", 160, 1);
    write_quadrants(dir.path(), "t10k", 40, 2);
    let cfg = small_config(dir.path(), Mechanism::Dfa);
    let data = cfg.load_data(dir.path()).unwrap();
    assert_eq!((data.train.len(), data.test.len(), data.train.dim()), (160, 40, 16));
    assert!((data.train.mean() - cfg.data.input_mean).abs() < 1e-9);

    let mut net = NetworkState::initialize(&cfg.topology().unwrap(), &cfg.init).unwrap();
    let tc = cfg.train_config();
    let rec = train(&mut net, &data.train, Some(&data.test), &tc).unwrap();
    assert_eq!(rec.epochs.len(), 30);
    let acc = rec.final_test_acc().unwrap();
    assert!(acc > 0.6, "test accuracy {acc}, record {:?}", rec.epochs);

    let mut bytes = Vec::new();
    net.write_checkpoint(&mut bytes).unwrap();
    let back = NetworkState::read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(back, net);
    assert_eq!(evaluate(&back, &data.test, &tc).unwrap(), acc);

    let mut again = NetworkState::initialize(&cfg.topology().unwrap(), &cfg.init).unwrap();
    let rec2 = train(&mut again, &data.train, Some(&data.test), &tc).unwrap();
    assert_eq!(again, net);
    assert_eq!(
        rec.epochs.iter().map(|e| e.test_acc).collect::<Vec<_>>(),
        rec2.epochs.iter().map(|e| e.test_acc).collect::<Vec<_>>()
    );
}

#[test]
fn truncated_idx_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    write_quadrants(dir.path(), "train", 8, 1);
    write_quadrants(dir.path(), "t10k", 8, 2);
    let images = dir.path().join("t10k-images-idx3-ubyte");
    let bytes = std::fs::read(&images).unwrap();
    std::fs::write(&images, &bytes[..bytes.len() - 5]).unwrap();
    let cfg = small_config(dir.path(), Mechanism::Bp);
    match cfg.load_data(dir.path()) {
        Err(e @ Error::Idx { .. }) => assert!(e.to_string().contains("t10k-images-idx3-ubyte"), "{e}"),
        other => panic!("expected an IDX error, got {other:?}"),
    }
}

#[test]
fn ga_best_fitness_never_drops() {
    let cfg = GaConfig { population: 6, generations: 8, ..GaConfig::default() };
    // cheap stand-in fitness: closeness of the first coefficient to 0.3
    let (best, rec) = evolve::<f64>(&cfg, |g| {
        let v = g.value(0.5);
        Ok(1.0 / (1.0 + (v - 0.3).abs()))
    })
    .unwrap();
    let trace = rec.best_fitness_trace();
    assert_eq!(trace.len(), 9);
    assert!(trace.windows(2).all(|w| w[1] >= w[0]), "{trace:?}");
    assert_eq!(best, rec.generations.last().unwrap().best);
}
