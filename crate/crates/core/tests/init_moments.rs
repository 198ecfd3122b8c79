use adfa_snn::topology::{init_feedback, init_weights, NetworkTopology, WeightStats};
use adfa_snn::InitStats;

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[test]
fn sampled_weights_match_their_target_moments() {
    let stats = InitStats::default();
    // 784 x 200 = 156_800 draws in the first layer
    let topo = NetworkTopology::new(vec![784, 200, 10], 7).unwrap();
    let (weights, biases, targets) = init_weights(&topo, &stats).unwrap();
    let w = weights[0].as_slice();
    assert!(w.len() >= 100_000);
    let (mean, std) = moments(w);
    let t = targets[0];
    let se = t.std / (w.len() as f64).sqrt();
    assert!((mean - t.mean).abs() < 3.0 * se, "mean {mean} vs {} (se {se})", t.mean);
    assert!((std / t.std - 1.0).abs() < 0.05, "std {std} vs {}", t.std);
    assert!(biases.iter().flatten().all(|&b| b == 0.8));

    let half_width = 3f64.sqrt() * t.std;
    assert!(w.iter().all(|&x| (x - t.mean).abs() <= half_width + 1e-12));
}

#[test]
fn drive_moments_come_out_as_requested() {
    // presynaptic activity with E[x] = alpha v and E[x^2] = alpha^2 E[v^2]
    let stats = InitStats::default();
    for fan_in in [10, 100, 784] {
        let t = WeightStats::desired(0, fan_in, &stats).unwrap();
        let n = fan_in as f64;
        let x = stats.alpha * stats.v_mean;
        let xx = stats.alpha * stats.alpha * stats.v_second;
        let b = stats.bias_init;
        let mean = n * x * t.mean + b;
        let second = n * xx * t.second_moment + n * (n - 1.0) * x * x * t.mean * t.mean + 2.0 * b * n * x * t.mean + b * b;
        assert!((mean - stats.v_mean).abs() < 1e-9, "fan-in {fan_in}: mean {mean}");
        assert!((second - stats.v_second).abs() < 1e-9, "fan-in {fan_in}: second moment {second}");
    }
}

#[test]
fn feedback_is_reproducible_and_scaled_by_gamma() {
    let topo = NetworkTopology::new(vec![20, 30, 40, 10], 3).unwrap();
    let (_, _, moments) = init_weights(&topo, &InitStats::default()).unwrap();
    let a = init_feedback(&moments, &topo, 0.03).unwrap();
    let b = init_feedback(&moments, &topo, 0.03).unwrap();
    assert_eq!(a, b);
    let zero = init_feedback(&moments, &topo, 0.0).unwrap();
    assert!(zero.chain.iter().all(|m| m.as_slice().iter().all(|&x| x == 0.0)));
    assert_eq!(a.direct.len(), 2);
    assert_eq!(a.direct[0].shape(), (30, 10));
    assert_eq!(a.direct[1].shape(), (40, 10));
}
