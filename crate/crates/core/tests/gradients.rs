mod common;

use common::{central_difference, relative_error, HeadOracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stace_core::cav::Cav;
use stace_core::convnet::{BuiltinNet, ModelBackend, NetConfig};
use stace_core::scoring::directional_derivative;
use stace_core::tensor::{compose_masked, Dims3, VideoTensor, VoxelMask};

const EPS: f64 = 1e-3;

fn random_video(dims: Dims3, channels: usize, rng: &mut ChaCha8Rng) -> VideoTensor {
    let data = (0..dims.voxels() * channels).map(|_| rng.gen::<f32>()).collect();
    VideoTensor::from_vec(dims, channels, data).unwrap()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

/// Draws (video, class) pairs whose hidden units all sit well away from
/// their ReLU kink under a coordinate step of `EPS`.
fn pairs(net: &BuiltinNet, oracle: &HeadOracle, count: usize, seed: u64) -> Vec<(VideoTensor, usize)> {
    let (dims, channels) = net.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        assert!(tries < 50 * count, "could not find inputs away from ReLU kinks");
        let v = random_video(dims, channels, &mut rng);
        let gap = to_f64(&net.activations(&v, "gap").unwrap());
        if oracle.kink_margin(&gap, EPS) > 2.0 {
            let class = rng.gen_range(0..net.num_classes());
            out.push((v, class));
        }
    }
    out
}

fn model() -> (BuiltinNet, HeadOracle) {
    let net = BuiltinNet::init(NetConfig::new(4), 11).unwrap();
    let oracle = HeadOracle::from_stn1(&net.to_bytes());
    (net, oracle)
}

#[test]
fn oracle_head_agrees_with_model_logits() {
    let (net, oracle) = model();
    for (v, _) in pairs(&net, &oracle, 5, 1) {
        let gap = to_f64(&net.activations(&v, "gap").unwrap());
        let logits = net.predict(&v).unwrap().logits;
        for (c, l) in logits.iter().enumerate() {
            assert!((oracle.logit_from_gap(&gap, c) - *l as f64).abs() < 1e-4);
        }
    }
}

#[test]
fn gap_gradient_matches_central_differences() {
    let (net, oracle) = model();
    let mut worst = 0.0f64;
    for (v, class) in pairs(&net, &oracle, 24, 2) {
        let gap = to_f64(&net.activations(&v, "gap").unwrap());
        let grad = net.grad_logit_wrt_activations(&v, class, "gap").unwrap();
        for (i, g) in grad.iter().enumerate() {
            let fd = central_difference(|x| oracle.logit_from_gap(x, class), &gap, i, EPS);
            worst = worst.max(relative_error(*g as f64, fd));
        }
    }
    assert!(worst < 1e-3, "max relative error {worst:e}");
}

#[test]
fn conv3_gradient_matches_central_differences() {
    let (net, oracle) = model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for (v, class) in pairs(&net, &oracle, 20, 4) {
        let block = to_f64(&net.activations(&v, "conv3").unwrap());
        let grad = net.grad_logit_wrt_activations(&v, class, "conv3").unwrap();
        let f = |x: &[f64]| oracle.logit_from_gap(&oracle.gap_of(x), class);
        for _ in 0..16 {
            let i = rng.gen_range(0..block.len());
            worst = worst.max(relative_error(grad[i] as f64, central_difference(f, &block, i, EPS)));
        }
    }
    assert!(worst < 1e-3, "max relative error {worst:e}");
}

#[test]
fn fc1_gradient_is_the_class_row() {
    let (net, oracle) = model();
    for (v, class) in pairs(&net, &oracle, 4, 5) {
        let hidden = to_f64(&net.activations(&v, "fc1").unwrap());
        let grad = net.grad_logit_wrt_activations(&v, class, "fc1").unwrap();
        for (i, g) in grad.iter().enumerate() {
            let fd = central_difference(|x| oracle.logit_from_hidden(x, class), &hidden, i, EPS);
            assert!(relative_error(*g as f64, fd) < 1e-5);
        }
    }
}

#[test]
fn directional_derivative_matches_difference_quotient() {
    let (net, oracle) = model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (v, class) in pairs(&net, &oracle, 20, 7) {
        let gap = net.activations(&v, "gap").unwrap();
        let dir: Vec<f64> = (0..gap.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vector: Vec<f32> = dir.iter().map(|x| (x / norm) as f32).collect();
        let cav = Cav {
            class,
            concept: 0,
            layer: "gap".into(),
            vector: vector.clone(),
            heldout_accuracy: 1.0,
            train_accuracy: 1.0,
            n_pos: 4,
            n_neg: 4,
        };
        let s = directional_derivative(&net, &v, class, "gap", &cav).unwrap();

        let base = to_f64(&gap);
        let moved: Vec<f64> = base.iter().zip(&vector).map(|(a, d)| a + EPS * *d as f64).collect();
        let quotient = (oracle.logit_from_gap(&moved, class) - oracle.logit_from_gap(&base, class)) / EPS;
        assert!(relative_error(s, quotient) < 1e-2, "{s} vs {quotient}");

        // Same quotient through the model's own f32 upper layers, allowing
        // for the rounding of two f32 logits.
        let moved32: Vec<f32> = moved.iter().map(|x| *x as f32).collect();
        let up = net.logits_from_activations("gap", &moved32).unwrap()[class] as f64;
        let at = net.logits_from_activations("gap", &gap).unwrap()[class] as f64;
        let model_quotient = (up - at) / EPS;
        let rounding = 64.0 * f32::EPSILON as f64 * (up.abs() + at.abs() + 1.0) / EPS;
        assert!((s - model_quotient).abs() <= 1e-2 * s.abs() + rounding, "{s} vs {model_quotient}");
    }
}

#[test]
fn directional_derivative_rejects_layer_mismatch() {
    let (net, _) = model();
    let v = VideoTensor::zeros(Dims3::new(16, 32, 32), 3);
    let cav = Cav {
        class: 0,
        concept: 0,
        layer: "fc1".into(),
        vector: vec![0.0; 64],
        heldout_accuracy: 1.0,
        train_accuracy: 1.0,
        n_pos: 4,
        n_neg: 4,
    };
    assert!(directional_derivative(&net, &v, 0, "gap", &cav).is_err());
}

#[test]
fn full_mask_composition_keeps_activations_and_softmax_normalizes() {
    let (net, oracle) = model();
    for (v, _) in pairs(&net, &oracle, 3, 8) {
        let mean = VideoTensor::filled(v.dims(), &[0.3, 0.4, 0.5]);
        let all = VoxelMask::new(v.dims(), true);
        let composed = compose_masked(&mean, &v, &all).unwrap();
        assert_eq!(net.activations(&composed, "gap").unwrap(), net.activations(&v, "gap").unwrap());
        let p = net.predict(&v).unwrap().probabilities();
        assert!((p.iter().map(|x| *x as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
