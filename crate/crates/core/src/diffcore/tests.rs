use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t64(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64_slice(shape, v).unwrap()
}

/// loss = sum(output * weights); returns the probe and the analytic gradients.
fn projected_loss(
    spec: &NetworkSpec,
    params: &ParameterSet<f64>,
    input: &Tensor<f64>,
    cond: Option<&Tensor<f64>>,
    proj: &Tensor<f64>,
) -> (Probe, Option<ParameterSet<f64>>) {
    let trace = forward(spec, params, input, cond).unwrap();
    let loss: f64 = trace
        .output()
        .data()
        .iter()
        .zip(proj.data())
        .map(|(a, b)| a * b)
        .sum();
    let probe = Probe {
        loss,
        signature: trace.kink_signature(spec),
    };
    let grads = backward(spec, params, &trace, proj).unwrap().params;
    (probe, Some(grads))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    t64(shape, &v)
}

fn check_network(spec: &NetworkSpec, seed: u64, batch: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut params: ParameterSet<f64> = spec.init_params(seed).unwrap();
    // non-zero biases so the check covers them
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let mut in_shape = vec![batch];
    in_shape.extend_from_slice(&spec.input_shape);
    let input = random_tensor(&mut rng, in_shape, 0.0, 1.0);
    let cond = spec
        .condition_width()
        .map(|w| random_tensor(&mut rng, vec![batch, w], 0.0, 1.0));
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(&spec.output_shape().unwrap());
    let proj = random_tensor(&mut rng, out_shape, -1.0, 1.0);
    let (_, grads) = projected_loss(spec, &params, &input, cond.as_ref(), &proj);
    grad_check(&params, &grads.unwrap(), 1e-3, |p| {
        Ok(projected_loss(spec, p, &input, cond.as_ref(), &proj).0)
    })
    .unwrap()
}

#[test]
fn dense_identity_map() {
    let spec = NetworkSpec::new(vec![2]).dense("d", 2, 2, true);
    let mut params = ParameterSet::<f32>::new();
    params
        .insert("d.weight", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
        .unwrap();
    params.insert("d.bias", Tensor::zeros(vec![2])).unwrap();
    let x = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
    let out = forward(&spec, &params, &x, None).unwrap();
    assert_eq!(out.output().data(), &[3.0, 4.0]);
}

#[test]
fn relu_forward_and_backward() {
    let spec = NetworkSpec::new(vec![2]).relu();
    let params = ParameterSet::<f32>::new();
    let x = Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap();
    let trace = forward(&spec, &params, &x, None).unwrap();
    assert_eq!(trace.output().data(), &[0.0, 2.0]);
    let g = backward(&spec, &params, &trace, &Tensor::new(vec![1, 2], vec![5.0, 7.0]).unwrap())
        .unwrap();
    assert_eq!(g.input.unwrap().data(), &[0.0, 7.0]);
}

#[test]
fn conv_impulse_all_ones_kernel() {
    let spec = NetworkSpec::new(vec![1, 3, 3]).conv2d("c", 1, 1, 3, 1, 1, false);
    let mut params = ParameterSet::<f32>::new();
    params
        .insert("c.weight", Tensor::full(vec![1, 1, 3, 3], 1.0))
        .unwrap();
    let mut img = vec![0.0; 9];
    img[4] = 1.0;
    let x = Tensor::new(vec![1, 1, 3, 3], img).unwrap();
    let out = forward(&spec, &params, &x, None).unwrap();
    assert_eq!(out.output().shape(), &[1, 1, 3, 3]);
    assert_eq!(out.output().data()[4], 1.0);
}

#[test]
fn dense_weight_gradient_is_outer_product() {
    let spec = NetworkSpec::new(vec![3]).dense("d", 3, 2, false);
    let params: ParameterSet<f64> = spec.init_params(3).unwrap();
    let x = t64(vec![1, 3], &[0.5, -1.0, 2.0]);
    let trace = forward(&spec, &params, &x, None).unwrap();
    let gy = t64(vec![1, 2], &[1.5, -0.25]);
    let g = backward(&spec, &params, &trace, &gy).unwrap();
    let dw = g.params.get("d.weight").unwrap().data().to_vec();
    let expected: Vec<f64> = [1.5, -0.25]
        .iter()
        .flat_map(|a| [0.5, -1.0, 2.0].map(|b| a * b))
        .collect();
    assert_eq!(dw, expected);
}

#[test]
fn shape_mismatch_names_layer() {
    let spec = NetworkSpec::new(vec![4]).dense("first", 4, 3, true).dense("second", 2, 1, true);
    let err = spec.shapes().unwrap_err().to_string();
    assert!(err.contains("second"), "{err}");
    let ok = NetworkSpec::new(vec![4]).dense("first", 4, 3, true);
    let params: ParameterSet<f32> = ok.init_params(0).unwrap();
    let err = forward(&ok, &params, &Tensor::zeros(vec![1, 5]), None).unwrap_err();
    assert!(err.to_string().contains("input"));
}

#[test]
fn condition_contract() {
    let spec = NetworkSpec::new(vec![2]).concat_condition(3).dense("d", 5, 1, true);
    let params: ParameterSet<f32> = spec.init_params(0).unwrap();
    let x = Tensor::zeros(vec![2, 2]);
    assert!(forward(&spec, &params, &x, None).is_err());
    assert!(forward(&spec, &params, &x, Some(&Tensor::zeros(vec![2, 3]))).is_ok());
    let plain = NetworkSpec::new(vec![2]).relu();
    assert!(forward(&plain, &ParameterSet::<f32>::new(), &x, Some(&Tensor::zeros(vec![2, 3]))).is_err());
}

#[test]
fn stale_trace_is_rejected() {
    let a = NetworkSpec::new(vec![2]).dense("d", 2, 2, true);
    let b = NetworkSpec::new(vec![2]).dense("d", 2, 2, true).relu();
    let pa: ParameterSet<f32> = a.init_params(0).unwrap();
    let trace = forward(&a, &pa, &Tensor::zeros(vec![1, 2]), None).unwrap();
    assert!(backward(&b, &pa, &trace, &Tensor::zeros(vec![1, 2])).is_err());
}

#[test]
fn parameter_count_matches_declaration() {
    let spec = NetworkSpec::new(vec![1, 8, 8])
        .conv2d("c1", 1, 4, 3, 2, 1, true)
        .relu()
        .flatten()
        .dense("d", 64, 3, false);
    let params: ParameterSet<f32> = spec.init_params(1).unwrap();
    assert_eq!(params.numel(), 4 * 9 + 4 + 64 * 3);
    assert_eq!(spec.parameter_count(), params.numel());
}

#[test]
fn forward_is_bit_deterministic() {
    let spec = NetworkSpec::new(vec![1, 8, 8])
        .conv2d("c1", 1, 4, 3, 2, 1, true)
        .relu()
        .flatten()
        .dense("d", 64, 3, true)
        .softmax();
    let params: ParameterSet<f32> = spec.init_params(9).unwrap();
    let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
    let a = forward(&spec, &params, &x, None).unwrap();
    let b = forward(&spec, &params, &x, None).unwrap();
    assert_eq!(a.output().data(), b.output().data());
}

#[test]
fn two_layer_net_on_8x8_matches_finite_differences() {
    let spec = NetworkSpec::new(vec![1, 8, 8])
        .conv2d("c1", 1, 3, 3, 2, 1, true)
        .relu()
        .flatten()
        .dense("d", 48, 4, true);
    let report = check_network(&spec, 7, 2);
    assert!(report.max_rel_error <= 1e-3, "{report:?}");
    assert!(report.checked > 0);
}

#[test]
fn quadratic_one_weight() {
    let spec = NetworkSpec::new(vec![1]).dense("d", 1, 1, false);
    let mut params = ParameterSet::<f64>::new();
    params.insert("d.weight", t64(vec![1, 1], &[0.7])).unwrap();
    let x = t64(vec![1, 1], &[1.3]);
    let eval = |p: &ParameterSet<f64>| {
        let trace = forward(&spec, p, &x, None).unwrap();
        let y = trace.output().data()[0];
        let g = backward(&spec, p, &trace, &t64(vec![1, 1], &[2.0 * y])).unwrap();
        (y * y, g.params)
    };
    let (_, grads) = eval(&params);
    let report = grad_check(&params, &grads, 1e-3, |p| Ok(Probe::smooth(eval(p).0))).unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn zero_network_sum_loss() {
    let spec = NetworkSpec::new(vec![3]).dense("d", 3, 2, true);
    let mut params = ParameterSet::<f64>::new();
    params.insert("d.weight", Tensor::zeros(vec![2, 3])).unwrap();
    params.insert("d.bias", Tensor::zeros(vec![2])).unwrap();
    let x = Tensor::<f64>::zeros(vec![1, 3]);
    let ones = Tensor::full(vec![1, 2], 1.0);
    let trace = forward(&spec, &params, &x, None).unwrap();
    let grads = backward(&spec, &params, &trace, &ones).unwrap();
    assert!(grads.params.get("d.weight").unwrap().data().iter().all(|&v| v == 0.0));
    let report = grad_check(&params, &grads.params, 1e-3, |p| {
        let t = forward(&spec, p, &x, None).unwrap();
        Ok(Probe::smooth(t.output().data().iter().sum()))
    })
    .unwrap();
    // the bias gradient is exactly 1 and is recovered exactly
    assert_eq!(report.max_rel_error, 0.0);
}

#[test]
fn sigmoid_bce_head() {
    let spec = NetworkSpec::new(vec![4]).dense("d", 4, 1, true).sigmoid();
    let params: ParameterSet<f64> = spec.init_params(5).unwrap();
    let x = t64(vec![3, 4], &[0.1, 0.9, 0.3, 0.5, 0.7, 0.2, 0.8, 0.4, 0.6, 0.6, 0.1, 0.0]);
    let y = [1.0, 0.0, 1.0];
    let eval = |p: &ParameterSet<f64>| {
        let trace = forward(&spec, p, &x, None).unwrap();
        let out = trace.output().data().to_vec();
        let loss: f64 = out
            .iter()
            .zip(y)
            .map(|(&q, t)| -(t * q.ln() + (1.0 - t) * (1.0 - q).ln()))
            .sum();
        let grad: Vec<f64> = out
            .iter()
            .zip(y)
            .map(|(&q, t)| -(t / q) + (1.0 - t) / (1.0 - q))
            .collect();
        let g = backward(&spec, p, &trace, &t64(vec![3, 1], &grad)).unwrap();
        (loss, g.params)
    };
    let (_, grads) = eval(&params);
    let report = grad_check(&params, &grads, 1e-3, |p| Ok(Probe::smooth(eval(p).0))).unwrap();
    assert!(report.max_rel_error <= 1e-3, "{report:?}");
}

#[test]
fn grad_check_rejects_non_finite_loss() {
    let mut params = ParameterSet::<f64>::new();
    params.insert("w", t64(vec![1], &[1.0])).unwrap();
    let r = grad_check(&params, &params.clone(), 1e-3, |_| Ok(Probe::smooth(f64::NAN)));
    assert!(r.is_err());
}

#[test]
fn decoder_style_network_gradients() {
    let spec = NetworkSpec::new(vec![3])
        .concat_condition(2)
        .dense("fc", 5, 2 * 2 * 2, true)
        .relu()
        .reshape(vec![2, 2, 2])
        .upsample2x()
        .conv2d("c", 2, 1, 3, 1, 1, true)
        .sigmoid();
    let report = check_network(&spec, 11, 2);
    assert!(report.max_rel_error <= 1e-3, "{report:?}");
}

#[test]
fn input_gradient_matches_finite_differences() {
    let spec = NetworkSpec::new(vec![1, 6, 6])
        .conv2d("c", 1, 2, 4, 2, 1, true)
        .sigmoid()
        .flatten()
        .dense("d", 18, 3, true)
        .softmax();
    let params: ParameterSet<f64> = spec.init_params(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, vec![1, 1, 6, 6], 0.0, 1.0);
    let proj = random_tensor(&mut rng, vec![1, 3], -1.0, 1.0);
    let loss = |x: &Tensor<f64>| -> f64 {
        let t = forward(&spec, &params, x, None).unwrap();
        t.output().data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };
    let trace = forward(&spec, &params, &x, None).unwrap();
    let gx = backward(&spec, &params, &trace, &proj).unwrap().input.unwrap();
    for i in 0..36 {
        let mut xp = x.clone();
        xp.data_mut()[i] += 1e-5;
        let mut xm = x.clone();
        xm.data_mut()[i] -= 1e-5;
        let num = (loss(&xp) - loss(&xm)) / 2e-5;
        assert!((num - gx.data()[i]).abs() <= 1e-6 + 1e-4 * num.abs(), "pixel {i}");
    }
}

#[test]
fn skipping_param_grads_keeps_input_grad() {
    let spec = NetworkSpec::new(vec![1, 4, 4])
        .conv2d("c", 1, 2, 3, 1, 1, true)
        .relu()
        .flatten()
        .dense("d", 32, 2, true);
    let params: ParameterSet<f64> = spec.init_params(8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, vec![2, 1, 4, 4], 0.0, 1.0);
    let gy = random_tensor(&mut rng, vec![2, 2], -1.0, 1.0);
    let trace = forward(&spec, &params, &x, None).unwrap();
    let full = backward(&spec, &params, &trace, &gy).unwrap();
    let lean = backward_with(
        &spec,
        &params,
        &trace,
        &gy,
        BackwardOptions {
            param_grads: false,
            input_grad: true,
        },
    )
    .unwrap();
    assert!(lean.params.is_empty());
    assert_eq!(full.input.unwrap().data(), lean.input.unwrap().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn random_small_networks_pass_grad_check(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = rng.random_range(1..4usize);
        let hidden = rng.random_range(2..6usize);
        let classes = rng.random_range(2..4usize);
        let head_softmax = rng.random_bool(0.5);
        let mut spec = NetworkSpec::new(vec![1, 6, 6])
            .conv2d("c1", 1, ch, 3, 2, 1, true)
            .relu()
            .flatten()
            .dense("d1", ch * 9, hidden, true)
            .relu()
            .dense("d2", hidden, classes, true);
        spec = if head_softmax { spec.softmax() } else { spec.sigmoid() };
        let report = check_network(&spec, seed, 2);
        prop_assert!(report.max_rel_error <= 1e-3, "{:?}", report);
    }

    #[test]
    fn softmax_is_a_distribution(v in proptest::collection::vec(-30.0f32..30.0, 1..10)) {
        let n = v.len();
        let spec = NetworkSpec::new(vec![n]).softmax();
        let out = forward(&spec, &ParameterSet::<f32>::new(), &Tensor::new(vec![1, n], v).unwrap(), None).unwrap();
        let sum: f32 = out.output().data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);
        prop_assert!(out.output().data().iter().all(|&p| p > 0.0) || n == 1);
    }
}
