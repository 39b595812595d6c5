use diffnet_core::autodiff::Mode;
use diffnet_core::loss::{hybrid_loss, LossConfig};
use diffnet_core::model::{ModelConfig, ParamVars, SiameseUNet, LEVELS};
use diffnet_core::{Graph, Tensor, Xoshiro256};
use rand::Rng;

fn random(shape: Vec<usize>, seed: u64) -> Tensor<f32> {
    let mut rng = Xoshiro256::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn config(c: usize, b: usize) -> ModelConfig {
    ModelConfig {
        in_channels: c,
        base_width: b,
    }
}

fn diff_values(m: &SiameseUNet, pre: &Tensor<f32>, post: &Tensor<f32>) -> Vec<Vec<f32>> {
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let (a, b) = (g.constant(pre), g.constant(post));
    let pass = m.forward(&mut g, &p, a, b, Mode::Eval).unwrap();
    pass.diffs
        .levels
        .iter()
        .map(|&v| g.value(v).to_vec())
        .collect()
}

#[test]
fn identical_inputs_give_exactly_zero_differences() {
    let m = SiameseUNet::init(config(4, 4), 11).unwrap();
    let x = random(vec![2, 4, 64, 64], 1);
    let diffs = diff_values(&m, &x, &x);
    assert_eq!(diffs.len(), LEVELS);
    for d in diffs {
        assert!(d.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn swapping_dates_negates_differences() {
    let m = SiameseUNet::init(config(4, 4), 12).unwrap();
    let a = random(vec![1, 4, 64, 64], 2);
    let b = random(vec![1, 4, 64, 64], 3);
    let fwd = diff_values(&m, &a, &b);
    let rev = diff_values(&m, &b, &a);
    for (x, y) in fwd.iter().zip(&rev) {
        assert!(x.iter().zip(y).all(|(p, q)| *p == -*q));
        assert!(x.iter().any(|&v| v != 0.0));
    }
}

#[test]
fn encode_is_deterministic() {
    let m = SiameseUNet::init(config(4, 4), 5).unwrap();
    let x = random(vec![1, 4, 32, 32], 4);
    let run = || {
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let v = g.constant(&x);
        let pyr = m
            .encode(&mut g, &p, v, Mode::Eval, &mut Vec::new())
            .unwrap();
        pyr.levels
            .iter()
            .map(|&l| g.value(l).to_vec())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn full_size_output_shape_and_range() {
    let m = SiameseUNet::init(ModelConfig::default(), 0).unwrap();
    let pre = random(vec![1, 64, 128, 128], 1);
    let post = random(vec![1, 64, 128, 128], 2);
    let probs = m.predict_proba(&pre, &post).unwrap();
    assert_eq!(probs.shape(), &[1, 1, 128, 128]);
    assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn outputs_stay_open_interval_for_large_inputs() {
    let m = SiameseUNet::init(config(2, 4), 3).unwrap();
    let pre = random(vec![1, 2, 32, 32], 1).map(|v| v * 1e4);
    let post = random(vec![1, 2, 32, 32], 2).map(|v| v * -1e4);
    let probs = m.predict_proba(&pre, &post).unwrap();
    assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn identical_inputs_give_constant_interior() {
    let m = SiameseUNet::init(config(4, 8), 8).unwrap();
    let x = random(vec![1, 4, 96, 96], 9);
    let probs = m.predict_proba(&x, &x).unwrap();
    let (h, w) = (96, 96);
    let centre = probs.data()[(h / 2) * w + w / 2];
    for y in 16..h - 16 {
        for xx in 16..w - 16 {
            assert_eq!(probs.data()[y * w + xx], centre);
        }
    }
}

fn encoder_grads(g: &Graph<f64>, p: &ParamVars) -> Vec<Vec<f64>> {
    p.vars()[ParamVars::encoder_range()]
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect()
}

fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn shared_encoder_gradient_is_sum_of_branch_gradients() {
    let m = SiameseUNet::init(config(3, 4), 21).unwrap().cast::<f64>();
    let pre = random(vec![2, 3, 32, 32], 1).cast::<f64>();
    let post = random(vec![2, 3, 32, 32], 2).cast::<f64>();
    let mask: Vec<u8> = (0..2 * 32 * 32)
        .map(|i| u8::from((i / 7) % 5 == 0))
        .collect();
    let cfg = LossConfig::default();

    let run = |pre_trainable: bool, post_trainable: bool, joint: bool| {
        let mut g = Graph::new();
        let pp = m.bind(&mut g, pre_trainable);
        let qp = if joint {
            pp.clone()
        } else {
            m.bind(&mut g, post_trainable)
        };
        let (a, b) = (g.constant(&pre), g.constant(&post));
        let pass = m
            .forward_branches(&mut g, &pp, &qp, a, b, Mode::Train)
            .unwrap();
        let loss = hybrid_loss(&mut g, pass.probs, &mask, &cfg).unwrap();
        g.backward(loss.total).unwrap();
        (encoder_grads(&g, &pp), encoder_grads(&g, &qp))
    };

    let (joint, _) = run(true, true, true);
    let (from_pre, _) = run(true, false, false);
    let (_, from_post) = run(false, true, false);
    for ((j, a), b) in joint.iter().zip(&from_pre).zip(&from_post) {
        let sum: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
        assert!(rel_inf(j, &sum) < 1e-6, "rel err {}", rel_inf(j, &sum));
    }
}

#[test]
fn every_encoder_parameter_receives_gradient() {
    let mut m = SiameseUNet::init(config(3, 4), 2).unwrap();
    let pre = random(vec![2, 3, 32, 32], 5);
    let post = random(vec![2, 3, 32, 32], 6);
    let mask: Vec<u8> = (0..2 * 32 * 32).map(|i| u8::from(i % 32 < 12)).collect();
    let mut g = Graph::new();
    let p = m.bind(&mut g, true);
    let (a, b) = (g.constant(&pre), g.constant(&post));
    let pass = m.forward(&mut g, &p, a, b, Mode::Train).unwrap();
    let loss = hybrid_loss(&mut g, pass.probs, &mask, &LossConfig::default()).unwrap();
    g.backward(loss.total).unwrap();
    m.store_grads(&g, &p);
    for (name, t) in m
        .parameter_list()
        .into_iter()
        .take(ParamVars::encoder_range().end)
    {
        let norm: f32 = t.grad.as_ref().unwrap().iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn eval_output_is_independent_of_branch_norm_policy() {
    use diffnet_core::model::BranchNorm;
    let m = SiameseUNet::init(config(3, 4), 4).unwrap();
    let pre = random(vec![2, 3, 32, 32], 7);
    let post = random(vec![2, 3, 32, 32], 8);
    let run = |norm| {
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let (a, b) = (g.constant(&pre), g.constant(&post));
        let pass = m.forward_with(&mut g, &p, a, b, Mode::Eval, norm).unwrap();
        let bits: Vec<u32> = g.value(pass.probs).iter().map(|v| v.to_bits()).collect();
        bits
    };
    assert_eq!(run(BranchNorm::Joint), run(BranchNorm::Separate));
}

#[test]
fn eval_gradient_of_shared_encoder_is_sum_over_independent_branch_graphs() {
    let m = SiameseUNet::init(config(3, 4), 22).unwrap().cast::<f64>();
    let pre = random(vec![1, 3, 32, 32], 3).cast::<f64>();
    let post = random(vec![1, 3, 32, 32], 4).cast::<f64>();
    let mask: Vec<u8> = (0..32 * 32).map(|i| u8::from(i % 9 < 3)).collect();
    let cfg = LossConfig::default();
    let run = |pre_trainable: bool, post_trainable: bool, joint: bool| {
        let mut g = Graph::new();
        let pp = m.bind(&mut g, pre_trainable);
        let qp = m.bind(&mut g, post_trainable);
        let (a, b) = (g.constant(&pre), g.constant(&post));
        let pass = if joint {
            m.forward(&mut g, &pp, a, b, Mode::Eval).unwrap()
        } else {
            m.forward_branches(&mut g, &pp, &qp, a, b, Mode::Eval)
                .unwrap()
        };
        let loss = hybrid_loss(&mut g, pass.probs, &mask, &cfg).unwrap();
        g.backward(loss.total).unwrap();
        (encoder_grads(&g, &pp), encoder_grads(&g, &qp))
    };
    let (joint, _) = run(true, false, true);
    let (from_pre, _) = run(true, false, false);
    let (_, from_post) = run(false, true, false);
    for ((j, a), b) in joint.iter().zip(&from_pre).zip(&from_post) {
        let sum: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
        assert!(rel_inf(j, &sum) < 1e-6, "rel err {}", rel_inf(j, &sum));
    }
}
