//! Whole-network structural properties.

use promptcir::network::{NetworkConfig, PromptCir};
use promptcir::nn::ParamBuilder;
use promptcir::nn::Conv2d;
use promptcir::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    Tensor::rand_uniform(&[1, 3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn output_shape_follows_input_for_random_sizes() {
    let (net, p) = PromptCir::build::<f32>(&NetworkConfig::micro(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..20 {
        let (h, w) = (rng.random_range(16..=44), rng.random_range(16..=44));
        let y = net.forward(&p, &image(h, w, i)).unwrap();
        assert_eq!(y.shape(), &[1, 3, h, w], "{h}x{w}");
    }
    assert!(net.forward(&p, &image(15, 20, 0)).is_err());
}

#[test]
fn output_is_input_plus_head_branch() {
    let (net, p) = PromptCir::build::<f64>(&NetworkConfig::micro(), 2).unwrap();
    let x = image(20, 18, 3).cast::<f64>();
    let (restored, branch) = net.forward_parts(&p, &x).unwrap();
    let sum = x.add(&branch).unwrap();
    assert_eq!(restored.data(), sum.data());
    assert!(branch.data().iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn zeroed_head_returns_input_exactly() {
    let (net, mut p) = PromptCir::build::<f32>(&NetworkConfig::toy(), 4).unwrap();
    assert!(p.zero_where(|n| n.starts_with("output.")) >= 1);
    let x = image(24, 40, 5);
    assert_eq!(net.forward(&p, &x).unwrap().data(), x.data());
}

#[test]
fn zeroed_terminal_weights_give_identity_at_every_level() {
    let (net, mut p) = PromptCir::build::<f64>(&NetworkConfig::micro(), 6).unwrap();
    for id in net.terminal_weights() {
        let n = p.get(id).numel();
        p.set(id, vec![0.0; n]).unwrap();
    }
    let x = image(16, 32, 7).cast::<f64>();
    let bias = p.get(net.output.bias.unwrap()).to_vec();
    let y = net.forward(&p, &x).unwrap();
    let plane = 16 * 32;
    for (i, (a, b)) in y.data().iter().zip(x.data()).enumerate() {
        assert_eq!(*a, b + bias[i / plane]);
    }
    p.set(net.output.bias.unwrap(), vec![0.0; 3]).unwrap();
    assert_eq!(net.forward(&p, &x).unwrap().data(), x.data());
}

#[test]
fn same_seed_same_parameters() {
    let (_, a) = PromptCir::build::<f32>(&NetworkConfig::micro(), 9).unwrap();
    let (_, b) = PromptCir::build::<f32>(&NetworkConfig::micro(), 9).unwrap();
    let (_, c) = PromptCir::build::<f32>(&NetworkConfig::micro(), 10).unwrap();
    assert_eq!(a.names(), b.names());
    assert!(a.tensors().iter().zip(b.tensors()).all(|(x, y)| x.data() == y.data()));
    assert!(a.tensors().iter().zip(c.tensors()).any(|(x, y)| x.data() != y.data()));
}

#[test]
fn dynamic_prompt_toggle_changes_only_generator_parameters() {
    for base in [NetworkConfig::toy(), NetworkConfig::micro()] {
        let with = NetworkConfig { use_dpm: true, ..base.clone() };
        let without = NetworkConfig { use_dpm: false, ..base };
        let (nw, pw) = PromptCir::build::<f32>(&with, 0).unwrap();
        let (no, po) = PromptCir::build::<f32>(&without, 0).unwrap();
        let delta = pw.count() as i64 - po.count() as i64;
        let gen_delta = nw.prompt_generator_params(&pw) as i64 - no.prompt_generator_params(&po) as i64;
        assert_eq!(delta, gen_delta);
        assert_ne!(delta, 0);
    }
}

#[test]
fn doubling_width_roughly_quadruples_parameters() {
    let narrow = NetworkConfig::toy();
    let wide = NetworkConfig { base_channels: 2 * narrow.base_channels, ..narrow.clone() };
    let (_, a) = PromptCir::build::<f32>(&narrow, 0).unwrap();
    let (_, b) = PromptCir::build::<f32>(&wide, 0).unwrap();
    let ratio = b.count() as f64 / a.count() as f64;
    assert!((3.5..=4.5).contains(&ratio), "{ratio}");
}

#[test]
fn pointwise_conv_parameter_count() {
    let mut b = ParamBuilder::<f32>::new(0);
    Conv2d::same(&mut b, "c", 3, 8, 1, true);
    assert_eq!(b.finish().count(), 32);
}

#[test]
fn invalid_configs_rejected() {
    let bad_heads = NetworkConfig { heads: [3, 2, 4, 8], ..NetworkConfig::toy() };
    assert!(PromptCir::build::<f32>(&bad_heads, 0).is_err());
    let bad_mult = NetworkConfig { multipliers: [1, 3, 4, 8], ..NetworkConfig::toy() };
    assert!(PromptCir::build::<f32>(&bad_mult, 0).is_err());
    let json = serde_json::to_string(&NetworkConfig::toy()).unwrap();
    let back: NetworkConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, NetworkConfig::toy());
    assert!(serde_json::from_str::<NetworkConfig>(&json.replace("\"window\"", "\"windw\"")).is_err());
}
