mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use styleflow::autodiff::Graph;
use styleflow::error::Error;
use styleflow::flow::{
    squeeze, unsqueeze, ActNorm, Coupling, FlowNetwork, InvConv, NetConfig,
};
use styleflow::params::Parameters;
use styleflow::san::StyleVector;
use styleflow::tensor::Tensor;

use common::{central_diff, passthrough_san, rel_err, randomize, sample_coords};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_config(style_dim: usize) -> NetConfig {
    NetConfig {
        blocks: 2,
        flows: 3,
        in_channels: 3,
        hidden: 16,
        style_dim,
        cga_hidden: 16,
        cga_mode: Default::default(),
    }
}

fn run<T: styleflow::scalar::Scalar>(
    f: impl for<'p> Fn(&Graph<'p, T>, &styleflow::autodiff::Var<T>) -> styleflow::error::Result<styleflow::autodiff::Var<T>>,
    x: &Tensor<T>,
) -> styleflow::error::Result<Tensor<T>> {
    let g = Graph::inference();
    Ok(f(&g, &g.constant(x.clone()))?.into_tensor())
}

// ---- squeeze ---------------------------------------------------------------

#[test]
fn squeeze_shapes() {
    let x = Tensor::<f32>::zeros(&[1, 3, 64, 64]);
    assert_eq!(squeeze(&x, 2).unwrap().shape(), &[1, 12, 32, 32]);
    let y = Tensor::<f32>::zeros(&[1, 12, 32, 32]);
    assert_eq!(unsqueeze(&y, 2).unwrap().shape(), &[1, 3, 64, 64]);
}

#[test]
fn factor_one_is_identity() {
    let x = Tensor::<f32>::randn(&[2, 3, 4, 6], 1.0, &mut rng(1));
    assert_eq!(squeeze(&x, 1).unwrap(), x);
    assert_eq!(unsqueeze(&x, 1).unwrap(), x);
}

#[test]
fn squeeze_layout_matches_index_enumeration() {
    // [[a, b], [c, d]] -> channels (a, b, c, d): the 2x2 patch is unrolled
    // row-major into the channel axis.
    let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = squeeze(&x, 2).unwrap();
    assert_eq!(y.shape(), &[1, 4, 1, 1]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);

    // Enumerate every source index of a larger tensor and check where it lands.
    let (b, c, h, w, f) = (2, 3, 4, 6, 2);
    let x = Tensor::<f64>::from_fn(&[b, c, h, w], |k| k as f64);
    let y = squeeze(&x, f).unwrap();
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let oc = ci * f * f + (i % f) * f + (j % f);
                    assert_eq!(y.at4(bi, oc, i / f, j / f), x.at4(bi, ci, i, j));
                }
            }
        }
    }
}

#[test]
fn squeeze_errors_name_the_axis() {
    let x = Tensor::<f32>::zeros(&[1, 3, 5, 4]);
    let err = squeeze(&x, 2).unwrap_err().to_string();
    assert!(err.contains("height"), "{err}");
    let x = Tensor::<f32>::zeros(&[1, 3, 4, 7]);
    let err = squeeze(&x, 2).unwrap_err().to_string();
    assert!(err.contains("width"), "{err}");
    let y = Tensor::<f32>::zeros(&[1, 6, 2, 2]);
    assert!(matches!(unsqueeze(&y, 2), Err(Error::Dimension(_))));
}

#[test]
fn unsqueeze_inverts_squeeze_bitwise() {
    let x = Tensor::<f32>::randn(&[2, 16, 4, 4], 1.0, &mut rng(2));
    let back = unsqueeze(&squeeze(&x, 2).unwrap(), 2).unwrap();
    assert_eq!(back, x);
}

proptest! {
    #[test]
    fn squeeze_is_a_permutation(seed in 0u64..1000, b in 1usize..3, c in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let x = Tensor::<f64>::randn(&[b, c, 2 * h, 2 * w], 1.0, &mut rng(seed));
        let y = squeeze(&x, 2).unwrap();
        let mut a = x.data().to_vec();
        let mut s = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        s.sort_by(f64::total_cmp);
        prop_assert_eq!(a, s);
        prop_assert_eq!(unsqueeze(&y, 2).unwrap(), x);
    }
}

// ---- actnorm ---------------------------------------------------------------

#[test]
fn actnorm_identity_and_hand_example() {
    let x = Tensor::<f32>::randn(&[1, 4, 3, 3], 1.0, &mut rng(3));
    let id = ActNorm::from_params(Tensor::ones(&[4]), Tensor::zeros(&[4])).unwrap();
    assert_eq!(run(|g, v| id.forward(g, v), &x).unwrap(), x);
    assert_eq!(run(|g, v| id.inverse(g, v), &x).unwrap(), x);

    let a = ActNorm::from_params(
        Tensor::<f32>::from_vec(&[1], vec![2.0]).unwrap(),
        Tensor::from_vec(&[1], vec![-1.0]).unwrap(),
    )
    .unwrap();
    let x = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0f32]).unwrap();
    let y = run(|g, v| a.forward(g, v), &x).unwrap();
    assert_eq!(y.data(), &[5.0]);
    assert_eq!(run(|g, v| a.inverse(g, v), &y).unwrap().data(), &[3.0]);
}

#[test]
fn actnorm_round_trip() {
    let mut r = rng(4);
    let x = Tensor::<f32>::randn(&[1, 8, 4, 4], 1.0, &mut r);
    let s = Tensor::from_fn(&[8], |i| if i % 2 == 0 { 0.5 + i as f32 * 0.3 } else { -0.7 - i as f32 * 0.1 });
    let b = Tensor::randn(&[8], 1.0, &mut r);
    let a = ActNorm::from_params(s, b).unwrap();
    let y = run(|g, v| a.forward(g, v), &x).unwrap();
    let back = run(|g, v| a.inverse(g, v), &y).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-5);
}

#[test]
fn actnorm_state_errors() {
    let a = ActNorm::<f32>::new(2);
    let x = Tensor::zeros(&[1, 2, 2, 2]);
    assert!(matches!(run(|g, v| a.forward(g, v), &x), Err(Error::State(_))));
    let bad = ActNorm {
        scale: Tensor::from_vec(&[2], vec![1.0f32, 1e-7]).unwrap(),
        bias: Tensor::zeros(&[2]),
        initialized: true,
    };
    assert!(matches!(
        run(|g, v| bad.inverse(g, v), &x),
        Err(Error::DegenerateScale { channel: 1, .. })
    ));
}

#[test]
fn actnorm_init_on_normalized_batch_is_identity() {
    // Each channel holds {-1, 1} equally often: mean 0, variance 1.
    let x = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |k| if k % 2 == 0 { 1.0 } else { -1.0 });
    let mut a = ActNorm::new(3);
    a.initialize(&x).unwrap();
    for c in 0..3 {
        assert!((a.scale.data()[c] - 1.0).abs() < 1e-5);
        assert!(a.bias.data()[c].abs() < 1e-5);
    }
}

#[test]
fn actnorm_init_constant_channel_falls_back() {
    let mut x = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng(5));
    for v in &mut x.data_mut()[16..] {
        *v = 2.5;
    }
    let mut a = ActNorm::new(2);
    a.initialize(&x).unwrap();
    assert_eq!(a.scale.data()[1], 1.0);
    assert!((a.bias.data()[1] + 2.5).abs() < 1e-12);
    assert!(a.initialized);
}

#[test]
fn actnorm_init_normalizes_random_batch() {
    let x = Tensor::<f32>::randn(&[3, 5, 6, 6], 3.0, &mut rng(6)).map(|v| v + 4.0);
    let mut a = ActNorm::new(5);
    a.initialize(&x).unwrap();
    let y = run(|g, v| a.forward(g, v), &x).unwrap();
    let (b, c, h, w) = y.dims4().unwrap();
    for ci in 0..c {
        let vals: Vec<f64> = (0..b)
            .flat_map(|bi| (0..h * w).map(move |p| (bi, p)))
            .map(|(bi, p)| y.data()[(bi * c + ci) * h * w + p] as f64)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!(mean.abs() < 1e-4, "mean {mean}");
        assert!((std - 1.0).abs() < 1e-3, "std {std}");
    }
}

// ---- 1x1 convolution -------------------------------------------------------

#[test]
fn invconv_identity_and_permutation() {
    let x = Tensor::<f32>::randn(&[2, 2, 3, 3], 1.0, &mut rng(7));
    let id = InvConv::from_weight(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    assert_eq!(run(|g, v| id.forward(g, v), &x).unwrap(), x);

    let swap = InvConv::from_weight(Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
    let y = run(|g, v| swap.forward(g, v), &x).unwrap();
    for b in 0..2 {
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(y.at4(b, 0, i, j), x.at4(b, 1, i, j));
                assert_eq!(y.at4(b, 1, i, j), x.at4(b, 0, i, j));
            }
        }
    }
}

#[test]
fn invconv_round_trip_against_explicit_inverse() {
    let mut r = rng(8);
    let conv = InvConv::<f32>::new(12, &mut r);
    let x = Tensor::<f32>::randn(&[2, 12, 5, 5], 1.0, &mut r);
    let y = run(|g, v| conv.forward(g, v), &x).unwrap();
    let back = run(|g, v| conv.inverse(g, v), &y).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-4);

    // Oracle: an orthogonal matrix is inverted by its transpose.
    let w = conv.weight.cast::<f64>();
    let y64 = y.cast::<f64>();
    let (b, c, h, wd) = y64.dims4().unwrap();
    let oracle = Tensor::<f64>::from_fn(&[b, c, h, wd], |k| {
        let p = k % (h * wd);
        let ci = (k / (h * wd)) % c;
        let bi = k / (h * wd * c);
        (0..c)
            .map(|r| w.data()[r * c + ci] * y64.data()[(bi * c + r) * h * wd + p])
            .sum()
    });
    assert!(back.cast::<f64>().max_abs_diff(&oracle) < 1e-4);
}

#[test]
fn singular_invconv_is_refused() {
    let w = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
    assert!(matches!(InvConv::from_weight(w.clone()), Err(Error::SingularMatrix { .. })));
    let conv = InvConv { weight: w };
    let y = Tensor::zeros(&[1, 2, 1, 1]);
    assert!(matches!(run(|g, v| conv.inverse(g, v), &y), Err(Error::SingularMatrix { .. })));
}

// ---- coupling --------------------------------------------------------------

#[test]
fn zero_coupling_is_identity() {
    let mut r = rng(9);
    let c = Coupling::<f32>::new(8, 16, &mut r).unwrap();
    let x = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut r);
    assert_eq!(run(|g, v| c.forward(g, v), &x).unwrap(), x);
    assert_eq!(run(|g, v| c.inverse(g, v), &x).unwrap(), x);
}

/// A one-channel coupling network computing `m(a) = a` for `a > 0`.
fn identity_m() -> Coupling<f64> {
    let mut c = Coupling::<f64>::new(2, 1, &mut rng(0)).unwrap();
    let center = |t: &mut Tensor<f64>| {
        let k = t.shape()[2];
        for v in t.data_mut() {
            *v = 0.0;
        }
        t.data_mut()[(k / 2) * k + k / 2] = 1.0;
    };
    center(&mut c.conv1.weight);
    center(&mut c.conv2.weight);
    center(&mut c.conv3.weight);
    c
}

#[test]
fn coupling_hand_example() {
    let c = identity_m();
    let x = Tensor::from_vec(&[1, 2, 1, 1], vec![0.75, 2.0]).unwrap();
    let y = run(|g, v| c.forward(g, v), &x).unwrap();
    assert_eq!(y.data(), &[0.75, 1.25]);
    assert_eq!(run(|g, v| c.inverse(g, v), &y).unwrap().data(), &[0.75, 2.0]);
}

#[test]
fn coupling_round_trip_and_fixed_partition() {
    let mut r = rng(10);
    let mut c = Coupling::<f32>::new(8, 32, &mut r).unwrap();
    randomize(&mut c, &mut r, 0.2);
    let x = Tensor::randn(&[2, 8, 5, 5], 1.0, &mut r);
    let y = run(|g, v| c.forward(g, v), &x).unwrap();
    // first partition passes through bitwise
    assert_eq!(&y.data()[..4 * 25], &x.data()[..4 * 25]);
    assert_ne!(&y.data()[4 * 25..8 * 25], &x.data()[4 * 25..8 * 25]);
    let back = run(|g, v| c.inverse(g, v), &y).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-5);
}

#[test]
fn odd_channel_coupling_is_rejected() {
    assert!(matches!(Coupling::<f32>::new(3, 4, &mut rng(0)), Err(Error::Dimension(_))));
    let c = Coupling::<f32>::new(4, 4, &mut rng(0)).unwrap();
    let x = Tensor::zeros(&[1, 3, 2, 2]);
    assert!(matches!(run(|g, v| c.forward(g, v), &x), Err(Error::Dimension(_))));
}

#[test]
fn coupling_parameter_gradients_match_finite_differences() {
    let mut r = rng(11);
    let mut c = Coupling::<f32>::new(4, 8, &mut r).unwrap();
    randomize(&mut c, &mut r, 0.3);
    let x = Tensor::<f32>::randn(&[1, 4, 4, 4], 1.0, &mut r);
    let probe = Tensor::<f32>::randn(&[1, 4, 4, 4], 1.0, &mut r);
    let objective = |c: &Coupling<f32>| -> f64 {
        let y = run(|g, v| c.forward(g, v), &x).unwrap();
        y.data().iter().zip(probe.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    };
    let g = Graph::new();
    let y = c.forward(&g, &g.constant(x.clone())).unwrap();
    let loss = g.sum(&g.mul(&y, &g.constant(probe.clone())));
    let grads = g.backward(&loss);
    let names: Vec<String> = c.named_params().into_iter().map(|(n, _)| n).collect();
    for name in names {
        let param = c.named_params().into_iter().find(|(n, _)| *n == name).unwrap().1.clone();
        let analytic = grads.wrt_or_zeros(&g.param_var(
            c.named_params().into_iter().find(|(n, _)| *n == name).unwrap().1,
        ).unwrap());
        let coords = sample_coords(param.len(), 24, &mut r);
        let numeric = central_diff(&param, &coords, 1e-3, |p| {
            let mut c2 = c.clone();
            c2.visit_params_mut("", &mut |n, t| {
                if n == name {
                    *t = p.clone();
                }
            });
            objective(&c2)
        });
        let a: Vec<f64> = coords.iter().map(|&i| analytic.data()[i] as f64).collect();
        let e = rel_err(&a, &numeric);
        assert!(e < 1e-2, "{name}: relative error {e}");
    }
}

// ---- network ---------------------------------------------------------------

#[test]
fn block_output_shapes() {
    let net = FlowNetwork::<f32>::identity(small_config(8), &mut rng(12)).unwrap();
    let x = Tensor::<f32>::randn(&[1, 3, 64, 64], 1.0, &mut rng(13));
    let outs = net.encode(&x).unwrap();
    assert_eq!(outs[0].shape(), &[1, 12, 32, 32]);
    assert_eq!(outs[1].shape(), &[1, 48, 16, 16]);
}

#[test]
fn identity_network_is_a_pure_squeeze() {
    let net = FlowNetwork::<f32>::identity(small_config(8), &mut rng(14)).unwrap();
    let x = Tensor::<f32>::randn(&[2, 3, 16, 16], 1.0, &mut rng(15));
    let outs = net.encode(&x).unwrap();
    let expect = squeeze(&squeeze(&x, 2).unwrap(), 2).unwrap();
    assert_eq!(outs[1], expect);
    assert_eq!(net.decode(&outs[1], None).unwrap(), x);
}

#[test]
fn indivisible_image_is_rejected() {
    let net = FlowNetwork::<f32>::identity(small_config(8), &mut rng(16)).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 3, 30, 32]);
    let err = net.encode(&x).unwrap_err().to_string();
    assert!(err.contains("divisible by 2^M = 4"), "{err}");
    let bad = Tensor::<f32>::zeros(&[1, 12, 8, 8]);
    assert!(matches!(net.decode(&bad, None), Err(Error::Dimension(_))));
}

#[test]
fn uninitialized_network_refuses_to_run() {
    let net = FlowNetwork::<f32>::new(small_config(8), &mut rng(17)).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
    assert!(matches!(net.encode(&x), Err(Error::State(_))));
}

fn random_net<T: styleflow::scalar::Scalar>(seed: u64) -> (FlowNetwork<T>, Tensor<T>) {
    let mut r = rng(seed);
    let mut net = FlowNetwork::<T>::new(small_config(8), &mut r).unwrap();
    let x = Tensor::<T>::randn(&[2, 3, 16, 16], 1.0, &mut r);
    net.initialize(&x).unwrap();
    randomize(&mut net, &mut r, 0.05);
    (net, x)
}

#[test]
fn random_network_round_trip() {
    let (net, x) = random_net::<f32>(18);
    let z = net.encode(&x).unwrap().pop().unwrap();
    let back = net.decode(&z, None).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-3, "{}", back.max_abs_diff(&x));

    let (net, x) = random_net::<f64>(18);
    let z = net.encode(&x).unwrap().pop().unwrap();
    let back = net.decode(&z, None).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-8, "{}", back.max_abs_diff(&x));
}

#[test]
fn san_with_matching_statistics_reduces_to_plain_inverse() {
    let mut r = rng(19);
    let cfg = NetConfig { cga_hidden: 3 * 48, ..small_config(8) };
    let mut net = FlowNetwork::<f64>::new(cfg, &mut r).unwrap();
    let x = Tensor::<f64>::randn(&[1, 3, 16, 16], 1.0, &mut r);
    net.initialize(&x).unwrap();
    randomize(&mut net, &mut r, 0.05);
    // Large output scales keep every block's per-channel deviation far
    // above the softplus knee, where the pass-through CGA is exact.
    for block in &mut net.blocks {
        let last = block.flows.last_mut().unwrap();
        last.actnorm.scale = last.actnorm.scale.map(|_| 50.0);
        passthrough_san(&mut block.san);
    }
    let feats = net.encode(&x).unwrap();
    for f in &feats {
        let g = Graph::inference();
        let (_, sigma) = g.channel_stats(&g.constant(f.clone()));
        assert!(sigma.value().data().iter().all(|&s| s > 15.0));
    }
    let style = StyleVector::new(Tensor::<f64>::randn(&[1, 8], 1.0, &mut r)).unwrap();
    let z = feats.last().unwrap();
    let plain = net.decode(z, None).unwrap();
    let styled = net.decode(z, Some(&style)).unwrap();
    assert!(styled.max_abs_diff(&plain) < 1e-3, "{}", styled.max_abs_diff(&plain));
    assert!(plain.max_abs_diff(&x) < 1e-8);
}
