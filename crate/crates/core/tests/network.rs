//! Network forward/training contracts: an independent plain-loop CNN
//! forward oracle, the momentum recursion in closed form, clipping,
//! freezing, and bit-exact checkpoint round-trips.

use exdistill_core::net::{
    self, copy_and_freeze_last_layer, Layer, LayerSpec, Network, ParamRef, ParamSlot, SgdMomentum,
};
use exdistill_core::seeds;
use exdistill_core::tensor::{Real, Tensor};
use exdistill_core::Error;
use rand::Rng;

fn dense(w: Vec<Vec<Real>>, b: Vec<Real>) -> Layer {
    let o = w.len();
    let i = w[0].len();
    Layer::Dense {
        w: Tensor::new(vec![o, i], w.into_iter().flatten().collect()).unwrap(),
        b: Tensor::new(vec![o], b).unwrap(),
        frozen: false,
    }
}

#[test]
fn identity_dense_forward() {
    let net = Network::new(
        vec![dense(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0])],
        vec![2],
        2,
    )
    .unwrap();
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    assert_eq!(net.forward_eval(&x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn single_dense_dot_product() {
    let net = Network::new(vec![dense(vec![vec![1.0, 1.0]], vec![0.0])], vec![2], 1).unwrap();
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    assert_eq!(net.forward_eval(&x).unwrap().data(), &[3.0]);
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let net = Network::new(vec![dense(vec![vec![1.0, 1.0]], vec![0.0])], vec![2], 1).unwrap();
    let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    assert!(matches!(net.forward_eval(&x), Err(Error::Dimension(_))));
}

/// Naive whole-network forward for conv/relu/flatten/dense stacks,
/// written with plain nested loops and explicit padding.
fn naive_forward(net: &Network, x: &Tensor) -> Vec<Real> {
    let mut cur = x.data().to_vec();
    let mut shape = x.shape().to_vec();
    for layer in &net.layers {
        match layer {
            Layer::Conv2d { w, b, stride, padding, .. } => {
                let (cin, h, wd) = (shape[0], shape[1], shape[2]);
                let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let ph = h + 2 * padding;
                let pw = wd + 2 * padding;
                let mut padded = vec![0.0; cin * ph * pw];
                for c in 0..cin {
                    for yy in 0..h {
                        for xx in 0..wd {
                            padded[(c * ph + yy + padding) * pw + xx + padding] =
                                cur[(c * h + yy) * wd + xx];
                        }
                    }
                }
                let ho = (ph - kh) / stride + 1;
                let wo = (pw - kw) / stride + 1;
                let mut out = vec![0.0; cout * ho * wo];
                for co in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = b.data()[co];
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        acc += padded
                                            [(ci * ph + oy * stride + ky) * pw + ox * stride + kx]
                                            * w.at(&[co, ci, ky, kx]);
                                    }
                                }
                            }
                            out[(co * ho + oy) * wo + ox] = acc;
                        }
                    }
                }
                cur = out;
                shape = vec![cout, ho, wo];
            }
            Layer::Relu => {
                cur = cur.iter().map(|&v| v.max(0.0)).collect();
            }
            Layer::Flatten => {
                shape = vec![cur.len()];
            }
            Layer::Dense { w, b, .. } => {
                let (o, i) = (w.shape()[0], w.shape()[1]);
                let mut out = vec![0.0; o];
                for oi in 0..o {
                    let mut acc = b.data()[oi];
                    for ii in 0..i {
                        acc += w.data()[oi * i + ii] * cur[ii];
                    }
                    out[oi] = acc;
                }
                cur = out;
                shape = vec![o];
            }
            _ => panic!("oracle covers conv/relu/flatten/dense"),
        }
    }
    cur
}

#[test]
fn two_conv_cnn_matches_naive_forward_oracle() {
    let specs = vec![
        LayerSpec::Conv2d { out_channels: 4, kernel: 3, stride: 2, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv2d { out_channels: 6, kernel: 3, stride: 2, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { out_features: 5 },
    ];
    let net = net::build_network(&[3, 9, 9], 5, &specs, 77).unwrap();
    let mut rng = seeds::rng(78, "cnn-x", 0);
    for _ in 0..3 {
        let x = Tensor::from_fn(&[3, 9, 9], |_| rng.gen_range(-1.0..1.0));
        let got = net.forward_eval(&x).unwrap();
        let want = naive_forward(&net, &x);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "logit mismatch: {g} vs {w}");
        }
    }
}

fn one_dense_net() -> Network {
    Network::new(vec![dense(vec![vec![1.0, 1.0]], vec![0.0])], vec![2], 1).unwrap()
}

#[test]
fn clipping_rescales_to_the_bound() {
    // gradient of norm 2 with clip 1 must be halved
    let mut net = one_dense_net();
    let mut opt = SgdMomentum::new(&net, 1.0, 0.0, 1.0);
    let grads = vec![
        Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap(),
        Tensor::zeros(&[1]),
    ];
    opt.step(&mut net, &grads).unwrap();
    let w = net.param(ParamRef { layer: 0, slot: ParamSlot::Weight });
    assert_eq!(w.data(), &[0.0, 1.0]); // 1 − 1·(2·0.5)
}

#[test]
fn plain_gradient_step_without_momentum() {
    // μ=0, lr=1, θ=1, g=0.25 → θ' = 0.75
    let mut net = one_dense_net();
    let mut opt = SgdMomentum::new(&net, 1.0, 0.0, 10.0);
    let grads = vec![
        Tensor::new(vec![1, 2], vec![0.25, 0.0]).unwrap(),
        Tensor::zeros(&[1]),
    ];
    opt.step(&mut net, &grads).unwrap();
    let w = net.param(ParamRef { layer: 0, slot: ParamSlot::Weight });
    assert_eq!(w.data(), &[0.75, 1.0]);
}

#[test]
fn momentum_matches_hand_unrolled_recursion() {
    // constant gradient g, μ=0.9: v₁=g, v₂=1.9g, v₃=2.71g
    let mut net = one_dense_net();
    let lr = 0.1;
    let g = 0.01;
    let mut opt = SgdMomentum::new(&net, lr, 0.9, 100.0);
    let grads = vec![
        Tensor::new(vec![1, 2], vec![g, 0.0]).unwrap(),
        Tensor::zeros(&[1]),
    ];
    for _ in 0..3 {
        opt.step(&mut net, &grads).unwrap();
    }
    let want = 1.0 - lr * g * (1.0 + 1.9 + 2.71);
    let w = net.param(ParamRef { layer: 0, slot: ParamSlot::Weight });
    assert!((w.data()[0] - want).abs() < 1e-12);
}

#[test]
fn non_finite_gradient_skips_the_step() {
    let mut net = one_dense_net();
    let mut opt = SgdMomentum::new(&net, 1.0, 0.9, 1.0);
    let mut bad = Tensor::zeros(&[1, 2]);
    bad.data_mut()[0] = Real::NAN;
    let grads = vec![bad, Tensor::zeros(&[1])];
    assert!(matches!(
        opt.step(&mut net, &grads),
        Err(Error::NumericFault(_))
    ));
    let w = net.param(ParamRef { layer: 0, slot: ParamSlot::Weight });
    assert_eq!(w.data(), &[1.0, 1.0]); // untouched
}

#[test]
fn frozen_layers_never_change() {
    let specs = vec![
        LayerSpec::Dense { out_features: 4 },
        LayerSpec::Relu,
        LayerSpec::Dense { out_features: 2 },
    ];
    let mut net = net::build_network(&[3], 2, &specs, 5).unwrap();
    net.layers[2].set_frozen(true);
    let frozen_before = net
        .param(ParamRef { layer: 2, slot: ParamSlot::Weight })
        .clone();
    let mut opt = SgdMomentum::new(&net, 0.5, 0.9, 10.0);
    let grads: Vec<Tensor> = net
        .param_refs()
        .iter()
        .map(|&r| Tensor::full(net.param(r).shape(), 0.3))
        .collect();
    let mut change = 0.0;
    for _ in 0..5 {
        opt.step(&mut net, &grads).unwrap();
    }
    let frozen_after = net.param(ParamRef { layer: 2, slot: ParamSlot::Weight });
    for (a, b) in frozen_before.data().iter().zip(frozen_after.data()) {
        change += (a - b).abs();
    }
    assert_eq!(change, 0.0);
    // unfrozen layers did move
    assert_ne!(
        net.param(ParamRef { layer: 0, slot: ParamSlot::Weight }).data()[0],
        net::build_network(&[3], 2, &specs, 5)
            .unwrap()
            .param(ParamRef { layer: 0, slot: ParamSlot::Weight })
            .data()[0]
    );
}

#[test]
fn copy_and_freeze_rejects_shape_mismatch() {
    let teacher = Network::new(
        vec![dense(vec![vec![1.0, 1.0], vec![0.0, 1.0]], vec![0.0, 0.0])],
        vec![2],
        2,
    )
    .unwrap();
    let mut student = Network::new(
        vec![dense(vec![vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]], vec![0.0, 0.0])],
        vec![3],
        2,
    )
    .unwrap();
    assert!(matches!(
        copy_and_freeze_last_layer(&teacher, &mut student),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let specs = vec![
        LayerSpec::Conv2d { out_channels: 3, kernel: 3, stride: 2, padding: 1 },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::AvgPool2d { kernel: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { out_features: 4 },
    ];
    let mut net = net::build_network(&[2, 8, 8], 4, &specs, 123).unwrap();
    net.layers[5].set_frozen(true);

    let tmp = tempfile::tempdir().unwrap();
    let dir1 = tmp.path().join("a");
    let dir2 = tmp.path().join("b");
    net::save_checkpoint(&net, &dir1).unwrap();
    let loaded = net::load_checkpoint(&dir1).unwrap();
    net::save_checkpoint(&loaded, &dir2).unwrap();

    // identical file bytes after a save/load/save cycle
    let mut names: Vec<String> = std::fs::read_dir(&dir1)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.contains(&"manifest.json".to_string()));
    for name in names {
        let a = std::fs::read(dir1.join(&name)).unwrap();
        let b = std::fs::read(dir2.join(&name)).unwrap();
        assert_eq!(a, b, "file {name} differs after round-trip");
    }

    // structure and flags survive
    assert!(loaded.layers[5].is_frozen());
    assert!(!loaded.layers[0].is_frozen());
    assert_eq!(loaded.input_shape, vec![2, 8, 8]);
    assert_eq!(loaded.class_count, 4);

    // the reloaded network computes the same function
    let x = Tensor::from_fn(&[2, 8, 8], |i| ((i % 7) as Real) / 7.0);
    let y1 = loaded.forward_eval(&x).unwrap();
    let reload = net::load_checkpoint(&dir2).unwrap();
    let y2 = reload.forward_eval(&x).unwrap();
    assert_eq!(y1, y2);
}

#[test]
fn batch_norm_running_stats_update_only_in_train_mode() {
    use exdistill_core::graph::Graph;
    use exdistill_core::net::Mode;
    let specs = vec![
        LayerSpec::Conv2d { out_channels: 2, kernel: 1, stride: 1, padding: 0 },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { out_features: 2 },
    ];
    let mut net = net::build_network(&[1, 2, 2], 2, &specs, 9).unwrap();
    let x = Tensor::from_fn(&[1, 2, 2], |i| i as Real);

    let mut g = Graph::new();
    let xid = g.leaf(x.clone(), false);
    let (_, eval_trace) = net.forward_graph(&mut g, xid, Mode::Eval, false).unwrap();
    assert!(eval_trace.bn_inputs.is_empty());

    let (_, train_trace) = net.forward_graph(&mut g, xid, Mode::Train, false).unwrap();
    assert_eq!(train_trace.bn_inputs.len(), 1);
    let (layer, node) = train_trace.bn_inputs[0];

    let before = match &net.layers[layer] {
        Layer::BatchNorm { running_mean, .. } => running_mean.clone(),
        _ => unreachable!(),
    };
    let inputs = vec![g.value(node).clone()];
    exdistill_core::harness::update_bn_from_batch(&mut net, layer, &inputs).unwrap();
    let after = match &net.layers[layer] {
        Layer::BatchNorm { running_mean, .. } => running_mean.clone(),
        _ => unreachable!(),
    };
    assert_ne!(before, after);
}
