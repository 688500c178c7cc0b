mod common;

use cbhvt::exploitation::{align_and_concat, Exploiter};
use cbhvt::generators::{
    build_generator, AttentionRefine, FeatureMap, FeaturePyramid, GeneratorConfig, GeneratorKind, Grid, ResidualBlock,
    SpatialReductionAttention,
};
use cbhvt::merging::{FusionBlock, FusionSpec, Fpn, TerminalPooling};
use cbhvt::Ctx;
use cbhvt_tensor::{Array, Builder, ParamStore, Tensor};
use common::*;
use rand::Rng;

/// Overwrites every parameter and buffer with random values; variances stay
/// positive.
fn randomize(store: &ParamStore, seed: u64) {
    let mut r = rng(seed);
    for p in store.params() {
        let positive = p.name().ends_with("running_var");
        p.update(|a| {
            for v in a.data_mut() {
                *v = if positive { r.random_range(0.5..1.5) } else { r.random_range(-0.5..0.5) };
            }
        });
    }
}

fn value(store: &ParamStore, name: &str) -> Array {
    store.get(name).unwrap_or_else(|| panic!("no parameter {name}")).value().clone()
}

fn bn(store: &ParamStore, prefix: &str, x: &Array) -> Array {
    batch_norm_fixed(
        x,
        &value(store, &format!("{prefix}.gamma")),
        &value(store, &format!("{prefix}.beta")),
        &value(store, &format!("{prefix}.running_mean")),
        &value(store, &format!("{prefix}.running_var")),
        1e-5,
    )
}

#[test]
fn residual_block_matches_composed_oracle() {
    let store = ParamStore::new();
    let block = ResidualBlock::new(&Builder::new(&store, 1).sub("rb"), 3, 5, 2).unwrap();
    randomize(&store, 2);
    let x = random_array(&mut rng(3), &[3, 9, 9], 1.0);
    let got = block.forward(&Tensor::constant(x.clone()), &Ctx::eval()).unwrap();

    let mut f = bn(&store, "rb.bn1", &conv2d(&x, &value(&store, "rb.conv1.weight"), None, 2, 1));
    relu(f.data_mut());
    let f = bn(&store, "rb.bn2", &conv2d(&f, &value(&store, "rb.conv2.weight"), None, 1, 1));
    let skip = bn(&store, "rb.proj_bn", &conv2d(&x, &value(&store, "rb.proj.weight"), None, 2, 0));
    let mut want: Vec<f64> = skip.data().iter().zip(f.data()).map(|(a, b)| a + b).collect();
    relu(&mut want);
    assert_eq!(got.shape(), [5, 5, 5]);
    assert!(max_diff(&got.to_vec(), &want) < 1e-6);
}

#[test]
fn zeroed_residual_branch_is_identity_on_nonnegative_input() {
    let store = ParamStore::new();
    let block = ResidualBlock::with_norm(&Builder::new(&store, 1), 4, 4, 1, false).unwrap();
    for p in store.params() {
        p.update(|a| a.data_mut().fill(0.0));
    }
    let x = Array::from_fn([4, 6, 6], |i| (i % 7) as f64 * 0.3);
    let y = block.forward(&Tensor::constant(x.clone()), &Ctx::eval()).unwrap();
    assert_eq!(y.to_vec(), x.data());
}

#[test]
fn attention_refine_matches_elementwise_oracle() {
    let store = ParamStore::new();
    let att = AttentionRefine::new(&Builder::new(&store, 4).sub("a"), 2, 1).unwrap();
    randomize(&store, 5);
    let f = random_array(&mut rng(6), &[2, 2, 2], 1.0);
    let got = att.forward(&Tensor::constant(f.clone()), &Ctx::eval()).unwrap();
    let (w1, b1) = (value(&store, "a.mlp_in.weight"), value(&store, "a.mlp_in.bias"));
    let (w2, b2) = (value(&store, "a.mlp_out.weight"), value(&store, "a.mlp_out.bias"));
    let (ws, bs) = (value(&store, "a.spatial.weight"), value(&store, "a.spatial.bias"));
    let want = attention_refine(&f, [(&w1, &b1), (&w2, &b2)], (&ws, &bs));
    assert!(max_diff(&got.to_vec(), want.data()) < 1e-6);
}

#[test]
fn reduction_one_attention_equals_dense_attention() {
    for heads in [1, 2] {
        let store = ParamStore::new();
        let sra = SpatialReductionAttention::new(&Builder::new(&store, 7).sub("s"), 4, heads, 1).unwrap();
        randomize(&store, 8);
        let grid = Grid { h: 3, w: 4 };
        let x = random_array(&mut rng(9), &[12, 4], 1.0);
        let got = sra.attend(&Tensor::constant(x.clone()), grid, &Ctx::eval()).unwrap();
        let p = |n: &str| (value(&store, &format!("s.{n}.weight")), value(&store, &format!("s.{n}.bias")));
        let (q, k, v, o) = (p("q"), p("k"), p("v"), p("proj"));
        let want = dense_attention(x.data(), 12, heads, (&q.0, &q.1), (&k.0, &k.1), (&v.0, &v.1), (&o.0, &o.1));
        assert!(max_diff(&got.output.to_vec(), &want) < 1e-6, "heads {heads}");
    }
}

#[test]
fn resized_member_matches_bilinear_resize_oracle() {
    let mut r = rng(10);
    let a = random_array(&mut r, &[2, 64, 64], 1.0);
    let b = random_array(&mut r, &[3, 63, 63], 1.0);
    let pyramid = |m: &Array| FeaturePyramid {
        levels: vec![FeatureMap {
            tensor: Tensor::constant(m.clone()),
            stride: 4,
        }],
    };
    let boosted = align_and_concat(&[pyramid(&a), pyramid(&b)], &["a".into(), "b".into()]).unwrap();
    let got = boosted.levels[0].tensor.to_vec();
    assert_eq!(boosted.levels[0].tensor.shape(), [5, 64, 64]);
    assert_eq!(&got[..2 * 64 * 64], a.data());
    let src = |d: usize| (d as f64 + 0.5) * 63.0 / 64.0 - 0.5;
    let mut want = Vec::with_capacity(3 * 64 * 64);
    for ch in 0..3 {
        let plane = &b.data()[ch * 63 * 63..(ch + 1) * 63 * 63];
        for i in 0..64 {
            for j in 0..64 {
                want.push(bilinear(plane, 63, 63, src(j), src(i)));
            }
        }
    }
    assert!(max_diff(&got[2 * 64 * 64..], &want) < 1e-6);
    assert_eq!(boosted.source_channel_spans[0][1], ("b".to_string(), 2..5));
}

#[test]
fn exploit_matches_per_level_oracle() {
    let store = ParamStore::new();
    let ex = Exploiter::new(&Builder::new(&store, 11).sub("x"), &[4, 8], 2).unwrap();
    randomize(&store, 12);
    let mut r = rng(13);
    let maps = [random_array(&mut r, &[4, 4, 4], 1.0), random_array(&mut r, &[8, 2, 2], 1.0)];
    let boosted = cbhvt::exploitation::BoostedPyramid {
        levels: maps
            .iter()
            .enumerate()
            .map(|(i, m)| FeatureMap {
                tensor: Tensor::constant(m.clone()),
                stride: 4 << i,
            })
            .collect(),
        source_channel_spans: vec![vec![], vec![]],
    };
    let out = ex.exploit(&boosted, &Ctx::eval()).unwrap();
    for (i, m) in maps.iter().enumerate() {
        let p = |n: &str| value(&store, &format!("x.level{i}.{n}"));
        let want = attention_refine(
            m,
            [(&p("mlp_in.weight"), &p("mlp_in.bias")), (&p("mlp_out.weight"), &p("mlp_out.bias"))],
            (&p("spatial.weight"), &p("spatial.bias")),
        );
        assert_eq!(out.levels[i].tensor.shape(), m.shape());
        assert!(max_diff(&out.levels[i].tensor.to_vec(), want.data()) < 1e-6);
    }
}

#[test]
fn fusion_block_matches_composed_oracle() {
    let store = ParamStore::new();
    let spec = FusionSpec {
        layers: vec![(5, 6), (3, 4), (1, 2)],
        terminal_pooling: TerminalPooling::Max3x3Stride1,
    };
    let block = FusionBlock::new(&Builder::new(&store, 14).sub("f"), 7, &spec).unwrap();
    randomize(&store, 15);
    let x = random_array(&mut rng(16), &[7, 6, 5], 1.0);
    let level = FeatureMap {
        tensor: Tensor::constant(x.clone()),
        stride: 8,
    };
    let got = block.forward(&level, &Ctx::eval()).unwrap();
    let mut h = x;
    for (i, &(k, _)) in spec.layers.iter().enumerate() {
        h = bn(&store, &format!("f.layer{i}.bn"), &conv2d(&h, &value(&store, &format!("f.layer{i}.conv.weight")), None, 1, k / 2));
        relu(h.data_mut());
    }
    let want = max_pool3(&h);
    assert_eq!((got.tensor.shape(), got.stride), ([2, 6, 5].as_slice(), 8));
    assert!(max_diff(&got.tensor.to_vec(), want.data()) < 1e-6);
}

#[test]
fn fpn_matches_top_down_oracle() {
    let store = ParamStore::new();
    let chans = [2, 3, 4, 5];
    let fpn = Fpn::new(&Builder::new(&store, 17).sub("p"), &chans, 3).unwrap();
    randomize(&store, 18);
    let mut r = rng(19);
    let sizes = [(8, 7), (4, 4), (2, 2), (1, 1)];
    let maps: Vec<Array> = chans.iter().zip(sizes).map(|(&c, (h, w))| random_array(&mut r, &[c, h, w], 1.0)).collect();
    let levels: Vec<FeatureMap> = maps
        .iter()
        .enumerate()
        .map(|(i, m)| FeatureMap {
            tensor: Tensor::constant(m.clone()),
            stride: 4 << i,
        })
        .collect();
    let out = fpn.forward(&levels).unwrap();
    let p = |n: String| value(&store, &n);
    let mut above: Option<Array> = None;
    for i in (0..4).rev() {
        let mut m = conv2d(&maps[i], &p(format!("p.lateral{i}.weight")), Some(&p(format!("p.lateral{i}.bias"))), 1, 0);
        if let Some(up) = &above {
            let (h, w) = sizes[i];
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let src = up.get(&[c, (y / 2).min(up.shape()[1] - 1), (x / 2).min(up.shape()[2] - 1)]);
                        m.set(&[c, y, x], m.get(&[c, y, x]) + src);
                    }
                }
            }
        }
        let want = conv2d(&m, &p(format!("p.smooth{i}.weight")), Some(&p(format!("p.smooth{i}.bias"))), 1, 1);
        assert_eq!(out[i].stride, 4 << i);
        assert!(max_diff(&out[i].tensor.to_vec(), want.data()) < 1e-6, "level {i}");
        above = Some(m);
    }
}

#[test]
fn generator_weights_round_trip_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pvt.ckpt");
    let cfg = GeneratorConfig::new("pvt", GeneratorKind::PyramidTransformer, [1, 1, 1, 1], [4, 8, 8, 16]);
    let image = Tensor::constant(random_array(&mut rng(20), &[3, 64, 64], 0.5));
    let first = build_generator(&cfg, &Builder::new(&ParamStore::new(), 1)).unwrap();
    let before = first.forward(&image, &Ctx::eval()).unwrap();
    first.save_weights(&path).unwrap();

    let mut loaded_cfg = cfg.clone();
    loaded_cfg.pretrained_weights_path = Some(path);
    let second = build_generator(&loaded_cfg, &Builder::new(&ParamStore::new(), 99)).unwrap();
    assert!(second.is_frozen());
    let after = second.forward(&image, &Ctx::eval()).unwrap();
    for (a, b) in before.levels.iter().zip(&after.levels) {
        assert_eq!(a.tensor.to_vec(), b.tensor.to_vec());
    }
}
