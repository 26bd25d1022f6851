use pdse::anchors::{build_targets, generate_anchors};
use pdse::geometry::BBox;
use pdse::network::{BottomUp, FeaturePyramid, Model, ModelConfig};
use pdse::nn::ParamBuilder;
use pdse::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn image(size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, 1, size, size], |_| rng.random_range(0.0..1.0))
}

fn small() -> ModelConfig {
    ModelConfig {
        backbone_widths: vec![8, 16, 16, 32],
        stem_width: 8,
        backbone_blocks: vec![1, 1, 1, 1],
        pyramid_width: 16,
        head_width: 16,
        head_depth: 2,
        se_reduction: 4,
        ..ModelConfig::default()
    }
}

fn head_values(model: &Model, store: &ParamStore<f64>, x: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut g = Graph::new(false);
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, store, xv).unwrap();
    out.levels
        .iter()
        .flat_map(|l| [g.value(l.cls).clone(), g.value(l.boxes).clone()])
        .collect()
}

#[test]
fn backbone_and_pyramid_sizes_on_256() {
    let (model, store) = Model::init::<f32>(&ModelConfig::default(), 0).unwrap();
    let mut g = Graph::new(false);
    let x = g.constant(Tensor::zeros(&[1, 1, 256, 256]));
    let c = model.backbone().forward(&mut g, &store, x).unwrap();
    let sides: Vec<usize> = c.iter().map(|&v| g.shape(v)[2]).collect();
    assert_eq!(sides, vec![64, 32, 16, 8]);
    let widths: Vec<usize> = c.iter().map(|&v| g.shape(v)[1]).collect();
    assert!(widths.windows(2).all(|w| w[1] == 2 * w[0]));
    let p = model.features(&mut g, &store, x).unwrap();
    let sides: Vec<(u32, usize, usize)> = p.iter().map(|(l, v)| (l, g.shape(v)[1], g.shape(v)[2])).collect();
    assert_eq!(sides, vec![(3, 64, 32), (4, 64, 16), (5, 64, 8), (6, 64, 4), (7, 64, 2)]);
    let out = model.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(out.levels[0].cls), &[1, 81, 32, 32]);
    assert_eq!(g.shape(out.levels[0].boxes), &[1, 36, 32, 32]);
    for l in &out.levels {
        assert_eq!(g.shape(l.cls)[2..], g.shape(l.boxes)[2..]);
    }
}

#[test]
fn same_seed_same_parameters_and_outputs() {
    let (m1, s1) = Model::init::<f64>(&small(), 9).unwrap();
    let (m2, s2) = Model::init::<f64>(&small(), 9).unwrap();
    for ((_, a), (_, b)) in s1.iter().zip(s2.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.data(), b.value.data());
    }
    let x = image(128, 1);
    assert_eq!(head_values(&m1, &s1, &x), head_values(&m2, &s2, &x));
}

#[test]
fn zero_residual_branches_leave_projection_path() {
    let cfg = small();
    let (model, mut store) = Model::init::<f64>(&cfg, 2).unwrap();
    // Zeroing the last normalization of each branch silences it.
    for (_, p) in store.iter_mut() {
        if p.name.starts_with("backbone.s") && (p.name.ends_with(".bn2.gamma") || p.name.ends_with(".bn2.beta")) {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let mut g = Graph::new(false);
    let x = g.constant(image(128, 2));
    let c = model.backbone().forward(&mut g, &store, x).unwrap();
    for s in 3..=5 {
        let input = g.value(c[s - 3]).clone();
        let w = store.by_name(&format!("backbone.s{s}.b0.proj.weight")).unwrap().value.clone();
        let bn = |t: &str| store.by_name(&format!("backbone.s{s}.b0.proj_bn.{t}")).unwrap().value.clone();
        let mut h = Graph::new(false);
        let (iv, wv) = (h.constant(input), h.constant(w));
        let yv = h.conv2d(iv, wv, None, 2, 0).unwrap();
        let y = h.value(yv).clone();
        let (gm, bt, rm, rv) = (bn("gamma"), bn("beta"), bn("running_mean"), bn("running_var"));
        let (_, ch, hh, ww) = y.dims4().unwrap();
        let want = Tensor::from_fn(y.shape(), |i| {
            let k = (i / (hh * ww)) % ch;
            let v = gm.data()[k] * (y.data()[i] - rm.data()[k]) / (rv.data()[k] + 1e-5).sqrt() + bt.data()[k];
            v.max(0.0)
        });
        assert!(g.value(c[s - 2]).max_abs_diff(&want) < 1e-9, "stage {s}");
    }
}

#[test]
fn zero_fpn_gives_zero_pyramid() {
    let cfg = ModelConfig {
        use_panet: false,
        use_dse: false,
        ..small()
    };
    let (model, mut store) = Model::init::<f64>(&cfg, 3).unwrap();
    store.zero_matching(&["fpn."]);
    let mut g = Graph::new(false);
    let x = g.constant(image(128, 3));
    let p = model.features(&mut g, &store, x).unwrap();
    for (_, v) in p.iter() {
        assert!(g.value(v).data().iter().all(|&a| a == 0.0));
    }
}

fn random_pyramid(g: &mut Graph<f64>, w: usize, rng: &mut ChaCha8Rng) -> FeaturePyramid {
    let mut maps = BTreeMap::new();
    for (i, l) in (3u32..=7).enumerate() {
        let side = 32 >> i;
        maps.insert(l, g.constant(Tensor::from_fn(&[1, w, side, side], |_| rng.random_range(-1.0..1.0))));
    }
    FeaturePyramid { maps }
}

#[test]
fn zeroed_bottom_up_is_pass_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for low in [None, Some(8)] {
        let mut store = ParamStore::<f64>::new();
        let bu = BottomUp::build(&mut ParamBuilder::init(&mut store, 0), "bu", 16, low, true).unwrap();
        let mut g = Graph::new(false);
        let p = random_pyramid(&mut g, 16, &mut rng);
        let c2: Option<Var> = low.map(|c| g.constant(Tensor::from_fn(&[1, c, 64, 64], |_| rng.random_range(-1.0..1.0))));
        let n = bu.forward(&mut g, &store, &p, c2).unwrap();
        for (l, v) in n.iter() {
            assert_eq!(g.value(v).data(), g.value(p.get(l).unwrap()).data(), "level {l}");
        }
        if low.is_some() {
            assert!(bu.forward(&mut g, &store, &p, None).is_err());
        }
    }
}

#[test]
fn panet_toggle_is_isolated_at_init() {
    let base = ModelConfig {
        use_dse: false,
        ..small()
    };
    let with = ModelConfig {
        use_panet: true,
        ..base.clone()
    };
    let without = ModelConfig {
        use_panet: false,
        ..base
    };
    let (m1, s1) = Model::init::<f64>(&with, 5).unwrap();
    let (m0, s0) = Model::init::<f64>(&without, 5).unwrap();
    // Shared groups draw identical values under the shared seed.
    for (_, p) in s0.iter() {
        assert_eq!(s1.by_name(&p.name).unwrap().value.data(), p.value.data(), "{}", p.name);
    }
    let x = image(128, 5);
    assert_eq!(head_values(&m1, &s1, &x), head_values(&m0, &s0, &x));
}

#[test]
fn initial_foreground_probability_is_the_prior() {
    let (model, store) = Model::init::<f64>(&small(), 6).unwrap();
    let vals = head_values(&model, &store, &image(128, 6));
    let (mut sum, mut n) = (0.0, 0usize);
    for cls in vals.iter().step_by(2) {
        for &v in cls.data() {
            sum += 1.0 / (1.0 + (-v).exp());
            n += 1;
        }
    }
    let mean = sum / n as f64;
    assert!((mean - 0.01).abs() < 0.005, "{mean}");
}

#[test]
fn head_weights_are_shared_across_levels() {
    let (model, mut store) = Model::init::<f64>(&small(), 7).unwrap();
    let x = image(128, 7);
    let before = head_values(&model, &store, &x);
    for (_, p) in store.iter_mut() {
        if p.name == "head.cls.conv0.weight" || p.name == "head.box.conv0.weight" {
            p.value = p.value.map(|v| v * 1.5 + 0.01);
        }
    }
    let after = head_values(&model, &store, &x);
    for (i, (a, b)) in before.iter().zip(&after).enumerate() {
        assert!(a.max_abs_diff(b) > 0.0, "output {i} unchanged");
    }
}

#[test]
fn every_parameter_receives_a_gradient() {
    let cfg = small();
    let (model, mut store) = Model::init::<f64>(&cfg, 8).unwrap();
    // Break the zero initializations that would otherwise block paths.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (_, p) in store.iter_mut() {
        if p.trainable {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    }
    let anchors = generate_anchors(&cfg.anchors, 128, 128).unwrap();
    let gts = vec![vec![(BBox::new(30.0, 40.0, 62.0, 70.0), 3u8), (BBox::new(80.0, 10.0, 96.0, 30.0), 8u8)]];
    let targets = build_targets::<f64>(&anchors, &gts, cfg.num_classes, cfg.matching).unwrap();
    let mut g = Graph::new(true);
    let x = g.constant(image(128, 8));
    let out = model.forward(&mut g, &store, x).unwrap();
    let loss = model.loss(&mut g, &out, &targets).unwrap();
    let grads = g.backward(loss.total).unwrap();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let gr = grads.param(id).unwrap_or_else(|| panic!("{} has no gradient", p.name));
        assert!(gr.is_finite(), "{}", p.name);
        assert!(gr.data().iter().any(|&v| v != 0.0), "{} has an all-zero gradient", p.name);
    }
}
