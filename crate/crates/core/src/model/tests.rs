use super::*;
use crate::backbone::{downsample_labels, sinusoidal_pos_embed};
use crate::hierarchy::{compose_segmentation, SoftAssignment};
use crate::ndcore::{grad_check_coords, Array, Rng, Var};
use crate::raster::Image;
use crate::superpixel::grid_superpixels;

fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 32,
        n0: 16,
        stage_sizes: vec![8, 4],
        blocks_per_stage: 1,
        d: 16,
        heads: 2,
        mlp_ratio: 2,
        head_channels: 8,
        variant,
        ..ModelConfig::default()
    }
}

fn noise_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = Rng::new(seed);
    let mut im = Image::new(h, w);
    im.data.iter_mut().for_each(|v| *v = rng.next_f64() as f32);
    im
}

/// Give the zero-initialized head a nonzero last layer so gradients reach
/// everything upstream.
fn perturb_head<T: Real>(p: &mut ParamStore<T>, seed: u64) {
    let mut rng = Rng::new(seed);
    for name in ["head.conv1.w", "head.conv1.b"] {
        for v in p.get_mut(name).unwrap().data_mut() {
            *v = T::lit(rng.uniform(-0.3, 0.3));
        }
    }
}

#[test]
fn desk_config_shape_contract() {
    let cfg = ModelConfig::default();
    let model = Model::<f32>::init(cfg.clone(), 1).unwrap();
    let image = noise_image(96, 96, 2);
    let sp = grid_superpixels(96, 96, 36).unwrap();
    let mut t = Tape::new();
    let b = model.params.bind_frozen(&mut t);
    let x = t.constant(crate::backbone::image_array(&image));
    let (depth, trace) = forward(&mut t, &b, &cfg, x, &sp).unwrap();
    let counts: Vec<usize> = trace.levels.iter().map(|l| l.n_tokens(&t)).collect();
    assert_eq!(counts, vec![36, 16, 8, 4]);
    assert_eq!(t.value(depth).shape(), &[96 * 96, 1]);
    let dv = t.value(depth).data();
    assert!(dv.iter().all(|&v| v as f64 >= cfg.depth_min && v as f64 <= cfg.depth_max));
    // zero head: every pixel sits at the prior
    assert!(dv.iter().all(|&v| (v - 3.0).abs() < 1e-5));
    for (l, s) in trace.segmentations().enumerate() {
        assert_eq!(s.rows(), 96 * 96);
        assert_eq!(s.n_segments, counts[l]);
        if l > 0 {
            assert!(trace.levels[l - 1].segmentation.refines(s));
        }
    }
    assert_eq!(t.value(trace.class_token).shape(), &[1, 64]);
}

#[test]
fn constant_image_tokens_differ_by_position_only() {
    let cfg = small_config(Variant::Full);
    let params = init_params::<f64>(&cfg, 4).unwrap();
    let sp = grid_superpixels(32, 32, 16).unwrap();
    let mut t = Tape::new();
    let b = params.bind_frozen(&mut t);
    let x = t.constant(Array::full(&[32 * 32, 3], 0.4));
    let trace = encode(&mut t, &b, &cfg, x, &sp).unwrap();
    let z0 = t.value(trace.levels[0].tokens).clone();
    let pe = sinusoidal_pos_embed::<f64>(4, 4, cfg.d).unwrap();
    let labels = downsample_labels(&sp.labels, 8).unwrap();
    let pooled = {
        let mut t2 = Tape::new();
        let p = t2.constant(pe);
        let m = t2.segment_mean(p, &labels, 16);
        t2.value(m).clone()
    };
    let offset: Vec<f64> = (0..cfg.d).map(|c| z0.get2(0, c) - pooled.get2(0, c)).collect();
    for r in 0..16 {
        for c in 0..cfg.d {
            assert!((z0.get2(r, c) - pooled.get2(r, c) - offset[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn hard_assignments_give_piecewise_constant_maps() {
    let cfg = small_config(Variant::Full);
    let params = init_params::<f64>(&cfg, 5).unwrap();
    let sp = grid_superpixels(32, 32, 16).unwrap();
    let image = noise_image(32, 32, 6);
    let mut t = Tape::new();
    let b = params.bind_frozen(&mut t);
    let x = t.constant(crate::backbone::image_array(&image));
    let trace = encode(&mut t, &b, &cfg, x, &sp).unwrap();
    let mut grid = trace.grid_segmentation.clone();
    let mut chain = Vec::new();
    for l in 0..trace.levels.len() {
        if let Some(p) = trace.levels[l].assignment {
            let pv = t.value(p).clone();
            grid = compose_segmentation(&grid, &pv).unwrap();
            chain.push(t.constant(crate::hierarchy::harden(&pv).to_dense()));
        }
        let hard_chain = crate::hierarchy::compose_soft(&mut t, &chain, 16).unwrap();
        let z = trace.levels[l].tokens;
        let f = crate::hierarchy::project_spatial(&mut t, &trace.grid_segmentation, hard_chain, z).unwrap();
        let (fv, zv) = (t.value(f), t.value(z));
        // per-segment broadcast oracle
        for cell in 0..grid.rows() {
            assert_eq!(fv.row(cell), zv.row(grid.labels[cell]), "level {l} cell {cell}");
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_config(Variant::Full);
    let mut model = Model::<f32>::init(cfg, 8).unwrap();
    perturb_head(&mut model.params, 1);
    let image = noise_image(32, 32, 9);
    let sp = model.superpixels(&image).unwrap();
    let a = model.predict(&image, &sp).unwrap();
    let b = model.predict(&image, &sp).unwrap();
    assert!(a.depth.values.iter().zip(&b.depth.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.segmentations, b.segmentations);
    let again = Model::<f32>::init(small_config(Variant::Full), 8).unwrap();
    assert_eq!(again.params.get("stem.conv0.w"), model.params.get("stem.conv0.w"));
}

fn tensor_loss(t: &mut Tape<f64>, depth: Var) -> Var {
    let l = t.log(depth);
    let target = t.constant(Array::full(t.value(l).shape(), 0.9));
    let d = t.sub(l, target);
    let s = t.square(d);
    t.mean_all(s)
}

#[test]
fn gradients_reach_every_parameter() {
    for variant in [Variant::Full, Variant::NoUnpool] {
        let cfg = small_config(variant);
        let mut params = init_params::<f64>(&cfg, 11).unwrap();
        perturb_head(&mut params, 2);
        let image = noise_image(32, 32, 12);
        let sp = grid_superpixels(32, 32, 16).unwrap();
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let x = t.leaf(crate::backbone::image_array(&image));
        let (depth, _) = forward(&mut t, &b, &cfg, x, &sp).unwrap();
        let loss = tensor_loss(&mut t, depth);
        let mut g = t.backward(loss);
        let gi = g.take(x).unwrap();
        assert!(gi.all_finite() && gi.max_abs() > 0.0);
        let grads = params.collect_grads(&b, &mut g);
        for ((name, _), gr) in params.iter().zip(&grads) {
            assert!(gr.all_finite(), "{name}");
            assert!(gr.max_abs() > 0.0, "{variant}: no gradient reaches {name}");
        }
    }
}

#[test]
fn no_unpool_has_fewer_decoder_parameters() {
    let full = init_params::<f32>(&small_config(Variant::Full), 0).unwrap();
    let flat = init_params::<f32>(&small_config(Variant::NoUnpool), 0).unwrap();
    let decoder = |p: &ParamStore<f32>| p.numel_with_prefix("dec.") + p.numel_with_prefix("head.");
    assert!(decoder(&flat) < decoder(&full));
    assert_eq!(flat.numel_with_prefix("dec."), 0);
    assert_eq!(full.numel_with_prefix("enc."), flat.numel_with_prefix("enc."));
}

#[test]
fn no_unpool_projects_top_tokens_directly() {
    let cfg = small_config(Variant::NoUnpool);
    let params = init_params::<f64>(&cfg, 13).unwrap();
    let sp = grid_superpixels(32, 32, 16).unwrap();
    let mut t = Tape::new();
    let b = params.bind_frozen(&mut t);
    let x = t.constant(crate::backbone::image_array(&noise_image(32, 32, 14)));
    let trace = encode(&mut t, &b, &cfg, x, &sp).unwrap();
    let maps = spatial_maps(&mut t, &b, &cfg, &trace).unwrap();
    assert_eq!(maps.len(), 1);
    let (l, f) = maps[0];
    assert_eq!(l, 2);
    // dense oracle: S0 (one-hot) * P1 * P2 * Z2
    let s0 = trace.head_segmentation.to_dense::<f64>();
    let p1 = t.value(trace.levels[1].assignment.unwrap());
    let p2 = t.value(trace.levels[2].assignment.unwrap());
    let z2 = t.value(trace.levels[2].tokens);
    let want = s0.matmul(p1).unwrap().matmul(p2).unwrap().matmul(z2).unwrap();
    for (a, b) in t.value(f).data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn assignments_are_row_stochastic() {
    let cfg = small_config(Variant::Full);
    let params = init_params::<f64>(&cfg, 15).unwrap();
    let image = noise_image(32, 32, 16);
    let sp = grid_superpixels(32, 32, 16).unwrap();
    let mut t = Tape::new();
    let b = params.bind_frozen(&mut t);
    let x = t.constant(crate::backbone::image_array(&image));
    let trace = encode(&mut t, &b, &cfg, x, &sp).unwrap();
    for p in trace.assignments() {
        assert!(SoftAssignment::new(t.value(p).clone()).is_ok());
    }
}

#[test]
fn rejects_mismatched_inputs() {
    let cfg = small_config(Variant::Full);
    let params = init_params::<f64>(&cfg, 0).unwrap();
    let mut t = Tape::new();
    let b = params.bind_frozen(&mut t);
    let x = t.constant(Array::zeros(&[32 * 32, 3]));
    let wrong = grid_superpixels(40, 32, 16).unwrap();
    assert!(encode(&mut t, &b, &cfg, x, &wrong).is_err());
    let few = grid_superpixels(32, 32, 4).unwrap();
    assert!(encode(&mut t, &b, &cfg, x, &few).is_err());
}

#[test]
fn full_model_gradient_check() {
    let cfg = ModelConfig {
        height: 16,
        width: 16,
        n0: 4,
        stage_sizes: vec![2],
        d: 8,
        heads: 2,
        mlp_ratio: 1,
        head_channels: 4,
        ..ModelConfig::default()
    };
    let mut params = init_params::<f64>(&cfg, 21).unwrap();
    perturb_head(&mut params, 3);
    let image = crate::backbone::image_array::<f64>(&noise_image(16, 16, 22));
    let sp = grid_superpixels(16, 16, 4).unwrap();
    for name in ["stem.conv2.w", "enc.0.b0.attn.wq", "dec.0.fuse.w1", "head.conv0.w"] {
        let x0 = params.get(name).unwrap().clone();
        let f = |t: &mut Tape<f64>, v: Var| {
            let mut b = params.bind_frozen(t);
            b.replace(name, v);
            let img = t.constant(image.clone());
            let (depth, _) = forward(t, &b, &cfg, img, &sp).unwrap();
            tensor_loss(t, depth)
        };
        let coords: Vec<usize> = (0..x0.len()).step_by((x0.len() / 12).max(1)).collect();
        let r = grad_check_coords(f, &x0, 1e-4, 1e-4, &coords).unwrap();
        assert!(r.pass, "{name}: {r:?}");
    }
}

#[test]
fn checkpoint_restores_model() {
    let cfg = small_config(Variant::NoUnpool);
    let model = Model::<f32>::init(cfg, 30).unwrap();
    let ck = model.checkpoint();
    let back = Model::<f32>::from_checkpoint(&ck).unwrap();
    assert_eq!(back, model);
    let mut broken = ck.clone();
    broken.tensors = ParamStore::new();
    assert!(Model::<f32>::from_checkpoint(&broken).is_err());
}
