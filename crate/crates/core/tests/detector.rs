use flowdet_core::attn::{AttnMode, GateMode, SaaConfig};
use flowdet_core::autograd::Graph;
use flowdet_core::data::{SynthScene, SynthSceneSpec};
use flowdet_core::detector::*;
use flowdet_core::eval::giou;
use flowdet_core::geom::GduConfig;
use flowdet_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro_scenes(n: usize, seed: u64) -> Vec<SynthScene> {
    let spec = SynthSceneSpec {
        image_size: (16, 16),
        object_count: (1, 2),
        scale_range: (6.0, 10.0),
        seed,
        ..SynthSceneSpec::default()
    };
    flowdet_core::data::synth_dataset(&spec, n).unwrap()
}

fn micro_opts(steps: usize) -> TrainOptions {
    TrainOptions {
        train_images: 4,
        val_images: 2,
        batch_size: 2,
        steps,
        flip: true,
        max_shift: 2,
        scene: SynthSceneSpec {
            image_size: (16, 16),
            object_count: (1, 2),
            scale_range: (6.0, 10.0),
            ..SynthSceneSpec::default()
        },
    }
}

// ---- model construction ----

#[test]
fn same_seed_gives_identical_parameters() {
    let cfg = ModelConfig::micro();
    let a = build_model::<f64>(&cfg).unwrap();
    let b = build_model::<f64>(&cfg).unwrap();
    for ((na, ta), (nb, tb)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb, "{na}");
    }
    let c = build_model::<f64>(&ModelConfig { seed: 1, ..cfg }).unwrap();
    assert!(a.store.iter().zip(c.store.iter()).any(|((_, x), (_, y))| x != y));
}

#[test]
fn cold_start_offset_heads_are_zero() {
    let m = build_model::<f64>(&ModelConfig::default()).unwrap();
    let mut n = 0;
    for (name, t) in m.store.iter() {
        if name.contains("offset_w") || name.contains("offset_b") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            n += 1;
        }
    }
    // two stages, two ARBs each, two branches, weight and bias
    assert_eq!(n, 16);
}

fn gdu_params(c: usize, cfg: &GduConfig) -> usize {
    let k = cfg.k();
    let b = cfg.branches.len();
    c * 9 + c * c + b * (2 * k * c + 2 * k + k * c + k + c * c * k) + c * c + c
}

fn arb_params(c: usize, cfg: &GduConfig) -> usize {
    gdu_params(c, cfg) + 2 * c + c * c + c
}

fn saa_params(s: &SaaConfig) -> usize {
    let d = s.embed_dim;
    let f = s.ffn_dim;
    let lin = d * d + d;
    let mut n = 0;
    if s.mode == AttnMode::ScaleAware {
        n += 3 * lin + d * d + (2 * s.window - 1).pow(2) * s.heads;
        n += d * d + d;
        if s.gate == GateMode::Learned {
            n += d + 1;
        }
    }
    n += 3 * lin + 2 * d * d;
    n + 2 * d + (f * d + f) + (d * f + d) + 2 * d
}

/// Closed-form parameter count, layer by layer.
fn expected_params(cfg: &ModelConfig) -> usize {
    let mut n = 0;
    let mut c_in = 3;
    for &c in &cfg.stage_channels {
        n += c * c_in * 9 + c;
        let h = c / 2;
        match cfg.backbone {
            BackboneMode::Pafc => {
                n += (cfg.arb_count - 1) * arb_params(h, &cfg.gdu);
                n += cfg.arb_count + 1;
                n += c * h * (cfg.arb_count + 1) + c;
            }
            BackboneMode::Plain => n += (cfg.arb_count - 1) * (2 * (c * c * 9 + c) + 2 * c),
        }
        c_in = c;
    }
    let d = cfg.saa.embed_dim;
    if c_in != d {
        n += d * c_in + d;
    }
    n += 2 * d + saa_params(&cfg.saa);
    n += cfg.query_count * d;
    let f = cfg.decoder_ffn;
    n += cfg.decoder_layers * (3 * (d * d + d) + d * d + 2 * d + (d * f + f) + (f * d + d) + 2 * d);
    n + d * (cfg.class_count + 1) + cfg.class_count + 1 + d * d + d + 4 * d + 4
}

#[test]
fn parameter_count_matches_closed_form() {
    for cfg in [ModelConfig::default(), ModelConfig::micro()] {
        let m = build_model::<f32>(&cfg).unwrap();
        assert_eq!(m.param_count(), expected_params(&cfg));
    }
    for mode in AblationMode::ALL {
        let cfg = mode.apply(&ModelConfig::default());
        assert_eq!(build_model::<f32>(&cfg).unwrap().param_count(), expected_params(&cfg), "{}", mode.label());
    }
}

#[test]
fn toy_model_fits_budget() {
    let m = build_model::<f32>(&ModelConfig::default()).unwrap();
    assert!(m.param_count() <= 200_000, "{}", m.param_count());
}

#[test]
fn outputs_have_query_rows_and_unit_boxes() {
    let cfg = ModelConfig::micro();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..100 {
        let m = build_model::<f64>(&ModelConfig { seed, ..cfg.clone() }).unwrap();
        let x = Tensor::rand_uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
        let sets = predict(&m, &x).unwrap();
        assert_eq!(sets.len(), 2);
        for s in &sets {
            assert_eq!(s.boxes.len(), cfg.query_count);
            assert!(s.class_logits.iter().all(|l| l.len() == cfg.class_count + 1));
            assert!(s.boxes.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn wrong_input_size_is_a_shape_error() {
    let m = build_model::<f64>(&ModelConfig::micro()).unwrap();
    let x = Tensor::zeros(&[1, 3, 12, 16]);
    assert!(matches!(predict(&m, &x), Err(Error::Shape { .. })));
}

#[test]
fn anchors_cover_the_image() {
    let a = query_anchors(25);
    assert_eq!(a.len(), 25);
    assert_eq!(a[0], (0.1, 0.1));
    assert_eq!(a[24], (0.9, 0.9));
    assert_eq!(query_anchors(4), vec![(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)]);
    assert_eq!(query_anchors(3).len(), 3);
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = ModelConfig::default();
    assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let bad = format!("{}\nmystery = 1\n", cfg.to_toml());
    assert!(matches!(ModelConfig::from_toml(&bad), Err(Error::Config(_))));
}

// ---- matcher ----

fn random_costs(rng: &mut ChaCha8Rng, q: usize, t: usize, integer: bool) -> Vec<f64> {
    (0..q * t)
        .map(|_| if integer { rng.random_range(0..5) as f64 } else { rng.random_range(-3.0..3.0) })
        .collect()
}

fn pair_cost(cost: &[f64], cols: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i * cols + j]).sum()
}

#[test]
fn hungarian_equals_brute_force_on_1000_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..1000 {
        let q = rng.random_range(1..=6);
        let t = rng.random_range(0..=6);
        let cost = random_costs(&mut rng, q, t, k % 2 == 1);
        let h = hungarian_match(&cost, q, t).unwrap();
        let b = brute_force_match(&cost, q, t);
        assert_eq!(h.pairs.len(), q.min(t));
        assert_eq!(pair_cost(&cost, t, &h.pairs), pair_cost(&cost, t, &b.pairs), "instance {k}: {q}x{t}");
    }
}

#[test]
fn hungarian_rejects_bad_input() {
    assert!(hungarian_match(&[1.0, 2.0, 3.0], 2, 2).is_err());
    assert!(matches!(hungarian_match(&[1.0, f64::NAN], 1, 2), Err(Error::NonFinite { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matching_is_a_partial_injection(seed in any::<u64>(), q in 1usize..8, t in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = random_costs(&mut rng, q, t, seed % 2 == 0);
        let m = hungarian_match(&cost, q, t).unwrap();
        prop_assert_eq!(m.pairs.len(), q.min(t));
        let mut rows: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        prop_assert!(rows.windows(2).all(|w| w[0] < w[1]));
        cols.sort();
        cols.dedup();
        rows.dedup();
        prop_assert_eq!(cols.len(), m.pairs.len());
        prop_assert!(m.pairs.iter().all(|&(i, j)| i < q && j < t));
    }
}

// ---- loss ----

fn loss_of(logits: &[f64], boxes: &[f64], n: usize, q: usize, k: usize, targets: &[Vec<Target>]) -> (LossBreakdown, Vec<MatchResult>) {
    let mut g = Graph::<f64>::inference();
    let l = g.constant(Tensor::from_f64_slice(&[n, q, k], logits).unwrap());
    let b = g.constant(Tensor::from_f64_slice(&[n, q, 4], boxes).unwrap());
    let s = set_loss(&mut g, l, b, targets, &LossWeights::default()).unwrap();
    (s.breakdown(&g), s.matches)
}

#[test]
fn perfect_prediction_has_zero_box_loss() {
    let t = vec![vec![
        Target { class: 0, bbox: [0.3, 0.3, 0.2, 0.2] },
        Target { class: 1, bbox: [0.7, 0.6, 0.3, 0.1] },
    ]];
    let logits = [0.0, 30.0, 0.0, 30.0, 0.0, 0.0, 0.0, 0.0, 30.0];
    let boxes = [0.7, 0.6, 0.3, 0.1, 0.3, 0.3, 0.2, 0.2, 0.5, 0.5, 0.5, 0.5];
    let (l, m) = loss_of(&logits, &boxes, 1, 3, 3, &t);
    assert_eq!(m[0].pairs, vec![(0, 1), (1, 0)]);
    assert!(l.l1.abs() < 1e-15 && l.giou.abs() < 1e-15, "{l:?}");
    assert!(l.cls < 1e-12, "{l:?}");
}

#[test]
fn no_targets_leaves_only_no_object_loss() {
    let logits = [0.0, 0.0, 0.0, 1.0, 2.0, 3.0];
    let boxes = [0.5; 8];
    let (l, m) = loss_of(&logits, &boxes, 1, 2, 3, &[vec![]]);
    assert!(m[0].pairs.is_empty());
    assert_eq!((l.l1, l.giou), (0.0, 0.0));
    let lse = |r: &[f64]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
    let expected = ((lse(&logits[..3]) - 0.0) + (lse(&logits[3..]) - 3.0)) / 2.0;
    assert!((l.cls - expected).abs() < 1e-12);
    assert!((l.total - 2.0 * expected).abs() < 1e-12);
}

#[test]
fn two_object_hand_computed_loss() {
    // Q=3, two classes + no-object; query 0 and 2 match the two targets.
    let t = vec![vec![
        Target { class: 0, bbox: [0.25, 0.25, 0.2, 0.2] },
        Target { class: 1, bbox: [0.75, 0.75, 0.2, 0.2] },
    ]];
    let logits = [2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 0.0];
    let boxes = [0.3, 0.25, 0.2, 0.2, 0.5, 0.5, 0.1, 0.1, 0.75, 0.7, 0.2, 0.2];
    let (l, m) = loss_of(&logits, &boxes, 1, 3, 3, &t);
    assert_eq!(m[0].pairs, vec![(0, 0), (2, 1)]);
    let logp = |row: &[f64], c: usize| row[c] - row.iter().map(|v| v.exp()).sum::<f64>().ln();
    let cls = -(logp(&logits[0..3], 0) + 0.1 * logp(&logits[3..6], 2) + logp(&logits[6..9], 1)) / 2.1;
    let l1 = (0.05 + 0.05) / 2.0;
    let g0 = giou(&[0.2, 0.15, 0.4, 0.35], &[0.15, 0.15, 0.35, 0.35]).unwrap();
    let g1 = giou(&[0.65, 0.6, 0.85, 0.8], &[0.65, 0.65, 0.85, 0.85]).unwrap();
    let gi = 1.0 - (g0 + g1) / 2.0;
    assert!((l.cls - cls).abs() < 1e-12, "{} vs {cls}", l.cls);
    assert!((l.l1 - l1).abs() < 1e-12);
    assert!((l.giou - gi).abs() < 1e-12);
    assert!((l.total - (2.0 * cls + 5.0 * l1 + 2.0 * gi)).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_invariant_to_query_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, k) = (5, 4);
        let logits: Vec<f64> = (0..q * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let boxes: Vec<f64> = (0..q * 4).map(|_| rng.random_range(0.1..0.9)).collect();
        let t: Vec<Target> = (0..rng.random_range(0..=q))
            .map(|_| Target {
                class: rng.random_range(0..k - 1),
                bbox: [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.05..0.4), rng.random_range(0.05..0.4)],
            })
            .collect();
        let mut perm: Vec<usize> = (0..q).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let pl: Vec<f64> = perm.iter().flat_map(|&i| logits[i * k..(i + 1) * k].to_vec()).collect();
        let pb: Vec<f64> = perm.iter().flat_map(|&i| boxes[i * 4..(i + 1) * 4].to_vec()).collect();
        let (a, _) = loss_of(&logits, &boxes, 1, q, k, std::slice::from_ref(&t));
        let (b, _) = loss_of(&pl, &pb, 1, q, k, std::slice::from_ref(&t));
        prop_assert!((a.total - b.total).abs() <= 1e-12, "{} vs {}", a.total, b.total);
    }
}

#[test]
fn out_of_range_target_class_is_rejected() {
    let mut g = Graph::<f64>::inference();
    let l = g.constant(Tensor::zeros(&[1, 2, 3]));
    let b = g.constant(Tensor::full(&[1, 2, 4], 0.5));
    let t = vec![vec![Target { class: 2, bbox: [0.5; 4] }]];
    assert!(set_loss(&mut g, l, b, &t, &LossWeights::default()).is_err());
}

// ---- optimizer and training ----

#[test]
fn zero_learning_rate_leaves_parameters_bit_exact() {
    let mut cfg = ModelConfig::micro();
    cfg.optimizer.lr = 0.0;
    let mut m = build_model::<f64>(&cfg).unwrap();
    let before = m.store.clone();
    let scenes = micro_scenes(2, 5);
    let refs: Vec<&SynthScene> = scenes.iter().collect();
    let batch = make_batch::<f64>(&refs, &[]).unwrap();
    let mut opt = AdamState::new(&m.store);
    for _ in 0..3 {
        train_step(&mut m, &batch, &mut opt).unwrap();
    }
    assert_eq!(opt.step, 3);
    for ((n, a), (_, b)) in before.iter().zip(m.store.iter()) {
        assert_eq!(a, b, "{n}");
    }
    assert!(opt.m.iter().flatten().any(|&v| v != 0.0));
}

fn trajectory(steps: usize) -> (Vec<f64>, Model<f32>) {
    let opts = micro_opts(steps);
    let data = synth_split(&opts).unwrap();
    let mut m = build_model::<f32>(&ModelConfig::micro()).unwrap();
    let mut opt = AdamState::new(&m.store);
    let mut losses = Vec::new();
    run_training(&mut m, &mut opt, &data.train, &opts, |_, r| {
        losses.push(r.loss.total);
        Ok(true)
    })
    .unwrap();
    (losses, m)
}

#[test]
fn seeded_training_is_deterministic() {
    let (a, ma) = trajectory(6);
    let (b, mb) = trajectory(6);
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert_eq!(checkpoint_bytes(&ma, &AdamState::new(&ma.store)), checkpoint_bytes(&mb, &AdamState::new(&mb.store)));
}

#[test]
fn single_image_overfits() {
    let mut cfg = ModelConfig::micro();
    cfg.optimizer.total_steps = 300;
    let scenes = micro_scenes(1, 21);
    let refs: Vec<&SynthScene> = scenes.iter().collect();
    let batch = make_batch::<f32>(&refs, &[]).unwrap();
    let mut m = build_model::<f32>(&cfg).unwrap();
    let first = evaluate_loss(&m, &batch).unwrap().total;
    let mut opt = AdamState::new(&m.store);
    for _ in 0..300 {
        train_step(&mut m, &batch, &mut opt).unwrap();
    }
    let last = evaluate_loss(&m, &batch).unwrap().total;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn non_finite_parameter_is_reported() {
    let mut m = build_model::<f64>(&ModelConfig::micro()).unwrap();
    let id = m.params.class_head.b;
    m.store.get_mut(id).data_mut()[0] = f64::NAN;
    let scenes = micro_scenes(1, 6);
    let batch = make_batch::<f64>(&[&scenes[0]], &[]).unwrap();
    let mut opt = AdamState::new(&m.store);
    let r = train_step(&mut m, &batch, &mut opt);
    assert!(matches!(r, Err(Error::NonFiniteLoss { step: 1, .. })), "{:?}", r.map(|_| ()));
}

#[test]
fn too_many_targets_is_an_error() {
    let m0 = build_model::<f64>(&ModelConfig::micro()).unwrap();
    let mut m = m0.clone();
    let batch = Batch {
        images: Tensor::zeros(&[1, 3, 16, 16]),
        targets: vec![vec![Target { class: 0, bbox: [0.5, 0.5, 0.2, 0.2] }; 5]],
    };
    let mut opt = AdamState::new(&m.store);
    assert!(matches!(train_step(&mut m, &batch, &mut opt), Err(Error::Config(_))));
}

#[test]
fn flipped_batch_mirrors_pixels_and_boxes() {
    let scenes = micro_scenes(1, 8);
    let a = make_batch::<f64>(&[&scenes[0]], &[Augment::default()]).unwrap();
    let b = make_batch::<f64>(&[&scenes[0]], &[Augment { flip: true, shift: (0, 0) }]).unwrap();
    let (ad, bd) = (a.images.data(), b.images.data());
    for c in 0..3 {
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(ad[(c * 16 + i) * 16 + j], bd[(c * 16 + i) * 16 + 15 - j]);
            }
        }
    }
    for (ta, tb) in a.targets[0].iter().zip(&b.targets[0]) {
        assert!((ta.bbox[0] + tb.bbox[0] - 1.0).abs() < 1e-12);
        assert_eq!(ta.bbox[1..], tb.bbox[1..]);
    }
}

#[test]
fn batch_plan_covers_each_epoch_once() {
    let mut seen = Vec::new();
    for step in 0..4 {
        seen.extend(batch_plan(9, 8, 2, step, false, 0).into_iter().map(|p| p.0));
    }
    seen.sort();
    assert_eq!(seen, (0..8).collect::<Vec<_>>());
    assert_eq!(batch_plan(9, 8, 3, 5, true, 4), batch_plan(9, 8, 3, 5, true, 4));
    let shifts: Vec<_> = (0..20).flat_map(|s| batch_plan(9, 8, 2, s, false, 4)).map(|p| p.1.shift).collect();
    assert!(shifts.iter().all(|&(y, x)| y.abs() <= 4 && x.abs() <= 4));
    assert!(shifts.iter().any(|&s| s != (0, 0)));
}

#[test]
fn shifted_batch_moves_pixels_and_boxes() {
    let scenes = micro_scenes(1, 8);
    let sc = &scenes[0];
    let a = make_batch::<f64>(&[sc], &[]).unwrap();
    let b = make_batch::<f64>(&[sc], &[Augment { flip: false, shift: (2, -3) }]).unwrap();
    let (ad, bd) = (a.images.data(), b.images.data());
    for i in 2..16 {
        for j in 0..13 {
            assert_eq!(bd[i * 16 + j], ad[(i - 2) * 16 + j + 3]);
        }
    }
    // edge replication
    assert_eq!(bd[0], ad[3]);
    assert_eq!(bd[15], ad[15]);
    for t in &b.targets[0] {
        let [cx, cy, w, h] = t.bbox;
        assert!(cx - w / 2.0 >= -1e-12 && cx + w / 2.0 <= 1.0 + 1e-12);
        assert!(cy - h / 2.0 >= -1e-12 && cy + h / 2.0 <= 1.0 + 1e-12);
    }
    let far = make_batch::<f64>(&[sc], &[Augment { flip: false, shift: (0, 40) }]).unwrap();
    assert!(far.targets[0].is_empty());
}

// ---- checkpoints ----

#[test]
fn checkpoint_round_trip_is_exact() {
    let (_, m) = trajectory(2);
    let opt = AdamState::new(&m.store);
    let bytes = checkpoint_bytes(&m, &opt);
    let (m2, opt2) = load_checkpoint_bytes::<f32>(&bytes, Some(&m.cfg)).unwrap();
    assert_eq!(opt2, opt);
    for ((_, a), (_, b)) in m.store.iter().zip(m2.store.iter()) {
        assert_eq!(a, b);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/model.ckpt");
    save_checkpoint(&path, &m, &opt).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert!(load_checkpoint::<f32>(&path, None).is_ok());
}

#[test]
fn checkpoint_config_mismatch_is_rejected() {
    let m = build_model::<f32>(&ModelConfig::micro()).unwrap();
    let bytes = checkpoint_bytes(&m, &AdamState::new(&m.store));
    let other = ModelConfig { query_count: 5, ..ModelConfig::micro() };
    match load_checkpoint_bytes::<f32>(&bytes, Some(&other)) {
        Err(Error::ConfigMismatch(msg)) => assert!(msg.contains("query_count"), "{msg}"),
        r => panic!("expected mismatch, got {:?}", r.map(|_| ())),
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let m = build_model::<f32>(&ModelConfig::micro()).unwrap();
    let bytes = checkpoint_bytes(&m, &AdamState::new(&m.store));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(load_checkpoint_bytes::<f32>(&bad, None), Err(Error::Format(_))));
    assert!(matches!(load_checkpoint_bytes::<f32>(&bytes[..bytes.len() / 2], None), Err(Error::Format(_))));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let opts = micro_opts(6);
    let data = synth_split(&opts).unwrap();
    let cfg = ModelConfig::micro();

    let mut full = build_model::<f32>(&cfg).unwrap();
    let mut full_opt = AdamState::new(&full.store);
    run_training(&mut full, &mut full_opt, &data.train, &opts, |_, _| Ok(true)).unwrap();

    let mut half = build_model::<f32>(&cfg).unwrap();
    let mut half_opt = AdamState::new(&half.store);
    run_training(&mut half, &mut half_opt, &data.train, &TrainOptions { steps: 3, ..opts.clone() }, |_, _| Ok(true)).unwrap();
    let bytes = checkpoint_bytes(&half, &half_opt);
    let (mut resumed, mut resumed_opt) = load_checkpoint_bytes::<f32>(&bytes, Some(&cfg)).unwrap();
    assert_eq!(resumed_opt.step, 3);
    let mut steps = Vec::new();
    run_training(&mut resumed, &mut resumed_opt, &data.train, &opts, |_, r| {
        steps.push(r.step);
        Ok(true)
    })
    .unwrap();
    assert_eq!(steps, vec![4, 5, 6]);
    assert_eq!(resumed_opt, full_opt);
    for ((n, a), (_, b)) in full.store.iter().zip(resumed.store.iter()) {
        assert_eq!(a, b, "{n}");
    }
}

// ---- FLOPs ----

/// Multiply-adds of a convolution counted by walking every output element
/// and every kernel tap it touches.
fn loop_count_conv(c_in: usize, c_out: usize, k: usize, h: usize, w: usize, stride: usize, groups: usize) -> u64 {
    let pad = k / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut macs = 0u64;
    for _o in 0..c_out {
        for _y in 0..ho {
            for _x in 0..wo {
                for _c in 0..c_in / groups {
                    for _ky in 0..k {
                        for _kx in 0..k {
                            macs += 1;
                        }
                    }
                }
            }
        }
    }
    2 * macs
}

#[test]
fn conv_flops_match_loop_count_on_50_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let groups = [1, 2, 4][rng.random_range(0..3)];
        let c_in = groups * rng.random_range(1..5);
        let c_out = groups * rng.random_range(1..5);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (h, w) = (rng.random_range(k..20), rng.random_range(k..20));
        let stride = rng.random_range(1..3);
        let (ho, wo) = (flops_conv_out(h, k, stride), flops_conv_out(w, k, stride));
        assert_eq!(conv_flops(c_in, c_out, k, k, ho, wo, groups), loop_count_conv(c_in, c_out, k, h, w, stride, groups));
    }
}

fn flops_conv_out(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

#[test]
fn window_sweep_flops_strictly_increase() {
    let rows = window_sweep(&ModelConfig::default(), &WINDOW_SWEEP, None).unwrap();
    assert_eq!(rows.iter().map(|r| r.setting.as_str()).collect::<Vec<_>>(), ["1", "2", "4", "8"]);
    assert!(rows.windows(2).all(|w| w[0].flops < w[1].flops), "{rows:?}");
    let ldb = |win: usize| {
        let mut cfg = ModelConfig::default();
        cfg.saa.window = win;
        count_flops(&cfg).module_total("encoder.ldb")
    };
    assert!(ldb(8) > ldb(2));
}

#[test]
fn gcb_kv_flops_quarter_at_reduction_two() {
    let kv = |r: usize| {
        let mut cfg = ModelConfig::default();
        cfg.saa.reduction = r;
        count_flops(&cfg).get("encoder.gcb", "kv_path").unwrap()
    };
    assert_eq!(4 * kv(2), kv(1));
    let rows = reduction_sweep(&ModelConfig::default(), &REDUCTION_SWEEP, None).unwrap();
    assert!(rows.windows(2).all(|w| w[0].flops > w[1].flops));
}

#[test]
fn flop_report_totals_add_up() {
    let r = count_flops(&ModelConfig::default());
    let sum: u64 = r.per_module().iter().map(|(_, f)| f).sum();
    assert_eq!(sum, r.total());
    let stage0 = r.module_total("stage0");
    assert_eq!(stage0, r.entries.iter().filter(|e| e.module.starts_with("stage0")).map(|e| e.flops).sum::<u64>());
    // stem of the first stage: 3 -> 16 channels, 3x3, 32x32 output
    assert_eq!(r.get("stage0", "stem"), Some(2 * 16 * 3 * 9 * 32 * 32));
}

// ---- ablation and sweeps ----

#[test]
fn ablation_table_has_four_rows_and_expected_flop_order() {
    let rows = ablation_harness(&ModelConfig::default(), &AblationMode::ALL, None).unwrap();
    assert_eq!(rows.len(), 4);
    let get = |label: &str| rows.iter().find(|r| r.setting == label).unwrap();
    assert!(get("saa+pafc").flops < get("plain_attn+plain_conv").flops);
    assert!(rows.iter().all(|r| r.ap.is_none() && r.params > 0));
}

#[test]
fn gate_sweep_covers_published_grid() {
    let rows = gate_sweep(&ModelConfig::default(), &GATE_SWEEP, None).unwrap();
    assert_eq!(rows.iter().map(|r| r.setting.as_str()).collect::<Vec<_>>(), ["0.3", "0.4", "0.5", "0.6", "0.7"]);
}

#[test]
fn trained_ablation_rows_carry_metrics() {
    let opts = micro_opts(2);
    let rows = ablation_harness(&ModelConfig::micro(), &AblationMode::ALL[..1], Some(&opts)).unwrap();
    assert!(rows[0].ap.is_some() && rows[0].final_loss.unwrap().is_finite());
}

#[test]
fn gate_statistics_at_cold_start() {
    let m = build_model::<f64>(&ModelConfig::micro()).unwrap();
    let st = gate_statistics(&m, &micro_scenes(2, 4)).unwrap().unwrap();
    assert_eq!((st.mean, st.min, st.max), (0.5, 0.5, 0.5));
    let plain = build_model::<f64>(&AblationMode { saa: false, pafc: true }.apply(&ModelConfig::micro())).unwrap();
    assert!(gate_statistics(&plain, &micro_scenes(1, 4)).unwrap().is_none());
}

#[test]
fn latency_bench_reports_positive_timings() {
    let m = build_model::<f32>(&ModelConfig::micro()).unwrap();
    let s = latency_bench(&m, 5, 0).unwrap();
    assert_eq!(s.iters, 5);
    assert!(s.mean_ms > 0.0 && s.fps > 0.0 && s.p95_ms >= s.p50_ms);
}

#[test]
fn detections_from_predictions_are_scored_and_sized() {
    let m = build_model::<f64>(&ModelConfig::micro()).unwrap();
    let scenes = micro_scenes(2, 12);
    let dets = predict_scenes(&m, &scenes, 1).unwrap();
    assert_eq!(dets.len(), 2 * m.cfg.query_count);
    assert!(dets.iter().all(|d| d.score > 0.0 && d.score < 1.0 && (1..=3).contains(&d.category_id)));
    let (rep, _) = evaluate_scenes(&m, &scenes).unwrap();
    assert!((0.0..=1.0).contains(&rep.ap50));
}
