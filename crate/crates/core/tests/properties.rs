use candle_core::{Device, Tensor, Var};
use proptest::prelude::*;

use latent_edge::checkpoint::Checkpoint;
use latent_edge::config::Config;
use latent_edge::data::{flip_horizontal, generate_synthetic, SyntheticConfig};
use latent_edge::denoiser::{adaptive_fft_filter, FilterWeights};
use latent_edge::diffusion::{
    forward_sample, make_training_targets, predicted_z0, DenoiserOutput, TransitionSchedule,
};
use latent_edge::eval::{average_crispness, match_edges, nms_thin, precision_recall_f};
use latent_edge::inference::{coverage_counts, TileConfig};
use latent_edge::maps::EdgeMap;
use latent_edge::objective::{class_balance, wce_loss, wce_loss_logits_tensor, wce_loss_tensor, WceConfig};
use latent_edge::random;

fn dev() -> Device {
    Device::Cpu
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

fn edge_map(h: usize, w: usize, seed: u64, density: f64) -> EdgeMap {
    use rand::Rng;
    let mut rng = random::generator(seed, 7);
    EdgeMap::from_fn(h, w, |_, _| {
        if rng.random_bool(density) {
            rng.random_range(0.0..=1.0f32)
        } else {
            0.0
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn schedule_grid_strictly_decreasing(n in 1usize..120, t_min in 1e-5f64..0.5) {
        let s = TransitionSchedule { t_min, num_steps: n, ..Default::default() };
        let g = s.grid();
        prop_assert_eq!(g.len(), n);
        prop_assert_eq!(g[0], 1.0);
        prop_assert!(g.windows(2).all(|p| p[0] > p[1]));
        if n > 1 {
            prop_assert_eq!(*g.last().unwrap(), t_min);
        }
        let steps = s.steps();
        prop_assert_eq!(steps.last().unwrap().0, steps.last().unwrap().1);
    }

    #[test]
    fn targets_invert_forward_process(seed in any::<u64>()) {
        let mut rng = random::generator(seed, 0);
        let z0 = random::standard_normal(&[3, 2, 4, 4], &mut rng, &dev()).unwrap();
        let tt = make_training_targets(&z0, 1e-4, &mut rng).unwrap();
        prop_assert_eq!(flat(&tt.f_target), flat(&z0.neg().unwrap()));
        for (i, &t) in tt.t.iter().enumerate() {
            prop_assert!(t > 1e-4 && t <= 1.0);
            if t < 0.999 {
                let zt = tt.z_t.get(i).unwrap();
                let n = tt.n_target.get(i).unwrap();
                let rec = ((zt - (n * t.sqrt()).unwrap()).unwrap() / (1.0 - t)).unwrap();
                for (a, b) in flat(&rec).iter().zip(flat(&z0.get(i).unwrap())) {
                    prop_assert!((a - b).abs() <= 1e-3 * (1.0 + b.abs()) / (1.0 - t) as f32);
                }
            }
        }
    }

    #[test]
    fn predicted_z0_inverts_forward(seed in any::<u64>(), t in 0.01f64..=1.0) {
        let mut rng = random::generator(seed, 1);
        let z0 = random::standard_normal(&[1, 4, 5, 5], &mut rng, &dev()).unwrap();
        let n = random::standard_normal(&[1, 4, 5, 5], &mut rng, &dev()).unwrap();
        let zt = forward_sample(&z0, t, &n).unwrap();
        let out = DenoiserOutput { f_pred: z0.neg().unwrap(), n_pred: n };
        let rec = predicted_z0(&zt, &[t], &out).unwrap();
        for (a, b) in flat(&rec).iter().zip(flat(&z0)) {
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn filter_branch_is_linear(
        seed in any::<u64>(),
        h in 2usize..9,
        w in 2usize..9,
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let l = w / 2 + 1;
        let mut rng = random::generator(seed, 2);
        let weights = FilterWeights {
            re: random::standard_normal(&[2, h, l], &mut rng, &dev()).unwrap(),
            im: random::standard_normal(&[2, h, l], &mut rng, &dev()).unwrap(),
        };
        let f1 = random::standard_normal(&[1, 2, h, w], &mut rng, &dev()).unwrap();
        let f2 = random::standard_normal(&[1, 2, h, w], &mut rng, &dev()).unwrap();
        let branch = |x: &Tensor| (adaptive_fft_filter(x, &weights).unwrap() - x).unwrap();
        let mix = ((&f1 * a).unwrap() + (&f2 * b).unwrap()).unwrap();
        let lhs = flat(&branch(&mix));
        let rhs = ((branch(&f1) * a).unwrap() + (branch(&f2) * b).unwrap()).unwrap();
        let rhs = flat(&rhs);
        for (x, y) in lhs.iter().zip(&rhs) {
            prop_assert!((x - y).abs() <= 1e-4, "{x} vs {y}");
        }
        let out = branch(&mix);
        prop_assert_eq!(out.dims(), mix.dims());
    }

    #[test]
    fn wce_ignore_band_has_zero_gradient(seed in any::<u64>(), h in 2usize..7, w in 2usize..7) {
        let gt = edge_map(h, w, seed, 0.6);
        let pred = edge_map(h, w, seed ^ 1, 1.0);
        let cfg = WceConfig::default();
        let p = Var::from_tensor(&pred.to_tensor(&dev()).unwrap()).unwrap();
        let g = gt.to_tensor(&dev()).unwrap();
        let (sums, _) = wce_loss_tensor(p.as_tensor(), &g, &cfg).unwrap();
        let grads = sums.sum_all().unwrap().backward().unwrap();
        let grad = flat(grads.get(p.as_tensor()).unwrap());
        for (i, &gv) in gt.data().iter().enumerate() {
            if gv > 0.0 && (gv as f64) < cfg.eta {
                prop_assert_eq!(grad[i], 0.0);
            }
        }
        prop_assert!(wce_loss(&pred, &gt, &cfg).unwrap() >= 0.0);
    }

    #[test]
    fn logit_wce_matches_probability_wce(seed in any::<u64>(), h in 2usize..7, w in 2usize..7) {
        let gt = edge_map(h, w, seed, 0.6);
        let mut rng = random::generator(seed, 2);
        let x: Vec<f32> = (0..h * w).map(|_| rand::Rng::random_range(&mut rng, -6.0f32..6.0)).collect();
        let probs = EdgeMap::new(h, w, x.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()).unwrap();
        let cfg = WceConfig::default();
        let logits = Tensor::from_vec(x, (1, 1, h, w), &dev()).unwrap();
        let (sums, _) = wce_loss_logits_tensor(&logits, &gt.to_tensor(&dev()).unwrap(), &cfg).unwrap();
        let got = sums.to_vec1::<f32>().unwrap()[0] as f64;
        let want = wce_loss(&probs, &gt, &cfg).unwrap();
        prop_assert!((got - want).abs() <= 1e-4 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn class_balance_moves_with_edges(pos in 1usize..500, neg in 1usize..500, lambda in 0.1f64..3.0) {
        let (a1, b1) = class_balance(pos, neg, lambda);
        let (a2, b2) = class_balance(2 * pos, neg, lambda);
        prop_assert!(a2 > a1);
        prop_assert!(b2 < b1);
    }

    #[test]
    fn flips_preserve_label_classes(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let e = edge_map(h, w, seed, 0.5);
        let f = flip_horizontal(&e);
        let eta = 0.3f32;
        for y in 0..h {
            for x in 0..w {
                let (a, b) = (e.get(y, x), f.get(y, w - 1 - x));
                prop_assert_eq!(a, b);
                prop_assert_eq!(a == 0.0, b == 0.0);
                prop_assert_eq!(a >= eta, b >= eta);
            }
        }
        prop_assert_eq!(flip_horizontal(&f), e);
    }

    #[test]
    fn tiles_cover_every_pixel(h in 1usize..700, w in 1usize..700, k in 1usize..6, frac in 0.1f64..=1.0) {
        let window = 16 * k;
        let stride = ((window as f64 * frac) as usize).max(1);
        let tile = TileConfig { window, stride, ..Default::default() };
        let (hh, ww) = (h.max(window), w.max(window));
        prop_assert!(coverage_counts(hh, ww, &tile).iter().all(|&c| c >= 1));
    }

    #[test]
    fn match_counts_are_bounded(seed in any::<u64>(), h in 2usize..14, w in 2usize..14, r in 0.0f64..3.0) {
        let p = edge_map(h, w, seed, 0.3).binarize(0.5);
        let g = edge_map(h, w, seed ^ 9, 0.3).binarize(0.5);
        let c = match_edges(&p, &g, h, w, r);
        let np = p.iter().filter(|&&b| b).count();
        let ng = g.iter().filter(|&&b| b).count();
        prop_assert_eq!(c.tp + c.fp, np);
        prop_assert_eq!(c.tp + c.fn_, ng);
        prop_assert!(c.tp <= np.min(ng));
        let (pr, rc, f) = precision_recall_f(c);
        for v in [pr, rc, f] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn crispness_in_unit_interval(seed in any::<u64>(), h in 3usize..20, w in 3usize..20, d in 0.0f64..1.0) {
        let e = edge_map(h, w, seed, d);
        let ac = average_crispness(&e);
        prop_assert!((0.0..=1.0).contains(&ac), "{ac}");
        prop_assert!(nms_thin(&e).sum() <= e.sum() + 1e-9);
    }

    #[test]
    fn config_round_trips(
        lambda in 0.1f64..5.0,
        eta in 0.01f64..0.99,
        steps in 1usize..100,
        stride in 1usize..=320,
        seed in 0u64..1_000_000,
        iters in 1usize..100_000,
    ) {
        let mut cfg = Config::default();
        cfg.wce.lambda = lambda;
        cfg.wce.eta = eta;
        cfg.diffusion.num_steps = steps;
        cfg.tile.stride = stride;
        cfg.train.seed = seed;
        cfg.train.iterations = iters;
        let s = cfg.to_toml();
        let back = Config::parse(&s).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml(), s);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = random::generator(seed, 3);
        let mut tensors = std::collections::BTreeMap::new();
        for i in 0..n {
            tensors.insert(format!("t{i}"), random::standard_normal(&[i + 1, 3], &mut rng, &dev()).unwrap());
        }
        let c = Checkpoint::new("k", serde_json::json!({"seed": seed}), tensors);
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem"), &dev()).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn synthetic_gt_is_thin(seed in any::<u64>()) {
        let s = generate_synthetic(2, 64, &SyntheticConfig::default(), &mut random::generator(seed, 0)).unwrap();
        for sample in &s {
            let thin = nms_thin(&sample.gt);
            prop_assert_eq!(thin.binarize(0.5), sample.gt.binarize(0.5));
        }
    }
}

#[test]
fn thin_predictions_score_equally_under_both_protocols() {
    use latent_edge::eval::{evaluate, MatchConfig};
    let s = generate_synthetic(4, 64, &SyntheticConfig::default(), &mut random::generator(5, 0)).unwrap();
    let gts: Vec<EdgeMap> = s.iter().map(|x| x.gt.clone()).collect();
    let ids: Vec<String> = s.iter().map(|x| x.id.clone()).collect();
    let r = evaluate(&gts, &gts, &ids, &MatchConfig::default()).unwrap();
    assert!((r.ods_seval - r.ods_ceval).abs() < 0.02, "{} vs {}", r.ods_seval, r.ods_ceval);
    assert!(r.ois_seval >= r.ods_seval && r.ois_ceval >= r.ods_ceval);
}

#[test]
fn zero_filter_leaves_network_unchanged() {
    use latent_edge::denoiser::{Denoiser, DenoiserConfig, FilterPlacement, LatentGeometry};
    use latent_edge::diffusion::Denoise;
    use latent_edge::nn::VarStore;
    let g = LatentGeometry::for_crop(4, 32).unwrap();
    let build = |placement| {
        let mut vs = VarStore::new(3, &dev());
        let cfg = DenoiserConfig { filter_placement: placement, ..Default::default() };
        let net = Denoiser::new(&mut vs, &cfg, g).unwrap();
        (vs, net)
    };
    let (_a, with) = build(FilterPlacement::HeadAndBottleneck);
    let (_b, without) = build(FilterPlacement::None);
    let mut rng = random::generator(4, 0);
    let image = random::uniform(&[2, 3, 32, 32], 1.0, &mut rng, &dev()).unwrap().abs().unwrap();
    let z = random::standard_normal(&[2, 4, 8, 8], &mut rng, &dev()).unwrap();
    let out_a = with.denoise(&z, &[0.3, 0.7], &with.encode_condition(&image).unwrap()).unwrap();
    let out_b = without.denoise(&z, &[0.3, 0.7], &without.encode_condition(&image).unwrap()).unwrap();
    for (x, y) in flat(&out_a.f_pred).iter().zip(flat(&out_b.f_pred)) {
        assert!((x - y).abs() <= 1e-5);
    }
    assert_eq!(out_a.n_pred.dims(), z.dims());
}
