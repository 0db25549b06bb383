use std::fs;
use std::path::Path;
use std::process::Command;

use candle_core::{Device, Tensor, Var};
use rand::Rng;

use latent_edge::autoencoder::{train_autoencoder, training_corpus, Autoencoder, AutoencoderConfig, TrainedAutoencoder};
use latent_edge::config::Config;
use latent_edge::data::{generate_synthetic, read_edge_png, resample_gt_max, write_edge_png, Sample, SyntheticConfig};
use latent_edge::denoiser::{is_self_conjugate_bin, ConditionEncoder, Denoiser, LatentGeometry};
use latent_edge::inference::{predict_batch, Predictor, TIMING_FILE};
use latent_edge::maps::EdgeMap;
use latent_edge::nn::VarStore;
use latent_edge::objective::DecoderPath;
use latent_edge::random::generator;
use latent_edge::train::{cosine_lr, net_checkpoint_path, DiffusionTrainer};

fn dev() -> Device {
    Device::Cpu
}

fn tiny_config() -> Config {
    Config::parse(
        r#"
[autoencoder]
base_width = 8
[ae_training]
epochs = 1
batch_size = 4
[denoiser]
base_width = 8
deep_width = 8
cond_width = 8
time_dim = 16
[augmentation]
crop_size = 32
[tile]
window = 32
stride = 16
[train]
batch_size = 2
iterations = 6
checkpoint_every = 3
lr_start = 1e-3
lr_end = 1e-4
ema_warmup = 2
"#,
    )
    .unwrap()
}

fn tiny_setup() -> (Config, Vec<Sample>, TrainedAutoencoder) {
    let cfg = tiny_config();
    let samples = generate_synthetic(6, 48, &SyntheticConfig::default(), &mut generator(5, 0)).unwrap();
    let corpus = training_corpus(&samples, &cfg.augmentation, cfg.ae_training.crop_size, cfg.train.seed).unwrap();
    let ae = train_autoencoder(&corpus, &cfg.autoencoder, &cfg.ae_training, 0, &dev()).unwrap();
    (cfg, samples, ae)
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn resumed_run_matches_straight_run() {
    let (cfg, samples, ae) = tiny_setup();
    let d = dev();
    let straight = tempfile::tempdir().unwrap();
    let mut a = DiffusionTrainer::new(&cfg, &ae.autoencoder, &samples, &d).unwrap();
    a.run(Some(straight.path()), |_| {}).unwrap();

    let split = tempfile::tempdir().unwrap();
    let mut b = DiffusionTrainer::new(&cfg, &ae.autoencoder, &samples, &d).unwrap();
    for _ in 0..3 {
        b.train_step().unwrap();
    }
    b.save(split.path()).unwrap();
    drop(b);
    let mut c = DiffusionTrainer::resume(&cfg, &ae.autoencoder, &samples, split.path(), 3, &d).unwrap();
    c.run(Some(split.path()), |_| {}).unwrap();

    for name in ["net_6.ckpt", "net_ema_6.ckpt"] {
        let x = fs::read(straight.path().join(name)).unwrap();
        let y = fs::read(split.path().join(name)).unwrap();
        assert!(x == y, "{name} differs after resume");
    }
    let log_a = fs::read_to_string(straight.path().join("train_log.csv")).unwrap();
    let log_c = fs::read_to_string(split.path().join("train_log.csv")).unwrap();
    assert_eq!(log_a.lines().count(), 7);
    assert_eq!(log_a.lines().skip(4).collect::<Vec<_>>(), log_c.lines().skip(1).collect::<Vec<_>>());
}

#[test]
fn autoencoder_stays_frozen_during_diffusion_training() {
    let (cfg, samples, ae) = tiny_setup();
    let before = ae.store.snapshot();
    let mut t = DiffusionTrainer::new(&cfg, &ae.autoencoder, &samples, &dev()).unwrap();
    for _ in 0..3 {
        t.train_step().unwrap();
    }
    for (k, v) in ae.store.snapshot() {
        assert_eq!(flat(&v.flatten_all().unwrap()), flat(&before[&k].flatten_all().unwrap()), "{k}");
    }
}

#[test]
fn ema_mirrors_parameter_shapes() {
    let (cfg, samples, ae) = tiny_setup();
    let mut t = DiffusionTrainer::new(&cfg, &ae.autoencoder, &samples, &dev()).unwrap();
    t.train_step().unwrap();
    let vars = t.store().vars();
    let shadow = t.ema().shadow();
    assert_eq!(vars.len(), shadow.len());
    for (k, v) in vars {
        assert_eq!(v.as_tensor().dims(), shadow[k].dims(), "{k}");
    }
    // warm-up copies the raw weights
    for (k, v) in vars {
        assert_eq!(flat(v.as_tensor()), flat(&shadow[k]), "{k}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let (cfg, samples, ae) = tiny_setup();
    let t = DiffusionTrainer::new(&cfg, &ae.autoencoder, &samples, &dev()).unwrap();
    let (loss, _, _) = t.batch_loss(0).unwrap();
    let grads = loss.backward().unwrap();
    let g = t.net().geometry();
    for (name, var) in t.store().vars() {
        let grad = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("{name}: no gradient"));
        let vals = flat(&grad.flatten_all().unwrap());
        if name.ends_with("weight_im") {
            // imaginary parts of self-conjugate bins are masked out
            let (c, h, l) = (var.as_tensor().dims()[0], g.height, g.width / 2 + 1);
            for ch in 0..c {
                for k in 0..h {
                    for m in 0..l {
                        let v = vals[(ch * h + k) * l + m];
                        assert_eq!(v == 0.0, is_self_conjugate_bin(k, m, h, g.width), "{name}[{ch},{k},{m}]");
                    }
                }
            }
        } else if name.ends_with("weight_re") {
            assert!(vals.iter().all(|v| *v != 0.0), "{name}: zero entry");
        } else {
            let zero = vals.iter().filter(|v| **v == 0.0).count();
            assert!(zero < vals.len(), "{name}: all-zero gradient");
        }
    }
}

#[test]
fn analytic_gradients_track_finite_differences_through_the_network() {
    let (mut cfg, _, ae) = tiny_setup();
    // the distilled path swaps the decoder Jacobian, so compare the exact route
    cfg.train.decoder_path = DecoderPath::Full;
    // 64-px crops keep the bottleneck group norms over more than a handful of
    // values, which keeps the loss close to quadratic at the probe steps
    cfg.augmentation.crop_size = 64;
    cfg.augmentation.random_scale = false;
    cfg.tile.window = 64;
    cfg.tile.stride = 32;
    let samples = generate_synthetic(4, 64, &SyntheticConfig::default(), &mut generator(6, 0)).unwrap();
    let t = DiffusionTrainer::new(&cfg, &ae.autoencoder, &samples, &dev()).unwrap();
    let (loss, _, _) = t.batch_loss(0).unwrap();
    let grads = loss.backward().unwrap();
    // Directional derivative of randomly chosen parameter tensors along
    // (g/|g| + r/|r|), r Gaussian. The loss is an f32 of magnitude ~1 and a
    // central difference resolves about 5e-5, so only tensors with |g| >= 0.05
    // are candidates.
    let mut candidates = Vec::new();
    for (name, var) in t.store().vars() {
        let g = flat(&grads.get(var.as_tensor()).unwrap().flatten_all().unwrap());
        let norm = g.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm >= 5e-2 {
            candidates.push((name.clone(), g, norm));
        }
    }
    assert!(candidates.len() >= 8, "only {} tensors have resolvable gradients", candidates.len());
    let mut rng = generator(77, 0);
    rand::seq::SliceRandom::shuffle(candidates.as_mut_slice(), &mut rng);
    for (name, g, norm) in candidates.iter().take(6) {
        let r: Vec<f64> = (0..g.len()).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut dir: Vec<f64> = g.iter().zip(&r).map(|(a, b)| *a as f64 / norm + b / rn).collect();
        let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= dn);
        let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| *a as f64 * b).sum();

        let var: &Var = &t.store().vars()[name];
        let orig = flat(var.as_tensor());
        let shape = var.as_tensor().dims().to_vec();
        let eval = |delta: f64| {
            let v: Vec<f32> = orig.iter().zip(&dir).map(|(o, d)| (*o as f64 + delta * d) as f32).collect();
            var.set(&Tensor::from_vec(v, shape.as_slice(), &dev()).unwrap()).unwrap();
            let (l, _, _) = t.batch_loss(0).unwrap();
            l.to_scalar::<f32>().unwrap() as f64
        };
        // Richardson-extrapolated central differences over a ladder of steps;
        // the estimate that agrees best with its neighbour sits between the
        // curvature-dominated and the rounding-dominated ends
        let central = |h: f64| (eval(h) - eval(-h)) / (2.0 * h);
        let steps = [1e-3, 2e-3, 4e-3, 8e-3, 1.6e-2, 3.2e-2];
        let c: Vec<f64> = steps.iter().map(|&h| central(h)).collect();
        let rich: Vec<f64> = (0..c.len() - 1).map(|i| (4.0 * c[i] - c[i + 1]) / 3.0).collect();
        let fd = (0..rich.len() - 1)
            .min_by(|&i, &j| (rich[i] - rich[i + 1]).abs().total_cmp(&(rich[j] - rich[j + 1]).abs()))
            .map(|i| rich[i])
            .unwrap();
        eval(0.0);
        let rel = (fd - analytic).abs() / analytic.abs();
        // f32 forward: over 30 tensors the worst disagreement measured 3.5e-3
        assert!(rel < 1e-2, "{name}: analytic {analytic}, finite difference {fd}, rel {rel:.2e}");
    }
}

#[test]
fn shapes_follow_the_stage_strides() {
    let d = dev();
    let mut vs = VarStore::new(0, &d);
    let ae = Autoencoder::new(&mut vs, &AutoencoderConfig::default(), 1.0).unwrap();
    let e = EdgeMap::zeros(320, 320);
    assert_eq!(ae.encode(&e).unwrap().dims(), (4, 80, 80));

    let mut vs = VarStore::new(0, &d);
    let enc = ConditionEncoder::new(&mut vs.scope("cond"), 8).unwrap();
    let image = Tensor::zeros((1, 3, 320, 320), candle_core::DType::F32, &d).unwrap();
    let levels: Vec<Vec<usize>> = enc.forward(&image).unwrap().levels.iter().map(|l| l.dims()[2..].to_vec()).collect();
    assert_eq!(levels, vec![vec![80, 80], vec![40, 40], vec![20, 20]]);
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0, 5000, 5e-5, 5e-6), 5e-5);
    assert!((cosine_lr(5000, 5000, 5e-5, 5e-6) - 5e-6).abs() < 1e-18);
    assert!((cosine_lr(2500, 5000, 5e-5, 5e-6) - 2.75e-5).abs() < 1e-15);
}

#[test]
fn thin_line_survives_downscaling() {
    let e = EdgeMap::from_fn(40, 40, |_, x| if x == 17 { 1.0 } else { 0.0 });
    let small = resample_gt_max(&e, 20, 20);
    for y in 0..20 {
        assert_eq!(small.get(y, 8), 1.0);
    }
}

#[test]
fn synthetic_boundaries_sit_on_shade_changes() {
    let samples = generate_synthetic(4, 64, &SyntheticConfig::default(), &mut generator(8, 0)).unwrap();
    for s in &samples {
        let (h, w) = s.gt.dims();
        for y in 0..h {
            for x in 0..w {
                if s.gt.get(y, x) < 0.5 {
                    continue;
                }
                let mut change = 0f32;
                for (dy, dx) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)] {
                    let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                    if yy < 0 || xx < 0 || yy >= h as i32 || xx >= w as i32 {
                        continue;
                    }
                    for c in 0..3 {
                        change = change.max((s.image.get(c, y, x) - s.image.get(c, yy as usize, xx as usize)).abs());
                    }
                }
                assert!(change > 0.01, "{} ({y}, {x}) has no shade change nearby", s.id);
            }
        }
    }
}

#[test]
fn png_round_trip_within_one_level() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = generator(1, 0);
    let e = EdgeMap::from_fn(9, 13, |_, _| rng.random_range(0.0f32..=1.0));
    let path = dir.path().join("e.png");
    write_edge_png(&path, &e).unwrap();
    let back = read_edge_png(&path).unwrap();
    for (a, b) in e.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn batch_prediction_writes_outputs_and_timing() {
    let (cfg, samples, ae) = tiny_setup();
    let d = dev();
    let mut vs = VarStore::new(3, &d);
    let net = Denoiser::new(&mut vs, &cfg.denoiser, LatentGeometry::for_crop(4, 32).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("in");
    fs::create_dir_all(&inputs).unwrap();
    let mut paths = Vec::new();
    for s in samples.iter().take(3) {
        let p = inputs.join(format!("{}.png", s.id));
        latent_edge::data::write_rgb_png(&p, &s.image).unwrap();
        paths.push(p);
    }
    let broken = inputs.join("broken.png");
    fs::write(&broken, b"not a png").unwrap();
    paths.push(broken);
    let predictor = Predictor {
        ae: &ae.autoencoder,
        net: &net,
        schedule: cfg.diffusion.clone(),
        tile: cfg.tile.clone(),
        device: d.clone(),
    };
    let out = dir.path().join("out");
    let report = predict_batch(&paths, &out, &predictor).unwrap();
    assert_eq!(report.written.len(), 3);
    assert_eq!(report.failed.len(), 1);
    let timing = fs::read_to_string(out.join(TIMING_FILE)).unwrap();
    assert_eq!(timing.lines().count(), 5);
    let last = timing.lines().last().unwrap();
    assert!(last.contains("broken.png") && last.ends_with(",error"), "{last}");
    for p in &report.written {
        let e = read_edge_png(p).unwrap();
        assert_eq!(e.dims(), (48, 48));
    }
    let first: Vec<Vec<u8>> = report.written.iter().map(|p| fs::read(p).unwrap()).collect();
    let again = predict_batch(&paths, &out, &predictor).unwrap();
    let second: Vec<Vec<u8>> = again.written.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(first, second);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latent-edge"))
}

fn status(cmd: &mut Command) -> (i32, String) {
    let out = cmd.output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = status(bin().args(["predict", "--bogus"]));
    assert_eq!(code, 2);
    assert!(err.starts_with("error[usage]"), "{err}");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nbatchsize = 3\n").unwrap();
    let (code, err) = status(bin().args(["train-ae", "--data", "nowhere", "--run"]).arg(dir.path()).arg("--config").arg(&bad));
    assert_eq!(code, 2);
    assert!(err.contains("train.batchsize"), "{err}");

    let (code, err) = status(bin().args(["train-ae", "--data"]).arg(dir.path().join("missing")).arg("--run").arg(dir.path()));
    assert_eq!(code, 1);
    assert!(err.starts_with("error[dataset]"), "{err}");

    let (code, err) = status(
        bin()
            .args(["predict", "--input", "x", "--output", "y", "--window", "32", "--stride", "48", "--checkpoint"])
            .arg(dir.path()),
    );
    assert_eq!(code, 2);
    assert!(err.contains("stride"), "{err}");

    let (code, _) = status(bin().arg("selftest"));
    assert_eq!(code, 0);
}

#[test]
fn cli_refuses_a_changed_config_in_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let run = root.join("run");
    let (code, err) = status(bin().args(["synth-data", "--n", "4", "--size", "32", "--out"]).arg(&data));
    assert_eq!(code, 0, "{err}");
    let cfg_a = root.join("a.toml");
    let cfg_b = root.join("b.toml");
    let base = "[autoencoder]\nbase_width = 8\n[augmentation]\ncrop_size = 32\n[tile]\nwindow = 32\nstride = 16\n";
    fs::write(&cfg_a, format!("{base}[ae_training]\nepochs = 1\n")).unwrap();
    fs::write(&cfg_b, format!("{base}[ae_training]\nepochs = 2\n")).unwrap();
    let train = |cfg: &Path| status(bin().args(["train-ae", "--data"]).arg(&data).arg("--run").arg(&run).arg("--config").arg(cfg));
    assert_eq!(train(&cfg_a).0, 0);
    assert!(run.join("manifest_train-ae.json").is_file());
    let (code, err) = train(&cfg_b);
    assert_eq!(code, 2, "{err}");
    // same config again is fine
    assert_eq!(train(&cfg_a).0, 0);
}

#[test]
fn checkpoint_path_names() {
    assert_eq!(net_checkpoint_path(Path::new("r"), 40), Path::new("r/net_40.ckpt"));
}
