use fluxct_core::image::pair_dataset;
use fluxct_core::nn::network::build_vdsr;
use fluxct_core::nn::{predict, score_pairs, train, warm_start_from, write_weights, Network, TrainConfig};
use fluxct_core::{seed, Image, PairedDataset};
use rand::Rng;

fn noisy_dataset(n: usize, size: usize, s: u64) -> PairedDataset {
    let mut rng = seed::rng(s);
    let mut low = Vec::new();
    let mut high = Vec::new();
    for _ in 0..n {
        let (cx, cy, r) = (
            rng.gen_range(4.0..12.0),
            rng.gen_range(4.0..12.0),
            rng.gen_range(2.0..5.0),
        );
        let clean = Image::from_fn(size, size, |y, x| {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if d < r {
                0.8
            } else {
                0.2
            }
        });
        let noisy = Image::from_fn(size, size, |y, x| clean.get(y, x) + rng.gen_range(-0.15..0.15));
        low.push(noisy);
        high.push(clean);
    }
    pair_dataset(low, high, None, 0.75, s).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        patch_size: Some(8),
        patches_per_image: 4,
        learning_rate: 1e-3,
        ..TrainConfig::desk_preset()
    }
}

fn weight_bytes(net: &Network<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_weights(net, true, &mut buf).unwrap();
    buf
}

fn trained(threads: usize) -> (Network<f32>, Vec<u8>) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let data = noisy_dataset(8, 16, 1);
        let mut net = build_vdsr::<f32>(3, 4).unwrap();
        net.init_scratch(2);
        train(&mut net, &data, &small_cfg()).unwrap();
        let bytes = weight_bytes(&net);
        (net, bytes)
    })
}

#[test]
fn thread_count_does_not_change_weights() {
    assert_eq!(trained(1).1, trained(2).1);
}

#[test]
fn warm_start_reproduces_source_scores() {
    let data = noisy_dataset(8, 16, 3);
    let mut source = build_vdsr::<f32>(3, 4).unwrap();
    source.init_scratch(4);
    let history = train(&mut source, &data, &small_cfg()).unwrap();
    let final_ssim = history.last().unwrap().test_ssim.unwrap();

    let mut warm = build_vdsr::<f32>(3, 4).unwrap();
    warm.init_scratch(99);
    warm_start_from(&mut warm, &source, false).unwrap();
    let test: Vec<_> = data.test_pairs().collect();
    let score = score_pairs(&warm, &test).unwrap();
    assert_eq!(score.after_ssim, final_ssim);

    let cfg = TrainConfig {
        epochs: 0,
        ..small_cfg()
    };
    let h0 = train(&mut warm, &data, &cfg).unwrap();
    assert_eq!(h0.epochs[0].test_ssim, Some(final_ssim));
}

#[test]
fn training_improves_held_out_ssim() {
    let data = noisy_dataset(16, 16, 5);
    let mut net = build_vdsr::<f32>(4, 8).unwrap();
    net.init_scratch(6);
    let cfg = TrainConfig {
        epochs: 15,
        ..small_cfg()
    };
    let h = train(&mut net, &data, &cfg).unwrap();
    let first = h.epochs[0].test_ssim.unwrap();
    let last = h.last().unwrap().test_ssim.unwrap();
    assert!(last > first, "{first} -> {last}");
}

#[test]
fn prediction_is_deterministic_and_clamped() {
    let mut net = build_vdsr::<f32>(3, 4).unwrap();
    net.init_he(8);
    let img = Image::from_fn(12, 12, |r, c| (r * c) as f32 / 50.0 - 0.5);
    let a = predict(&net, &img).unwrap();
    let b = predict(&net, &img).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
