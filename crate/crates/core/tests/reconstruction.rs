use fluxct_core::phantom::disk_phantom;
use fluxct_core::recon::{cgls_tracked, reconstruct, sirt_tracked};
use fluxct_core::tomo::{as_attenuation, backproject, forward_project};
use fluxct_core::{seed, Geometry, Image, Projector, ReconConfig, Sinogram, Stage};
use proptest::prelude::*;
use rand::Rng;

fn random_image(s: u64, n: usize) -> Image {
    let mut rng = seed::rng(s);
    Image::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))
}

fn rmse(a: &Image, b: &Image) -> f64 {
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    (sq / a.len() as f64).sqrt()
}

fn noiseless(img: &Image, geo: &Geometry) -> Sinogram {
    as_attenuation(&forward_project(img, geo).unwrap()).unwrap()
}

#[test]
fn projector_is_linear() {
    let geo = Geometry::covering(32, 24).unwrap();
    let (x, y) = (random_image(1, 32), random_image(2, 32));
    let (a, b) = (0.7f32, -1.3f32);
    let combo = Image::from_fn(32, 32, |r, c| a * x.get(r, c) + b * y.get(r, c));
    let (px, py, pc) = (
        forward_project(&x, &geo).unwrap(),
        forward_project(&y, &geo).unwrap(),
        forward_project(&combo, &geo).unwrap(),
    );
    let scale = pc.data.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
    for i in 0..pc.data.len() {
        let lin = a * px.data[i] + b * py.data[i];
        assert!(
            (pc.data[i] - lin).abs() <= 1e-5 * scale,
            "bin {i}: {} vs {lin}",
            pc.data[i]
        );
    }
}

#[test]
fn adjoint_identity_on_32() {
    let geo = Geometry::covering(32, 40).unwrap();
    let p = Projector::new(&geo).unwrap();
    let mut rng = seed::rng(3);
    for _ in 0..5 {
        let x: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..geo.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = p.forward(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(p.adjoint(&y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn backprojection_matches_adjoint() {
    let geo = Geometry::covering(24, 16).unwrap();
    let mut rng = seed::rng(4);
    let data: Vec<f32> = (0..geo.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sino = Sinogram::new(geo.clone(), Stage::Attenuation, data.clone()).unwrap();
    let bp = backproject(&sino).unwrap();
    let reference = Projector::new(&geo)
        .unwrap()
        .adjoint(&data.iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
    for (a, b) in bp.data().iter().zip(&reference) {
        assert!((f64::from(*a) - b).abs() < 1e-4);
    }
}

#[test]
fn all_solvers_recover_the_disk() {
    let geo = Geometry::desk_default();
    let truth = disk_phantom(128, 40.0, 1.0);
    let sino = noiseless(&truth, &geo);
    let (lo, hi) = truth.min_max();
    let range = f64::from(hi - lo);
    for cfg in [ReconConfig::fbp(), ReconConfig::sirt(200), ReconConfig::cgls(30)] {
        let img = reconstruct(&sino, &cfg, None).unwrap().image;
        let e = rmse(&img, &truth) / range;
        assert!(e < 0.05, "{:?}: relative rmse {e}", cfg.algorithm);
    }
}

#[test]
fn cgls_residual_never_above_sirt() {
    let geo = Geometry::covering(48, 60).unwrap();
    let sino = noiseless(&disk_phantom(48, 15.0, 1.0), &geo);
    let unclamped = |cfg: ReconConfig| ReconConfig {
        nonneg_clamp: false,
        ..cfg
    };
    let s = sirt_tracked(&sino, &unclamped(ReconConfig::sirt(30)), None).unwrap();
    let c = cgls_tracked(&sino, &unclamped(ReconConfig::cgls(30)), None).unwrap();
    for (a, b) in c.log.iter().zip(&s.log) {
        assert_eq!(a.iteration, b.iteration);
        assert!(
            a.residual_norm <= b.residual_norm * (1.0 + 1e-9),
            "iteration {}: cgls {} sirt {}",
            a.iteration,
            a.residual_norm,
            b.residual_norm
        );
    }
}

#[test]
fn truth_feeds_the_convergence_log() {
    let geo = Geometry::covering(32, 30).unwrap();
    let truth = disk_phantom(32, 10.0, 1.0);
    let rec = reconstruct(&noiseless(&truth, &geo), &ReconConfig::cgls(10), Some(&truth)).unwrap();
    let first = rec.log.first().unwrap().rmse_vs_truth.unwrap();
    let last = rec.log.last().unwrap().rmse_vs_truth.unwrap();
    assert!(last < first);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn adjoint_holds_for_any_geometry(s in any::<u64>(), n in 4usize..24, views in 1usize..20) {
        let geo = Geometry::covering(n, views).unwrap();
        let p = Projector::new(&geo).unwrap();
        let mut rng = seed::rng(s);
        let x: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..geo.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = p.forward(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(p.adjoint(&y)).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }
}
