use std::fs;
use std::path::Path;
use std::process::Command;

use fluxct_cli::commands::{
    cmd_closed_loop, cmd_eval, cmd_generate, cmd_train, cmd_transfer_study, EVAL_FILE, WEIGHTS_FILE,
};
use fluxct_cli::store::{read_column, OutputLock, MANIFEST};
use fluxct_cli::{ExperimentConfig, Run};
use fluxct_core::nn::network::build_vdsr;
use fluxct_core::nn::save_weights;

fn smoke(dir: &Path) -> Run {
    Run::new(ExperimentConfig::smoke(), dir)
}

fn read_all(dir: &Path, sub: &str) -> Vec<Vec<u8>> {
    let mut names: Vec<_> = fs::read_dir(dir.join(sub))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    names.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn generate_is_reproducible_and_seed_sensitive() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    cmd_generate(&smoke(a.path())).unwrap();
    cmd_generate(&smoke(b.path())).unwrap();
    let mut other = smoke(c.path());
    other.config.seed += 1;
    cmd_generate(&other).unwrap();
    for sub in ["truth", "low", "high", "sino"] {
        assert_eq!(read_all(a.path(), sub), read_all(b.path(), sub), "{sub}");
        assert_ne!(read_all(a.path(), sub), read_all(c.path(), sub), "{sub}");
    }
    assert_eq!(
        fs::read(a.path().join(MANIFEST)).unwrap(),
        fs::read(b.path().join(MANIFEST)).unwrap()
    );
}

#[test]
fn manifest_rows_carry_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let run = smoke(dir.path());
    let rows = cmd_generate(&run).unwrap();
    let path = dir.path().join(MANIFEST);
    let seeds = read_column(&path, "seed").unwrap();
    let hashes = read_column(&path, "config_hash").unwrap();
    assert_eq!(seeds.len(), rows.len());
    assert!(seeds.iter().all(|s| *s == run.config.seed.to_string()));
    assert!(hashes.iter().all(|h| *h == run.config.hash()));
    assert!(rows.iter().all(|r| r.noise_std_low > r.noise_std_high));
}

#[test]
fn identity_network_leaves_scores_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let run = smoke(dir.path());
    cmd_generate(&run).unwrap();
    let mut net = run.config.network.build().unwrap();
    net.init_scratch(1);
    let weights = dir.path().join("identity.nnwt");
    save_weights(&net, false, &weights).unwrap();
    let report = cmd_eval(&run.with_weights(&weights)).unwrap();
    assert!(!report.rows.is_empty());
    for r in &report.rows {
        assert_eq!(r.before_psnr, r.after_psnr);
        assert_eq!(r.before_ssim, r.after_ssim);
    }
    let tiles = read_column(&dir.path().join(EVAL_FILE), "tile").unwrap();
    assert_eq!(tiles.last().map(String::as_str), Some("mean"));
    assert_eq!(tiles.len(), report.rows.len() + 1);
}

#[test]
fn warm_start_topology_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = smoke(dir.path());
    cmd_generate(&run).unwrap();
    let other = dir.path().join("other.nnwt");
    save_weights(&build_vdsr::<f32>(4, 8).unwrap(), false, &other).unwrap();
    run.config.train.warm_start = Some(other);
    let err = format!("{:#}", cmd_train(&run).unwrap_err());
    assert!(err.contains("warm start"), "{err}");
    assert!(err.contains("layer"), "{err}");
}

#[test]
fn invalid_transfer_grids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = smoke(dir.path());
    run.config.transfer.grid.clear();
    assert!(cmd_transfer_study(&run).is_err());
    let text = ExperimentConfig::smoke().render().replace("grid = 2, 4", "grid = 0, 4");
    assert!(ExperimentConfig::parse(&text).is_err());
}

#[test]
fn busy_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let _held = OutputLock::acquire(dir.path()).unwrap();
    let err = cmd_generate(&smoke(dir.path())).unwrap_err();
    assert!(format!("{err:#}").contains("in use"));
}

#[test]
fn commands_name_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let err = format!("{:#}", cmd_train(&smoke(dir.path())).unwrap_err());
    assert!(err.contains("fluxct generate"), "{err}");
    let err = format!("{:#}", cmd_eval(&smoke(dir.path())).unwrap_err());
    assert!(err.contains("--weights"), "{err}");
}

#[test]
fn noiseless_closed_loop_has_no_margin() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = smoke(dir.path());
    run.config.exposure.i0_reference = 1e13;
    cmd_generate(&run).unwrap();
    cmd_train(&run).unwrap();
    let report = cmd_closed_loop(&run.clone().with_weights(dir.path().join(WEIGHTS_FILE))).unwrap();
    assert!((report.high.ssim - report.low.ssim).abs() < 0.02, "{report:?}");
    assert!((report.net.ssim - report.high.ssim).abs() < 0.02, "{report:?}");
}

#[test]
fn binary_round_trips_its_config_and_runs() {
    let exe = env!("CARGO_BIN_EXE_fluxct");
    let out = Command::new(exe).arg("print-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), ExperimentConfig::default());

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.ini");
    fs::write(&cfg, ExperimentConfig::smoke().render()).unwrap();
    let data = dir.path().join("data");
    let generate = Command::new(exe)
        .args(["generate", "--quiet", "--threads", "1", "--seed", "5", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert!(generate.status.success());
    assert!(String::from_utf8_lossy(&generate.stdout).starts_with("generated 4 images"));
    assert_eq!(read_column(&data.join(MANIFEST), "seed").unwrap()[0], "5");

    let bad = Command::new(exe).args(["eval", "--out"]).arg(&data).output().unwrap();
    assert!(!bad.status.success());
    let missing = Command::new(exe)
        .args(["train", "--quiet", "--out"])
        .arg(dir.path().join("empty"))
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}

#[test]
fn shipped_run_files_match_their_presets() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let load = |name: &str| ExperimentConfig::load(&configs.join(name)).unwrap().render();
    assert_eq!(load("desk.ini"), ExperimentConfig::default().render());
    assert_eq!(load("smoke.ini"), ExperimentConfig::smoke().render());
    let mut moderate = ExperimentConfig::default();
    moderate.exposure.attenuation_scale = 0.02;
    assert_eq!(load("loss-study.ini"), moderate.render());
}
