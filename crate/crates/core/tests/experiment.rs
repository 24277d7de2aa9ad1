use std::path::Path;

use pilotforge::experiment::{
    artifact_paths, cmd_eval, cmd_gen_data, cmd_report, cmd_select, cmd_train, load_split,
    read_csv, ExperimentConfig, Layout, PatternSource, SnrWindow, METHOD_CAE, METHOD_MMSE,
};
use pilotforge::Error;

fn tiny(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        out_dir: out.to_path_buf(),
        seed: 11,
        nf: 12,
        nn: 4,
        train_frames: 44,
        val_frames: 4,
        test_frames: 8,
        np_list: vec![4, 6],
        snr_sweep_np: vec![4],
        selector_epochs: 3,
        decoder_epochs: 2,
        e2e_epochs: 2,
        decoder_hidden: vec![12],
        srcnn_channels: [3, 2],
        srcnn_kernels: [3, 1, 3],
        dncnn_depth: 3,
        dncnn_width: 3,
        batch_size: 8,
        ..ExperimentConfig::default()
    }
}

fn run_all(cfg: &ExperimentConfig) {
    cmd_gen_data(cfg).unwrap();
    for &np in &cfg.np_list {
        cmd_select(cfg, np).unwrap();
        cmd_train(cfg, PatternSource::Cae, SnrWindow::Full, np).unwrap();
        cmd_train(cfg, PatternSource::Uniform, SnrWindow::Full, np).unwrap();
    }
    for &np in &cfg.snr_sweep_np {
        cmd_train(cfg, PatternSource::Uniform, SnrWindow::Low, np).unwrap();
        cmd_train(cfg, PatternSource::Uniform, SnrWindow::High, np).unwrap();
    }
    cmd_eval(cfg).unwrap();
}

#[test]
fn default_desk_split_sizes() {
    let cfg = ExperimentConfig::default();
    assert_eq!(
        (cfg.train_frames, cfg.val_frames, cfg.test_frames),
        (3200, 400, 400)
    );
    assert_eq!(cfg.snr_db.len(), 11);
    for np in [8, 16, 32, 48] {
        assert!(cfg.np_list.contains(&np));
    }
}

#[test]
fn gen_data_is_reproducible_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = cmd_gen_data(&cfg).unwrap();
    let bytes = std::fs::read(Layout::new(&cfg).split("train")).unwrap();
    assert_eq!(cmd_gen_data(&cfg).unwrap(), first);
    assert_eq!(
        std::fs::read(Layout::new(&cfg).split("train")).unwrap(),
        bytes
    );
    let train = load_split(&cfg, "train").unwrap();
    assert_eq!(train.len(), 44);

    let bad = ExperimentConfig {
        test_frames: 0,
        ..cfg.clone()
    };
    assert_eq!(cmd_gen_data(&bad).unwrap_err().exit_code(), 1);
    let other = ExperimentConfig { seed: 12, ..cfg };
    assert_ne!(cmd_gen_data(&other).unwrap(), first);
}

#[test]
fn snr_windows_filter_by_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_gen_data(&cfg).unwrap();
    let train = load_split(&cfg, "train").unwrap();
    let low = SnrWindow::Low.apply(&train, cfg.window_split_db).unwrap();
    let high = SnrWindow::High.apply(&train, cfg.window_split_db).unwrap();
    let expect_low = train.records.iter().filter(|r| r.snr_db <= 15.0).count();
    let expect_high = train.records.iter().filter(|r| r.snr_db >= 15.0).count();
    assert_eq!(low.len(), expect_low);
    assert_eq!(high.len(), expect_high);
    assert!(low.records.iter().all(|r| r.snr_db <= 15.0));
    // 44 frames cycle through 11 SNRs: 0..=15 dB is six of them
    assert_eq!(expect_low, 24);
    assert_eq!(SnrWindow::Full.apply(&train, 15.0).unwrap().len(), 44);
    assert!(SnrWindow::Low.apply(&train, -10.0).is_err());
}

#[test]
fn missing_artifacts_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let err = cmd_select(&cfg, 4).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact { .. }), "{err}");
    assert_eq!(err.exit_code(), 1);
    cmd_gen_data(&cfg).unwrap();
    let err = cmd_train(&cfg, PatternSource::Cae, SnrWindow::Full, 4).unwrap_err();
    assert!(err.to_string().contains("pattern"), "{err}");
    let err = cmd_eval(&cfg).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact { .. }), "{err}");
    assert!("diamond".parse::<PatternSource>().is_err());
    assert!("mid".parse::<SnrWindow>().is_err());
    assert!(cmd_select(&cfg, 5).is_err());
}

#[test]
fn full_protocol_is_byte_reproducible() {
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    let a = tiny(a_dir.path());
    let b = tiny(b_dir.path());
    run_all(&a);
    run_all(&b);
    let pa = artifact_paths(&a);
    let pb = artifact_paths(&b);
    assert_eq!(pa.len(), 3 + 1 + 2 * 2 + 2 * 2 + 2);
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(
            std::fs::read(x).unwrap(),
            std::fs::read(y).unwrap(),
            "{} differs",
            x.display()
        );
    }
    let ra = std::fs::read(Layout::new(&a).report_csv()).unwrap();
    assert_eq!(ra, std::fs::read(Layout::new(&b).report_csv()).unwrap());

    let trained: Vec<Vec<u8>> = [
        (PatternSource::Cae, SnrWindow::Full),
        (PatternSource::Uniform, SnrWindow::Low),
        (PatternSource::Uniform, SnrWindow::High),
    ]
    .iter()
    .map(|&(s, w)| std::fs::read(Layout::new(&a).pipeline(s, w, 4)).unwrap())
    .collect();
    assert!(trained[0] != trained[1] && trained[1] != trained[2] && trained[0] != trained[2]);

    let rows = read_csv(&Layout::new(&a).report_csv()).unwrap();
    for method in [
        METHOD_CAE,
        "ls-decoder",
        "uniform-full",
        "uniform-low",
        "uniform-high",
        METHOD_MMSE,
    ] {
        let n = rows
            .iter()
            .filter(|r| r.method == method && r.np == 4)
            .count();
        assert_eq!(n, 11, "{method} has {n} SNR rows");
    }
    for np in [4, 6] {
        assert!(rows
            .iter()
            .any(|r| r.method == METHOD_CAE && r.np == np && r.snr_db == 15.0));
    }
    assert!(rows.iter().all(|r| r.frames == 8));

    let out = a_dir.path().join("figures");
    let written = cmd_report(&Layout::new(&a).report_csv(), &[], &out).unwrap();
    let first: Vec<Vec<u8>> = written.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let again = cmd_report(&Layout::new(&a).report_csv(), &[], &out).unwrap();
    assert_eq!(written, again);
    for (p, bytes) in again.iter().zip(&first) {
        assert_eq!(&std::fs::read(p).unwrap(), bytes);
    }
    assert!(written
        .iter()
        .any(|p| p.ends_with("snr-np4-cae-channelnet.dat")));
    assert!(written
        .iter()
        .any(|p| p.ends_with("np-snr15-cae-channelnet.dat")));
}

#[test]
fn malformed_report_csv_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "method,np\ncae,8\n").unwrap();
    let err = cmd_report(&csv, &[], &dir.path().join("out")).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["smoke.toml", "desk.toml"] {
        let cfg = ExperimentConfig::load(&dir.join(name)).unwrap();
        assert_eq!(cfg.snr_db.len(), 11, "{name}");
    }
    let desk = ExperimentConfig::load(&dir.join("desk.toml")).unwrap();
    assert_eq!((desk.train_frames, desk.test_frames), (3200, 400));
    assert!(desk.np_list.contains(&8) && desk.np_list.contains(&48));
}
