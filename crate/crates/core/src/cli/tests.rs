use super::*;

#[test]
fn empty_config_uses_defaults() {
    let cfg = RunConfig::from_toml("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.blur.kernel_sizes, vec![3, 9, 15, 21]);
    assert_eq!(cfg.ksame.k_values, vec![3, 6, 9, 12]);
    assert_eq!(cfg.pprlvgan.averaging_n, 6);
    assert_eq!(cfg.pprlvgan.train.lambda_g, [0.5, 0.5, 0.5, 0.002]);
}

#[test]
fn unknown_key_is_named() {
    let err = RunConfig::from_toml("[blur]\nkernel_size = [3]\n").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("kernel_size"), "{err}");
    assert_eq!(exit_code(&err), 2);

    let err = RunConfig::from_toml("[pprlvgan.train]\nseed = 3\n").unwrap_err();
    assert!(err.to_string().contains("seed"), "{err}");
}

#[test]
fn dataset_source_must_be_unique() {
    let both = "[dataset]\nmanifest = \"m.csv\"\n[dataset.synth]\nn_identities = 4\nimages_per_identity = 2\npathology_fraction = 0.5\n";
    assert!(matches!(RunConfig::from_toml(both), Err(Error::Config(_))));
    let neither = "[dataset]\n";
    assert!(matches!(RunConfig::from_toml(neither), Err(Error::Config(_))));
    let manifest = RunConfig::from_toml("[dataset]\nmanifest = \"m.csv\"\n").unwrap();
    assert!(manifest.dataset.synth.is_none());
}

#[test]
fn nested_sections_parse() {
    let text = r#"
seed = 5
[split]
seed = 9
[blur]
sigma = 1.5
[pprlvgan]
policies = ["random", { fixed = 3 }]
[pprlvgan.train]
epochs = 2
non_saturating = true
[pprlvgan.train.gen_optimizer]
kind = "adam"
learning_rate = 0.001
"#;
    let cfg = RunConfig::from_toml(text).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.split.seed, Some(9));
    assert_eq!(cfg.blur.sigma, Sigma::Fixed(1.5));
    assert_eq!(cfg.pprlvgan.policies[1], ReplacementPolicy::Fixed(3));
    assert_eq!(cfg.pprlvgan.train.epochs, 2);
    assert!(cfg.pprlvgan.train.non_saturating);
    assert_eq!(cfg.pprlvgan.train.gen_optimizer.learning_rate, 0.001);
    assert_eq!(cfg.pprlvgan.train.batch_size, TrainingHyperparams::default().batch_size);
}

#[test]
fn invalid_values_are_config_errors() {
    for text in [
        "[blur]\nkernel_sizes = [4]\n",
        "[ksame]\nk_values = [0]\n",
        "[pprlvgan]\naveraging_n = 0\n",
        "[pprlvgan.train]\nbatch_size = 0\n",
        "[dataset.synth]\nn_identities = 1\nimages_per_identity = 2\npathology_fraction = 0.5\n",
    ] {
        let err = RunConfig::from_toml(text).unwrap_err();
        assert_eq!(exit_code(&err), 2, "{text}: {err}");
    }
}

#[test]
fn hash_ignores_out_dir_only() {
    let a = RunConfig::default();
    let b = RunConfig {
        out_dir: "elsewhere".into(),
        ..a.clone()
    };
    let c = RunConfig { seed: 43, ..a.clone() };
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 12);
    assert!(Layout::new(&a).report().to_string_lossy().contains(&a.hash()));
}

#[test]
fn round_trip_through_toml() {
    let cfg = RunConfig::default();
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
}

#[test]
fn default_experiments_follow_table_layout() {
    let ex = experiments(&RunConfig::default());
    // Baseline row is added by evaluate, for 14 in total.
    assert_eq!(ex.len(), 13);
    let groups: Vec<&str> = ex.iter().map(|e| e.group).collect();
    assert_eq!(&groups[..5], ["PPRL-VGAN"; 5]);
    assert_eq!(&groups[5..9], ["Blurring"; 4]);
    assert_eq!(&groups[9..], ["K-Same-Select"; 4]);
    assert_eq!(ex[3].kind, SetKind::GanAveraged(ReplacementPolicy::Random, 6));
    assert_eq!(ex[8].label, "Privatized set with kernel size 21");
    let mut names: Vec<&str> = ex.iter().map(|e| e.set_name.as_str()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), 13);
}

#[test]
fn exit_codes() {
    assert_eq!(exit_code(&Error::MissingArtifact("x".into())), 3);
    assert_eq!(exit_code(&Error::Numerical("nan".into())), 4);
    assert_eq!(exit_code(&Error::Config("k".into())), 2);
    assert_eq!(exit_code(&Error::Checkpoint("bad".into())), 1);
}

#[test]
fn report_without_evaluation_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out_dir: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    let layout = Layout::new(&cfg);
    let csv = cmd_report(&layout).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert_eq!(fs::read_to_string(layout.report()).unwrap(), csv);
}

#[test]
fn stages_name_missing_upstream_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out_dir: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    let layout = Layout::new(&cfg);
    match cmd_evaluate(&cfg, &layout) {
        Err(Error::MissingArtifact(p)) => assert_eq!(p, layout.classifier(Target::Identity)),
        other => panic!("{other:?}"),
    }
    match cmd_train_gan(&cfg, &layout) {
        Err(Error::MissingArtifact(p)) => assert_eq!(p, layout.split_manifest("train")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn env_and_flags_override_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "seed = 1\nout_dir = \"a\"\n").unwrap();
    let cli = Cli::try_parse_from(["privcase", "--config", path.to_str().unwrap(), "--seed", "7", "report"]).unwrap();
    let cfg = resolve_config(&cli).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.out_dir, PathBuf::from("a"));
}
