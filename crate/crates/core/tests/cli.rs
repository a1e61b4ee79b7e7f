//! Runs the `privcase` binary and checks exit codes, messages and artifacts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[dataset.synth]
n_identities = 24
images_per_identity = 6
resolution = 16
pathology_fraction = 0.5

[pprlvgan.train]
epochs = 1
base_channels = 2
latent_dim = 4
batch_size = 8

[classifier]
epochs = 2
base_channels = 2

[saliency]
count = 3
"#;

fn privcase(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privcase"))
        .args(args)
        .current_dir(dir)
        .env_remove("PRIVCASE_OUT_DIR")
        .env_remove("PRIVCASE_SEED")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn find(dir: &Path, prefix: &str, suffix: &str) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(prefix) && n.ends_with(suffix))
        .collect();
    names.sort();
    names
}

#[test]
fn help_documents_environment_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = privcase(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PRIVCASE_OUT_DIR") && text.contains("PRIVCASE_SEED"), "{text}");
    for cmd in ["synth", "ingest", "train-gan", "train-classifier", "privatize", "evaluate", "saliency", "report", "pipeline"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn unknown_config_key_exits_2_and_names_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[ksame]\nk_vals = [3]\n");
    let out = privcase(dir.path(), &["--config", &cfg, "report"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("k_vals"), "{}", stderr(&out));
}

#[test]
fn missing_upstream_artifact_exits_3_and_names_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = privcase(dir.path(), &["--out-dir", "o", "train-gan"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("train.csv"), "{}", stderr(&out));

    let out = privcase(dir.path(), &["--out-dir", "o", "evaluate"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("classifier-identity-"), "{}", stderr(&out));
}

#[test]
fn report_without_evaluation_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = privcase(dir.path(), &["--out-dir", "o", "report"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        "experiment,dataset,identity_acc,replacement_acc,source_leakage_acc,task_acc,task_f1\n"
    );
    assert_eq!(find(&dir.path().join("o"), "report-", ".csv").len(), 1);
}

#[test]
fn infeasible_k_exits_2_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[dataset.synth]\nn_identities = 8\nimages_per_identity = 4\nresolution = 16\npathology_fraction = 0.5\n",
    );
    let out = privcase(dir.path(), &["--config", &cfg, "--out-dir", "o", "pipeline"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("pathology class"), "{}", stderr(&out));
    assert!(find(&dir.path().join("o"), "classifier-", "").is_empty());
}

#[test]
fn diverging_gan_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{SMALL}\n[pprlvgan.train.gen_optimizer]\nkind = \"sgd\"\nlearning_rate = 1e30\n\
         [pprlvgan.train.disc_optimizer]\nkind = \"sgd\"\nlearning_rate = 1e30\n"
    );
    let text = text.replace("epochs = 1\nbase", "epochs = 3\nbase");
    let cfg = write_config(dir.path(), &text);
    assert_eq!(privcase(dir.path(), &["--config", &cfg, "--out-dir", "o", "synth"]).status.code(), Some(0));
    let out = privcase(dir.path(), &["--config", &cfg, "--out-dir", "o", "train-gan"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn staged_commands_match_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for args in [
        vec!["synth"],
        vec!["train-classifier", "--target", "identity"],
        vec!["train-classifier", "--target", "pathology"],
        vec!["train-gan"],
        vec!["privatize", "--method", "blur"],
        vec!["privatize", "--method", "ksame"],
        vec!["privatize", "--method", "pprlvgan"],
        vec!["evaluate"],
        vec!["saliency"],
        vec!["report"],
    ] {
        let mut full = vec!["--config", cfg.as_str(), "--out-dir", "staged"];
        full.extend(args.iter().copied());
        let out = privcase(dir.path(), &full);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr(&out));
    }
    let out = privcase(dir.path(), &["--config", &cfg, "--out-dir", "whole", "pipeline"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let staged = dir.path().join("staged");
    let whole = dir.path().join("whole");
    let reports = find(&staged, "report-", ".csv");
    assert_eq!(reports, find(&whole, "report-", ".csv"));
    let a = fs::read(staged.join(&reports[0])).unwrap();
    let b = fs::read(whole.join(&reports[0])).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 15);
    assert_eq!(String::from_utf8_lossy(&out.stdout).as_bytes(), b.as_slice());

    // Every top-level artifact carries the config hash.
    let hash = reports[0].trim_start_matches("report-").trim_end_matches(".csv").to_string();
    for entry in fs::read_dir(&whole).unwrap() {
        let name = entry.unwrap().file_name().to_string_lossy().into_owned();
        assert!(name.contains(&hash), "{name}");
    }
    let saliency = whole.join(format!("saliency-{hash}"));
    assert_eq!(find(&saliency, "", ".pgm").len(), 3);
}

#[test]
fn seed_env_changes_hash_and_out_dir_env_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_privcase"))
            .arg("report")
            .current_dir(dir.path())
            .env("PRIVCASE_OUT_DIR", "from-env")
            .env("PRIVCASE_SEED", seed)
            .output()
            .unwrap()
    };
    assert_eq!(run("1").status.code(), Some(0));
    assert_eq!(run("2").status.code(), Some(0));
    assert_eq!(find(&dir.path().join("from-env"), "report-", ".csv").len(), 2);
}

#[test]
fn ingest_leaves_input_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(privcase(dir.path(), &["--config", &cfg, "--out-dir", "src", "synth"]).status.code(), Some(0));
    let src = dir.path().join("src");
    let dataset_dir = src.join(find(&src, "dataset-", "")[0].clone());
    let manifest = dataset_dir.join("manifest.csv");
    let snapshot = |d: &Path| {
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(d.join("images"))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        (fs::read(d.join("manifest.csv")).unwrap(), files)
    };
    let before = snapshot(&dataset_dir);

    let ingest_cfg = write_config(
        dir.path(),
        &format!(
            "[dataset]\nmanifest = {:?}\n[dataset.preprocess]\ntarget_resolution = 16\n",
            manifest.to_string_lossy()
        ),
    );
    let out = privcase(dir.path(), &["--config", &ingest_cfg, "--out-dir", "ingested", "ingest"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(snapshot(&dataset_dir), before);
    let ingested = dir.path().join("ingested");
    assert_eq!(find(&ingested, "dataset-", "").len(), 1);
}
