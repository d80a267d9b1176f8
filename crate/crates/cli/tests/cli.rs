use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"output_dir = "run"
seed = 2

[corpus]
scenes = 4
height = 160
width = 160

[model]
stem_filters = 4
layers_per_block = 1
growth_rate = 4
hidden_width = 16

[train]
epochs = 1
learning_rate = 0.05

[bootstrap]
rounds = 3

[eval]
threshold_count = 9
{extra}"#
    );
    let path = dir.join("smoke.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn bootseg(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bootseg"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env_remove("BOOTSEG_WORKERS")
        .output()
        .unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {stderr}"))
}

#[test]
fn second_synth_is_a_skip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let first = bootseg(&["synth"], &cfg);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let second = bootseg(&["synth"], &cfg);
    assert!(second.status.success());
    assert!(String::from_utf8_lossy(&second.stdout).contains("skipped"));
    let forced = bootseg(&["synth", "--force"], &cfg);
    assert!(String::from_utf8_lossy(&forced.stdout).contains("synth: done"));
}

#[test]
fn report_after_three_rounds_has_four_overlaps_by_four_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    for stage in ["synth", "train", "bootstrap", "report"] {
        let out = bootseg(&[stage], &cfg);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let table = std::fs::read_to_string(dir.path().join("run/reports/break_even.csv")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "overlap,baseline,round_1,round_2,round_3");
    assert_eq!(rows.len(), 5);
    assert!(rows[1..].iter().all(|r| r.split(',').count() == 5));
    let eval = bootseg(&["eval", "--round", "2"], &cfg);
    assert!(String::from_utf8_lossy(&eval.stdout).contains("skipped"));
}

#[test]
fn stages_out_of_order_name_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let err = error_line(&bootseg(&["train"], &cfg));
    assert_eq!(err["error"]["kind"], "missing_artifact");
    assert!(err["error"]["message"].as_str().unwrap().contains("synth"));
}

#[test]
fn bad_config_is_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bogus_key = 1\n");
    let err = error_line(&bootseg(&["synth"], &cfg));
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("bogus_key"));

    let missing = error_line(&bootseg(&["synth"], &dir.path().join("nope.toml")));
    assert_eq!(missing["error"]["kind"], "io");
}

#[test]
fn worker_variable_must_be_a_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = Command::new(env!("CARGO_BIN_EXE_bootseg"))
        .args(["synth", "--config"])
        .arg(&cfg)
        .env("BOOTSEG_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(error_line(&out)["error"]["kind"], "usage");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["smoke.toml", "desk.toml"] {
        let c = bootseg_core::config::ExperimentConfig::load(&dir.join(name)).unwrap();
        assert!(c.output_dir.ends_with(format!("runs/{}", name.trim_end_matches(".toml"))));
    }
}
