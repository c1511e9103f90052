use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_specvol");

const CLOCK: &str = "[dataset]\nkind = clock2d\nn_images = 40\nn = 12\nuse_projections = false\nnoise_ratio = 0\n\
                     [lowres]\nn = 6\nq = 2\n[graph]\nk = 6\n[specvols]\nr = 3\n[eval]\nfsc_images = 8\n";

const SPIN: &str = "[dataset]\nkind = spin\nn_images = 50\nn = 8\nnoise_ratio = 1\nseed = 9\npixel_size_a = 12\n\
                    [lowres]\nn = 4\nq = 2\ncov_tol = 1e-3\n[graph]\nk = 6\n[specvols]\nr = 3\n[eval]\nfsc_images = 8\nreconstruct = 3\n";

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    for text in [
        "[dataset]\nn_imgs = 3\n",
        "[specvols]\nr = 0\n",
        "[graph]\nkind = spectral\n",
    ] {
        let cfg = write_config(dir.path(), text);
        let out = run(&["--config", cfg.to_str().unwrap(), "simulate"]);
        assert_eq!(
            code(&out),
            2,
            "{text:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = run(&[
        "--config",
        dir.path().join("absent.cfg").to_str().unwrap(),
        "simulate",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_artifacts_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CLOCK);
    let out_dir = dir.path().join("empty");
    for cmd in [
        "lowres",
        "embed",
        "reconstruct-spectral",
        "reconstruct",
        "eval",
    ] {
        let out = run(&[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            cmd,
        ]);
        assert_eq!(
            code(&out),
            4,
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn non_convergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &SPIN.replace("r = 3\n", "r = 3\nmax_iter = 1\ntol = 1e-12\n"),
    );
    let out_dir = dir.path().join("out");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "pipeline",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let marker = std::fs::read_to_string(out_dir.join("FAILED")).unwrap();
    assert!(marker.starts_with("stage: specvols"), "{marker}");
}

#[test]
fn simulate_is_seeded_and_records_the_noise_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[dataset]\nn_images = 10\nn = 16\nnoise_ratio = 30\n[graph]\nk = 4\n",
    );
    let mut crcs = Vec::new();
    for (name, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            seed,
            "simulate",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("n=10 N=16"));
        assert!(out_dir.join("dataset/images.f32").exists());
        let m: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out_dir.join("dataset/manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(m["noise_ratio"], 30.0);
        crcs.push(m["stack_crc32"].as_u64().unwrap());
    }
    assert_eq!(crcs[0], crcs[1]);
    assert_ne!(crcs[0], crcs[2]);
}

#[test]
fn staged_commands_match_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CLOCK);
    let cfg = cfg.to_str().unwrap();
    let staged = dir.path().join("staged");
    let whole = dir.path().join("whole");
    let s = staged.to_str().unwrap();
    for cmd in [
        "simulate",
        "lowres",
        "embed",
        "reconstruct-spectral",
        "reconstruct",
        "eval",
    ] {
        let out = run(&["--config", cfg, "--out", s, "--deterministic", cmd]);
        assert_eq!(
            code(&out),
            0,
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = run(&[
        "--config",
        cfg,
        "--out",
        whole.to_str().unwrap(),
        "--deterministic",
        "pipeline",
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(tree(&staged), tree(&whole));

    // duplicates are written once, an empty list writes nothing, and a bad
    // index fails before anything is written
    let recon = staged.join("recon");
    std::fs::remove_dir_all(&recon).unwrap();
    let out = run(&["--config", cfg, "--out", s, "reconstruct", "--index", "2,2"]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read_dir(&recon).unwrap().count(), 1);
    let out = run(&[
        "--config",
        cfg,
        "--out",
        s,
        "reconstruct",
        "--index",
        "7,40",
    ]);
    assert_ne!(code(&out), 0);
    assert!(!recon.join("x_000007.svol").exists());
}

#[test]
fn deterministic_runs_ignore_the_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SPIN);
    let mut trees = Vec::new();
    for threads in ["1", "3"] {
        let out_dir = dir.path().join(format!("t{threads}"));
        let out = run(&[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--threads",
            threads,
            "--deterministic",
            "pipeline",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).contains("simulate"));
        trees.push(tree(&out_dir));
    }
    assert!(trees[0].keys().any(|p| p.ends_with("x_000003.svol")));
    assert!(!trees[0].keys().any(|p| p.ends_with("timing.json")));
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn timings_are_written_without_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CLOCK);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "pipeline",
    ]);
    assert_eq!(code(&out), 0);
    let t: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("timing.json")).unwrap())
            .unwrap();
    for key in ["simulate", "mean", "embedding", "solve"] {
        assert!(t[key].as_f64().is_some(), "{key} missing from {t}");
    }
}

#[test]
fn shipped_configs_are_valid() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for e in std::fs::read_dir(&root).unwrap() {
        let p = e.unwrap().path();
        if p.extension().and_then(|e| e.to_str()) == Some("cfg") {
            specvol::io::PipelineConfig::load(&p)
                .unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            seen += 1;
        }
    }
    assert!(seen >= 6);
}
