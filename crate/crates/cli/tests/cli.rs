mod common;

use std::fs;
use std::process::Command;
use std::time::Duration;

use common::*;

fn setup(blocks: &str) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("chunkd.conf");
    fs::write(&config, blocks).unwrap();
    (dir, config.to_string_lossy().into_owned())
}

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn version_and_help() {
    let dir = tempfile::tempdir().unwrap();
    let v = chunkd(dir.path(), &["--version"]);
    assert!(v.status.success());
    assert!(String::from_utf8_lossy(&v.stdout).starts_with("chunkd "));
    let h = chunkd(dir.path(), &["--help"]);
    let help = String::from_utf8_lossy(&h.stdout);
    for sub in ["serve", "stop", "exec", "inline", "show", "weave"] {
        assert!(help.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        chunkd(dir.path(), &["exec", "--backend", "R"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        chunkd(dir.path(), &["weave", "x.tex", "--mode", "later"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        chunkd(dir.path(), &["serve", "nosuch"]).status.code(),
        Some(2)
    );
    assert_eq!(chunkd(dir.path(), &["serve", "sh"]).status.code(), Some(2));
    fs::write(dir.path().join("bad.conf"), "backend x\n  port = 1\n").unwrap();
    assert_eq!(
        chunkd(dir.path(), &["stop", "--config", "bad.conf"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn serve_without_backends_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = chunkd(dir.path(), &["serve"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
}

#[test]
fn show_prints_listing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.R"), "x <- 1\ny <- 2\nz <- 3\n").unwrap();
    let o = chunkd(
        dir.path(),
        &["show", "--lang", "R", "--file", "a.R", "--first", "2"],
    );
    assert!(o.status.success());
    assert_eq!(
        String::from_utf8_lossy(&o.stdout),
        "\\begin{minted}{R}\ny <- 2\nz <- 3\n\\end{minted}\n"
    );
    let o = chunkd(
        dir.path(),
        &[
            "show",
            "--lang",
            "R",
            "--file",
            "a.R",
            "--last",
            "1",
            "--no-highlight",
        ],
    );
    assert_eq!(
        String::from_utf8_lossy(&o.stdout),
        "\\begin{Verbatim}\nx <- 1\n\\end{Verbatim}\n"
    );
}

#[test]
fn serve_stop_round_trip_with_pid_file() {
    let port = free_port();
    let (dir, cfg) = setup(&mock_block("mock", Some(port), ""));
    let _guard = StopGuard {
        dir: dir.path().into(),
        config: cfg.clone().into(),
        backends: vec!["mock".into()],
    };
    let o = chunkd(dir.path(), &["serve", "mock", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pid_file = dir.path().join(format!("tmp/chunkd.{port}.pid"));
    assert!(pid_file.exists());

    // Already running: a second serve is a no-op.
    assert!(chunkd(dir.path(), &["serve", "mock", "--config", &cfg])
        .status
        .success());

    let o = chunkd(
        dir.path(),
        &[
            "exec",
            "--config",
            &cfg,
            "--backend",
            "mock",
            "--code",
            "print(1+1)",
            "--out",
            "x",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    assert_eq!(fs::read(dir.path().join("tmp/x")).unwrap(), b"2\n");

    let o = chunkd(dir.path(), &["stop", "mock", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(wait_closed(port, Duration::from_secs(3)));
    assert!(!pid_file.exists());
    // Stopping again is harmless.
    assert!(chunkd(dir.path(), &["stop", "mock", "--config", &cfg])
        .status
        .success());
}

#[test]
fn exec_file_and_batch_override() {
    let (dir, cfg) = setup(&mock_block("mockbatch", None, ""));
    fs::write(dir.path().join("c.mock"), "echo from file\nwarn careful\n").unwrap();
    let o = chunkd(
        dir.path(),
        &[
            "exec",
            "--config",
            &cfg,
            "--backend",
            "mockbatch",
            "--file",
            "c.mock",
            "--out",
            "f",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    assert_eq!(
        fs::read_to_string(dir.path().join("tmp/f")).unwrap(),
        "from file\ncareful\n"
    );

    let o = chunkd(
        dir.path(),
        &[
            "exec",
            "--config",
            &cfg,
            "--backend",
            "R",
            "--batch",
            MOCK,
            "--code",
            "print(2*3)",
            "--out",
            "g",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("tmp/g")).unwrap(), "6\n");
}

#[test]
fn exec_cache_mode_reads_only() {
    let (dir, cfg) = setup("");
    let o = chunkd(
        dir.path(),
        &[
            "exec",
            "--config",
            &cfg,
            "--backend",
            "R",
            "--code",
            "x",
            "--out",
            "none",
            "--mode",
            "cache",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("MISSING_CACHE"));
    fs::create_dir(dir.path().join("tmp")).unwrap();
    fs::write(dir.path().join("tmp/have"), "kept\n").unwrap();
    let o = chunkd(
        dir.path(),
        &[
            "exec",
            "--config",
            &cfg,
            "--backend",
            "R",
            "--code",
            "x",
            "--out",
            "have",
            "--mode",
            "cache",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn inline_renders_fragment() {
    let (dir, cfg) = setup(&mock_block("mockbatch", None, ""));
    let o = chunkd(
        dir.path(),
        &[
            "inline",
            "--config",
            &cfg,
            "--backend",
            "mockbatch",
            "--code",
            "```print(40+2)```",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout), "42");
    let o = chunkd(
        dir.path(),
        &[
            "inline",
            "--config",
            &cfg,
            "--backend",
            "mockbatch",
            "--code",
            "echo hi",
            "--render",
            "vbox",
            "--out",
            "v",
        ],
    );
    assert_eq!(
        String::from_utf8_lossy(&o.stdout),
        "\\begin{tcolorbox}[breakable]\n\\begin{Verbatim}[breaklines=true]\nhi\n\\end{Verbatim}\n\\end{tcolorbox}"
    );
    let o = chunkd(
        dir.path(),
        &[
            "inline",
            "--config",
            &cfg,
            "--backend",
            "mockbatch",
            "--code",
            "echo \"q\"",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_from_environment() {
    let (dir, cfg) = setup(&mock_block("envmock", None, ""));
    let o = Command::new(CHUNKD)
        .args([
            "exec",
            "--backend",
            "envmock",
            "--code",
            "echo env",
            "--out",
            "e",
        ])
        .current_dir(dir.path())
        .env("CHUNKD_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(dir.path().join("tmp/e")).unwrap(),
        "env\n"
    );
}

#[test]
fn weave_keep_going_and_report() {
    let (dir, cfg) = setup(&mock_block("mockbatch", None, ""));
    fs::write(dir.path().join("ok.mock"), "echo fine\n").unwrap();
    fs::write(
        dir.path().join("doc.tex"),
        "\\includeOutput{absent}\n\\runExtCode{mockbatch}{ok.mock}{ok}\\includeOutput{ok}[inline]\n",
    )
    .unwrap();
    let o = chunkd(dir.path(), &["weave", "doc.tex", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("doc.woven.tex").exists());

    let o = chunkd(
        dir.path(),
        &[
            "weave",
            "doc.tex",
            "--config",
            &cfg,
            "--keep-going",
            "--report",
            "tsv",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    let report = stderr(&o);
    assert!(report.starts_with("summary\t1\t0\t1\t1\n"), "{report}");
    assert!(report.contains("error\t1\tMISSING_CACHE\t"), "{report}");
    assert_eq!(
        fs::read_to_string(dir.path().join("doc.woven.tex")).unwrap(),
        "\nfine\n"
    );

    let o = chunkd(
        dir.path(),
        &[
            "weave",
            "doc.tex",
            "--config",
            &cfg,
            "--keep-going",
            "-o",
            "out.tex",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(dir.path().join("out.tex").exists());
}

#[test]
fn weave_parse_error_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.tex"), "\\runR{a}{b\n").unwrap();
    let o = chunkd(dir.path(), &["weave", "bad.tex"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}
