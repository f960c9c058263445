#![allow(dead_code)]

use std::path::PathBuf;
use std::process::{Command, Output};

pub fn adacbm<S: AsRef<str>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adacbm"))
        .args(args.iter().map(|a| a.as_ref()))
        .output()
        .expect("spawn adacbm")
}

pub fn ok<S: AsRef<str>>(args: &[S]) -> Output {
    let out = adacbm(args);
    assert!(
        out.status.success(),
        "adacbm {:?} failed: {}",
        args.iter().map(|a| a.as_ref()).collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Runs a command that must exit 1 and returns its stderr.
pub fn fails<S: AsRef<str>>(args: &[S]) -> String {
    let out = adacbm(args);
    assert_eq!(
        out.status.code(),
        Some(1),
        "adacbm {:?} should exit 1",
        args.iter().map(|a| a.as_ref()).collect::<Vec<_>>()
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Synthetic data, a k=4 selection and a short adacbm run, all on disk.
pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    pub fn new() -> Self {
        let fx = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        ok(&[
            "synth",
            "--out-dir",
            &fx.s(""),
            "--train-per-class",
            "300",
            "--test-per-class",
            "100",
        ]);
        ok(&fx.select_args("sel.json", &["--k", "4"]));
        ok(&fx.train_args("model.ckpt", &["--epochs", "40", "--class-names", "red,green,blue"]));
        fx
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn with(mut base: Vec<String>, extra: &[&str]) -> Vec<String> {
        base.extend(extra.iter().map(|e| e.to_string()));
        base
    }

    pub fn select_args(&self, out: &str, extra: &[&str]) -> Vec<String> {
        let base = vec![
            "select".into(),
            "--image-emb".into(),
            self.s("train.aemb"),
            "--image-meta".into(),
            self.s("train.jsonl"),
            "--concept-emb".into(),
            self.s("concepts.aemb"),
            "--concept-meta".into(),
            self.s("concepts.jsonl"),
            "--out".into(),
            self.s(out),
        ];
        Self::with(base, extra)
    }

    pub fn train_args(&self, out: &str, extra: &[&str]) -> Vec<String> {
        let base = vec![
            "train".into(),
            "--selection".into(),
            self.s("sel.json"),
            "--image-emb".into(),
            self.s("train.aemb"),
            "--image-meta".into(),
            self.s("train.jsonl"),
            "--concept-emb".into(),
            self.s("concepts.aemb"),
            "--concept-meta".into(),
            self.s("concepts.jsonl"),
            "--out".into(),
            self.s(out),
        ];
        Self::with(base, extra)
    }

    /// `cmd --model <model>` against the held-out split.
    pub fn test_args(&self, cmd: &str, model: &str, extra: &[&str]) -> Vec<String> {
        let base = vec![
            cmd.into(),
            "--model".into(),
            self.s(model),
            "--image-emb".into(),
            self.s("test.aemb"),
            "--image-meta".into(),
            self.s("test.jsonl"),
        ];
        Self::with(base, extra)
    }
}
