#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use apt_core::dataset::Cohort;
use apt_core::fixtures::{table1_script, StudyFixture, PROMPT_POOL, PROMPT_POOL_IMAGES, TABLE1};
use apt_core::gateway::{Matcher, Reply, ScriptEntry};
use serde_json::Value;

pub const RUN: &str = "r1";
pub const TOKEN: &str = "cli-review-token";

pub struct Run {
    pub dir: tempfile::TempDir,
}

pub struct Out {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl From<Output> for Out {
    fn from(o: Output) -> Self {
        Self {
            code: o.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        }
    }
}

impl Run {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join("run").join(name)
    }

    pub fn command(&self, args: &[&str]) -> Command {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_apt"));
        cmd.current_dir(self.dir.path())
            .args(["--config", "run.toml"])
            .args(args)
            .env_remove("APT_REVIEW_TOKEN");
        cmd
    }

    pub fn apt(&self, args: &[&str]) -> Out {
        self.command(args).output().unwrap().into()
    }

    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.apt(args);
        assert_eq!(out.code, 0, "apt {args:?} failed:\n{}\n{}", out.stdout, out.stderr);
        out.stdout
    }

    pub fn write(&self, name: &str, text: &str) {
        std::fs::write(self.path(name), text).unwrap();
    }

    pub fn read(&self, path: impl AsRef<Path>) -> String {
        std::fs::read_to_string(path).unwrap()
    }

    /// Fills every empty explanation in the caption template.
    pub fn fill_captions(&self) {
        let path = self.out("captions.jsonl");
        let text = self.read(&path).replace("\"explanation\":\"\"", "\"explanation\":\"Expert description of the layers.\"");
        std::fs::write(path, text).unwrap();
    }
}

/// The 18-animal study: six prompt-cohort animals and the twelve published
/// test animals, plus a run config using a scripted provider.
pub fn study(round_cap: u32) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let mut fixture = StudyFixture::new(dir.path());
    for (id, class) in PROMPT_POOL {
        fixture = fixture.animal(id, class, PROMPT_POOL_IMAGES, Some(Cohort::Prompt));
    }
    for (id, class, lurcher, wild, _) in TABLE1 {
        fixture = fixture.animal(id, class, lurcher + wild, Some(Cohort::Test));
    }
    fixture.write();
    let run = Run { dir };
    run.write(
        "run.toml",
        &format!(
            r#"manifest = "manifest.jsonl"
output_dir = "run"
run_id = "{RUN}"
seed = 7
round_cap = {round_cap}
batch_size = 10

[rate_limit]
backoff_base_secs = 0.01

[provider]
kind = "scripted"
script = "tune_script.jsonl"

[timing]
method_minutes = 45
baseline_minutes = 1080

[review]
bind = "127.0.0.1:0"
"#
        ),
    );
    write_script(&run.path("infer_script.jsonl"), &table1_script());
    run
}

pub fn write_script(path: &Path, entries: &[ScriptEntry]) {
    let text: String = entries
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect();
    std::fs::write(path, text).unwrap();
}

/// Ground truth of every prompt-pool image.
pub fn prompt_truth() -> BTreeMap<String, String> {
    let mut truth = BTreeMap::new();
    for (id, class) in PROMPT_POOL {
        for i in 0..PROMPT_POOL_IMAGES {
            truth.insert(StudyFixture::image_id(id, i), class.to_string());
        }
    }
    truth
}

pub fn flipped(labels: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    labels
        .iter()
        .map(|(k, v)| (k.clone(), if v == "Lurcher" { "Wild" } else { "Lurcher" }.to_string()))
        .collect()
}

/// Script answering every tuning request from `labels`, `times` requests at most.
pub fn tune_script(run: &Run, labels: BTreeMap<String, String>, times: Option<usize>) {
    let mut entry = ScriptEntry::always(Matcher::Any, Reply::Labels(labels));
    entry.times = times;
    write_script(&run.path("tune_script.jsonl"), &[entry]);
}

pub fn strip_timestamps(text: &str) -> Vec<Value> {
    fn strip(v: &mut Value) {
        match v {
            Value::Object(map) => {
                map.remove("timestamp");
                map.values_mut().for_each(strip);
            }
            Value::Array(items) => items.iter_mut().for_each(strip),
            _ => {}
        }
    }
    text.lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            strip(&mut v);
            v
        })
        .collect()
}

/// A running `apt review-serve`; killed on drop.
pub struct Server {
    child: Child,
    pub addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn serve(run: &Run, token: Option<&str>) -> Server {
    let mut cmd = run.command(&["review-serve"]);
    if let Some(t) = token {
        cmd.env("APT_REVIEW_TOKEN", t);
    }
    let mut child = cmd.stdout(Stdio::piped()).stderr(Stdio::null()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("review service listening on http://")
        .and_then(|rest| rest.split('/').next())
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_string();
    Server { child, addr }
}

impl Server {
    pub fn call(&self, method: &str, path: &str, token: Option<&str>, body: Option<Value>) -> (u16, Value) {
        let mut stream = TcpStream::connect(&self.addr).unwrap();
        let body = body.map(|b| b.to_string()).unwrap_or_default();
        let auth = token.map(|t| format!("Authorization: Bearer {t}\r\n")).unwrap_or_default();
        write!(
            stream,
            "{method} {path} HTTP/1.1\r\nHost: {}\r\n{auth}Content-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            self.addr,
            body.len()
        )
        .unwrap();
        let mut raw = String::new();
        stream.read_to_string(&mut raw).unwrap();
        let status: u16 = raw.split(' ').nth(1).unwrap().parse().unwrap();
        let payload = raw.split_once("\r\n\r\n").map(|(_, b)| b).unwrap_or("");
        (status, serde_json::from_str(payload).unwrap_or(Value::Null))
    }
}
