use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mango_core::checkpoint::{Checkpoint, CheckpointKind};
use mango_core::harness::{Task, TaskKind, TaskSpec};
use mango_core::transformer::logits;
use mango_core::TokenBatch;

const BASE: &str = r#"
[task]
kind = "char_lm"
seq_len = 12
eval_windows = 16
eval_batch_size = 8

[small]
n_layers = 1
d_model = 8
n_heads = 2

[target]
n_layers = 2
d_model = 12
n_heads = 2

[train_small]
max_steps = 20
batch_size = 4
eval_every = 5

[train_target]
max_steps = 8
batch_size = 4
eval_every = 4

[warmup]
steps = 3
batch_size = 4
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mango"))
            .args(args)
            .env("MANGO_OUT", self.path(out))
            .output()
            .unwrap()
    }
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_small_then_grow_then_train_target() {
    let sb = Sandbox::new();
    let cfg = sb.config("run.toml", BASE);
    ok(&sb.run("a", &["train-small", "--config", s(&cfg)]));
    ok(&sb.run("b", &["train-small", "--config", s(&cfg)]));
    let metrics = std::fs::read_to_string(sb.path("a/small_metrics.csv")).unwrap();
    assert_eq!(metrics, std::fs::read_to_string(sb.path("b/small_metrics.csv")).unwrap());

    let ck = Checkpoint::load(&sb.path("a/small.ckpt")).unwrap();
    let (c1, _) = ck.to_model().unwrap();
    let last: f64 = metrics.lines().last().unwrap().split(',').nth(4).unwrap().parse().unwrap();
    assert!(last < (c1.vocab as f64).ln(), "eval {last} not below uniform");

    let small = sb.path("a/small.ckpt");
    let out = sb.run("a", &["grow", "--config", s(&cfg), "--small", s(&small), "--method", "mango"]);
    ok(&out);
    let cores = Checkpoint::load(&sb.path("a/cores_mango.ckpt")).unwrap();
    assert_eq!(cores.meta.kind, CheckpointKind::MangoCores);
    assert_eq!(cores.meta.ranks, Some([1, 1, 1, 1]));
    let trace = std::fs::read_to_string(sb.path("a/warmup_mango.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,loss"));
    assert_eq!(trace.lines().count(), 4);
    let grown = Checkpoint::load(&sb.path("a/target_mango.ckpt")).unwrap();
    assert!(grown.meta.warmup_flops > 0);

    let init = sb.path("a/target_mango.ckpt");
    ok(&sb.run("a", &["train-target", "--config", s(&cfg), "--init", s(&init)]));
    let curve = std::fs::read_to_string(sb.path("a/target_metrics.csv")).unwrap();
    let first_flops: u64 = curve.lines().nth(1).unwrap().split(',').nth(5).unwrap().parse().unwrap();
    assert_eq!(first_flops, grown.meta.warmup_flops);

    let inspect = sb.run("a", &["inspect-ckpt", s(&init)]);
    ok(&inspect);
    let text = String::from_utf8(inspect.stdout).unwrap();
    assert!(text.contains("layers.1.w_in\tf32\t[12, 48]"));
}

#[test]
fn equal_shape_grow_reproduces_small_logits() {
    let sb = Sandbox::new();
    let text = BASE.replace("n_layers = 2\nd_model = 12", "n_layers = 1\nd_model = 8")
        + "\n[grow]\nnoise = 0.0\n";
    let text = text.replace("[warmup]\nsteps = 3", "[warmup]\nsteps = 0");
    let cfg = sb.config("same.toml", &text);
    ok(&sb.run("o", &["train-small", "--config", s(&cfg)]));
    let small = sb.path("o/small.ckpt");
    ok(&sb.run("o", &["grow", "--config", s(&cfg), "--small", s(&small)]));
    let (c1, w1) = Checkpoint::load(&small).unwrap().to_model().unwrap();
    let (c2, w2) = Checkpoint::load(&sb.path("o/target_mango.ckpt")).unwrap().to_model().unwrap();
    assert_eq!(c1, c2);
    let ids: Vec<usize> = (0..24).map(|i| (i * 7 + 3) % c1.vocab).collect();
    let toks = TokenBatch::new(2, 12, ids).unwrap();
    let (a, b) = (logits(&w1, &c1, &toks).unwrap(), logits(&w2, &c2, &toks).unwrap());
    assert!(a.max_abs_diff(&b) < 1e-5);
}

#[test]
fn shrinking_is_refused() {
    let sb = Sandbox::new();
    let cfg = sb.config("run.toml", BASE);
    ok(&sb.run("o", &["train-small", "--config", s(&cfg)]));
    let narrow = sb.config("narrow.toml", &BASE.replace("d_model = 12", "d_model = 4"));
    let small = sb.path("o/small.ckpt");
    let out = sb.run("o", &["grow", "--config", s(&narrow), "--small", s(&small)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("cannot shrink hidden size from 8 to 4"), "{err}");
}

#[test]
fn compare_writes_five_curve_files() {
    let sb = Sandbox::new();
    let cfg = sb.config("run.toml", &format!("methods = [\"mango\", \"ligo\", \"stack\", \"net2net\", \"random\"]\n{BASE}"));
    ok(&sb.run("o", &["compare", "--config", s(&cfg)]));
    for m in ["mango", "ligo", "stack", "net2net", "random"] {
        let text = std::fs::read_to_string(sb.path(&format!("o/curves_{m}.csv"))).unwrap();
        assert!(text.starts_with("method,seed,step,train_loss,eval_loss,cum_flops\n"));
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sb.path("o/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["format"], "mango-compare/1");
    let random = summary["aggregate"].as_array().unwrap().iter().find(|a| a["method"] == "random").unwrap();
    assert_eq!(random["mean_r"], 0.0);
}

#[test]
fn ablation_defaults_to_four_ranks() {
    let sb = Sandbox::new();
    let cfg = sb.config("run.toml", BASE);
    ok(&sb.run("o", &["ablate-ranks", "--config", s(&cfg)]));
    let csv = std::fs::read_to_string(sb.path("o/ablation.csv")).unwrap();
    let ranks: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ranks, ["1", "4", "7", "10"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sb.path("o/ablation.json")).unwrap()).unwrap();
    assert_eq!(report["format"], "mango-ablation/1");
    assert!(report.get("r_spread").is_some());
}

#[test]
fn exit_codes() {
    let sb = Sandbox::new();
    let bad = sb.config("bad.toml", &BASE.replace("eval_every = 5", "eval_every = 5\nlr = 1e300"));
    assert_eq!(sb.run("o", &["train-small", "--config", s(&bad)]).status.code(), Some(2));

    let junk = sb.path("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = sb.run("o", &["inspect-ckpt", s(&junk)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("magic"));
    assert_eq!(sb.run("o", &["inspect-ckpt", s(&sb.path("missing"))]).status.code(), Some(3));

    let unknown = sb.config("unknown.toml", &format!("{BASE}\n[extra]\nx = 1\n"));
    assert_eq!(sb.run("o", &["train-small", "--config", s(&unknown)]).status.code(), Some(1));
    assert_eq!(sb.run("o", &["no-such-command"]).status.code(), Some(1));
    assert_eq!(sb.run("o", &["--help"]).status.code(), Some(0));
}

#[test]
fn attention_export_from_text() {
    let sb = Sandbox::new();
    let cfg = sb.config("run.toml", BASE);
    ok(&sb.run("o", &["train-small", "--config", s(&cfg)]));
    let ck = sb.path("o/small.ckpt");
    ok(&sb.run("o", &["export-attn", "--ckpt", s(&ck), "--config", s(&cfg), "--text", "the mill"]));
    let text = std::fs::read_to_string(sb.path("o/attention.csv")).unwrap();
    assert_eq!(text.lines().count(), 2 * 8);
    let task = Task::new(&TaskSpec { seq_len: 12, ..TaskSpec::new(TaskKind::CharLm) }).unwrap();
    let ids: Vec<String> = task.encode("the mill").unwrap().iter().map(|t| t.to_string()).collect();
    ok(&sb.run("o", &["export-attn", "--ckpt", s(&ck), "--tokens", &ids.join(","), "--file", "b.csv"]));
    assert_eq!(text, std::fs::read_to_string(sb.path("o/b.csv")).unwrap());
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let rc = mango_core::RunConfig::load(&path).unwrap();
    let exp = rc.experiment().unwrap();
    assert_eq!((exp.small.d_model, exp.target.d_model), (32, 64));
    assert_eq!(rc.seeds, [0, 1, 2]);
}
