use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gabmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gabmil"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, seed: &str) {
    let o = gabmil(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        seed,
        "--per-class",
        "6",
        "--rows",
        "6",
        "--cols",
        "6",
        "--bag-size",
        "12",
        "--feature-dim",
        "8",
        "--min-distance",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path(), "3");
    synth(b.path(), "3");
    synth(c.path(), "4");
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    assert_eq!(ta.len(), 13);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn train_then_eval_reproduces_the_report() {
    let data = tempfile::tempdir().unwrap();
    synth(data.path(), "1");
    let manifest = data.path().join("manifest.tsv");
    let run = tempfile::tempdir().unwrap();
    let o = gabmil(&[
        "train",
        "--preset",
        "synthetic",
        "--manifest",
        manifest.to_str().unwrap(),
        "--set",
        "input_dim=8",
        "--epochs",
        "2",
        "--folds",
        "3",
        "--out",
        run.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["run.cfg", "report.tsv", "fold_0/checkpoint.gmck", "fold_2/split.tsv", "fold_1/log.tsv"] {
        assert!(run.path().join(f).exists(), "missing {f}");
    }
    let eval_out = tempfile::tempdir().unwrap();
    let o = gabmil(&[
        "eval",
        "--run",
        run.path().to_str().unwrap(),
        "--out",
        eval_out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(run.path().join("report.tsv")).unwrap(),
        fs::read_to_string(eval_out.path().join("report.tsv")).unwrap()
    );
}

#[test]
fn flops_reports_both_accounting_modes() {
    let o = gabmil(&["flops", "--variant", "BOTH", "--p", "3", "--g", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("abmil.total=94465024"), "{text}");
    assert!(text.contains("gabmil_occupied.mode=occupied-only"), "{text}");
    assert!(text.contains("gabmil_padded.mode=padded-grid"), "{text}");
    assert!(text.contains("self_attention.total="), "{text}");
}

#[test]
fn gradcheck_passes_for_tiny_model() {
    let o = gabmil(&["gradcheck", "--variant", "GRID", "--g", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("passed=true"));
}

#[test]
fn errors_are_one_line_with_a_kind() {
    let o = gabmil(&["eval", "--run", "/nonexistent/run"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    let line = err.lines().find(|l| l.starts_with("error: ")).expect("error line");
    assert!(line.contains("kind=") && line.contains(" msg="), "{line}");

    let o = gabmil(&["train", "--set", "bogus=1", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=config"), "{}", stderr(&o));

    let o = gabmil(&["flops", "--n"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind=usage"));
}
