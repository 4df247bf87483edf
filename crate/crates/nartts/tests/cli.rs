use std::path::Path;
use std::process::{Command, Output};

fn nartts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nartts"))
        .args(args)
        .output()
        .expect("spawn nartts")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn value<'a>(out: &'a str, key: &str) -> &'a str {
    out.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no `{key}` in {out}"))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&nartts(&["frobnicate"])), 1);
    assert_eq!(code(&nartts(&["bench-decoder", "--bogus"])), 1);
    assert_eq!(code(&nartts(&["bench-decoder", "--repeat", "0"])), 1);
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    let o = nartts(&[
        "gen-corpus",
        "--out",
        out.to_str().unwrap(),
        "--min-tokens",
        "5",
        "--max-tokens",
        "3",
    ]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
    assert_eq!(code(&nartts(&["gradcheck", "--module", "nope"])), 1);
}

#[test]
fn gen_corpus_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let o = nartts(&["--seed", "3", "gen-corpus", "--out", d.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(value(&stdout(&o), "utterances"), "64");
    }
    let manifest = std::fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 64);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn unwritable_output_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let o = nartts(&["gen-corpus", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_without_durations_explains_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tmp.path().join("c");
    assert_eq!(
        code(&nartts(&["gen-corpus", "--out", c.to_str().unwrap(), "--utts", "2"])),
        0
    );
    let o = nartts(&[
        "train",
        "--manifest",
        c.join("manifest.tsv").to_str().unwrap(),
        "--out",
        tmp.path().join("m.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--durations"));
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let o = nartts(&["gradcheck", "--module", "duration"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let groups: Vec<&str> = out
        .lines()
        .filter_map(|l| l.strip_prefix("group="))
        .map(|l| l.split(' ').next().unwrap())
        .collect();
    let mut unique = groups.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), groups.len());
    assert!(!groups.is_empty());
    let o = nartts(&["gradcheck", "--module", "duration", "--corrupt", "matmul"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_synth_and_extract_round() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tmp.path().join("c");
    let p = |x: &Path| x.to_str().unwrap().to_owned();
    assert_eq!(
        code(&nartts(&[
            "gen-corpus",
            "--out",
            &p(&c),
            "--utts",
            "3",
            "--max-tokens",
            "5"
        ])),
        0
    );
    let manifest = c.join("manifest.tsv");
    let model = tmp.path().join("m.ckpt");
    let log = tmp.path().join("train.log");
    let o = nartts(&[
        "train",
        "--manifest",
        &p(&manifest),
        "--durations",
        &p(&c.join("durations.txt")),
        "--out",
        &p(&model),
        "--steps",
        "2",
        "--batch",
        "2",
        "--log",
        &p(&log),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 2);
    assert!(log_text.lines().all(|l| l.split('\t').count() == 5));

    let feats = tmp.path().join("s.feat");
    let o = nartts(&[
        "synth",
        "--checkpoint",
        &p(&model),
        "--tokens",
        "3 1 4 1",
        "--out",
        &p(&feats),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let durs: usize = value(&out, "durations")
        .split(',')
        .map(|d| d.parse::<usize>().unwrap())
        .sum();
    assert_eq!(value(&out, "frames").parse::<usize>().unwrap(), durs);
    let f = nartts::features::read_features(&feats).unwrap();
    assert_eq!((f.len(), f.dim()), (durs, 20));
    assert_eq!(
        code(&nartts(&[
            "synth",
            "--checkpoint",
            &p(&model),
            "--tokens",
            "99",
            "--out",
            &p(&feats)
        ])),
        2
    );

    let ex = tmp.path().join("x.ckpt");
    let o = nartts(&[
        "train-extractor",
        "--manifest",
        &p(&manifest),
        "--out",
        &p(&ex),
        "--steps",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let durs = tmp.path().join("d.txt");
    let csv = tmp.path().join("align");
    let o = nartts(&[
        "--jobs",
        "2",
        "extract-durations",
        "--manifest",
        &p(&manifest),
        "--checkpoint",
        &p(&ex),
        "--out",
        &p(&durs),
        "--alignments",
        &p(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let corpus = nartts::pipeline::load_corpus(&manifest, Some(&durs), 16).unwrap();
    assert_eq!(corpus.len(), 3);
    assert_eq!(std::fs::read_dir(&csv).unwrap().count(), 3);
    // a model checkpoint is not an extractor
    assert_eq!(
        code(&nartts(&[
            "extract-durations",
            "--manifest",
            &p(&manifest),
            "--checkpoint",
            &p(&model),
            "--out",
            &p(&durs)
        ])),
        1
    );
}
