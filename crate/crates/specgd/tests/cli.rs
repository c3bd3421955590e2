use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn specgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specgd"))
        .args(args)
        .env_remove("SPECGD_THREADS")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, n: u64, d: usize, name: &str) -> PathBuf {
    let p = dir.join(name);
    ok(&specgd(&[
        "gen",
        "--n",
        &n.to_string(),
        "--d",
        &d.to_string(),
        "--noise",
        "0.05",
        "--seed",
        "3",
        "--block-size",
        "256",
        "--out",
        s(&p),
    ]));
    p
}

fn rows(metrics: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(metrics).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# specgd metrics v1"));
    assert!(lines.next().unwrap().starts_with("iter,wall_ms,"));
    lines
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

fn manifest(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&specgd(&["gen", "--n", "10", "--d", "2"])), 2);
    assert_eq!(code(&specgd(&["train", "--mode", "sideways"])), 2);
    assert_eq!(code(&specgd(&[])), 2);
}

#[test]
fn generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), 3_000, 7, "a.sgd");
    let b = gen(dir.path(), 3_000, 7, "b.sgd");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ma = manifest(&dir.path().join("a.sgd.manifest.json"));
    let mb = manifest(&dir.path().join("b.sgd.manifest.json"));
    assert_eq!(
        ma["dataset"]["header_digest"],
        mb["dataset"]["header_digest"]
    );
    assert_eq!(ma["dataset"]["n_examples"], 3_000);
}

#[test]
fn convert_reads_csv_and_names_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("in.csv");
    fs::write(&csv, "1,2,1\n3,4,-1\n5,6,1\n").unwrap();
    let out = specgd(&[
        "convert",
        "--in",
        s(&csv),
        "--format",
        "csv",
        "--out",
        s(&dir.path().join("c.sgd")),
    ]);
    ok(&out);
    assert!(
        String::from_utf8_lossy(&out.stdout).contains("n=3"),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );

    fs::write(&csv, "1,2,1\n3,4,0\n").unwrap();
    let out = specgd(&[
        "convert",
        "--in",
        s(&csv),
        "--format",
        "csv",
        "--out",
        s(&dir.path().join("d.sgd")),
    ]);
    assert_eq!(code(&out), 4);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("line 2"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn plain_batch_training_writes_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 2_000, 5, "t.sgd");
    let (metrics, model) = (dir.path().join("m.csv"), dir.path().join("w.bin"));
    ok(&specgd(&[
        "train",
        "--data",
        s(&data),
        "--metrics-out",
        s(&metrics),
        "--model-out",
        s(&model),
    ]));
    let r = rows(&metrics);
    assert_eq!(r.len(), 20);
    assert!(r.iter().all(|row| row[3] == "1" && row[8] == "1"));
    let w = fs::read(&model).unwrap();
    assert_eq!(w.len(), 4 + 5 * 8);
    assert_eq!(&w[..4], &[5, 0, 0, 0]);
    let m = manifest(&dir.path().join("w.bin.manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["train"]["iters"], 20);
}

#[test]
fn zero_iterations_give_a_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 500, 3, "t.sgd");
    let (metrics, model) = (dir.path().join("m.csv"), dir.path().join("w.bin"));
    ok(&specgd(&[
        "train",
        "--data",
        s(&data),
        "--iters",
        "0",
        "--metrics-out",
        s(&metrics),
        "--model-out",
        s(&model),
    ]));
    assert!(rows(&metrics).is_empty());
    assert_eq!(
        fs::read(&model).unwrap(),
        [3, 0, 0, 0]
            .iter()
            .copied()
            .chain([0u8; 24])
            .collect::<Vec<u8>>()
    );
}

#[test]
fn a_manifest_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 4_000, 6, "t.sgd");
    let (m1, w1) = (dir.path().join("m1.csv"), dir.path().join("w1.bin"));
    ok(&specgd(&[
        "train",
        "--data",
        s(&data),
        "--task",
        "lr",
        "--reg",
        "l2",
        "--mu",
        "0.5",
        "--method",
        "igd",
        "--mode",
        "approx",
        "--steps",
        "3",
        "--iters",
        "5",
        "--seed",
        "11",
        "--metrics-out",
        s(&m1),
        "--model-out",
        s(&w1),
    ]));
    let (m2, w2) = (dir.path().join("m2.csv"), dir.path().join("w2.bin"));
    let replay = dir.path().join("w1.bin.manifest.json");
    ok(&specgd(&[
        "train",
        "--from-manifest",
        s(&replay),
        "--metrics-out",
        s(&m2),
        "--model-out",
        s(&w2),
        "--manifest-out",
        s(&dir.path().join("r.json")),
    ]));
    let strip = |p: &Path| {
        rows(p)
            .into_iter()
            .map(|mut r| {
                r.remove(1);
                r
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&m1), strip(&m2));
    assert_eq!(fs::read(&w1).unwrap(), fs::read(&w2).unwrap());
}

#[test]
fn thread_variable_overrides_workers() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 2_000, 4, "t.sgd");
    let (metrics, model) = (dir.path().join("m.csv"), dir.path().join("w.bin"));
    let out = Command::new(env!("CARGO_BIN_EXE_specgd"))
        .args([
            "train",
            "--data",
            s(&data),
            "--iters",
            "2",
            "--workers",
            "1",
            "--metrics-out",
            s(&metrics),
            "--model-out",
            s(&model),
        ])
        .env("SPECGD_THREADS", "3")
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(
        manifest(&dir.path().join("w.bin.manifest.json"))["train"]["workers"],
        3
    );

    let out = Command::new(env!("CARGO_BIN_EXE_specgd"))
        .args([
            "train",
            "--data",
            s(&data),
            "--metrics-out",
            s(&metrics),
            "--model-out",
            s(&model),
        ])
        .env("SPECGD_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn bench_writes_one_row_per_width() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 2_000, 4, "t.sgd");
    let out = dir.path().join("b.csv");
    ok(&specgd(&[
        "bench",
        "--data",
        s(&data),
        "--mode",
        "spec",
        "--iters",
        "3",
        "--s-list",
        "1,2",
        "--repeats",
        "1",
        "--out",
        s(&out),
    ]));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "s,repeats,mean_iter_ms,ratio_to_first,final_loss");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,1,"));
    assert!(lines[2].starts_with("2,1,"));
}

#[test]
fn missing_or_damaged_data_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let (metrics, model) = (dir.path().join("m.csv"), dir.path().join("w.bin"));
    let nope = dir.path().join("nope.sgd");
    assert_eq!(
        code(&specgd(&[
            "train",
            "--data",
            s(&nope),
            "--metrics-out",
            s(&metrics),
            "--model-out",
            s(&model)
        ])),
        3
    );

    let data = gen(dir.path(), 600, 3, "t.sgd");
    let mut bytes = fs::read(&data).unwrap();
    let last = bytes.len() - 10;
    bytes[last] ^= 1;
    fs::write(&data, bytes).unwrap();
    assert_eq!(
        code(&specgd(&[
            "train",
            "--data",
            s(&data),
            "--metrics-out",
            s(&metrics),
            "--model-out",
            s(&model)
        ])),
        3
    );
}

#[test]
fn divergence_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 600, 3, "t.sgd");
    let (metrics, model) = (dir.path().join("m.csv"), dir.path().join("w.bin"));
    let out = specgd(&[
        "train",
        "--data",
        s(&data),
        "--task",
        "lr",
        "--method",
        "igd",
        "--alpha",
        "1.7e308",
        "--iters",
        "2",
        "--metrics-out",
        s(&metrics),
        "--model-out",
        s(&model),
    ]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}
