use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aia_core::aia::{builtin_schedule, Provenance, TargetSchedule};
use aia_core::model::{build_model, ModelConfig, Task, TokenSequence};
use aia_core::tasks::{task_model_config, validate_layout, SampleOptions};

fn aia(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aia")).args(args).env("AIA_THREADS", "0").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).filter(|l| !l.starts_with('#')).map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

fn model_file(dir: &Path) -> PathBuf {
    let p = dir.join("model.aiac");
    build_model(&task_model_config()).unwrap().save(&p).unwrap();
    p
}

// Hand-assembled version-1 dump, independent of the library writer.
fn dump_bytes(samples: &[(Vec<u8>, Vec<Vec<f32>>)]) -> Vec<u8> {
    let mut b = b"ATTD".to_vec();
    b.extend(1u32.to_le_bytes());
    b.extend((samples.len() as u32).to_le_bytes());
    for (labels, rows) in samples {
        let t = labels.len() as u32;
        for d in [1, 1, t, t] {
            b.extend(d.to_le_bytes());
        }
        b.extend(labels);
        for v in rows.iter().flatten() {
            b.extend(v.to_le_bytes());
        }
    }
    b
}

fn hand_dump() -> Vec<u8> {
    // text, image, image: image rows put 0.5 and 0.4 on the text key
    let rows = vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0], vec![0.4, 0.3, 0.3]];
    dump_bytes(&[(vec![0, 1, 1], rows)])
}

#[test]
fn gen_data_is_deterministic_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for p in [&a, &b] {
        let o = aia(&["gen-data", "--seed", "9", "--count", "10", "--task", "generation", "--out", s(p)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let seqs: Vec<TokenSequence> =
        String::from_utf8(bytes).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(seqs.len(), 10);
    for seq in &seqs {
        assert_eq!(seq.task, Task::Generation);
        validate_layout(seq, SampleOptions::default()).unwrap();
    }
}

#[test]
fn gen_data_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    let o = aia(&["gen-data", "--count", "0", "--task", "und", "--out", s(&empty)]);
    assert!(o.status.success());
    assert!(std::fs::read(&empty).unwrap().is_empty());
    let o = aia(&["gen-data", "--count", "1", "--task", "und", "--out", "/nonexistent/dir/x.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    let doc = format!(
        "[model]\ndepth = 2\nheads = 2\ndim = 16\n\n[run]\nsteps = 4\nbatch_size = 2\neval_samples = 3\n\n[aia]\ncalibration_samples = 2\n{extra}"
    );
    std::fs::write(&p, doc).unwrap();
    p
}

#[test]
fn train_with_zero_lambda_logs_zero_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = dir.path().join("run");
    let o = aia(&["train", "--config", s(&cfg), "--out-dir", s(&out), "--lambda", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(out.join("runlog.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["aia"], 0.0);
    }
    for f in ["config.toml", "evals.jsonl", "final.aiac", "step_4.aiac", "profile_step_4_understanding.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn train_with_ratio_records_resolved_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = dir.path().join("run");
    let o = aia(&["train", "--config", s(&cfg), "--out-dir", s(&out), "--ratio", "50:1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let snap: toml::Value = toml::from_str(&std::fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    let lambda = snap["resolved_lambda"].as_float().unwrap();
    assert!(lambda > 0.0);
    assert_eq!(snap["aia"]["weight"].as_str(), Some("50:1"));
    // the snapshot is itself a loadable config once the resolved value is dropped
    let mut table = snap.as_table().unwrap().clone();
    table.remove("resolved_lambda");
    aia_core::train::TrainConfig::from_document(&toml::to_string(&table).unwrap()).unwrap();
}

#[test]
fn train_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = dir.path().join("run");
    let o = aia(&["train", "--config", s(&cfg), "--out-dir", s(&out), "--regime", "post"]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[run\nsteps = ").unwrap();
    assert_eq!(aia(&["train", "--config", s(&bad), "--out-dir", s(&out)]).status.code(), Some(2));
    std::fs::write(&bad, "[run]\nstepz = 3\n").unwrap();
    assert_eq!(aia(&["train", "--config", s(&bad), "--out-dir", s(&out)]).status.code(), Some(2));
    let o = aia(&["train", "--config", s(&cfg), "--out-dir", s(&out), "--lambda", "1", "--ratio", "1:1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "\n[optim]\nlr = 1e300\nclip_norm = 0\n");
    let o = aia(&["train", "--config", s(&cfg), "--out-dir", s(&dir.path().join("run")), "--steps", "20"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged at step"));
}

#[test]
fn profile_shapes_and_identical_samples() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = model_file(dir.path());
    let o = aia(&["profile", "--checkpoint", s(&ckpt), "--task", "generation", "--samples", "2", "--identical"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = text(&o);
    assert!(csv.starts_with("layer,task,mean,std,n\n"));
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), task_model_config().depth);
    assert!(rows.iter().all(|r| r[3].parse::<f64>().unwrap() == 0.0 && r[4] == "2"));
    assert!(csv.lines().last().unwrap().starts_with("# scalar_std="));
}

#[test]
fn profile_rejects_foreign_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("other.aiac");
    build_model(&ModelConfig { text_vocab: 40, ..task_model_config() }).unwrap().save(&p).unwrap();
    let o = aia(&["profile", "--checkpoint", s(&p), "--task", "generation", "--samples", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = aia(&["profile", "--checkpoint", s(&dir.path().join("missing.aiac")), "--task", "generation"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ingest_hand_built_dump() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("hand.attd");
    std::fs::write(&p, hand_dump()).unwrap();
    let o = aia(&["ingest", "--dump", s(&p)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = data_rows(&text(&o));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "generation");
    let mean: f64 = rows[0][2].parse().unwrap();
    assert!((mean - 0.45).abs() < 1e-7, "{mean}");
}

#[test]
fn ingest_rejects_bad_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.attd");

    std::fs::write(&p, b"PNG\x00garbage").unwrap();
    let o = aia(&["ingest", "--dump", s(&p)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not an attention dump"));

    let good = hand_dump();
    std::fs::write(&p, &good[..good.len() - 5]).unwrap();
    assert_eq!(aia(&["ingest", "--dump", s(&p)]).status.code(), Some(2));

    let ok_rows = vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0], vec![0.4, 0.3, 0.3]];
    let bad_rows = vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.4, 0.0], vec![0.4, 0.3, 0.3]];
    std::fs::write(&p, dump_bytes(&[(vec![0, 1, 1], ok_rows), (vec![0, 1, 1], bad_rows)])).unwrap();
    let o = aia(&["ingest", "--dump", s(&p)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sample 1"), "{}", stderr(&o));
}

#[test]
fn dump_then_ingest_equals_profile() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = model_file(dir.path());
    let dump = dir.path().join("m.attd");
    for task in ["generation", "understanding"] {
        let o = aia(&["dump", "--checkpoint", s(&ckpt), "--task", task, "--samples", "6", "--out", s(&dump)]);
        assert!(o.status.success());
        let ingested = text(&aia(&["ingest", "--dump", s(&dump)]));
        let direct = text(&aia(&["profile", "--checkpoint", s(&ckpt), "--task", task, "--samples", "6"]));
        for (a, b) in data_rows(&ingested).iter().zip(data_rows(&direct)) {
            let (x, y): (f64, f64) = (a[2].parse().unwrap(), b[2].parse().unwrap());
            assert!((x - y).abs() < 1e-12);
            assert_eq!(a[1], b[1]);
        }
    }
}

#[test]
fn targets_documents_and_rescaling() {
    let dir = tempfile::tempdir().unwrap();
    let doc = dir.path().join("emu3_gen.toml");
    let o = aia(&["targets", "--provenance", "emu3", "--task", "generation", "--depth", "8", "--out", s(&doc)]);
    assert!(o.status.success());
    let schedule = TargetSchedule::from_document(&std::fs::read_to_string(&doc).unwrap()).unwrap();
    assert_eq!(schedule, builtin_schedule(Provenance::Emu3, Task::Generation).unwrap());
    let rows = data_rows(&std::fs::read_to_string(doc.with_extension("csv")).unwrap());
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[3][1], "12");
    assert_eq!((rows[3][2].parse::<f64>().unwrap(), rows[3][3].parse::<f64>().unwrap()), (0.4, 0.1));

    // at the reference depth every row is a direct lookup
    let o = aia(&["targets", "--provenance", "janus_pro", "--task", "understanding", "--depth", "30"]);
    let out = text(&o);
    let csv = &out[out.find("layer,").unwrap()..];
    let janus = builtin_schedule(Provenance::JanusPro, Task::Understanding).unwrap();
    for (l, row) in data_rows(csv).iter().enumerate() {
        let want = janus.lookup(l).unwrap();
        assert_eq!(row[1], l.to_string());
        assert_eq!((row[2].parse::<f64>().unwrap(), row[3].parse::<f64>().unwrap()), (want.target, want.delta));
    }

    let o = aia(&["targets", "--provenance", "bogus", "--task", "generation"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn plot_is_deterministic_and_matches_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p.csv");
    std::fs::write(&csv, "layer,task,mean,std,n\n0,generation,0.3,0.01,5\n1,generation,0.5,0.02,5\n2,generation,0.2,0,5\n# scalar_std=1e-2\n").unwrap();
    let sched = dir.path().join("s.toml");
    assert!(aia(&["targets", "--provenance", "emu3", "--task", "generation", "--out", s(&sched)]).status.success());
    let (a, b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    for out in [&a, &b] {
        let o = aia(&["plot", "--csv", s(&csv), "--targets", s(&sched), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let svg = std::fs::read_to_string(&a).unwrap();
    assert_eq!(svg, std::fs::read_to_string(&b).unwrap());
    let poly = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
    let points = poly.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
    assert_eq!(points.split(' ').count(), 3);

    let bands = aia_core::aia::rescale_schedule(&builtin_schedule(Provenance::Emu3, Task::Generation).unwrap(), 3).unwrap();
    let rects: Vec<&str> = svg.lines().filter(|l| l.contains("data-layer=")).collect();
    assert_eq!(rects.len(), 3);
    for (rect, band) in rects.iter().zip(&bands) {
        let attr = |name: &str| -> f64 {
            let start = rect.find(&format!("{name}=\"")).unwrap() + name.len() + 2;
            rect[start..].split('"').next().unwrap().parse().unwrap()
        };
        assert_eq!(attr("data-lo"), band.target - band.delta);
        assert_eq!(attr("data-hi"), band.target + band.delta);
    }

    std::fs::write(&csv, "layer,task,mean\n0,generation,0.3\n").unwrap();
    assert_eq!(aia(&["plot", "--csv", s(&csv), "--out", s(&a)]).status.code(), Some(2));
}

#[test]
fn gradcheck_reports_three_losses() {
    let o = aia(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0));
    let report = text(&o);
    for name in ["ntp", "aia", "combined"] {
        assert!(report.lines().any(|l| l.starts_with(name)), "{report}");
    }
    assert_eq!(aia(&["gradcheck", "--corrupt-gradient"]).status.code(), Some(1));
    assert_eq!(aia(&["gradcheck", "--heads", "3", "--dim", "16"]).status.code(), Some(2));
}

#[test]
fn example_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    let cfg = aia_core::train::TrainConfig::from_document(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(cfg.run.steps, 2000);
}
