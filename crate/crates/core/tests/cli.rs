//! End-to-end runs of the `emgse` binary on a tiny corpus.

use emgse::corpus::{CorpusDir, Split};
use emgse::dsp::read_wav;
use emgse::metrics::{Metric, MetricReport, SnrCell, ALL_KINDS};
use emgse::se::SeConfig;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CORPUS: &str = "\
corpus.train=2
corpus.val=1
corpus.test=1
corpus.min_secs=1.0
corpus.max_secs=1.2
emg.conv_channels=4 4 8
emg.d_model=8
emg.heads=2
emg.layers=1
emg.ffn=16
emg.prenet=8
emg.lstm_hidden=8
emg.gl_iters=4
emg_train.encoder_steps=3
emg_train.decoder_steps=3
emg_train.val_every=2
se.num_tf_blocks=1
se.channels=4
se.d_state=2
se_train.steps=3
se_train.crop=4000
se_train.batch_size=2
se_train.val_every=3
";

fn emgse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emgse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = emgse(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    emgse(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `root`, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

/// Minimal mono 16-bit PCM file, written by hand so that any rate works.
fn pcm16_wav(rate: u32, samples: &[i16]) -> Vec<u8> {
    let data = (samples.len() * 2) as u32;
    let mut b = Vec::with_capacity(44 + data as usize);
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&(36 + data).to_le_bytes());
    b.extend_from_slice(b"WAVEfmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&rate.to_le_bytes());
    b.extend_from_slice(&(rate * 2).to_le_bytes());
    b.extend_from_slice(&2u16.to_le_bytes());
    b.extend_from_slice(&16u16.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&data.to_le_bytes());
    samples
        .iter()
        .for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
    b
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = t.join("tiny.cfg");
    fs::write(&cfg, TINY_CORPUS).unwrap();
    let cfg = s(&cfg);

    // Corpus: deterministic, default SNR grid, noisy WAVs on request.
    let c1 = t.join("c1");
    let c2 = t.join("c2");
    ok(&[
        "synth-corpus",
        "--config",
        cfg,
        "--out",
        s(&c1),
        "--write-noisy",
    ]);
    ok(&[
        "synth-corpus",
        "--config",
        cfg,
        "--out",
        s(&c2),
        "--write-noisy",
    ]);
    let (t1, t2) = (tree(&c1), tree(&c2));
    assert!(t1.len() > 10);
    assert_eq!(t1, t2, "corpus synthesis is not deterministic");
    let dir = CorpusDir::open(&c1).unwrap();
    let snrs: BTreeSet<i64> = dir
        .manifest(Split::Train)
        .entries
        .iter()
        .map(|e| e.snr_db as i64)
        .collect();
    assert_eq!(snrs, BTreeSet::from([-10, -5, 0, 5, 10]));

    // Stage 1: CSV log and bit-identical reruns.
    let emg1 = t.join("emg1.ckpt");
    let emg2 = t.join("emg2.ckpt");
    let log1 = t.join("emg1.csv");
    let log2 = t.join("emg2.csv");
    for (ck, log) in [(&emg1, &log1), (&emg2, &log2)] {
        ok(&[
            "train-emg",
            "--config",
            cfg,
            "--corpus",
            s(&c1),
            "--out",
            s(ck),
            "--log",
            s(log),
        ]);
    }
    let log_text = fs::read_to_string(&log1).unwrap();
    let lines: Vec<&str> = log_text.lines().collect();
    assert_eq!(lines[0], "step,l_su,l_p,l_total,accuracy,dec_loss");
    assert_eq!(lines.len(), 4);
    assert_eq!(fs::read(&emg1).unwrap(), fs::read(&emg2).unwrap());
    assert_eq!(log_text, fs::read_to_string(&log2).unwrap());

    // Stage 2, uni-modal: parameter count printed and checked at startup.
    let ac = t.join("se_ac.ckpt");
    let ac_log = t.join("se_ac.csv");
    let out = ok(&[
        "train-se",
        "--config",
        cfg,
        "--corpus",
        s(&c1),
        "--out",
        s(&ac),
        "--log",
        s(&ac_log),
        "--se.multimodal",
        "false",
    ]);
    let expect = SeConfig {
        num_tf_blocks: 1,
        channels: 4,
        d_state: 2,
        multimodal: false,
        ..SeConfig::default()
    }
    .param_count();
    assert!(
        out.contains(&format!("{expect} parameters (closed form {expect})")),
        "{out}"
    );
    let se_log = fs::read_to_string(&ac_log).unwrap();
    assert!(se_log.starts_with("step,total,time,mag,complex,phase,grad_norm\n"));
    assert_eq!(se_log.lines().count(), 4);

    // Multimodal needs an auxiliary source.
    let mm = t.join("se_mm.ckpt");
    assert_eq!(
        code(&[
            "train-se",
            "--config",
            cfg,
            "--corpus",
            s(&c1),
            "--out",
            s(&mm)
        ]),
        2
    );
    ok(&[
        "train-se",
        "--config",
        cfg,
        "--corpus",
        s(&c1),
        "--out",
        s(&mm),
        "--stage1",
        s(&emg1),
    ]);

    // Enhancement of one test mixture.
    let entry = dir.manifest(Split::TestMatched).entries[0].clone();
    let noisy = c1
        .join("noisy")
        .join(format!("{}.wav", entry.mixture_name()));
    let clean = c1.join("clean").join(format!("{}.wav", entry.id));
    let emg = c1.join("emg").join(format!("{}.emg8", entry.id));
    let e1 = t.join("e1.wav");
    let e2 = t.join("e2.wav");
    for e in [&e1, &e2] {
        let out = ok(&[
            "enhance",
            "--checkpoint",
            s(&mm),
            "--noisy",
            s(&noisy),
            "--emg",
            s(&emg),
            "--stage1",
            s(&emg1),
            "--clean",
            s(&clean),
            "--out",
            s(e),
        ]);
        assert!(out.contains("STOI") && out.contains("SI-SDR"), "{out}");
    }
    assert_eq!(fs::read(&e1).unwrap(), fs::read(&e2).unwrap());
    let x = read_wav(&noisy).unwrap();
    assert_eq!(read_wav(&e1).unwrap().len(), x.len());

    let pt = t.join("pt.wav");
    ok(&[
        "enhance",
        "--checkpoint",
        s(&ac),
        "--noisy",
        s(&noisy),
        "--out",
        s(&pt),
        "--pass-through",
    ]);
    let y = read_wav(&pt).unwrap();
    let num: f64 = x
        .samples()
        .iter()
        .zip(y.samples())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let den: f64 = x.samples().iter().map(|a| a * a).sum();
    assert!(
        (num / den).sqrt() < 1e-6,
        "pass-through error {}",
        (num / den).sqrt()
    );

    let slow = t.join("8k.wav");
    fs::write(&slow, pcm16_wav(8000, &[1000; 8000])).unwrap();
    assert_eq!(
        code(&[
            "enhance",
            "--checkpoint",
            s(&ac),
            "--noisy",
            s(&slow),
            "--out",
            s(&pt)
        ]),
        3
    );
    assert_eq!(
        code(&[
            "enhance",
            "--checkpoint",
            s(&mm),
            "--noisy",
            s(&noisy),
            "--out",
            s(&pt)
        ]),
        2
    );

    // Evaluation report: full grid, averages, per-kind rows.
    let report_path = t.join("report.csv");
    ok(&[
        "eval",
        "--config",
        cfg,
        "--corpus",
        s(&c1),
        "--system",
        &format!("se_ac={}", s(&ac)),
        "--system",
        &format!("tf1={}", s(&mm)),
        "--stage1",
        s(&emg1),
        "--out",
        s(&report_path),
    ]);
    let report = MetricReport::from_csv(&fs::read_to_string(&report_path).unwrap()).unwrap();
    let cfg_c = dir.config();
    for (cond, grid) in [
        ("matched", &cfg_c.matched_snrs),
        ("mismatched", &cfg_c.mismatched_snrs),
    ] {
        for system in ["noisy", "se_ac", "tf1"] {
            for metric in [Metric::Stoi, Metric::SiSdr] {
                let rows: Vec<_> = report
                    .rows
                    .iter()
                    .filter(|r| {
                        r.condition == cond
                            && r.system == system
                            && r.metric == metric
                            && r.noise_kind == ALL_KINDS
                    })
                    .collect();
                assert_eq!(rows.len(), grid.len() + 1, "{cond} {system} {metric:?}");
                let per_snr: Vec<f64> = grid
                    .iter()
                    .map(|&db| {
                        let hits: Vec<_> =
                            rows.iter().filter(|r| r.snr == SnrCell::Db(db)).collect();
                        assert_eq!(hits.len(), 1, "{cond} {system} {db}");
                        hits[0].mean
                    })
                    .collect();
                let avg = rows.iter().find(|r| r.snr == SnrCell::Average).unwrap();
                let want = per_snr.iter().sum::<f64>() / per_snr.len() as f64;
                assert!((avg.mean - want).abs() < 1e-12);
            }
        }
    }
    let kinds: BTreeSet<&str> = report
        .rows
        .iter()
        .filter(|r| r.condition == "mismatched")
        .map(|r| r.noise_kind.as_str())
        .collect();
    assert_eq!(kinds.len(), cfg_c.mismatched_kinds.len() + 1);

    // A multimodal system without an auxiliary source is a config error.
    assert_eq!(
        code(&[
            "eval",
            "--config",
            cfg,
            "--corpus",
            s(&c1),
            "--system",
            &format!("tf1={}", s(&mm)),
            "--out",
            s(&report_path),
        ]),
        2
    );
}

#[test]
fn usage_and_config_failures_exit_with_code_2() {
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["selfcheck", "--se.bogus", "1"]), 2);
    assert_eq!(code(&["selfcheck", "--config", "/nonexistent/run.cfg"]), 2);
    assert_eq!(
        code(&[
            "train-se",
            "--corpus",
            "x",
            "--out",
            "y",
            "--se_train.lr",
            "-1",
            "--oracle"
        ]),
        2
    );
    assert!(emgse(&["--help"]).status.success());
}

#[test]
fn missing_corpus_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x.ckpt");
    assert_eq!(
        code(&[
            "train-emg",
            "--corpus",
            "/nonexistent/corpus",
            "--out",
            s(&out)
        ]),
        5
    );
}
