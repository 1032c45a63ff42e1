//! Acceptance suite: one test per criterion, each ending in a printed
//! `ACCEPTANCE C<n> PASS` line (run with `--nocapture` to see them).
//!
//! Library-level criteria call into `erasure-core` directly; pipeline-level
//! criteria drive the `erasure` binary exactly as a user would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::Instant;

use erasure_core::gradcheck::{check_gradients, FD_REL_TOL, FD_STEP};
use erasure_core::margin::{
    deviation_samples, effective_sparsity, enumerate_masks, fit_log_log_slope, holdout_grid,
    margin_report, random_setup, verify_top1, QDistribution, TheoremParams,
};
use erasure_core::metrics::sentence_bleu;
use erasure_core::model::{init_params, positional_encoding, Forward, ModelConfig, NoiseContext};
use erasure_core::num::rng::RngStream;
use erasure_core::num::{Matrix, Tape, Vector};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_erasure"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("erasure_acc_{}_{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn gen_corpus(dir: &Path, pairs: usize, seed: u64) -> PathBuf {
    let path = dir.join(format!("corpus_{pairs}_{seed}.tsv"));
    run_ok(&[
        "gen-corpus",
        "--pairs",
        &pairs.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        path.to_str().unwrap(),
    ]);
    path
}

#[test]
fn criterion_01_effective_sparsity_exactness() {
    let start = Instant::now();
    for d in [2usize, 64, 4096] {
        let uniform = Vector::from_vec(vec![1.0; d]).unwrap();
        let s_raw = effective_sparsity(&uniform).unwrap();
        assert!(
            (s_raw - d as f64).abs() <= 1e-9,
            "raw uniform d={d}: {s_raw}"
        );
        let unit = uniform.normalized().unwrap();
        let s_unit = effective_sparsity(&unit).unwrap();
        assert!(
            (s_unit - d as f64).abs() <= 1e-9,
            "unit uniform d={d}: {s_unit}"
        );
        let hot = Vector::one_hot(d, d / 3);
        let s_hot = effective_sparsity(&hot).unwrap();
        assert!((s_hot - 1.0).abs() <= 1e-9, "one-hot d={d}: {s_hot}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!("ACCEPTANCE C1 PASS - s_eff exact at d in {{2, 64, 4096}} ({elapsed:?})");
}

#[test]
fn criterion_02_oracle_agreement() {
    let start = Instant::now();
    let trials = 100_000u64;
    let ps = [0.3, 0.6, 0.9];
    let dists = [
        QDistribution::Uniform,
        QDistribution::PowerLaw { alpha: 0.5 },
        QDistribution::PowerLaw { alpha: 0.25 },
    ];
    let mut meta = RngStream::new(0xACC2, 0);
    let mut agreeing = 0usize;
    let total = 50usize;
    for i in 0..total {
        let d = 4 + meta.below(9) as usize; // 4..=12
        let m = 2 + meta.below(7) as usize; // 2..=8
        let p = ps[i % ps.len()];
        let q_dist = dists[i % dists.len()];
        let mut setup_rng = RngStream::new(0xACC2, 1 + i as u64);
        let setup = random_setup(d, m, q_dist, &mut setup_rng).unwrap();
        let exact = enumerate_masks(&setup, p).unwrap();
        let mc = verify_top1(&setup, p, trials, &RngStream::new(0xACC2, 100 + i as u64)).unwrap();
        let empirical = mc.flip_or_degenerate_rate();
        let r = exact.flip_or_degenerate;
        let se = (r * (1.0 - r) / trials as f64).sqrt();
        if (empirical - r).abs() <= 3.0 * se + 1e-9 {
            agreeing += 1;
        } else {
            eprintln!(
                "cell {i}: d={d} m={m} p={p}: exact {r:.5}, mc {empirical:.5}, se {se:.6}"
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(agreeing >= 48, "only {agreeing}/{total} cells agree");
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}");
    println!("ACCEPTANCE C2 PASS - {agreeing}/{total} Monte Carlo cells within 3 SE of enumeration ({elapsed:?})");
}

#[test]
fn criterion_03_scaling_law() {
    let start = Instant::now();
    let p_keep = 0.5;
    let mut points = Vec::new();
    for (i, d) in [20usize, 63, 200, 632, 2000, 6325, 20000].into_iter().enumerate() {
        let mut rng = RngStream::new(0xACC3, i as u64);
        let setup = random_setup(d, 32, QDistribution::Uniform, &mut rng).unwrap();
        let s_eff = effective_sparsity(setup.query()).unwrap();
        let x = p_keep * s_eff;
        assert!((10.0..=10_001.0).contains(&x), "grid point {x} out of range");
        let devs =
            deviation_samples(&setup, p_keep, 300, &RngStream::new(0xACC3, 100 + i as u64))
                .unwrap();
        let mut sorted = devs;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        points.push((x, median));
    }
    let slope = fit_log_log_slope(&points);
    let elapsed = start.elapsed();
    assert!(
        (-0.6..=-0.4).contains(&slope),
        "slope {slope} outside [-0.6, -0.4]; points {points:?}"
    );
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}");
    println!("ACCEPTANCE C3 PASS - median deviation scales with exponent {slope:.4} ({elapsed:?})");
}

#[test]
fn criterion_04_guarantee_soundness() {
    let start = Instant::now();
    let dir = tmp("c4");
    let constants = dir.join("constants.json");
    run_ok(&[
        "calibrate",
        "--grid",
        "default",
        "--trials",
        "2000",
        "--delta",
        "0.05",
        "--seed",
        "20260808",
        "--out",
        constants.to_str().unwrap(),
    ]);
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&constants).unwrap()).unwrap();
    let c = doc["c"].as_f64().unwrap();
    assert!(c > 0.0);

    let delta = 0.05;
    let trials = 10_000u64;
    let se = (delta * (1.0 - delta) / trials as f64).sqrt();
    let mut guaranteed_cells = 0usize;
    let mut passed = 0usize;
    for (i, cell) in holdout_grid().iter().enumerate() {
        let mut setup_rng = RngStream::new(0xACC4, i as u64);
        let setup = cell.build_setup(&mut setup_rng).unwrap();
        let params = TheoremParams::new(cell.p_keep, delta, c).unwrap();
        let report = margin_report(&setup, &params).unwrap();
        if !report.guaranteed {
            continue;
        }
        guaranteed_cells += 1;
        let mc = verify_top1(
            &setup,
            cell.p_keep,
            trials,
            &RngStream::new(0xACC4, 1000 + i as u64),
        )
        .unwrap();
        if mc.flip_rate <= delta + 3.0 * se {
            passed += 1;
        } else {
            eprintln!(
                "guaranteed cell {cell:?} flipped at rate {} (gamma {}, eps {})",
                mc.flip_rate, report.gamma, report.epsilon
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(guaranteed_cells > 0, "no holdout cell triggered the guarantee");
    assert_eq!(
        passed, guaranteed_cells,
        "{passed}/{guaranteed_cells} guaranteed cells held"
    );
    std::fs::remove_dir_all(&dir).ok();
    println!(
        "ACCEPTANCE C4 PASS - {passed}/{guaranteed_cells} guaranteed holdout cells stay under delta + 3 SE with C = {c:.4} ({elapsed:?})"
    );
}

fn fixture_train_args<'a>(
    data: &'a str,
    out_dir: &'a str,
    epochs: &'a str,
    extra: &[&'a str],
) -> Vec<&'a str> {
    let mut args = vec![
        "train",
        "--data",
        data,
        "--epochs",
        epochs,
        "--batch-size",
        "16",
        "--d-model",
        "64",
        "--n-heads",
        "4",
        "--n-layers",
        "2",
        "--d-ffn",
        "256",
        "--max-len",
        "12",
        "--val-fraction",
        "0.25",
        "--seed",
        "11",
        "--out-dir",
        out_dir,
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn criterion_05_identity_channel_equivalence() {
    let start = Instant::now();
    let dir = tmp("c5");
    let data = gen_corpus(&dir, 64, 5);
    let disabled = dir.join("disabled");
    let random0 = dir.join("random0");
    let threshold0 = dir.join("threshold0");
    run_ok(&fixture_train_args(
        data.to_str().unwrap(),
        disabled.to_str().unwrap(),
        "5",
        &["--disable-channel", "--awgn-std", "0"],
    ));
    run_ok(&fixture_train_args(
        data.to_str().unwrap(),
        random0.to_str().unwrap(),
        "5",
        &["--channel-mode", "random", "--p-erase", "0", "--awgn-std", "0"],
    ));
    run_ok(&fixture_train_args(
        data.to_str().unwrap(),
        threshold0.to_str().unwrap(),
        "5",
        &["--channel-mode", "threshold", "--cutoff", "0", "--awgn-std", "0"],
    ));
    let reference = std::fs::read(disabled.join("metrics.csv")).unwrap();
    assert_eq!(
        reference,
        std::fs::read(random0.join("metrics.csv")).unwrap(),
        "p_erase = 0 differs from the channel-disabled build"
    );
    assert_eq!(
        reference,
        std::fs::read(threshold0.join("metrics.csv")).unwrap(),
        "cutoff = 0 differs from the channel-disabled build"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}");
    std::fs::remove_dir_all(&dir).ok();
    println!("ACCEPTANCE C5 PASS - identity channel reproduces the channel-free build byte for byte ({elapsed:?})");
}

#[test]
fn criterion_06_gradient_checks() {
    let start = Instant::now();
    let mut rng = RngStream::new(0xACC6, 0);
    let mut randn = |rows: usize, cols: usize| {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.next_gaussian()).collect(),
        )
        .unwrap()
    };

    // every registered primitive against central differences
    let a = randn(3, 4);
    let b = randn(3, 4);
    check_gradients(&[a, b], |t, ids| {
        let s = t.add(ids[0], ids[1])?;
        let m = t.mul(s, ids[1])?;
        let sc = t.scale(m, -1.3);
        let r = t.relu(sc);
        Ok(t.sum(r))
    })
    .unwrap();

    let a = randn(3, 5);
    let b = randn(5, 2);
    let c = randn(4, 2);
    check_gradients(&[a, b, c], |t, ids| {
        let ab = t.matmul(ids[0], ids[1])?;
        let abc = t.matmul_bt(ab, ids[2])?;
        Ok(t.sum(abc))
    })
    .unwrap();

    let x = randn(4, 6);
    let w = randn(4, 6);
    check_gradients(&[x, w.clone()], |t, ids| {
        let s = t.softmax_rows(ids[0]);
        let weighted = t.mul(s, ids[1])?;
        Ok(t.sum(weighted))
    })
    .unwrap();

    let x = randn(3, 8);
    let gain = randn(1, 8);
    let bias = randn(1, 8);
    check_gradients(&[x, gain, bias], |t, ids| {
        let ln = t.layer_norm(ids[0], ids[1], ids[2])?;
        let sq = t.mul(ln, ln)?;
        Ok(t.sum(sq))
    })
    .unwrap();

    let table = randn(6, 4);
    check_gradients(&[table], |t, ids| {
        let e = t.embedding(ids[0], &[1, 3, 1, 5])?;
        let s = t.row_slice(e, 1, 2)?;
        let n = t.normalize_rows(s);
        Ok(t.sum(n))
    })
    .unwrap();

    let logits = randn(4, 7);
    check_gradients(&[logits], |t, ids| {
        t.cross_entropy_mean(ids[0], &[2, 6, 0, 3], &[true, false, true, true])
    })
    .unwrap();

    let q = randn(3, 4);
    let k = randn(5, 4);
    let v = randn(5, 4);
    check_gradients(&[q, k, v], |t, ids| {
        let (out, _) =
            erasure_core::model::scaled_dot_attention(t, ids[0], ids[1], ids[2], None)?;
        Ok(t.sum(out))
    })
    .unwrap();

    // the full two-sentence batch loss against the same oracle, every
    // parameter entry
    let cfg = ModelConfig {
        d_model: 4,
        n_heads: 2,
        n_layers: 1,
        d_ffn: 8,
        max_len: 8,
        src_vocab: 7,
        tgt_vocab: 9,
    };
    let params = init_params::<f64>(&cfg, &RngStream::new(0xACC6, 1));
    let pe = positional_encoding::<f64>(cfg.max_len, cfg.d_model);
    let batch: [(&[u32], &[u32], &[u32]); 2] = [
        (&[4, 5, 6, 2], &[1, 4, 5], &[4, 5, 2]),
        (&[5, 6, 2], &[1, 7, 8, 6], &[7, 8, 6, 2]),
    ];
    let total_tokens: usize = batch.iter().map(|(_, _, t)| t.len()).sum();

    let loss_of = |p: &erasure_core::model::ModelParams<f64>| -> f64 {
        let fwd = Forward::new(&cfg, p, &pe);
        let mut tape = Tape::new();
        let mut acc = None;
        for (src, dec, tgt) in &batch {
            let mut noise = NoiseContext::silent();
            let out = fwd.sequence_loss(&mut tape, src, dec, tgt, &mut noise).unwrap();
            let weighted = tape.scale(out.loss, tgt.len() as f64 / total_tokens as f64);
            acc = Some(match acc {
                None => weighted,
                Some(prev) => tape.add(prev, weighted).unwrap(),
            });
        }
        tape.value(acc.unwrap()).get(0, 0)
    };

    // analytic pass
    let fwd = Forward::new(&cfg, &params, &pe);
    let mut tape = Tape::new();
    let mut acc = None;
    for (src, dec, tgt) in &batch {
        let mut noise = NoiseContext::silent();
        let out = fwd.sequence_loss(&mut tape, src, dec, tgt, &mut noise).unwrap();
        let weighted = tape.scale(out.loss, tgt.len() as f64 / total_tokens as f64);
        acc = Some(match acc {
            None => weighted,
            Some(prev) => tape.add(prev, weighted).unwrap(),
        });
    }
    let mut grads = tape.backward(acc.unwrap()).unwrap();
    let analytic = fwd.param_gradients(&mut grads);

    let mut tensor_idx = 0usize;
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    params.visit(&mut |name, tensor| {
        for entry in 0..tensor.data().len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut i = 0usize;
            plus.visit_mut(&mut |slot| {
                if i == tensor_idx {
                    Arc::make_mut(slot).data_mut()[entry] += FD_STEP;
                }
                i += 1;
            });
            i = 0;
            minus.visit_mut(&mut |slot| {
                if i == tensor_idx {
                    Arc::make_mut(slot).data_mut()[entry] -= FD_STEP;
                }
                i += 1;
            });
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * FD_STEP);
            let a = analytic[tensor_idx].data()[entry];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            let rel = ((a - numeric) / denom).abs();
            worst = worst.max(rel);
            assert!(
                rel <= FD_REL_TOL,
                "{name}[{entry}]: analytic {a}, numeric {numeric}, rel {rel:.2e}"
            );
            checked += 1;
        }
        tensor_idx += 1;
    });
    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE C6 PASS - primitives and the {checked}-entry batch loss match finite differences (worst rel {worst:.2e}) ({elapsed:?})"
    );
}

#[test]
fn criterion_07_degradation_trend() {
    let start = Instant::now();
    let dir = tmp("c7");
    let data = gen_corpus(&dir, 10_000, 42);
    let sweep_dir = dir.join("sweep");
    let out = bin()
        .args([
            "sweep",
            "--data",
            data.to_str().unwrap(),
            "--p-list",
            "0.0,0.2,0.5,0.8",
            "--awgn",
            "both",
            "--channel-mode",
            "random",
            "--epochs",
            "30",
            "--batch-size",
            "64",
            "--d-model",
            "64",
            "--n-heads",
            "4",
            "--n-layers",
            "2",
            "--d-ffn",
            "256",
            "--max-len",
            "12",
            "--val-fraction",
            "0.1",
            "--seed",
            "7",
            "--out-dir",
            sweep_dir.to_str().unwrap(),
        ])
        .output()
        .expect("sweep runs");
    assert!(
        out.status.success(),
        "sweep failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let csv = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    let mut clean: Vec<(f64, f64, f64)> = Vec::new(); // (p, acc, bleu)
    let mut noisy: Vec<(f64, f64)> = Vec::new(); // (p, acc)
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let p: f64 = f[0].parse().unwrap();
        let awgn = f[1] == "1";
        let acc: f64 = f[2].parse().unwrap();
        let bleu: f64 = f[3].parse().unwrap();
        assert_eq!(f[6], "ok", "cell p={p} awgn={awgn} failed");
        assert!(acc.is_finite() && bleu.is_finite());
        if awgn {
            noisy.push((p, acc));
        } else {
            clean.push((p, acc, bleu));
        }
    }
    clean.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    noisy.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    assert_eq!(clean.len(), 4);
    assert_eq!(noisy.len(), 4);

    // (a) noise-free accuracy strictly decreasing in p (Spearman rho = -1)
    for w in clean.windows(2) {
        assert!(
            w[1].1 < w[0].1,
            "noise-free accuracy not strictly decreasing: {clean:?}"
        );
    }
    let ranks: Vec<usize> = {
        let mut idx: Vec<usize> = (0..clean.len()).collect();
        idx.sort_by(|&i, &j| clean[i].1.partial_cmp(&clean[j].1).unwrap());
        let mut r = vec![0usize; clean.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank;
        }
        r
    };
    let n = clean.len() as f64;
    let d_sq: f64 = ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let d = (clean.len() - 1 - i) as f64 - r as f64;
            d * d
        })
        .sum();
    let spearman = 1.0 - 6.0 * d_sq / (n * (n * n - 1.0));
    assert_eq!(spearman, -1.0, "Spearman rho {spearman} != -1");

    // (b) the noisy run never beats the clean run at the same p
    for ((cp, cacc, _), (np, nacc)) in clean.iter().zip(&noisy) {
        assert_eq!(cp, np);
        assert!(
            nacc <= cacc,
            "AWGN accuracy {nacc} above noise-free {cacc} at p = {cp}"
        );
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 7200.0, "took {elapsed:?}");
    std::fs::remove_dir_all(&dir).ok();
    println!(
        "ACCEPTANCE C7 PASS - noise-free accuracy strictly decreasing {:?}, AWGN paired below at each p ({elapsed:?})",
        clean.iter().map(|(p, a, _)| format!("p{p}: {a:.3}")).collect::<Vec<_>>()
    );
}

#[test]
fn criterion_08_overfit_oracle() {
    let start = Instant::now();
    let dir = tmp("c8");
    let data = dir.join("single.tsv");
    run_ok(&[
        "gen-corpus",
        "--single-pair",
        "--out",
        data.to_str().unwrap(),
    ]);
    let run = dir.join("run");
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "200",
        "--batch-size",
        "1",
        "--val-fraction",
        "0",
        "--d-model",
        "32",
        "--n-heads",
        "2",
        "--n-layers",
        "1",
        "--d-ffn",
        "64",
        "--max-len",
        "16",
        "--warmup",
        "40",
        "--seed",
        "21",
        "--out-dir",
        run.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let last_val: Vec<&str> = csv
        .lines()
        .filter(|l| l.split(',').nth(1) == Some("val"))
        .next_back()
        .unwrap()
        .split(',')
        .collect();
    let loss: f64 = last_val[2].parse().unwrap();
    let acc: f64 = last_val[3].parse().unwrap();
    let bleu: f64 = last_val[4].parse().unwrap();
    assert!(loss < 0.1, "loss {loss} >= 0.1 after 200 steps");
    assert_eq!(acc, 1.0, "accuracy {acc} != 1.0");
    assert!((bleu - 100.0).abs() < 1e-6, "BLEU {bleu} != 100");
    let elapsed = start.elapsed();
    std::fs::remove_dir_all(&dir).ok();
    println!("ACCEPTANCE C8 PASS - single pair memorized within 200 steps (loss {loss:.4}) ({elapsed:?})");
}

#[test]
fn criterion_09_determinism() {
    let start = Instant::now();
    let dir = tmp("c9");

    // verify: same flags and seed, different worker counts
    let verify_out = |threads: &str, path: &Path| {
        let out = bin()
            .args([
                "verify", "--d", "128", "--m", "8", "--p-keep", "0.7", "--trials", "20000",
                "--seed", "17", "--out",
            ])
            .arg(path)
            .env("RAYON_NUM_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
        out.stdout
    };
    let a = verify_out("1", &dir.join("v1.json"));
    let b = verify_out("3", &dir.join("v2.json"));
    assert_eq!(a, b, "verify stdout depends on worker count");
    assert_eq!(
        std::fs::read(dir.join("v1.json")).unwrap(),
        std::fs::read(dir.join("v2.json")).unwrap()
    );

    // calibrate: byte-identical constants file across reruns and workers
    for (threads, name) in [("1", "c1.json"), ("3", "c2.json")] {
        let out = bin()
            .args([
                "calibrate", "--grid", "holdout", "--trials", "300", "--seed", "9", "--out",
            ])
            .arg(dir.join(name))
            .env("RAYON_NUM_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    assert_eq!(
        std::fs::read(dir.join("c1.json")).unwrap(),
        std::fs::read(dir.join("c2.json")).unwrap()
    );

    // train + sweep: identical CSV/SVG/checkpoint bytes across reruns and
    // worker counts
    let data = gen_corpus(&dir, 48, 13);
    for (threads, sub) in [("1", "s1"), ("3", "s2")] {
        let out = bin()
            .args([
                "sweep",
                "--data",
                data.to_str().unwrap(),
                "--p-list",
                "0.0,0.5",
                "--awgn",
                "off",
                "--channel-mode",
                "random",
                "--epochs",
                "2",
                "--batch-size",
                "16",
                "--d-model",
                "32",
                "--n-heads",
                "2",
                "--n-layers",
                "1",
                "--d-ffn",
                "64",
                "--max-len",
                "12",
                "--val-fraction",
                "0.25",
                "--seed",
                "3",
                "--out-dir",
            ])
            .arg(dir.join(sub))
            .env("RAYON_NUM_THREADS", threads)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for rel in [
        "sweep.csv",
        "accuracy.svg",
        "bleu.svg",
        "p0.00_awgn0/metrics.csv",
        "p0.00_awgn0/model.ckpt",
        "p0.50_awgn0/metrics.csv",
        "p0.50_awgn0/model.ckpt",
    ] {
        assert_eq!(
            std::fs::read(dir.join("s1").join(rel)).unwrap(),
            std::fs::read(dir.join("s2").join(rel)).unwrap(),
            "{rel} depends on worker count"
        );
    }
    let elapsed = start.elapsed();
    std::fs::remove_dir_all(&dir).ok();
    println!("ACCEPTANCE C9 PASS - verify/calibrate/train/sweep outputs byte-identical across reruns and worker counts ({elapsed:?})");
}

#[test]
fn criterion_10_metric_sanity() {
    let start = Instant::now();
    for len in 1..=50usize {
        let x: Vec<String> = (0..len).map(|i| format!("tok{i}")).collect();
        let score = sentence_bleu(&x, &x, 4);
        assert!(
            (score - 100.0).abs() < 1e-9,
            "identity BLEU at len {len}: {score}"
        );
    }
    for vocab in [7usize, 1000, 4321] {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Matrix::zeros(2, vocab));
        let loss = tape
            .cross_entropy_mean(logits, &[0, (vocab - 1) as u32], &[true, true])
            .unwrap();
        let got = tape.value(loss).get(0, 0);
        let expected = (vocab as f64).ln();
        assert!(
            (got - expected).abs() <= 1e-6,
            "uniform CE at V={vocab}: {got} vs {expected}"
        );
    }
    let elapsed = start.elapsed();
    println!("ACCEPTANCE C10 PASS - BLEU identity = 100 for 1..=50, uniform CE = ln(V) ({elapsed:?})");
}
