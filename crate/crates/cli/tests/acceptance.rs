use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsms::config::RunConfig;
use wsms::cost::{count_params, stage_overhead};
use wsms::data::{decode_records, encode_records, load_cifar, CifarVariant};
use wsms::gradcheck::{tiny_wsms_densenet, tiny_wsms_resnet};
use wsms::nn::{Forward, Mode, ParamId, ParamStore};
use wsms::tensor::{Graph, Tensor};
use wsms::wsms::{build_wsms, image_pyramid, ForwardOptions, WsmsNet, WsmsSpec};

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Verdict {
    status: Status,
    detail: String,
}

impl Verdict {
    fn check(ok: bool, detail: impl Into<String>) -> Self {
        let status = if ok { Status::Pass } else { Status::Fail };
        Verdict { status, detail: detail.into() }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Verdict { status: Status::Fail, detail: detail.into() }
    }
}

type Outcome = Result<Verdict, String>;

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(name)
}

fn wsms_cmd(args: &[&str]) -> Result<(Output, Duration), String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_wsms"))
        .args(args)
        .output()
        .map_err(|e| format!("spawn wsms: {e}"))?;
    Ok((out, start.elapsed()))
}

fn load(name: &str) -> Result<WsmsSpec, String> {
    RunConfig::load(&preset(name)).map(|c| c.model).map_err(|e| format!("{name}: {e}"))
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target
}

/// Counts presets against reference totals in millions, timing `wsms count`.
fn param_table(rows: &[(&str, f64)]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for &(name, expected) in rows {
        let report = count_params(&load(name)?).map_err(|e| e.to_string())?;
        let m = report.total_params as f64 / 1e6;
        let (out, took) = wsms_cmd(&["count", preset(name).to_str().unwrap()])?;
        let good = out.status.success() && within(m, expected, 0.02) && took < Duration::from_secs(1);
        ok &= good;
        parts.push(format!(
            "{}={:.3}M/{expected}M {:.0}ms{}",
            name.trim_end_matches(".cfg"),
            m,
            took.as_secs_f64() * 1e3,
            if good { "" } else { " !" }
        ));
    }
    Ok(Verdict::check(ok, parts.join(", ")))
}

fn c1() -> Outcome {
    param_table(&[
        ("resnet110.cfg", 1.73),
        ("resnet116.cfg", 1.82),
        ("resnet122.cfg", 1.92),
        ("wsms-resnet110-none.cfg", 1.73),
        ("wsms-resnet110-1x1.cfg", 1.75),
        ("wsms-resnet110-3x3.cfg", 1.86),
        ("ms-resnet110-1x1.cfg", 2.23),
    ])
}

fn c2() -> Outcome {
    param_table(&[
        ("densenet24.cfg", 27.2),
        ("densenet26.cfg", 31.9),
        ("wsms-densenet24-none.cfg", 27.4),
        ("wsms-densenet24-1x1.cfg", 28.0),
        ("wsms-densenet24-3x3.cfg", 32.7),
        ("ms-densenet24-1x1.cfg", 41.3),
    ])
}

fn c3() -> Outcome {
    let mults = |name: &str| -> Result<f64, String> {
        Ok(count_params(&load(name)?).map_err(|e| e.to_string())?.total_mults as f64 / 1e6)
    };
    let (r, wr) = (mults("resnet110.cfg")?, mults("wsms-resnet110-1x1.cfg")?);
    let (d, wd) = (mults("densenet24.cfg")?, mults("wsms-densenet24-1x1.cfg")?);
    let increase = wr / r - 1.0;
    let overhead = stage_overhead(&load("wsms-resnet110-1x1.cfg")?).map_err(|e| e.to_string())?;
    let ok = within(r, 252.0, 0.05)
        && within(wr, 301.0, 0.05)
        && (0.15..=0.25).contains(&increase)
        && within(d, 6889.0, 0.05)
        && within(wd, 8454.0, 0.05)
        && overhead[0] < 0.25;
    Ok(Verdict::check(
        ok,
        format!(
            "resnet {r:.1}M wsms {wr:.1}M (+{:.1}%), densenet {d:.0}M wsms {wd:.0}M, stage2/stage1 {:.4}",
            100.0 * increase,
            overhead[0]
        ),
    ))
}

fn c4() -> Outcome {
    let resnet = load("wsms-resnet110-none.cfg")?.plan();
    let dense = load("wsms-densenet24-none.cfg")?.plan();
    let channels: Vec<usize> = dense.stages.iter().map(|s| s.out_channels).collect();
    let ok = resnet.concat_channels == 112 && channels == [2320, 1552, 784] && dense.concat_channels == 4656;
    Ok(Verdict::check(
        ok,
        format!(
            "resnet concat {}, densenet stages {channels:?} concat {}",
            resnet.concat_channels, dense.concat_channels
        ),
    ))
}

fn c5() -> Outcome {
    let (out, took) = wsms_cmd(&["gradcheck", "--seed", "0"])?;
    let text = String::from_utf8_lossy(&out.stdout);
    let last = text.lines().last().unwrap_or("");
    let err: f64 = last
        .split("max_rel_err=")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("unexpected gradcheck output: {last}"))?;
    let ok = out.status.success() && last.starts_with("PASS") && err <= 1e-4 && took < Duration::from_secs(120);
    Ok(Verdict::check(ok, format!("max_rel_err={err:.3e} in {:.1}s", took.as_secs_f64())))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random::<f64>() * 2.0 - 1.0)
}

fn loss_grads(
    net: &WsmsNet,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    live: Option<Vec<bool>>,
) -> Result<BTreeMap<ParamId, Tensor<f64>>, String> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let opts = ForwardOptions { trainable_stages: live, ..Default::default() };
    let logits = {
        let mut ctx = Forward::new(&mut g, store, Mode::Train);
        net.forward_traced(&mut ctx, xv, &opts).map_err(|e| e.to_string())?.logits
    };
    let labels: Vec<usize> = (0..x.shape()[0]).map(|i| i % 2).collect();
    let loss = g.softmax_cross_entropy(logits, &labels).map_err(|e| e.to_string())?;
    Ok(g.backward(loss).map_err(|e| e.to_string())?.into_params())
}

fn stage_outputs(net: &WsmsNet, store: &ParamStore<f64>, x: &Tensor<f64>) -> Result<Vec<Tensor<f64>>, String> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut ctx = Forward::new(&mut g, store, Mode::Eval);
    let trace = net.forward_traced(&mut ctx, xv, &ForwardOptions::default()).map_err(|e| e.to_string())?;
    Ok(trace.stage_outputs.iter().map(|&v| g.value(v).clone()).collect())
}

fn c6() -> Outcome {
    let mut worst_sum = 0.0f64;
    let mut bn_leaks = 0usize;
    let mut perturb_misses = 0usize;
    let mut perturbed_convs = 0usize;
    for (k, spec) in [tiny_wsms_resnet(), tiny_wsms_densenet()].into_iter().enumerate() {
        let spec = spec.map_err(|e| e.to_string())?;
        let seed = 40 + k as u64;
        let (net, store) = build_wsms::<f64>(&spec, &mut rng(seed)).map_err(|e| e.to_string())?;
        let size = spec.backbone.input_size;
        let x = random_tensor(&[3, 3, size, size], seed);
        let s = spec.stages;

        let full = loss_grads(&net, &store, &x, None)?;
        let isolated = (0..s)
            .map(|i| loss_grads(&net, &store, &x, Some((0..s).map(|j| j == i).collect())))
            .collect::<Result<Vec<_>, _>>()?;
        for st in 0..s {
            for conv in net.stages[st].convs() {
                let total = &full[&conv.weight];
                for (c, &v) in total.data().iter().enumerate() {
                    let sum: f64 = isolated.iter().filter_map(|g| g.get(&conv.weight)).map(|t| t.data()[c]).sum();
                    worst_sum = worst_sum.max((v - sum).abs());
                }
            }
        }

        for st in 1..=s {
            let own: BTreeSet<_> = net.stage_batch_norms(st).iter().map(|b| b.state).collect();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let updates = {
                let mut ctx = Forward::new(&mut g, &store, Mode::Train);
                let pyramid = image_pyramid(ctx.graph, xv, s).map_err(|e| e.to_string())?;
                net.stages[st - 1].forward(&mut ctx, pyramid[st - 1]).map_err(|e| e.to_string())?;
                ctx.take_bn_updates()
            };
            let mut after = store.clone();
            after.apply_bn_updates(&updates).map_err(|e| e.to_string())?;
            for (id, state) in after.bn_states() {
                if !own.contains(&id) && state != store.bn(id).map_err(|e| e.to_string())? {
                    bn_leaks += 1;
                }
            }
        }

        let base = stage_outputs(&net, &store, &x)?;
        for conv in net.stages[0].convs() {
            let mut perturbed = store.clone();
            let w = perturbed.tensor_mut(conv.weight).map_err(|e| e.to_string())?;
            w.data_mut().iter_mut().for_each(|v| *v += 0.25);
            let out = stage_outputs(&net, &perturbed, &x)?;
            perturbed_convs += 1;
            for st in 0..s {
                let contains = net.stages[st].convs().iter().any(|c| c.weight == conv.weight);
                if contains && out[st].max_abs_diff(&base[st]) == 0.0 {
                    perturb_misses += 1;
                }
            }
        }
    }
    let ok = worst_sum <= 1e-10 && bn_leaks == 0 && perturb_misses == 0;
    Ok(Verdict::check(
        ok,
        format!(
            "(a) max additivity gap {worst_sum:.2e}; (b) foreign running-stat changes {bn_leaks}; \
             (c) {perturbed_convs} shared convs perturbed, {perturb_misses} unchanged containing stages"
        ),
    ))
}

fn summary(dir: &Path) -> Result<serde_json::Value, String> {
    let text = fs::read_to_string(dir.join("summary.json")).map_err(|e| format!("{}: {e}", dir.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn train(cfg: &Path, seed: u64, out: &Path) -> Result<(f64, Duration), String> {
    let (o, took) = wsms_cmd(&[
        "train",
        cfg.to_str().unwrap(),
        "--deterministic",
        "--threads",
        "1",
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ])?;
    if !o.status.success() {
        return Err(format!("train {} failed: {}", cfg.display(), String::from_utf8_lossy(&o.stderr)));
    }
    let held_out = summary(out)?["final_extra"]["held_out"]
        .as_f64()
        .ok_or("summary lacks final_extra.held_out")?;
    Ok((held_out, took))
}

fn c7() -> Outcome {
    let wsms_cfg = preset("synth-wsms-tiny.cfg");
    let base_cfg = preset("synth-baseline-tiny.cfg");
    let pw = count_params(&load("synth-wsms-tiny.cfg")?).map_err(|e| e.to_string())?.total_params;
    let pb = count_params(&load("synth-baseline-tiny.cfg")?).map_err(|e| e.to_string())?.total_params;
    let matched = within(pw as f64, pb as f64, 0.02);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut wins = 0;
    let mut slowest = Duration::ZERO;
    let mut parts = Vec::new();
    for seed in 1..=5u64 {
        let (ew, tw) = train(&wsms_cfg, seed, &dir.path().join(format!("wsms-{seed}")))?;
        let (eb, tb) = train(&base_cfg, seed, &dir.path().join(format!("base-{seed}")))?;
        slowest = slowest.max(tw).max(tb);
        if ew < eb {
            wins += 1;
        }
        parts.push(format!("{ew:.1}/{eb:.1}"));
    }
    let ok = matched && wins >= 4 && slowest < Duration::from_secs(600);
    Ok(Verdict::check(
        ok,
        format!(
            "held-out error wsms/baseline per seed [{}], wins {wins}/5, params {pw} vs {pb}, slowest run {:.0}s",
            parts.join(", "),
            slowest.as_secs_f64()
        ),
    ))
}

fn cifar_root() -> Option<PathBuf> {
    let root = PathBuf::from(std::env::var_os("WSMS_DATA_ROOT")?);
    [root.join("cifar-10-batches-bin"), root.clone()]
        .into_iter()
        .any(|d| d.join("test_batch.bin").is_file())
        .then_some(root)
}

fn c8() -> Outcome {
    let Some(root) = cifar_root() else {
        return Ok(Verdict {
            status: Status::Skip,
            detail: "CIFAR-10 binaries not found under WSMS_DATA_ROOT".into(),
        });
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("cifar");
    let start = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_wsms"))
        .args(["train", preset("cifar-wsms-resnet20.cfg").to_str().unwrap(), "--seed", "1", "--out"])
        .arg(&out)
        .env("WSMS_DATA_ROOT", &root)
        .output()
        .map_err(|e| e.to_string())?;
    let took = start.elapsed();
    if !o.status.success() {
        return Ok(Verdict::fail(String::from_utf8_lossy(&o.stderr).trim().to_string()));
    }
    let err = summary(&out)?["final_test_error"].as_f64().ok_or("summary lacks final_test_error")?;
    Ok(Verdict::check(
        err < 40.0 && took < Duration::from_secs(1800),
        format!("test error {err:.2}% in {:.0}s", took.as_secs_f64()),
    ))
}

fn c9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("tiny.cfg");
    let text = fs::read_to_string(preset("synth-wsms-tiny.cfg")).map_err(|e| e.to_string())?;
    let text = text.replace("epochs = 30", "epochs = 2").replace("[21, 0.005]", "[2, 0.005]")
        + "train_per_class = 20\ntest_per_class = 10\n";
    fs::write(&cfg, text).map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&cfg, 3, &a)?;
    train(&cfg, 3, &b)?;
    let read = |p: PathBuf| fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    let same_metrics = read(a.join("metrics.jsonl"))? == read(b.join("metrics.jsonl"))?;

    let eval_csv = dir.path().join("eval.csv");
    let (o, _) = wsms_cmd(&[
        "eval",
        cfg.to_str().unwrap(),
        "--checkpoint",
        a.join("final.ckpt").to_str().unwrap(),
        "--csv",
        eval_csv.to_str().unwrap(),
    ])?;
    let stdout = String::from_utf8_lossy(&o.stdout);
    let reported: Option<f64> = stdout
        .split("test error ")
        .nth(1)
        .and_then(|s| s.split('%').next())
        .and_then(|s| s.parse().ok());
    let final_error = summary(&a)?["final_test_error"].as_f64();
    let same_eval = o.status.success()
        && reported.is_some()
        && reported == final_error
        && read(eval_csv)? == read(a.join("predictions.csv"))?;

    let mut r = rng(9);
    let mut round_trip = true;
    for variant in [CifarVariant::C10, CifarVariant::C100] {
        let mut bytes = Vec::new();
        for _ in 0..64 {
            if variant == CifarVariant::C100 {
                bytes.push(r.random_range(0..20u8));
            }
            bytes.push(r.random_range(0..variant.class_count() as u8));
            bytes.extend((0..3072).map(|_| r.random::<u8>()));
        }
        let ds = decode_records(&bytes, variant, 0).map_err(|e| e.to_string())?;
        round_trip &= encode_records(&ds, variant).map_err(|e| e.to_string())? == bytes;
    }
    let mut real = "";
    if let Some(root) = cifar_root() {
        let splits = load_cifar(&root, CifarVariant::C10).map_err(|e| e.to_string())?;
        let sub = root.join("cifar-10-batches-bin");
        let base = if sub.is_dir() { sub } else { root };
        round_trip &= encode_records(&splits.test, CifarVariant::C10).map_err(|e| e.to_string())?
            == read(base.join("test_batch.bin"))?;
        real = " (including the real CIFAR-10 test batch)";
    }
    Ok(Verdict::check(
        same_metrics && same_eval && round_trip,
        format!(
            "metrics identical {same_metrics}, checkpoint eval exact {same_eval}, decode round trip identical {round_trip}{real}"
        ),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("parameter counts, ResNet family", c1),
        ("parameter counts, DenseNet family", c2),
        ("multiplication counts", c3),
        ("channel arithmetic", c4),
        ("gradient correctness", c5),
        ("weight-sharing properties", c6),
        ("scale generalization on synthetic data", c7),
        ("CIFAR-10 subset smoke run", c8),
        ("determinism and persistence", c9),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let verdict = run().unwrap_or_else(Verdict::fail);
        let tag = match verdict.status {
            Status::Pass => "PASS",
            Status::Skip => "SKIP",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
        };
        println!("{tag} criterion {} {name}: {}", i + 1, verdict.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
