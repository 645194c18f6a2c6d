//! Acceptance run: every criterion is checked in sequence (timings must not
//! compete with other work) and reported on one line each.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use dbg_core::checkpoint;
use dbg_core::dataio::load_annotations;
use dbg_core::gradcheck;
use dbg_core::labels::{GtInstance, Interval, LabelSet};
use dbg_core::losses::{balanced_binary_loss, completeness_loss, sample_completeness_mask, smooth_l1};
use dbg_core::metrics::{activitynet_thresholds, auc_of_curve, average_recall, RecallCurve, VideoEval};
use dbg_core::model::{DbgModel, HiddenWidths, ModelConfig, ModelParameters};
use dbg_core::pfg::{PfgPlan, SamplingConfig};
use dbg_core::pipeline::parse_proposals_json;
use dbg_core::postprocess::{dense_candidates, soft_nms, FusedMaps, GridMapping, Proposal, SoftNmsConfig};
use dbg_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn dbg(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dbg"))
        .args(args)
        .output()
        .map_err(|e| format!("cannot start dbg: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "dbg {} exited with {:?}: {}",
            args.first().unwrap_or(&""),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

// 1 -------------------------------------------------------------------------

fn gradient_suite() -> Check {
    let t = Instant::now();
    let reports = gradcheck::run_all(0).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    for needed in ["conv1d", "pointwise_linear", "conv_collapse", "relu", "sigmoid", "sum", "mean", "pfg", "balanced_bce", "smooth_l1", "dbg total loss"] {
        ensure(reports.iter().any(|r| r.name.contains(needed)), || format!("no check covers {needed}"))?;
    }
    let e2e = reports.iter().find(|r| r.name.starts_with("dbg total loss")).unwrap();
    ensure(e2e.coordinates == 64, || format!("end-to-end used {} coordinates", e2e.coordinates))?;
    ensure(worst.max_rel_error < 1e-4, || format!("{} has relative error {:e}", worst.name, worst.max_rel_error))?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    let dir = tempfile::tempdir().unwrap();
    dbg(&["gradcheck", "--out", p(dir.path())])?;
    Ok(format!("{} checks, worst {:.2e} ({}), {secs:.2} s", reports.len(), worst.max_rel_error, worst.name))
}

// 2 -------------------------------------------------------------------------

/// Proposal features straight from the sampling equations, one entry at a time.
fn brute_force_pfg(f: &Tensor<f64>, nl: usize, nc: usize, nr: usize, k: f64) -> Vec<f64> {
    let (l, c) = (f.dim(0), f.dim(1));
    let n_total = nl + nc + nr;
    let mut out = vec![0.0; l * l * n_total * c];
    let value = |t: i64, ch: usize| -> Option<f64> {
        if t >= 0 && (t as usize) < l {
            Some(f.get2(t as usize, ch))
        } else {
            None
        }
    };
    for ts in 0..l {
        for te in 0..l {
            if ts >= te {
                continue;
            }
            let (s, e) = (ts as f64, te as f64);
            let dg = e - s;
            for n in 0..n_total {
                let x = if n < nl {
                    s - dg / k + (2.0 * dg / (k * (nl - 1) as f64)) * n as f64
                } else if n < nl + nc {
                    s + (dg / (nc - 1) as f64) * (n - nl) as f64
                } else {
                    e - dg / k + (2.0 * dg / (k * (nr - 1) as f64)) * (n - nl - nc) as f64
                };
                let tl = x.floor();
                let tr = tl + 1.0;
                let wl = tr - x;
                let wr = 1.0 - wl;
                for ch in 0..c {
                    let mut v = 0.0;
                    if let Some(a) = value(tl as i64, ch) {
                        v = wl * a;
                    }
                    if let Some(b) = value(tr as i64, ch) {
                        v += wr * b;
                    }
                    out[((ts * l + te) * n_total + n) * c + ch] = v;
                }
            }
        }
    }
    out
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn pfg_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (l, c) = (20, 3);
    let mut compared = 0usize;
    for cfg in [SamplingConfig::default(), SamplingConfig::new(4, 8, 4), SamplingConfig::new(0, 16, 0), SamplingConfig::new(8, 0, 8)] {
        let plan = PfgPlan::new(l, cfg).map_err(|e| e.to_string())?;
        for _ in 0..3 {
            let x = random_tensor(&mut rng, &[l, c]);
            let dense = plan.forward_dense(&x).map_err(|e| e.to_string())?;
            let oracle = brute_force_pfg(&x, cfg.left, cfg.center, cfg.right, cfg.k);
            let mismatch = dense.data().iter().zip(&oracle).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
            ensure(mismatch == 0, || format!("{} entries differ from the oracle for {}", mismatch, cfg.label()))?;
            compared += oracle.len();
        }
    }
    let plan = PfgPlan::new(l, SamplingConfig::default()).unwrap();
    let n = plan.samples();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x = random_tensor(&mut rng, &[l, c]);
        let g = random_tensor(&mut rng, &[l, l, n, c]);
        let lhs = plan.forward_dense(&x).unwrap().dot(&g);
        let rhs = x.dot(&plan.backward_dense(&g).unwrap());
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    ensure(worst <= 1e-10, || format!("adjointness error {worst:e}"))?;
    Ok(format!("{compared} entries bit-identical, adjointness worst {worst:.1e} over 50 trials"))
}

// 3 -------------------------------------------------------------------------

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let lo = if a.0 > b.0 { a.0 } else { b.0 };
    let hi = if a.1 < b.1 { a.1 } else { b.1 };
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

fn label_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_gc = 0.0f64;
    for trial in 0..100 {
        let l = rng.random_range(4..48usize);
        let count = rng.random_range(0..4usize);
        let gts: Vec<GtInstance> = (0..count)
            .map(|_| {
                // quarter-unit positions exercise the strict threshold ties
                let quantize = rng.random_bool(0.5);
                let quant = |v: f64| if quantize { (v * 4.0).round() / 4.0 } else { v };
                let s = quant(rng.random_range(0.0..l as f64 - 1.0));
                let len = quant(rng.random_range(0.25..(l as f64 / 2.0)));
                GtInstance::new(s, s + len.max(0.25)).unwrap()
            })
            .collect();
        let set = LabelSet::compute(&gts, l);
        let loc = |i: usize| (i as f64 - 0.5, i as f64 + 0.5);
        for i in 0..l {
            let want = gts.iter().any(|g| overlap(loc(i), (g.start, g.end)) / 1.0 > 0.5);
            ensure(set.actionness[i] == want, || format!("trial {trial}: g^a[{i}]"))?;
        }
        for i in 0..l {
            for j in 0..l {
                let gs = gts.iter().any(|g| overlap(loc(i), (g.start - 1.0, g.start + 1.0)) > 0.5);
                let ge = gts.iter().any(|g| overlap(loc(j), (g.end - 1.0, g.end + 1.0)) > 0.5);
                ensure(set.start[i * l + j] == gs, || format!("trial {trial}: g^s[{i}][{j}]"))?;
                ensure(set.end[i * l + j] == ge, || format!("trial {trial}: g^e[{i}][{j}]"))?;
                ensure(set.start[i * l + j] == set.start[i * l], || format!("trial {trial}: g^s row {i} not constant"))?;
                ensure(set.end[i * l + j] == set.end[j], || format!("trial {trial}: g^e column {j} not constant"))?;
                let gc = if i < j {
                    gts.iter()
                        .map(|g| {
                            let inter = overlap((i as f64, j as f64), (g.start, g.end));
                            inter / ((j - i) as f64 + (g.end - g.start) - inter)
                        })
                        .fold(0.0, f64::max)
                } else {
                    0.0
                };
                let got = set.completeness[i * l + j];
                if i >= j {
                    ensure(got == 0.0, || format!("trial {trial}: g^c[{i}][{j}] = {got} below the diagonal"))?;
                }
                worst_gc = worst_gc.max((got - gc).abs());
            }
        }
    }
    ensure(worst_gc <= 1e-12, || format!("g^c deviates by {worst_gc:e}"))?;
    Ok(format!("100 random sets, binaries exact, g^c worst {worst_gc:.1e}"))
}

// 4 -------------------------------------------------------------------------

fn loss_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..60usize);
        let mut labels: Vec<bool> = {
            let rate = rng.random_range(0.05..0.95);
            (0..n).map(|_| rng.random_bool(rate)).collect()
        };
        labels[0] = true;
        labels[1] = false;
        let (v, _) = balanced_binary_loss(&vec![0.5f64; n], &labels, None).map_err(|e| e.to_string())?;
        worst = worst.max((v - std::f64::consts::LN_2).abs());
    }
    ensure(worst <= 1e-12, || format!("balanced loss at p = 0.5 deviates from ln 2 by {worst:e}"))?;

    ensure(smooth_l1(0.5f64) == 0.125 && smooth_l1(2.0f64) == 1.5, || "smooth-L1 fixture values".into())?;
    let single = |x: f64| completeness_loss(&[x], &[0.0], &[true]).unwrap();
    ensure(single(0.5) == 0.125 && single(2.0) == 1.5, || "single-entry completeness loss fixtures".into())?;

    let cfg = ModelConfig {
        input_channels: 4,
        length: 10,
        widths: HiddenWidths {
            dsb_hidden: 12,
            dsb_out: 8,
            acr_hidden: 12,
            tbc_collapse: 16,
            tbc_hidden: 12,
        },
        sampling: SamplingConfig::new(4, 8, 4),
        seed: 4,
    };
    let model = DbgModel::<f64>::init(cfg).unwrap();
    let mut totals = 0;
    for _ in 0..20 {
        let x = random_tensor(&mut rng, &[10, 4]);
        let y = random_tensor(&mut rng, &[10, 4]);
        let s = rng.random_range(0.0..6.0);
        let labels = LabelSet::compute(&[GtInstance::new(s, s + rng.random_range(1.0..3.5)).unwrap()], 10);
        let mask = sample_completeness_mask(&labels.completeness, 10, &mut rng).unwrap().mask;
        let (b, _, _) = model.loss_and_gradients(&x, &y, &labels, &mask, 2.0).map_err(|e| e.to_string())?;
        let expected = 2.0 * b.actionness + b.start + b.end + b.completeness;
        ensure(b.total == expected, || format!("total {} vs 2·La+Ls+Le+Lc {}", b.total, expected))?;
        totals += 1;
    }
    Ok(format!("ln 2 worst {worst:.1e} over 200 labelings, smooth-L1 fixtures exact, total exact on {totals} passes"))
}

// 5 -------------------------------------------------------------------------

fn overfit(root: &Path) -> Check {
    let corpus = root.join("overfit-data");
    let train = root.join("overfit-train");
    let infer = root.join("overfit-infer");
    dbg(&["synth", "--out", p(&corpus), "--videos", "8", "--length", "32", "--channels", "16", "--actions", "2", "--seed", "0"])?;
    let features = corpus.join("features");
    let annotations = corpus.join("annotations.json");
    let t = Instant::now();
    dbg(&[
        "train", "--features-dir", p(&features), "--annotations", p(&annotations), "--mode", "rescale", "--L", "32", "--epochs", "200",
        "--batch-size", "4", "--threads", "1", "--out", p(&train),
    ])?;
    dbg(&[
        "infer", "--checkpoint", p(&train.join("checkpoint.bin")), "--features-dir", p(&features), "--annotations", p(&annotations),
        "--L", "32", "--snms-theta", "0.8", "--snms-eps", "0.75", "--threads", "1", "--out", p(&infer),
    ])?;
    let secs = t.elapsed().as_secs_f64();

    let csv = fs::read_to_string(train.join("loss.csv")).map_err(|e| e.to_string())?;
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "loss_total").ok_or("no loss_total column")?;
    let totals: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
    ensure(totals.len() == 200, || format!("{} epochs logged", totals.len()))?;
    let ratio = totals[199] / totals[0];

    let proposals = parse_proposals_json(&fs::read_to_string(infer.join("proposals.json")).unwrap()).map_err(|e| e.to_string())?;
    let videos: Vec<VideoEval> = load_annotations(&annotations)
        .unwrap()
        .into_iter()
        .map(|(id, rec)| VideoEval {
            proposals: proposals[&id].iter().map(|&(s, e, _)| Interval::new(s, e)).collect(),
            gts: rec.segments.iter().map(|&(s, e)| Interval::new(s, e)).collect(),
            id,
        })
        .collect();
    let ar10 = average_recall(&videos, 10, &[0.7]).unwrap();
    let detail = format!(
        "AR@10(IoU 0.7) {ar10:.3}, loss {:.4} -> {:.4} ({:.1}% of epoch 1), {secs:.0} s",
        totals[0],
        totals[199],
        100.0 * ratio
    );
    ensure(ar10 >= 0.9, || format!("AR@10 below 0.9: {detail}"))?;
    ensure(ratio < 0.25, || format!("loss ratio not below 25%: {detail}"))?;
    ensure(secs < 300.0, || format!("over 5 minutes: {detail}"))?;
    Ok(detail)
}

// 6 -------------------------------------------------------------------------

fn prop(s: f64, e: f64, score: f64) -> Proposal {
    Proposal {
        start: 0,
        end: 1,
        start_s: s,
        end_s: e,
        score,
        completeness: score,
        start_prob: 1.0,
        end_prob: 1.0,
    }
}

fn postprocess_fixtures() -> Check {
    let cfg = SoftNmsConfig { theta: 0.8, eps: 0.75, gated: true };
    let out = soft_nms(&[prop(2.0, 7.0, 0.9), prop(2.0, 7.0, 0.8)], &cfg).map_err(|e| e.to_string())?;
    let expected = 0.8 * (-1.0f64 / 0.75).exp();
    ensure((out[0].score - 0.9).abs() < 1e-15, || "top proposal changed".into())?;
    ensure((out[1].score - expected).abs() <= 1e-9, || format!("second rescored to {} not {expected}", out[1].score))?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for set in 0..1000 {
        let n = rng.random_range(1..40usize);
        let input: Vec<Proposal> = (0..n)
            .map(|_| {
                let s = rng.random_range(0.0..50.0);
                prop(s, s + rng.random_range(0.5..25.0), rng.random_range(0.0..1.0))
            })
            .collect();
        let cfg = SoftNmsConfig {
            theta: rng.random_range(0.0..1.0),
            eps: rng.random_range(0.05..2.0),
            gated: rng.random_bool(0.7),
        };
        let out = soft_nms(&input, &cfg).map_err(|e| e.to_string())?;
        ensure(out.len() == n, || format!("set {set}: size changed"))?;
        let mut used = vec![false; n];
        for q in &out {
            let k = (0..n).find(|&k| !used[k] && input[k].start_s == q.start_s && input[k].end_s == q.end_s && q.score <= input[k].score);
            let k = k.ok_or_else(|| format!("set {set}: a score increased or an endpoint moved"))?;
            used[k] = true;
        }
    }

    let mut counts = Vec::new();
    for l in [3usize, 32, 100] {
        let ones = Tensor::<f64>::full(&[l, l], 0.5);
        let maps = FusedMaps::new(&ones, &ones, &ones).map_err(|e| e.to_string())?;
        let n = dense_candidates(&maps, GridMapping::rescaled(l, l as f64)).len();
        ensure(n == l * (l - 1) / 2, || format!("L={l}: {n} candidates"))?;
        counts.push(n);
    }
    Ok(format!("rescored {:.6} (expected {expected:.6}), 1000 random sets monotone, candidates {counts:?}", out[1].score))
}

// 7 -------------------------------------------------------------------------

fn fixture_videos() -> Vec<VideoEval> {
    let iv = |s: f64, e: f64| Interval::new(s, e);
    vec![
        VideoEval { id: "a".into(), proposals: vec![iv(10.0, 20.0)], gts: vec![iv(10.0, 20.0)] },
        VideoEval {
            id: "b".into(),
            proposals: vec![iv(0.0, 8.2), iv(50.0, 60.0), iv(100.0, 110.0)],
            gts: vec![iv(0.0, 10.0), iv(50.0, 60.0)],
        },
        VideoEval { id: "c".into(), proposals: vec![iv(35.0, 45.0), iv(30.0, 38.8)], gts: vec![iv(30.0, 40.0)] },
    ]
}

/// Recall by direct matching: a ground truth counts when any of the first
/// `an` proposals reaches the threshold.
fn brute_force_ar(videos: &[VideoEval], an: usize, thresholds: &[f64]) -> f64 {
    let iou = |a: &Interval, b: &Interval| {
        let inter = overlap((a.start, a.end), (b.start, b.end));
        inter / ((a.end - a.start) + (b.end - b.start) - inter)
    };
    let mut sum = 0.0;
    for v in videos {
        let mut per_threshold = 0.0;
        for &t in thresholds {
            let hit = v.gts.iter().filter(|g| v.proposals.iter().take(an).any(|q| iou(q, g) >= t)).count();
            per_threshold += hit as f64 / v.gts.len() as f64;
        }
        sum += per_threshold / thresholds.len() as f64;
    }
    sum / videos.len() as f64
}

fn metric_fixtures(root: &Path) -> Check {
    let videos = fixture_videos();
    let th = activitynet_thresholds();
    let curve = RecallCurve::compute(&videos, &th, 100).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut oracle_curve = Vec::new();
    for an in 1..=100 {
        let want = brute_force_ar(&videos, an, &th);
        oracle_curve.push(want);
        worst = worst.max((curve.average_recall(an) - want).abs());
    }
    // hand values: AN=1 gives (1 + 0.35 + 0) / 3, AN>=2 gives (1 + 0.85 + 0.8) / 3
    worst = worst.max((oracle_curve[0] - 0.45).abs()).max((oracle_curve[1] - 2.65 / 3.0).abs());
    let interior: f64 = oracle_curve.iter().sum::<f64>() - 0.5 * (oracle_curve[0] + oracle_curve[99]);
    let oracle_auc = 100.0 * interior / 99.0;
    let auc = auc_of_curve(&curve.ar_curve()).unwrap();
    worst = worst.max((auc - oracle_auc).abs() / 100.0);
    ensure(worst <= 1e-12, || format!("AR/AUC deviate from the brute-force matcher by {worst:e}"))?;
    ensure(auc_of_curve(&[1.0; 100]).unwrap() == 100.0 && auc_of_curve(&[0.5; 100]).unwrap() == 50.0, || "AUC anchors".into())?;

    // the same fixture through the command line
    let dir = root.join("metric-fixture");
    fs::create_dir_all(&dir).unwrap();
    let mut ann = BTreeMap::new();
    let mut props = BTreeMap::new();
    for v in &videos {
        let segs: Vec<_> = v.gts.iter().map(|g| serde_json::json!({"segment": [g.start, g.end]})).collect();
        ann.insert(v.id.clone(), serde_json::json!({"duration_second": 120.0, "annotations": segs}));
        let n = v.proposals.len() as f64;
        let list: Vec<_> = v
            .proposals
            .iter()
            .enumerate()
            .map(|(k, q)| serde_json::json!({"start_s": q.start, "end_s": q.end, "score": 1.0 - k as f64 / n}))
            .collect();
        props.insert(v.id.clone(), list);
    }
    fs::write(dir.join("ann.json"), serde_json::to_string(&ann).unwrap()).unwrap();
    fs::write(dir.join("props.json"), serde_json::to_string(&props).unwrap()).unwrap();
    let out = dir.join("eval");
    dbg(&["eval", "--proposals", p(&dir.join("props.json")), "--annotations", p(&dir.join("ann.json")), "--out", p(&out)])?;
    let report = read_json(&out.join("report.json"))?;
    let cli_auc = report["auc"].as_f64().ok_or("report has no auc")?;
    ensure((cli_auc - oracle_auc).abs() <= 1e-10, || format!("dbg eval AUC {cli_auc} vs {oracle_auc}"))?;
    Ok(format!("AR@1 {:.4}, AR@2 {:.4}, AUC {oracle_auc:.4}, worst deviation {worst:.1e}", oracle_curve[0], oracle_curve[1]))
}

// 8 -------------------------------------------------------------------------

fn ablation(root: &Path) -> Check {
    let corpus = root.join("ablation-data");
    dbg(&[
        "synth", "--out", p(&corpus), "--videos", "48", "--length", "100", "--channels", "16", "--actions", "5", "--noise", "2.0", "--seed", "0",
    ])?;
    let out = root.join("ablation");
    let t = Instant::now();
    dbg(&[
        "ablate-pfg", "--features-dir", p(&corpus.join("features")), "--annotations", p(&corpus.join("annotations.json")),
        "--L", "100", "--epochs", "20", "--batch-size", "4", "--widths", "64,32,64,128,64", "--holdout", "0.5", "--seed", "0",
        "--threads", "1", "--out", p(&out),
    ])?;
    let secs = t.elapsed().as_secs_f64();
    let rows = read_json(&out.join("ablation.json"))?;
    let rows = rows.as_array().ok_or("ablation.json is not a list")?;
    let auc: BTreeMap<String, f64> = rows
        .iter()
        .map(|r| (r["sampling"].as_str().unwrap().to_string(), r["auc"].as_f64().unwrap()))
        .collect();
    for cfg in ["4/8/4", "6/12/6", "8/16/8", "10/20/10", "0/16/0", "8/0/8"] {
        ensure(auc.contains_key(cfg), || format!("configuration {cfg} missing"))?;
    }
    let (full, centre) = (auc["8/16/8"], auc["0/16/0"]);
    let table = auc.iter().map(|(k, v)| format!("{k}:{v:.2}")).collect::<Vec<_>>().join(" ");
    ensure(centre < full, || format!("0/16/0 AUC {centre:.2} not below 8/16/8 {full:.2} [{table}]"))?;
    Ok(format!("8/16/8 {full:.2} > 0/16/0 {centre:.2}; all: {table}; {secs:.0} s"))
}

// 9 -------------------------------------------------------------------------

fn performance(root: &Path) -> Check {
    let corpus = root.join("perf-data");
    dbg(&["synth", "--out", p(&corpus), "--videos", "1", "--length", "100", "--channels", "200", "--actions", "3"])?;
    let ckpt = root.join("perf.ckpt");
    let params = ModelParameters::<f32>::init(ModelConfig::new(200, 100, 9)).unwrap();
    checkpoint::save(&ckpt, &params, None).map_err(|e| e.to_string())?;
    let out = root.join("perf-infer");
    dbg(&[
        "infer", "--checkpoint", p(&ckpt), "--features-dir", p(&corpus.join("features")), "--annotations", p(&corpus.join("annotations.json")),
        "--precision", "f32", "--L", "100", "--threads", "1", "--save-maps", "false", "--out", p(&out),
    ])?;
    let manifest = read_json(&out.join("manifest.json"))?;
    let secs = manifest["timings"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["stage"] == "inference")
        .and_then(|s| s["seconds"].as_f64())
        .ok_or("no inference timing")?;
    let rss = manifest["peak_rss_bytes"].as_u64().ok_or("peak memory not reported")?;
    let mb = rss as f64 / (1024.0 * 1024.0);
    ensure(secs < 2.0, || format!("inference took {secs:.3} s"))?;
    ensure(mb < 512.0, || format!("peak resident memory {mb:.0} MB"))?;
    Ok(format!("forward + fusion + Soft-NMS {secs:.3} s, peak RSS {mb:.0} MB for the whole process"))
}

// 10 ------------------------------------------------------------------------

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let name = path.file_name().unwrap().to_string_lossy().into_owned();
                if name != "manifest.json" && name != "resolved.conf" {
                    out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
                }
            }
        }
    }
    out
}

fn same_outputs(a: &Path, b: &Path) -> Result<usize, String> {
    let (fa, fb) = (files_under(a), files_under(b));
    ensure(fa.keys().eq(fb.keys()), || format!("{} and {} hold different files", a.display(), b.display()))?;
    for (name, bytes) in &fa {
        ensure(fb[name] == *bytes, || format!("{} differs between reruns", name.display()))?;
    }
    Ok(fa.len())
}

fn determinism(root: &Path) -> Check {
    let corpus = root.join("det-data");
    dbg(&["synth", "--out", p(&corpus), "--videos", "4", "--length", "24", "--channels", "8", "--seed", "5"])?;
    let features = corpus.join("features");
    let annotations = corpus.join("annotations.json");
    let first = |name: &str| root.join(format!("det-{name}-1"));
    let second = |name: &str| root.join(format!("det-{name}-2"));
    dbg(&[
        "train", "--features-dir", p(&features), "--annotations", p(&annotations), "--L", "24", "--epochs", "3", "--batch-size", "2",
        "--widths", "32,16,32,64,32", "--seed", "7", "--threads", "1", "--out", p(&first("train")),
    ])?;
    dbg(&[
        "infer", "--checkpoint", p(&first("train").join("checkpoint.bin")), "--features-dir", p(&features), "--annotations", p(&annotations),
        "--threads", "1", "--out", p(&first("infer")),
    ])?;
    dbg(&[
        "eval", "--proposals", p(&first("infer").join("proposals.json")), "--annotations", p(&annotations), "--threads", "1", "--out",
        p(&first("eval")),
    ])?;
    let mut files = 0;
    for name in ["train", "infer", "eval"] {
        let conf = first(name).join("resolved.conf");
        dbg(&[name, "--config", p(&conf), "--out", p(&second(name))])?;
        files += same_outputs(&first(name), &second(name))?;
    }
    Ok(format!("train, infer and eval reruns from resolved settings: {files} output files bit-identical"))
}

/// Written to the process's stdout directly so the lines survive test output capture.
fn report(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let criteria: Vec<Criterion<'_>> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("PFG oracle and adjointness", Box::new(pfg_oracle)),
        ("label oracle", Box::new(label_oracle)),
        ("loss identities", Box::new(loss_identities)),
        ("overfit experiment", Box::new(|| overfit(root))),
        ("post-processing fixtures", Box::new(postprocess_fixtures)),
        ("metric fixtures", Box::new(|| metric_fixtures(root))),
        ("PFG ablation direction", Box::new(|| ablation(root))),
        ("inference budget", Box::new(|| performance(root))),
        ("determinism", Box::new(|| determinism(root))),
    ];
    let mut failed = Vec::new();
    for (k, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => report(format!("criterion {:>2} PASS  {name}: {detail}", k + 1)),
            Err(why) => {
                report(format!("criterion {:>2} FAIL  {name}: {why}", k + 1));
                failed.push(k + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
