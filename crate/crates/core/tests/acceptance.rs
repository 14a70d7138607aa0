//! End-to-end acceptance run: one PASS/FAIL line per criterion.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cellnas::autodiff::Tape;
use cellnas::cell::{Bottom, CellTemplate, CellType};
use cellnas::commands::{cmd_eval, cmd_retrain, cmd_search};
use cellnas::config::RunConfig;
use cellnas::eval::Protocol;
use cellnas::genotype::{derive_cell, derive_genotype, Provenance};
use cellnas::losses::joint_loss;
use cellnas::metrics::{
    normalized_precision, normalized_precision_curve, precision_at, precision_at_20, precision_curve, success_auc,
    success_curve, BBox, TrackRecord,
};
use cellnas::network::{Network, NetworkPlan};
use cellnas::nn::{Conv2d, Mode, ParamStore};
use cellnas::search::iteration_macs;
use cellnas::search_space::{mixed_op, partial_mixed_op, sample_mask, Candidate, ChannelMask, MixedEdge, OpKind, NUM_CANDIDATES};
use cellnas::Tensor;
use common::{
    grad_cases, oracle, random_alpha, random_batch, random_tensor, recount, rng, toy_config, toy_dataset, triplet_oracle,
    triplet_value, INSTANCES, TOLERANCE,
};
use rand::Rng;

const TRAIN: Mode = Mode::Train { update_stats: false };

type Outcome = Result<(), String>;

/// Writes past the test harness's output capture so the lines show in every run.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn check(ok: bool, msg: impl Into<String>) -> Outcome {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    for case in grad_cases() {
        let worst = (0..INSTANCES as u64).map(|s| (case.run)(s)).fold(0.0, f64::max);
        if !(worst < TOLERANCE) {
            failures.push(format!("{}: {worst:.3e}", case.name));
        }
    }
    check(failures.is_empty(), format!("mismatches {failures:?}"))?;
    let took = start.elapsed();
    check(took < Duration::from_secs(300), format!("took {took:?}"))
}

fn search_space_structure() -> Outcome {
    for (bottom, edges) in [(Bottom::Dual, 14), (Bottom::Single, 10)] {
        for ct in [CellType::Normal, CellType::Reduction] {
            let n = CellTemplate::new(bottom, ct).edges.len();
            check(n == edges, format!("{bottom} {ct}: {n} edges"))?;
        }
        let plan = NetworkPlan::new(bottom, 4, 2, 1, 8).map_err(|e| e.to_string())?;
        let net = Network::supernet(&plan, 0.25, &mut rng(1)).map_err(|e| e.to_string())?;
        let (a, _) = net.alphas().ok_or("supernet without alpha")?;
        check(a.shape() == [edges, NUM_CANDIDATES], format!("alpha shape {:?}", a.shape()))?;
        check(
            net.cell_op_counts().iter().all(|&n| n == edges * NUM_CANDIDATES),
            format!("op counts {:?}", net.cell_op_counts()),
        )?;
    }
    Ok(())
}

fn mixed_op_identities() -> Outcome {
    let mut r = rng(2);
    for stride in [1, 2] {
        let mut store = ParamStore::new();
        let cands: Vec<Candidate> = OpKind::ALL
            .iter()
            .map(|&k| Candidate::new(&mut store, &mut r, &format!("c.{k}"), k, 4, stride, false).unwrap())
            .collect();
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&[2, 4, 6, 6], &mut r));
        let outs: Vec<Tensor> = cands
            .iter()
            .map(|c| {
                let v = c.forward(&mut tape, &mut store, x, TRAIN).unwrap();
                tape.value(v).clone()
            })
            .collect();

        let uniform = tape.constant(Tensor::zeros(vec![NUM_CANDIDATES]));
        let y = mixed_op(&mut tape, &mut store, x, uniform, &cands, TRAIN).unwrap();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            let mean = outs.iter().map(|o| o.data()[i]).sum::<f64>() / NUM_CANDIDATES as f64;
            check((v - mean).abs() < 1e-6, format!("uniform alpha off by {}", (v - mean).abs()))?;
        }

        for pick in 0..NUM_CANDIDATES {
            let mut row = vec![0.0; NUM_CANDIDATES];
            row[pick] = 40.0;
            let a = tape.constant(Tensor::from_vec(row));
            let y = mixed_op(&mut tape, &mut store, x, a, &cands, TRAIN).unwrap();
            let d = tape.value(y).max_abs_diff(&outs[pick]);
            check(d < 1e-5, format!("dominant {pick}: {d}"))?;
        }

        let edge = MixedEdge::new(&mut store, &mut r, "e", 0, 4, stride, 1.0, false).unwrap();
        let a = tape.constant(random_tensor(&[NUM_CANDIDATES], &mut r));
        let p = partial_mixed_op(&mut tape, &mut store, x, a, &edge, &ChannelMask::full(0, 4), TRAIN).unwrap();
        let m = mixed_op(&mut tape, &mut store, x, a, &edge.candidates, TRAIN).unwrap();
        let d = tape.value(p).max_abs_diff(tape.value(m));
        check(d < 1e-6, format!("full mask differs by {d}"))?;
    }
    Ok(())
}

fn partial_channel_contract() -> Outcome {
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let edge = MixedEdge::new(&mut store, &mut r, "e", 0, 32, 1, 0.25, false).unwrap();
    check(edge.selected_channels() == 8, format!("{} channels selected", edge.selected_channels()))?;
    for _ in 0..20 {
        let mask = sample_mask(0, 32, 0.25, &mut r);
        check(mask.popcount() == 8, format!("mask selects {}", mask.popcount()))?;
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&[2, 32, 5, 5], &mut r));
        let a = tape.constant(random_tensor(&[NUM_CANDIDATES], &mut r));
        let y = partial_mixed_op(&mut tape, &mut store, x, a, &edge, &mask, TRAIN).unwrap();
        let (xv, yv) = (tape.value(x).data(), tape.value(y).data());
        for n in 0..2 {
            for ch in mask.unselected() {
                let off = (n * 32 + ch) * 25;
                let same = xv[off..off + 25].iter().zip(&yv[off..off + 25]).all(|(p, q)| p.to_bits() == q.to_bits());
                check(same, format!("channel {ch} altered"))?;
            }
        }
    }
    let config = toy_config();
    let ds = toy_dataset(&config);
    let masked = iteration_macs(&config, &ds, 0.25).map_err(|e| e.to_string())?;
    let unmasked = iteration_macs(&config, &ds, 1.0).map_err(|e| e.to_string())?;
    check(masked < unmasked, format!("masked {masked} vs unmasked {unmasked}"))
}

fn derivation_oracle() -> Outcome {
    let mut r = rng(11);
    for i in 0..1000 {
        let bottom = if i % 2 == 0 { Bottom::Dual } else { Bottom::Single };
        let plan = NetworkPlan::new(bottom, 2, 2, 1, 4).unwrap();
        let edges = CellTemplate::new(bottom, CellType::Normal).edges.len();
        let (a_n, a_r) = (random_alpha(edges, &mut r), random_alpha(edges, &mut r));
        let g = derive_genotype(&a_n, &a_r, plan.genotype_shape(), Provenance::default()).map_err(|e| e.to_string())?;
        g.validate().map_err(|e| format!("draw {i}: {e}"))?;
        check(g.normal_edges == oracle(&a_n, &CellTemplate::new(bottom, CellType::Normal)), format!("draw {i} normal"))?;
        check(
            g.reduction_edges == oracle(&a_r, &CellTemplate::new(bottom, CellType::Reduction)),
            format!("draw {i} reduction"),
        )?;
    }
    for bottom in [Bottom::Single, Bottom::Dual] {
        let t = CellTemplate::new(bottom, CellType::Normal);
        let kept = derive_cell(&Tensor::zeros(vec![t.edges.len(), NUM_CANDIDATES]), &t).unwrap();
        check(kept.iter().all(|e| e.op == OpKind::MaxPool3x3), "uniform ties pick max_pool_3x3")?;
        for to in t.intermediate_nodes() {
            let froms: Vec<usize> = kept.iter().filter(|e| e.to == to).map(|e| e.from).collect();
            check(froms == (0..bottom.inputs()).collect::<Vec<_>>(), format!("node {to} keeps {froms:?}"))?;
        }
    }
    Ok(())
}

fn loss_oracles() -> Outcome {
    for seed in 0..200 {
        let (rows, labels, margin) = random_batch(seed);
        let (got, want) = (triplet_value(&rows, &labels, margin), triplet_oracle(&rows, &labels, margin));
        check((got - want).abs() <= 1e-6, format!("batch {seed}: {got} vs {want}"))?;
    }
    for (m, n, margin) in [(2, 2, 0.3), (8, 8, 0.3)] {
        let rows = vec![vec![0.5, -1.0]; m * n];
        let labels: Vec<usize> = (0..m).flat_map(|id| std::iter::repeat_n(id, n)).collect();
        let got = triplet_value(&rows, &labels, margin);
        check(got == (m * n) as f64 * margin, format!("identical {m}x{n}: {got}"))?;
    }
    for gamma in [0.0, 0.5, 1.0] {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1.0));
        let t = tape.constant(Tensor::scalar(2.0));
        let e = tape.constant(Tensor::scalar(4.0));
        let j = joint_loss(&mut tape, c, t, e, gamma).unwrap();
        check(tape.value(j).item() == 3.0 + 4.0 * gamma, format!("gamma {gamma}"))?;
    }
    Ok(())
}

/// Files under `dir`, relative, sorted.
fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// File contents with any `wall_ms` column removed.
fn without_timing(text: &str) -> String {
    let Some(header) = text.lines().find(|l| l.split(',').any(|c| c == "wall_ms")) else {
        return text.to_string();
    };
    let col = header.split(',').position(|c| c == "wall_ms").unwrap();
    let width = header.split(',').count();
    text.lines()
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() == width {
                cells.iter().enumerate().filter(|(i, _)| *i != col).map(|(_, c)| *c).collect::<Vec<_>>().join(",")
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

struct DeskRun {
    took: Duration,
    first_loss: f64,
    last_loss: f64,
    embedding_auc: f64,
    random_auc: f64,
}

fn desk_pipeline(config: &RunConfig, root: &Path) -> Result<DeskRun, String> {
    let e = |e: cellnas::Error| e.to_string();
    let start = Instant::now();
    let search = cmd_search(config, &root.join("search"), None).map_err(e)?;
    let retrain = cmd_retrain(config, &search.genotype_path, &root.join("retrain"), None).map_err(e)?;
    let emb = cmd_eval(config, Some(&retrain.weights_path), Protocol::Embedding, &root.join("eval_embedding")).map_err(e)?;
    let took = start.elapsed();
    let random = cmd_eval(config, None, Protocol::Random, &root.join("eval_random")).map_err(e)?;
    Ok(DeskRun {
        took,
        first_loss: retrain.history.first().ok_or("no retrain epochs")?.losses.total,
        last_loss: retrain.history.last().unwrap().losses.total,
        embedding_auc: emb.success,
        random_auc: random.success,
    })
}

fn desk_run() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let config = RunConfig::load(&path).map_err(|e| e.to_string())?;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = desk_pipeline(&config, a.path())?;
    report(&format!(
        "  desk run: {:.0} s, retrain loss {:.4} -> {:.4}, success {:.3} vs random {:.3}",
        first.took.as_secs_f64(),
        first.first_loss,
        first.last_loss,
        first.embedding_auc,
        first.random_auc
    ));
    check(first.took < Duration::from_secs(1800), format!("took {:?}", first.took))?;
    check(
        first.last_loss <= 0.5 * first.first_loss,
        format!("loss {} -> {}", first.first_loss, first.last_loss),
    )?;
    check(
        first.embedding_auc - first.random_auc >= 0.3,
        format!("success {} vs random {}", first.embedding_auc, first.random_auc),
    )?;

    desk_pipeline(&config, b.path())?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    check(fa == fb, format!("artifact sets differ: {fa:?} vs {fb:?}"))?;
    for f in &fa {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        if x != y {
            let same = without_timing(&String::from_utf8_lossy(&x)) == without_timing(&String::from_utf8_lossy(&y));
            check(same, format!("{} differs between runs", f.display()))?;
        }
    }
    Ok(())
}

fn record(pred: Vec<BBox>, gt: Vec<BBox>) -> TrackRecord {
    TrackRecord {
        predicted: pred,
        ground_truth: gt,
        image_size: (128, 128),
    }
}

fn metric_suite() -> Outcome {
    let e = |e: cellnas::Error| e.to_string();
    let gt: Vec<BBox> = (0..12).map(|i| BBox::new(4.0 + i as f64, 10.0, 12.0, 20.0)).collect();
    let perfect = record(gt.clone(), gt.clone());
    check(precision_at_20(&perfect).map_err(e)? == 1.0, "perfect precision")?;
    check(success_auc(&perfect).map_err(e)? == 1.0, "perfect success")?;
    check(normalized_precision(&perfect).map_err(e)? == 1.0, "perfect normalized precision")?;

    let off = record(gt.iter().map(|b| b.translated(15.0, 20.0)).collect(), gt.clone());
    check(precision_at_20(&off).map_err(e)? == 0.0, "25 px off at 20")?;
    check(precision_at(&off, 30.0).map_err(e)? == 1.0, "25 px off at 30")?;

    let apart = record(gt.iter().map(|b| b.translated(60.0, 0.0)).collect(), gt.clone());
    check(success_auc(&apart).map_err(e)? == 0.0, "zero overlap")?;

    let half: Vec<BBox> = gt.iter().enumerate().map(|(i, b)| if i % 2 == 0 { *b } else { b.translated(60.0, 0.0) }).collect();
    check(success_auc(&record(half, gt.clone())).map_err(e)? == 0.5, "half overlap")?;

    let box68 = vec![BBox::new(0.0, 0.0, 6.0, 8.0); 4];
    let np = normalized_precision_curve(&record(box68.iter().map(|b| b.translated(3.0, 4.0)).collect(), box68)).map_err(e)?;
    let (last, rest) = np.curve.split_last().ok_or("empty curve")?;
    check(*last == (0.5, 1.0) && rest.iter().all(|p| p.1 == 0.0), "half-diagonal step")?;

    let mut r = rng(8);
    let random_box = |r: &mut cellnas::SeededRng| {
        BBox::new(r.random_range(0.0..200.0), r.random_range(0.0..200.0), r.random_range(1.0..100.0), r.random_range(1.0..100.0))
    };
    for _ in 0..200 {
        let n = r.random_range(1..40);
        let rec = TrackRecord {
            predicted: (0..n).map(|_| random_box(&mut r)).collect(),
            ground_truth: (0..n).map(|_| random_box(&mut r)).collect(),
            image_size: (300, 300),
        };
        let p = precision_curve(&rec).map_err(e)?;
        check(p.windows(2).all(|w| w[0].1 <= w[1].1), "precision curve not monotone")?;
        let s = success_curve(&rec).map_err(e)?;
        check(s.windows(2).all(|w| w[0].1 >= w[1].1), "success curve not monotone")?;
        let scaled = TrackRecord {
            predicted: rec.predicted.iter().map(|b| b.scaled(2.0)).collect(),
            ground_truth: rec.ground_truth.iter().map(|b| b.scaled(2.0)).collect(),
            image_size: (600, 600),
        };
        let (a, b) = (normalized_precision(&rec).map_err(e)?, normalized_precision(&scaled).map_err(e)?);
        check((a - b).abs() <= 1e-9, format!("scaling changed {a} to {b}"))?;
    }
    Ok(())
}

fn cost_counting() -> Outcome {
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, &mut rng(1), "c", 16, 16, 3, cellnas::autodiff::ConvGeom::simple(1, 1)).unwrap();
    check(conv.params() == 2304, format!("{} params", conv.params()))?;
    let (_, _, macs) = conv.cost(32, 32).map_err(|e| e.to_string())?;
    check(macs == 2_359_296, format!("{macs} MACs"))?;
    let mut r = rng(9);
    for i in 0..20 {
        let bottom = if i % 2 == 0 { Bottom::Dual } else { Bottom::Single };
        let plan = NetworkPlan::new(bottom, 4 + 2 * (i % 3), 2 + i % 5, 1 + i % 2, 16).unwrap();
        let edges = CellTemplate::new(bottom, CellType::Normal).edges.len();
        let (a_n, a_r) = (random_alpha(edges, &mut r), random_alpha(edges, &mut r));
        let g = derive_genotype(&a_n, &a_r, plan.genotype_shape(), Provenance::default()).unwrap();
        let net = Network::discrete(&g, &plan, &mut r).unwrap();
        let report = net.cost(32, 32).map_err(|e| e.to_string())?;
        let want = recount(&g, 16, 32);
        check((report.params(), report.macs()) == want, format!("net {i}: {:?} vs {want:?}", (report.params(), report.macs())))?;
    }
    Ok(())
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("search-space structure", search_space_structure),
        ("mixed-op identities", mixed_op_identities),
        ("partial-channel contract", partial_channel_contract),
        ("derivation oracle", derivation_oracle),
        ("loss oracles", loss_oracles),
        ("end-to-end desk run", desk_run),
        ("metric suite", metric_suite),
        ("cost counting", cost_counting),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => report(&format!("criterion {} ({name}): PASS [{secs:.1} s]", i + 1)),
            Err(msg) => {
                report(&format!("criterion {} ({name}): FAIL [{secs:.1} s] {msg}", i + 1));
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
