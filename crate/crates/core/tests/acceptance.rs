//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line, written
//! straight to stdout so it shows without `--nocapture`.

mod common;

use std::io::Write;
use std::process::Command;
use std::time::Instant;

use common::*;
use cvheat::detection::{assignment_cost, evaluate_map, hungarian_match, iou, BBox, Detection};
use cvheat::graph::louvain::labels;
use cvheat::graph::{aggregate_contour_graph, filter_subgraphs, knn_edges, louvain_partition, GraphNode};
use cvheat::heat::{dct2, hco_apply, idct2, Diffusivity, FrequencyGrid};
use cvheat::nn::{GradCheckReport, Tensor};
use cvheat::pipeline::{build_dataset, train, PipelineConfig, TRAIN_TAG, VAL_TAG};
use rand::Rng;

fn report(id: usize, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "acceptance {id} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{}", line.trim_end());
}

/// Collects failed checks with a short description of each.
#[derive(Default)]
struct Failures(Vec<String>);

impl Failures {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.0.push(what());
        }
    }

    fn summary(&self) -> String {
        match self.0.first() {
            None => String::new(),
            Some(f) => format!("; {} failures, first: {f}", self.0.len()),
        }
    }
}

#[test]
fn criterion_1_spectral() {
    let start = Instant::now();
    let mut r = rng(1);
    let mut f = Failures::default();
    let (mut worst_rt, mut worst_parseval) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let (h, w) = (r.gen_range(1..=64), r.gen_range(1..=64));
        let x = rand_tensor(&mut r, &[h, w], -1.0, 1.0);
        let c = dct2(&x).unwrap();
        let rt = idct2(&c).unwrap().max_abs_diff(&x);
        let parseval = (c.norm_l2().powi(2) - x.norm_l2().powi(2)).abs();
        worst_rt = worst_rt.max(rt);
        worst_parseval = worst_parseval.max(parseval);
        f.check(rt <= 1e-9, || format!("roundtrip {rt:e} on input {i} ({h}x{w})"));
        f.check(parseval <= 1e-9, || format!("parseval {parseval:e} on input {i} ({h}x{w})"));

        let fg = FrequencyGrid::new(h, w);
        let k = Diffusivity::Scalar(r.gen_range(0.0..3.0));
        let (t1, t2) = (r.gen_range(0.0..2.0), r.gen_range(0.0..2.0));
        let id = hco_apply(&x, &Diffusivity::Scalar(0.0), t1, &fg).unwrap().max_abs_diff(&x);
        f.check(id <= 1e-9, || format!("k=0 identity off by {id:e}"));
        let y1 = hco_apply(&x, &k, t1, &fg).unwrap();
        let semi = hco_apply(&y1, &k, t2, &fg).unwrap().max_abs_diff(&hco_apply(&x, &k, t1 + t2, &fg).unwrap());
        f.check(semi <= 1e-6, || format!("semigroup off by {semi:e}"));
        f.check(y1.norm_l2() <= x.norm_l2() + 1e-12, || format!("energy grew on input {i}"));
        let mean = |t: &Tensor| t.sum() / t.len() as f64;
        f.check((mean(&y1) - mean(&x)).abs() <= 1e-9, || format!("mean moved on input {i}"));
        let flat = Tensor::full(&[h, w], r.gen_range(-2.0..2.0));
        let dc = hco_apply(&flat, &k, t1, &fg).unwrap().max_abs_diff(&flat);
        f.check(dc <= 1e-9, || format!("constant input changed by {dc:e}"));
    }
    let mut worst_naive = 0.0f64;
    for _ in 0..20 {
        let x = rand_tensor(&mut r, &[8, 8], -1.0, 1.0);
        let fast = dct2(&x).unwrap();
        let slow = naive_dct2(x.data(), 8, 8);
        let (k, t) = (r.gen_range(0.0..2.0), r.gen_range(0.0..2.0));
        let hco = hco_apply(&x, &Diffusivity::Scalar(k), t, &FrequencyGrid::new(8, 8)).unwrap();
        let naive = naive_hco(x.data(), 8, 8, k, t);
        for (a, b) in fast.data().iter().zip(&slow).chain(hco.data().iter().zip(&naive)) {
            worst_naive = worst_naive.max((a - b).abs());
        }
    }
    f.check(worst_naive <= 1e-9, || format!("brute-force DCT differs by {worst_naive:e}"));
    let secs = start.elapsed().as_secs_f64();
    f.check(secs < 10.0, || format!("took {secs:.1}s"));
    report(
        1,
        "spectral",
        f.0.is_empty(),
        &format!(
            "roundtrip {worst_rt:.1e}, parseval {worst_parseval:.1e}, brute force {worst_naive:.1e}, {secs:.2}s{}",
            f.summary()
        ),
    );
}

#[test]
fn criterion_2_graph() {
    let start = Instant::now();
    let mut r = rng(2);
    let mut f = Failures::default();
    let (mut small, mut exact) = (0, 0);
    for i in 0..500 {
        let g = random_graph(&mut r, 32);
        let n = g.nodes.len();
        let parts = louvain_partition(&g);
        let mut cover = vec![0; n];
        for p in &parts {
            p.iter().for_each(|&v| cover[v] += 1);
            f.check(induces_connected(p, &g.edges), || format!("graph {i}: community {p:?} disconnected"));
        }
        f.check(cover.iter().all(|&c| c == 1), || format!("graph {i}: not a disjoint cover"));
        let lab = labels(n, &parts);
        let certified = is_single_move_local_max(n, &g.edges, &lab, 1e-12);
        f.check(certified, || format!("graph {i}: a single move raises modularity"));
        if n <= 8 {
            small += 1;
            let best = brute_force_modularity(n, &g.edges);
            if (best - modularity_oracle(n, &g.edges, &lab)).abs() <= 1e-9 {
                exact += 1;
            }
        }

        let threshold = r.gen_range(1..=4);
        let k = r.gen_range(1..=4);
        let kept = filter_subgraphs(&parts, threshold);
        f.check(kept.iter().all(|s| parts.contains(s) && s.len() >= threshold), || {
            format!("graph {i}: kept community outside the partition")
        });
        let contour = aggregate_contour_graph(&g, &kept, k).unwrap();
        for (node, members) in contour.nodes.iter().zip(&kept) {
            for axis in 0..2 {
                let c: Vec<f64> = members.iter().map(|&m| g.nodes[m].pos[axis]).collect();
                let mean = c.iter().sum::<f64>() / c.len() as f64;
                let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let p = node.pos[axis];
                f.check((p - mean).abs() <= 1e-9 && p >= lo - 1e-9 && p <= hi + 1e-9, || {
                    format!("graph {i}: contour node outside its community")
                });
            }
        }
        let m = contour.nodes.len();
        f.check(
            contour.degree().iter().all(|&d| d >= k.min(m.saturating_sub(1))) && contour.edges.len() <= m * k,
            || format!("graph {i}: kNN degree bound violated"),
        );
    }
    let line = |x: f64| GraphNode { pos: [x, 0.0], feat: vec![] };
    f.check(knn_edges(&[line(0.0), line(1.0), line(5.0)], 1) == vec![(0, 1), (1, 2)], || {
        "kNN example".into()
    });
    let secs = start.elapsed().as_secs_f64();
    f.check(secs < 60.0, || format!("took {secs:.1}s"));
    report(
        2,
        "graph",
        f.0.is_empty(),
        &format!(
            "500 graphs, brute-force optimum on {exact}/{small} graphs of <= 8 nodes, rest certified single-move local maxima, {secs:.2}s{}",
            f.summary()
        ),
    );
}

#[test]
fn criterion_3_gradient() {
    let suites: [(&str, fn(u64) -> cvheat::Result<GradCheckReport>); 5] = [
        ("linear", grad_linear),
        ("dwconv", grad_dwconv),
        ("gcn", grad_gcn),
        ("hco", grad_hco),
        ("chco", grad_chco),
    ];
    let mut f = Failures::default();
    let mut parts = Vec::new();
    for (name, run) in suites {
        let all = merge((0..10).map(|seed| {
            let rep = run(seed).unwrap();
            f.check(rep.passed, || format!("{name} seed {seed}: {rep}"));
            rep
        }));
        parts.push(format!("{name} {} entries max rel {:.1e}", all.checked, all.max_rel_err));
    }
    report(3, "gradient", f.0.is_empty(), &format!("{}{}", parts.join(", "), f.summary()));
}

#[test]
fn criterion_4_matching() {
    let mut r = rng(4);
    let mut f = Failures::default();
    for i in 0..500 {
        let (n, m) = (r.gen_range(1..=7), r.gen_range(1..=7));
        let cost: Vec<f64> = (0..n * m).map(|_| r.gen_range(0..5) as f64 + r.gen_range(0.0..1.0)).collect();
        let pairs = hungarian_match(&cost, n, m).unwrap();
        let got = assignment_cost(&cost, m, &pairs);
        let best = brute_force_assignment(&cost, n, m);
        f.check(pairs.len() == n.min(m) && (got - best).abs() <= 1e-9, || {
            format!("matrix {i} ({n}x{m}): cost {got} vs optimum {best}")
        });
    }
    let a = BBox::from_corners(0.0, 0.0, 0.5, 0.5);
    let b = BBox::from_corners(0.25, 0.25, 0.75, 0.75);
    let far = BBox::from_corners(0.8, 0.8, 0.9, 0.9);
    f.check(iou(&a, &a) == 1.0, || format!("identical boxes give {}", iou(&a, &a)));
    f.check(iou(&a, &b) == 1.0 / 7.0, || format!("overlap case gives {}", iou(&a, &b)));
    f.check(iou(&a, &far) == 0.0, || format!("disjoint boxes give {}", iou(&a, &far)));
    report(4, "matching", f.0.is_empty(), &format!("500 matrices up to 7x7, iou 1, 1/7, 0{}", f.summary()));
}

#[test]
fn criterion_5_evaluator() {
    let det = |image_id, class, score, c: [f64; 4]| Detection {
        image_id,
        class,
        score,
        bbox: BBox::from_corners(c[0], c[1], c[2], c[3]),
    };
    let gts = vec![
        det(0, 0, 1.0, [0.1, 0.1, 0.3, 0.3]),
        det(0, 2, 1.0, [0.5, 0.5, 0.9, 0.8]),
        det(1, 1, 1.0, [0.2, 0.2, 0.6, 0.4]),
    ];
    let perfect = evaluate_map(&gts, &gts);
    let gt = [det(0, 0, 1.0, [0.0, 0.0, 1.0, 1.0])];
    let single = evaluate_map(&[det(0, 0, 0.9, [0.0, 0.0, 0.6, 1.0])], &gt);
    let pass = (perfect.map, perfect.map50, perfect.map75) == (1.0, 1.0, 1.0)
        && single.map50 == 1.0
        && single.map75 == 0.0;
    report(
        5,
        "evaluator",
        pass,
        &format!(
            "perfect mAP {}, IoU-0.6 mAP@50 {} mAP@75 {}",
            perfect.map, single.map50, single.map75
        ),
    );
}

const LEARNING_CONFIG: &str = "\
resolution = 128
depths = 1,1,2,1
widths = 32,32,32,32
queries = 20
steps = 2000
batch = 4
train_scenes = 256
val_scenes = 32
";

#[test]
fn criterion_6_learning() {
    let start = Instant::now();
    let mut cfg = PipelineConfig::parse(LEARNING_CONFIG).unwrap();
    let train_set = build_dataset(&cfg, cfg.train_scenes, TRAIN_TAG, cfg.flip).unwrap();
    let val_set = build_dataset(&cfg, cfg.val_scenes, VAL_TAG, false).unwrap();
    let mut run = |graphs: &str| {
        cfg.set("graphs", graphs).unwrap();
        let out = train(&cfg, &train_set, &val_set, None).unwrap();
        out.val_curve.last().unwrap().1
    };
    let with = run("all");
    let without = run("none");
    let secs = start.elapsed().as_secs_f64();
    report(
        6,
        "learning",
        with.map50 >= 0.5 && without.map50 < with.map50,
        &format!(
            "mAP@50 {:.4} with graphs, {:.4} without; mAP {:.4} vs {:.4}; {:.0}s",
            with.map50, without.map50, with.map, without.map, secs
        ),
    );
}

#[test]
fn criterion_7_determinism() {
    let cfg = "\
resolution = 64
depths = 1,1,1,1
widths = 16,16,16,16
queries = 10
steps = 12
batch = 2
train_scenes = 4
val_scenes = 2
";
    let run = |threads: &str| {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.cfg"), cfg).unwrap();
        let status = Command::new(env!("CARGO_BIN_EXE_cvheat"))
            .args(["train", "--threads", threads, "--config"])
            .arg(dir.path().join("run.cfg"))
            .arg("--out-dir")
            .arg(dir.path())
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
        (read("val_detections.txt"), read("loss.log"))
    };
    let (d1, l1) = run("1");
    let (d2, l2) = run("1");
    let (d3, l3) = run("2");
    let pass = !d1.is_empty() && !l1.is_empty() && d1 == d2 && l1 == l2 && d1 == d3 && l1 == l3;
    report(
        7,
        "determinism",
        pass,
        &format!("{} detection bytes, {} loss-log bytes, identical across reruns and thread counts", d1.len(), l1.len()),
    );
}
