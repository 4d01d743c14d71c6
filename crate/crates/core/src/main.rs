use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};

use cvheat::detection::{read_detections, write_detections, GroundTruth};
use cvheat::event_io::{parse_events, write_events, Event};
use cvheat::nn::ParamStore;
use cvheat::pipeline::data::{encode_slice, make_view, slices_of};
use cvheat::pipeline::run::metrics_report;
use cvheat::pipeline::{
    build_dataset, derive_seed, evaluate, generate_synthetic, random_scene, run_pipeline, train, Detector,
    PipelineConfig, View, GEN_TAG, KEYS, TRAIN_TAG, VAL_TAG,
};

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn common_args(cmd: Command) -> Command {
    let mut cmd = cmd
        .arg(Arg::new("config").long("config").value_name("FILE").help("key = value configuration file"))
        .arg(Arg::new("out-dir").long("out-dir").value_name("DIR").default_value("out"));
    for key in KEYS {
        // `seed` is one of the keys, so `--seed` comes from here
        cmd = cmd.arg(
            Arg::new(*key)
                .long(flag(key))
                .value_name("VALUE")
                .help(format!("override config key {key}")),
        );
    }
    cmd
}

fn cli() -> Command {
    let events_arg = || Arg::new("events").long("events").value_name("FILE").help("x,y,t,p event file");
    let gt_arg = || Arg::new("gt").long("gt").value_name("FILE").help("ground-truth records, one slice per image id");
    let ckpt_arg = || Arg::new("checkpoint").long("checkpoint").value_name("FILE");
    let slice_arg = || Arg::new("slice").long("slice").value_name("INDEX").default_value("0");
    Command::new("cvheat")
        .about("Event-camera detection with contour-aware heat conduction")
        .subcommand_required(true)
        .subcommand(
            common_args(Command::new("gen").about("Write synthetic event streams and ground truth"))
                .arg(Arg::new("scenes").long("scenes").value_name("N").default_value("1")),
        )
        .subcommand(
            common_args(Command::new("graph").about("Dump the graphs built from one slice"))
                .arg(events_arg())
                .arg(slice_arg()),
        )
        .subcommand(
            common_args(Command::new("forward").about("Run one slice and write stage heat maps"))
                .arg(events_arg())
                .arg(ckpt_arg())
                .arg(slice_arg()),
        )
        .subcommand(common_args(Command::new("train").about("Train on synthetic scenes")))
        .subcommand(
            common_args(Command::new("eval").about("Evaluate a checkpoint"))
                .arg(ckpt_arg().required(true))
                .arg(events_arg())
                .arg(gt_arg())
                .arg(Arg::new("heat-maps").long("heat-maps").action(ArgAction::SetTrue)),
        )
        .subcommand(
            common_args(Command::new("ablate").about("Train and evaluate across values of one key"))
                .arg(Arg::new("axis").long("axis").value_name("KEY").required(true))
                .arg(
                    Arg::new("values")
                        .long("values")
                        .value_name("V1;V2;...")
                        .required(true)
                        .help("semicolon-separated values"),
                ),
        )
}

fn load_config(m: &ArgMatches) -> Result<PipelineConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => PipelineConfig::load(Path::new(p))?,
        None => PipelineConfig::default(),
    };
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(m: &ArgMatches) -> Result<PathBuf> {
    let dir = PathBuf::from(m.get_one::<String>("out-dir").expect("default"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn read_events(path: &str, cfg: &PipelineConfig) -> Result<Vec<Event>> {
    let f = fs::File::open(path).with_context(|| format!("opening {path}"))?;
    Ok(parse_events(BufReader::new(f), cfg.resolution, cfg.resolution)?)
}

/// Events from `--events`, or the first generated scene.
fn events_or_scene(m: &ArgMatches, cfg: &PipelineConfig) -> Result<(Vec<Event>, Option<Vec<Vec<GroundTruth>>>)> {
    match m.get_one::<String>("events") {
        Some(p) => Ok((read_events(p, cfg)?, None)),
        None => {
            let seed = derive_seed(cfg.seed, GEN_TAG, 0);
            let s = generate_synthetic(&random_scene(cfg, seed), cfg.scene_duration_us, cfg.slice_interval_us, seed)?;
            Ok((s.events, Some(s.ground_truth)))
        }
    }
}

fn gt_lines(gts: &[Vec<GroundTruth>]) -> Result<Vec<u8>> {
    let recs: Vec<_> = gts
        .iter()
        .enumerate()
        .flat_map(|(i, g)| {
            g.iter().map(move |g| cvheat::detection::Detection {
                image_id: i,
                class: g.class,
                score: 1.0,
                bbox: g.bbox,
            })
        })
        .collect();
    let mut buf = Vec::new();
    write_detections(&mut buf, &recs)?;
    Ok(buf)
}

fn read_gt(path: &str, slices: usize) -> Result<Vec<Vec<GroundTruth>>> {
    let f = fs::File::open(path).with_context(|| format!("opening {path}"))?;
    let recs = read_detections(BufReader::new(f))?;
    let n = recs.iter().map(|r| r.image_id + 1).max().unwrap_or(0).max(slices);
    let mut out = vec![Vec::new(); n];
    for r in recs {
        out[r.image_id].push(GroundTruth { class: r.class, bbox: r.bbox });
    }
    Ok(out)
}

fn model(cfg: &PipelineConfig, ckpt: Option<&String>) -> Result<(Detector, ParamStore)> {
    let mut store = ParamStore::new();
    let det = Detector::new(cfg, &mut store)?;
    if let Some(p) = ckpt {
        let f = fs::File::open(p).with_context(|| format!("opening {p}"))?;
        let saved = ParamStore::read_checkpoint(BufReader::new(f))?;
        store.load_from(&saved).with_context(|| format!("loading {p}"))?;
    }
    Ok((det, store))
}

fn slice_index(m: &ArgMatches) -> Result<usize> {
    m.get_one::<String>("slice").expect("default").parse().context("--slice")
}

fn cmd_gen(m: &ArgMatches, cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let n: usize = m.get_one::<String>("scenes").expect("default").parse().context("--scenes")?;
    for i in 0..n {
        let seed = derive_seed(cfg.seed, GEN_TAG, i as u64);
        let s = generate_synthetic(&random_scene(cfg, seed), cfg.scene_duration_us, cfg.slice_interval_us, seed)?;
        let mut buf = Vec::new();
        write_events(&s.events, &mut buf)?;
        fs::write(dir.join(format!("scene{i}.events")), buf)?;
        fs::write(dir.join(format!("scene{i}.gt")), gt_lines(&s.ground_truth)?)?;
        println!("scene {i}: {} events, {} slices", s.events.len(), s.ground_truth.len());
    }
    Ok(())
}

fn one_slice(m: &ArgMatches, cfg: &PipelineConfig) -> Result<(usize, View)> {
    let (events, gts) = events_or_scene(m, cfg)?;
    let idx = slice_index(m)?;
    let slices = slices_of(&events, cfg.slice_interval_us, idx + 1)?;
    let frame = encode_slice(cfg, &slices[idx])?;
    let g = gts.and_then(|g| g.get(idx).cloned()).unwrap_or_default();
    Ok((idx, make_view(cfg, frame, g)?))
}

fn cmd_graph(m: &ArgMatches, cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let (idx, view) = one_slice(m, cfg)?;
    let path = dir.join(format!("graph_slice{idx}.txt"));
    fs::write(&path, view.bundle.dump())?;
    println!(
        "slice {idx}: global {} nodes, {} subgraphs, contour {} nodes -> {}",
        view.bundle.global.len(),
        view.bundle.subgraphs.len(),
        view.bundle.contour.len(),
        path.display()
    );
    Ok(())
}

fn cmd_forward(m: &ArgMatches, cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let (idx, view) = one_slice(m, cfg)?;
    let (det, store) = model(cfg, m.get_one::<String>("checkpoint"))?;
    let (dets, feats) = det.detect(&store, &view.frame, &view.bundle, idx)?;
    for (s, f) in feats.iter().enumerate() {
        let (w, h, px) = cvheat::pipeline::heat_map(f)?;
        fs::write(dir.join(format!("slice{idx}_stage{s}.pgm")), cvheat::pipeline::pgm_text(w, h, &px))?;
    }
    let mut buf = Vec::new();
    write_detections(&mut buf, &dets)?;
    fs::write(dir.join("detections.txt"), buf)?;
    println!("slice {idx}: {} detections, {} heat maps in {}", dets.len(), feats.len(), dir.display());
    Ok(())
}

struct TrainSummary {
    params: usize,
    final_loss: f64,
    metrics: cvheat::detection::MapResult,
}

fn train_to(cfg: &PipelineConfig, dir: &Path) -> Result<TrainSummary> {
    fs::write(dir.join("config.txt"), cfg.serialize())?;
    let train_set = build_dataset(cfg, cfg.train_scenes, TRAIN_TAG, cfg.flip)?;
    let val_set = build_dataset(cfg, cfg.val_scenes, VAL_TAG, false)?;
    let out = train(cfg, &train_set, &val_set, Some(dir))?;
    fs::write(dir.join("loss.log"), out.loss_log())?;
    fs::write(dir.join("metrics.csv"), out.metric_curve())?;
    let mut f = fs::File::create(dir.join("model.ckpt"))?;
    out.store.write_checkpoint(&mut f)?;
    let views: Vec<&View> = val_set.iter().map(|s| &s.view).collect();
    let (dets, metrics) = evaluate(&out.detector, &out.store, &views)?;
    let mut buf = Vec::new();
    write_detections(&mut buf, &dets)?;
    fs::write(dir.join("val_detections.txt"), buf)?;
    fs::write(dir.join("metrics.txt"), metrics_report(&metrics))?;
    Ok(TrainSummary {
        params: out.store.count(),
        final_loss: out.log.last().map_or(f64::NAN, |l| l.loss.total),
        metrics,
    })
}

fn cmd_train(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let s = train_to(cfg, dir)?;
    println!(
        "trained {} parameters for {} steps: final loss {:.4}, val mAP {:.4}, mAP@50 {:.4}, mAP@75 {:.4}",
        s.params, cfg.steps, s.final_loss, s.metrics.map, s.metrics.map50, s.metrics.map75
    );
    Ok(())
}

fn cmd_eval(m: &ArgMatches, cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let (det, store) = model(cfg, m.get_one::<String>("checkpoint"))?;
    let heat = m.get_flag("heat-maps");
    let metrics = match m.get_one::<String>("events") {
        Some(p) => {
            let events = read_events(p, cfg)?;
            let slices = events.last().map_or(0, |e| (e.t / cfg.slice_interval_us + 1) as usize);
            let gts = m.get_one::<String>("gt").map(|g| read_gt(g, slices)).transpose()?;
            run_pipeline(cfg, &det, &store, &events, gts.as_deref(), Some(dir), heat)?.metrics
        }
        None => {
            let val_set = build_dataset(cfg, cfg.val_scenes, VAL_TAG, false)?;
            let views: Vec<&View> = val_set.iter().map(|s| &s.view).collect();
            let (dets, metrics) = evaluate(&det, &store, &views)?;
            let mut buf = Vec::new();
            write_detections(&mut buf, &dets)?;
            fs::write(dir.join("detections.txt"), buf)?;
            fs::write(dir.join("metrics.txt"), metrics_report(&metrics))?;
            Some(metrics)
        }
    };
    match metrics {
        Some(r) => println!("mAP {:.4}, mAP@50 {:.4}, mAP@75 {:.4}", r.map, r.map50, r.map75),
        None => println!("detections written to {}", dir.display()),
    }
    Ok(())
}

fn cmd_ablate(m: &ArgMatches, cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let axis = m.get_one::<String>("axis").expect("required");
    if !KEYS.contains(&axis.as_str()) {
        bail!("unknown config key {axis:?}");
    }
    let mut csv = String::from("axis,value,params,final_loss,map,map50,map75\n");
    for value in m.get_one::<String>("values").expect("required").split(';') {
        let mut c = cfg.clone();
        c.set(axis, value)?;
        c.validate()?;
        let sub = dir.join(format!("{axis}={}", value.replace([',', '/'], "_")));
        fs::create_dir_all(&sub)?;
        let s = train_to(&c, &sub).with_context(|| format!("{axis} = {value}"))?;
        csv.push_str(&format!(
            "{axis},\"{value}\",{},{:.6},{:.6},{:.6},{:.6}\n",
            s.params, s.final_loss, s.metrics.map, s.metrics.map50, s.metrics.map75
        ));
        println!("{axis} = {value}: mAP@50 {:.4}", s.metrics.map50);
    }
    fs::write(dir.join("ablation.csv"), csv)?;
    Ok(())
}

fn main() -> Result<()> {
    let matches = cli().get_matches();
    let (name, m) = matches.subcommand().expect("subcommand required");
    let cfg = load_config(m)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .context("starting worker pool")?;
    let dir = out_dir(m)?;
    match name {
        "gen" => cmd_gen(m, &cfg, &dir),
        "graph" => cmd_graph(m, &cfg, &dir),
        "forward" => cmd_forward(m, &cfg, &dir),
        "train" => cmd_train(&cfg, &dir),
        "eval" => cmd_eval(m, &cfg, &dir),
        "ablate" => cmd_ablate(m, &cfg, &dir),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}
