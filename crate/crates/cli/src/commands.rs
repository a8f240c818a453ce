use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use shed::data::{resize_depth, resize_image, Dataset, GenConfig};
use shed::kv::{self, KvMap};
use shed::model::{estimate_flops, Checkpoint, FlopReport, Model, ModelConfig};
use shed::raster::{read_ppm, write_depth, Image};
use shed::trainer::eval::COLUMNS;
use shed::trainer::{
    checkpoint_path, evaluate, evaluate_model, EvalProtocols, EvalReport, Predicted, TrainConfig, TrainOutput,
    TrainState, Trainer,
};
use shed::Error;

use crate::{Baseline, EvalArgs, FlopsArgs, GenDataArgs, InferArgs, TrainArgs, VizArgs};

/// A terminal error with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Shape(_) | Error::InvalidInput(_) => 2,
            Error::Io(_) | Error::Format(_) => 3,
            Error::Numeric(_) | Error::Undefined(_) => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: String) -> Failure {
    Failure { code: 2, message }
}

fn io_context(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

fn read_kv_file(path: &Path) -> Result<KvMap, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_context(path, e))?;
    let map = kv::parse(&text)?;
    if let Some(k) = map.keys().find(|k| !k.starts_with("model.") && !k.starts_with("train.")) {
        return Err(usage(format!("{}: unknown key {k}", path.display())));
    }
    Ok(map)
}

fn load_image(path: &Path) -> Result<Image, Failure> {
    let f = fs::File::open(path).map_err(|e| io_context(path, e))?;
    Ok(read_ppm(&mut BufReader::new(f))?)
}

/// Prefix IO errors with the path involved.
fn at<T>(path: &Path, r: shed::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| match e {
        Error::Io(io) => io_context(path, io),
        e => e.into(),
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    at(path, Checkpoint::load(path))
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    Ok(Model::from_checkpoint(&load_checkpoint(path)?)?)
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| io_context(path, e))?))
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), Failure> {
    let cfg = GenConfig {
        scenes: a.scenes,
        frames_per_scene: a.frames_per_scene,
        height: a.size.0,
        width: a.size.1,
        seed: a.seed,
        ..GenConfig::default()
    };
    if cfg.scenes == 0 || cfg.frames_per_scene == 0 {
        return Err(usage("--scenes and --frames-per-scene must be positive".into()));
    }
    let data = Dataset::generate(&cfg)?;
    at(&a.out, data.save(&a.out))?;
    println!(
        "wrote {} samples ({} scenes x {} frames, {}x{}) to {}",
        data.len(),
        cfg.scenes,
        cfg.frames_per_scene,
        cfg.height,
        cfg.width,
        a.out.display()
    );
    Ok(())
}

fn split_prefix(map: &KvMap, prefix: &str) -> KvMap {
    map.iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// File keys, then `--set`, then the dedicated flags.
fn train_overrides(a: &TrainArgs) -> Result<KvMap, Failure> {
    let mut map = match &a.config {
        Some(p) => read_kv_file(p)?,
        None => KvMap::new(),
    };
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let k = k.trim();
        if !k.starts_with("model.") && !k.starts_with("train.") {
            return Err(usage(format!("--set: unknown key {k}")));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            map.insert(k.to_string(), v);
        }
    };
    put("model.variant", a.variant.map(|v| shed::model::Variant::from(v).to_string()));
    put("train.seed", a.seed.map(|v| v.to_string()));
    put("train.steps", a.steps.map(|v| v.to_string()));
    put("train.lr", a.lr.map(|v| format!("{v:?}")));
    put("train.batch_size", a.batch_size.map(|v| v.to_string()));
    put("train.checkpoint_every", a.checkpoint_every.map(|v| v.to_string()));
    Ok(map)
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let data = at(&a.data, Dataset::load(&a.data))?;
    let overrides = train_overrides(a)?;
    let model_keys = split_prefix(&overrides, "model.");
    let train_keys = split_prefix(&overrides, "train.");
    let (mut state, cfg) = match &a.resume {
        Some(p) => {
            let (state, saved) = TrainState::from_checkpoint(&load_checkpoint(p)?)?;
            let model_cfg = &state.model.config;
            if &model_cfg.with_kv(&model_keys)? != model_cfg {
                return Err(usage("model keys cannot change on resume".into()));
            }
            let cfg = saved.unwrap_or_default().with_kv(&train_keys)?;
            (state, cfg)
        }
        None => {
            let (h, w) = data.size().expect("loaded datasets are nonempty");
            let base = ModelConfig {
                height: h,
                width: w,
                ..ModelConfig::default()
            };
            let model_cfg = base.with_kv(&model_keys)?;
            let cfg = TrainConfig::default().with_kv(&train_keys)?;
            (TrainState::new(Model::init(model_cfg, cfg.seed)?), cfg)
        }
    };
    fs::create_dir_all(&a.out).map_err(|e| io_context(&a.out, e))?;
    let trainer = Trainer::new(cfg.clone(), &state.model.config, &data)?;
    let out = TrainOutput {
        dir: Some(a.out.clone()),
    };
    let start = state.step();
    let curve = trainer.run(&mut state, &out, |k, l| {
        if k == 1 || k % 50 == 0 {
            eprintln!("step {k} loss {l:.6}");
        }
    })?;
    // a resumed run keeps the earlier rows up to its starting step
    let csv_path = a.out.join("loss.csv");
    let mut csv = "step,loss\n".to_string();
    if start > 0 && csv_path.exists() {
        let old = fs::read_to_string(&csv_path).map_err(|e| io_context(&csv_path, e))?;
        for line in old.lines().skip(1) {
            let step = line.split(',').next().and_then(|v| v.parse::<u64>().ok());
            if step.is_some_and(|k| k <= start) {
                csv.push_str(line);
                csv.push('\n');
            }
        }
    }
    csv.push_str(curve.to_csv().split_once('\n').map_or("", |(_, rows)| rows));
    fs::write(&csv_path, csv).map_err(|e| io_context(&csv_path, e))?;
    let ck = state.checkpoint(&cfg);
    let final_path = a.out.join("final.ckpt");
    at(&final_path, ck.save(&final_path))?;
    if cfg.checkpoint_every > 0 && state.step() % cfg.checkpoint_every as u64 != 0 {
        let p = checkpoint_path(&a.out, state.step());
        at(&p, ck.save(&p))?;
    }
    let mut summary = state.model.config.to_kv();
    summary.extend(cfg.to_kv());
    fs::write(a.out.join("config.kv"), kv::render(&summary))?;
    match curve.last() {
        Some(l) => println!("trained to step {} final_loss={}", state.step(), shed::loss_metrics::fmt6(l)),
        None => println!("already at step {}; nothing to do", state.step()),
    }
    Ok(())
}

fn report_csv(label: &str, r: &EvalReport) -> String {
    r.to_csv().lines().skip(1).map(|l| format!("{label},{l}\n")).collect()
}

pub fn eval(a: &EvalArgs) -> Result<(), Failure> {
    if a.ckpt.is_empty() && !a.gt_as_pred {
        return Err(usage("eval needs --ckpt or --gt-as-pred".into()));
    }
    let data = at(&a.data, Dataset::load(&a.data))?;
    let proto = EvalProtocols::default();
    let mut reports = Vec::new();
    if a.gt_as_pred {
        let preds: Vec<Predicted> = data.samples.iter().map(Predicted::oracle).collect();
        reports.push(("gt".to_string(), evaluate(&data, &preds, &proto)?));
    }
    for p in &a.ckpt {
        let model = load_model(p)?;
        reports.push((p.display().to_string(), evaluate_model(&model, &data, &proto)?));
    }
    let mut csv = format!("model,sample,scene,frame,{},notes\n", COLUMNS.join(","));
    let mut summary = KvMap::new();
    for (label, r) in &reports {
        if label.contains(',') {
            return Err(usage(format!("checkpoint path {label:?} contains a comma")));
        }
        csv.push_str(&report_csv(label, r));
        for (k, v) in r.to_kv() {
            summary.insert(format!("{label}.{k}"), v);
        }
    }
    fs::write(&a.report, csv).map_err(|e| io_context(&a.report, e))?;
    print!("{}", kv::render(&summary));
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<(), Failure> {
    let model = load_model(&a.ckpt)?;
    let image = load_image(&a.image)?;
    let (h, w) = (model.config.height, model.config.width);
    let input = if (image.height, image.width) == (h, w) {
        image.clone()
    } else {
        resize_image(&image, h, w)
    };
    let pred = model.predict(&input, &model.superpixels(&input)?)?;
    let (oh, ow) = a.out_size.unwrap_or((image.height, image.width));
    let depth = if (oh, ow) == (h, w) {
        pred.depth
    } else {
        resize_depth(&pred.depth, oh, ow)?
    };
    let mut f = create_file(&a.out_depth)?;
    write_depth(&mut f, &depth)?;
    f.flush()?;
    println!("wrote {oh}x{ow} depth to {}", a.out_depth.display());
    Ok(())
}

pub fn viz(a: &VizArgs) -> Result<(), Failure> {
    let model = load_model(&a.ckpt)?;
    let image = load_image(&a.image)?;
    model.check_image(&image)?;
    let pred = model.predict(&image, &model.superpixels(&image)?)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| io_context(&a.out_dir, e))?;
    let files = crate::viz::render_all(&image, &pred);
    for (name, im) in &files {
        let path = a.out_dir.join(name);
        let mut f = create_file(&path)?;
        shed::raster::write_ppm(&mut f, im)?;
        f.flush()?;
    }
    println!("wrote {} files to {}", files.len(), a.out_dir.display());
    Ok(())
}

fn flops_table(r: &FlopReport) -> String {
    let mut s = format!(
        "{:<6} {:>7} {:>7} {:>16} {:>16} {:>16}\n",
        "stage", "tokens", "blocks", "attention", "mlp", "total"
    );
    for (i, st) in r.hierarchical.iter().enumerate() {
        s.push_str(&format!(
            "{:<6} {:>7} {:>7} {:>16} {:>16} {:>16}\n",
            i,
            st.tokens,
            st.blocks,
            st.blocks as u64 * st.attention_per_block,
            st.blocks as u64 * st.mlp_per_block,
            st.total()
        ));
    }
    s
}

pub fn flops(a: &FlopsArgs) -> Result<(), Failure> {
    let map = match &a.config {
        Some(p) => read_kv_file(p)?,
        None => KvMap::new(),
    };
    let cfg = ModelConfig::default().with_kv(&split_prefix(&map, "model."))?;
    let mut report = estimate_flops(&cfg)?;
    if let Baseline::Hierarchical = a.baseline {
        report.flat = report.hierarchical.clone();
    }
    print!("{}", flops_table(&report));
    println!("model_macs={}", report.hierarchical_total());
    println!("baseline_macs={}", report.flat_total());
    println!("ratio={:.6}", report.ratio());
    Ok(())
}
