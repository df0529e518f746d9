use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use mtsnet::attention::{AttentionConfig, AttentionKind, PositionMode, Variant};
use mtsnet::data::{
    preprocess_dataset, split_dataset, synth_subject, worker_count, write_synth_dataset, Dataset, FrameFormat,
    PreprocessOptions, SynthConfig, WindowSpec, CLIP_FRAMES,
};
use mtsnet::gradcheck::{run_op, OPS};
use mtsnet::model::{
    count_parameters, load_checkpoint, read_manifest, save_checkpoint, Backbone, Model, ModelSpec, ShapePlan,
};
use mtsnet::train::{auc, auc_trapezoid, evaluate, log_csv, metrics, train as run_training, OptimizerKind, TrainConfig};
use mtsnet::{Error, Result};

use crate::config::ConfigFile;
use crate::{EvalArgs, ModelArgs, TrainArgs};

const RUN_FILE: &str = "run.txt";
const LOG_FILE: &str = "train_log.csv";

const TRAIN_KEYS: &[&str] = &[
    "model", "attention", "variant", "pos_embed", "heads", "width_div", "epochs", "batch", "lr", "decay_factor",
    "decay_every", "optimizer", "clip_norm", "seed", "test_n", "downsample",
];

/// Output paths that cannot be written are usage errors, not data errors.
fn output_err(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Config(format!("cannot write {}: {io}", path.display())),
        other => other,
    }
}

pub fn model_spec(args: &ModelArgs, cfg: &ConfigFile) -> Result<ModelSpec> {
    let model = cfg.pick_or(args.model.clone(), "model", "mtsnet".to_string())?;
    let backbone = match model.as_str() {
        "mtsnet" | "r2p1d" => Backbone::R2plus1d,
        "r3d" => Backbone::R3d,
        other => return Err(Error::Config(format!("unknown model {other:?}; expected mtsnet, r2p1d or r3d"))),
    };
    let default_kind = if model == "mtsnet" { AttentionKind::DepMhsa } else { AttentionKind::None };
    let kind = match cfg.pick(args.attention.clone(), "attention")? {
        Some(s) => s.parse()?,
        None => default_kind,
    };
    if model == "mtsnet" && kind == AttentionKind::None {
        return Err(Error::Config("mtsnet needs an attention module; use --model r2p1d for the plain backbone".into()));
    }
    let mut attention = AttentionConfig::new(kind);
    if let Some(v) = cfg.pick(args.variant.clone(), "variant")? {
        if kind != AttentionKind::DepMhsa {
            return Err(Error::Config(format!("--variant applies to dep_mhsa only, not {kind}")));
        }
        attention.variant = v.parse::<Variant>()?;
    }
    if let Some(p) = cfg.pick(args.pos_embed.clone(), "pos_embed")? {
        let p: PositionMode = p.parse()?;
        if !kind.takes_position() && p != PositionMode::Off {
            return Err(Error::Config(format!("{kind} has no position embedding")));
        }
        attention.position = p;
    }
    attention.heads = cfg.pick_or(args.heads, "heads", attention.heads)?;
    let div = cfg.pick_or(args.width_div, "width_div", 1)?;
    if div == 0 {
        return Err(Error::Config("--width-div must be positive".into()));
    }
    let spec = ModelSpec::baseline(backbone).with_attention(attention).narrowed(div);
    spec.validate()?;
    Ok(spec)
}

pub fn synth(out: &Path, subjects: usize, pos_frac: f64, seed: u64, size: usize) -> Result<bool> {
    if size < 8 {
        return Err(Error::Config(format!("frame size {size} is too small")));
    }
    let start = Instant::now();
    let rows = write_synth_dataset(out, subjects, pos_frac, seed, SynthConfig { size, frames: CLIP_FRAMES }, worker_count()?)
        .map_err(output_err(out))?;
    let pos = rows.iter().filter(|r| r.label == 1).count();
    eprintln!("wrote {} subjects to {} in {:.1?}", rows.len(), out.display(), start.elapsed());
    println!("subjects = {}\npositives = {pos}\nnegatives = {}", rows.len(), rows.len() - pos);
    Ok(true)
}

pub fn preprocess(
    input: &Path,
    out: &Path,
    crop: usize,
    factor: usize,
    center: f64,
    width: f64,
    mtsv: bool,
) -> Result<bool> {
    let opts = PreprocessOptions {
        window: WindowSpec::new(center, width)?,
        crop,
        factor,
        format: if mtsv { FrameFormat::Mtsv } else { FrameFormat::Pgm },
    };
    if crop == 0 || factor == 0 || !crop.is_multiple_of(factor) {
        return Err(Error::Config(format!("crop {crop} must be a positive multiple of factor {factor}")));
    }
    let n = preprocess_dataset(input, out, opts, worker_count()?).map_err(|e| match e {
        Error::Config(m) => Error::Data(m),
        other => other,
    })?;
    println!("subjects = {n}");
    Ok(true)
}

fn run_record(pairs: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        writeln!(s, "{k} = {v}").unwrap();
    }
    s
}

fn read_run_record(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

pub fn train(args: &TrainArgs) -> Result<bool> {
    let cfg = ConfigFile::load(args.config.as_deref(), TRAIN_KEYS)?;
    let spec = model_spec(&args.model, &cfg)?;
    let defaults = TrainConfig::default();
    let clip = cfg.pick_or(args.clip_norm, "clip_norm", defaults.clip_norm.unwrap_or(0.0))?;
    let tc = TrainConfig {
        lr0: cfg.pick_or(args.lr, "lr", defaults.lr0)?,
        decay_factor: cfg.pick_or(args.decay_factor, "decay_factor", defaults.decay_factor)?,
        decay_every: cfg.pick_or(args.decay_every, "decay_every", defaults.decay_every)?,
        epochs: cfg.pick_or(args.epochs, "epochs", defaults.epochs)?,
        batch_size: cfg.pick_or(args.batch, "batch", defaults.batch_size)?,
        seed: cfg.pick_or(args.seed, "seed", defaults.seed)?,
        optimizer: cfg.pick_or(args.optimizer.clone(), "optimizer", "adam".into())?.parse::<OptimizerKind>()?,
        clip_norm: (clip > 0.0).then_some(clip),
    };
    tc.validate()?;
    let test_n = cfg.pick_or(args.test_n, "test_n", 100)?;
    let downsample = cfg.pick_or(args.downsample, "downsample", 1)?;
    if downsample == 0 {
        return Err(Error::Config("--downsample must be positive".into()));
    }

    let data = Dataset::load(&args.data, CLIP_FRAMES, downsample, worker_count()?)?;
    let extent = data.extent()?;
    let split = split_dataset(&data.labels(), test_n, tc.seed)?;
    let (train_set, val_set) = (data.subset(&split.train), data.subset(&split.val));
    let spec = spec.with_input(extent);
    spec.validate()?;
    eprintln!(
        "training {} with {} attention on {} subjects, validating on {}, input {:?}",
        spec.backbone,
        spec.attention.kind,
        train_set.len(),
        val_set.len(),
        extent
    );
    let mut model = Model::<f32>::build(&spec, tc.seed)?;
    let start = Instant::now();
    let outcome = run_training(&mut model, &train_set, &val_set, &tc, &mut |row| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  val acc {:.3} f1 {:.3} auc {:.3}  [{:.0?}]",
            row.epoch,
            row.lr,
            row.train_loss,
            row.val_acc,
            row.val_f1,
            row.val_auc,
            start.elapsed()
        );
    })?;

    let out = args.out.as_path();
    save_checkpoint(&outcome.best, out).map_err(output_err(out))?;
    fs::write(out.join(LOG_FILE), log_csv(&outcome.log)).map_err(|e| output_err(out)(e.into()))?;
    let record = run_record(&[
        ("data_seed", tc.seed.to_string()),
        ("test_n", test_n.to_string()),
        ("downsample", downsample.to_string()),
        ("epochs", tc.epochs.to_string()),
        ("batch", tc.batch_size.to_string()),
        ("lr", tc.lr0.to_string()),
        ("decay_factor", tc.decay_factor.to_string()),
        ("decay_every", tc.decay_every.to_string()),
        ("optimizer", tc.optimizer.to_string()),
        ("clip_norm", clip.to_string()),
        ("best_epoch", outcome.best_epoch.map_or("-".into(), |e| e.to_string())),
    ]);
    fs::write(out.join(RUN_FILE), &record).map_err(|e| output_err(out)(e.into()))?;
    println!("checkpoint = {}", out.display());
    print!("{record}");
    if let Some(last) = outcome.log.last() {
        println!("final_train_loss = {:.6}\nfinal_val_auc = {:.6}", last.train_loss, last.val_auc);
    }
    Ok(true)
}

fn model_args_given(a: &ModelArgs) -> bool {
    a.model.is_some()
        || a.attention.is_some()
        || a.variant.is_some()
        || a.pos_embed.is_some()
        || a.heads.is_some()
        || a.width_div.is_some()
}

pub fn eval(args: &EvalArgs) -> Result<bool> {
    let model = if model_args_given(&args.model) {
        let (stored, _) = read_manifest(&args.ckpt)?;
        let expected = model_spec(&args.model, &ConfigFile::default())?.with_input(stored.input);
        let mut m = Model::<f32>::build(&expected, 0)?;
        m.load_state(&args.ckpt)?;
        m
    } else {
        load_checkpoint::<f32>(&args.ckpt)?
    };
    let run = read_run_record(&args.ckpt)?;
    let num = |k: &str, default: u64| -> Result<u64> {
        run.get(k).map_or(Ok(default), |v| v.parse().map_err(|_| Error::Checkpoint(format!("bad {k} in {RUN_FILE}"))))
    };
    let seed = num("data_seed", 0)?;
    let test_n = num("test_n", 100)? as usize;
    let downsample = num("downsample", 1)? as usize;

    let data = Dataset::load(&args.data, CLIP_FRAMES, downsample, worker_count()?)?;
    let extent = data.extent()?;
    if extent != model.spec.input {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects clips of {:?}, dataset gives {extent:?}",
            model.spec.input
        )));
    }
    let subset = match args.split.as_str() {
        "all" => data,
        name => {
            let split = split_dataset(&data.labels(), test_n, seed)?;
            let idx = match name {
                "train" => split.train,
                "val" => split.val,
                "test" => split.test,
                other => return Err(Error::Config(format!("unknown split {other:?}; expected train, val, test or all"))),
            };
            data.subset(&idx)
        }
    };
    let mut report = evaluate(&model, &subset, args.batch)?;
    report.seed = Some(seed);
    println!("split = {}\n{report}", args.split);
    Ok(true)
}

/// Ablation rows: 3D MHSA and the DEP-MHSA recipe, each without and with
/// the position embedding.
pub fn ablation_specs() -> Vec<(&'static str, ModelSpec)> {
    let with = |kind, pos| {
        let mut a = AttentionConfig::new(kind);
        a.position = pos;
        ModelSpec::baseline(Backbone::R2plus1d).with_attention(a)
    };
    vec![
        ("mhsa3d", with(AttentionKind::Mhsa3d, PositionMode::Off)),
        ("mhsa3d+pos", with(AttentionKind::Mhsa3d, PositionMode::Dual)),
        ("dep_mhsa-pos", with(AttentionKind::DepMhsa, PositionMode::Off)),
        ("dep_mhsa", with(AttentionKind::DepMhsa, PositionMode::Dual)),
    ]
}

pub fn params(args: &ModelArgs, ablation: bool) -> Result<bool> {
    if ablation {
        println!("{:<14}{:>12}{:>10}", "config", "params", "");
        for (name, spec) in ablation_specs() {
            let r = count_parameters(&Model::<f32>::build(&spec, 0)?);
            println!("{name:<14}{:>12}{:>9.2}M", r.total, r.total as f64 / 1e6);
        }
        return Ok(true);
    }
    let spec = model_spec(args, &ConfigFile::default())?;
    let r = count_parameters(&Model::<f32>::build(&spec, 0)?);
    println!("{r}");
    Ok(true)
}

pub fn gradcheck(op: &str, trials: usize, tolerance: f64, seed: u64) -> Result<bool> {
    if trials == 0 {
        return Err(Error::Config("--trials must be positive".into()));
    }
    let ops: Vec<&str> = if op == "all" { OPS.to_vec() } else { vec![op] };
    let mut all_ok = true;
    println!("{:<18}{:>8}{:>8}{:>14}", "op", "trials", "passed", "max_rel_err");
    for op in ops {
        let r = run_op(op, trials, tolerance, seed)?;
        all_ok &= r.ok();
        println!("{:<18}{:>8}{:>8}{:>14.3e}", r.op, r.trials, r.passed, r.max_rel_error);
    }
    Ok(all_ok)
}

fn check(name: &str, ok: bool, failures: &mut usize) {
    println!("{} {name}", if ok { "pass" } else { "FAIL" });
    *failures += usize::from(!ok);
}

pub fn selftest() -> Result<bool> {
    let mut failures = 0;
    for op in OPS {
        let r = run_op(op, 3, 1e-3, 1)?;
        check(&format!("gradcheck {op}"), r.ok(), &mut failures);
    }
    let r = metrics(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1], 0.5)?;
    check("metrics worked example", r.auc == 0.75 && r.accuracy == 0.75 && (r.f1 - 2.0 / 3.0).abs() < 1e-12, &mut failures);
    let scores = [0.3, 0.3, 0.9, 0.1, 0.5, 0.5, 0.7];
    let labels = [1, 0, 1, 0, 1, 0, 0];
    check("auc rank vs trapezoid", (auc(&scores, &labels)? - auc_trapezoid(&scores, &labels)?).abs() < 1e-12, &mut failures);
    let w = WindowSpec::default();
    check("hu window edges", (w.apply(-50.0), w.apply(50.0), w.apply(150.0)) == (0, 128, 255), &mut failures);
    let plan = ShapePlan::new([12, 128, 128]);
    check("shape plan", plan.layer(4) == [3, 16, 16], &mut failures);
    let pos = synth_subject(1, 1);
    let neg = synth_subject(1, 0);
    check("synthetic labels", pos.label == 1 && neg.label == 0 && pos.frames.len() == 12, &mut failures);
    let spec = ModelSpec::mtsnet(Variant::A).narrowed(16).with_input([4, 16, 16]);
    let m = Model::<f32>::build(&spec, 0)?;
    let dir = std::env::temp_dir().join(format!("mtsnet-selftest-{}", std::process::id()));
    save_checkpoint(&m, &dir).map_err(output_err(&dir))?;
    let restored = load_checkpoint::<f32>(&dir);
    let _ = fs::remove_dir_all(&dir);
    let x = mtsnet::Tensor::<f32>::full(&[1, 1, 4, 16, 16], 0.5);
    check("checkpoint round trip", restored?.predict(&x)? == m.predict(&x)?, &mut failures);
    println!("{failures} failure(s)");
    Ok(failures == 0)
}
