use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nlunet::data::{generate_phantom, read_labels, read_volume, write_labels, write_volume, PatchSpec, Volume};
use nlunet::gradcheck::{run_suite, SUITE_THRESHOLD};
use nlunet::metrics::evaluate;
use nlunet::network::checkpoint::load_checkpoint;
use nlunet::network::count_parameters_for;
use nlunet::train::{
    evaluate_network, foreground_classes, infer, sweep, train, train_with, SweepAxis, SweepSetup, TrainConfig,
    TrainData,
};
use nlunet::{make_ablation, Error, ModelId, Network};

use crate::config::{effective, render};
use crate::{Command, Common, Failure, Pair, TestPair};

type Outcome = Result<(), Failure>;

pub fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::GenData { common, dims, noise } => gen_data(&common, &dims, noise),
        Command::Train {
            common,
            data,
            val_image,
            val_labels,
        } => train_cmd(&common, &data, val_image.zip(val_labels)),
        Command::Infer {
            common,
            checkpoint,
            image,
            overlap_step,
        } => infer_cmd(&common, &checkpoint, &image, overlap_step),
        Command::Eval { common, pred, truth } => eval_cmd(&common, &pred, &truth),
        Command::Gradcheck { common, seeds } => gradcheck(&common, seeds),
        Command::Ablate {
            common,
            data,
            test,
            overlap_step,
        } => ablate(&common, &data, &test, overlap_step),
        Command::Sweep {
            common,
            data,
            test,
            axis,
            values,
            checkpoint,
            overlap_step,
        } => sweep_cmd(
            &common,
            &data,
            &test,
            &axis,
            &values,
            checkpoint.as_deref(),
            overlap_step,
        ),
        Command::Params {
            config,
            overrides,
            model,
            base_width,
        } => params(config.as_deref(), &overrides, model, base_width),
    }
}

fn io(path: &Path, e: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| io(path, e))
}

/// Resolves the config and creates `<out>/<timestamp>-seed<seed>`, echoing
/// the effective config into it before anything runs.
fn start(common: &Common, name: &str) -> Result<(TrainConfig, PathBuf), Failure> {
    let cfg = effective(common.config.as_deref(), &common.overrides, common.seed)?;
    cfg.validate()?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = common.out.join(format!("{stamp}-seed{}", cfg.seed));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = PathBuf::from(format!("{}-{n}", base.display()));
    }
    fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    write(&dir.join("config.txt"), &render(&cfg))?;
    let argv: Vec<String> = std::env::args().collect();
    write(&dir.join("command.txt"), &format!("{name}\n{}\n", argv.join(" ")))?;
    println!("run: {}", dir.display());
    Ok((cfg, dir))
}

fn load_image(stem: &Path) -> Result<Volume, Failure> {
    let mut v = read_volume(stem)?;
    if v.stats.is_none() {
        v.normalize();
    }
    Ok(v)
}

fn load_pair(p: &Pair) -> Result<TrainData, Failure> {
    Ok(TrainData {
        volume: load_image(&p.image)?,
        labels: read_labels(&p.labels)?,
        validation: None,
    })
}

fn parse_dims(s: &str) -> Result<[usize; 3], Failure> {
    let bad = || Failure::from(Error::Config(format!("invalid --dims {s:?}; expected N or D,H,W")));
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [n] => Ok([*n; 3]),
        [d, h, w] => Ok([*d, *h, *w]),
        _ => Err(bad()),
    }
}

fn gen_data(common: &Common, dims: &str, noise: f64) -> Outcome {
    let dims = parse_dims(dims)?;
    let (cfg, dir) = start(common, "gen-data")?;
    let (volume, labels) = generate_phantom(cfg.seed, dims, cfg.network.num_classes, noise)?;
    write_volume(&dir.join("image"), &volume)?;
    write_labels(&dir.join("labels"), &labels)?;
    let hist = labels.histogram(cfg.network.num_classes)?;
    let counts: Vec<String> = hist.iter().map(|c| c.to_string()).collect();
    println!("class voxels: {}", counts.join(" "));
    Ok(())
}

fn train_cmd(common: &Common, pair: &Pair, val: Option<(PathBuf, PathBuf)>) -> Outcome {
    let (mut cfg, dir) = start(common, "train")?;
    let mut data = load_pair(pair)?;
    if let Some((img, lab)) = val {
        data.validation = Some((load_image(&img)?, read_labels(&lab)?));
    }
    cfg.checkpoint = Some(dir.join("model"));
    cfg.loss_log = Some(dir.join("loss.tsv"));
    let out = train_with(&cfg, &data, |r| println!("{}", r.to_line()))?;
    println!("parameters: {}", out.network.count_parameters());
    println!("checkpoint: {}", dir.join("model").display());
    Ok(())
}

fn infer_cmd(common: &Common, checkpoint: &Path, image: &Path, overlap: Option<usize>) -> Outcome {
    let (cfg, dir) = start(common, "infer")?;
    let net: Network<f32> = load_checkpoint(checkpoint)?;
    let volume = load_image(image)?;
    let spec = PatchSpec::new(cfg.patch_size, overlap.unwrap_or(cfg.val_overlap_step))?;
    let (probs, labels) = infer(&net, &volume, spec)?;
    write_volume(&dir.join("probs"), &probs)?;
    write_labels(&dir.join("labels"), &labels)?;
    Ok(())
}

fn eval_cmd(common: &Common, pred: &Path, truth: &Path) -> Outcome {
    let (cfg, dir) = start(common, "eval")?;
    let (pred, truth) = (read_labels(pred)?, read_labels(truth)?);
    let classes = foreground_classes(cfg.network.num_classes);
    let named: Vec<(u8, &str)> = classes.iter().map(|(c, n)| (*c, n.as_str())).collect();
    let report = evaluate(&pred, &truth, &named)?.to_text();
    write(&dir.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn gradcheck(common: &Common, seeds: u64) -> Outcome {
    let (cfg, dir) = start(common, "gradcheck")?;
    let list: Vec<u64> = (cfg.seed..cfg.seed + seeds.max(1)).collect();
    let reports = run_suite(&list)?;
    let mut table = String::from("check\tmax_rel_error\tstatus\n");
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(table, "{}\t{:.3e}\t{status}", r.name, r.max_rel_error);
    }
    write(&dir.join("gradcheck.tsv"), &table)?;
    print!("{table}");
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            exit: 4,
            code: "gradcheck",
            detail: format!("relative error above {SUITE_THRESHOLD:e} in {}", failed.join(", ")),
        })
    }
}

fn load_test(t: &TestPair) -> Result<(Volume, nlunet::data::LabelVolume), Failure> {
    Ok((load_image(&t.test_image)?, read_labels(&t.test_labels)?))
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn ablate(common: &Common, pair: &Pair, test: &TestPair, overlap: Option<usize>) -> Outcome {
    let (cfg, dir) = start(common, "ablate")?;
    let data = load_pair(pair)?;
    let (tv, tl) = load_test(test)?;
    let spec = PatchSpec::new(cfg.patch_size, overlap.unwrap_or(cfg.val_overlap_step))?;
    let names: Vec<String> = foreground_classes(cfg.network.num_classes)
        .into_iter()
        .map(|(_, n)| n)
        .collect();
    let mut table = String::from("model\tparams");
    for metric in ["dice", "mhd_3d"] {
        for n in names.iter().map(String::as_str).chain(["average"]) {
            let _ = write!(table, "\t{metric}_{n}");
        }
    }
    table.push('\n');
    for id in ModelId::ALL {
        let mut c = cfg.clone();
        c.model = id;
        c.checkpoint = Some(dir.join(id.to_string()));
        c.loss_log = Some(dir.join(format!("{id}.loss.tsv")));
        let net = train(&c, &data)?.network;
        let r = evaluate_network(&net, &tv, &tl, spec)?;
        let _ = write!(table, "{id}\t{}", net.count_parameters());
        for d in r.classes.iter().map(|c| c.dice).chain([r.average_dice]) {
            let _ = write!(table, "\t{}", fmt(d));
        }
        for m in r.classes.iter().map(|c| c.mhd_3d).chain([r.average_mhd_3d]) {
            let _ = write!(table, "\t{}", fmt(m));
        }
        table.push('\n');
        eprintln!("{id} done");
    }
    write(&dir.join("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn sweep_cmd(
    common: &Common,
    pair: &Pair,
    test: &TestPair,
    axis: &str,
    values: &[usize],
    checkpoint: Option<&Path>,
    overlap: Option<usize>,
) -> Outcome {
    let axis: SweepAxis = axis.parse()?;
    let (cfg, dir) = start(common, "sweep")?;
    let data = load_pair(pair)?;
    let (tv, tl) = load_test(test)?;
    let net: Option<Network<f32>> = checkpoint.map(load_checkpoint).transpose()?;
    let setup = SweepSetup {
        train: &cfg,
        data: &data,
        test_volume: &tv,
        test_labels: &tl,
        overlap_step: overlap.unwrap_or(cfg.val_overlap_step),
        network: net.as_ref(),
    };
    let table = sweep(axis, values, &setup)?;
    write(&dir.join("sweep.tsv"), &table.to_tsv())?;
    write(&dir.join("sweep.dat"), &table.to_plot_data())?;
    print!("{}", table.to_tsv());
    Ok(())
}

fn params(config: Option<&Path>, overrides: &[String], model: Option<ModelId>, width: Option<usize>) -> Outcome {
    let mut cfg = effective(config, overrides, None)?;
    if let Some(w) = width {
        cfg.network.base_width = w;
    }
    match model {
        Some(id) => println!("{}", count_parameters_for(&make_ablation(id, &cfg.network))?),
        None => {
            for id in ModelId::ALL {
                println!("{id}\t{}", count_parameters_for(&make_ablation(id, &cfg.network))?);
            }
        }
    }
    Ok(())
}
