use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::Duration;
use cotn::activation::build_table;
use cotn::data::{
    clean, featurize, inject_spikes, load_csv, normalize, prepare, synthetic_series, window, FeatureFrame, NormStats,
    RawSeries,
};
use cotn::model::{Autoencoder, Cotn};
use cotn::oscillator::{bifurcation_sweep, builtin_params};
use cotn::tensor::Tensor;
use cotn::training::{
    apply_anomaly_weights, evaluate, multi_trial, paired_trials, run_trial, summarize, sweep_types, TrainData,
};

use crate::config::RunConfig;
use crate::{AnomalyArgs, BifurcateArgs, Cli, CliError, Command, RunDirArgs, SynthArgs, TableArgs};

const RUN_CONFIG: &str = "run.toml";
const STATS_FILE: &str = "norm_stats.txt";
const CHECKPOINT_DIR: &str = "checkpoint";
const AE_DIR: &str = "ae";

type Res<T = ()> = Result<T, CliError>;

pub fn run(cli: &Cli) -> Res {
    match &cli.command {
        Command::Bifurcate(a) => bifurcate(cli, a),
        Command::Table(a) => table(cli, a),
        Command::Synth(a) => synth(cli, a),
        Command::Train => train(cli),
        Command::Eval(a) => eval(cli, a),
        Command::Forecast(a) => forecast(cli, a),
        Command::SweepTypes => sweep(cli),
        Command::Anomaly(a) => anomaly(cli, a),
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn parse_range(s: &str) -> Res<(f64, f64)> {
    let bad = || usage(format!("range `{s}` is not LO:HI"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = a.trim().parse().map_err(|_| bad())?;
    let hi: f64 = b.trim().parse().map_err(|_| bad())?;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(usage(format!("range `{s}` needs finite LO < HI")));
    }
    Ok((lo, hi))
}

fn out_dir(cli: &Cli) -> Res<&Path> {
    fs::create_dir_all(&cli.out).with_context(|| format!("cannot create {}", cli.out.display()))?;
    Ok(&cli.out)
}

fn create(path: &Path) -> Res<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> Res {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn bifurcate(cli: &Cli, a: &BifurcateArgs) -> Res {
    let p = builtin_params(a.type_id).map_err(usage)?;
    let (lo, hi) = parse_range(&a.range)?;
    let data = bifurcation_sweep(&p, lo, hi, a.n, a.steps, a.keep_last).map_err(usage)?;
    let path = out_dir(cli)?.join(format!("bifurcation_type{}.csv", a.type_id));
    let mut w = create(&path)?;
    data.write_csv(&mut w)?;
    w.flush()?;
    println!("path={} rows={}", path.display(), data.num_rows());
    Ok(())
}

fn table(cli: &Cli, a: &TableArgs) -> Res {
    let (lo, hi) = parse_range(&a.range)?;
    builtin_params(a.type_id).map_err(usage)?;
    let tab = build_table(a.type_id, lo, hi, a.nodes).map_err(usage)?;
    let path = out_dir(cli)?.join(format!("table_type{}.csv", a.type_id));
    let mut w = create(&path)?;
    tab.write_to(&mut w)?;
    w.flush()?;
    println!("path={} nodes={} node_spacing={:.16e}", path.display(), a.nodes, tab.node_spacing());
    Ok(())
}

fn synth(cli: &Cli, a: &SynthArgs) -> Res {
    if a.len < 2 {
        return Err(usage("--len must be at least 2"));
    }
    let mut s = synthetic_series(a.len);
    let spikes = if a.spikes > 0 {
        inject_spikes(&mut s, 0, a.spikes, a.magnitude, cli.seed.unwrap_or(1)).map_err(usage)?
    } else {
        Vec::new()
    };
    let path = out_dir(cli)?.join("synthetic.csv");
    let mut w = create(&path)?;
    s.write_csv(&mut w)?;
    w.flush()?;
    let idx: Vec<String> = spikes.iter().map(usize::to_string).collect();
    println!("path={} rows={} spikes={}", path.display(), a.len, idx.join(";"));
    Ok(())
}

fn load_config(cli: &Cli) -> Res<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn load_raw(cfg: &RunConfig, path: Option<&Path>) -> Res<RawSeries> {
    if let Some(p) = path.or(cfg.data.path.as_deref()) {
        return Ok(load_csv(p, cfg.data.schema)?);
    }
    let mut s = synthetic_series(cfg.data.synthetic_len);
    if cfg.data.spikes > 0 {
        inject_spikes(&mut s, 0, cfg.data.spikes, cfg.data.spike_magnitude, cfg.seed)?;
    }
    Ok(s)
}

fn log(cli: &Cli, msg: impl AsRef<str>) {
    if cli.verbose {
        eprintln!("{}", msg.as_ref());
    }
}

fn train(cli: &Cli) -> Res {
    let cfg = load_config(cli)?;
    let r = cfg.resolve()?;
    let raw = load_raw(&cfg, None)?;
    log(cli, format!("loaded {} rows", raw.len()));
    let p = prepare(&raw, &r.pipeline, &r.spec)?;
    let out = out_dir(cli)?;
    write_text(&out.join(RUN_CONFIG), &cfg.to_toml())?;
    write_text(&out.join("cleaning_report.txt"), &p.report.to_text())?;
    write_text(&out.join(STATS_FILE), &p.stats.to_text())?;
    log(
        cli,
        format!(
            "{} cleaning actions; windows train={} val={} test={}",
            p.report.entries.len(),
            p.splits.train.len(),
            p.splits.val.len(),
            p.splits.test.len()
        ),
    );
    let mut data: TrainData = p.into();
    if cfg.train.anomaly_weighting {
        let (ae, scores) = apply_anomaly_weights(&mut data, &cfg.anomaly, cfg.seed)?;
        ae.save(&out.join(AE_DIR))?;
        let mean = scores.iter().map(|s| s.weight).sum::<f64>() / scores.len() as f64;
        log(cli, format!("anomaly weights: tau={:?} mean_weight={mean:.6}", ae.tau()));
    }
    let model_cfg = cfg.model_config(data.stats.num_features(), r.activation);

    if cfg.train.trials == 1 {
        let (model, report) = run_trial(&model_cfg, &data, &r.train)?;
        model.save(&out.join(CHECKPOINT_DIR))?;
        let mut hist = String::from("epoch,lr,train_loss,val_loss\n");
        for h in &report.history {
            let _ = writeln!(hist, "{},{:.16e},{:.16e},{:.16e}", h.epoch, h.lr, h.train_loss, h.val_loss);
            log(cli, format!("epoch {} train={:.6} val={:.6}", h.epoch, h.train_loss, h.val_loss));
        }
        write_text(&out.join("history.csv"), &hist)?;
        let line = report.to_kv_line();
        write_text(&out.join("report.txt"), &format!("{line}\n"))?;
        println!("{line}");
        return Ok(());
    }

    let n = cfg.train.trials;
    let (lines, kv, json) = match &r.baseline {
        Some(base) => {
            let c = paired_trials(&model_cfg, &data, &r.train, base, n, cfg.jobs)?;
            let lines: Vec<String> = c.treatment.iter().chain(&c.baseline).map(|t| t.to_kv_line()).collect();
            let kv = format!("{}{}", c.summary.to_kv_text(), c.baseline_summary.to_kv_text());
            let json = format!("[{},{}]", c.summary.to_json(), c.baseline_summary.to_json());
            (lines, kv, json)
        }
        None => {
            let reports = multi_trial(&model_cfg, &data, &r.train, n, cfg.jobs)?;
            let s = summarize(&reports, None)?;
            (reports.iter().map(|t| t.to_kv_line()).collect(), s.to_kv_text(), s.to_json())
        }
    };
    write_text(&out.join("trials.txt"), &(lines.join("\n") + "\n"))?;
    write_text(&out.join("summary.txt"), &kv)?;
    write_text(&out.join("summary.json"), &json)?;
    print!("{kv}");
    Ok(())
}

/// A finished training run: its configuration, statistics and model.
struct RunDir {
    cfg: RunConfig,
    stats: NormStats,
    model: Cotn,
}

fn open_run(dir: &Path) -> Res<RunDir> {
    let text = fs::read_to_string(dir.join(RUN_CONFIG))
        .with_context(|| format!("{} is not a training run", dir.display()))?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| usage(format!("{}: {}", RUN_CONFIG, e.message())))?;
    cfg.resolve()?;
    let f = fs::File::open(dir.join(STATS_FILE)).with_context(|| format!("missing {STATS_FILE}"))?;
    let stats = NormStats::from_text(BufReader::new(f))?;
    let model = Cotn::load(&dir.join(CHECKPOINT_DIR))?;
    Ok(RunDir { cfg, stats, model })
}

/// The training pipeline with the normalization fixed to `stats`.
fn normalized_frame(run: &RunDir, raw: &RawSeries) -> Res<FeatureFrame> {
    let (cleaned, _) = clean(raw, &run.cfg.clean)?;
    let feats = featurize(&cleaned, &run.cfg.features)?;
    Ok(normalize(&feats, &run.stats)?)
}

fn eval(cli: &Cli, a: &RunDirArgs) -> Res {
    let run = open_run(&a.run)?;
    let raw = load_raw(&run.cfg, a.data.as_deref())?;
    let frame = normalized_frame(&run, &raw)?;
    let splits = window(&frame, &run.cfg.spec(), &run.cfg.split)?;
    let mut text = String::new();
    for (name, batch) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if batch.is_empty() {
            let _ = writeln!(text, "split={name} windows=0");
            continue;
        }
        let m = evaluate(&run.model, &batch.windows, &run.stats)?;
        let _ = writeln!(
            text,
            "split={name} windows={} mae={:.16e} mse={:.16e} loss={:.16e}",
            batch.len(),
            m.mae,
            m.mse,
            m.loss
        );
    }
    write_text(&out_dir(cli)?.join("eval.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn forecast(cli: &Cli, a: &RunDirArgs) -> Res {
    let run = open_run(&a.run)?;
    let raw = load_raw(&run.cfg, a.data.as_deref())?;
    let frame = normalized_frame(&run, &raw)?;
    let mc = run.model.config();
    let seg = frame.segments.last().cloned().unwrap_or(0..0);
    if seg.len() < mc.enc_len {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "last segment has {} rows, the model needs {}",
            seg.len(),
            mc.enc_len
        )));
    }
    let f = frame.num_features();
    let start = seg.end - mc.enc_len;
    let mut enc = Vec::with_capacity(mc.enc_len * f);
    for r in start..seg.end {
        enc.extend(frame.columns.iter().map(|c| c[r]));
    }
    let mut dec = enc[(mc.enc_len - mc.label_len) * f..].to_vec();
    dec.resize((mc.label_len + mc.horizon) * f, 0.0);
    let y = run.model.forecast(
        &Tensor::new(vec![mc.enc_len, f], enc)?,
        &Tensor::new(vec![mc.label_len + mc.horizon, f], dec)?,
    )?;
    let last = frame.timestamps[seg.end - 1];
    let period = Duration::seconds(raw.period_secs);
    let mut w = create(&out_dir(cli)?.join("forecast.csv"))?;
    writeln!(w, "step,timestamp,forecast")?;
    for (k, v) in y.data().iter().enumerate() {
        let ts = last + period * (k as i32 + 1);
        writeln!(w, "{},{},{:.16e}", k + 1, ts.format("%Y-%m-%d %H:%M:%S"), run.stats.denormalize_target(*v))?;
    }
    w.flush()?;
    println!("rows={} from={}", mc.horizon, last.format("%Y-%m-%d %H:%M:%S"));
    Ok(())
}

fn sweep(cli: &Cli) -> Res {
    let cfg = load_config(cli)?;
    let r = cfg.resolve()?;
    let raw = load_raw(&cfg, None)?;
    let data: TrainData = prepare(&raw, &r.pipeline, &r.spec)?.into();
    let model_cfg = cfg.model_config(data.stats.num_features(), r.activation);
    let res = sweep_types(&model_cfg, &data, &r.train, cfg.sweep.lambda, cfg.jobs)?;
    write_text(&out_dir(cli)?.join("sweep.csv"), &res.to_csv())?;
    for e in &res.entries {
        log(cli, format!("type {} val_mae={:.6}", e.type_id, e.val_mae));
    }
    println!("winner={} lambda={}", res.winner, cfg.sweep.lambda);
    Ok(())
}

fn anomaly(cli: &Cli, a: &AnomalyArgs) -> Res {
    let cfg = load_config(cli)?;
    let r = cfg.resolve()?;
    let raw = load_raw(&cfg, None)?;
    let p = prepare(&raw, &r.pipeline, &r.spec)?;
    let out = out_dir(cli)?.to_path_buf();
    let ae = match &a.ae {
        Some(dir) => Autoencoder::load(dir)?,
        None => {
            let first = p.splits.train.windows.first().ok_or_else(|| usage("train split has no windows"))?;
            let mut ae = Autoencoder::new(first.enc.rows(), first.enc.cols(), cfg.anomaly.clone(), cfg.seed)?;
            let xs: Vec<&Tensor> = p.splits.train.iter().map(|w| &w.enc).collect();
            ae.fit(&xs, cfg.seed)?;
            let dir: PathBuf = out.join(AE_DIR);
            ae.save(&dir)?;
            ae
        }
    };
    let mut w = create(&out.join("anomaly.csv"))?;
    writeln!(w, "split,window,start,step,timestamp,error,weight")?;
    let mut n = 0;
    for (name, batch) in [("train", &p.splits.train), ("val", &p.splits.val), ("test", &p.splits.test)] {
        for (i, win) in batch.iter().enumerate() {
            let s = ae.score(&win.enc)?;
            for (step, e) in s.errors.iter().enumerate() {
                let ts = p.frame.timestamps[win.start + step].format("%Y-%m-%d %H:%M:%S");
                writeln!(w, "{name},{i},{},{step},{ts},{e:.16e},{:.16e}", win.start, s.weight)?;
            }
            n += 1;
        }
    }
    w.flush()?;
    println!("windows={n} tau={:.16e}", ae.tau().unwrap_or(f64::NAN));
    Ok(())
}
