//! `bridge` command line: train, eval, export-embeddings, ablate.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{axis_values, RunConfig};
use crate::data::{generate_dataset, make_batch, Dataset, PairedExample, Split};
use crate::error::{Error, Result};
use crate::eval::{attention_records_csv, evaluate, export_embeddings, EvalReport};
use crate::model::BridgeModel;
use crate::tensor::Tensor;
use crate::training::{stage_groups, train, Event, Seeds};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

const USAGE: &str = "\
usage:
  bridge train [--config PATH] [--seed INT] [--out DIR] [--split SPLIT] [--<key> VALUE]...
  bridge eval CHECKPOINT [--split SPLIT] [--out DIR]
  bridge export-embeddings CHECKPOINT [--split SPLIT] [--out DIR]
  bridge ablate --axis fusion|placement|losses|Q [--values a,b,c] [--config PATH] [--seed INT] [--out DIR] [--<key> VALUE]...
";

/// Errors tagged with the command-line exit code they map to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        let code = match &error {
            Error::Config(_) => EXIT_CONFIG,
            Error::Numerical(_) | Error::DegenerateEmbedding(_) => EXIT_NUMERICAL,
            Error::Version { .. } | Error::Checksum { .. } | Error::Format(_) => EXIT_CHECKPOINT,
            _ => EXIT_FAILURE,
        };
        CliError { code, error }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn checkpoint_error(error: Error) -> CliError {
    CliError { code: EXIT_CHECKPOINT, error }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Default)]
struct Args {
    positional: Vec<String>,
    config: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    split: Option<Split>,
    axis: Option<String>,
    values: Option<Vec<String>>,
    overrides: Vec<(String, String)>,
    quiet: bool,
}

fn parse_args(args: &[String]) -> Result<Args> {
    let mut out = Args::default();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            out.positional.push(a.clone());
            continue;
        };
        if flag == "quiet" {
            out.quiet = true;
            continue;
        }
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        let value = match inline {
            Some(v) => v,
            None => it.next().cloned().ok_or_else(|| Error::config(format!("flag --{name} needs a value")))?,
        };
        match name {
            "config" => out.config = Some(PathBuf::from(value)),
            "checkpoint" => out.checkpoint = Some(PathBuf::from(value)),
            "split" => out.split = Some(value.parse()?),
            "axis" => out.axis = Some(value),
            "values" => out.values = Some(value.split(',').map(|s| s.trim().to_string()).collect()),
            key => out.overrides.push((key.to_string(), value)),
        }
    }
    Ok(out)
}

/// Runs one command and returns the process exit code; diagnostics go to stderr.
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.error);
            e.code
        }
    }
}

fn dispatch(args: &[String]) -> CliResult<()> {
    let Some((cmd, rest)) = args.split_first() else {
        eprint!("{USAGE}");
        return Err(Error::config("no command given").into());
    };
    let a = parse_args(rest)?;
    match cmd.as_str() {
        "train" => cmd_train(&a),
        "eval" => cmd_eval(&a),
        "export-embeddings" => cmd_export(&a),
        "ablate" => cmd_ablate(&a),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        other => {
            eprint!("{USAGE}");
            Err(Error::config(format!("unknown command `{other}`")).into())
        }
    }
}

fn resolve_config(a: &Args) -> Result<RunConfig> {
    let text = match &a.config {
        Some(p) => Some(
            fs::read_to_string(p).map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    RunConfig::resolve(text.as_deref(), &a.overrides)
}

/// Exclusive ownership of an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    /// Takes `dir/.lock`. A lock left by a process that no longer exists is taken over.
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        let me = std::process::id();
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{me}")?;
                    return Ok(DirLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let owner = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    match owner {
                        Some(pid) if pid != me && Path::new(&format!("/proc/{pid}")).exists() => {
                            return Err(Error::config(format!(
                                "{} is in use by process {pid}",
                                dir.display()
                            )));
                        }
                        _ => fs::remove_file(&path)?,
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Trains per `cfg` into `cfg.out` and evaluates on `split`. Returns the report written to `eval.txt`.
pub fn train_run(cfg: &RunConfig, split: Split, quiet: bool) -> CliResult<EvalReport> {
    let out = cfg.out.clone();
    let _lock = DirLock::acquire(&out)?;
    write_atomic(&out.join("config.cfg"), &cfg.to_text())?;
    let seeds = Seeds::from_master(cfg.seed);
    let data = generate_dataset(&cfg.data, seeds.data, cfg.data_size)?;
    let mut model: BridgeModel<f32> = BridgeModel::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(seeds.init))?;

    let log_file = OpenOptions::new().create(true).append(true).open(out.join("train.log"))?;
    let mut log = BufWriter::new(log_file);
    writeln!(
        log,
        "run seed={} parameters={} train={} val={} test={} fusion={} placement={} q={} tap={}",
        cfg.seed,
        model.num_parameters(),
        data.train.len(),
        data.val.len(),
        data.test.len(),
        cfg.model.bridge.fusion,
        cfg.model.bridge.placement,
        cfg.model.bridge.q,
        model.tap()
    )?;
    for s in &cfg.train.stages {
        writeln!(log, "stage={} epochs={} lr={:e} trainable={}", s.id, s.epochs, s.lr, stage_groups(&model, s)?.join(","))?;
    }

    let mut on_event = |ev: Event<'_, f32>| -> Result<()> {
        match ev {
            Event::Step(r) => writeln!(log, "{}", r.to_log_line())?,
            Event::Epoch(r) => {
                writeln!(log, "{}", r.to_log_line())?;
                log.flush()?;
                if !quiet {
                    eprintln!("{}", r.to_log_line());
                }
            }
            Event::StageEnd { stage, step, model } => {
                let epochs = cfg.train.stages.iter().find(|s| s.id == stage).map_or(0, |s| s.epochs);
                if epochs > 0 {
                    let path = out.join(format!("checkpoint_{stage}.brdg"));
                    Checkpoint::from_model(cfg, model, Some(stage), step).save(&path)?;
                    writeln!(log, "stage={stage} checkpoint={}", path.display())?;
                }
            }
        }
        Ok(())
    };
    let history = match train(&mut model, &data, &cfg.train, seeds, &mut on_event) {
        Ok(h) => h,
        Err(e) => {
            writeln!(log, "abort: {e}")?;
            log.flush()?;
            return Err(e.into());
        }
    };
    let last = history.stage_trace.iter().rev().find(|t| t.2 >= t.1);
    let stage = last.map(|t| t.0);
    let step = history.steps.last().map_or(0, |s| s.step);
    Checkpoint::from_model(cfg, &model, stage, step).save(&out.join("model.brdg"))?;

    let report = evaluate(&model, &data.spec, data.split(split))?;
    writeln!(log, "eval split={split} {}", report.to_kv().trim_end().replace('\n', " "))?;
    log.flush()?;
    write_atomic(&out.join("eval.txt"), &report.to_kv())?;
    Ok(report)
}

fn cmd_train(a: &Args) -> CliResult<()> {
    if !a.positional.is_empty() {
        return Err(Error::config(format!("unexpected argument `{}`", a.positional[0])).into());
    }
    let cfg = resolve_config(a)?;
    let report = train_run(&cfg, a.split.unwrap_or(Split::Test), a.quiet)?;
    print!("{}", report.to_kv());
    Ok(())
}

fn checkpoint_arg(a: &Args) -> Result<PathBuf> {
    match (&a.checkpoint, a.positional.as_slice()) {
        (Some(p), []) => Ok(p.clone()),
        (None, [p]) => Ok(PathBuf::from(p)),
        _ => Err(Error::config("expected exactly one checkpoint path")),
    }
}

/// Loads a checkpoint and the dataset its snapshot describes.
fn load(a: &Args) -> CliResult<(PathBuf, RunConfig, BridgeModel<f32>, Dataset)> {
    if a.config.is_some() || !a.overrides.is_empty() {
        return Err(Error::config("checkpoints carry their own config; overrides are not accepted").into());
    }
    let path = checkpoint_arg(a)?;
    let ck = Checkpoint::read(&path).map_err(checkpoint_error)?;
    let (cfg, model) = ck.restore::<f32>().map_err(checkpoint_error)?;
    let data = generate_dataset(&cfg.data, Seeds::from_master(cfg.seed).data, cfg.data_size)?;
    Ok((path, cfg, model, data))
}

fn output_dir(a: &Args, ckpt: &Path) -> PathBuf {
    a.overrides_out().unwrap_or_else(|| ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf))
}

impl Args {
    fn overrides_out(&self) -> Option<PathBuf> {
        self.overrides.iter().rev().find(|(k, _)| k == "out").map(|(_, v)| PathBuf::from(v))
    }

    fn without_out(&self) -> Args {
        Args {
            positional: self.positional.clone(),
            config: self.config.clone(),
            checkpoint: self.checkpoint.clone(),
            split: self.split,
            axis: self.axis.clone(),
            values: self.values.clone(),
            overrides: self.overrides.iter().filter(|(k, _)| k != "out").cloned().collect(),
            quiet: self.quiet,
        }
    }
}

fn cmd_eval(a: &Args) -> CliResult<()> {
    let (path, _cfg, model, data) = load(&a.without_out())?;
    let out = output_dir(a, &path);
    let _lock = DirLock::acquire(&out)?;
    let report = evaluate(&model, &data.spec, data.split(a.split.unwrap_or(Split::Test)))?;
    write_atomic(&out.join("eval.txt"), &report.to_kv())?;
    print!("{}", report.to_kv());
    Ok(())
}

/// Head-averaged attention maps of the first few examples, one entry per interaction layer.
fn attention_maps(model: &BridgeModel<f32>, data: &Dataset, examples: &[PairedExample]) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let refs: Vec<&PairedExample> = examples.iter().take(4).collect();
    let batch = make_batch::<f32>(&data.spec, &refs)?;
    let mut g = crate::autodiff::Graph::new();
    let p = model.store.bind(&mut g)?;
    let out = model.bridged_encode(&mut g, &p, &batch)?;
    Ok(out.records.iter().map(|r| (g.value(r.t_to_v).clone(), g.value(r.v_to_t).clone())).collect())
}

fn cmd_export(a: &Args) -> CliResult<()> {
    let (path, _cfg, model, data) = load(&a.without_out())?;
    let out = output_dir(a, &path);
    let _lock = DirLock::acquire(&out)?;
    let examples = data.split(a.split.unwrap_or(Split::Test));
    let target = out.join("embeddings.csv");
    export_embeddings(&model, &data.spec, examples, &target)?;
    let maps = attention_maps(&model, &data, examples)?;
    if !maps.is_empty() {
        write_atomic(&out.join("attention.csv"), &attention_records_csv(&maps))?;
    }
    println!("{}", target.display());
    Ok(())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// One finished ablation cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    pub report: EvalReport,
}

/// Trains every (variant, seed) cell of `axis` under `base.out`, reusing cells that already have `eval.txt`.
pub fn ablate(base: &RunConfig, axis: &str, values: Option<&[String]>, quiet: bool) -> CliResult<Vec<AblationCell>> {
    let variants = axis_values(axis, values)?;
    let _lock = DirLock::acquire(&base.out)?;
    let seeds = [base.seed, base.seed + 1, base.seed + 2];
    let mut cells = Vec::new();
    for (variant, overrides) in &variants {
        for &seed in &seeds {
            let mut cfg = base.clone();
            for (k, v) in overrides {
                cfg.set(k, v)?;
            }
            cfg.seed = seed;
            cfg.out = base.out.join(axis).join(variant).join(format!("seed{seed}"));
            cfg.validate()?;
            let done = cfg.out.join("eval.txt");
            let report = if done.exists() {
                if !quiet {
                    eprintln!("skip {axis}={variant} seed={seed} (done)");
                }
                EvalReport::from_kv(&fs::read_to_string(&done)?)?
            } else {
                if !quiet {
                    eprintln!("run {axis}={variant} seed={seed}");
                }
                train_run(&cfg, Split::Test, true)?
            };
            cells.push(AblationCell { variant: variant.clone(), seed, report });
        }
    }
    let mut csv = String::from("variant,seed,tr1,ir1,modality_gap\n");
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            c.variant, c.seed, c.report.tr1, c.report.ir1, c.report.modality_gap
        ));
    }
    for (variant, _) in &variants {
        let mine: Vec<&AblationCell> = cells.iter().filter(|c| &c.variant == variant).collect();
        let col = |f: fn(&EvalReport) -> f64| median(&mine.iter().map(|c| f(&c.report)).collect::<Vec<_>>());
        csv.push_str(&format!(
            "{variant},median,{:.6},{:.6},{:.6}\n",
            col(|r| r.tr1),
            col(|r| r.ir1),
            col(|r| r.modality_gap)
        ));
    }
    write_atomic(&base.out.join(format!("ablation_{axis}.csv")), &csv)?;
    Ok(cells)
}

fn cmd_ablate(a: &Args) -> CliResult<()> {
    if !a.positional.is_empty() {
        return Err(Error::config(format!("unexpected argument `{}`", a.positional[0])).into());
    }
    let axis = a.axis.as_deref().ok_or_else(|| Error::config("ablate needs --axis"))?;
    let base = resolve_config(a)?;
    ablate(&base, axis, a.values.as_deref(), a.quiet)?;
    print!("{}", fs::read_to_string(base.out.join(format!("ablation_{axis}.csv")))?);
    Ok(())
}
