mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use siamtrack_core::data::{
    benchmark_specs, generate_sequence, load_sequence_dir, parse_groundtruth, write_sequence_dir, Attribute,
    SequenceRecord, SynthSpec,
};
use siamtrack_core::eval::{ablation_report, curve_csv, mean_curves, AblationEntry, MetricReport, RunResult};
use siamtrack_core::model::{Model, Modules};
use siamtrack_core::par;
use siamtrack_core::rpn::AssignScheme;
use siamtrack_core::tensor::Checkpoint;
use siamtrack_core::tracker::Tracker;
use siamtrack_core::train::{train, TrainOptions};
use siamtrack_core::Error;

use config::{CliConfig, Preset};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError { code: 1, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 1,
            Error::NonFinite(_) => 3,
            _ => 2,
        };
        CliError { code, msg: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "siamtrack", version, about = "Siamese tracker: synthesize data, train, track, evaluate")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (falls back to the config file, then $DAST_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Default model/training geometry.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic sequences in OTB layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long = "len")]
        length: Option<usize>,
        /// Comma-separated attribute tags.
        #[arg(long)]
        attr: Option<String>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Train a model on a directory of sequences.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        freeze: Option<usize>,
        /// `iou` or `center_distance`.
        #[arg(long)]
        assign: Option<String>,
        /// `none`, `st`, `da` or `all`.
        #[arg(long)]
        modules: Option<String>,
        /// Training checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Track sequences and write `x,y,w,h` result files.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A sequence directory or a directory of sequences.
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Never refresh the templates.
        #[arg(long)]
        no_update: bool,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        modules: Option<String>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Score result files, or run an ablation over several configs.
    Eval {
        /// Ground-truth sequence directory (or directory of sequences).
        #[arg(long)]
        gt: PathBuf,
        /// Directory of `<sequence>.txt` result files.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated config files, one ablation row each.
        #[arg(long)]
        ablate: Option<String>,
        /// Model for ablation configs that do not name one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var("DAST_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("DAST_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn parse_attrs(s: &str) -> CliResult<Vec<Attribute>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.parse::<Attribute>().map_err(|e| CliError::usage(e.to_string())))
        .collect()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))
}

/// A sequence directory itself, or every sub-directory holding a ground-truth file.
fn load_dataset(dir: &Path) -> CliResult<Vec<SequenceRecord>> {
    if !dir.exists() {
        return Err(CliError::data(format!("path not found: {}", dir.display())));
    }
    if dir.join("groundtruth_rect.txt").exists() {
        return Ok(vec![load_sequence_dir(dir)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth_rect.txt").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::data(format!("no sequences found in {}", dir.display())));
    }
    dirs.iter().map(|d| load_sequence_dir(d).map_err(CliError::from)).collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    cfg: &CliConfig,
    seed: u64,
    out: &Path,
    count: Option<usize>,
    length: Option<usize>,
    attr: Option<&str>,
    width: Option<usize>,
    height: Option<usize>,
) -> CliResult {
    let attrs = match attr {
        Some(a) => parse_attrs(a)?,
        None => cfg.synth.attributes.clone(),
    };
    let count = count.unwrap_or(cfg.synth.count);
    let length = length.unwrap_or(cfg.synth.length);
    let width = width.unwrap_or(cfg.synth.width);
    let height = height.unwrap_or(cfg.synth.height);
    let specs: Vec<SynthSpec> = if attrs.is_empty() && attr.is_none() {
        benchmark_specs(count, length, seed)
            .into_iter()
            .map(|s| SynthSpec { width, height, ..s })
            .collect()
    } else {
        (0..count as u64)
            .map(|i| SynthSpec {
                length,
                width,
                height,
                attributes: attrs.clone(),
                seed: seed.wrapping_add(i),
                ..SynthSpec::default()
            })
            .collect()
    };
    create_dir(out)?;
    for spec in &specs {
        let seq = generate_sequence(spec)?;
        write_sequence_dir(&out.join(&seq.name), &seq)?;
        println!("{} {} frames", seq.name, seq.len());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    mut cfg: CliConfig,
    seed: u64,
    data: &Path,
    out: &Path,
    epochs: Option<usize>,
    steps: Option<usize>,
    batch: Option<usize>,
    freeze: Option<usize>,
    assign: Option<&str>,
    modules: Option<&str>,
    resume: Option<&Path>,
) -> CliResult {
    let t = &mut cfg.train;
    t.seed = seed;
    if let Some(v) = epochs {
        t.epochs = v;
        t.freeze_backbone_epochs = t.freeze_backbone_epochs.min(v);
    }
    if let Some(v) = steps {
        t.steps_per_epoch = v;
    }
    if let Some(v) = batch {
        t.batch_size = v;
    }
    if let Some(v) = freeze {
        t.freeze_backbone_epochs = v;
    }
    if let Some(a) = assign {
        t.assign.scheme = a.parse::<AssignScheme>()?;
    }
    if let Some(m) = modules {
        let m: Modules = m.parse()?;
        cfg.model.use_st = m.st;
        cfg.model.use_da = m.da;
    }
    let data = load_dataset(data)?;
    let resume_ck = resume.map(Checkpoint::load).transpose()?;
    let mut model = match &resume_ck {
        Some(ck) => Model::from_checkpoint(ck)?,
        None => Model::new(cfg.model.clone(), seed)?,
    };
    create_dir(out)?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        resume: resume_ck,
        on_step: Some(|r| {
            if r.step % 50 == 0 {
                log::info!("step {} epoch {} loss {:.5}", r.step, r.epoch, r.l_total);
            }
        }),
    };
    let outcome = train(&mut model, &cfg.train, &data, &opts)?;
    model.save(&out.join("model.json"))?;
    let last = outcome.history.last().map(|r| r.l_total).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs, {} steps, {} skipped batches, final loss {last:.5}",
        outcome.epochs_completed,
        outcome.history.len(),
        outcome.skipped_batches
    );
    Ok(())
}

fn cmd_track(
    mut cfg: CliConfig,
    checkpoint: &Path,
    sequence: &Path,
    out: &Path,
    no_update: bool,
    threshold: Option<f64>,
    modules: Option<&str>,
) -> CliResult {
    let model = Model::load(checkpoint)?;
    if let Some(t) = threshold {
        cfg.tracker.update_threshold = t;
    }
    if no_update {
        cfg.tracker.update_enabled = false;
    }
    if let Some(m) = modules {
        cfg.tracker.modules = Some(m.parse()?);
    }
    let seqs = load_dataset(sequence)?;
    let tracker = Tracker::new(&model, cfg.tracker.clone())?;
    create_dir(out)?;
    let runs = par::map_range(seqs.len(), |i| tracker.run(&seqs[i].frames, &seqs[i].gt[0]));
    for (s, run) in seqs.iter().zip(runs) {
        let run = run?;
        write_file(&out.join(format!("{}.txt", s.name)), run.results_text())?;
        write_file(&out.join(format!("{}_confidence.txt", s.name)), run.confidence_text())?;
        println!(
            "{} {} frames, {} template updates, {} rejected",
            s.name,
            run.boxes.len(),
            run.updates.len(),
            run.rejected.len()
        );
    }
    Ok(())
}

fn timestamp() -> serde_json::Value {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    serde_json::json!(secs)
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::data(format!("serialization failed: {e}")))
}

fn cmd_eval(
    cli: &Cli,
    gt: &Path,
    results: Option<&Path>,
    out: &Path,
    ablate: Option<&str>,
    checkpoint: Option<&Path>,
) -> CliResult {
    let seqs = load_dataset(gt)?;
    create_dir(out)?;
    if let Some(list) = ablate {
        let files: Vec<&str> = list.split(',').filter(|s| !s.trim().is_empty()).collect();
        if files.len() < 2 {
            return Err(CliError::usage("--ablate needs at least two config files"));
        }
        let mut configs = Vec::new();
        for f in &files {
            let p = Path::new(f.trim());
            let cfg = CliConfig::load(Some(p), cli.preset)?;
            let name = cfg.name.clone().unwrap_or_else(|| {
                p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| f.to_string())
            });
            let ck = cfg.checkpoint.clone().or_else(|| checkpoint.map(Path::to_path_buf));
            let model = match ck {
                Some(ck) => Model::load(&ck).map_err(|e| format!("{}: {e}", ck.display())),
                None => Err("no checkpoint given".to_string()),
            };
            configs.push((name, model, cfg.tracker));
        }
        let entries: Vec<AblationEntry> = configs
            .iter()
            .map(|(name, model, tracker)| AblationEntry {
                name: name.clone(),
                model: model.as_ref().map_err(Clone::clone),
                tracker: tracker.clone(),
            })
            .collect();
        let table = ablation_report(&entries, &seqs)?;
        write_file(&out.join("ablation.csv"), table.to_csv())?;
        write_file(&out.join("ablation.json"), to_json(&table)?)?;
        write_file(&out.join("report.csv"), table.report.to_csv())?;
        print!("{}", table.to_csv());
        return Ok(());
    }
    let results = results.ok_or_else(|| CliError::usage("eval needs --results or --ablate"))?;
    let mut runs = Vec::new();
    for s in &seqs {
        let p = results.join(format!("{}.txt", s.name));
        let text = fs::read_to_string(&p).map_err(|e| CliError::data(format!("cannot read {}: {e}", p.display())))?;
        let pred = parse_groundtruth(&text, &p)?;
        runs.push(RunResult::new(s.name.clone(), pred, s.gt.clone(), s.attributes.clone())?);
    }
    let mut report = MetricReport::default();
    report.add_config("results", &runs)?;
    report.meta.insert("generated_at".into(), timestamp());
    let (succ, prec) = mean_curves(&runs)?;
    write_file(&out.join("report.json"), report.to_json()?)?;
    write_file(&out.join("report.csv"), report.to_csv())?;
    write_file(&out.join("success.csv"), curve_csv(&succ))?;
    write_file(&out.join("precision.csv"), curve_csv(&prec))?;
    let m = report.aggregate("results").expect("aggregate row present");
    println!(
        "sequences {} auc {:.6} precision {:.6} ao {:.6} sr50 {:.6} sr75 {:.6}",
        runs.len(),
        m.auc,
        m.precision,
        m.ao,
        m.sr50,
        m.sr75
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let cfg = CliConfig::load(cli.config.as_deref(), cli.preset)?;
    let seed = resolve_seed(cli.seed, cfg.seed)?;
    match &cli.cmd {
        Cmd::Synth {
            out,
            count,
            length,
            attr,
            width,
            height,
        } => cmd_synth(&cfg, seed, out, *count, *length, attr.as_deref(), *width, *height),
        Cmd::Train {
            data,
            out,
            epochs,
            steps,
            batch,
            freeze,
            assign,
            modules,
            resume,
            jobs,
        } => par::with_threads(jobs.unwrap_or(0), || {
            cmd_train(
                cfg.clone(),
                seed,
                data,
                out,
                *epochs,
                *steps,
                *batch,
                *freeze,
                assign.as_deref(),
                modules.as_deref(),
                resume.as_deref(),
            )
        }),
        Cmd::Track {
            checkpoint,
            sequence,
            out,
            no_update,
            threshold,
            modules,
            jobs,
        } => par::with_threads(jobs.unwrap_or(0), || {
            cmd_track(cfg.clone(), checkpoint, sequence, out, *no_update, *threshold, modules.as_deref())
        }),
        Cmd::Eval {
            gt,
            results,
            out,
            ablate,
            checkpoint,
            jobs,
        } => par::with_threads(jobs.unwrap_or(0), || {
            cmd_eval(&cli, gt, results.as_deref(), out, ablate.as_deref(), checkpoint.as_deref())
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
