use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use fedseg::checks::run_suite;
use fedseg::data::{
    build_partition, export_dataset, generate_dataset, load_bus_directory, to_batch, Dataset, Label, SampleSource,
};
use fedseg::fedcore::{Federation, GlobalState, RoundObserver, RoundReport, EVAL_BATCH};
use fedseg::metrics::{confusion_tensors, metrics_from_counts, ConfusionCounts, MetricsRow, DEFAULT_THRESHOLD};
use fedseg::model::{load_checkpoint, save_checkpoint, AttentionUNet, ParameterSet};
use fedseg::numerics::OpKind;
use log::info;

use crate::config::RunConfig;
use crate::manifest::{checkpoint_name, Manifest, CLIENTS_CSV, ROUNDS_CSV};
use crate::{overlay, CliError, EvalArgs, GenDataArgs, GlobalArgs, GradcheckArgs};

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Config from `--config` (or defaults) with command-line overrides applied.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.run.out_dir = out.clone();
    }
    if let Some(seq) = global.sequential {
        cfg.run.sequential = seq;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_pool(cfg: &RunConfig) -> Result<Option<Dataset>, CliError> {
    let Some(dir) = &cfg.data.dir else {
        return Ok(None);
    };
    let (ds, report) = load_bus_directory(dir, cfg.data.image_size)?;
    info!(
        "loaded {} samples from {} ({} skipped)",
        report.loaded,
        dir.display(),
        report.skipped.len()
    );
    Ok(Some(ds))
}

const HEADER: &str = "dice_loss,iou,sensitivity,specificity,f1,accuracy";

struct RunWriter {
    dir: PathBuf,
    rounds: BufWriter<File>,
    clients: BufWriter<File>,
    params: ParameterSet,
    error: Option<CliError>,
}

impl RunWriter {
    fn create(dir: &Path, params: ParameterSet) -> Result<Self, CliError> {
        let open = |name: &str, header: &str| -> Result<BufWriter<File>, CliError> {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
            writeln!(w, "{header}").map_err(|e| io_err(&path, e))?;
            Ok(w)
        };
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            rounds: open(ROUNDS_CSV, &format!("round,{HEADER}"))?,
            clients: open(CLIENTS_CSV, &format!("round,client,train_samples,{HEADER}"))?,
            params,
            error: None,
        })
    }

    fn record(&mut self, report: &RoundReport, state: &GlobalState) -> Result<(), CliError> {
        let csv = |p: &Path, e: std::io::Error| io_err(p, e);
        let rounds_path = self.dir.join(ROUNDS_CSV);
        writeln!(self.rounds, "{},{}", report.round, report.server_metrics.to_csv_fields())
            .and_then(|_| self.rounds.flush())
            .map_err(|e| csv(&rounds_path, e))?;
        let clients_path = self.dir.join(CLIENTS_CSV);
        for (i, (m, n)) in report
            .per_client_metrics
            .iter()
            .zip(&report.client_sample_counts)
            .enumerate()
        {
            writeln!(self.clients, "{},{},{},{}", report.round, i, n, m.to_csv_fields())
                .map_err(|e| csv(&clients_path, e))?;
        }
        self.clients.flush().map_err(|e| csv(&clients_path, e))?;
        self.params.assign(&state.weights)?;
        save_checkpoint(&self.params, self.dir.join(checkpoint_name(report.round)))?;
        Ok(())
    }
}

impl RoundObserver for RunWriter {
    fn round_end(&mut self, report: &RoundReport, state: &GlobalState) -> fedseg::Result<()> {
        if let Err(e) = self.record(report, state) {
            let msg = e.to_string();
            self.error = Some(e);
            return Err(fedseg::Error::Usage(msg));
        }
        Ok(())
    }
}

fn print_table(reports: &[RoundReport]) {
    println!(
        "{:>5}  {:>9}  {:>7}  {:>11}  {:>11}  {:>7}  {:>8}",
        "round", "dice_loss", "iou", "sensitivity", "specificity", "f1", "accuracy"
    );
    for r in reports {
        let m = &r.server_metrics;
        println!(
            "{:>5}  {:>9.4}  {:>7.4}  {:>11.4}  {:>11.4}  {:>7.4}  {:>8.4}",
            r.round, m.dice_loss, m.iou, m.sensitivity, m.specificity, m.f1, m.accuracy
        );
    }
}

pub fn simulate(global: &GlobalArgs) -> Result<ExitCode, CliError> {
    let cfg = resolve_config(global)?;
    let fed_cfg = cfg.fed_config()?;
    let model = AttentionUNet::build(cfg.model_config()?)?;
    let pool = load_pool(&cfg)?;
    let source = match &pool {
        Some(ds) => SampleSource::Pool(ds),
        None => SampleSource::Synthetic {
            size: cfg.data.image_size,
        },
    };
    let partition = build_partition(&cfg.plan()?, &source)?;
    let mut fed = Federation::new(model, partition, fed_cfg, cfg.augmentation()?)?;

    let dir = &cfg.run.out_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Manifest::new(&cfg).write(dir)?;
    let mut writer = RunWriter::create(dir, fed.global_parameters()?)?;
    info!(
        "training {} clients ({} parameters) for {} rounds",
        fed.clients().len(),
        writer.params.numel(),
        cfg.fed.rounds
    );
    let reports = match fed.run(&mut writer) {
        Ok(r) => r,
        Err(e) => return Err(writer.error.take().unwrap_or_else(|| CliError::Runtime(e.to_string()))),
    };
    print_table(&reports);
    println!("wrote {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gen_data(global: &GlobalArgs, args: &GenDataArgs) -> Result<ExitCode, CliError> {
    let out = global
        .out
        .clone()
        .ok_or_else(|| CliError::Invalid("gen-data needs --out <DIR>".into()))?;
    if args.size == 0 {
        return Err(CliError::Invalid("--size must be positive".into()));
    }
    let counts = [
        (Label::Normal, args.normal),
        (Label::Benign, args.benign),
        (Label::Malignant, args.malignant),
    ];
    let seed = global.seed.unwrap_or(crate::config::RunSection::default().seed);
    let ds = generate_dataset(&counts, args.size, seed);
    export_dataset(&ds, &out)?;
    for (label, n) in counts {
        println!("{label}: {n}");
    }
    println!("wrote {} image/mask pairs to {}", ds.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

/// The server test set the configured run evaluates on.
pub fn server_test_set(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let pool = load_pool(cfg)?;
    let source = match &pool {
        Some(ds) => SampleSource::Pool(ds),
        None => SampleSource::Synthetic {
            size: cfg.data.image_size,
        },
    };
    Ok(build_partition(&cfg.plan()?, &source)?.server_test)
}

pub fn eval(global: &GlobalArgs, args: &EvalArgs) -> Result<ExitCode, CliError> {
    let cfg = resolve_config(global)?;
    let mut model = AttentionUNet::build(cfg.model_config()?)?;
    let params = load_checkpoint(&args.checkpoint).map_err(|e| match e {
        fedseg::Error::Io { .. } => CliError::Invalid(e.to_string()),
        other => other.into(),
    })?;
    model.load_parameters(params)?;
    let dataset = match &args.data {
        Some(dir) => load_bus_directory(dir, cfg.data.image_size)?.0,
        None => server_test_set(&cfg)?,
    };
    if dataset.is_empty() {
        return Err(CliError::Invalid("no samples to evaluate".into()));
    }
    let overlay_dir = cfg.run.out_dir.join("overlays");
    if global.overlays {
        fs::create_dir_all(&overlay_dir).map_err(|e| io_err(&overlay_dir, e))?;
    }
    let mut counts = ConfusionCounts::default();
    for chunk in dataset.samples.chunks(EVAL_BATCH) {
        let (images, masks) = to_batch(chunk)?;
        let probs = model.forward(&images)?;
        counts += confusion_tensors(&probs, &masks, DEFAULT_THRESHOLD)?;
        if global.overlays {
            let px = chunk[0].height * chunk[0].width;
            for (s, p) in chunk.iter().zip(probs.data().chunks(px)) {
                let pred: Vec<u8> = p.iter().map(|&v| u8::from(v >= DEFAULT_THRESHOLD)).collect();
                let path = overlay_dir.join(format!("{}_{:05}.png", s.label, s.id));
                overlay::render(s, &pred).save(&path).map_err(|e| io_err(&path, e))?;
            }
        }
    }
    let row: MetricsRow = metrics_from_counts(&counts)?;
    println!("{HEADER}");
    println!("{}", row.to_csv_fields());
    if global.overlays {
        eprintln!("overlays written to {}", overlay_dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_op(name: &str) -> Result<OpKind, CliError> {
    OpKind::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| {
        let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        CliError::Invalid(format!("unknown op {name:?}; expected one of {}", names.join(", ")))
    })
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<ExitCode, CliError> {
    let fault = args.inject_fault.as_deref().map(parse_op).transpose()?;
    let results = run_suite(fault)?;
    println!("{:<20}  {:>13}  {:>9}  status", "check", "max_rel_error", "threshold");
    for r in &results {
        println!(
            "{:<20}  {:>13.3e}  {:>9.0e}  {}",
            r.name,
            r.max_rel_error,
            r.threshold,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed == 0 {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{failed} gradient check(s) failed");
        Ok(ExitCode::from(1))
    }
}
