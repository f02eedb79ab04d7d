use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nam::datasets::{
    gen_multitask_synthetic, gen_paramgen_synthetic, gen_toy_jump, load_csv, save_csv, Dataset, MultitaskSynthConfig,
    TaskKind, PARAMGEN_TREATMENTS,
};
use nam::export::{ablate, explain, render_svg, shape_file_stem, shape_table, ShapeTable, DEFAULT_GRID};
use nam::feature_net::FeatureNetConfig;
use nam::pipeline::{cross_validate_spec, evaluate, fit, write_atomic, FitSpec, Metric, MetricRow, ModelFile};
use nam::trainer::{CvReport, TrainConfig, TrainReport};
use nam::{NamError, Result};

#[derive(Parser)]
#[command(name = "nam", version, about = "Train, evaluate and inspect neural additive models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it with a training report.
    Train(TrainArgs),
    /// Score a model on a dataset, or cross-validate its recipe.
    Eval(EvalArgs),
    /// Write one shape-function CSV (and optional SVG) per feature.
    ExportShapes(ExportArgs),
    /// Break one prediction into per-feature contributions.
    Explain(ExplainArgs),
    /// Remove a feature from a centered model.
    Ablate(AblateArgs),
    /// Plot a shape-function CSV.
    RenderSvg(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Synthetic {
    Toy,
    Multitask,
    Paramgen,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Standard,
    Exu,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Classification,
    Regression,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Classification => TaskKind::Classification,
            Task::Regression => TaskKind::Regression,
        }
    }
}

/// One flag per training hyperparameter; each overrides the config file.
#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    output_penalty: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    feature_dropout: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(lr, output_penalty, weight_decay, dropout, feature_dropout, batch_size, max_epochs, lr_decay, patience, seed);
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Headered CSV file.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Generate a built-in dataset instead of reading one.
    #[arg(long, value_enum)]
    synthetic: Option<Synthetic>,
    /// Target column; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',')]
    target: Vec<String>,
    /// Inferred from the targets when omitted (all 0/1 means classification).
    #[arg(long, value_enum)]
    task: Option<Task>,
    /// 0/1 treatment columns; selects the parameter-generation model.
    #[arg(long, value_delimiter = ',')]
    treatments: Vec<String>,
    #[arg(long, value_enum, default_value = "standard")]
    arch: Arch,
    /// Hidden layer sizes of each standard feature net.
    #[arg(long, value_delimiter = ',', default_value = "64,64,32")]
    hidden: Vec<usize>,
    /// ExU hidden units.
    #[arg(long, default_value_t = 1024)]
    units: usize,
    /// ReLU-n cap of ExU units.
    #[arg(long, default_value_t = 1.0)]
    cap: f64,
    #[arg(long)]
    multitask: bool,
    #[arg(long, default_value_t = 1)]
    subnets: usize,
    #[arg(long, default_value_t = 1)]
    members: usize,
    /// Cross-validate with K folds before fitting the final model.
    #[arg(long)]
    cv: Option<usize>,
    /// Rows for the multitask and paramgen generators.
    #[arg(long)]
    rows: Option<usize>,
    /// Key/value training config; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Training report path (default: model path with .report.json).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the training data as CSV.
    #[arg(long)]
    save_data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// roc_auc, pr_auc, rmse or mse; defaults depend on the task.
    #[arg(long, value_delimiter = ',')]
    metric: Vec<String>,
    /// Refit the model's recipe in K folds and report mean and std.
    #[arg(long)]
    cv: Option<usize>,
    /// Print full-precision JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Data for the density overlay (usually the training set).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: usize,
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated raw values: features in model order, then treatments.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "data", required_unless_present = "data")]
    row: Option<String>,
    #[arg(long, requires = "index")]
    data: Option<PathBuf>,
    /// 0-based row of --data.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Feature name or 0-based index.
    #[arg(long)]
    feature: String,
    /// Training data used to report the mean-logit drift.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Plot title (default: the CSV file stem).
    #[arg(long)]
    title: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportShapes(a) => cmd_export(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::RenderSvg(a) => cmd_render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn infer_task(ds: &Dataset) -> TaskKind {
    let binary = ds
        .targets
        .iter()
        .flatten()
        .all(|v| v.is_nan() || *v == 0.0 || *v == 1.0);
    if binary {
        TaskKind::Classification
    } else {
        TaskKind::Regression
    }
}

/// The dataset and its treatment columns.
fn training_data(a: &TrainArgs, seed: u64) -> Result<(Dataset, Vec<String>)> {
    let Some(kind) = a.synthetic else {
        let path = a.data.as_ref().ok_or_else(|| NamError::Usage("--data or --synthetic is required".into()))?;
        if a.target.is_empty() {
            return Err(NamError::Usage("--target is required with --data".into()));
        }
        let mut ds = load_csv(path, &a.target, TaskKind::Regression)?;
        ds.task = a.task.map_or_else(|| infer_task(&ds), TaskKind::from);
        return Ok((ds, a.treatments.clone()));
    };
    if !a.target.is_empty() || !a.treatments.is_empty() || a.task.is_some() {
        return Err(NamError::Usage("synthetic datasets fix their own targets, task and treatments".into()));
    }
    Ok(match kind {
        Synthetic::Toy => (gen_toy_jump(seed).data, Vec::new()),
        Synthetic::Multitask => {
            let cfg = MultitaskSynthConfig {
                n_train: a.rows.unwrap_or(2500),
                ..Default::default()
            };
            (gen_multitask_synthetic(&cfg, seed).0.data, Vec::new())
        }
        Synthetic::Paramgen => {
            let pg = gen_paramgen_synthetic(a.rows.unwrap_or(50_000), seed);
            let mut ds = pg.data;
            let names: Vec<String> = (1..=PARAMGEN_TREATMENTS).map(|m| format!("d{m}")).collect();
            for (j, n) in names.iter().enumerate() {
                ds.feature_names.push(n.clone());
                ds.features.push(pg.treatments.column(j));
            }
            (ds, names)
        }
    })
}

fn net_config(a: &TrainArgs) -> FeatureNetConfig {
    match a.arch {
        Arch::Standard => FeatureNetConfig::standard(a.hidden.clone()),
        Arch::Exu => FeatureNetConfig::exu(a.units, a.cap),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn print_metrics(prefix: &str, rows: &[MetricRow]) {
    for r in rows {
        println!("{prefix}{}\t{}\t{:.6}", r.target, r.metric.name(), r.value);
    }
}

fn print_cv(metric: Metric, cv: &CvReport) {
    for (i, v) in cv.fold_metrics.iter().enumerate() {
        println!("fold {}\t{}\t{:.6}", i + 1, metric.name(), v);
    }
    println!("summary\t{}\t{:.6} ± {:.6}", metric.name(), cv.mean, cv.std);
}

#[derive(serde::Serialize)]
struct Report<'a> {
    spec: &'a FitSpec,
    train_metrics: &'a [MetricRow],
    members: &'a [TrainReport],
    #[serde(skip_serializing_if = "Option::is_none")]
    cv: Option<(Metric, &'a CvReport)>,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut train = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    a.flags.apply(&mut train);
    let (ds, treatments) = training_data(&a, train.seed)?;
    let spec = FitSpec {
        net: net_config(&a),
        train,
        members: a.members,
        multitask: a.multitask,
        subnets: a.subnets,
        treatments,
    };
    spec.validate(&ds)?;

    let cv = match a.cv {
        Some(k) => {
            let metric = Metric::defaults(ds.task)[0];
            let r = cross_validate_spec(&ds, &spec, k, metric)?;
            print_cv(metric, &r);
            Some((metric, r))
        }
        None => None,
    };
    let outcome = fit(&ds, &spec)?;
    let metrics = evaluate(&outcome.model, &ds, &Metric::defaults(ds.task))?;
    let report = Report {
        spec: &spec,
        train_metrics: &metrics,
        members: &outcome.reports,
        cv: cv.as_ref().map(|(m, r)| (*m, r)),
    };
    let report_json = to_json(&report)?;
    let report_path = a.report.clone().unwrap_or_else(|| a.out.with_extension("report.json"));

    if let Some(p) = &a.save_data {
        save_csv(p, &ds)?;
    }
    write_atomic(&report_path, report_json.as_bytes())?;
    outcome.model.save(&a.out)?;

    let epochs: Vec<String> = outcome.reports.iter().map(|r| r.epochs_run.to_string()).collect();
    println!(
        "trained {} member(s) on {} rows, epochs [{}]",
        outcome.reports.len(),
        ds.rows(),
        epochs.join(", ")
    );
    print_metrics("train\t", &metrics);
    println!("model written to {}", a.out.display());
    Ok(())
}

fn parse_metrics(names: &[String], task: TaskKind) -> Result<Vec<Metric>> {
    let ms = if names.is_empty() {
        Metric::defaults(task)
    } else {
        names.iter().map(|n| n.parse()).collect::<Result<Vec<Metric>>>()?
    };
    for m in &ms {
        m.check(task)?;
    }
    Ok(ms)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?;
    let metrics = parse_metrics(&a.metric, model.task)?;
    let ds = load_csv(&a.data, &model.target_names, model.task)?;
    match a.cv {
        Some(k) => {
            let mut work = ds.clone();
            // Keep only the model's columns so the refit sees the same schema.
            let keep: Vec<String> = model.feature_names.iter().chain(model.treatment_names()).cloned().collect();
            let x = work.take_features(&keep)?;
            work.feature_names = keep;
            work.features = (0..x.cols()).map(|j| x.column(j)).collect();
            let cv = cross_validate_spec(&work, &model.spec, k, metrics[0])?;
            if a.json {
                println!("{}", to_json(&cv)?);
            } else {
                print_cv(metrics[0], &cv);
            }
        }
        None => {
            let rows = evaluate(&model, &ds, &metrics)?;
            if a.json {
                println!("{}", to_json(&rows)?);
            } else {
                print_metrics("", &rows);
            }
        }
    }
    Ok(())
}

fn load_features(path: &Path) -> Result<Dataset> {
    load_csv(path, &[], TaskKind::Regression)
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?;
    let ds = load_features(&a.data)?;
    let heads = model.shape_heads();
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    for (k, name) in model.feature_names.iter().enumerate() {
        let col = ds
            .feature_names
            .iter()
            .position(|n| n == name)
            .map(|i| ds.features[i].clone())
            .ok_or_else(|| NamError::Data(format!("no column named {name:?}")))?;
        for (h, head) in heads.iter().enumerate() {
            let table = shape_table(&model, k, h, a.grid, &col)?;
            let stem = shape_file_stem(k, name, (heads.len() > 1).then_some(head.as_str()));
            let csv = table.to_csv();
            if a.svg {
                let svg = render_svg(&ShapeTable::from_csv(&csv)?, &stem);
                files.push((a.out_dir.join(format!("{stem}.svg")), svg));
            }
            files.push((a.out_dir.join(format!("{stem}.csv")), csv));
        }
    }
    std::fs::create_dir_all(&a.out_dir)?;
    for (p, text) in &files {
        write_atomic(p, text.as_bytes())?;
    }
    println!("wrote {} file(s) to {}", files.len(), a.out_dir.display());
    Ok(())
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?;
    let (inp, row) = match (&a.row, &a.data) {
        (Some(text), _) => {
            let values = text
                .split(',')
                .map(|v| {
                    let v = v.trim();
                    if v.is_empty() {
                        return Ok(f64::NAN);
                    }
                    v.parse::<f64>()
                        .map_err(|_| NamError::Data(format!("cannot parse {v:?} as a number")))
                })
                .collect::<Result<Vec<f64>>>()?;
            (model.inputs_from_row(&values)?, 0)
        }
        (None, Some(path)) => {
            let ds = load_features(path)?;
            let i = a.index.unwrap_or(0);
            if i >= ds.rows() {
                return Err(NamError::Index { index: i, len: ds.rows() });
            }
            (model.inputs(&ds.select_rows(&[i]))?, 0)
        }
        (None, None) => return Err(NamError::Usage("--row or --data is required".into())),
    };
    let explanations = explain(&model, &inp, row)?;
    if a.json {
        println!("{}", to_json(&explanations)?);
        return Ok(());
    }
    for e in explanations {
        println!("target\t{}", e.target);
        println!("bias\t{:.10}", e.bias);
        for c in &e.contributions {
            println!("{}\t{:.10}", c.feature, c.value);
        }
        println!("logit\t{:.10}", e.logit);
        println!("prediction\t{:.10}", e.prediction);
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut model = ModelFile::load(&a.model)?;
    let k = model.feature_index(&a.feature)?;
    let ds = load_features(&a.data)?;
    let inp = model.inputs(&ds)?;
    let drift = ablate(&mut model, k, &inp)?;
    model.save(&a.out)?;
    println!("removed feature {} ({})", k, model.feature_names[k]);
    println!("mean-logit drift\t{drift:.3e}");
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.csv)
        .map_err(|e| NamError::Data(format!("cannot read {}: {e}", a.csv.display())))?;
    let table = ShapeTable::from_csv(&text)?;
    let title = a.title.clone().unwrap_or_else(|| {
        a.csv
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    write_atomic(&a.out, render_svg(&table, &title).as_bytes())?;
    Ok(())
}
