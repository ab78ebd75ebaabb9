//! `pneumo` command-line driver.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pneumo_core::config::{
    AttentionScale, ExperimentConfig, ModelConfig, Pooling, PromptSource, ScheduleGranularity, SoftmaxAxis,
};
use pneumo_core::data::{generate_synthetic, load_dataset, save_dataset, Dataset, SynthParams};
use pneumo_core::model::{load_checkpoint, save_checkpoint, toy_grad_suite, PneumoModel};
use pneumo_core::numeric::{GradCheckOptions, Matrix, Tape};
use pneumo_core::train::{
    compute_metrics, cross_validate, encode_samples, format_cv_csv, predict, run_ablation_study,
    train_on_tokens, AblationRow, AblationStudy, AblationTable, Variant,
};
use pneumo_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => EXIT_USAGE,
            CliError::Core(_) => EXIT_RUNTIME,
            CliError::Verification(_) => EXIT_VERIFY,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(Error::Config(m)) => write!(f, "config error: {m}"),
            CliError::Core(e) => write!(f, "error: {e}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "pneumo", version, about = "Frozen-backbone diagnosis-token classifier experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort and write it as PNDS1.
    GenData(GenDataArgs),
    /// Train on a whole dataset; write a checkpoint and the loss trace.
    Train(TrainArgs),
    /// Grouped k-fold cross-validation; write per-fold metrics.
    Cv(CvArgs),
    /// Cross-validate over a range of diagnosis-token counts.
    SweepM(SweepArgs),
    /// Cross-validate a list of model variants.
    Ablate(AblateArgs),
    /// Finite-difference check of the full model at small dimensions.
    GradCheck(GradCheckArgs),
    /// Dump the context map and attention weights for one sample.
    Inspect(InspectArgs),
    /// Write a PNDS1 dataset as CSV.
    ExportCsv(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        s == Switch::On
    }
}

/// Config file plus flag overrides shared by the experiment commands.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML experiment config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    schedule: Option<ScheduleGranularity>,
    /// Seed of the batch shuffle.
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Seed of the fold assignment.
    #[arg(long)]
    cv_seed: Option<u64>,
    /// Number of diagnosis tokens m.
    #[arg(long)]
    diag_tokens: Option<usize>,
    /// none, fixed, conditional or engine.
    #[arg(long)]
    prompt: Option<PromptSource>,
    /// column or row.
    #[arg(long)]
    softmax_axis: Option<SoftmaxAxis>,
    /// head-dim or token-count.
    #[arg(long)]
    attention_scale: Option<AttentionScale>,
    /// diagnosis, source or last.
    #[arg(long)]
    pooling: Option<Pooling>,
    #[arg(long, value_enum)]
    emitter: Option<Switch>,
    #[arg(long, value_enum)]
    adapters: Option<Switch>,
    #[arg(long)]
    init_seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        let t = &mut cfg.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.base_lr, self.lr);
        set(&mut t.warmup_epochs, self.warmup_epochs);
        set(&mut t.schedule, self.schedule);
        set(&mut t.seed, self.train_seed);
        set(&mut cfg.cv.folds, self.folds);
        set(&mut cfg.cv.seed, self.cv_seed);
        let m = &mut cfg.model;
        set(&mut m.diag_tokens, self.diag_tokens);
        set(&mut m.prompt, self.prompt);
        set(&mut m.softmax_axis, self.softmax_axis);
        set(&mut m.attention_scale, self.attention_scale);
        set(&mut m.pooling, self.pooling);
        set(&mut m.emitter, self.emitter.map(bool::from));
        set(&mut m.adapters, self.adapters.map(bool::from));
        set(&mut m.init_seed, self.init_seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Data defaults come from the `[data]` section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    pos_ratio: Option<f64>,
    /// Distance between class means in the latent plane.
    #[arg(long)]
    sep: Option<f64>,
    /// Number of patients; defaults to n / 3 when --n is given.
    #[arg(long)]
    patients: Option<usize>,
    /// Feature width; defaults to the model input width.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the samples as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Metrics CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Markdown summary path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Label written in the variant column.
    #[arg(long, default_value = "cv")]
    name: String,
    /// Run folds on separate threads.
    #[arg(long)]
    parallel_folds: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated diagnosis-token counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
    m: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    parallel_folds: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Variant preset or switch list; repeatable. Defaults to the six
    /// standard rows.
    #[arg(long = "variant")]
    variants: Vec<String>,
    /// Repeat the whole ablation under shifted seeds.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    parallel_folds: bool,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Seed of the parameter perturbation and the probe inputs.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Lower bound on the relative-error denominator.
    #[arg(long, default_value_t = GradCheckOptions::default().denom_floor)]
    floor: f64,
    /// Write the per-parameter summary as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint; its stored config replaces --config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sample index.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Cv(a) => cv(a),
        Command::SweepM(a) => sweep_m(a),
        Command::Ablate(a) => ablate(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Inspect(a) => inspect(a),
        Command::ExportCsv(a) => export_csv(a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_data(path: &Path, model: &ModelConfig) -> CliResult<Dataset> {
    let ds = load_dataset(path)?;
    if ds.feature_width() != model.input_width {
        return Err(Error::dim(
            "dataset features",
            (ds.len(), ds.feature_width()),
            (ds.len(), model.input_width),
        )
        .into());
    }
    Ok(ds)
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    let d = &cfg.data;
    let samples = a.n.unwrap_or(d.samples);
    let patients = a
        .patients
        .or(a.n.map(|n| (n / 3).max(2)))
        .unwrap_or(d.patients);
    let params = SynthParams {
        samples,
        pos_ratio: a.pos_ratio.unwrap_or(d.pos_ratio),
        separation: a.sep.unwrap_or(d.separation),
        patients,
        feature_width: a.width.unwrap_or(cfg.model.input_width),
        noise: a.noise.unwrap_or(d.noise),
        seed: a.seed.unwrap_or(d.seed),
    };
    let ds = generate_synthetic(&params)?;
    save_dataset(&ds, &a.out)?;
    if let Some(csv) = &a.csv {
        write_file(csv, ds.to_csv())?;
    }
    println!(
        "wrote {}: {} samples, {} positive, {} patients, width {}",
        a.out.display(),
        ds.len(),
        ds.meta.positives,
        ds.meta.patients,
        ds.feature_width()
    );
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let cfg = a.cfg.load()?;
    let ds = load_data(&a.data, &cfg.model)?;
    let mut model = PneumoModel::new(&cfg.model)?;
    let tokens = encode_samples(&model, &ds)?;
    let labels = ds.labels();
    let ids: Vec<usize> = (0..ds.len()).collect();
    let trace = train_on_tokens(&mut model, &tokens, &labels, &ids, &cfg.train, 0)?;
    save_checkpoint(&model, &a.out)?;

    let mut csv = String::from("epoch,loss\n");
    for (e, l) in trace.iter().enumerate() {
        writeln!(csv, "{e},{l}").unwrap();
    }
    let loss_out = a.loss_out.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write_file(&loss_out, csv)?;

    let scores = predict(&model, &tokens, &ids)?;
    let fit = compute_metrics(&scores, &labels, cfg.cv.threshold)?;
    println!(
        "trained {} epochs on {} samples; final loss {}; train acc {:.4}",
        trace.len(),
        ds.len(),
        trace.last().map_or("n/a".to_string(), |l| format!("{l:.6}")),
        fit.accuracy
    );
    println!("checkpoint {} (config hash {})", a.out.display(), cfg.hash());
    Ok(())
}

fn cv_markdown(title: &str, csv_rows: &[(&str, &pneumo_core::train::CvReport)], hash: &str) -> String {
    let mut out = format!("# {title}\n\n| Variant | Fold | Sens. | Spec. | Acc. | AUC | AVG |\n|---|---|---|---|---|---|---|\n");
    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
    for (name, report) in csv_rows {
        let folds = report.folds.iter().enumerate().map(|(i, r)| (i.to_string(), r));
        for (fold, r) in folds.chain(std::iter::once(("mean".to_string(), &report.mean))) {
            writeln!(
                out,
                "| {name} | {fold} | {} | {} | {} | {} | {} |",
                pct(Some(r.sensitivity)),
                pct(Some(r.specificity)),
                pct(Some(r.accuracy)),
                pct(r.auc),
                pct(r.avg)
            )
            .unwrap();
        }
    }
    writeln!(out, "\nconfig hash: `{hash}`").unwrap();
    out
}

fn cv(a: CvArgs) -> CliResult {
    let cfg = a.cfg.load()?;
    let ds = load_data(&a.data, &cfg.model)?;
    let report = cross_validate(&cfg.model, &cfg.train, &cfg.cv, &ds, a.parallel_folds)?;
    let rows = [(a.name.as_str(), &report)];
    write_file(&a.out, format_cv_csv(&rows))?;
    if let Some(path) = &a.report {
        write_file(path, cv_markdown("Cross-validation", &rows, &cfg.hash()))?;
    }
    let m = &report.mean;
    println!(
        "{}-fold mean: sens {:.4} spec {:.4} acc {:.4} auc {} avg {}",
        report.folds.len(),
        m.sensitivity,
        m.specificity,
        m.accuracy,
        m.auc.map_or("n/a".into(), |v| format!("{v:.4}")),
        m.avg.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    println!("config hash {}", cfg.hash());
    Ok(())
}

fn sweep_m(a: SweepArgs) -> CliResult {
    let cfg = a.cfg.load()?;
    if a.m.is_empty() {
        return Err(CliError::Usage("--m needs at least one value".into()));
    }
    let configs = a
        .m
        .iter()
        .map(|&m| {
            let mut c = cfg.model.clone();
            c.diag_tokens = m;
            c.validate().map(|_| c)
        })
        .collect::<pneumo_core::Result<Vec<_>>>()?;
    let ds = load_data(&a.data, &cfg.model)?;
    let mut rows = Vec::with_capacity(configs.len());
    for (m, c) in a.m.iter().zip(&configs) {
        let report = cross_validate(c, &cfg.train, &cfg.cv, &ds, a.parallel_folds)?;
        println!("m={m}: mean avg {}", report.mean.avg.map_or("n/a".into(), |v| format!("{v:.4}")));
        rows.push(AblationRow {
            variant: format!("m={m}"),
            report,
        });
    }
    let table = AblationTable { rows };
    write_file(&a.out, table.to_csv())?;
    if let Some(path) = &a.report {
        write_file(path, format!("# Diagnosis-token sweep\n\n{}", table.to_markdown(&cfg.hash())))?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> CliResult {
    let cfg = a.cfg.load()?;
    let variants = if a.variants.is_empty() {
        Variant::standard()
    } else {
        a.variants.iter().map(|v| Variant::parse(v)).collect::<pneumo_core::Result<_>>()?
    };
    for v in &variants {
        v.apply(&cfg.model)?;
    }
    let ds = load_data(&a.data, &cfg.model)?;
    let study: AblationStudy = run_ablation_study(
        &cfg.model,
        &cfg.train,
        &cfg.cv,
        &ds,
        &variants,
        a.repeats,
        a.parallel_folds,
    )?;
    write_file(&a.out, study.to_csv())?;
    let md = format!("# Ablation\n\n{}", study.to_markdown(&cfg.hash()));
    if let Some(path) = &a.report {
        write_file(path, &md)?;
    }
    print!("{md}");
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> CliResult {
    let opts = GradCheckOptions {
        step: a.step,
        denom_floor: a.floor,
    };
    let mut csv = String::from("case,path,param,entries,max_rel_err\n");
    let mut worst = 0.0f64;
    for case in toy_grad_suite(a.seed, opts)? {
        let (name, path, report) = (case.name, case.path, &case.report);
        for p in report.params.iter().filter(|p| p.trainable) {
            writeln!(csv, "{name},{path:?},{},{},{:e}", p.name, p.entries, p.max_rel_err).unwrap();
        }
        let worst_at = report.worst.as_ref().map_or(String::new(), |w| {
            format!(
                " at {}[{}, {}] (tape {:.6e}, central {:.6e})",
                w.name, w.row, w.col, w.analytic, w.numeric
            )
        });
        println!(
            "{name:>15} {path:?}: {} entries, max rel err {:.3e}{worst_at}",
            report.checked, report.max_rel_err
        );
        worst = worst.max(report.max_rel_err);
    }
    if let Some(path) = &a.out {
        write_file(path, csv)?;
    }
    if !(worst < a.tol) {
        return Err(CliError::Verification(format!(
            "max relative error {worst:.3e} >= tolerance {:.1e}",
            a.tol
        )));
    }
    println!("pass: max relative error {worst:.3e} < {:.1e}", a.tol);
    Ok(())
}

fn matrix_csv(m: &Matrix, row_label: &str, col_prefix: &str) -> String {
    let mut out = String::from(row_label);
    for j in 0..m.cols() {
        write!(out, ",{col_prefix}{j}").unwrap();
    }
    out.push('\n');
    for i in 0..m.rows() {
        write!(out, "{i}").unwrap();
        for v in m.row(i) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn inspect(a: InspectArgs) -> CliResult {
    let model = match &a.checkpoint {
        Some(path) => load_checkpoint(path, None)?,
        None => PneumoModel::new(&a.cfg.load()?.model)?,
    };
    let ds = load_data(&a.data, &model.config)?;
    let sample = ds.samples.get(a.sample).ok_or_else(|| {
        CliError::Usage(format!("--sample {} out of range for {} samples", a.sample, ds.len()))
    })?;
    let x = model.encode(&sample.features)?;
    let mut tape = Tape::new(&model.store);
    let out = model.forward_tokens(&mut tape, &x)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut written = Vec::new();
    if let Some(map) = out.context_map {
        let path = a.out_dir.join("context_map.csv");
        write_file(&path, matrix_csv(tape.value(map), "source", "m"))?;
        written.push(path);
    }
    for (l, heads) in out.stack.attention.iter().enumerate() {
        for (h, &w) in heads.iter().enumerate() {
            let path = a.out_dir.join(format!("attention_block{l}_head{h}.csv"));
            write_file(&path, matrix_csv(tape.value(w), "query", "key"))?;
            written.push(path);
        }
    }
    let logit = tape.value(out.logit)[(0, 0)];
    println!(
        "sample {} ({}, label {}): logit {logit:.6}, p {:.6}",
        a.sample,
        sample.patient_id,
        sample.label,
        pneumo_core::numeric::sigmoid(logit)
    );
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn export_csv(a: ExportArgs) -> CliResult {
    let ds = load_dataset(&a.data)?;
    write_file(&a.out, ds.to_csv())?;
    println!("wrote {} ({} rows)", a.out.display(), ds.len());
    Ok(())
}
