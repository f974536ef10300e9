//! `momogp`: train, evaluate and apply multi-output mixtures of GP experts, and
//! run the image upsampling demo.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use momogp::circuit::{QuantileMode, StructureKind};
use momogp::config::RunConfig;
use momogp::data::{load_csv, load_csv_covariates, CsvOptions, Dataset};
use momogp::image::{
    downsample_box, image_rmse, read_ppm, upsample_bilinear, upsample_config, upsample_momogp, upsample_nearest,
    write_ppm, Image,
};
use momogp::inference::NlpdMode;
use momogp::model::{write_atomic, Model};
use momogp::pipeline::{fit, fit_and_evaluate};
use momogp::Error;

#[derive(Parser)]
#[command(name = "momogp", version, about = "Multi-output mixtures of Gaussian-process experts")]
struct Cli {
    /// Worker threads for expert training and batch prediction (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a CSV file whose last columns are the targets.
    Train {
        data: PathBuf,
        /// Where to write the model file.
        #[arg(short, long)]
        model: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a model on a labelled CSV file.
    Evaluate {
        #[arg(short, long)]
        model: PathBuf,
        data: PathBuf,
        /// Write the metrics as JSON here.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write predictive means and covariances for a CSV file of covariates.
    Predict {
        #[arg(short, long)]
        model: PathBuf,
        data: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Upsample a PPM image and compare with nearest-neighbour and bilinear interpolation.
    Upsample {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(short, long, default_value_t = 2)]
        factor: usize,
        /// Full-resolution reference image for RMSE reporting.
        #[arg(long, conflicts_with = "from_truth")]
        truth: Option<PathBuf>,
        /// Treat the input as the reference: box-downsample it first, then upsample.
        #[arg(long)]
        from_truth: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StructureArg {
    Momogp,
    Sumgp,
}

#[derive(Clone, Copy, ValueEnum)]
enum NlpdArg {
    MomentMatched,
    ExactMixture,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantileArg {
    Data,
    Interval,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML run configuration; command-line options take precedence.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any configuration field, e.g. `--set train.max_epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for structure construction, initialisation and the train/test split.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    structure: Option<StructureArg>,
    #[arg(long, value_enum)]
    nlpd_mode: Option<NlpdArg>,
    /// Report metrics in original target units.
    #[arg(long)]
    unstandardized_metrics: bool,
    /// Children per sum node (K_S).
    #[arg(long)]
    k_sum: Option<usize>,
    /// Cells per covariate split (K_Px).
    #[arg(long)]
    k_prod_x: Option<usize>,
    /// Groups per output split (K_Py).
    #[arg(long)]
    k_prod_y: Option<usize>,
    /// Maximum observations per expert (M).
    #[arg(short = 'M', long)]
    leaf_threshold: Option<usize>,
    #[arg(long, value_enum)]
    quantile_mode: Option<QuantileArg>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Number of target columns at the end of each CSV row.
    #[arg(short = 'p', long)]
    n_outputs: Option<usize>,
    #[arg(long)]
    has_header: Option<bool>,
    #[arg(long)]
    no_standardize: bool,
    #[arg(long)]
    pca_dims: Option<usize>,
    /// Hold out this fraction of the training rows and evaluate on them.
    #[arg(long)]
    test_fraction: Option<f64>,
}

/// Overlays the TOML table `over` onto `base`, recursing into sub-tables.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_override(item: &str) -> Result<toml::Table, Error> {
    let (key, value) = item
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override {item:?} is not KEY=VALUE")))?;
    let value = value.trim();
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut table = toml::Table::new();
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::InvalidArgument(format!("empty key in {item:?}")))?;
    table.insert(last.to_string(), parsed);
    for part in parts.into_iter().rev() {
        let mut outer = toml::Table::new();
        outer.insert(part.to_string(), toml::Value::Table(table));
        table = outer;
    }
    Ok(table)
}

impl ConfigArgs {
    /// Layers the config file, `--set` overrides and dedicated flags over `base`, then validates.
    fn resolve(&self, base: RunConfig) -> Result<RunConfig, Error> {
        let mut table: toml::Table = toml::from_str(&base.to_toml()).expect("defaults serialise");
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {}", path.display(), e.message())))?;
            merge(&mut table, file);
        }
        for item in &self.overrides {
            merge(&mut table, parse_override(item)?);
        }
        let mut cfg = RunConfig::from_toml(&toml::to_string(&table).expect("table serialises"))?;

        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(s) = self.structure {
            cfg.structure.kind = match s {
                StructureArg::Momogp => StructureKind::Momogp,
                StructureArg::Sumgp => StructureKind::Sumgp,
            };
        }
        if let Some(m) = self.nlpd_mode {
            cfg.pipeline.nlpd_mode = match m {
                NlpdArg::MomentMatched => NlpdMode::MomentMatched,
                NlpdArg::ExactMixture => NlpdMode::ExactMixture,
            };
        }
        if let Some(q) = self.quantile_mode {
            cfg.structure.quantile_mode = match q {
                QuantileArg::Data => QuantileMode::Data,
                QuantileArg::Interval => QuantileMode::Interval,
            };
        }
        cfg.pipeline.unstandardized_metrics |= self.unstandardized_metrics;
        if self.no_standardize {
            cfg.pipeline.standardize = false;
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$($field).+ = v; })*
            };
        }
        set!(
            k_sum => structure.k_sum,
            k_prod_x => structure.k_prod_x,
            k_prod_y => structure.k_prod_y,
            leaf_threshold => structure.leaf_threshold,
            learning_rate => train.learning_rate,
            max_epochs => train.max_epochs,
            n_outputs => pipeline.n_outputs,
        );
        if self.has_header.is_some() {
            cfg.pipeline.has_header = self.has_header;
        }
        if self.pca_dims.is_some() {
            cfg.pipeline.pca_dims = self.pca_dims;
        }
        if self.test_fraction.is_some() {
            cfg.pipeline.test_fraction = self.test_fraction;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `model.json` -> `model.json.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn load_data(path: &Path, n_outputs: usize, cfg: &RunConfig) -> Result<Dataset, Error> {
    load_csv(
        path,
        n_outputs,
        &CsvOptions {
            has_header: cfg.pipeline.has_header,
        },
    )
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut s = serde_json::to_string_pretty(value).expect("value serialises");
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn cmd_train(data: &Path, model_path: &Path, args: &ConfigArgs) -> Result<(), Error> {
    let cfg = args.resolve(RunConfig::default())?;
    let raw = load_data(data, cfg.pipeline.n_outputs, &cfg)?;
    let (model, report, eval) = if cfg.pipeline.test_fraction.is_some() {
        let run = fit_and_evaluate(&raw, &cfg)?;
        (run.model, run.report, Some(run.eval))
    } else {
        let (m, r) = fit(&raw, &cfg)?;
        (m, r, None)
    };
    model.save(model_path)?;
    write_json(&sibling(model_path, "report.json"), &report)?;
    write_atomic(&sibling(model_path, "config.toml"), cfg.to_toml().as_bytes())?;
    println!(
        "experts={} root_log_evidence={} final_total_mll={}",
        model.circuit.leaf_ids().len(),
        report.root_log_evidence,
        report.final_total_mll
    );
    if let Some(eval) = eval {
        print!("{eval}");
        write_atomic(&sibling(model_path, "eval.json"), eval.to_json().as_bytes())?;
    }
    Ok(())
}

fn cmd_evaluate(model_path: &Path, data: &Path, output: Option<&Path>, args: &ConfigArgs) -> Result<(), Error> {
    let cfg = args.resolve(RunConfig::default())?;
    let model = Model::load(model_path)?;
    let table = load_csv_covariates(
        data,
        &CsvOptions {
            has_header: cfg.pipeline.has_header,
        },
    )?;
    let (d, p) = (model.input_dims, model.n_outputs());
    if table.ncols() != d + p {
        return Err(Error::Schema {
            expected: format!("{d} covariate and {p} output columns ({} in total)", d + p),
            found: format!("{} columns", table.ncols()),
        });
    }
    let test = Dataset::new(table.columns(0, d).into_owned(), table.columns(d, p).into_owned())?;
    let eval = model.evaluate(&test, cfg.pipeline.nlpd_mode, cfg.pipeline.unstandardized_metrics)?;
    print!("{eval}");
    if let Some(out) = output {
        write_atomic(out, eval.to_json().as_bytes())?;
    }
    Ok(())
}

fn cmd_predict(model_path: &Path, data: &Path, output: &Path, args: &ConfigArgs) -> Result<(), Error> {
    let cfg = args.resolve(RunConfig::default())?;
    let model = Model::load(model_path)?;
    let x = load_csv_covariates(
        data,
        &CsvOptions {
            has_header: cfg.pipeline.has_header,
        },
    )?;
    let preds = model.predict(&x)?;
    let p = model.n_outputs();
    let names: Vec<String> = match &model.column_names {
        Some(c) if c.len() >= p => c[c.len() - p..].to_vec(),
        _ => (0..p).map(|j| format!("y{j}")).collect(),
    };
    let mut header: Vec<String> = names.iter().map(|n| format!("mean_{n}")).collect();
    for i in 0..p {
        for j in i..p {
            header.push(format!("cov_{}_{}", names[i], names[j]));
        }
    }
    let mut out = header.join(",");
    out.push('\n');
    for m in &preds {
        let mut row: Vec<String> = m.mean.iter().map(|v| v.to_string()).collect();
        for i in 0..p {
            for j in i..p {
                row.push(m.covariance[(i, j)].to_string());
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_atomic(output, out.as_bytes())
}

fn cmd_upsample(
    input: &Path,
    output: &Path,
    factor: usize,
    truth: Option<&Path>,
    from_truth: bool,
    args: &ConfigArgs,
) -> Result<(), Error> {
    let cfg = args.resolve(upsample_config())?;
    if cfg.pipeline.n_outputs != 3 {
        return Err(Error::InvalidArgument("images have three outputs; leave n_outputs at 3".into()));
    }
    let loaded = read_ppm(input)?;
    let (source, reference): (Image, Option<Image>) = if from_truth {
        (downsample_box(&loaded, factor)?, Some(loaded))
    } else {
        (loaded, truth.map(read_ppm).transpose()?)
    };
    let ours = upsample_momogp(&source, factor, &cfg)?;
    let nearest = upsample_nearest(&source, factor)?;
    let bilinear = upsample_bilinear(&source, factor)?;
    write_ppm(output, &ours)?;
    write_ppm(sibling(output, "nearest.ppm"), &nearest)?;
    write_ppm(sibling(output, "bilinear.ppm"), &bilinear)?;
    write_atomic(&sibling(output, "config.toml"), cfg.to_toml().as_bytes())?;
    if let Some(reference) = reference {
        let rmse = serde_json::json!({
            "momogp": image_rmse(&reference, &ours)?,
            "nearest": image_rmse(&reference, &nearest)?,
            "bilinear": image_rmse(&reference, &bilinear)?,
        });
        for method in ["momogp", "nearest", "bilinear"] {
            println!("rmse_{method}={}", rmse[method]);
        }
        write_json(&sibling(output, "rmse.json"), &rmse)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::State(e.to_string()))?;
    }
    match &cli.command {
        Command::Train { data, model, config } => cmd_train(data, model, config),
        Command::Evaluate {
            model,
            data,
            output,
            config,
        } => cmd_evaluate(model, data, output.as_deref(), config),
        Command::Predict {
            model,
            data,
            output,
            config,
        } => cmd_predict(model, data, output, config),
        Command::Upsample {
            input,
            output,
            factor,
            truth,
            from_truth,
            config,
        } => cmd_upsample(input, output, *factor, truth.as_deref(), *from_truth, config),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "invalid-argument" => 2,
        "io" => 3,
        "parse" | "format" | "schema" => 4,
        "numerical-failure" => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let detail = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error[{}]: {detail}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
