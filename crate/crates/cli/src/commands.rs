use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use toml::{Table, Value};

use adfa_snn::backward::correlation;
use adfa_snn::config::{parse_override, parse_value, set_path, unix_now, ExperimentConfig, LoadedData, RunManifest, DATA_DIR_ENV};
use adfa_snn::dataset::{split_paths, Split};
use adfa_snn::ga::{accuracy_fitness, evolve, GaConfig};
use adfa_snn::rng::{derive_seed, Stream};
use adfa_snn::sweep::{
    eta_binned_experiment, run_sweep, sample_candidates, width_magnitude_scan, write_eta_runs, write_eta_summary,
    write_magnitudes, Axis, EtaExperiment, Histogram, Job, SweepSpec, WidthFamily,
};
use adfa_snn::trainer::{evaluate, train};
use adfa_snn::{BackwardFnSpec, Error, LifParams, Mechanism, NetworkState};

use crate::specs;

// A closed pipe (`adfa ... | head`) is not an error worth a panic.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}
use crate::{Cli, Command, ConfigArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config or paths.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidParameter(_) => CliError::Usage(e.to_string()),
            other => CliError::Run(other),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Run(Error::Csv(e))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(Error::Io(e))
    }
}

type Res<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> Res<()> {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match command {
        Command::Rerun { manifest, out, data_dir } => rerun(&manifest, out, data_dir),
        Command::Eval { run, data_dir } => eval(&run, data_dir),
        Command::Corr { first, second, cfg } => corr(&first, &second, &resolve(&cfg, None)?),
        other => {
            let cfg = resolve_for(&other)?;
            exec(&other, cfg, &argv)
        }
    }
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Ga { .. } => "ga",
        Command::Sweep { .. } => "sweep",
        Command::EtaHist { .. } => "eta-hist",
        Command::EtaBins { .. } => "eta-bins",
        Command::WidthScan { .. } => "width-scan",
        Command::Corr { .. } => "corr",
        Command::Rerun { .. } => "rerun",
    }
}

fn resolve_for(command: &Command) -> Res<ExperimentConfig> {
    match command {
        Command::Train { cfg } => resolve(cfg, None),
        Command::Ga { cfg } => resolve(cfg, Some(Extra::Ga)),
        Command::Sweep { axis, cfg } => resolve(cfg, Some(Extra::Sweep(axis))),
        Command::EtaHist { cfg, .. } | Command::EtaBins { cfg } => resolve(cfg, Some(Extra::Eta)),
        Command::WidthScan { cfg, .. } => resolve(cfg, None),
        _ => unreachable!("handled in run"),
    }
}

/// Runs a command with an already resolved config.
fn exec(command: &Command, mut cfg: ExperimentConfig, argv: &[String]) -> Res<()> {
    let name = command_name(command);
    let out = output_dir(&mut cfg, name)?;
    let started = unix_now();
    match command {
        Command::Train { .. } => cmd_train(&cfg, &out)?,
        Command::Ga { .. } => cmd_ga(&cfg, &out)?,
        Command::Sweep { .. } => cmd_sweep(&cfg, &out)?,
        Command::EtaHist { samples, width, .. } => {
            if let Some(n) = samples {
                cfg.eta.get_or_insert_with(EtaExperiment::default).samples = *n;
            }
            cmd_eta_hist(&cfg, *width, &out)?
        }
        Command::EtaBins { .. } => cmd_eta_bins(&cfg, &out)?,
        Command::WidthScan { family, from, to, trials, .. } => cmd_width_scan(&cfg, family, *from..=*to, *trials, &out)?,
        _ => unreachable!("not a config-driven command"),
    }
    let manifest = RunManifest::new(name, argv, &cfg, &out, started)?;
    manifest.write(&out.join("manifest.toml"))?;
    say!("outputs in {}", out.display());
    Ok(())
}

enum Extra<'a> {
    Ga,
    Sweep(&'a [String]),
    Eta,
}

fn base_config(args: &ConfigArgs) -> Res<ExperimentConfig> {
    Ok(match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::preset("desk")?,
    })
}

fn parse_axis(text: &str) -> Res<Axis> {
    let (path, values) = text
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--axis {text:?} is not PATH=V1,V2,..")))?;
    let values: Vec<Value> = values.split(',').map(parse_value).collect();
    Ok(Axis::list(path.trim(), values))
}

/// Config file or preset, then `--set` overrides, then dedicated flags.
fn resolve(args: &ConfigArgs, extra: Option<Extra<'_>>) -> Res<ExperimentConfig> {
    let mut cfg = base_config(args)?;
    match extra {
        Some(Extra::Ga) => {
            cfg.ga.get_or_insert_with(GaConfig::default);
        }
        Some(Extra::Eta) => {
            cfg.eta.get_or_insert_with(EtaExperiment::default);
        }
        Some(Extra::Sweep(axes)) => {
            let parsed = axes.iter().map(|a| parse_axis(a)).collect::<Res<Vec<_>>>()?;
            match cfg.sweep.as_mut() {
                Some(s) => s.axes.extend(parsed),
                None if parsed.is_empty() => {
                    return Err(CliError::Usage(
                        "sweep: config has no [sweep] section; add one or pass --axis".into(),
                    ))
                }
                None => cfg.sweep = Some(SweepSpec::new(parsed)),
            }
        }
        None => {}
    }
    let mut table = cfg.to_table()?;
    for o in &args.overrides {
        let (k, v) = parse_override(o)?;
        set_path(&mut table, &k, v)?;
    }
    if let Some(m) = &args.mechanism {
        let m: Mechanism = m.parse()?;
        set_path(&mut table, "train.mechanism", Value::String(m.name().into()))?;
    }
    if args.allow_g_override {
        set_path(&mut table, "train.allow_g_override", Value::Boolean(true))?;
    }
    if let Some(t) = args.threads {
        set_path(&mut table, "train.threads", Value::Integer(t as i64))?;
    }
    if let Some(d) = &args.data_dir {
        set_path(&mut table, "data.dir", Value::String(d.display().to_string()))?;
    }
    if let Some(o) = &args.out {
        set_path(&mut table, "output.dir", Value::String(o.display().to_string()))?;
    }
    apply_backward_flags(args, &mut table)?;
    Ok(ExperimentConfig::from_table(table)?)
}

fn apply_backward_flags(args: &ConfigArgs, table: &mut Table) -> Res<()> {
    let mut params = BTreeMap::new();
    for (k, v) in [
        ("omega", args.omega),
        ("theta", args.theta),
        ("b", args.b),
        ("c", args.c),
        ("seed", args.prfs_seed.map(|s| s as f64)),
    ] {
        if let Some(v) = v {
            params.insert(k.to_string(), v);
        }
    }
    let Some(family) = &args.backward else {
        if params.is_empty() {
            return Ok(());
        }
        return Err(CliError::Usage(
            "--omega/--theta/--b/--c/--prfs-seed need --backward".into(),
        ));
    };
    let lif: LifParams = table
        .get("lif")
        .cloned()
        .ok_or_else(|| CliError::Usage("config has no [lif] section".into()))?
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("lif: {e}")))?;
    let spec = specs::build(family, &params, &lif)?;
    if spec.is_surrogate() {
        if let Some(Value::Table(t)) = table.get_mut("train") {
            t.remove("backward");
        }
        return Ok(());
    }
    let value = Value::try_from(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    set_path(table, "train.backward", value)?;
    Ok(())
}

fn output_dir(cfg: &mut ExperimentConfig, command: &str) -> Res<PathBuf> {
    let dir = match &cfg.output.dir {
        Some(d) => d.clone(),
        None => PathBuf::from("runs").join(format!("{command}-{}", cfg.fingerprint()?)),
    };
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Usage(format!("cannot create --out {}: {e}", dir.display())))?;
    cfg.output.dir = Some(dir.clone());
    Ok(dir)
}

fn data_dir(cfg: &ExperimentConfig) -> Res<PathBuf> {
    let dir = cfg.data.dir.clone().ok_or_else(|| {
        CliError::Usage(format!("no dataset directory: pass --data-dir or set {DATA_DIR_ENV}"))
    })?;
    for split in [Split::Train, Split::Test] {
        let (images, labels) = split_paths(&dir, split);
        for f in [images, labels] {
            if !f.is_file() {
                return Err(CliError::Usage(format!(
                    "dataset file {} not found (check --data-dir or {DATA_DIR_ENV})",
                    f.display()
                )));
            }
        }
    }
    Ok(dir)
}

fn load(cfg: &ExperimentConfig) -> Res<LoadedData> {
    Ok(cfg.load_data(&data_dir(cfg)?)?)
}

fn create(path: &Path) -> Res<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Res<()> {
    let data = load(cfg)?;
    let tc = cfg.train_config();
    let mut net = NetworkState::initialize(&cfg.topology()?, &cfg.init)?;
    let mut record = train(&mut net, &data.train, Some(&data.test), &tc)?;
    record.fingerprint = cfg.fingerprint()?;
    record.write_csv(create(&out.join("run.csv"))?)?;
    record.write_timing_csv(create(&out.join("timing.csv"))?)?;
    let mut w = create(&out.join("network.bin"))?;
    net.write_checkpoint(&mut w)?;
    w.flush()?;
    say!("final test accuracy: {:.4}", record.final_test_acc().unwrap_or(0.0));
    Ok(())
}

fn eval(run: &Path, data_dir: Option<PathBuf>) -> Res<()> {
    let manifest = RunManifest::read(&run.join("manifest.toml"))?;
    let mut cfg = manifest.config;
    if data_dir.is_some() {
        cfg.data.dir = data_dir;
    }
    let file = File::open(run.join("network.bin"))
        .map_err(|e| CliError::Usage(format!("{}: {e}", run.join("network.bin").display())))?;
    let net = NetworkState::read_checkpoint(std::io::BufReader::new(file))?;
    let data = load(&cfg)?;
    let acc = evaluate(&net, &data.test, &cfg.train_config())?;
    let mut w = create(&run.join("eval.csv"))?;
    writeln!(w, "split,accuracy\ntest,{acc:.6}")?;
    w.flush()?;
    say!("test accuracy: {acc:.4}");
    Ok(())
}

fn cmd_ga(cfg: &ExperimentConfig, out: &Path) -> Res<()> {
    let ga = cfg.ga.clone().unwrap_or_default();
    let data = load(cfg)?;
    let topology = cfg.topology()?;
    let tc = cfg.train_config();
    let fitness = accuracy_fitness(&topology, &cfg.init, &tc, ga.fitness_epochs, &data.train, &data.test);
    let (best, record) = evolve(&ga, fitness)?;
    record.write_csv(create(&out.join("ga.csv"))?)?;
    record.write_snapshots(&out.join("snapshots"))?;
    fs::write(
        out.join("best.toml"),
        toml::to_string(&best).map_err(|e| CliError::Run(Error::Config(e.to_string())))?,
    )?;
    let trace = record.best_fitness_trace();
    say!(
        "best fitness: initial {:.4}, final {:.4}",
        trace.first().copied().unwrap_or(0.0),
        trace.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Res<()> {
    let spec = cfg.sweep.clone().expect("resolved sweep config");
    let base = load(cfg)?;
    let dir = data_dir(cfg)?;
    let runner = |job: &Job<'_>| -> adfa_snn::Result<f64> {
        let overrides: Vec<(String, Value)> =
            job.assignment.iter().map(|(k, v)| (k.to_string(), (*v).clone())).collect();
        let mut c = cfg.with_overrides(&overrides)?;
        c.network.seed = job.seed;
        c.train.seed = job.seed;
        let reloaded;
        let data = if c.data == cfg.data {
            &base
        } else {
            reloaded = c.load_data(&dir)?;
            &reloaded
        };
        let tc = c.train_config();
        let mut net = NetworkState::initialize(&c.topology()?, &c.init)?;
        train(&mut net, &data.train, None, &tc)?;
        evaluate(&net, &data.test, &tc)
    };
    let result = run_sweep(&spec, Some(&out.join("points")), runner)?;
    let written = result.persist(out, &cfg.fingerprint()?)?;
    for p in &result.points {
        let s = p.stats();
        let label: Vec<String> = result
            .paths
            .iter()
            .zip(&p.values)
            .map(|(k, v)| format!("{k}={}", adfa_snn::sweep::value_label(v)))
            .collect();
        say!(
            "{}: mean {} over {} trials",
            label.join(" "),
            s.mean.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into()),
            s.ok
        );
    }
    for w in written {
        log::info!("wrote {}", w.display());
    }
    Ok(())
}

fn cmd_eta_hist(cfg: &ExperimentConfig, width: f64, out: &Path) -> Res<()> {
    let exp = cfg.eta.clone().unwrap_or_default();
    let reference = BackwardFnSpec::surrogate(&cfg.lif);
    let drawn = sample_candidates(exp.samples, exp.harmonics, exp.omega, exp.shift, exp.seed, &reference, &cfg.correlation)?;
    let etas: Vec<Option<f64>> = drawn.iter().map(|(_, e)| *e).collect();
    let mut hist = Histogram::new(-1.0, 1.0, width)?;
    hist.fill(etas.iter().copied());
    hist.write_csv(create(&out.join("eta_hist.csv"))?)?;
    let mut w = csv::Writer::from_writer(create(&out.join("eta_samples.csv"))?);
    w.write_record(["sample", "eta"])?;
    for (i, e) in etas.iter().enumerate() {
        w.write_record([i.to_string(), e.map(|x| format!("{x:.9}")).unwrap_or_default()])?;
    }
    w.flush()?;
    let defined: Vec<f64> = etas.iter().flatten().copied().collect();
    let min = defined.iter().copied().fold(f64::INFINITY, f64::min);
    let max = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    say!(
        "{} samples, eta in [{min:.4}, {max:.4}], {} undefined",
        defined.len(),
        etas.len() - defined.len()
    );
    Ok(())
}

/// One run of `mechanism` with backward function `g`, fresh network.
fn train_with_g(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    mechanism: Mechanism,
    g: &BackwardFnSpec,
    seed: u64,
) -> adfa_snn::Result<f64> {
    let mut tc = cfg.train_config();
    tc.mechanism = mechanism;
    tc.backward = Some(g.clone());
    tc.allow_g_override = true;
    tc.lr_base = cfg.train.lr_base.unwrap_or_else(|| mechanism.default_lr());
    tc.seed = seed;
    let topology = adfa_snn::topology::NetworkTopology::new(cfg.network.layers.clone(), seed)?;
    let mut net = NetworkState::initialize(&topology, &cfg.init)?;
    train(&mut net, &data.train, None, &tc)?;
    evaluate(&net, &data.test, &tc)
}

fn cmd_eta_bins(cfg: &ExperimentConfig, out: &Path) -> Res<()> {
    let exp = cfg.eta.clone().unwrap_or_default();
    let data = load(cfg)?;
    let reference = BackwardFnSpec::surrogate(&cfg.lif);
    let bins = eta_binned_experiment(&exp, &reference, &cfg.correlation, |m, g, _| {
        train_with_g(cfg, &data, m, g, cfg.network.seed)
    })?;
    write_eta_runs(&bins, create(&out.join("eta_runs.csv"))?)?;
    write_eta_summary(&bins, &exp.mechanisms, create(&out.join("eta_summary.csv"))?)?;
    for b in &bins {
        let parts: Vec<String> = exp
            .mechanisms
            .iter()
            .map(|&m| {
                let s = b.stats(m);
                format!("{m} {}", s.mean.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()))
            })
            .collect();
        say!("[{:.1}, {:.1}) n={}: {}", b.lo, b.hi, b.chosen.len(), parts.join(", "));
    }
    Ok(())
}

fn cmd_width_scan(
    cfg: &ExperimentConfig,
    family: &str,
    exponents: std::ops::RangeInclusive<i32>,
    trials: usize,
    out: &Path,
) -> Res<()> {
    let (family, base) = match (family, &cfg.train.backward) {
        ("gaussian", Some(g @ BackwardFnSpec::Gaussian { .. })) => (WidthFamily::Gaussian, g.clone()),
        ("gaussian", _) => (WidthFamily::Gaussian, BackwardFnSpec::gaussian(0.4, 13.0)),
        ("opto", Some(g @ BackwardFnSpec::Opto { .. })) => (WidthFamily::Opto, g.clone()),
        ("opto", _) => (WidthFamily::Opto, BackwardFnSpec::opto(0.1, 150.0)),
        (other, _) => {
            return Err(CliError::Usage(format!(
                "--family {other:?}: expected gaussian or opto"
            )))
        }
    };
    let data = load(cfg)?;
    let reference = BackwardFnSpec::surrogate(&cfg.lif);
    let rows = width_magnitude_scan(&base, family, exponents, trials, &reference, &cfg.correlation, |g, t| {
        let seed = derive_seed(cfg.network.seed, Stream::Trial, t as u64);
        train_with_g(cfg, &data, Mechanism::Adfa, g, seed)
    })?;
    let name = match family {
        WidthFamily::Gaussian => "gaussian",
        WidthFamily::Opto => "opto",
    };
    write_magnitudes(&rows, create(&out.join(format!("width_{name}.csv")))?)?;
    for r in &rows {
        say!(
            "1e{}: mean {}",
            r.exponent,
            r.stats.mean.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    Ok(())
}

fn corr(a: &str, b: &str, cfg: &ExperimentConfig) -> Res<()> {
    let a = specs::parse(a, &cfg.lif)?;
    let b = specs::parse(b, &cfg.lif)?;
    let eta = correlation(&a, &b, &cfg.correlation)?;
    say!("{eta:.9}");
    Ok(())
}

fn rerun(manifest: &Path, out: Option<PathBuf>, data_dir: Option<PathBuf>) -> Res<()> {
    let m = RunManifest::read(manifest)?;
    let argv = std::iter::once("adfa".to_string()).chain(m.args.iter().cloned());
    let cli = Cli::try_parse_from(argv)
        .map_err(|e| CliError::Usage(format!("manifest arguments no longer parse: {e}")))?;
    let command = cli.command;
    if matches!(command, Command::Eval { .. } | Command::Corr { .. } | Command::Rerun { .. }) {
        return Err(CliError::Usage(format!("{} runs cannot be repeated", m.command)));
    }
    let mut cfg = m.config;
    let mut original = m.output_dir.into_os_string();
    original.push("-rerun");
    cfg.output.dir = Some(out.unwrap_or_else(|| PathBuf::from(original)));
    if data_dir.is_some() {
        cfg.data.dir = data_dir;
    }
    exec(&command, cfg, &m.args)
}
