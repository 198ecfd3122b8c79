//! Grid experiments: Cartesian parameter sweeps with repeated trials, the
//! η-binned PRFS study and the order-of-magnitude width scan.
//!
//! The harness knows nothing about training. Each job is handed to a runner
//! closure with its parameter assignment and trial seed, and the runner
//! returns a test accuracy.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::backward::{bin_etas, sample_prfs_with_shift, BackwardFnSpec, Bins, CorrelationConfig, CorrelationGrid};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::Real;
use crate::trainer::Mechanism;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinRange {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRange {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

/// One swept parameter. Exactly one of `values`, `range` or `log_range`
/// must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    /// Dotted config path, e.g. `lif.dt`.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<LinRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_range: Option<LogRange>,
}

/// Rounds away the float noise of `lo + i·step`.
fn tidy(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let scale = 10f64.powi(12 - x.abs().log10().ceil() as i32);
    (x * scale).round() / scale
}

impl Axis {
    pub fn list(path: &str, values: impl IntoIterator<Item = impl Into<Value>>) -> Self {
        Self {
            path: path.to_string(),
            values: Some(values.into_iter().map(Into::into).collect()),
            range: None,
            log_range: None,
        }
    }

    pub fn resolve(&self) -> Result<Vec<Value>> {
        let bad = |m: &str| Err(Error::Config(format!("sweep axis {}: {m}", self.path)));
        let given = [self.values.is_some(), self.range.is_some(), self.log_range.is_some()];
        if given.iter().filter(|&&g| g).count() != 1 {
            return bad("give exactly one of values, range, log_range");
        }
        let out = if let Some(v) = &self.values {
            v.clone()
        } else if let Some(r) = self.range {
            if !(r.step > 0.0 && r.lo <= r.hi && r.lo.is_finite() && r.hi.is_finite()) {
                return bad("range needs lo <= hi and step > 0");
            }
            let n = ((r.hi - r.lo) / r.step + 1e-9).floor() as usize + 1;
            (0..n).map(|i| Value::Float(tidy(r.lo + i as f64 * r.step))).collect()
        } else {
            let r = self.log_range.unwrap();
            if !(r.lo > 0.0 && r.hi >= r.lo && r.points >= 1) {
                return bad("log_range needs 0 < lo <= hi and points >= 1");
            }
            if r.points == 1 {
                vec![Value::Float(r.lo)]
            } else {
                let (a, b) = (r.lo.ln(), r.hi.ln());
                (0..r.points)
                    .map(|i| {
                        let t = i as f64 / (r.points - 1) as f64;
                        Value::Float(tidy((a + t * (b - a)).exp()))
                    })
                    .collect()
            }
        };
        if out.is_empty() {
            return bad("no values");
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axes: Vec<Axis>,
    #[serde(default = "five")]
    pub trials: usize,
    /// Seed from which trial seeds are derived.
    #[serde(default)]
    pub seed: u64,
    /// Concurrent grid points; 1 runs them in order.
    #[serde(default = "one")]
    pub workers: usize,
}

fn five() -> usize {
    5
}

fn one() -> usize {
    1
}

impl SweepSpec {
    pub fn new(axes: Vec<Axis>) -> Self {
        Self {
            axes,
            trials: 5,
            seed: 0,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::Config("sweep needs at least one axis".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("sweep.trials must be >= 1".into()));
        }
        for (i, a) in self.axes.iter().enumerate() {
            a.resolve()?;
            if self.axes[..i].iter().any(|b| b.path == a.path) {
                return Err(Error::Config(format!("sweep axis {} given twice", a.path)));
            }
        }
        Ok(())
    }

    /// Grid points in row-major order (last axis fastest).
    pub fn points(&self) -> Result<Vec<Vec<Value>>> {
        self.validate()?;
        let mut points: Vec<Vec<Value>> = vec![Vec::new()];
        for axis in &self.axes {
            let values = axis.resolve()?;
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(v.clone());
                        q
                    })
                })
                .collect();
        }
        Ok(points)
    }

    /// Seed of trial `t`; shared by every grid point.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, Stream::Trial, trial as u64)
    }
}

/// One unit of work handed to the runner.
#[derive(Debug, Clone, PartialEq)]
pub struct Job<'a> {
    pub point: usize,
    pub assignment: Vec<(&'a str, &'a Value)>,
    pub trial: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub ok: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl TrialStats {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self { ok: 0, mean: None, min: None, max: None };
        }
        Self {
            ok: v.len(),
            mean: Some(v.iter().sum::<f64>() / v.len() as f64),
            min: v.iter().copied().reduce(f64::min),
            max: v.iter().copied().reduce(f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub values: Vec<Value>,
    /// Per-trial accuracy; `Err` holds the failure message.
    pub trials: Vec<std::result::Result<f64, String>>,
}

impl PointResult {
    pub fn stats(&self) -> TrialStats {
        TrialStats::of(self.trials.iter().filter_map(|t| t.as_ref().ok().copied()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub paths: Vec<String>,
    pub points: Vec<PointResult>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl SweepResult {
    /// Axis values, trial statistics and per-trial accuracies.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let trials = self.points.first().map_or(0, |p| p.trials.len());
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = self.paths.clone();
        header.extend(["trials_ok", "mean_acc", "min_acc", "max_acc"].map(String::from));
        header.extend((0..trials).map(|t| format!("trial_{t}")));
        out.write_record(&header)?;
        for p in &self.points {
            let s = p.stats();
            let mut row: Vec<String> = p.values.iter().map(value_label).collect();
            row.extend([s.ok.to_string(), fmt_opt(s.mean), fmt_opt(s.min), fmt_opt(s.max)]);
            row.extend(p.trials.iter().map(|t| match t {
                Ok(a) => format!("{a:.6}"),
                Err(_) => "failed".to_string(),
            }));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Mean accuracy laid out as a matrix: rows follow the first axis,
    /// columns the second. `None` unless the sweep has exactly two axes.
    pub fn write_heatmap(&self, w: impl Write) -> Result<Option<()>> {
        if self.paths.len() != 2 {
            return Ok(None);
        }
        let mut cols: Vec<&Value> = Vec::new();
        let mut rows: Vec<&Value> = Vec::new();
        for p in &self.points {
            if !rows.contains(&&p.values[0]) {
                rows.push(&p.values[0]);
            }
            if !cols.contains(&&p.values[1]) {
                cols.push(&p.values[1]);
            }
        }
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![format!("{}\\{}", self.paths[0], self.paths[1])];
        header.extend(cols.iter().map(|v| value_label(v)));
        out.write_record(&header)?;
        for r in &rows {
            let mut line = vec![value_label(r)];
            for c in &cols {
                let cell = self
                    .points
                    .iter()
                    .find(|p| &&p.values[0] == r && &&p.values[1] == c)
                    .and_then(|p| p.stats().mean);
                line.push(fmt_opt(cell));
            }
            out.write_record(&line)?;
        }
        out.flush()?;
        Ok(Some(()))
    }

    /// Writes `sweep_<fingerprint>.csv` and, for two axes,
    /// `heatmap_<fingerprint>.csv` under `dir`.
    pub fn persist(&self, dir: &Path, fingerprint: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let path = dir.join(format!("sweep_{fingerprint}.csv"));
        self.write_csv(fs::File::create(&path)?)?;
        written.push(path);
        if self.paths.len() == 2 {
            let path = dir.join(format!("heatmap_{fingerprint}.csv"));
            self.write_heatmap(fs::File::create(&path)?)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Runs every grid point for every trial. Failed runs are recorded and the
/// sweep continues. When `point_dir` is given each finished point is also
/// written to its own `point_NNNN.csv` there.
pub fn run_sweep(
    spec: &SweepSpec,
    point_dir: Option<&Path>,
    runner: impl Fn(&Job<'_>) -> Result<f64> + Sync,
) -> Result<SweepResult> {
    let grid = spec.points()?;
    let paths: Vec<String> = spec.axes.iter().map(|a| a.path.clone()).collect();
    if let Some(dir) = point_dir {
        fs::create_dir_all(dir)?;
    }
    let run_point = |(index, values): (usize, &Vec<Value>)| -> Result<PointResult> {
        let trials = (0..spec.trials)
            .map(|trial| {
                let job = Job {
                    point: index,
                    assignment: paths.iter().map(String::as_str).zip(values.iter()).collect(),
                    trial,
                    seed: spec.trial_seed(trial),
                };
                runner(&job).map_err(|e| {
                    log::warn!("point {index} trial {trial} failed: {e}");
                    e.to_string()
                })
            })
            .collect();
        let result = PointResult {
            values: values.clone(),
            trials,
        };
        if let Some(dir) = point_dir {
            let single = SweepResult {
                paths: paths.clone(),
                points: vec![result.clone()],
            };
            single.write_csv(fs::File::create(dir.join(format!("point_{index:04}.csv")))?)?;
        }
        Ok(result)
    };
    let points: Vec<Result<PointResult>> = if spec.workers <= 1 {
        grid.iter().enumerate().map(run_point).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| grid.par_iter().enumerate().map(run_point).collect())
    };
    Ok(SweepResult {
        paths,
        points: points.into_iter().collect::<Result<_>>()?,
    })
}

/// A sampled PRFS together with its correlation to the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<T> {
    pub sample: usize,
    pub eta: f64,
    pub spec: BackwardFnSpec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinOutcome<T> {
    pub lo: f64,
    pub hi: f64,
    /// Fewer than the requested number of candidates fell in this bin.
    pub sparse: bool,
    pub chosen: Vec<Candidate<T>>,
    /// `(mechanism, candidate position in chosen, accuracy)`.
    pub runs: Vec<(Mechanism, usize, std::result::Result<f64, String>)>,
}

impl<T> BinOutcome<T> {
    pub fn stats(&self, mechanism: Mechanism) -> TrialStats {
        TrialStats::of(
            self.runs
                .iter()
                .filter(|(m, _, _)| *m == mechanism)
                .filter_map(|(_, _, a)| a.as_ref().ok().copied()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtaExperiment {
    /// PRFS draws to bin.
    pub samples: usize,
    pub harmonics: usize,
    pub omega: f64,
    pub shift: f64,
    /// Candidates trained per bin.
    pub per_bin: usize,
    pub edges: Vec<f64>,
    pub mechanisms: Vec<Mechanism>,
    pub seed: u64,
}

impl Default for EtaExperiment {
    fn default() -> Self {
        Self {
            samples: 10_000,
            harmonics: 4,
            omega: 0.01,
            shift: 1.0,
            per_bin: 5,
            edges: Bins::eta_default().edges().to_vec(),
            mechanisms: vec![Mechanism::Adfa, Mechanism::Bp],
            seed: 0,
        }
    }
}

/// Samples PRFS candidates and their `η` against `reference`.
pub fn sample_candidates<T: Real>(
    samples: usize,
    harmonics: usize,
    omega: f64,
    shift: f64,
    seed: u64,
    reference: &BackwardFnSpec<T>,
    cfg: &CorrelationConfig<T>,
) -> Result<Vec<(BackwardFnSpec<T>, Option<f64>)>> {
    let grid = CorrelationGrid::new(reference, cfg)?;
    (0..samples)
        .map(|i| {
            let spec = sample_prfs_with_shift(
                derive_seed(seed, Stream::Prfs, i as u64),
                harmonics,
                T::lit(omega),
                T::lit(shift),
            )?;
            let eta = grid.eta(&spec).ok().map(Real::as_f64);
            Ok((spec, eta))
        })
        .collect()
}

/// Trains randomly chosen PRFS from every `η` bin with each mechanism.
/// `runner(mechanism, g, index)` returns the test accuracy of one run.
pub fn eta_binned_experiment<T: Real>(
    exp: &EtaExperiment,
    reference: &BackwardFnSpec<T>,
    cfg: &CorrelationConfig<T>,
    runner: impl Fn(Mechanism, &BackwardFnSpec<T>, usize) -> Result<f64>,
) -> Result<Vec<BinOutcome<T>>> {
    let bins = Bins::new(exp.edges.clone())?;
    if exp.per_bin == 0 || exp.samples == 0 {
        return Err(Error::Config("eta experiment needs samples >= 1 and per_bin >= 1".into()));
    }
    let drawn = sample_candidates(exp.samples, exp.harmonics, exp.omega, exp.shift, exp.seed, reference, cfg)?;
    let etas: Vec<Option<f64>> = drawn.iter().map(|(_, e)| *e).collect();
    let binned = bin_etas::<T>(&etas, &bins);
    let mut out = Vec::with_capacity(bins.len());
    for (b, members) in binned.members.iter().enumerate() {
        let mut members = members.clone();
        members.shuffle(&mut stream_rng(exp.seed, Stream::Shuffle, b as u64));
        members.truncate(exp.per_bin);
        let chosen: Vec<Candidate<T>> = members
            .iter()
            .map(|&(i, eta)| Candidate {
                sample: i,
                eta,
                spec: drawn[i].0.clone(),
            })
            .collect();
        let mut runs = Vec::new();
        for &mechanism in &exp.mechanisms {
            for (k, c) in chosen.iter().enumerate() {
                let acc = runner(mechanism, &c.spec, k).map_err(|e| {
                    log::warn!("bin {b} {mechanism} candidate {}: {e}", c.sample);
                    e.to_string()
                });
                runs.push((mechanism, k, acc));
            }
        }
        let (lo, hi) = bins.bounds(b);
        out.push(BinOutcome {
            lo,
            hi,
            sparse: chosen.len() < exp.per_bin,
            chosen,
            runs,
        });
    }
    Ok(out)
}

/// `bin_lo,bin_hi,mechanism,sample,eta,accuracy` per run.
pub fn write_eta_runs<T>(bins: &[BinOutcome<T>], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin_lo", "bin_hi", "mechanism", "sample", "eta", "accuracy"])?;
    for b in bins {
        for (m, k, acc) in &b.runs {
            let c = &b.chosen[*k];
            out.write_record([
                format!("{:.1}", b.lo),
                format!("{:.1}", b.hi),
                m.to_string(),
                c.sample.to_string(),
                format!("{:.6}", c.eta),
                acc.as_ref().map(|a| format!("{a:.6}")).unwrap_or_else(|_| "failed".into()),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-bin box statistics: `bin_lo,bin_hi,mechanism,candidates,sparse,mean,min,max`.
pub fn write_eta_summary<T>(bins: &[BinOutcome<T>], mechanisms: &[Mechanism], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin_lo", "bin_hi", "mechanism", "candidates", "sparse", "mean_acc", "min_acc", "max_acc"])?;
    for b in bins {
        for &m in mechanisms {
            let s = b.stats(m);
            out.write_record([
                format!("{:.1}", b.lo),
                format!("{:.1}", b.hi),
                m.to_string(),
                b.chosen.len().to_string(),
                b.sparse.to_string(),
                fmt_opt(s.mean),
                fmt_opt(s.min),
                fmt_opt(s.max),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthFamily {
    /// Scans the width `c`.
    Gaussian,
    /// Scans the angular frequency `ω`.
    Opto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeRow<T> {
    pub exponent: i32,
    pub spec: BackwardFnSpec<T>,
    pub eta: Option<f64>,
    pub stats: TrialStats,
}

/// Replaces the width parameter of `base` with `10^exponent`.
pub fn with_magnitude<T: Real>(base: &BackwardFnSpec<T>, family: WidthFamily, exponent: i32) -> Result<BackwardFnSpec<T>> {
    let v = T::lit(10f64.powi(exponent));
    match (family, base) {
        (WidthFamily::Gaussian, BackwardFnSpec::Gaussian { a, b, .. }) => Ok(BackwardFnSpec::Gaussian { a: *a, b: *b, c: v }),
        (WidthFamily::Opto, BackwardFnSpec::Opto { theta, .. }) => Ok(BackwardFnSpec::Opto { omega: v, theta: *theta }),
        _ => Err(Error::InvalidParameter(format!(
            "{} base does not match the scanned family",
            base.family()
        ))),
    }
}

/// Accuracy and `η` for each order of magnitude of the width parameter.
pub fn width_magnitude_scan<T: Real>(
    base: &BackwardFnSpec<T>,
    family: WidthFamily,
    exponents: impl IntoIterator<Item = i32>,
    trials: usize,
    reference: &BackwardFnSpec<T>,
    cfg: &CorrelationConfig<T>,
    runner: impl Fn(&BackwardFnSpec<T>, usize) -> Result<f64>,
) -> Result<Vec<MagnitudeRow<T>>> {
    let grid = CorrelationGrid::new(reference, cfg)?;
    exponents
        .into_iter()
        .map(|exponent| {
            let spec = with_magnitude(base, family, exponent)?;
            let eta = grid.eta(&spec).ok().map(Real::as_f64);
            let accs: Vec<f64> = (0..trials)
                .filter_map(|t| match runner(&spec, t) {
                    Ok(a) => Some(a),
                    Err(e) => {
                        log::warn!("magnitude 1e{exponent} trial {t}: {e}");
                        None
                    }
                })
                .collect();
            Ok(MagnitudeRow {
                exponent,
                spec,
                eta,
                stats: TrialStats::of(accs),
            })
        })
        .collect()
}

/// `exponent,value,eta,trials_ok,mean_acc,min_acc,max_acc`.
pub fn write_magnitudes<T: Real>(rows: &[MagnitudeRow<T>], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["exponent", "value", "eta", "trials_ok", "mean_acc", "min_acc", "max_acc"])?;
    for r in rows {
        out.write_record([
            r.exponent.to_string(),
            format!("{}", 10f64.powi(r.exponent)),
            fmt_opt(r.eta),
            r.stats.ok.to_string(),
            fmt_opt(r.stats.mean),
            fmt_opt(r.stats.min),
            fmt_opt(r.stats.max),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Fixed-width histogram of sampled `η` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub counts: Vec<usize>,
    /// Samples whose `η` was undefined or fell outside `[lo, lo + width·len)`.
    pub dropped: usize,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, width: f64) -> Result<Self> {
        if !(width > 0.0 && lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::Config("histogram needs lo < hi and width > 0".into()));
        }
        let n = ((hi - lo) / width - 1e-9).ceil() as usize;
        Ok(Self { lo, width, counts: vec![0; n], dropped: 0 })
    }

    pub fn fill(&mut self, values: impl IntoIterator<Item = Option<f64>>) {
        for v in values {
            let slot = v
                .map(|x| ((x - self.lo) / self.width).floor())
                .filter(|&b| b >= 0.0 && (b as usize) < self.counts.len());
            match slot {
                Some(b) => self.counts[b as usize] += 1,
                None => self.dropped += 1,
            }
        }
    }

    pub fn bounds(&self, bin: usize) -> (f64, f64) {
        let lo = tidy(self.lo + bin as f64 * self.width);
        (lo, tidy(lo + self.width))
    }

    /// Counts rise to a single peak and then fall, ignoring dips of at most
    /// `tolerance` samples.
    pub fn is_unimodal(&self, tolerance: usize) -> bool {
        let peak = self
            .counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let rising = self.counts[..=peak].windows(2).all(|w| w[1] + tolerance >= w[0]);
        let falling = self.counts[peak..].windows(2).all(|w| w[0] + tolerance >= w[1]);
        rising && falling
    }

    /// `bin_lo,bin_hi,count`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin_lo", "bin_hi", "count"])?;
        for (b, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.bounds(b);
            out.write_record([format!("{lo}"), format!("{hi}"), c.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lif::LifParams;

    fn two_axis() -> SweepSpec {
        SweepSpec {
            trials: 2,
            ..SweepSpec::new(vec![
                Axis::list("lif.dt", [0.25, 0.5]),
                Axis {
                    path: "init.gamma".into(),
                    values: None,
                    range: Some(LinRange { lo: 0.1, hi: 0.3, step: 0.1 }),
                    log_range: None,
                },
            ])
        }
    }

    #[test]
    fn ranges_resolve_without_float_noise() {
        let r = Axis {
            path: "backward.omega".into(),
            values: None,
            range: Some(LinRange { lo: 0.05, hi: 0.3, step: 0.05 }),
            log_range: None,
        };
        let v: Vec<f64> = r.resolve().unwrap().iter().map(|x| x.as_float().unwrap()).collect();
        assert_eq!(v, vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3]);

        let g = Axis {
            path: "init.gamma".into(),
            values: None,
            range: None,
            log_range: Some(LogRange { lo: 0.001, hi: 0.5, points: 30 }),
        };
        let v: Vec<f64> = g.resolve().unwrap().iter().map(|x| x.as_float().unwrap()).collect();
        assert_eq!(v.len(), 30);
        assert_eq!((v[0], v[29]), (0.001, 0.5));
        assert!(v.windows(2).all(|w| w[1] / w[0] > 1.23 && w[1] / w[0] < 1.25));

        let both = Axis { values: Some(vec![]), ..g };
        assert!(both.resolve().is_err());
    }

    #[test]
    fn grid_is_the_cartesian_product() {
        let spec = two_axis();
        let pts = spec.points().unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1], vec![Value::Float(0.25), Value::Float(0.2)]);
        assert!(SweepSpec::new(vec![]).validate().is_err());
        let dup = SweepSpec::new(vec![Axis::list("a", [1]), Axis::list("a", [2])]);
        assert!(dup.validate().is_err());
    }

    #[test]
    fn failures_are_recorded_and_the_sweep_continues() {
        let spec = two_axis();
        let res = run_sweep(&spec, None, |job| {
            let dt = job.assignment[0].1.as_float().unwrap();
            let g = job.assignment[1].1.as_float().unwrap();
            if g > 0.25 && job.trial == 1 {
                Err(Error::EmptyDataset)
            } else {
                Ok(dt + g + job.trial as f64)
            }
        })
        .unwrap();
        let last = res.points[5].stats();
        assert_eq!(last.ok, 1);
        assert_eq!(last.mean, Some(0.5 + 0.3));
        let first = res.points[0].stats();
        assert_eq!((first.min, first.max), (Some(0.35), Some(1.35)));
        assert!((first.mean.unwrap() - 0.85).abs() < 1e-12);
    }

    #[test]
    fn trial_seeds_are_shared_across_points_and_distinct_across_trials() {
        let spec = two_axis();
        let seen = std::sync::Mutex::new(Vec::new());
        run_sweep(&spec, None, |job| {
            seen.lock().unwrap().push((job.point, job.trial, job.seed));
            Ok(0.0)
        })
        .unwrap();
        let seen = seen.into_inner().unwrap();
        for &(_, t, s) in &seen {
            assert_eq!(s, spec.trial_seed(t));
        }
        assert_ne!(spec.trial_seed(0), spec.trial_seed(1));
    }

    #[test]
    fn persisted_grid_does_not_depend_on_worker_count() {
        let runner = |job: &Job<'_>| Ok(job.point as f64 * 0.1 + job.trial as f64);
        let serial = run_sweep(&two_axis(), None, runner).unwrap();
        let parallel = run_sweep(&SweepSpec { workers: 3, ..two_axis() }, None, runner).unwrap();
        assert_eq!(serial, parallel);

        let dir = tempfile::tempdir().unwrap();
        let files = serial.persist(dir.path(), "abcd1234").unwrap();
        assert_eq!(files.len(), 2);
        let heat = fs::read_to_string(dir.path().join("heatmap_abcd1234.csv")).unwrap();
        let mut lines = heat.lines();
        assert_eq!(lines.next().unwrap(), "lif.dt\\init.gamma,0.1,0.2,0.3");
        assert_eq!(lines.next().unwrap(), "0.25,0.500000,0.600000,0.700000");
        let table = fs::read_to_string(&files[0]).unwrap();
        assert!(table.starts_with("lif.dt,init.gamma,trials_ok,mean_acc,min_acc,max_acc,trial_0,trial_1\n"));

        let points = tempfile::tempdir().unwrap();
        run_sweep(&two_axis(), Some(points.path()), runner).unwrap();
        assert_eq!(fs::read_dir(points.path()).unwrap().count(), 6);
    }

    #[test]
    fn eta_experiment_bins_and_reports_sparse_bins() {
        let reference = BackwardFnSpec::<f64>::surrogate(&LifParams::default());
        let cfg = CorrelationConfig { step: 0.05, ..Default::default() };
        let exp = EtaExperiment {
            samples: 60,
            per_bin: 3,
            ..Default::default()
        };
        let bins = eta_binned_experiment(&exp, &reference, &cfg, |m, g, _| {
            g.validate()?;
            Ok(if m == Mechanism::Adfa { 0.9 } else { 0.5 })
        })
        .unwrap();
        assert_eq!(bins.len(), 6);
        for b in &bins {
            assert!(b.chosen.len() <= 3);
            assert_eq!(b.sparse, b.chosen.len() < 3);
            assert!(b.chosen.iter().all(|c| c.eta >= b.lo && c.eta <= b.hi));
            assert_eq!(b.runs.len(), 2 * b.chosen.len());
            if !b.chosen.is_empty() {
                assert_eq!(b.stats(Mechanism::Adfa).mean, Some(0.9));
            }
        }
        let mut buf = Vec::new();
        write_eta_summary(&bins, &exp.mechanisms, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 12);
    }

    #[test]
    fn magnitude_scan_swaps_the_width_parameter() {
        let reference = BackwardFnSpec::<f64>::surrogate(&LifParams::default());
        let cfg = CorrelationConfig { step: 0.05, ..Default::default() };
        let base = BackwardFnSpec::gaussian(0.4, 13.0);
        let rows = width_magnitude_scan(&base, WidthFamily::Gaussian, -2..=2, 2, &reference, &cfg, |g, t| {
            let BackwardFnSpec::Gaussian { c, .. } = g else { unreachable!() };
            Ok(*c + t as f64)
        })
        .unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[3].spec, BackwardFnSpec::gaussian(0.4, 10.0));
        assert_eq!(rows[3].stats.mean, Some(10.5));
        assert!(rows.iter().all(|r| r.eta.is_some()));
        assert!(with_magnitude(&base, WidthFamily::Opto, 0).is_err());
    }

    #[test]
    fn histogram_counts_and_shape() {
        let mut h = Histogram::new(-1.0, 1.0, 0.5).unwrap();
        assert_eq!(h.counts.len(), 4);
        h.fill([Some(-0.9), Some(-0.1), Some(0.0), Some(0.2), Some(0.99), Some(1.0), None]);
        assert_eq!(h.counts, vec![1, 1, 2, 1]);
        assert_eq!(h.dropped, 2);
        assert!(h.is_unimodal(0));
        let mut out = Vec::new();
        h.write_csv(&mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("bin_lo,bin_hi,count\n-1,-0.5,1\n"));
        assert!(Histogram::new(0.0, 0.0, 0.1).is_err());

        let dip = Histogram { counts: vec![3, 1, 2, 0], ..h };
        assert!(!dip.is_unimodal(0));
        assert!(dip.is_unimodal(1));
    }
}
