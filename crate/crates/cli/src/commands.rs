use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use phtail::data::{load_csv, save_csv, write_table, Dataset, Marginal, Provenance};
use phtail::grad::Tensor;
use phtail::metrics::{
    ccdf_csv, coex_err, corr_err, empirical_ccdf, ks_tail, mean_sd, q_rel_error, tau_err, CoexEntry,
    MeanSd, MetricsReport, Thresholds, Truth,
};
use phtail::ph::{canonical_to_json, ccdf as ph_ccdf, UniformizationConfig};
use phtail::train::{fit_canonical, TrainConfig};
use serde::Serialize;

use crate::error::{input, CliError};
use crate::opts::{generate, Common, DataArgs, GenSpec, Layout, ModelArgs, TrainArgs};
use crate::output::{announce, fresh_dir, fresh_file, json_string, write_json};
use crate::pipeline::{final_nll, mean_epoch_seconds, train_layout, Checkpoint};

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

// ---------------------------------------------------------------- gen

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub spec: GenSpec,
}

#[derive(Serialize)]
struct GenRecord<'a> {
    rows: usize,
    columns: &'a [String],
    provenance: &'a Provenance,
}

pub fn gen(a: &GenArgs) -> Result<(), CliError> {
    let s = a.common.settings()?;
    let seed = a.common.seed(&s)?;
    let out = a.common.out(&s, "data.csv")?;
    let (g, n) = a
        .spec
        .resolve(&s)?
        .ok_or_else(|| CliError::invalid("gen needs --family"))?;
    s.finish()?;
    let ds = generate(&g, n, seed)?;
    let path = fresh_file(&out)?;
    save_csv(&ds, &path)?;
    let prov = sibling(&path, ".provenance.json");
    write_json(
        &prov,
        &GenRecord {
            rows: ds.rows(),
            columns: &ds.columns,
            provenance: &ds.provenance,
        },
    )?;
    announce(&path);
    announce(&prov);
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
pub struct TrainCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Experiment name, used for the default run directory
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    name: &'a str,
    decoder: &'a str,
    rows: usize,
    columns: &'a [String],
    provenance: &'a Provenance,
    train: &'a TrainConfig,
    final_nll: Option<f64>,
}

pub fn train(a: &TrainCmd) -> Result<(), CliError> {
    let s = a.common.settings()?;
    let seed = a.common.seed(&s)?;
    let name = s.string("name", a.name.as_deref())?.unwrap_or_else(|| "run".into());
    let out = a.common.out(&s, &format!("runs/{name}"))?;
    let opts = a.model.resolve(&s)?;
    let cfg = a.train.resolve(&s, seed, TrainConfig::default())?;
    let loaded = a
        .data
        .resolve(&s, seed)?
        .ok_or_else(|| CliError::invalid("no data: pass --data or --family"))?;
    s.finish()?;
    if let Some(k) = opts.dims {
        if k > loaded.dataset.dims() {
            return Err(CliError::invalid(format!(
                "--dims {k} exceeds the {} data columns",
                loaded.dataset.dims()
            )));
        }
    }

    let dir = fresh_dir(&out)?;
    let trained = train_layout(&loaded.dataset, &opts, &cfg, Some(&dir))?;
    let ck_path = dir.join("model.json");
    write_json(&ck_path, &trained.checkpoint)?;
    let decoder = match opts.layout {
        Layout::Ph => "ph",
        Layout::Gaussian => "gaussian",
        Layout::IndependentPh => "independent-ph",
    };
    write_json(
        &dir.join("run.json"),
        &RunRecord {
            name: &name,
            decoder,
            rows: loaded.dataset.rows(),
            columns: &trained.checkpoint.columns,
            provenance: &loaded.dataset.provenance,
            train: &cfg,
            final_nll: final_nll(&trained.logs),
        },
    )?;
    if let Some(nll) = final_nll(&trained.logs) {
        println!("final_nll {nll:.6}");
    }
    announce(&dir);
    Ok(())
}

// ---------------------------------------------------------------- sample

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint file or run directory
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of rows (default 100000)
    #[arg(long)]
    pub n: Option<usize>,
}

pub fn sample(a: &SampleArgs) -> Result<(), CliError> {
    let s = a.common.settings()?;
    let seed = a.common.seed(&s)?;
    let out = a.common.out(&s, "samples.csv")?;
    let flag = a.checkpoint.as_ref().map(|p| p.to_string_lossy().into_owned());
    let ck = s
        .string("checkpoint", flag.as_deref())?
        .ok_or_else(|| CliError::invalid("sample needs --checkpoint"))?;
    let n = s.usize("n", a.n)?.unwrap_or(100_000);
    s.finish()?;
    let ck = Checkpoint::load(Path::new(&ck))?;
    let table = ck.generate(n, seed)?;
    let path = fresh_file(&out)?;
    write_table(&path, &ck.columns, &table)?;
    announce(&path);
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Generated table; repeat for several seeds
    #[arg(long = "gen")]
    pub gen: Vec<PathBuf>,
    /// Reference data table
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Analytic reference marginal, e.g. pareto:2.4,1.0
    #[arg(long)]
    pub truth: Option<String>,
    /// Tail threshold level for KS (default 0.95)
    #[arg(long)]
    pub ks_q: Option<f64>,
    /// Extreme quantile level (default 0.99)
    #[arg(long)]
    pub level: Option<f64>,
    /// Co-exceedance levels, comma separated (default 0.95,0.99)
    #[arg(long)]
    pub coex_q: Option<String>,
    /// Threshold each table by its own marginal quantiles
    #[arg(long)]
    pub own_thresholds: bool,
    /// Write CCDF points of the generated table(s) here
    #[arg(long)]
    pub ccdf: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalOpts {
    pub ks_q: f64,
    pub level: f64,
    pub coex_q: Vec<f64>,
    pub thresholds: Thresholds,
}

impl Default for EvalOpts {
    fn default() -> Self {
        Self {
            ks_q: 0.95,
            level: 0.99,
            coex_q: vec![0.95, 0.99],
            thresholds: Thresholds::Real,
        }
    }
}

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    (0..t.rows()).map(|r| t.get(r, j)).collect()
}

/// Metrics of `generated` against an analytic marginal (applied to every
/// column) and/or a real table.
pub fn evaluate(
    generated: &Tensor,
    real: Option<&Tensor>,
    truth: Option<&Marginal>,
    opts: &EvalOpts,
) -> Result<MetricsReport, CliError> {
    if let Some(r) = real {
        if r.cols() != generated.cols() {
            return Err(CliError::invalid(format!(
                "dimension mismatch: reference has {} columns, generated has {}",
                r.cols(),
                generated.cols()
            )));
        }
    }
    let mut rep = MetricsReport {
        n_reference: real.map_or(0, Tensor::rows),
        n_generated: generated.rows(),
        ..Default::default()
    };
    if generated.rows() == 0 {
        return Err(CliError::invalid("generated table has no rows"));
    }
    for j in 0..generated.cols() {
        let g = column(generated, j);
        let r = real.map(|r| column(r, j));
        let t = match (truth, &r) {
            (Some(m), _) => Truth::Analytic(m),
            (None, Some(r)) => Truth::Samples(r),
            (None, None) => return Err(CliError::invalid("eval needs --real or --truth")),
        };
        rep.ks_tail.push(ks_tail(&g, t, opts.ks_q).map_err(input)?);
        rep.q99_rel_err.push(q_rel_error(&g, t, opts.level).map_err(input)?);
    }
    if let Some(r) = real.filter(|r| r.cols() >= 2) {
        rep.corr_err = Some(corr_err(r, generated)?);
        rep.tau_err = Some(tau_err(r, generated)?);
        for &q in &opts.coex_q {
            rep.coex_err.push(CoexEntry {
                q,
                err: coex_err(r, generated, q, opts.thresholds).map_err(input)?,
            });
        }
    }
    Ok(rep)
}

#[derive(Serialize, Default)]
struct Summary {
    ks_tail: Vec<Option<MeanSd>>,
    q99_rel_err: Vec<Option<MeanSd>>,
    corr_err: Option<MeanSd>,
    tau_err: Option<MeanSd>,
    coex_err: Vec<(f64, Option<MeanSd>)>,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    generated: Vec<String>,
    reference: Option<String>,
    truth: Option<&'a Marginal>,
    runs: &'a [MetricsReport],
    summary: Summary,
}

fn summarize(runs: &[MetricsReport]) -> Summary {
    let dims = runs.first().map_or(0, |r| r.ks_tail.len());
    let opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        let v: Vec<f64> = runs.iter().filter_map(f).collect();
        mean_sd(&v)
    };
    Summary {
        ks_tail: (0..dims).map(|j| opt(&|r| r.ks_tail[j])).collect(),
        q99_rel_err: (0..dims).map(|j| opt(&|r| Some(r.q99_rel_err[j]))).collect(),
        corr_err: opt(&|r| r.corr_err),
        tau_err: opt(&|r| r.tau_err),
        coex_err: runs
            .first()
            .map(|r| r.coex_err.iter().enumerate().map(|(k, e)| (e.q, opt(&|r| Some(r.coex_err[k].err)))).collect())
            .unwrap_or_default(),
    }
}

fn fmt_ms(v: &Option<MeanSd>) -> String {
    match v {
        Some(m) => format!("{:>10.4} {:>10.4} {:>4}", m.mean, m.sd, m.count),
        None => format!("{:>10} {:>10} {:>4}", "N/A", "", 0),
    }
}

fn print_table(columns: &[String], s: &Summary) {
    println!("{:<20} {:>10} {:>10} {:>4}", "metric", "mean", "sd", "n");
    for (j, v) in s.ks_tail.iter().enumerate() {
        println!("{:<20} {}", format!("ks_tail[{}]", columns[j]), fmt_ms(v));
    }
    for (j, v) in s.q99_rel_err.iter().enumerate() {
        println!("{:<20} {}", format!("q_rel_err[{}]", columns[j]), fmt_ms(v));
    }
    if s.corr_err.is_some() {
        println!("{:<20} {}", "corr_err", fmt_ms(&s.corr_err));
        println!("{:<20} {}", "tau_err", fmt_ms(&s.tau_err));
    }
    for (q, v) in &s.coex_err {
        println!("{:<20} {}", format!("coex_err@{q}"), fmt_ms(v));
    }
}

fn parse_levels(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|t| {
            let q: f64 = t
                .trim()
                .parse()
                .map_err(|_| CliError::invalid(format!("bad level '{t}'")))?;
            if q > 0.0 && q < 1.0 {
                Ok(q)
            } else {
                Err(CliError::invalid(format!("level must be in (0, 1), got {q}")))
            }
        })
        .collect()
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let s = a.common.settings()?;
    let out = a.common.out(&s, "report.json")?;
    let gen_paths: Vec<String> = if a.gen.is_empty() {
        s.string("gen", None)?
            .map(|g| g.split(',').map(|p| p.trim().to_string()).collect())
            .unwrap_or_default()
    } else {
        s.string("gen", None)?;
        a.gen.iter().map(|p| p.to_string_lossy().into_owned()).collect()
    };
    if gen_paths.is_empty() {
        return Err(CliError::invalid("eval needs at least one --gen table"));
    }
    let real_flag = a.real.as_ref().map(|p| p.to_string_lossy().into_owned());
    let real_path = s.string("real", real_flag.as_deref())?;
    let truth = s
        .string("truth", a.truth.as_deref())?
        .map(|t| Marginal::parse(&t).map_err(input))
        .transpose()?;
    let ccdf_flag = a.ccdf.as_ref().map(|p| p.to_string_lossy().into_owned());
    let ccdf_path = s.string("ccdf", ccdf_flag.as_deref())?;
    let mut opts = EvalOpts {
        ks_q: s.f64("ks_q", a.ks_q)?.unwrap_or(0.95),
        level: s.f64("level", a.level)?.unwrap_or(0.99),
        ..Default::default()
    };
    if let Some(q) = s.string("coex_q", a.coex_q.as_deref())? {
        opts.coex_q = parse_levels(&q)?;
    }
    if s.flag("own_thresholds", a.own_thresholds)? {
        opts.thresholds = Thresholds::Own;
    }
    parse_levels(&format!("{},{}", opts.ks_q, opts.level))?;
    s.finish()?;
    if real_path.is_none() && truth.is_none() {
        return Err(CliError::invalid("eval needs --real or --truth"));
    }

    let real = real_path
        .as_deref()
        .map(|p| load_csv(Path::new(p)).map_err(input))
        .transpose()?;
    let gens: Vec<Dataset> = gen_paths
        .iter()
        .map(|p| load_csv(Path::new(p)).map_err(input))
        .collect::<Result<_, _>>()?;
    let dims = gens[0].dims();
    if gens.iter().any(|g| g.dims() != dims) {
        return Err(CliError::invalid("generated tables differ in width"));
    }
    let runs: Vec<MetricsReport> = gens
        .iter()
        .map(|g| evaluate(&g.values, real.as_ref().map(|r| &r.values), truth.as_ref(), &opts))
        .collect::<Result<_, _>>()?;
    let summary = summarize(&runs);
    print_table(&gens[0].columns, &summary);

    let report = EvalReport {
        generated: gen_paths,
        reference: real_path,
        truth: truth.as_ref(),
        runs: &runs,
        summary,
    };
    let path = fresh_file(&out)?;
    std::fs::write(&path, json_string(&report)?)?;
    announce(&path);

    if let Some(c) = ccdf_path {
        let path = fresh_file(Path::new(&c))?;
        std::fs::write(&path, ccdf_table(&gens)?)?;
        announce(&path);
    }
    Ok(())
}

/// `x,survival` for a single 1-D table; otherwise prefixed by table and
/// column indices.
fn ccdf_table(gens: &[Dataset]) -> Result<String, CliError> {
    if gens.len() == 1 && gens[0].dims() == 1 {
        return Ok(ccdf_csv(&empirical_ccdf(&gens[0].column(0))));
    }
    let mut s = String::from("table,dim,x,survival\n");
    for (t, g) in gens.iter().enumerate() {
        for j in 0..g.dims() {
            for line in ccdf_csv(&empirical_ccdf(&g.column(j))).lines().skip(1) {
                s.push_str(&format!("{t},{j},{line}\n"));
            }
        }
    }
    Ok(s)
}

// ---------------------------------------------------------------- fit-ph

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Column to fit (default 0)
    #[arg(long)]
    pub column: Option<usize>,
    /// Number of phases (default 10)
    #[arg(long)]
    pub phases: Option<usize>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Write fitted and empirical CCDF at the data points here
    #[arg(long)]
    pub ccdf: Option<PathBuf>,
}

pub fn fit_defaults() -> TrainConfig {
    TrainConfig {
        lr0: 0.05,
        weight_decay: 0.0,
        epochs: 60,
        batch_size: 1000,
        lr_decay_every: 40,
        ..TrainConfig::default()
    }
}

pub fn fit_ph(a: &FitArgs) -> Result<(), CliError> {
    let s = a.common.settings()?;
    let seed = a.common.seed(&s)?;
    let out = a.common.out(&s, "fit.json")?;
    let m = s.usize("phases", a.phases)?.unwrap_or(10);
    if m == 0 {
        return Err(CliError::invalid("phases must be >= 1"));
    }
    let col = s.usize("column", a.column)?.unwrap_or(0);
    let cfg = a.train.resolve(&s, seed, fit_defaults())?;
    let ccdf_flag = a.ccdf.as_ref().map(|p| p.to_string_lossy().into_owned());
    let ccdf_path = s.string("ccdf", ccdf_flag.as_deref())?;
    let loaded = a
        .data
        .resolve(&s, seed)?
        .ok_or_else(|| CliError::invalid("no data: pass --data or --family"))?;
    s.finish()?;
    if col >= loaded.dataset.dims() {
        return Err(CliError::invalid(format!("column {col} out of range")));
    }
    let x = loaded.dataset.column(col);
    let fit = fit_canonical(&x, m, &cfg)?;
    println!("nll {:.6}", fit.nll);

    let path = fresh_file(&out)?;
    std::fs::write(&path, canonical_to_json(&fit.ph) + "\n")?;
    announce(&path);
    let log_path = fresh_file(&sibling(&path, "_log.csv"))?;
    let mut log = String::from("epoch,nll\n");
    for (e, v) in fit.history.iter().enumerate() {
        log.push_str(&format!("{e},{v:.16e}\n"));
    }
    std::fs::write(&log_path, log)?;
    announce(&log_path);

    if let Some(c) = ccdf_path {
        let ucfg = UniformizationConfig {
            max_terms: 2_000_000,
            ..UniformizationConfig::default()
        };
        let mut text = String::from("x,empirical,model\n");
        for (xv, emp) in empirical_ccdf(&x) {
            let model = ph_ccdf(&fit.ph, xv, &ucfg)?;
            text.push_str(&format!("{xv:.16e},{emp:.16e},{model:.16e}\n"));
        }
        let p = fresh_file(Path::new(&c))?;
        std::fs::write(&p, text)?;
        announce(&p);
    }
    Ok(())
}

// ---------------------------------------------------------------- ablate

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Cells as m:beta pairs, comma separated
    #[arg(long)]
    pub grid: Option<String>,
    /// Analytic reference marginal, e.g. pareto:2.4,1.0
    #[arg(long)]
    pub truth: Option<String>,
    /// Generated rows per cell (default 100000)
    #[arg(long)]
    pub n_gen: Option<usize>,
}

pub const DEFAULT_GRID: &str = "10:1,5:1,15:1,10:0.5,10:2";

pub fn parse_grid(text: &str) -> Result<Vec<(usize, f64)>, CliError> {
    text.split(',')
        .map(|cell| {
            let bad = || CliError::invalid(format!("grid cell '{cell}' is not m:beta"));
            let (m, b) = cell.trim().split_once(':').ok_or_else(bad)?;
            let m: usize = m.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            if m == 0 || !(b.is_finite() && b >= 0.0) {
                return Err(bad());
            }
            Ok((m, b))
        })
        .collect()
}

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.16e}"))
}

fn mean_of(v: &[Option<f64>]) -> Option<f64> {
    let got: Vec<f64> = v.iter().flatten().copied().collect();
    if got.is_empty() || got.len() != v.len() {
        None
    } else {
        Some(got.iter().sum::<f64>() / got.len() as f64)
    }
}

pub fn ablate(a: &AblateArgs) -> Result<(), CliError> {
    let s = a.common.settings()?;
    let seed = a.common.seed(&s)?;
    let out = a.common.out(&s, "ablation")?;
    let grid = parse_grid(&s.string("grid", a.grid.as_deref())?.unwrap_or_else(|| DEFAULT_GRID.into()))?;
    let truth_flag = s
        .string("truth", a.truth.as_deref())?
        .map(|t| Marginal::parse(&t).map_err(input))
        .transpose()?;
    let n_gen = s.usize("n_gen", a.n_gen)?.unwrap_or(100_000);
    let base = a.model.resolve(&s)?;
    if base.layout != Layout::Ph {
        return Err(CliError::invalid("ablate varies the PH decoder; --decoder must be ph"));
    }
    let cfg = a.train.resolve(&s, seed, TrainConfig::default())?;
    let loaded = match a.data.resolve(&s, seed)? {
        Some(l) => l,
        None => {
            let m = Marginal::Pareto { alpha: 2.4, xm: 1.0 };
            let ds = phtail::data::gen_marginal(&m, 10_000, seed)?;
            crate::opts::LoadedData { dataset: ds, truth: Some(m) }
        }
    };
    s.finish()?;
    let truth = truth_flag.or(loaded.truth);
    let data = match base.dims {
        Some(k) => loaded.dataset.leading(k).map_err(input)?,
        None => loaded.dataset.clone(),
    };

    let dir = fresh_dir(&out)?;
    let mut table = String::from("variant,m,beta,ks_tail,q99_rel_err,coex_err_99,final_nll\n");
    let mut timing = String::from("variant,m,beta,seconds_per_epoch,total_seconds\n");
    let eval_opts = EvalOpts {
        coex_q: vec![0.99],
        ..EvalOpts::default()
    };
    for (i, &(m, beta)) in grid.iter().enumerate() {
        let started = Instant::now();
        let mut opts = base.clone();
        opts.phases = m;
        opts.beta = beta;
        opts.dims = None;
        let cell_dir = dir.join(format!("cell_{i}"));
        std::fs::create_dir_all(&cell_dir)?;
        let trained = train_layout(&data, &opts, &cfg, Some(&cell_dir))?;
        write_json(&cell_dir.join("model.json"), &trained.checkpoint)?;
        let generated = trained.checkpoint.generate(n_gen, seed)?;
        let rep = evaluate(&generated, Some(&data.values), truth.as_ref(), &eval_opts)?;
        write_json(&cell_dir.join("report.json"), &rep)?;
        let variant = format!("m={m} beta={beta}");
        table.push_str(&format!(
            "{variant},{m},{beta},{},{},{},{}\n",
            na(mean_of(&rep.ks_tail)),
            na(mean_of(&rep.q99_rel_err.iter().map(|v| Some(*v)).collect::<Vec<_>>())),
            na(rep.coex_err.first().map(|c| c.err)),
            na(final_nll(&trained.logs)),
        ));
        timing.push_str(&format!(
            "{variant},{m},{beta},{:.6},{:.6}\n",
            mean_epoch_seconds(&trained.logs),
            started.elapsed().as_secs_f64()
        ));
        println!("{variant} done");
    }
    std::fs::write(dir.join("ablation.csv"), table)?;
    std::fs::write(dir.join("ablation_timing.csv"), timing)?;
    announce(&dir);
    Ok(())
}
