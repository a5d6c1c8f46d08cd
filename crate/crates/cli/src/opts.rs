use std::path::{Path, PathBuf};

use clap::Args;
use phtail::data::{gen_marginal, gen_t_copula, load_csv, CopulaSpec, Dataset, Marginal};
use phtail::model::Hyper;
use phtail::train::TrainConfig;

use crate::config::Settings;
use crate::error::{input, CliError};

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Settings file with one `key = value` per line
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed (default 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file or directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    pub fn settings(&self) -> Result<Settings, CliError> {
        Settings::load(self.config.as_deref())
    }

    pub fn seed(&self, s: &Settings) -> Result<u64, CliError> {
        Ok(s.u64("seed", self.seed)?.unwrap_or(0))
    }

    pub fn out(&self, s: &Settings, default: &str) -> Result<PathBuf, CliError> {
        let flag = self.out.as_ref().map(|p| p.to_string_lossy().into_owned());
        Ok(PathBuf::from(
            s.string("out", flag.as_deref())?.unwrap_or_else(|| default.into()),
        ))
    }
}

/// Synthetic generator selection.
#[derive(Args, Debug, Clone, Default)]
pub struct GenSpec {
    /// weibull, pareto, lognormal, burr, or copula (5-D t-copula benchmark)
    #[arg(long)]
    pub family: Option<String>,
    /// Pareto tail index
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Pareto minimum
    #[arg(long)]
    pub xm: Option<f64>,
    /// Weibull shape, or Burr second shape
    #[arg(long)]
    pub k: Option<f64>,
    /// Weibull scale
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Lognormal log-mean
    #[arg(long)]
    pub mu: Option<f64>,
    /// Lognormal log-sd
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Burr first shape
    #[arg(long)]
    pub c: Option<f64>,
    /// Copula degrees of freedom
    #[arg(long)]
    pub nu: Option<f64>,
    /// Number of rows (default 10000)
    #[arg(long)]
    pub n: Option<usize>,
}

pub enum Generator {
    Marginal(Marginal),
    Copula(CopulaSpec),
}

impl GenSpec {
    pub fn resolve(&self, s: &Settings) -> Result<Option<(Generator, usize)>, CliError> {
        let n = s.usize("n", self.n)?.unwrap_or(10_000);
        let fam = s.string("family", self.family.as_deref())?;
        let p = |key: &str, flag: Option<f64>| s.f64(key, flag);
        let (alpha, xm, k, lambda) = (p("alpha", self.alpha)?, p("xm", self.xm)?, p("k", self.k)?, p("lambda", self.lambda)?);
        let (mu, sigma, c, nu) = (p("mu", self.mu)?, p("sigma", self.sigma)?, p("c", self.c)?, p("nu", self.nu)?);
        let Some(fam) = fam else {
            return Ok(None);
        };
        if n == 0 {
            return Err(CliError::invalid("n must be >= 1"));
        }
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| CliError::invalid(format!("family {fam} needs --{name}")))
        };
        let g = match fam.as_str() {
            "weibull" => Generator::Marginal(Marginal::Weibull {
                shape: need(k, "k")?,
                scale: lambda.unwrap_or(1.0),
            }),
            "pareto" => Generator::Marginal(Marginal::Pareto {
                alpha: need(alpha, "alpha")?,
                xm: xm.unwrap_or(1.0),
            }),
            "lognormal" => Generator::Marginal(Marginal::Lognormal {
                mu: mu.unwrap_or(0.0),
                sigma: need(sigma, "sigma")?,
            }),
            "burr" => Generator::Marginal(Marginal::Burr {
                c: need(c, "c")?,
                k: need(k, "k")?,
            }),
            "copula" => {
                let mut spec = CopulaSpec::benchmark();
                if let Some(nu) = nu {
                    spec.nu = nu;
                }
                Generator::Copula(spec)
            }
            other => return Err(CliError::invalid(format!("unknown family '{other}'"))),
        };
        match &g {
            Generator::Marginal(m) => m.validate().map_err(input)?,
            Generator::Copula(c) => c.validate().map_err(input)?,
        }
        Ok(Some((g, n)))
    }
}

pub fn generate(g: &Generator, n: usize, seed: u64) -> Result<Dataset, CliError> {
    Ok(match g {
        Generator::Marginal(m) => gen_marginal(m, n, seed)?,
        Generator::Copula(c) => gen_t_copula(c, n, seed)?,
    })
}

/// A CSV file or a generator.
#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Input CSV with a header row
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GenSpec,
}

pub struct LoadedData {
    pub dataset: Dataset,
    /// Analytic marginal when the data came from a univariate generator.
    pub truth: Option<Marginal>,
}

impl DataArgs {
    pub fn resolve(&self, s: &Settings, seed: u64) -> Result<Option<LoadedData>, CliError> {
        let flag = self.data.as_ref().map(|p| p.to_string_lossy().into_owned());
        let path = s.string("data", flag.as_deref())?;
        let gen = self.gen.resolve(s)?;
        match (path, gen) {
            (Some(_), Some(_)) => Err(CliError::invalid("pass either --data or --family, not both")),
            (Some(p), None) => Ok(Some(LoadedData {
                dataset: load_csv(Path::new(&p)).map_err(input)?,
                truth: None,
            })),
            (None, Some((g, n))) => {
                let truth = match &g {
                    Generator::Marginal(m) => Some(*m),
                    Generator::Copula(_) => None,
                };
                Ok(Some(LoadedData {
                    dataset: generate(&g, n, seed)?,
                    truth,
                }))
            }
            (None, None) => Ok(None),
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// ph, gaussian, or independent-ph
    #[arg(long)]
    pub decoder: Option<String>,
    /// Latent dimension (default 2 for 1-D data, else 4)
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Phases per dimension (default 10)
    #[arg(long)]
    pub phases: Option<usize>,
    /// KL weight (default 1)
    #[arg(long)]
    pub beta: Option<f64>,
    /// Hidden width (default 64)
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Hidden layers (default 2)
    #[arg(long)]
    pub depth: Option<usize>,
    /// Use only the first N data columns
    #[arg(long)]
    pub dims: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Ph,
    Gaussian,
    IndependentPh,
}

#[derive(Debug, Clone)]
pub struct ModelOpts {
    pub layout: Layout,
    pub latent_dim: Option<usize>,
    pub phases: usize,
    pub beta: f64,
    pub hidden: usize,
    pub depth: usize,
    pub dims: Option<usize>,
}

impl ModelOpts {
    pub fn hyper(&self, data_dim: usize) -> Result<Hyper, CliError> {
        let mut h = Hyper::new(data_dim);
        if let Some(d) = self.latent_dim {
            h.latent_dim = d;
        }
        h.phases = self.phases;
        h.beta = self.beta;
        h.hidden = self.hidden;
        h.depth = self.depth;
        h.validate().map_err(input)?;
        Ok(h)
    }
}

impl ModelArgs {
    pub fn resolve(&self, s: &Settings) -> Result<ModelOpts, CliError> {
        let layout = match s.string("decoder", self.decoder.as_deref())?.as_deref() {
            None | Some("ph") => Layout::Ph,
            Some("gaussian") => Layout::Gaussian,
            Some("independent-ph") => Layout::IndependentPh,
            Some(other) => return Err(CliError::invalid(format!("unknown decoder '{other}'"))),
        };
        let opts = ModelOpts {
            layout,
            latent_dim: s.usize("latent_dim", self.latent_dim)?,
            phases: s.usize("phases", self.phases)?.unwrap_or(10),
            beta: s.f64("beta", self.beta)?.unwrap_or(1.0),
            hidden: s.usize("hidden", self.hidden)?.unwrap_or(64),
            depth: s.usize("depth", self.depth)?.unwrap_or(2),
            dims: s.usize("dims", self.dims)?,
        };
        opts.hyper(1)?;
        Ok(opts)
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minibatch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Global gradient-norm cap
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Validate and write the untrained model
    #[arg(long)]
    pub dry_run: bool,
}

impl TrainArgs {
    pub fn resolve(&self, s: &Settings, seed: u64, defaults: TrainConfig) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            lr0: s.f64("lr", self.lr)?.unwrap_or(defaults.lr0),
            weight_decay: s.f64("weight_decay", self.weight_decay)?.unwrap_or(defaults.weight_decay),
            clip_norm: s.f64("clip_norm", self.clip_norm)?.unwrap_or(defaults.clip_norm),
            epochs: s.usize("epochs", self.epochs)?.unwrap_or(defaults.epochs),
            batch_size: s.usize("batch_size", self.batch_size)?.unwrap_or(defaults.batch_size),
            seed,
            dry_run: s.flag("dry_run", self.dry_run)?,
            ..defaults
        };
        cfg.validate().map_err(input)?;
        Ok(cfg)
    }
}
