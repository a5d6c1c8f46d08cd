use std::path::Path;

use phtail::data::Dataset;
use phtail::grad::Tensor;
use phtail::model::{DecoderKind, VaeModel};
use phtail::train::{train_with, TrainConfig, TrainLog};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, CliError};
use crate::opts::{Layout, ModelOpts};
use crate::output::write_json;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub columns: Vec<String>,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "kebab-case")]
pub enum Body {
    Joint { model: Box<VaeModel> },
    /// One univariate model per column.
    Independent { models: Vec<VaeModel> },
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let path = if path.is_dir() { path.join("model.json") } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::invalid(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| CliError::invalid(format!("malformed checkpoint {}: {e}", path.display())))?;
        match &ck.body {
            Body::Joint { model } => model.validate().map_err(input)?,
            Body::Independent { models } => {
                for m in models {
                    m.validate().map_err(input)?;
                }
            }
        }
        Ok(ck)
    }

    /// `n` rows by ancestral sampling from one seeded stream.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Tensor, CliError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match &self.body {
            Body::Joint { model } => model.generate(n, &mut rng)?,
            Body::Independent { models } => {
                let cols: Vec<Tensor> = models
                    .iter()
                    .map(|m| m.generate(n, &mut rng))
                    .collect::<Result<_, _>>()?;
                let d = cols.len();
                let mut out = Tensor::zeros(n, d);
                for (j, c) in cols.iter().enumerate() {
                    for r in 0..n {
                        out.data_mut()[r * d + j] = c.get(r, 0);
                    }
                }
                out
            }
        })
    }
}

pub struct Trained {
    pub checkpoint: Checkpoint,
    /// One log per trained model.
    pub logs: Vec<TrainLog>,
}

fn fit_one(
    data: &Dataset,
    opts: &ModelOpts,
    kind: DecoderKind,
    cfg: &TrainConfig,
    dir: Option<&Path>,
) -> Result<(VaeModel, TrainLog), CliError> {
    let hyper = opts.hyper(data.dims())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = VaeModel::new(hyper, kind, &mut rng)?.with_data_scale(&data.values)?;
    let columns = data.columns.clone();
    let (model, log) = train_with(model, &data.values, cfg, |rec, m| {
        if let Some(dir) = dir {
            let ck = Checkpoint {
                columns: columns.clone(),
                body: Body::Joint { model: Box::new(m.clone()) },
            };
            write_json(&dir.join(format!("epoch_{}.json", rec.epoch)), &ck)
                .map_err(|e| phtail::Error::Data(e.to_string()))?;
        }
        Ok(())
    })?;
    if let Some(dir) = dir {
        write_logs(dir, &log)?;
    }
    Ok((model, log))
}

pub fn write_logs(dir: &Path, log: &TrainLog) -> Result<(), CliError> {
    write_json(&dir.join("train_log.json"), log)?;
    std::fs::write(dir.join("train_log.csv"), log.to_csv())?;
    std::fs::write(dir.join("timing.csv"), log.timing_csv())?;
    Ok(())
}

/// Trains the requested layout. With `dir`, writes per-epoch checkpoints and
/// logs there (per-dimension subdirectories for independent models).
pub fn train_layout(
    data: &Dataset,
    opts: &ModelOpts,
    cfg: &TrainConfig,
    dir: Option<&Path>,
) -> Result<Trained, CliError> {
    let data = match opts.dims {
        Some(k) => data.leading(k).map_err(input)?,
        None => data.clone(),
    };
    let (body, logs) = match opts.layout {
        Layout::Ph | Layout::Gaussian => {
            let kind = if opts.layout == Layout::Ph { DecoderKind::Ph } else { DecoderKind::Gaussian };
            let (model, log) = fit_one(&data, opts, kind, cfg, dir)?;
            (Body::Joint { model: Box::new(model) }, vec![log])
        }
        Layout::IndependentPh => {
            let mut models = Vec::new();
            let mut logs = Vec::new();
            for j in 0..data.dims() {
                let sub = match dir {
                    Some(d) => {
                        let p = d.join(format!("dim_{j}"));
                        std::fs::create_dir_all(&p)?;
                        Some(p)
                    }
                    None => None,
                };
                let col = data.select(j).map_err(input)?;
                let cfg_j = TrainConfig {
                    seed: cfg.seed.wrapping_add(j as u64),
                    ..cfg.clone()
                };
                let (model, log) = fit_one(&col, opts, DecoderKind::Ph, &cfg_j, sub.as_deref())?;
                if let Some(sub) = &sub {
                    let ck = Checkpoint {
                        columns: col.columns.clone(),
                        body: Body::Joint { model: Box::new(model.clone()) },
                    };
                    write_json(&sub.join("model.json"), &ck)?;
                }
                models.push(model);
                logs.push(log);
            }
            (Body::Independent { models }, logs)
        }
    };
    Ok(Trained {
        checkpoint: Checkpoint {
            columns: data.columns.clone(),
            body,
        },
        logs,
    })
}

/// Final NLL summed over independent models, or the joint model's.
pub fn final_nll(logs: &[TrainLog]) -> Option<f64> {
    logs.iter().map(|l| l.final_nll).sum()
}

pub fn mean_epoch_seconds(logs: &[TrainLog]) -> f64 {
    logs.iter().map(TrainLog::mean_epoch_seconds).sum()
}
