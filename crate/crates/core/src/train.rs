//! AdamW training loop with global-norm clipping and step decay.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{Tape, Tensor};
use crate::model::{standard_normal, training_uniformization, VaeModel, X_FLOOR};
use crate::ph::CanonicalPH;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Validate inputs and return the model untouched.
    #[serde(default)]
    pub dry_run: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            weight_decay: 1e-5,
            clip_norm: 5.0,
            epochs: 13,
            batch_size: 256,
            seed: 0,
            lr_decay: 0.1,
            lr_decay_every: 10,
            dry_run: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        pos("lr0", self.lr0)?;
        pos("clip_norm", self.clip_norm)?;
        pos("lr_decay", self.lr_decay)?;
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::invalid("epochs, batch_size and lr_decay_every must be >= 1"));
        }
        Ok(())
    }

    /// `lr0 * lr_decay ^ floor(epoch / lr_decay_every)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub elbo: f64,
    pub nll: f64,
    pub kl: f64,
    /// Wall-clock time; kept out of the serialized log so logs are
    /// reproducible byte for byte.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub final_nll: Option<f64>,
}

impl TrainLog {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,elbo,nll,kl\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                crate::fmt::f64_17(e.lr),
                crate::fmt::f64_17(e.elbo),
                crate::fmt::f64_17(e.nll),
                crate::fmt::f64_17(e.kl)
            ));
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.6}\n", e.epoch, e.seconds));
        }
        s
    }
}

/// Scales `grads` in place so their joint Euclidean norm is at most `cap`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], cap: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > cap {
        let s = cap / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.data().len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

/// Trains `model` on the rows of `data`.
pub fn train(model: VaeModel, data: &Tensor, cfg: &TrainConfig) -> Result<(VaeModel, TrainLog)> {
    train_with(model, data, cfg, |_, _| Ok(()))
}

/// As [`train`], calling `observer` after every epoch (for checkpoints).
pub fn train_with<F>(
    mut model: VaeModel,
    data: &Tensor,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<(VaeModel, TrainLog)>
where
    F: FnMut(&EpochRecord, &VaeModel) -> Result<()>,
{
    cfg.validate()?;
    model.validate()?;
    let n = data.rows();
    if n == 0 {
        return Err(Error::invalid("dataset is empty"));
    }
    if data.cols() != model.hyper.data_dim {
        return Err(Error::Shape(format!(
            "model expects {} columns, data has {}",
            model.hyper.data_dim,
            data.cols()
        )));
    }
    if data.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("training data must be finite and >= 0"));
    }
    let mut log = TrainLog::default();
    if cfg.dry_run {
        return Ok((model, log));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let cols = data.cols();
    let d = model.hyper.latent_dim;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        let (mut elbo, mut recon, mut kl) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut xb = Vec::with_capacity(chunk.len() * cols);
            for &i in chunk {
                xb.extend_from_slice(data.row_slice(i));
            }
            let xb = Tensor::from_vec(chunk.len(), cols, xb)?;
            let eps = standard_normal(chunk.len(), d, &mut rng);
            let (obj, mut grads) = model.loss_and_grads(&xb, &eps)?;
            let grads_finite = grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()));
            if !obj.elbo.is_finite() || !grads_finite {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut model.params_mut(), &grads, lr);
            let w = chunk.len() as f64;
            elbo += obj.elbo * w;
            recon += obj.recon * w;
            kl += obj.kl * w;
        }
        let record = EpochRecord {
            epoch,
            lr,
            elbo: elbo / n as f64,
            nll: -recon / n as f64,
            kl: kl / n as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        observer(&record, &model)?;
        log.epochs.push(record);
    }
    log.final_nll = Some(eval_nll(&model, data)?);
    Ok((model, log))
}

/// Mean over rows of `-sum_j ln p(x_j | z)` with `z` the posterior mean.
pub fn eval_nll(model: &VaeModel, data: &Tensor) -> Result<f64> {
    let n = data.rows();
    if n == 0 {
        return Err(Error::invalid("dataset is empty"));
    }
    const CHUNK: usize = 2048;
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let rows = CHUNK.min(n - start);
        let x = Tensor::from_vec(
            rows,
            data.cols(),
            data.data()[start * data.cols()..(start + rows) * data.cols()].to_vec(),
        )?;
        let (mu, _) = model.encode(&x)?;
        let ll = model.log_likelihood(&x, &mu)?;
        total -= ll.data().iter().sum::<f64>();
        start += rows;
    }
    Ok(total / n as f64)
}

/// Result of a direct maximum-likelihood phase-type fit.
#[derive(Debug, Clone, PartialEq)]
pub struct PhFit {
    pub ph: CanonicalPH,
    /// Mean negative log-likelihood of the data under `ph`.
    pub nll: f64,
    /// Mean training NLL per epoch.
    pub history: Vec<f64>,
}

/// Fits a single series canonical PH with `m` phases to positive data by
/// minibatch gradient descent on the mean negative log-likelihood.
///
/// Starts from uniform `alpha` and rates `lambda_i = i / mean`, whose mean
/// equals the sample mean.
pub fn fit_canonical(x: &[f64], m: usize, cfg: &TrainConfig) -> Result<PhFit> {
    cfg.validate()?;
    if m == 0 {
        return Err(Error::invalid("number of phases must be >= 1"));
    }
    if x.is_empty() || x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("data must be non-empty, finite and >= 0"));
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let scale = if mean > 0.0 { mean } else { 1.0 };
    let xs: Vec<f64> = x.iter().map(|v| (v / scale).max(X_FLOOR)).collect();
    let ucfg = training_uniformization();

    let mut logits = Tensor::zeros(1, m);
    let mut raw = Tensor::full(1, m, (std::f64::consts::E - 1.0).ln());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    let params = |logits: &Tensor, raw: &Tensor, tape: &mut Tape| {
        let l = tape.leaf(logits.clone());
        let r = tape.leaf(raw.clone());
        let a = tape.softmax(l, m)?;
        let sp = tape.softplus(r);
        let lam = tape.cumsum(sp, m)?;
        Ok::<_, Error>((l, r, a, lam))
    };

    let epochs = if cfg.dry_run { 0 } else { cfg.epochs };
    for epoch in 0..epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = Tensor::from_vec(chunk.len(), 1, chunk.iter().map(|&i| xs[i]).collect())?;
            let mut tape = Tape::new();
            let (l, r, a, lam) = params(&logits, &raw, &mut tape)?;
            let ll = tape.ph_log_pdf(a, lam, &xb, m, &ucfg)?;
            let mean_ll = tape.mean(ll);
            let loss = tape.neg(mean_ll);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            tape.backward(loss)?;
            let mut grads = vec![tape.grad(l), tape.grad(r)];
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut [&mut logits, &mut raw], &grads, lr);
            total += value * chunk.len() as f64;
        }
        history.push(total / xs.len() as f64 + scale.ln());
    }

    let mut tape = Tape::inference();
    let (_, _, a, lam) = params(&logits, &raw, &mut tape)?;
    let alpha = tape.value(a).data().to_vec();
    let rates: Vec<f64> = tape.value(lam).data().iter().map(|v| v / scale).collect();
    let xt = Tensor::from_vec(xs.len(), 1, xs)?;
    let ll = tape.ph_log_pdf(a, lam, &xt, m, &ucfg)?;
    let nll = -tape.value(ll).data().iter().sum::<f64>() / x.len() as f64 + scale.ln();
    Ok(PhFit {
        ph: CanonicalPH::new(alpha, rates)?,
        nll,
        history,
    })
}
