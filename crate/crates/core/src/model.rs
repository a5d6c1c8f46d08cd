//! Variational autoencoder with a phase-type or Gaussian decoder.
//!
//! Data enter the networks divided by a per-dimension scale (see
//! [`VaeModel::with_data_scale`]); densities are corrected by the Jacobian so
//! every reported likelihood is in data units.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::grad::{Activation, BoundLinear, BoundMlp, Linear, MlpParams, Tape, Tensor, Var};
use crate::ph::{sample, CanonicalPH, UniformizationConfig};
use crate::{Error, Result};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;
/// Observations are floored here before any likelihood evaluation.
pub const X_FLOOR: f64 = 1e-8;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Ph,
    Gaussian,
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ph" => Ok(Self::Ph),
            "gaussian" => Ok(Self::Gaussian),
            _ => Err(Error::invalid(format!("unknown decoder kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub latent_dim: usize,
    pub phases: usize,
    pub data_dim: usize,
    pub beta: f64,
    pub hidden: usize,
    pub depth: usize,
}

impl Hyper {
    pub fn new(data_dim: usize) -> Self {
        Self {
            latent_dim: if data_dim == 1 { 2 } else { 4 },
            phases: 10,
            data_dim,
            beta: 1.0,
            hidden: 64,
            depth: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("phases", self.phases),
            ("data_dim", self.data_dim),
            ("hidden", self.hidden),
            ("depth", self.depth),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::invalid(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    fn hidden_sizes(&self, input: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(std::iter::repeat_n(self.hidden, self.depth))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Decoder {
    Ph {
        /// Hidden layers only; its output is passed through the activation.
        trunk: MlpParams,
        alpha_head: Linear,
        lambda_head: Linear,
    },
    Gaussian { net: MlpParams },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    pub hyper: Hyper,
    /// Per-dimension divisor applied to observations.
    pub scale: Vec<f64>,
    pub encoder: MlpParams,
    pub decoder: Decoder,
    #[serde(default = "training_uniformization")]
    pub uniformization: UniformizationConfig,
}

/// Series settings used while training: the default tolerance with a cap
/// large enough that steep rates early in training do not abort a run.
pub fn training_uniformization() -> UniformizationConfig {
    UniformizationConfig {
        tolerance: 1e-8,
        max_terms: 2_000_000,
    }
}

/// Per-datum averages of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub elbo: f64,
    /// Mean of `sum_j ln p(x_j | z)`.
    pub recon: f64,
    pub kl: f64,
}

/// Decoded per-dimension phase-type parameters for a batch of latents,
/// each `n x (D m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhParams {
    pub alpha: Tensor,
    pub lambda: Tensor,
}

enum BoundDecoder {
    Ph {
        trunk: BoundMlp,
        alpha_head: BoundLinear,
        lambda_head: BoundLinear,
    },
    Gaussian {
        net: BoundMlp,
    },
}

struct Bound {
    encoder: BoundMlp,
    decoder: BoundDecoder,
}

impl Bound {
    fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.encoder.vars().collect();
        match &self.decoder {
            BoundDecoder::Ph {
                trunk,
                alpha_head,
                lambda_head,
            } => {
                v.extend(trunk.vars());
                v.extend([alpha_head.weight, alpha_head.bias, lambda_head.weight, lambda_head.bias]);
            }
            BoundDecoder::Gaussian { net } => v.extend(net.vars()),
        }
        v
    }
}

struct Graph {
    loss: Var,
    recon: Var,
    kl: Var,
}

impl VaeModel {
    pub fn new<R: Rng + ?Sized>(hyper: Hyper, kind: DecoderKind, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let d = hyper.latent_dim;
        let big_d = hyper.data_dim;
        let act = Activation::Relu;
        let mut enc_sizes = hyper.hidden_sizes(big_d);
        enc_sizes.push(2 * d);
        let encoder = MlpParams::new(&enc_sizes, act, rng)?;
        let decoder = match kind {
            DecoderKind::Ph => Decoder::Ph {
                trunk: MlpParams::new(&hyper.hidden_sizes(d), act, rng)?,
                alpha_head: Linear::init(hyper.hidden, big_d * hyper.phases, rng),
                lambda_head: Linear::init(hyper.hidden, big_d * hyper.phases, rng),
            },
            DecoderKind::Gaussian => {
                let mut sizes = hyper.hidden_sizes(d);
                sizes.push(2 * big_d);
                Decoder::Gaussian {
                    net: MlpParams::new(&sizes, act, rng)?,
                }
            }
        };
        Ok(Self {
            hyper,
            scale: vec![1.0; big_d],
            encoder,
            decoder,
            uniformization: training_uniformization(),
        })
    }

    /// Sets each dimension's scale to the column median (1 if that is not
    /// positive), so the networks see data of order one.
    pub fn with_data_scale(mut self, x: &Tensor) -> Result<Self> {
        self.check_input(x)?;
        for j in 0..self.hyper.data_dim {
            let mut col: Vec<f64> = (0..x.rows()).map(|r| x.get(r, j)).collect();
            col.sort_by(f64::total_cmp);
            let med = col[col.len() / 2];
            self.scale[j] = if med > 0.0 { med } else { 1.0 };
        }
        Ok(self)
    }

    pub fn kind(&self) -> DecoderKind {
        match self.decoder {
            Decoder::Ph { .. } => DecoderKind::Ph,
            Decoder::Gaussian { .. } => DecoderKind::Gaussian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let h = &self.hyper;
        if self.scale.len() != h.data_dim || self.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("scale must hold one positive value per dimension"));
        }
        self.encoder.validate()?;
        if self.encoder.input_dim() != h.data_dim || self.encoder.output_dim() != 2 * h.latent_dim {
            return Err(Error::Shape("encoder widths do not match hyperparameters".into()));
        }
        match &self.decoder {
            Decoder::Ph {
                trunk,
                alpha_head,
                lambda_head,
            } => {
                trunk.validate()?;
                let width = h.data_dim * h.phases;
                let heads_ok = [alpha_head, lambda_head].iter().all(|l| {
                    l.weight.shape() == (trunk.output_dim(), width) && l.bias.shape() == (1, width)
                });
                if trunk.input_dim() != h.latent_dim || !heads_ok {
                    return Err(Error::Shape("decoder widths do not match hyperparameters".into()));
                }
            }
            Decoder::Gaussian { net } => {
                net.validate()?;
                if net.input_dim() != h.latent_dim || net.output_dim() != 2 * h.data_dim {
                    return Err(Error::Shape("decoder widths do not match hyperparameters".into()));
                }
            }
        }
        self.uniformization.validate()
    }

    /// Parameter tensors in a fixed order shared with the gradients returned
    /// by [`VaeModel::loss_and_grads`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.encoder.params_mut().collect();
        match &mut self.decoder {
            Decoder::Ph {
                trunk,
                alpha_head,
                lambda_head,
            } => {
                v.extend(trunk.params_mut());
                v.extend([
                    &mut alpha_head.weight,
                    &mut alpha_head.bias,
                    &mut lambda_head.weight,
                    &mut lambda_head.bias,
                ]);
            }
            Decoder::Gaussian { net } => v.extend(net.params_mut()),
        }
        v
    }

    pub fn num_params(&mut self) -> usize {
        self.params_mut().iter().map(|t| t.data().len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.hyper.data_dim {
            return Err(Error::Shape(format!(
                "model expects {} columns, got {}",
                self.hyper.data_dim,
                x.cols()
            )));
        }
        if x.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("observations must be finite and >= 0"));
        }
        Ok(())
    }

    /// `x / scale`, floored at [`X_FLOOR`].
    fn scaled(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let cols = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v / self.scale[i % cols]).max(X_FLOOR);
        }
        out
    }

    fn log_scale_sum(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        let encoder = self.encoder.bind(tape);
        let decoder = match &self.decoder {
            Decoder::Ph {
                trunk,
                alpha_head,
                lambda_head,
            } => BoundDecoder::Ph {
                trunk: trunk.bind(tape),
                alpha_head: alpha_head.bind(tape),
                lambda_head: lambda_head.bind(tape),
            },
            Decoder::Gaussian { net } => BoundDecoder::Gaussian { net: net.bind(tape) },
        };
        Bound { encoder, decoder }
    }

    fn encode_vars(&self, tape: &mut Tape, enc: &BoundMlp, xs: &Tensor) -> Result<(Var, Var)> {
        let input = tape.leaf(xs.map(f64::ln_1p));
        let out = enc.forward(tape, input)?;
        let d = self.hyper.latent_dim;
        let mu = tape.slice_cols(out, 0, d)?;
        let raw = tape.slice_cols(out, d, d)?;
        Ok((mu, tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)))
    }

    fn ph_heads(&self, tape: &mut Tape, dec: &BoundDecoder, z: Var) -> Result<(Var, Var)> {
        let BoundDecoder::Ph {
            trunk,
            alpha_head,
            lambda_head,
        } = dec
        else {
            unreachable!("ph_heads on a Gaussian decoder")
        };
        let h = trunk.forward(tape, z)?;
        let h = match trunk.activation {
            Activation::Relu => tape.relu(h),
            Activation::Tanh => tape.tanh(h),
            Activation::Softplus => tape.softplus(h),
        };
        let m = self.hyper.phases;
        let logits = alpha_head.forward(tape, h)?;
        let alpha = tape.softmax(logits, m)?;
        let raw = lambda_head.forward(tape, h)?;
        let steps = tape.softplus(raw);
        let lambda = tape.cumsum(steps, m)?;
        Ok((alpha, lambda))
    }

    fn gaussian_heads(&self, tape: &mut Tape, dec: &BoundDecoder, z: Var) -> Result<(Var, Var)> {
        let BoundDecoder::Gaussian { net } = dec else {
            unreachable!("gaussian_heads on a PH decoder")
        };
        let out = net.forward(tape, z)?;
        let big_d = self.hyper.data_dim;
        let mu = tape.slice_cols(out, 0, big_d)?;
        let raw = tape.slice_cols(out, big_d, big_d)?;
        Ok((mu, tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)))
    }

    /// `ln p(x | z)` per entry (scaled units), `n x D`.
    fn log_lik(&self, tape: &mut Tape, dec: &BoundDecoder, z: Var, xs: &Tensor) -> Result<Var> {
        match dec {
            BoundDecoder::Ph { .. } => {
                let (alpha, lambda) = self.ph_heads(tape, dec, z)?;
                tape.ph_log_pdf(alpha, lambda, xs, self.hyper.phases, &self.uniformization)
            }
            BoundDecoder::Gaussian { .. } => {
                let (mu, logvar) = self.gaussian_heads(tape, dec, z)?;
                let target = tape.leaf(xs.clone());
                gaussian_log_density(tape, target, mu, logvar)
            }
        }
    }

    fn graph(&self, tape: &mut Tape, bound: &Bound, x: &Tensor, eps: &Tensor) -> Result<Graph> {
        self.check_input(x)?;
        let n = x.rows();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if eps.shape() != (n, self.hyper.latent_dim) {
            return Err(Error::Shape(format!(
                "eps must be {n}x{}, got {:?}",
                self.hyper.latent_dim,
                eps.shape()
            )));
        }
        let xs = self.scaled(x);
        let (mu, logvar) = self.encode_vars(tape, &bound.encoder, &xs)?;
        let eps = tape.leaf(eps.clone());
        let z = reparameterize(tape, mu, logvar, eps)?;
        let ll = self.log_lik(tape, &bound.decoder, z, &xs)?;
        let ll_sum = tape.sum(ll);
        let recon = tape.add_scalar(ll_sum, -(n as f64) * self.log_scale_sum());
        let kl = kl_gaussian(tape, mu, logvar)?;
        let weighted_kl = tape.scale(kl, self.hyper.beta);
        let elbo = tape.sub(recon, weighted_kl)?;
        let loss = tape.scale(elbo, -1.0 / n as f64);
        Ok(Graph { loss, recon, kl })
    }

    fn objective(tape: &Tape, g: &Graph, n: usize) -> Objective {
        let n = n as f64;
        Objective {
            elbo: -tape.value(g.loss).item(),
            recon: tape.value(g.recon).item() / n,
            kl: tape.value(g.kl).item() / n,
        }
    }

    /// Single-sample ELBO for the batch `x` with noise `eps` (`n x d`).
    pub fn elbo(&self, x: &Tensor, eps: &Tensor) -> Result<Objective> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let g = self.graph(&mut tape, &bound, x, eps)?;
        Ok(Self::objective(&tape, &g, x.rows()))
    }

    /// Objective plus the gradient of the loss (negative mean ELBO) with
    /// respect to every tensor of [`VaeModel::params_mut`], in order.
    pub fn loss_and_grads(&self, x: &Tensor, eps: &Tensor) -> Result<(Objective, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let g = self.graph(&mut tape, &bound, x, eps)?;
        tape.backward(g.loss)?;
        let grads = bound.vars().into_iter().map(|v| tape.grad(v)).collect();
        Ok((Self::objective(&tape, &g, x.rows()), grads))
    }

    /// Posterior mean and clamped log-variance, each `n x d`.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let mut tape = Tape::inference();
        let enc = self.encoder.bind(&mut tape);
        let (mu, logvar) = self.encode_vars(&mut tape, &enc, &self.scaled(x))?;
        Ok((tape.value(mu).clone(), tape.value(logvar).clone()))
    }

    /// Phase-type parameters (in data units) for each row of `z`.
    pub fn decode_ph(&self, z: &Tensor) -> Result<PhParams> {
        let Decoder::Ph { .. } = self.decoder else {
            return Err(Error::invalid("decode_ph on a Gaussian decoder"));
        };
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let (alpha, lambda) = self.ph_heads(&mut tape, &bound.decoder, zv)?;
        let mut lambda = tape.value(lambda).clone();
        let width = lambda.cols();
        let m = self.hyper.phases;
        for (i, v) in lambda.data_mut().iter_mut().enumerate() {
            *v /= self.scale[(i % width) / m];
        }
        Ok(PhParams {
            alpha: tape.value(alpha).clone(),
            lambda,
        })
    }

    /// Gaussian mean and clamped log-variance (in data units) per row of `z`.
    pub fn decode_gaussian(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let Decoder::Gaussian { .. } = self.decoder else {
            return Err(Error::invalid("decode_gaussian on a PH decoder"));
        };
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let (mu, logvar) = self.gaussian_heads(&mut tape, &bound.decoder, zv)?;
        let d = self.hyper.data_dim;
        let mut mu = tape.value(mu).clone();
        let mut lv = tape.value(logvar).clone();
        for (i, v) in mu.data_mut().iter_mut().enumerate() {
            *v *= self.scale[i % d];
        }
        for (i, v) in lv.data_mut().iter_mut().enumerate() {
            *v += 2.0 * self.scale[i % d].ln();
        }
        Ok((mu, lv))
    }

    /// `ln p(x_ij | z_i)` in data units, `n x D`.
    pub fn log_likelihood(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        if z.shape() != (x.rows(), self.hyper.latent_dim) {
            return Err(Error::Shape("z rows must match x rows".into()));
        }
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let ll = self.log_lik(&mut tape, &bound.decoder, zv, &self.scaled(x))?;
        let mut out = tape.value(ll).clone();
        let d = self.hyper.data_dim;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v -= self.scale[i % d].ln();
        }
        Ok(out)
    }

    /// Ancestral sampling: `z ~ N(0, I)`, then one draw from `p(x | z)`.
    ///
    /// Gaussian draws are floored at zero to stay in the data domain.
    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        let big_d = self.hyper.data_dim;
        let mut out = Tensor::zeros(n, big_d);
        const CHUNK: usize = 4096;
        let mut start = 0;
        while start < n {
            let rows = CHUNK.min(n - start);
            let z = standard_normal(rows, self.hyper.latent_dim, rng);
            match self.decoder {
                Decoder::Ph { .. } => {
                    let p = self.decode_ph(&z)?;
                    let m = self.hyper.phases;
                    for r in 0..rows {
                        for j in 0..big_d {
                            let span = j * m..(j + 1) * m;
                            let ph = CanonicalPH::new(
                                p.alpha.row_slice(r)[span.clone()].to_vec(),
                                p.lambda.row_slice(r)[span].to_vec(),
                            )?;
                            out.data_mut()[(start + r) * big_d + j] = sample(&ph, rng)?;
                        }
                    }
                }
                Decoder::Gaussian { .. } => {
                    let (mu, lv) = self.decode_gaussian(&z)?;
                    for r in 0..rows {
                        for j in 0..big_d {
                            let e: f64 = rng.sample(StandardNormal);
                            let v = mu.get(r, j) + (0.5 * lv.get(r, j)).exp() * e;
                            out.data_mut()[(start + r) * big_d + j] = v.max(0.0);
                        }
                    }
                }
            }
            start += rows;
        }
        Ok(out)
    }
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let noise = tape.mul(std, eps)?;
    tape.add(mu, noise)
}

/// `0.5 * sum(exp(logvar) + mu^2 - 1 - logvar)` over all entries.
pub fn kl_gaussian(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let var = tape.exp(logvar);
    let mu2 = tape.square(mu);
    let a = tape.add(var, mu2)?;
    let b = tape.sub(a, logvar)?;
    let b = tape.add_scalar(b, -1.0);
    let s = tape.sum(b);
    Ok(tape.scale(s, 0.5))
}

/// Elementwise `ln N(x; mu, exp(logvar))`.
pub fn gaussian_log_density(tape: &mut Tape, x: Var, mu: Var, logvar: Var) -> Result<Var> {
    let diff = tape.sub(x, mu)?;
    let sq = tape.square(diff);
    let neg = tape.neg(logvar);
    let prec = tape.exp(neg);
    let t = tape.mul(sq, prec)?;
    let t = tape.add(t, logvar)?;
    let t = tape.add_scalar(t, LN_2PI);
    Ok(tape.scale(t, -0.5))
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data).expect("sizes agree")
}
