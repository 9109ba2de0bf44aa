//! Encoder/decoder/predictor network trained from scratch.
//!
//! Parameters are flattened as encoder, decoder, predictor; inside a network
//! layer by layer, each layer as its row-major `out x in` weights followed by
//! its biases.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardProblem;
use crate::learn::consistency_term;
use crate::rng::{stream, Rng};
use crate::synth::TrainingDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out x n_in`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub act: Activation,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize, act: Activation) -> Self {
        Self {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
            act,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(n_in: usize, n_out: usize, act: Activation, rng: &mut Rng) -> Self {
        let a = (6.0 / (n_in + n_out) as f64).sqrt();
        let mut layer = Self::zeros(n_in, n_out, act);
        for w in &mut layer.w {
            *w = rng.random_range(-a..a);
        }
        layer
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| {
                let z = self.b[o] + crate::linalg::dot(&self.w[o * self.n_in..(o + 1) * self.n_in], x);
                match self.act {
                    Activation::Tanh => z.tanh(),
                    Activation::Identity => z,
                }
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns the input cotangent.
    fn backward(&self, input: &[f64], output: &[f64], out_bar: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (gw, gb) = grad.split_at_mut(self.w.len());
        let mut in_bar = vec![0.0; self.n_in];
        for o in 0..self.n_out {
            let zb = match self.act {
                Activation::Tanh => out_bar[o] * (1.0 - output[o] * output[o]),
                Activation::Identity => out_bar[o],
            };
            if zb == 0.0 {
                continue;
            }
            gb[o] += zb;
            let row = o * self.n_in;
            for i in 0..self.n_in {
                gw[row + i] += zb * input[i];
                in_bar[i] += zb * self.w[row + i];
            }
        }
        in_bar
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Dense>,
}

impl Network {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].n_out != w[1].n_in {
                return Err(Error::Dimension {
                    expected: w[0].n_out,
                    got: w[1].n_in,
                });
            }
        }
        Ok(Self { layers })
    }

    /// Tanh hidden layers and an identity output layer through `dims`.
    /// With `zero_output` the last layer starts at zero.
    pub fn mlp(dims: &[usize], zero_output: bool, rng: &mut Rng) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { Activation::Identity } else { Activation::Tanh };
                if l + 1 == n && zero_output {
                    Dense::zeros(dims[l], dims[l + 1], act)
                } else {
                    Dense::glorot(dims[l], dims[l + 1], act, rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn n_in(&self) -> usize {
        self.layers.first().map_or(0, |l| l.n_in)
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&p[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[at..at + nb]);
            at += nb;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.layers.iter().fold(x.to_vec(), |a, l| l.forward(&a))
    }

    /// All activations, input first.
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for l in &self.layers {
            let next = l.forward(acts.last().expect("nonempty"));
            acts.push(next);
        }
        acts
    }

    fn backward(&self, acts: &[Vec<f64>], out_bar: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            offsets.push(at);
            at += l.n_params();
        }
        let mut bar = out_bar.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let g = &mut grad[offsets[li]..offsets[li] + l.n_params()];
            bar = l.backward(&acts[li], &acts[li + 1], &bar, g);
        }
        bar
    }

    /// Input cotangent `J(x)^T ybar`.
    pub fn vjp(&self, x: &[f64], ybar: &[f64]) -> Vec<f64> {
        let acts = self.trace(x);
        let mut scratch = vec![0.0; self.n_params()];
        self.backward(&acts, ybar, &mut scratch)
    }

    /// Loss `0.5 ||net(x) - y||^2` and its parameter gradient.
    pub fn loss_and_gradient(&self, x: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
        let acts = self.trace(x);
        let r: Vec<f64> = acts.last().expect("nonempty").iter().zip(y).map(|(a, b)| a - b).collect();
        let mut grad = vec![0.0; self.n_params()];
        self.backward(&acts, &r, &mut grad);
        (0.5 * crate::linalg::dot(&r, &r), grad)
    }
}

fn relative_gap(a: f64, b: f64) -> f64 {
    // Floor keeps parameters with vanishing gradient from dominating.
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn fd_check<F: Fn(&[f64]) -> f64>(loss: F, params: &[f64], analytic: &[f64], n: usize, rng: &mut Rng) -> f64 {
    let h = 1e-5;
    let picks = sample(rng, params.len(), n.min(params.len()));
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for i in picks.iter() {
        let base = p[i];
        p[i] = base + h;
        let lp = loss(&p);
        p[i] = base - h;
        let lm = loss(&p);
        p[i] = base;
        worst = worst.max(relative_gap(analytic[i], (lp - lm) / (2.0 * h)));
    }
    worst
}

/// Largest relative gap between backpropagated and central-difference
/// gradients of `0.5 ||net(x) - y||^2` over `n_params` random parameters.
pub fn network_gradient_check(net: &Network, x: &[f64], y: &[f64], n_params: usize, rng: &mut Rng) -> f64 {
    let (_, grad) = net.loss_and_gradient(x, y);
    let loss = |p: &[f64]| {
        let mut q = net.clone();
        q.set_params(p);
        let r: Vec<f64> = q.forward(x).iter().zip(y).map(|(a, b)| a - b).collect();
        0.5 * crate::linalg::dot(&r, &r)
    };
    fd_check(loss, &net.params(), &grad, n_params, rng)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpRelation {
    pub encoder: Network,
    pub decoder: Network,
    pub predictor: Network,
    pub in_shift: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub out_shift: Vec<f64>,
    pub out_scale: Vec<f64>,
}

/// Data terms for one standardized sample.
struct SampleTerms {
    predict: f64,
    reconstruct: f64,
}

impl MlpRelation {
    /// Networks with identity standardization.
    pub fn from_networks(encoder: Network, decoder: Network, predictor: Network) -> Result<Self> {
        let latent = encoder.n_out();
        if decoder.n_in() != latent || predictor.n_in() != latent {
            return Err(Error::Dimension {
                expected: latent,
                got: if decoder.n_in() != latent { decoder.n_in() } else { predictor.n_in() },
            });
        }
        if decoder.n_out() != encoder.n_in() {
            return Err(Error::Dimension {
                expected: encoder.n_in(),
                got: decoder.n_out(),
            });
        }
        let (d, d_out) = (encoder.n_in(), predictor.n_out());
        Ok(Self {
            encoder,
            decoder,
            predictor,
            in_shift: vec![0.0; d],
            in_scale: vec![1.0; d],
            out_shift: vec![0.0; d_out],
            out_scale: vec![1.0; d_out],
        })
    }

    /// Fresh architecture `d -> hidden -> latent`, decoder and predictor
    /// mirrored, with zero output layers on decoder and predictor.
    pub fn init(d: usize, d_out: usize, hidden: usize, latent: usize, rng: &mut Rng) -> Self {
        let encoder = Network::mlp(&[d, hidden, latent], false, rng);
        let decoder = Network::mlp(&[latent, hidden, d], true, rng);
        let predictor = Network::mlp(&[latent, hidden, d_out], true, rng);
        Self::from_networks(encoder, decoder, predictor).expect("consistent dimensions")
    }

    pub fn d_in(&self) -> usize {
        self.encoder.n_in()
    }

    pub fn d_out(&self) -> usize {
        self.predictor.n_out()
    }

    pub fn latent(&self) -> usize {
        self.encoder.n_out()
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.decoder.n_params() + self.predictor.n_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.predictor.params());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let ne = self.encoder.n_params();
        let nd = self.decoder.n_params();
        self.encoder.set_params(&p[..ne]);
        self.decoder.set_params(&p[ne..ne + nd]);
        self.predictor.set_params(&p[ne + nd..]);
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.in_shift)
            .zip(&self.in_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn standardize_out(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.out_shift)
            .zip(&self.out_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_in() {
            return Err(Error::Dimension {
                expected: self.d_in(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `predictor(encoder(x))` in physical units.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let y = self.predictor.forward(&self.encoder.forward(&self.standardize(x)));
        Ok(y.iter()
            .zip(&self.out_shift)
            .zip(&self.out_scale)
            .map(|((v, m), s)| m + s * v)
            .collect())
    }

    /// `decoder(encoder(x))` in physical units.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let r = self.decoder.forward(&self.encoder.forward(&self.standardize(x)));
        Ok(r.iter()
            .zip(&self.in_shift)
            .zip(&self.in_scale)
            .map(|((v, m), s)| m + s * v)
            .collect())
    }

    pub fn vjp(&self, x: &[f64], gbar: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if gbar.len() != self.d_out() {
            return Err(Error::Dimension {
                expected: self.d_out(),
                got: gbar.len(),
            });
        }
        let z = self.standardize(x);
        let h = self.encoder.forward(&z);
        let ybar: Vec<f64> = gbar.iter().zip(&self.out_scale).map(|(g, s)| g * s).collect();
        let hbar = self.predictor.vjp(&h, &ybar);
        let zbar = self.encoder.vjp(&z, &hbar);
        Ok(zbar.iter().zip(&self.in_scale).map(|(g, s)| g / s).collect())
    }

    /// Data terms on standardized `(x, y)`; when `grad` is given the
    /// parameter gradient is accumulated into it, with `extra_ybar` added to
    /// the predictor output cotangent.
    fn sample_terms(&self, x: &[f64], y: &[f64], extra_ybar: Option<&[f64]>, grad: Option<&mut [f64]>) -> SampleTerms {
        let ae = self.encoder.trace(x);
        let h = ae.last().expect("nonempty");
        let ap = self.predictor.trace(h);
        let ad = self.decoder.trace(h);
        let mut pbar: Vec<f64> = ap.last().expect("nonempty").iter().zip(y).map(|(a, b)| a - b).collect();
        let rbar: Vec<f64> = ad.last().expect("nonempty").iter().zip(x).map(|(a, b)| a - b).collect();
        let terms = SampleTerms {
            predict: 0.5 * crate::linalg::dot(&pbar, &pbar),
            reconstruct: 0.5 * crate::linalg::dot(&rbar, &rbar),
        };
        if let Some(grad) = grad {
            if let Some(e) = extra_ybar {
                for (p, v) in pbar.iter_mut().zip(e) {
                    *p += v;
                }
            }
            let ne = self.encoder.n_params();
            let nd = self.decoder.n_params();
            let (ge, rest) = grad.split_at_mut(ne);
            let (gd, gp) = rest.split_at_mut(nd);
            let mut hbar = self.predictor.backward(&ap, &pbar, gp);
            for (a, b) in hbar.iter_mut().zip(self.decoder.backward(&ad, &rbar, gd)) {
                *a += b;
            }
            self.encoder.backward(&ae, &hbar, ge);
        }
        terms
    }

    /// Mean `(predict, reconstruct)` terms over the listed samples.
    fn data_terms(&self, xs: &[Vec<f64>], ys: &[Vec<f64>], idx: &[usize]) -> (f64, f64) {
        let (mut t2, mut t3) = (0.0, 0.0);
        for &i in idx {
            let s = self.sample_terms(&xs[i], &ys[i], None, None);
            t2 += s.predict;
            t3 += s.reconstruct;
        }
        let n = idx.len().max(1) as f64;
        (t2 / n, t3 / n)
    }
}

/// Backprop check of the two data terms for one physical-unit sample.
pub fn mlp_gradient_check(model: &MlpRelation, x: &[f64], y: &[f64], n_params: usize, rng: &mut Rng) -> Result<f64> {
    model.check_input(x)?;
    let xs = model.standardize(x);
    let ys = model.standardize_out(y);
    let mut grad = vec![0.0; model.n_params()];
    model.sample_terms(&xs, &ys, None, Some(&mut grad));
    let loss = |p: &[f64]| {
        let mut m = model.clone();
        m.set_params(p);
        let s = m.sample_terms(&xs, &ys, None, None);
        s.predict + s.reconstruct
    };
    Ok(fd_check(loss, &model.params(), &grad, n_params, rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpOptions {
    pub hidden: usize,
    pub latent: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub consistency_weight: f64,
    pub consistency_samples: usize,
    /// Decoupled weight decay applied to every parameter each step.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MlpOptions {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 16,
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 500,
            patience: 25,
            consistency_weight: 1.0,
            consistency_samples: 8,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Model-consistency estimate.
    pub term1: f64,
    /// Encoder-predictor term.
    pub term2: f64,
    /// Encoder-decoder term.
    pub term3: f64,
}

impl LossRecord {
    pub const HEADER: &'static str = "epoch,train_loss,val_loss,term1,term2,term3";

    pub fn to_csv(records: &[LossRecord]) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                crate::io::fmt_f64(r.train_loss),
                crate::io::fmt_f64(r.val_loss),
                crate::io::fmt_f64(r.term1),
                crate::io::fmt_f64(r.term2),
                crate::io::fmt_f64(r.term3),
            ));
        }
        out
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    decay: f64,
}

impl Adam {
    fn new(n: usize, lr: f64, decay: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            decay,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= self.lr * ((self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps) + self.decay * params[i]);
        }
    }
}

fn stats(rows: &[Vec<f64>], idx: &[usize], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = idx.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|c| idx.iter().map(|&i| rows[i][c]).sum::<f64>() / n).collect();
    let scale = (0..dim)
        .map(|c| {
            let sd = (idx.iter().map(|&i| (rows[i][c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 1e-12 * mean[c].abs().max(1e-300) {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Root mean column variance; 1 when every column is constant.
fn pooled_scale(rows: &[Vec<f64>], idx: &[usize], mean: &[f64]) -> f64 {
    let n = idx.len() as f64 * mean.len() as f64;
    let var = idx
        .iter()
        .map(|&i| rows[i].iter().zip(mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    if var > 0.0 {
        var.sqrt()
    } else {
        1.0
    }
}

/// Samples per parallel chunk; chunk sums are reduced in order.
const CHUNK: usize = 16;

/// Trains on the train split with the test split as validation set.
/// Returns the model with the best validation loss and one record per epoch,
/// epoch 0 being the untrained model.
pub fn train_mlp(
    ds: &TrainingDataset,
    opts: &MlpOptions,
    forward: Option<&ForwardProblem>,
) -> Result<(MlpRelation, Vec<LossRecord>)> {
    if ds.train.is_empty() {
        return Err(Error::InvalidArgument("empty train split".into()));
    }
    let d = ds.inputs[0].len();
    let d_out = ds.outputs[0].len();
    let consistency = opts.consistency_weight > 0.0;
    let (fields, meas) = if consistency {
        match (forward, &ds.input_fields, &ds.measurements) {
            (Some(_), Some(f), Some(m)) => (f.as_slice(), m.as_slice()),
            _ => {
                return Err(Error::InvalidArgument(
                    "consistency term needs a forward problem and simulated measurements".into(),
                ))
            }
        }
    } else {
        (&[][..], &[][..])
    };

    let mut rng = stream(opts.seed, 0);
    let mut model = MlpRelation::init(d, d_out, opts.hidden, opts.latent, &mut rng);
    (model.in_shift, model.in_scale) = stats(&ds.inputs, &ds.train, d);
    // One common output scale keeps the loss proportional to the squared
    // coefficient-space error.
    let (out_shift, _) = stats(&ds.outputs, &ds.train, d_out);
    model.out_shift = out_shift;
    model.out_scale = vec![pooled_scale(&ds.outputs, &ds.train, &model.out_shift); d_out];
    let xs: Vec<Vec<f64>> = ds.inputs.iter().map(|x| model.standardize(x)).collect();
    let ys: Vec<Vec<f64>> = ds.outputs.iter().map(|y| model.standardize_out(y)).collect();
    let val_idx = if ds.test.is_empty() { &ds.train } else { &ds.test };

    let consistency_grad = |model: &MlpRelation, rng: &mut Rng| -> Result<(f64, Vec<Vec<f64>>, Vec<usize>)> {
        let n = opts.consistency_samples.min(ds.train.len());
        let picks: Vec<usize> = sample(rng, ds.train.len(), n).iter().map(|b| ds.train[b]).collect();
        let fw = forward.expect("checked above");
        let parts = picks
            .par_iter()
            .map(|&i| {
                let ghat = model.predict(&ds.inputs[i])?;
                consistency_term(fw, ds.k, &fields[i], &ghat, &meas[i])
                    .map_err(|e| Error::Sample { index: i, source: Box::new(e) })
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = parts.iter().map(|p| p.0).sum::<f64>() / n as f64;
        let scale = opts.consistency_weight / n as f64;
        let ybars = parts
            .into_iter()
            .map(|(_, g)| g.iter().zip(&model.out_scale).map(|(a, s)| scale * a * s).collect())
            .collect();
        Ok((loss, ybars, picks))
    };

    let record = |model: &MlpRelation, epoch: usize, term1: f64| -> LossRecord {
        let (t2, t3) = model.data_terms(&xs, &ys, &ds.train);
        let (v2, v3) = model.data_terms(&xs, &ys, val_idx);
        LossRecord {
            epoch,
            train_loss: opts.consistency_weight * term1 + t2 + t3,
            val_loss: v2 + v3,
            term1,
            term2: t2,
            term3: t3,
        }
    };

    let n_params = model.n_params();
    let mut params = model.params();
    let mut adam = Adam::new(n_params, opts.learning_rate, opts.weight_decay);
    let term1_0 = if consistency { consistency_grad(&model, &mut rng.clone())?.0 } else { 0.0 };
    let mut history = vec![record(&model, 0, term1_0)];
    let mut best = (history[0].val_loss, params.clone());
    let mut stale = 0;
    let mut order = ds.train.clone();

    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut rng);
        let (term1, cons) = if consistency {
            let (l, ybars, picks) = consistency_grad(&model, &mut rng)?;
            (l, Some((ybars, picks)))
        } else {
            (0.0, None)
        };
        for (bi, batch) in order.chunks(opts.batch_size.max(1)).enumerate() {
            let inv = 1.0 / batch.len() as f64;
            let mut grad = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = vec![0.0; n_params];
                    for &i in chunk {
                        model.sample_terms(&xs[i], &ys[i], None, Some(&mut g));
                    }
                    g
                })
                .collect::<Vec<_>>()
                .into_iter()
                .fold(vec![0.0; n_params], |mut acc, g| {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b * inv;
                    }
                    acc
                });
            if bi == 0 {
                if let Some((ybars, picks)) = &cons {
                    // Consistency cotangents enter through the predictor only.
                    let ne = model.encoder.n_params() + model.decoder.n_params();
                    for (yb, &i) in ybars.iter().zip(picks) {
                        let h = model.encoder.trace(&xs[i]);
                        let ap = model.predictor.trace(h.last().expect("nonempty"));
                        let (ge, gp) = grad.split_at_mut(ne);
                        let hbar = model.predictor.backward(&ap, yb, gp);
                        model.encoder.backward(&h, &hbar, &mut ge[..model.encoder.n_params()]);
                    }
                }
            }
            adam.step(&mut params, &grad);
            model.set_params(&params);
        }
        let rec = record(&model, epoch, term1);
        if !(rec.train_loss.is_finite() && rec.val_loss.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        log::debug!(
            "epoch {epoch}: train {:.4e} val {:.4e}",
            rec.train_loss,
            rec.val_loss
        );
        if rec.val_loss < best.0 {
            best = (rec.val_loss, params.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        history.push(rec);
        if stale >= opts.patience {
            break;
        }
    }
    model.set_params(&best.1);
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dataset(n: usize, d: usize, seed: u64, f: impl Fn(&[f64]) -> Vec<f64>) -> TrainingDataset {
        let mut rng = stream(seed, 0);
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let outputs = inputs.iter().map(|x| f(x)).collect();
        let cut = n * 4 / 5;
        TrainingDataset {
            k: 0,
            inputs,
            outputs,
            input_fields: None,
            measurements: None,
            train: (0..cut).collect(),
            test: (cut..n).collect(),
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let e = Network::new(vec![Dense::zeros(3, 2, Activation::Tanh)]).unwrap();
        let dec = Network::new(vec![Dense::zeros(2, 3, Activation::Identity)]).unwrap();
        let p = Network::new(vec![Dense::zeros(2, 4, Activation::Identity)]).unwrap();
        let m = MlpRelation::from_networks(e, dec, p).unwrap();
        assert_eq!(m.predict(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut l = Dense::zeros(3, 3, Activation::Identity);
        for i in 0..3 {
            l.w[i * 3 + i] = 1.0;
        }
        let net = Network::new(vec![l]).unwrap();
        assert_eq!(net.forward(&[0.5, -1.0, 2.0]), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn hand_computed_tanh_network() {
        let l1 = Dense {
            n_in: 2,
            n_out: 2,
            w: vec![0.1, -0.2, 0.3, 0.4],
            b: vec![0.05, -0.05],
            act: Activation::Tanh,
        };
        let l2 = Dense {
            n_in: 2,
            n_out: 2,
            w: vec![0.5, 0.6, -0.7, 0.8],
            b: vec![0.0, 0.1],
            act: Activation::Tanh,
        };
        let net = Network::new(vec![l1, l2]).unwrap();
        let x = [1.0, 2.0];
        let h0 = (0.1 * 1.0 - 0.2 * 2.0 + 0.05_f64).tanh();
        let h1 = (0.3 * 1.0 + 0.4 * 2.0 - 0.05_f64).tanh();
        let y0 = (0.5 * h0 + 0.6 * h1).tanh();
        let y1 = (-0.7 * h0 + 0.8 * h1 + 0.1).tanh();
        let y = net.forward(&x);
        assert!((y[0] - y0).abs() <= 1e-12 && (y[1] - y1).abs() <= 1e-12);
    }

    #[test]
    fn dimension_chain_is_validated() {
        let bad = Network::new(vec![Dense::zeros(2, 3, Activation::Tanh), Dense::zeros(2, 1, Activation::Identity)]);
        assert!(matches!(bad, Err(Error::Dimension { .. })));
    }

    #[test]
    fn linear_gradient_check() {
        let mut rng = stream(5, 0);
        let net = Network::new(vec![Dense::glorot(4, 3, Activation::Identity, &mut rng)]).unwrap();
        let err = network_gradient_check(&net, &[0.3, -0.1, 0.8, 0.2], &[1.0, 0.0, -1.0], 15, &mut rng);
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn tanh_gradient_check() {
        let mut rng = stream(6, 0);
        let net = Network::mlp(&[5, 7, 6, 3], false, &mut rng);
        let err = network_gradient_check(&net, &[0.3, -0.1, 0.8, 0.2, -0.5], &[1.0, 0.0, -1.0], 50, &mut rng);
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn zero_input_column_has_zero_gradient() {
        let mut rng = stream(7, 0);
        let net = Network::mlp(&[3, 4, 2], false, &mut rng);
        let (_, g) = net.loss_and_gradient(&[0.0, 0.5, 0.0], &[1.0, 1.0]);
        for o in 0..4 {
            assert_eq!(g[o * 3], 0.0);
            assert_eq!(g[o * 3 + 2], 0.0);
        }
    }

    #[test]
    fn full_model_gradient_check() {
        let mut rng = stream(8, 0);
        let mut m = MlpRelation::init(6, 5, 10, 4, &mut rng);
        // Move the zero output layers so every parameter is exercised.
        let p: Vec<f64> = m.params().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        m.set_params(&p);
        let x = [0.1, 0.2, -0.3, 0.4, 0.0, -0.9];
        let y = [0.5, -0.5, 0.2, 0.1, 0.3];
        let err = mlp_gradient_check(&m, &x, &y, 50, &mut rng).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = stream(9, 0);
        let mut m = MlpRelation::init(3, 2, 8, 3, &mut rng);
        let p: Vec<f64> = m.params().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
        m.set_params(&p);
        m.in_scale = vec![2.0, 0.5, 1.0];
        m.out_scale = vec![3.0, 0.1];
        let x = [0.2, -0.3, 0.7];
        let gbar = [0.4, -1.3];
        let v = m.vjp(&x, &gbar).unwrap();
        for i in 0..3 {
            let h = 1e-6;
            let (mut xp, mut xm) = (x, x);
            xp[i] += h;
            xm[i] -= h;
            let (fp, fm) = (m.predict(&xp).unwrap(), m.predict(&xm).unwrap());
            let fd: f64 = (0..2).map(|o| gbar[o] * (fp[o] - fm[o]) / (2.0 * h)).sum();
            assert!((fd - v[i]).abs() < 1e-7 * (1.0 + fd.abs()), "{fd} {}", v[i]);
        }
    }

    #[test]
    fn initial_loss_is_variance_baseline() {
        let ds = small_dataset(100, 3, 10, |x| vec![x[0] + 2.0 * x[1], x[2] * x[2]]);
        let opts = MlpOptions {
            max_epochs: 0,
            consistency_weight: 0.0,
            ..Default::default()
        };
        let (_, hist) = train_mlp(&ds, &opts, None).unwrap();
        // Zero output layers predict the train mean: each standardized
        // nonconstant column contributes 0.5 on the train split.
        let var_sum = |rows: &[Vec<f64>], dim: usize| -> f64 {
            (0..dim)
                .map(|c| {
                    let n = ds.train.len() as f64;
                    let m = ds.train.iter().map(|&i| rows[i][c]).sum::<f64>() / n;
                    let v = ds.train.iter().map(|&i| (rows[i][c] - m).powi(2)).sum::<f64>() / n;
                    v / v
                })
                .sum()
        };
        let expected = 0.5 * var_sum(&ds.outputs, 2) + 0.5 * var_sum(&ds.inputs, 3);
        assert!((hist[0].train_loss - expected).abs() < 1e-12, "{} {expected}", hist[0].train_loss);
    }

    #[test]
    fn learns_identity_relation() {
        let ds = small_dataset(500, 4, 11, |x| x.to_vec());
        let opts = MlpOptions {
            hidden: 32,
            latent: 4,
            batch_size: 32,
            learning_rate: 3e-3,
            consistency_weight: 0.0,
            ..Default::default()
        };
        let (m, _) = train_mlp(&ds, &opts, None).unwrap();
        let mse: f64 = ds
            .test
            .iter()
            .map(|&i| {
                let p = m.predict(&ds.inputs[i]).unwrap();
                p.iter().zip(&ds.outputs[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0
            })
            .sum::<f64>()
            / ds.test.len() as f64;
        assert!(mse <= 1e-3, "{mse}");
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_dataset(120, 3, 12, |x| vec![x[0] * x[1]]);
        let opts = MlpOptions {
            max_epochs: 5,
            hidden: 8,
            latent: 2,
            consistency_weight: 0.0,
            ..Default::default()
        };
        let (a, ha) = train_mlp(&ds, &opts, None).unwrap();
        let (b, hb) = train_mlp(&ds, &opts, None).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ha, hb);
    }
}
