//! Fully connected ReLU classifier with softmax cross-entropy, trained by
//! mini-batch Adam or momentum SGD.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainingProgress;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths: input, hidden..., output.
    pub sizes: Vec<usize>,
    /// Per layer: row-major weights `[out x in]` followed by biases `[out]`.
    pub params: Vec<f64>,
}

/// Scratch buffers reused across examples.
#[derive(Debug, Default)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], output: usize, seed: u64) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.gen_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Mlp { sizes, params }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least one layer")
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (offset, in, out)
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let o = offset;
            offset += w[0] * w[1] + w[1];
            (o, w[0], w[1])
        })
    }

    fn prepare(&self, ws: &mut Workspace) {
        if ws.acts.len() != self.sizes.len() || ws.acts.iter().zip(&self.sizes).any(|(a, &n)| a.len() != n) {
            ws.acts = self.sizes.iter().map(|&n| vec![0.0; n]).collect();
            ws.deltas = self.sizes.iter().map(|&n| vec![0.0; n]).collect();
        }
    }

    /// Forward pass; leaves softmax probabilities in the last activation.
    fn forward_into(&self, x: &[f64], ws: &mut Workspace) {
        self.prepare(ws);
        ws.acts[0].copy_from_slice(x);
        let n_layers = self.sizes.len() - 1;
        for (l, (offset, n_in, n_out)) in self.layers().enumerate() {
            let (prev, next) = ws.acts.split_at_mut(l + 1);
            let a_in = &prev[l];
            let a_out = &mut next[0];
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            for j in 0..n_out {
                let row = &w[j * n_in..(j + 1) * n_in];
                let mut z = b[j];
                for (wi, ai) in row.iter().zip(a_in.iter()) {
                    z += wi * ai;
                }
                a_out[j] = if l + 1 < n_layers { z.max(0.0) } else { z };
            }
        }
        softmax_in_place(ws.acts.last_mut().expect("output layer"));
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut ws = Workspace::default();
        self.forward_into(x, &mut ws);
        ws.acts.last().expect("output layer").clone()
    }

    pub fn predict_proba_with(&self, x: &[f64], ws: &mut Workspace) -> Vec<f64> {
        self.forward_into(x, ws);
        ws.acts.last().expect("output layer").clone()
    }

    /// Mean cross-entropy over the batch; adds the gradient of that mean to
    /// `grad` (which the caller zeroes).
    pub fn loss_and_grad(&self, xs: &[&[f64]], ys: &[usize], grad: &mut [f64], ws: &mut Workspace) -> f64 {
        debug_assert_eq!(grad.len(), self.params.len());
        let scale = 1.0 / xs.len().max(1) as f64;
        let layers: Vec<(usize, usize, usize)> = self.layers().collect();
        let n_layers = layers.len();
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            self.forward_into(x, ws);
            let probs = &ws.acts[n_layers];
            loss -= probs[y].max(1e-300).ln();
            {
                let d = &mut ws.deltas[n_layers];
                d.copy_from_slice(probs);
                d[y] -= 1.0;
                for v in d.iter_mut() {
                    *v *= scale;
                }
            }
            for l in (0..n_layers).rev() {
                let (offset, n_in, n_out) = layers[l];
                let (lower, upper) = ws.deltas.split_at_mut(l + 1);
                let delta = &upper[0];
                let a_in = &ws.acts[l];
                let w = &self.params[offset..offset + n_in * n_out];
                let (gw, gb) = grad[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for j in 0..n_out {
                    let dj = delta[j];
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    let row = &mut gw[j * n_in..(j + 1) * n_in];
                    for (g, a) in row.iter_mut().zip(a_in.iter()) {
                        *g += dj * a;
                    }
                }
                if l > 0 {
                    let back = &mut lower[l];
                    back.iter_mut().for_each(|v| *v = 0.0);
                    for j in 0..n_out {
                        let dj = delta[j];
                        if dj == 0.0 {
                            continue;
                        }
                        let row = &w[j * n_in..(j + 1) * n_in];
                        for (b, wi) in back.iter_mut().zip(row.iter()) {
                            *b += dj * wi;
                        }
                    }
                    // ReLU derivative from the stored activation
                    for (b, a) in back.iter_mut().zip(a_in.iter()) {
                        if *a <= 0.0 {
                            *b = 0.0;
                        }
                    }
                }
            }
        }
        loss * scale
    }

    pub fn loss(&self, xs: &[&[f64]], ys: &[usize]) -> f64 {
        let mut ws = Workspace::default();
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            self.forward_into(x, &mut ws);
            total -= ws.acts.last().expect("output")[y].max(1e-300).ln();
        }
        total / xs.len().max(1) as f64
    }

    pub fn accuracy(&self, xs: &[&[f64]], ys: &[usize]) -> f64 {
        if xs.is_empty() {
            return 1.0;
        }
        let mut ws = Workspace::default();
        let correct = xs
            .iter()
            .zip(ys)
            .filter(|(x, &y)| {
                self.forward_into(x, &mut ws);
                super::argmax(ws.acts.last().expect("output")) == y
            })
            .count();
        correct as f64 / xs.len() as f64
    }
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

/// Step-decayed learning rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` epochs (1.0 = constant).
    pub decay: f64,
    pub decay_every: usize,
}

impl Schedule {
    pub fn rate_at(&self, epoch: usize) -> f64 {
        if self.decay_every == 0 {
            return self.learning_rate;
        }
        self.learning_rate * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const MOMENTUM: f64 = 0.9;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        Optimizer {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(self.m.iter_mut()) {
                    *m = MOMENTUM * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                    self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub schedule: Schedule,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

/// Trains in place and returns the mean training loss of every epoch.
pub fn train(
    mlp: &mut Mlp,
    xs: &[Vec<f64>],
    ys: &[usize],
    opts: &TrainOptions,
    progress: Option<&TrainingProgress>,
) -> Vec<f64> {
    let n = xs.len();
    if n == 0 || opts.schedule.epochs == 0 {
        return Vec::new();
    }
    if let Some(p) = progress {
        p.start(opts.schedule.epochs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Optimizer::new(opts.optimizer, mlp.param_count());
    let mut grad = vec![0.0; mlp.param_count()];
    let mut ws = Workspace::default();
    let mut order: Vec<usize> = (0..n).collect();
    let batch = opts.batch_size.max(1);
    let mut losses = Vec::with_capacity(opts.schedule.epochs);
    let mut bx: Vec<&[f64]> = Vec::with_capacity(batch);
    let mut by: Vec<usize> = Vec::with_capacity(batch);
    for epoch in 0..opts.schedule.epochs {
        let lr = opts.schedule.rate_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.push(&xs[i]);
                by.push(ys[i]);
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            let l = mlp.loss_and_grad(&bx, &by, &mut grad, &mut ws);
            epoch_loss += l * chunk.len() as f64;
            opt.step(&mut mlp.params, &grad, lr);
        }
        losses.push(epoch_loss / n as f64);
        if let Some(p) = progress {
            p.tick();
        }
    }
    losses
}
