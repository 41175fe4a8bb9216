//! Minimal f64 recurrent network toolkit: embeddings, stacked GRU layers
//! with backpropagation through time, dense heads, and Adam.
//!
//! Every batch is laid out time-major: one `(batch, features)` matrix per
//! step. Sequences in a batch share the same padded length.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// A model (or part of one) whose trainable tensors can be enumerated in a
/// fixed order. Gradients use the same type as the parameters.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// SHA-256 over the raw little-endian bytes of every tensor.
    fn fingerprint(&self) -> String {
        fingerprint(self.tensors())
    }
}

pub fn fingerprint(tensors: Vec<&Matrix>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update((t.nrows() as u64).to_le_bytes());
        h.update((t.ncols() as u64).to_le_bytes());
        for x in t.iter() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn global_norm(tensors: &[&Matrix]) -> f64 {
    tensors
        .iter()
        .map(|t| t.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales the gradients in place so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(&grads.iter().map(|g| &**g).collect::<Vec<_>>());
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Row-wise log-softmax. Entries equal to `-inf` stay excluded.
pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `(in, out)`
    pub w: Matrix,
    /// `(1, out)`
    pub b: Matrix,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: glorot(inputs, outputs, rng),
            b: Matrix::zeros((1, outputs)),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Matrix::zeros((inputs, outputs)),
            b: Matrix::zeros((1, outputs)),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Dense) -> Matrix {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl ParamSet for Dense {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }
}

/// One GRU layer:
///
/// ```text
/// r  = σ(x·Wr + h·Ur + br)
/// z  = σ(x·Wz + h·Uz + bz)
/// n  = tanh(x·Wn + (r ⊙ h)·Un + bn)
/// h' = z ⊙ h + (1 − z) ⊙ n
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruLayer {
    /// `(in, 3H)`, gate order r, z, n
    pub wx: Matrix,
    /// `(H, 2H)`, recurrent weights for r and z
    pub whrz: Matrix,
    /// `(H, H)`, recurrent weights for the candidate
    pub whn: Matrix,
    /// `(1, 3H)`
    pub b: Matrix,
}

#[derive(Clone, Debug)]
pub struct GruStep {
    pub x: Matrix,
    pub h_prev: Matrix,
    pub r: Matrix,
    pub z: Matrix,
    pub n: Matrix,
    pub rh: Matrix,
    pub h: Matrix,
}

impl GruLayer {
    pub fn new(inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut b = Matrix::zeros((1, 3 * hidden));
        // Bias the update gate toward carrying state early in training.
        b.slice_mut(s![.., hidden..2 * hidden]).fill(1.0);
        Self {
            wx: glorot(inputs, 3 * hidden, rng),
            whrz: glorot(hidden, 2 * hidden, rng),
            whn: glorot(hidden, hidden, rng),
            b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.whn.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.wx.nrows()
    }

    pub fn step(&self, x: Matrix, h_prev: &Matrix) -> GruStep {
        let hs = self.hidden();
        let gx = x.dot(&self.wx) + &self.b;
        let ghrz = h_prev.dot(&self.whrz);
        let r = (&gx.slice(s![.., ..hs]) + &ghrz.slice(s![.., ..hs])).mapv(sigmoid);
        let z = (&gx.slice(s![.., hs..2 * hs]) + &ghrz.slice(s![.., hs..])).mapv(sigmoid);
        let rh = &r * h_prev;
        let n = (&gx.slice(s![.., 2 * hs..]) + &rh.dot(&self.whn)).mapv(f64::tanh);
        let mut h = Matrix::zeros(n.raw_dim());
        Zip::from(&mut h)
            .and(&z)
            .and(h_prev)
            .and(&n)
            .for_each(|h, &z, &hp, &n| *h = z * hp + (1.0 - z) * n);
        GruStep {
            x,
            h_prev: h_prev.clone(),
            r,
            z,
            n,
            rh,
            h,
        }
    }

    /// Backward through one step. Returns `(dL/dx, dL/dh_prev)`.
    pub fn step_backward(&self, c: &GruStep, dh: &Matrix, grad: &mut GruLayer) -> (Matrix, Matrix) {
        let hs = self.hidden();
        let batch = dh.nrows();
        let mut dh_prev = dh * &c.z;
        let dan = Zip::from(dh)
            .and(&c.z)
            .and(&c.n)
            .map_collect(|&d, &z, &n| d * (1.0 - z) * (1.0 - n * n));
        let daz = Zip::from(dh)
            .and(&c.h_prev)
            .and(&c.n)
            .and(&c.z)
            .map_collect(|&d, &hp, &n, &z| d * (hp - n) * z * (1.0 - z));
        grad.whn += &c.rh.t().dot(&dan);
        let drh = dan.dot(&self.whn.t());
        dh_prev += &(&drh * &c.r);
        let dar = Zip::from(&drh)
            .and(&c.h_prev)
            .and(&c.r)
            .map_collect(|&d, &hp, &r| d * hp * r * (1.0 - r));

        let mut dg = Matrix::zeros((batch, 3 * hs));
        dg.slice_mut(s![.., ..hs]).assign(&dar);
        dg.slice_mut(s![.., hs..2 * hs]).assign(&daz);
        dg.slice_mut(s![.., 2 * hs..]).assign(&dan);

        grad.wx += &c.x.t().dot(&dg);
        grad.b += &dg.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dx = dg.dot(&self.wx.t());

        let dgrz = dg.slice(s![.., ..2 * hs]);
        grad.whrz += &c.h_prev.t().dot(&dgrz);
        dh_prev += &dgrz.dot(&self.whrz.t());
        (dx, dh_prev)
    }
}

impl ParamSet for GruLayer {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.wx, &self.whrz, &self.whn, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.wx, &mut self.whrz, &mut self.whn, &mut self.b]
    }
}

/// Word embedding followed by stacked GRU layers. An optional per-sequence
/// context vector is concatenated to the embedding at every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrentStack {
    /// `(vocab, embedding_dim)`
    pub embedding: Matrix,
    pub layers: Vec<GruLayer>,
    pub context_dim: usize,
}

/// Forward record of a whole batch, needed for backpropagation.
#[derive(Clone, Debug)]
pub struct StackTrace {
    /// `[t][b]` input token ids
    pub ids: Vec<Vec<u32>>,
    /// `[layer][t]`
    pub steps: Vec<Vec<GruStep>>,
    /// Inverted-dropout masks applied to the input of layers 1.. (`[layer-1]`).
    pub dropout: Vec<Option<Matrix>>,
}

impl StackTrace {
    pub fn top(&self, t: usize) -> &Matrix {
        &self.steps.last().expect("at least one layer")[t].h
    }

    /// Top-layer state before step `t` (the initial state for `t = 0`).
    pub fn top_prev(&self, t: usize) -> &Matrix {
        &self.steps.last().expect("at least one layer")[t].h_prev
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Variational dropout between recurrent layers: one mask per sequence and
/// layer, reused at every step.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl RecurrentStack {
    pub fn new(
        vocab: usize,
        embedding_dim: usize,
        context_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let dist = Uniform::new_inclusive(-0.1, 0.1).expect("finite bounds");
        let embedding = Array2::from_shape_simple_fn((vocab, embedding_dim), || dist.sample(rng));
        let layers = (0..layers.max(1))
            .map(|l| {
                let inputs = if l == 0 { embedding_dim + context_dim } else { hidden };
                GruLayer::new(inputs, hidden, rng)
            })
            .collect();
        Self {
            embedding,
            layers,
            context_dim,
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden()
    }

    pub fn vocab(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn initial_state(&self, batch: usize) -> Vec<Matrix> {
        self.layers
            .iter()
            .map(|l| Matrix::zeros((batch, l.hidden())))
            .collect()
    }

    fn input(&self, ids: &[u32], context: Option<&Matrix>) -> Matrix {
        let e = self.embedding.ncols();
        let mut x = Matrix::zeros((ids.len(), e + self.context_dim));
        for (b, &id) in ids.iter().enumerate() {
            x.slice_mut(s![b, ..e]).assign(&self.embedding.row(id as usize));
        }
        if let Some(ctx) = context {
            x.slice_mut(s![.., e..]).assign(ctx);
        }
        x
    }

    /// Advances `state` by one token per sequence (inference, no dropout).
    /// Returns the new top-layer state.
    pub fn step(&self, ids: &[u32], context: Option<&Matrix>, state: &mut [Matrix]) -> Matrix {
        let mut x = self.input(ids, context);
        for (layer, h) in self.layers.iter().zip(state.iter_mut()) {
            let st = layer.step(x, h);
            *h = st.h;
            x = h.clone();
        }
        x
    }

    /// Runs the full batch. `ids_by_step[t][b]` is the token consumed at step
    /// `t` by sequence `b`.
    pub fn forward<R: Rng>(
        &self,
        ids_by_step: Vec<Vec<u32>>,
        context: Option<&Matrix>,
        dropout: Option<Dropout<'_, R>>,
    ) -> StackTrace {
        let batch = ids_by_step.first().map_or(0, Vec::len);
        let masks: Vec<Option<Matrix>> = match dropout {
            Some(d) if d.rate > 0.0 => {
                let keep = 1.0 - d.rate;
                self.layers[1..]
                    .iter()
                    .map(|l| {
                        Some(Array2::from_shape_simple_fn((batch, l.inputs()), || {
                            if d.rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        }))
                    })
                    .collect()
            }
            _ => vec![None; self.layers.len() - 1],
        };

        let mut state = self.initial_state(batch);
        let mut steps: Vec<Vec<GruStep>> = vec![Vec::with_capacity(ids_by_step.len()); self.layers.len()];
        for ids in &ids_by_step {
            let mut x = self.input(ids, context);
            for (l, layer) in self.layers.iter().enumerate() {
                if l > 0 {
                    if let Some(m) = &masks[l - 1] {
                        x *= m;
                    }
                }
                let st = layer.step(x, &state[l]);
                state[l] = st.h.clone();
                x = st.h.clone();
                steps[l].push(st);
            }
        }
        StackTrace {
            ids: ids_by_step,
            steps,
            dropout: masks,
        }
    }

    /// Backpropagates `d_top[t]` (gradient w.r.t. the top-layer output at
    /// step `t`) through time and layers, accumulating into `grad`.
    pub fn backward(&self, trace: &StackTrace, d_top: Vec<Matrix>, grad: &mut RecurrentStack) {
        let n = trace.len();
        if n == 0 {
            return;
        }
        let mut d_out = d_top;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let mut dh_next = Matrix::zeros(d_out[0].raw_dim());
            let mut d_in = Vec::with_capacity(n);
            for t in (0..n).rev() {
                let dh = &d_out[t] + &dh_next;
                let (dx, dhp) = layer.step_backward(&trace.steps[l][t], &dh, &mut grad.layers[l]);
                dh_next = dhp;
                d_in.push(dx);
            }
            d_in.reverse();
            if l > 0 {
                if let Some(m) = &trace.dropout[l - 1] {
                    for dx in d_in.iter_mut() {
                        *dx *= m;
                    }
                }
            }
            d_out = d_in;
        }
        let e = self.embedding.ncols();
        for (t, dx) in d_out.iter().enumerate() {
            for (b, &id) in trace.ids[t].iter().enumerate() {
                let mut row = grad.embedding.row_mut(id as usize);
                row += &dx.slice(s![b, ..e]);
            }
        }
    }
}

impl ParamSet for RecurrentStack {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.embedding];
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.embedding];
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v
    }
}

/// Stacks per-sequence token ids into time-major order for `forward`.
pub fn time_major(rows: &[&[u32]], steps: usize) -> Vec<Vec<u32>> {
    (0..steps)
        .map(|t| rows.iter().map(|r| r[t]).collect())
        .collect()
}

pub fn view_row(m: &Matrix, r: usize) -> ArrayView2<'_, f64> {
    m.slice(s![r..r + 1, ..])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr * weight_decay * p`.
    pub weight_decay: f64,
    /// Maximum global gradient norm, `None` to disable clipping.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Clips, then applies one Adam step. Non-finite gradients leave the
    /// parameters and moments untouched.
    pub fn step(&mut self, params: Vec<&mut Matrix>, mut grads: Vec<&mut Matrix>) -> Result<StepInfo> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch(format!(
                "{} parameter tensors vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("gradient"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Matrix::zeros(p.raw_dim())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::LengthMismatch("optimizer state does not match parameters".into()));
        }
        let grad_norm = match self.config.clip_norm {
            Some(max) => clip_global_norm(&mut grads, max),
            None => global_norm(&grads.iter().map(|g| &**g).collect::<Vec<_>>()),
        };
        let clipped = self.config.clip_norm.is_some_and(|m| grad_norm > m);

        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(p)
                .and(&*g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    *p -= c.lr * (update + c.weight_decay * *p);
                });
        }
        Ok(StepInfo { grad_norm, clipped })
    }
}
