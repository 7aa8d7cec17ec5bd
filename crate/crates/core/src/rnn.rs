//! Beat-sequence classifier: a time-distributed MLP feeding a shared LSTM,
//! three LSTM branches pooled by masked mean, final state and masked max,
//! and a dense softmax head. Trained by full backpropagation through time.

use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::{ClassProbabilities, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::features::{BeatFeatureSequence, NUM_BEAT_FEATURES};

const MAGIC: &[u8; 4] = b"RNNM";
const FORMAT_VERSION: u32 = 1;
const PROB_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RnnConfig {
    pub mlp_hidden: usize,
    pub mlp_out: usize,
    pub lstm_units: usize,
    pub classes: usize,
    pub l2: f64,
    pub dropout_rate: f64,
    pub batch: usize,
    pub lr0: f64,
    /// Multiplier applied per plateau event.
    pub lr_decay: f64,
    pub plateau_patience: usize,
    pub early_stop: usize,
    pub val_frac: f64,
    /// Sequences are batched with others whose length falls in the same
    /// bucket of this many beats.
    pub bucket_width: usize,
    pub max_epochs: usize,
}

impl Default for RnnConfig {
    fn default() -> Self {
        RnnConfig {
            mlp_hidden: 256,
            mlp_out: 128,
            lstm_units: 128,
            classes: NUM_CLASSES,
            l2: 1e-4,
            dropout_rate: 0.2,
            batch: 32,
            lr0: 0.002,
            lr_decay: std::f64::consts::FRAC_1_SQRT_2,
            plateau_patience: 3,
            early_stop: 15,
            val_frac: 0.15,
            bucket_width: 8,
            max_epochs: 500,
        }
    }
}

impl RnnConfig {
    fn validate(&self) -> Result<()> {
        let sizes = [self.mlp_hidden, self.mlp_out, self.lstm_units, self.batch, self.bucket_width];
        if sizes.contains(&0) || self.classes != NUM_CLASSES {
            return Err(Error::InvalidArgument("bad network dimensions".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(Error::InvalidArgument("dropout and validation fractions must lie in [0, 1)".into()));
        }
        if self.l2 < 0.0 || self.lr0 < 0.0 || self.lr_decay <= 0.0 {
            return Err(Error::InvalidArgument("negative regularization or learning rate".into()));
        }
        Ok(())
    }

    /// Learning rate after `k` plateau events.
    pub fn lr_after(&self, k: usize) -> f64 {
        // Work in the exponent, snapped to half-integers, so the default
        // decay yields exactly 2^(-k/2) instead of accumulating rounding.
        let e = k as f64 * self.lr_decay.log2();
        let snapped = (2.0 * e).round() / 2.0;
        let e = if (e - snapped).abs() < 1e-9 { snapped } else { e };
        self.lr0 * 2f64.powf(e)
    }
}

// Tensor order in `Params` and in the model file.
const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const W3: usize = 16;
const B3: usize = 17;
const W4: usize = 18;
const B4: usize = 19;
const W5: usize = 20;
const B5: usize = 21;
pub const NUM_TENSORS: usize = 22;

/// Index of the input kernel of LSTM `k`; the recurrent kernel and bias
/// follow it.
const fn lstm(k: usize) -> usize {
    4 + 3 * k
}

pub fn tensor_shapes(cfg: &RnnConfig) -> Vec<(usize, usize)> {
    let (h, e, u, k) = (cfg.mlp_hidden, cfg.mlp_out, cfg.lstm_units, cfg.classes);
    let mut v = vec![(NUM_BEAT_FEATURES, h), (1, h), (h, e), (1, e)];
    for l in 0..4 {
        let input = if l == 0 { e } else { u };
        v.extend([(input, 4 * u), (u, 4 * u), (1, 4 * u)]);
    }
    v.extend([(3 * u, h), (1, h), (h, e), (1, e), (e, k), (1, k)]);
    v
}

pub fn tensor_names() -> Vec<String> {
    let mut v: Vec<String> = ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"].map(String::from).to_vec();
    for l in 0..4 {
        for part in ["wx", "wh", "b"] {
            v.push(format!("lstm{l}.{part}"));
        }
    }
    v.extend(["head.w1", "head.b1", "head.w2", "head.b2", "out.w", "out.b"].map(String::from));
    v
}

fn is_bias(i: usize) -> bool {
    matches!(i, B1 | B2 | B3 | B4 | B5) || (4..16).contains(&i) && (i - 4) % 3 == 2
}

/// All trainable tensors, biases stored as single-row matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: Vec<Array2<f64>>,
}

impl Params {
    pub fn zeros(cfg: &RnnConfig) -> Self {
        Params {
            tensors: tensor_shapes(cfg).into_iter().map(Array2::zeros).collect(),
        }
    }

    pub fn zeros_like(other: &Params) -> Self {
        Params {
            tensors: other.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    /// Glorot-uniform kernels, zero biases, forget-gate biases 1.
    pub fn init(cfg: &RnnConfig, rng: &mut impl Rng) -> Self {
        let mut p = Params::zeros(cfg);
        for (i, t) in p.tensors.iter_mut().enumerate() {
            if is_bias(i) {
                continue;
            }
            let limit = (6.0 / (t.nrows() + t.ncols()) as f64).sqrt();
            t.mapv_inplace(|_| rng.gen_range(-limit..limit));
        }
        let u = cfg.lstm_units;
        for l in 0..4 {
            p.tensors[lstm(l) + 2].slice_mut(s![0, u..2 * u]).fill(1.0);
        }
        p
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Sum of squared kernel entries (biases excluded).
    pub fn weight_sq_sum(&self) -> f64 {
        self.tensors
            .iter()
            .enumerate()
            .filter(|(i, _)| !is_bias(*i))
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Weights of one LSTM layer; gate blocks along the columns are i, f, g, o.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights<'a> {
    pub wx: &'a Array2<f64>,
    pub wh: &'a Array2<f64>,
    pub b: &'a Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Applies the gate nonlinearities in place to pre-activations `z` (B, 4U).
fn activate_gates(z: &mut Array2<f64>, u: usize) {
    for mut row in z.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if (2 * u..3 * u).contains(&j) { v.tanh() } else { sigmoid(*v) };
        }
    }
}

/// One LSTM step for a single example.
pub fn lstm_cell(x: &[f64], h: &[f64], c: &[f64], w: LstmWeights) -> Result<(Vec<f64>, Vec<f64>)> {
    let u = w.wh.nrows();
    if x.len() != w.wx.nrows() || h.len() != u || c.len() != u || w.wx.ncols() != 4 * u || w.b.ncols() != 4 * u {
        return Err(Error::Shape("lstm cell input sizes".into()));
    }
    let xr = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
    let hr = Array2::from_shape_vec((1, u), h.to_vec()).expect("row");
    let mut z = xr.dot(w.wx) + hr.dot(w.wh) + w.b;
    activate_gates(&mut z, u);
    let mut h2 = vec![0.0; u];
    let mut c2 = vec![0.0; u];
    for j in 0..u {
        let (i, f, g, o) = (z[[0, j]], z[[0, u + j]], z[[0, 2 * u + j]], z[[0, 3 * u + j]]);
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    Ok((h2, c2))
}

/// Vector-Jacobian product of [`lstm_cell`]: given output cotangents
/// (dh', dc'), returns (dx, dh, dc).
pub fn lstm_cell_vjp(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    w: LstmWeights,
    dh_out: &[f64],
    dc_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let u = w.wh.nrows();
    lstm_cell(x, h, c, w)?;
    let xr = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
    let hr = Array2::from_shape_vec((1, u), h.to_vec()).expect("row");
    let mut z = xr.dot(w.wx) + hr.dot(w.wh) + w.b;
    activate_gates(&mut z, u);
    let mut dz = Array2::zeros((1, 4 * u));
    let mut dc = vec![0.0; u];
    for j in 0..u {
        let (i, f, g, o) = (z[[0, j]], z[[0, u + j]], z[[0, 2 * u + j]], z[[0, 3 * u + j]]);
        let cn = f * c[j] + i * g;
        let tc = cn.tanh();
        let dcn = dc_out[j] + dh_out[j] * o * (1.0 - tc * tc);
        dz[[0, j]] = dcn * g * i * (1.0 - i);
        dz[[0, u + j]] = dcn * c[j] * f * (1.0 - f);
        dz[[0, 2 * u + j]] = dcn * i * (1.0 - g * g);
        dz[[0, 3 * u + j]] = dh_out[j] * tc * o * (1.0 - o);
        dc[j] = dcn * f;
    }
    let dx = dz.dot(&w.wx.t()).into_raw_vec_and_offset().0;
    let dh = dz.dot(&w.wh.t()).into_raw_vec_and_offset().0;
    Ok((dx, dh, dc))
}

/// Sequences packed time-major: row `t * b + i` holds step `t` of example `i`.
struct Packed {
    b: usize,
    steps: usize,
    x: Array2<f64>,
    valid: Vec<bool>,
    counts: Vec<usize>,
}

impl Packed {
    fn new(model: &RnnModel, seqs: &[(&[[f64; NUM_BEAT_FEATURES]], Option<&[bool]>)]) -> Result<Self> {
        let b = seqs.len();
        if b == 0 {
            return Err(Error::DegenerateData("empty batch".into()));
        }
        let steps = seqs.iter().map(|(r, _)| r.len()).max().unwrap_or(0);
        let mut x = Array2::zeros((steps * b, NUM_BEAT_FEATURES));
        let mut valid = vec![false; steps * b];
        let mut counts = vec![0; b];
        for (i, (rows, mask)) in seqs.iter().enumerate() {
            if let Some(m) = mask {
                if m.len() != rows.len() {
                    return Err(Error::Shape("mask length differs from sequence length".into()));
                }
            }
            for (t, row) in rows.iter().enumerate() {
                if !mask.map_or(true, |m| m[t]) {
                    continue;
                }
                let k = t * b + i;
                valid[k] = true;
                counts[i] += 1;
                for (j, &v) in row.iter().enumerate() {
                    x[[k, j]] = (v - model.input_mean[j]) / model.input_std[j];
                }
            }
            if counts[i] == 0 {
                return Err(Error::DegenerateData("empty beat sequence".into()));
            }
        }
        Ok(Packed { b, steps, x, valid, counts })
    }

    fn rows(&self, t: usize) -> std::ops::Range<usize> {
        t * self.b..(t + 1) * self.b
    }
}

struct LstmCache {
    /// Gate activations per step, (B, 4U).
    act: Vec<Array2<f64>>,
    /// tanh of the new cell state per step.
    tc: Vec<Array2<f64>>,
    c_prev: Vec<Array2<f64>>,
    h_prev: Array2<f64>,
    out: Array2<f64>,
}

/// Runs an LSTM over packed inputs. Invalid positions leave the state
/// untouched, so the state at the last step is the final valid state.
fn lstm_forward(w: LstmWeights, xs: &Array2<f64>, pk: &Packed) -> LstmCache {
    let u = w.wh.nrows();
    let b = pk.b;
    let xw = xs.dot(w.wx) + w.b;
    let mut h = Array2::zeros((b, u));
    let mut c = Array2::<f64>::zeros((b, u));
    let mut out = Array2::zeros((pk.steps * b, u));
    let mut h_prev = Array2::zeros((pk.steps * b, u));
    let mut cache = LstmCache {
        act: Vec::with_capacity(pk.steps),
        tc: Vec::with_capacity(pk.steps),
        c_prev: Vec::with_capacity(pk.steps),
        h_prev: Array2::zeros((0, 0)),
        out: Array2::zeros((0, 0)),
    };
    for t in 0..pk.steps {
        let rows = pk.rows(t);
        let mut z = &xw.slice(s![rows.clone(), ..]) + &h.dot(w.wh);
        activate_gates(&mut z, u);
        h_prev.slice_mut(s![rows.clone(), ..]).assign(&h);
        let c_old = c.clone();
        let mut tc = Array2::zeros((b, u));
        for r in 0..b {
            if !pk.valid[rows.start + r] {
                continue;
            }
            for j in 0..u {
                let (i, f, g, o) = (z[[r, j]], z[[r, u + j]], z[[r, 2 * u + j]], z[[r, 3 * u + j]]);
                let cn = f * c_old[[r, j]] + i * g;
                let t_ = cn.tanh();
                c[[r, j]] = cn;
                h[[r, j]] = o * t_;
                tc[[r, j]] = t_;
            }
        }
        out.slice_mut(s![rows, ..]).assign(&h);
        cache.act.push(z);
        cache.tc.push(tc);
        cache.c_prev.push(c_old);
    }
    cache.h_prev = h_prev;
    cache.out = out;
    cache
}

struct LstmGrads {
    wx: Array2<f64>,
    wh: Array2<f64>,
    b: Array2<f64>,
    dx: Array2<f64>,
}

fn lstm_backward(w: LstmWeights, xs: &Array2<f64>, cache: &LstmCache, d_out: &Array2<f64>, pk: &Packed) -> LstmGrads {
    let u = w.wh.nrows();
    let b = pk.b;
    let mut dz_all = Array2::zeros((pk.steps * b, 4 * u));
    let mut dh = Array2::<f64>::zeros((b, u));
    let mut dc = Array2::<f64>::zeros((b, u));
    let wh_t = w.wh.t();
    for t in (0..pk.steps).rev() {
        let rows = pk.rows(t);
        dh += &d_out.slice(s![rows.clone(), ..]);
        let (act, tc, c_prev) = (&cache.act[t], &cache.tc[t], &cache.c_prev[t]);
        let mut dz = Array2::zeros((b, 4 * u));
        for r in 0..b {
            if !pk.valid[rows.start + r] {
                continue;
            }
            for j in 0..u {
                let (i, f, g, o) = (act[[r, j]], act[[r, u + j]], act[[r, 2 * u + j]], act[[r, 3 * u + j]]);
                let t_ = tc[[r, j]];
                let dhv = dh[[r, j]];
                let dcn = dc[[r, j]] + dhv * o * (1.0 - t_ * t_);
                dz[[r, j]] = dcn * g * i * (1.0 - i);
                dz[[r, u + j]] = dcn * c_prev[[r, j]] * f * (1.0 - f);
                dz[[r, 2 * u + j]] = dcn * i * (1.0 - g * g);
                dz[[r, 3 * u + j]] = dhv * t_ * o * (1.0 - o);
                dc[[r, j]] = dcn * f;
            }
        }
        let back = dz.dot(&wh_t);
        for r in 0..b {
            if pk.valid[rows.start + r] {
                dh.row_mut(r).assign(&back.row(r));
            }
        }
        dz_all.slice_mut(s![rows, ..]).assign(&dz);
    }
    LstmGrads {
        wx: xs.t().dot(&dz_all),
        wh: cache.h_prev.t().dot(&dz_all),
        b: dz_all.sum_axis(Axis(0)).insert_axis(Axis(0)),
        dx: dz_all.dot(&w.wx.t()),
    }
}

fn relu_drop(a: &Array2<f64>, d: Option<&Array2<f64>>) -> Array2<f64> {
    let mut h = a.mapv(|v| v.max(0.0));
    if let Some(d) = d {
        h *= d;
    }
    h
}

fn relu_drop_back(dout: &Array2<f64>, a: &Array2<f64>, d: Option<&Array2<f64>>) -> Array2<f64> {
    let mut g = dout.clone();
    g.zip_mut_with(a, |gv, &av| {
        if av <= 0.0 {
            *gv = 0.0
        }
    });
    if let Some(d) = d {
        g *= d;
    }
    g
}

#[derive(Default)]
struct Dropout {
    masks: [Option<Array2<f64>>; 5],
}

impl Dropout {
    fn sample(rate: f64, cfg: &RnnConfig, pk: &Packed, rng: &mut impl Rng) -> Self {
        if rate <= 0.0 {
            return Dropout::default();
        }
        let keep = 1.0 / (1.0 - rate);
        let mut mask = |r: usize, c: usize| {
            Some(Array2::from_shape_fn((r, c), |_| if rng.gen::<f64>() < rate { 0.0 } else { keep }))
        };
        let tb = pk.steps * pk.b;
        Dropout {
            masks: [
                mask(tb, cfg.mlp_hidden),
                mask(tb, cfg.mlp_out),
                mask(tb, cfg.lstm_units),
                mask(pk.b, cfg.mlp_hidden),
                mask(pk.b, cfg.mlp_out),
            ],
        }
    }

    fn get(&self, k: usize) -> Option<&Array2<f64>> {
        self.masks[k].as_ref()
    }
}

struct Cache {
    a1: Array2<f64>,
    h1: Array2<f64>,
    a2: Array2<f64>,
    e: Array2<f64>,
    l0: LstmCache,
    u: Array2<f64>,
    branches: Vec<LstmCache>,
    argmax: Array2<usize>,
    q: Array2<f64>,
    a3: Array2<f64>,
    r3: Array2<f64>,
    a4: Array2<f64>,
    r4: Array2<f64>,
    probs: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnModel {
    pub cfg: RnnConfig,
    pub params: Params,
    /// Per-feature standardization applied before the first layer.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

impl RnnModel {
    pub fn new(cfg: RnnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(RnnModel {
            params: Params::init(&cfg, &mut rng),
            cfg,
            input_mean: vec![0.0; NUM_BEAT_FEATURES],
            input_std: vec![1.0; NUM_BEAT_FEATURES],
        })
    }

    fn lstm_w(&self, l: usize) -> LstmWeights<'_> {
        let t = &self.params.tensors;
        LstmWeights {
            wx: &t[lstm(l)],
            wh: &t[lstm(l) + 1],
            b: &t[lstm(l) + 2],
        }
    }

    fn forward_cache(&self, pk: &Packed, drop: &Dropout) -> Cache {
        let t = &self.params.tensors;
        let u = self.cfg.lstm_units;
        let b = pk.b;
        let a1 = pk.x.dot(&t[W1]) + &t[B1];
        let h1 = relu_drop(&a1, drop.get(0));
        let a2 = h1.dot(&t[W2]) + &t[B2];
        let e = relu_drop(&a2, drop.get(1));
        let l0 = lstm_forward(self.lstm_w(0), &e, pk);
        let mut u_in = l0.out.clone();
        if let Some(d) = drop.get(2) {
            u_in *= d;
        }
        let branches: Vec<LstmCache> = (1..4).map(|l| lstm_forward(self.lstm_w(l), &u_in, pk)).collect();

        let mut q = Array2::zeros((b, 3 * u));
        let mut argmax = Array2::zeros((b, u));
        let last = pk.rows(pk.steps - 1).start;
        for i in 0..b {
            let n = pk.counts[i] as f64;
            for j in 0..u {
                let mut sum = 0.0;
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for step in 0..pk.steps {
                    let k = step * b + i;
                    if !pk.valid[k] {
                        continue;
                    }
                    sum += branches[0].out[[k, j]];
                    let v = branches[2].out[[k, j]];
                    if v > best {
                        best = v;
                        arg = step;
                    }
                }
                q[[i, j]] = sum / n;
                q[[i, u + j]] = branches[1].out[[last + i, j]];
                q[[i, 2 * u + j]] = best;
                argmax[[i, j]] = arg;
            }
        }
        let a3 = q.dot(&t[W3]) + &t[B3];
        let r3 = relu_drop(&a3, drop.get(3));
        let a4 = r3.dot(&t[W4]) + &t[B4];
        let r4 = relu_drop(&a4, drop.get(4));
        let mut probs = r4.dot(&t[W5]) + &t[B5];
        for mut row in probs.rows_mut() {
            let mut scores = [0.0; NUM_CLASSES];
            scores.iter_mut().zip(row.iter()).for_each(|(s, v)| *s = *v);
            let p = ClassProbabilities::softmax(&scores).0;
            row.iter_mut().zip(p).for_each(|(v, p)| *v = p);
        }
        Cache {
            a1,
            h1,
            a2,
            e,
            l0,
            u: u_in,
            branches,
            argmax,
            q,
            a3,
            r3,
            a4,
            r4,
            probs,
        }
    }

    fn backward(&self, pk: &Packed, drop: &Dropout, cache: &Cache, labels: &[usize], l2: f64) -> Params {
        let t = &self.params.tensors;
        let u = self.cfg.lstm_units;
        let b = pk.b;
        let mut g = Params::zeros_like(&self.params);
        let mut dlogits = cache.probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            dlogits[[i, y]] -= 1.0;
        }
        dlogits /= b as f64;
        let bias = |d: &Array2<f64>| d.sum_axis(Axis(0)).insert_axis(Axis(0));

        g.tensors[W5] = cache.r4.t().dot(&dlogits);
        g.tensors[B5] = bias(&dlogits);
        let da4 = relu_drop_back(&dlogits.dot(&t[W5].t()), &cache.a4, drop.get(4));
        g.tensors[W4] = cache.r3.t().dot(&da4);
        g.tensors[B4] = bias(&da4);
        let da3 = relu_drop_back(&da4.dot(&t[W4].t()), &cache.a3, drop.get(3));
        g.tensors[W3] = cache.q.t().dot(&da3);
        g.tensors[B3] = bias(&da3);
        let dq = da3.dot(&t[W3].t());

        let tb = pk.steps * b;
        let mut d_out = [Array2::zeros((tb, u)), Array2::zeros((tb, u)), Array2::zeros((tb, u))];
        let last = pk.rows(pk.steps - 1).start;
        for i in 0..b {
            let n = pk.counts[i] as f64;
            for j in 0..u {
                for step in 0..pk.steps {
                    let k = step * b + i;
                    if pk.valid[k] {
                        d_out[0][[k, j]] = dq[[i, j]] / n;
                    }
                }
                d_out[1][[last + i, j]] = dq[[i, u + j]];
                d_out[2][[cache.argmax[[i, j]] * b + i, j]] += dq[[i, 2 * u + j]];
            }
        }
        let mut du = Array2::zeros((tb, u));
        for l in 1..4 {
            let w = self.lstm_w(l);
            let gr = lstm_backward(w, &cache.u, &cache.branches[l - 1], &d_out[l - 1], pk);
            g.tensors[lstm(l)] = gr.wx;
            g.tensors[lstm(l) + 1] = gr.wh;
            g.tensors[lstm(l) + 2] = gr.b;
            du += &gr.dx;
        }
        if let Some(d) = drop.get(2) {
            du *= d;
        }
        let gr = lstm_backward(self.lstm_w(0), &cache.e, &cache.l0, &du, pk);
        g.tensors[lstm(0)] = gr.wx;
        g.tensors[lstm(0) + 1] = gr.wh;
        g.tensors[lstm(0) + 2] = gr.b;
        let da2 = relu_drop_back(&gr.dx, &cache.a2, drop.get(1));
        g.tensors[W2] = cache.h1.t().dot(&da2);
        g.tensors[B2] = bias(&da2);
        let da1 = relu_drop_back(&da2.dot(&t[W2].t()), &cache.a1, drop.get(0));
        g.tensors[W1] = pk.x.t().dot(&da1);
        g.tensors[B1] = bias(&da1);

        if l2 > 0.0 {
            for (i, (gt, pt)) in g.tensors.iter_mut().zip(t).enumerate() {
                if !is_bias(i) {
                    gt.scaled_add(2.0 * l2, pt);
                }
            }
        }
        g
    }

    /// Class probabilities for several sequences evaluated as one batch.
    pub fn predict_batch(&self, seqs: &[&BeatFeatureSequence]) -> Result<Vec<ClassProbabilities>> {
        let input: Vec<_> = seqs.iter().map(|s| (s.rows.as_slice(), None)).collect();
        let pk = Packed::new(self, &input)?;
        let cache = self.forward_cache(&pk, &Dropout::default());
        Ok(probs_of(&cache.probs))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let shapes = tensor_shapes(&self.cfg);
        let header = Header {
            version: FORMAT_VERSION,
            config: self.cfg.clone(),
            tensors: tensor_names()
                .into_iter()
                .zip(&shapes)
                .map(|(name, &(rows, cols))| TensorInfo { name, rows, cols })
                .collect(),
            input_mean: self.input_mean.clone(),
            input_std: self.input_std.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.params.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Shape(format!("sequence model file: {m}"));
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.version != FORMAT_VERSION {
            return Err(bad("unsupported version"));
        }
        header.config.validate()?;
        let shapes = tensor_shapes(&header.config);
        if header.tensors.len() != shapes.len()
            || header.tensors.iter().zip(&shapes).any(|(t, s)| (t.rows, t.cols) != *s)
            || header.input_mean.len() != NUM_BEAT_FEATURES
            || header.input_std.len() != NUM_BEAT_FEATURES
        {
            return Err(bad("tensor shapes disagree with the configuration"));
        }
        let mut blob = bytes[8 + hlen..].chunks_exact(8);
        let expected: usize = shapes.iter().map(|(r, c)| r * c).sum();
        if bytes.len() - 8 - hlen != 8 * expected {
            return Err(bad("parameter blob has the wrong size"));
        }
        let tensors = shapes
            .iter()
            .map(|&(r, c)| {
                Array2::from_shape_fn((r, c), |_| {
                    f64::from_le_bytes(blob.next().expect("size checked").try_into().expect("8 bytes"))
                })
            })
            .collect();
        Ok(RnnModel {
            cfg: header.config,
            params: Params { tensors },
            input_mean: header.input_mean,
            input_std: header.input_std,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RnnConfig,
    tensors: Vec<TensorInfo>,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
}

fn probs_of(p: &Array2<f64>) -> Vec<ClassProbabilities> {
    p.rows()
        .into_iter()
        .map(|r| {
            let mut a = [0.0; NUM_CLASSES];
            a.iter_mut().zip(r.iter()).for_each(|(x, v)| *x = *v);
            ClassProbabilities(a)
        })
        .collect()
}

/// Inference on one sequence; `mask[t] == false` excludes step `t`.
pub fn forward_masked(m: &RnnModel, rows: &[[f64; NUM_BEAT_FEATURES]], mask: &[bool]) -> Result<ClassProbabilities> {
    let pk = Packed::new(m, &[(rows, Some(mask))])?;
    let cache = m.forward_cache(&pk, &Dropout::default());
    Ok(probs_of(&cache.probs).remove(0))
}

pub fn forward(m: &RnnModel, seq: &BeatFeatureSequence) -> Result<ClassProbabilities> {
    let pk = Packed::new(m, &[(seq.rows.as_slice(), None)])?;
    let cache = m.forward_cache(&pk, &Dropout::default());
    Ok(probs_of(&cache.probs).remove(0))
}

/// Mean clamped cross-entropy of the predicted rows against labels.
fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln())
        .sum();
    total / labels.len() as f64
}

/// Loss (mean cross-entropy plus `l2` times the squared kernel norm) and its
/// gradient. With `dropout_seed` set, dropout masks are drawn from a
/// generator seeded with it, so repeated calls see the same masks.
pub fn loss_and_gradients(
    m: &RnnModel,
    seqs: &[&BeatFeatureSequence],
    labels: &[usize],
    l2: f64,
    dropout_seed: Option<u64>,
) -> Result<(f64, Params)> {
    if seqs.len() != labels.len() {
        return Err(Error::Shape("sequences and labels differ in count".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    let input: Vec<_> = seqs.iter().map(|s| (s.rows.as_slice(), None)).collect();
    let pk = Packed::new(m, &input)?;
    let drop = match dropout_seed {
        Some(seed) => Dropout::sample(m.cfg.dropout_rate, &m.cfg, &pk, &mut ChaCha8Rng::seed_from_u64(seed)),
        None => Dropout::default(),
    };
    let cache = m.forward_cache(&pk, &drop);
    let loss = cross_entropy(&cache.probs, labels) + l2 * m.params.weight_sq_sum();
    let grads = m.backward(&pk, &drop, &cache, labels, l2);
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
}

impl AdamState {
    pub fn new(p: &Params) -> Self {
        AdamState {
            m: Params::zeros_like(p),
            v: Params::zeros_like(p),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(params: &mut Params, grads: &Params, state: &mut AdamState, t: u64, lr: f64) {
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for k in 0..params.tensors.len() {
        let p = params.tensors[k].as_slice_mut().expect("standard layout");
        let g = grads.tensors[k].as_slice().expect("standard layout");
        let m = state.m.tensors[k].as_slice_mut().expect("standard layout");
        let v = state.v.tensors[k].as_slice_mut().expect("standard layout");
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Seeded stratified split; returns (train, validation) indices.
pub fn stratified_split(labels: &[usize], val_frac: f64, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..NUM_CLASSES {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let n_val = if idx.len() >= 2 {
            ((val_frac * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::DegenerateData("cannot form a stratified validation split".into()));
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

fn fit_standardization(seqs: &[&BeatFeatureSequence]) -> (Vec<f64>, Vec<f64>) {
    let n: usize = seqs.iter().map(|s| s.len()).sum();
    let mut mean = vec![0.0; NUM_BEAT_FEATURES];
    for row in seqs.iter().flat_map(|s| &s.rows) {
        for j in 0..NUM_BEAT_FEATURES {
            mean[j] += row[j] / n as f64;
        }
    }
    let mut var = vec![0.0; NUM_BEAT_FEATURES];
    for row in seqs.iter().flat_map(|s| &s.rows) {
        for j in 0..NUM_BEAT_FEATURES {
            var[j] += (row[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let std = var.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, std)
}

/// Groups indices into batches of similar length: buckets of
/// `bucket_width` beats, shuffled within buckets, then batch order shuffled.
fn make_batches(idx: &[usize], lens: &[usize], cfg: &RnnConfig, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut buckets: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in idx {
        buckets.entry((lens[i].max(1) - 1) / cfg.bucket_width).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut members) in buckets {
        members.shuffle(rng);
        batches.extend(members.chunks(cfg.batch).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Mean cross-entropy and accuracy without dropout.
pub fn evaluate(m: &RnnModel, seqs: &[&BeatFeatureSequence], labels: &[usize]) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by_key(|&i| (seqs[i].len(), i));
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in order.chunks(m.cfg.batch.max(1)) {
        let batch: Vec<&BeatFeatureSequence> = chunk.iter().map(|&i| seqs[i]).collect();
        for (p, &i) in m.predict_batch(&batch)?.iter().zip(chunk) {
            loss -= p.0[labels[i]].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln();
            correct += (p.argmax() as usize == labels[i]) as usize;
        }
    }
    let n = seqs.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains with a stratified validation split, plateau learning-rate decay and
/// early stopping; returns the best-validation parameters and the learning
/// curve.
pub fn train_rnn_with_history(
    seqs: &[BeatFeatureSequence],
    labels: &[usize],
    cfg: &RnnConfig,
    seed: u64,
) -> Result<(RnnModel, Vec<EpochLog>)> {
    cfg.validate()?;
    if seqs.len() != labels.len() {
        return Err(Error::Shape("sequences and labels differ in count".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    if seqs.iter().any(|s| s.len() == 0) {
        return Err(Error::DegenerateData("empty beat sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_idx, val_idx) = stratified_split(labels, cfg.val_frac, &mut rng)?;
    let train_seqs: Vec<&BeatFeatureSequence> = train_idx.iter().map(|&i| &seqs[i]).collect();
    let val_seqs: Vec<&BeatFeatureSequence> = val_idx.iter().map(|&i| &seqs[i]).collect();
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut model = RnnModel::new(cfg.clone(), rng.gen())?;
    let (mean, std) = fit_standardization(&train_seqs);
    model.input_mean = mean;
    model.input_std = std;
    let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();

    let mut adam = AdamState::new(&model.params);
    let mut step = 0u64;
    let mut best = (f64::INFINITY, model.params.clone());
    let (mut since_best, mut wait, mut plateaus) = (0, 0, 0);
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_after(plateaus);
        let mut train_loss = 0.0;
        for batch in make_batches(&train_idx, &lens, cfg, &mut rng) {
            let bs: Vec<&BeatFeatureSequence> = batch.iter().map(|&i| &seqs[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = loss_and_gradients(&model, &bs, &ys, cfg.l2, Some(rng.gen()))?;
            step += 1;
            adam_step(&mut model.params, &grads, &mut adam, step, lr);
            train_loss += loss * batch.len() as f64;
        }
        let (val_loss, val_accuracy) = evaluate(&model, &val_seqs, &val_labels)?;
        history.push(EpochLog {
            epoch,
            lr,
            train_loss: train_loss / train_idx.len() as f64,
            val_loss,
            val_accuracy,
        });
        if val_loss < best.0 {
            best = (val_loss, model.params.clone());
            since_best = 0;
            wait = 0;
        } else {
            since_best += 1;
            wait += 1;
            if wait >= cfg.plateau_patience {
                plateaus += 1;
                wait = 0;
            }
            if since_best >= cfg.early_stop {
                break;
            }
        }
    }
    model.params = best.1;
    if !model.params.is_finite() {
        return Err(Error::DegenerateData("training diverged".into()));
    }
    Ok((model, history))
}

pub fn train_rnn(seqs: &[BeatFeatureSequence], labels: &[usize], cfg: &RnnConfig, seed: u64) -> Result<RnnModel> {
    train_rnn_with_history(seqs, labels, cfg, seed).map(|(m, _)| m)
}
